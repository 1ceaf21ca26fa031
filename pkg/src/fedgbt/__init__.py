"""Federated gradient-boosted-tree intrusion detection with exact Shapley
explanations.

Subpackages: `dataset` (ingestion/preparation), `gbdt` (boosted trees and
the wire format), `shapley` (exact attributions and archives), `metrics`
(evaluation), `federation` (round orchestration), `report` (tables and
figures), `cli` (command-line front end).
"""

from .dataset import (
    DataError,
    FeatureMatrix,
    NormalizationParams,
    PartitionPlan,
    RawTable,
    synth_generate,
)
from .federation import (
    FederationConfig,
    FederationReport,
    PreparedData,
    run_federation,
)
from .gbdt import Ensemble, ModelFormatError, TrainConfig, TreeNode, boost_round, deserialize, serialize
from .metrics import ConfusionMatrix, MetricsReport, evaluate
from .shapley import GLOBAL_CLIENT, ShapRecord, ShapVector, explain_batch, shap_exact

__version__ = "0.1.0"
