"""Gradient-boosted regression trees for weighted binary logistic loss.

Second-order boosting: each round fits exactly one tree to the
gradient/hessian of the weighted log-loss at the current margins, using an
exact greedy split search over every feature and every midpoint between
consecutive distinct sorted values. Ensembles are append-only, so resuming
training from a deserialized model is bit-identical to having kept the
model in process the whole time.

Model binary format (little-endian, no padding):

    magic "FGBT" | u16 version=1 | u32 n_features | f64 base_margin
    | f64 lambda | f64 gamma | f64 eta | u16 max_depth | u32 tree_count
    then per tree: u32 node_count followed by nodes in pre-order, each
    {u8 kind, u32 feature_index, f64 threshold, f64 value, f64 cover,
     u32 left, u32 right}

kind 0 = internal, 1 = leaf; unused fields are zeroed. left/right are
pre-order indices within the tree's own node array.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dataset import FeatureMatrix

__all__ = [
    "ModelFormatError",
    "TrainConfig",
    "TreeNode",
    "Ensemble",
    "sigmoid",
    "compute_pos_weight",
    "grad_hess",
    "grow_tree",
    "boost_round",
    "predict_margin",
    "predict_proba",
    "predict_label",
    "predict_margin_batch",
    "predict_proba_batch",
    "predict_label_batch",
    "serialize",
    "deserialize",
]


class ModelFormatError(ValueError):
    """Raised when model bytes cannot be decoded into a valid ensemble."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one boosting round.

    reg_lambda: L2 penalty on leaf values.
    gamma: minimum gain required to keep a split.
    eta: learning rate, folded into leaf values.
    max_depth: maximum tree depth (root has depth 0).
    min_child_cover: minimum hessian sum per child for a split to be legal.
    """

    reg_lambda: float = 1.0
    gamma: float = 0.0
    eta: float = 0.3
    max_depth: int = 6
    min_child_cover: float = 1.0

    def __post_init__(self) -> None:
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must be in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_child_cover < 0:
            raise ValueError("min_child_cover must be >= 0")


@dataclass
class TreeNode:
    """One node of a regression tree.

    Leaves carry `value` (margin contribution); internal nodes carry the
    split (feature_index, threshold) and children. `cover` is the hessian
    sum of the training rows routed through the node. Routing rule: a row
    goes left iff row[feature_index] < threshold.
    """

    cover: float
    value: float = 0.0
    feature_index: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def node_count(self) -> int:
        if self.is_leaf:
            return 1
        return 1 + self.left.node_count() + self.right.node_count()


@dataclass
class Ensemble:
    """An ordered, append-only list of trees plus a base margin.

    The recorded hyperparameters are those of the most recent boosting
    round; they ride along in the serialized form.
    """

    base_margin: float
    trees: list[TreeNode]
    n_features: int
    reg_lambda: float = 1.0
    gamma: float = 0.0
    eta: float = 0.3
    max_depth: int = 6

    @classmethod
    def fresh(cls, n_features: int, config: TrainConfig) -> "Ensemble":
        return cls(
            base_margin=0.0,
            trees=[],
            n_features=n_features,
            reg_lambda=config.reg_lambda,
            gamma=config.gamma,
            eta=config.eta,
            max_depth=config.max_depth,
        )


def sigmoid(margin):
    """Logistic link, stable for |margin| well past 700.

    Accepts a scalar or array; returns float for scalar input.
    """
    arr = np.atleast_1d(np.asarray(margin, dtype=np.float64))
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    if np.ndim(margin) == 0:
        return float(out[0])
    return out


def compute_pos_weight(labels) -> float:
    """Positive-class sample weight: count(negatives) / count(positives)."""
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("pos_weight needs at least one sample of each class")
    return n_neg / n_pos


def grad_hess(label: int, probability: float, pos_weight: float) -> tuple[float, float]:
    """Gradient and hessian of the weighted log-loss at one sample."""
    if not 0.0 < probability < 1.0:
        raise ValueError("probability must be in (0, 1)")
    w = pos_weight if label == 1 else 1.0
    g = w * (probability - label)
    h = w * probability * (1.0 - probability)
    return g, h


def _grad_hess_arrays(labels, probs, pos_weight):
    w = np.where(labels == 1, pos_weight, 1.0)
    return w * (probs - labels), w * probs * (1.0 - probs)


def _best_split(features, g, h, idx, total_g, total_h, config):
    """Exact greedy search over all features and all midpoints.

    Returns (feature_index, threshold) or None when no candidate has a
    strictly positive gain. Gain ties break to the lower feature index and
    then the lower threshold (argmax on ascending thresholds keeps the
    first maximum; features are scanned in ascending order with a strict
    improvement test).
    """
    lam = config.reg_lambda
    parent_score = total_g * total_g / (total_h + lam)
    best_gain = 0.0
    best = None
    g_node = g[idx]
    h_node = h[idx]
    for f in range(features.shape[1]):
        vals = features[idx, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        cg = np.cumsum(g_node[order])
        ch = np.cumsum(h_node[order])
        cut = np.flatnonzero(sv[:-1] != sv[1:])
        if cut.size == 0:
            continue
        gl, hl = cg[cut], ch[cut]
        gr, hr = total_g - gl, total_h - hl
        gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent_score) - config.gamma
        gain[(hl < config.min_child_cover) | (hr < config.min_child_cover)] = -np.inf
        j = int(np.argmax(gain))
        if gain[j] > best_gain:
            best_gain = float(gain[j])
            best = (f, float((sv[cut[j]] + sv[cut[j] + 1]) / 2.0))
    return best


def _build_node(features, g, h, idx, depth, config) -> TreeNode:
    total_g = float(np.sum(g[idx]))
    total_h = float(np.sum(h[idx]))
    value = -config.eta * total_g / (total_h + config.reg_lambda)
    if depth >= config.max_depth or idx.size < 2:
        return TreeNode(cover=total_h, value=value)
    split = _best_split(features, g, h, idx, total_g, total_h, config)
    if split is None:
        return TreeNode(cover=total_h, value=value)
    f, thr = split
    go_left = features[idx, f] < thr
    left_idx = idx[go_left]
    right_idx = idx[~go_left]
    if left_idx.size == 0 or right_idx.size == 0:
        # Midpoint of two adjacent floats can collapse onto one of them.
        return TreeNode(cover=total_h, value=value)
    return TreeNode(
        cover=total_h,
        feature_index=f,
        threshold=thr,
        left=_build_node(features, g, h, left_idx, depth + 1, config),
        right=_build_node(features, g, h, right_idx, depth + 1, config),
    )


def grow_tree(features, g, h, config: TrainConfig) -> TreeNode:
    """Grow one regression tree on per-row gradients/hessians.

    Split gain is 0.5*(GL^2/(HL+lambda) + GR^2/(HR+lambda)
    - (GL+GR)^2/(HL+HR+lambda)) - gamma; growth stops at max_depth, when
    the best gain is <= 0, or when a child's cover would fall below
    min_child_cover. Leaf value is -eta*G/(H+lambda).
    """
    features = np.asarray(features, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be 2-dimensional")
    if not (features.shape[0] == g.shape[0] == h.shape[0]):
        raise ValueError("features, g and h must have equal row counts")
    if features.shape[0] == 0:
        raise ValueError("at least one row is required")
    idx = np.arange(features.shape[0])
    return _build_node(features, g, h, idx, 0, config)


def boost_round(
    model: Ensemble | None,
    train: FeatureMatrix,
    config: TrainConfig,
    pos_weight: float,
) -> Ensemble:
    """Run exactly one boosting round, appending one tree.

    With no incoming model, training starts from margin 0. Existing trees
    are never modified; the returned ensemble shares them.
    """
    if model is None:
        model = Ensemble.fresh(train.n_features, config)
    if model.n_features != train.n_features:
        raise ValueError(
            f"model expects {model.n_features} features, data has {train.n_features}"
        )
    margins = predict_margin_batch(model, train.features)
    probs = sigmoid(margins)
    g, h = _grad_hess_arrays(train.labels, probs, pos_weight)
    tree = grow_tree(train.features, g, h, config)
    return Ensemble(
        base_margin=model.base_margin,
        trees=[*model.trees, tree],
        n_features=model.n_features,
        reg_lambda=config.reg_lambda,
        gamma=config.gamma,
        eta=config.eta,
        max_depth=config.max_depth,
    )


def _route(node: TreeNode, row) -> TreeNode:
    while not node.is_leaf:
        node = node.left if row[node.feature_index] < node.threshold else node.right
    return node


def predict_margin(model: Ensemble, row) -> float:
    """Base margin plus the routed leaf value of every tree."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (model.n_features,):
        raise ValueError(f"row must have {model.n_features} features")
    total = model.base_margin
    for tree in model.trees:
        total += _route(tree, row).value
    return float(total)


def predict_proba(model: Ensemble, row) -> float:
    return sigmoid(predict_margin(model, row))


def predict_label(model: Ensemble, row) -> int:
    return 1 if predict_proba(model, row) >= 0.5 else 0


def _flatten(root: TreeNode):
    """Pre-order arrays (kind, feature, threshold, value, cover, left, right)."""
    kind, feat, thr, val, cov, left, right = [], [], [], [], [], [], []

    def walk(node: TreeNode) -> int:
        i = len(kind)
        kind.append(1 if node.is_leaf else 0)
        feat.append(node.feature_index if not node.is_leaf else 0)
        thr.append(node.threshold if not node.is_leaf else 0.0)
        val.append(node.value if node.is_leaf else 0.0)
        cov.append(node.cover)
        left.append(0)
        right.append(0)
        if not node.is_leaf:
            left[i] = walk(node.left)
            right[i] = walk(node.right)
        return i

    walk(root)
    return (
        np.array(kind, dtype=np.uint8),
        np.array(feat, dtype=np.int64),
        np.array(thr, dtype=np.float64),
        np.array(val, dtype=np.float64),
        np.array(cov, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
    )


def predict_margin_batch(model: Ensemble, features) -> np.ndarray:
    """Vectorized `predict_margin` over a feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ValueError(f"features must be (n, {model.n_features})")
    margins = np.full(x.shape[0], model.base_margin, dtype=np.float64)
    if x.shape[0] == 0:
        return margins
    for tree in model.trees:
        kind, feat, thr, val, _, left, right = _flatten(tree)
        node = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            internal = np.flatnonzero(kind[node] == 0)
            if internal.size == 0:
                break
            cur = node[internal]
            go_left = x[internal, feat[cur]] < thr[cur]
            node[internal] = np.where(go_left, left[cur], right[cur])
        margins += val[node]
    return margins


def predict_proba_batch(model: Ensemble, features) -> np.ndarray:
    return sigmoid(predict_margin_batch(model, features))


def predict_label_batch(model: Ensemble, features) -> np.ndarray:
    return (predict_proba_batch(model, features) >= 0.5).astype(np.int64)


_MAGIC = b"FGBT"
_VERSION = 1
_HEADER = struct.Struct("<4sHIddddHI")
_COUNT = struct.Struct("<I")
_NODE = struct.Struct("<BIdddII")


def serialize(model: Ensemble) -> bytes:
    """Encode the ensemble into the self-describing binary format."""
    parts = [
        _HEADER.pack(
            _MAGIC,
            _VERSION,
            model.n_features,
            model.base_margin,
            model.reg_lambda,
            model.gamma,
            model.eta,
            model.max_depth,
            len(model.trees),
        )
    ]
    for tree in model.trees:
        kind, feat, thr, val, cov, left, right = _flatten(tree)
        parts.append(_COUNT.pack(len(kind)))
        for i in range(len(kind)):
            parts.append(
                _NODE.pack(
                    int(kind[i]),
                    int(feat[i]),
                    float(thr[i]),
                    float(val[i]),
                    float(cov[i]),
                    int(left[i]),
                    int(right[i]),
                )
            )
    return b"".join(parts)


def _rebuild_tree(nodes, n_features: int) -> TreeNode:
    n = len(nodes)
    visited = set()

    def build(i: int) -> TreeNode:
        if not 0 <= i < n:
            raise ModelFormatError(f"node index {i} out of range")
        if i in visited:
            raise ModelFormatError(f"node index {i} referenced twice")
        visited.add(i)
        kind, feat, thr, val, cov, left, right = nodes[i]
        if cov <= 0 or not np.isfinite(cov):
            raise ModelFormatError(f"node {i}: cover must be positive and finite")
        if kind == 1:
            return TreeNode(cover=cov, value=val)
        if kind != 0:
            raise ModelFormatError(f"node {i}: unknown kind {kind}")
        if feat >= n_features:
            raise ModelFormatError(f"node {i}: feature index {feat} out of range")
        node = TreeNode(
            cover=cov,
            feature_index=feat,
            threshold=thr,
            left=build(left),
            right=build(right),
        )
        child_sum = node.left.cover + node.right.cover
        if abs(cov - child_sum) > 1e-9 * max(abs(cov), 1e-12):
            raise ModelFormatError(f"node {i}: cover != left.cover + right.cover")
        return node

    root = build(0)
    if len(visited) != n:
        raise ModelFormatError("unreachable nodes in tree payload")
    return root


def deserialize(data: bytes) -> Ensemble:
    """Decode model bytes, validating structure and invariants."""
    if len(data) < _HEADER.size:
        raise ModelFormatError("payload shorter than header")
    magic, version, n_features, base_margin, lam, gamma, eta, max_depth, tree_count = (
        _HEADER.unpack_from(data, 0)
    )
    if magic != _MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    offset = _HEADER.size
    trees = []
    for t in range(tree_count):
        if offset + _COUNT.size > len(data):
            raise ModelFormatError(f"tree {t}: truncated node count")
        (node_count,) = _COUNT.unpack_from(data, offset)
        offset += _COUNT.size
        if node_count < 1:
            raise ModelFormatError(f"tree {t}: empty node list")
        payload = node_count * _NODE.size
        if offset + payload > len(data):
            raise ModelFormatError(f"tree {t}: truncated node payload")
        nodes = [
            _NODE.unpack_from(data, offset + i * _NODE.size) for i in range(node_count)
        ]
        offset += payload
        trees.append(_rebuild_tree(nodes, n_features))
    if offset != len(data):
        raise ModelFormatError("trailing bytes after last tree")
    return Ensemble(
        base_margin=base_margin,
        trees=trees,
        n_features=n_features,
        reg_lambda=lam,
        gamma=gamma,
        eta=eta,
        max_depth=max_depth,
    )
