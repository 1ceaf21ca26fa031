"""Shared generators for randomized model and data instances."""

from __future__ import annotations

import numpy as np

from fedgbt.gbdt import Ensemble, TreeNode


def random_tree(rng: np.random.Generator, n_features: int, max_depth: int) -> TreeNode:
    """Random tree with internal covers equal to the sum of their children."""

    def build(depth: int) -> TreeNode:
        if depth >= max_depth or rng.random() < 0.3:
            return TreeNode(
                cover=float(rng.uniform(0.5, 10.0)),
                value=float(rng.normal()),
            )
        left = build(depth + 1)
        right = build(depth + 1)
        return TreeNode(
            cover=left.cover + right.cover,
            feature_index=int(rng.integers(0, n_features)),
            threshold=float(rng.uniform(-1.0, 1.0)),
            left=left,
            right=right,
        )

    node = build(0)
    if node.is_leaf:
        # Guarantee at least one split so the tree is not a constant.
        other = TreeNode(cover=float(rng.uniform(0.5, 10.0)), value=float(rng.normal()))
        node = TreeNode(
            cover=node.cover + other.cover,
            feature_index=int(rng.integers(0, n_features)),
            threshold=float(rng.uniform(-1.0, 1.0)),
            left=node,
            right=other,
        )
    return node


def random_ensemble(
    rng: np.random.Generator,
    n_features: int,
    max_depth: int,
    n_trees: int,
    base_margin: float = 0.0,
) -> Ensemble:
    return Ensemble(
        base_margin=base_margin,
        trees=[random_tree(rng, n_features, max_depth) for _ in range(n_trees)],
        n_features=n_features,
        max_depth=max_depth,
    )
