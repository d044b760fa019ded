"""Trees, forests and their priors.

A :class:`Tree` is stored in preorder: node ``k``'s left child is ``k + 1``
and its right child is ``right[k]``.  Internal nodes carry a split
``x[var] <= value``; leaves carry their response increment in ``value``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import kernels

FOREST_FORMAT_VERSION = 1

# leaf prior scale numerator, sigma_mu = c / (k sqrt(K))
LEAF_SCALE = {"continuous": 0.5, "binary": 3.0}


class SplitRule(NamedTuple):
    var_index: int
    cut_value: float


@dataclass(frozen=True, eq=False)
class Tree:
    var: np.ndarray
    value: np.ndarray
    right: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        for name, dtype in (("var", np.int32), ("value", np.float64), ("right", np.int32), ("depth", np.int32)):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=dtype))
        n = len(self.var)
        if not (len(self.value) == len(self.right) == len(self.depth) == n) or n == 0:
            raise ValueError("tree arrays must be nonempty and of equal length")
        n_int = int(np.sum(self.var >= 0))
        if n != 2 * n_int + 1:
            raise ValueError("not a proper binary tree: every internal node needs two children")

    @classmethod
    def leaf(cls, mu: float = 0.0) -> "Tree":
        return cls([-1], [mu], [-1], [0])

    @classmethod
    def split(cls, var_index: int, cut_value: float, left: "Tree", right: "Tree") -> "Tree":
        n_left = len(left)
        return cls(
            np.concatenate([[var_index], left.var, right.var]),
            np.concatenate([[cut_value], left.value, right.value]),
            np.concatenate([[1 + n_left], _shift(left.right, 1), _shift(right.right, 1 + n_left)]),
            np.concatenate([[0], left.depth + 1, right.depth + 1]),
        )

    def __len__(self):
        return len(self.var)

    def __eq__(self, other):
        if not isinstance(other, Tree):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("var", "value", "right", "depth"))

    @property
    def is_leaf(self) -> np.ndarray:
        return self.var < 0

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.var < 0))

    @property
    def n_internal(self) -> int:
        return int(np.sum(self.var >= 0))

    @property
    def leaf_values(self) -> np.ndarray:
        return self.value[self.var < 0]

    def rule(self, k: int) -> SplitRule:
        if self.var[k] < 0:
            raise ValueError(f"node {k} is a leaf")
        return SplitRule(int(self.var[k]), float(self.value[k]))

    def with_leaf_values(self, values) -> "Tree":
        value = self.value.copy()
        value[self.var < 0] = values
        return Tree(self.var, value, self.right, self.depth)

    def scaled(self, c: float) -> "Tree":
        return self.with_leaf_values(self.leaf_values * c)

    def to_nodes(self) -> list:
        """Preorder node list with explicit node kind (the JSON layout)."""
        nodes = []
        for k in range(len(self)):
            if self.var[k] >= 0:
                nodes.append({"kind": "split", "var": int(self.var[k]), "cut": float(self.value[k])})
            else:
                nodes.append({"kind": "leaf", "mu": float(self.value[k])})
        return nodes

    @classmethod
    def from_nodes(cls, nodes: Sequence[dict]) -> "Tree":
        pos = 0

        def build():
            nonlocal pos
            if pos >= len(nodes):
                raise ValueError("truncated preorder node list")
            node = nodes[pos]
            pos += 1
            kind = node.get("kind")
            if kind == "leaf":
                return cls.leaf(float(node["mu"]))
            if kind == "split":
                left = build()
                right = build()
                return cls.split(int(node["var"]), float(node["cut"]), left, right)
            raise ValueError(f"unknown node kind {kind!r}")

        tree = build()
        if pos != len(nodes):
            raise ValueError("trailing nodes after a complete tree")
        return tree


def _shift(right, offset):
    right = np.asarray(right)
    return np.where(right >= 0, right + offset, right)


@dataclass(frozen=True)
class Hyperparams:
    """All prior knobs; ``s`` is renormalised on construction."""

    alpha: float
    beta: float
    k: float
    nu: float
    lam: float
    s: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64).ravel()
        if s.size == 0 or not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("covariate weights must be finite and strictly positive")
        s = s / s.sum()
        s.setflags(write=False)
        object.__setattr__(self, "s", s)
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        for name in ("beta", "k", "nu", "lam"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value}")

    @classmethod
    def uniform(cls, p: int, alpha=0.95, beta=2.0, k=2.0, nu=10.0, lam=1.0) -> "Hyperparams":
        return cls(alpha, beta, k, nu, lam, np.full(p, 1.0 / p))

    @property
    def p(self) -> int:
        return self.s.size

    def replace(self, **changes) -> "Hyperparams":
        values = {f: getattr(self, f) for f in ("alpha", "beta", "k", "nu", "lam", "s")}
        values.update(changes)
        return Hyperparams(**values)

    def sigma_mu(self, n_trees: int, response_kind: str = "continuous") -> float:
        return LEAF_SCALE[response_kind] / (self.k * math.sqrt(n_trees))

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "k": self.k, "nu": self.nu, "lam": self.lam,
                "s": [float(v) for v in self.s]}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(d["alpha"], d["beta"], d["k"], d["nu"], d["lam"], np.asarray(d["s"]))


@dataclass(frozen=True, eq=False)
class Forest:
    trees: list
    sigma2: float
    n_features: int
    response_scaling: Optional[tuple] = None

    def __post_init__(self):
        if len(self.trees) < 1:
            raise ValueError("a forest needs at least one tree")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def K(self) -> int:
        return len(self.trees)

    def to_json(self) -> str:
        doc = {
            "version": FOREST_FORMAT_VERSION,
            "K": self.K,
            "n_features": self.n_features,
            "sigma2": float(self.sigma2),
            "response_scaling": None if self.response_scaling is None else
            {"min": float(self.response_scaling[0]), "max": float(self.response_scaling[1])},
            "trees": [t.to_nodes() for t in self.trees],
        }
        return json.dumps(doc, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        doc = json.loads(text)
        if doc.get("version") != FOREST_FORMAT_VERSION:
            raise ValueError(f"unsupported forest format version {doc.get('version')!r}")
        trees = [Tree.from_nodes(nodes) for nodes in doc["trees"]]
        if len(trees) != doc["K"]:
            raise ValueError("K does not match the number of trees")
        scaling = doc.get("response_scaling")
        if scaling is not None:
            scaling = (scaling["min"], scaling["max"])
        return cls(trees, doc["sigma2"], doc["n_features"], scaling)


def predict_tree(tree: Tree, x) -> float:
    k = 0
    var, value, right = tree.var, tree.value, tree.right
    while var[k] >= 0:
        k = k + 1 if x[var[k]] <= value[k] else right[k]
    return float(value[k])


def pack_trees(trees: Sequence[Tree]):
    """Concatenate trees into the flat preorder buffers the kernels use."""
    sizes = np.array([len(t) for t in trees], dtype=np.int64)
    ptr = np.concatenate([[0], np.cumsum(sizes)])
    return (ptr,
            np.concatenate([t.var for t in trees]),
            np.concatenate([t.value for t in trees]),
            np.concatenate([t.right for t in trees]))


def predict_forest(forest: Forest, X) -> np.ndarray:
    """Sum of tree predictions (latent scale, no response unscaling)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise ValueError(f"X must have {forest.n_features} columns, got shape {X.shape}")
    ptr, var, value, right = pack_trees(forest.trees)
    return kernels.predict_draws(ptr, var, value, right, forest.K, X)[0]


def tree_structure_logprior(tree: Tree, alpha: float, beta: float, s) -> float:
    """Split-probability and split-variable part of the tree prior.

    Returns ``-inf`` when an internal node has zero prior split probability.
    """
    s = np.asarray(s, dtype=np.float64)
    internal = tree.var >= 0
    d_int = tree.depth[internal].astype(np.float64)
    d_leaf = tree.depth[~internal].astype(np.float64)
    p_leaf = alpha * (1.0 + d_leaf) ** (-beta)
    if np.any(p_leaf >= 1.0):
        raise FloatingPointError("split probability >= 1 at a terminal node")
    total = float(np.sum(np.log1p(-p_leaf)))
    if internal.any():
        with np.errstate(divide="ignore"):
            total += float(np.sum(np.log(s[tree.var[internal]])))
            total += float(np.sum(np.log(alpha * (1.0 + d_int) ** (-beta))))
    return total


def log_prior_tree(tree: Tree, hyper: Hyperparams) -> float:
    return tree_structure_logprior(tree, hyper.alpha, hyper.beta, hyper.s)


def log_prior_leaves(tree: Tree, sigma_mu: float) -> float:
    if not sigma_mu > 0:
        raise ValueError("sigma_mu must be positive")
    mu = tree.leaf_values
    return float(np.sum(-0.5 * math.log(2 * math.pi) - math.log(sigma_mu) - 0.5 * (mu / sigma_mu) ** 2))


def sample_prior_tree(alpha, beta, s, cutpoints, rng, sigma_mu=None, max_depth=64) -> Tree:
    """Draw a tree from the generative structure prior.

    ``cutpoints[j]`` holds the admissible cuts of covariate ``j``; leaf values
    are drawn from ``N(0, sigma_mu^2)`` when ``sigma_mu`` is given, else 0.
    """
    s = np.asarray(s, dtype=np.float64)
    s_cum = np.cumsum(s / s.sum())

    def grow(d):
        if d >= max_depth:
            raise RuntimeError("prior tree exceeded max_depth")
        if rng.random() < alpha * (1.0 + d) ** (-beta):
            j = min(int(np.searchsorted(s_cum, rng.random(), side="right")), len(s) - 1)
            cuts = cutpoints[j]
            c = float(cuts[int(rng.random() * len(cuts))]) if len(cuts) else 0.0
            left = grow(d + 1)
            right = grow(d + 1)
            return Tree.split(j, c, left, right)
        mu = 0.0 if sigma_mu is None else float(rng.normal(0.0, sigma_mu))
        return Tree.leaf(mu)

    tree = grow(0)
    return tree
