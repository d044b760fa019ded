"""Co-data design matrices and the binomial-logistic covariate-weight model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit

DUMMY = "dummy"
CONTINUOUS = "continuous"

RIDGE = 1e-6
SCORE_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 40


class RankDeficientError(ValueError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"co-data matrix is rank deficient; dependent columns: {', '.join(self.columns)}")


class CoDataFitError(RuntimeError):
    def __init__(self, message, eta):
        self.eta = np.asarray(eta)
        super().__init__(f"{message} (last eta = {np.array2string(self.eta, precision=6)})")


@dataclass(frozen=True, eq=False)
class CoDataMatrix:
    values: np.ndarray
    names: tuple
    kinds: tuple
    groups: Optional[np.ndarray] = None  # group label of each covariate for the primary grouping, if any

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError("co-data values must be a nonempty p x kappa matrix")
        if not np.all(np.isfinite(values)):
            raise ValueError("co-data contains non-finite values")
        names = tuple(str(n) for n in self.names)
        kinds = tuple(self.kinds)
        if len(names) != values.shape[1] or len(kinds) != values.shape[1]:
            raise ValueError("need one name and one kind per co-data column")
        if len(set(names)) != len(names):
            raise ValueError("co-data column names must be unique")
        for name, kind, col in zip(names, kinds, values.T):
            if kind not in (DUMMY, CONTINUOUS):
                raise ValueError(f"column {name!r}: unknown kind {kind!r}")
            if kind == DUMMY and not np.all((col == 0) | (col == 1)):
                raise ValueError(f"dummy column {name!r} must be 0/1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "kinds", kinds)
        if self.groups is not None:
            groups = np.asarray(self.groups, dtype=np.int64)
            if groups.shape != (values.shape[0],):
                raise ValueError("groups must have one label per covariate")
            object.__setattr__(self, "groups", groups)

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def kappa(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class CoDataFit:
    eta: np.ndarray
    converged: bool
    iterations: int
    weights: np.ndarray
    objective: float
    objective_trace: tuple = ()


def build_grouping_codata(p: int, group_of, prefix: str = "group") -> CoDataMatrix:
    """Full dummy coding of a grouping: column ``g`` indicates membership of group ``g``."""
    group_of = np.asarray(group_of)
    if group_of.shape != (p,):
        raise ValueError(f"need {p} group labels, got shape {group_of.shape}")
    if not np.issubdtype(group_of.dtype, np.integer):
        if not np.all(group_of == np.round(group_of)):
            raise ValueError("group labels must be integers")
        group_of = group_of.astype(np.int64)
    if np.any(group_of < 0):
        raise ValueError("group labels must be nonnegative")
    G = int(group_of.max()) + 1
    sizes = np.bincount(group_of, minlength=G)
    empty = np.flatnonzero(sizes == 0)
    if empty.size:
        raise ValueError(f"empty group(s): {empty.tolist()}")
    values = np.zeros((p, G))
    values[np.arange(p), group_of] = 1.0
    return CoDataMatrix(values, tuple(f"{prefix}{g + 1}" for g in range(G)), (DUMMY,) * G, group_of)


def contiguous_groups(p: int, G: int) -> np.ndarray:
    """Covariates 1..p/G in group 0, the next p/G in group 1, and so on."""
    if G < 1 or p % G:
        raise ValueError(f"p={p} is not divisible into {G} equal groups")
    return np.repeat(np.arange(G), p // G)


def combine_codata(parts: Sequence[CoDataMatrix]) -> CoDataMatrix:
    """Stack co-data sources column-wise without introducing collinearity.

    The first grouping keeps all its dummy columns and spans the intercept;
    each later grouping drops its first column.  Without any grouping an
    all-ones ``intercept`` column is prepended.
    """
    if not parts:
        raise ValueError("no co-data sources")
    p = parts[0].p
    if any(part.p != p for part in parts):
        raise ValueError("co-data sources disagree on the number of covariates")
    cols, names, kinds = [], [], []
    has_span = False
    groups = None
    for part in parts:
        is_grouping = part.groups is not None
        if is_grouping and not has_span:
            keep = list(range(part.kappa))
            has_span = True
            groups = part.groups
        elif is_grouping:
            keep = list(range(1, part.kappa))
        else:
            keep = list(range(part.kappa))
        for c in keep:
            cols.append(part.values[:, c])
            names.append(part.names[c])
            kinds.append(part.kinds[c])
    if not has_span:
        cols.insert(0, np.ones(p))
        names.insert(0, "intercept")
        kinds.insert(0, DUMMY)
    return CoDataMatrix(np.column_stack(cols), tuple(names), tuple(kinds), groups)


def check_rank(C: CoDataMatrix) -> None:
    X = C.values
    if np.linalg.matrix_rank(X) == X.shape[1]:
        return
    dependent = []
    basis = np.zeros((X.shape[0], 0))
    for j in range(X.shape[1]):
        trial = np.column_stack([basis, X[:, j]])
        if np.linalg.matrix_rank(trial) > basis.shape[1]:
            basis = trial
        else:
            dependent.append(C.names[j])
    raise RankDeficientError(dependent)


def predict_weights(C, eta) -> np.ndarray:
    """expit(C eta) normalised to sum to one."""
    X = C.values if isinstance(C, CoDataMatrix) else np.asarray(C, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if X.shape[1] != eta.shape[0]:
        raise ValueError(f"co-data has {X.shape[1]} columns, eta has {eta.shape[0]} entries")
    lin = X @ eta
    # normalise in log space so saturated covariates cannot overflow the sum
    logw = log_expit(lin)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def codata_objective(X, b, B, eta, ridge: float = RIDGE) -> float:
    """Per-trial binomial log likelihood (count log likelihood over B) minus the ridge."""
    lin = X @ eta
    frac = np.asarray(b, dtype=np.float64) / B
    return float(np.sum(frac * log_expit(lin) + (1.0 - frac) * log_expit(-lin)) - ridge * eta @ eta)


def objective_resolution(obj: float) -> float:
    """Band within which two evaluations of the objective are indistinguishable."""
    return 64.0 * np.finfo(np.float64).eps * (1.0 + abs(obj))


def newton_step(X, frac, eta, ridge):
    mu = expit(X @ eta)
    score = X.T @ (frac - mu) - 2.0 * ridge * eta
    W = mu * (1.0 - mu)
    H = (X * W[:, None]).T @ X + 2.0 * ridge * np.eye(X.shape[1])
    try:
        return score, np.linalg.solve(H, score)
    except np.linalg.LinAlgError:
        raise CoDataFitError("singular information matrix", eta) from None


def polished(X, b, B, frac, eta, obj, ridge, trace, iterations) -> CoDataFit:
    # one more Newton step inside the tolerance takes the quadratic
    # convergence down to rounding level; kept only if it helps
    score, step = newton_step(X, frac, eta, ridge)
    cand = eta + step
    cand_score, _ = newton_step(X, frac, cand, ridge)
    cand_obj = codata_objective(X, b, B, cand, ridge)
    if (np.all(np.isfinite(cand)) and np.max(np.abs(cand_score)) < np.max(np.abs(score))
            and cand_obj >= obj - objective_resolution(obj)):
        eta, obj = cand, cand_obj
        trace = trace + [obj]
    return CoDataFit(eta, True, iterations, predict_weights(X, eta), obj, tuple(trace))


def fit_codata_model(C: CoDataMatrix, b, B, *, ridge: float = RIDGE, tol: float = SCORE_TOL,
                     max_iter: int = MAX_ITER) -> CoDataFit:
    """Ridge-stabilised binomial ML of eta, covariates acting as samples.

    Each covariate ``j`` contributes ``b_j`` successes out of ``B`` trials
    with success probability ``expit(c_j' eta)``.  The log likelihood is
    divided by ``B`` so the score tolerance and the ridge do not depend on
    the number of retained draws.  Newton-Raphson (IRLS) with step halving
    keeps the objective non-decreasing up to ``objective_resolution``.
    """
    X = C.values
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (C.p,):
        raise ValueError(f"need {C.p} split counts, got shape {b.shape}")
    if B <= 0:
        raise ValueError("no splitting rules observed (B = 0)")
    if np.any(b < 0) or np.any(b > B):
        raise ValueError("split counts must lie in [0, B]")
    check_rank(C)
    frac = b / B
    eta = np.zeros(X.shape[1])
    obj = codata_objective(X, b, B, eta, ridge)
    trace = [obj]
    for it in range(1, max_iter + 1):
        score, step = newton_step(X, frac, eta, ridge)
        if np.max(np.abs(score)) < tol:
            return polished(X, b, B, frac, eta, obj, ridge, trace, it - 1)
        # near the optimum the gain drops below the rounding of the objective;
        # comparisons inside that band carry no information
        slack = objective_resolution(obj)
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = eta + t * step
            cand_obj = codata_objective(X, b, B, cand, ridge)
            if cand_obj >= obj - slack:
                break
            t *= 0.5
        else:
            raise CoDataFitError("step halving failed to increase the objective", eta)
        if not np.all(np.isfinite(cand)):
            raise CoDataFitError("iterate diverged", eta)
        eta, obj = cand, cand_obj
        trace.append(obj)
    score, _ = newton_step(X, frac, eta, ridge)
    if np.max(np.abs(score)) < tol:
        return polished(X, b, B, frac, eta, obj, ridge, trace, max_iter)
    raise CoDataFitError(f"no convergence in {max_iter} iterations", eta)


def group_weights(weights, group_of, G: Optional[int] = None) -> np.ndarray:
    """Summed covariate weight per group."""
    group_of = np.asarray(group_of, dtype=np.int64)
    return np.bincount(group_of, weights=np.asarray(weights, dtype=np.float64),
                       minlength=G if G is not None else 0)


def column_weights(C: CoDataMatrix, weights) -> np.ndarray:
    """C' w: summed weight per dummy column, weight-averaged value per continuous column."""
    return C.values.T @ np.asarray(weights, dtype=np.float64)


def bucket_groups(p: int, n_buckets: int = 10) -> np.ndarray:
    """Consecutive equal-size covariate buckets used to summarise continuous co-data."""
    return contiguous_groups(p, n_buckets)
