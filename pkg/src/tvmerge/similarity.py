"""Dataset similarity metrics between embedded samples or label sets.

The feature-based metric is entropic optimal transport between two point
clouds with squared Euclidean ground cost and uniform marginals, solved by
log-domain Sinkhorn iterations. Costs are normalized by the mean cost
entry before iterating, so the regularization strength is scale-free;
the returned transport cost is on the original scale.

Distances turn into similarities through ``exp(-gamma * distance)``,
clamped away from zero so downstream proportional allocation stays
well-defined.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence, Union

import numpy as np

from .errors import DegenerateInputError, ValidationError
from .preference import SimilarityVector

METRICS = ("ot", "label", "cos", "mmd")

_TINY = float(np.finfo(np.float64).tiny)


@dataclass(frozen=True)
class OTConfig:
    """Solver and transform settings for the similarity metrics.

    ``epsilon`` regularizes the normalized (unit mean) cost matrix.
    ``gamma`` scales transport costs inside the exp transform; ``gamma_cos``
    and ``gamma_mmd`` play the same role for the distance-based metrics.
    ``mmd_bandwidth`` of None selects the median pairwise distance.
    """

    epsilon: float = 1e-2
    max_iters: int = 1000
    tol: float = 1e-9
    gamma: float = 100.0
    gamma_cos: float = 10.0
    gamma_mmd: float = 10.0
    mmd_bandwidth: float | None = None

    def __post_init__(self) -> None:
        for field in ("epsilon", "max_iters", "tol", "gamma", "gamma_cos", "gamma_mmd"):
            if getattr(self, field) <= 0:
                raise ValidationError(f"{field} must be positive")
        if self.mmd_bandwidth is not None and self.mmd_bandwidth <= 0:
            raise ValidationError("mmd_bandwidth must be positive")


@dataclass(frozen=True)
class EmbeddingSet:
    """An (N, D) matrix of row-wise sample embeddings."""

    vectors: np.ndarray
    source: str = ""

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError("embeddings must form a non-empty 2-D matrix")
        if not np.isfinite(arr).all():
            raise ValidationError("embeddings must be finite")
        object.__setattr__(self, "vectors", arr)

    @property
    def num_samples(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


class LabelHistogram:
    """Empirical class counts; class ids are compared as strings."""

    __slots__ = ("_counts", "_total")

    def __init__(self, counts: Mapping[Union[str, int], int]):
        cleaned: dict[str, int] = {}
        for key, value in counts.items():
            count = int(value)
            if count < 0:
                raise ValidationError(f"negative count for class {key!r}")
            if count > 0:
                cleaned[str(key)] = cleaned.get(str(key), 0) + count
        total = sum(cleaned.values())
        if total < 1:
            raise ValidationError("histogram must contain at least one sample")
        self._counts = cleaned
        self._total = total

    @classmethod
    def from_labels(cls, labels: Sequence[Union[str, int]]) -> "LabelHistogram":
        counts: dict[str, int] = {}
        for label in labels:
            counts[str(label)] = counts.get(str(label), 0) + 1
        return cls(counts)

    @property
    def total(self) -> int:
        return self._total

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(self._counts)

    def frequency(self, class_id: Union[str, int]) -> float:
        return self._counts.get(str(class_id), 0) / self._total


class SinkhornResult(NamedTuple):
    cost: float
    converged: bool
    iterations: int


def pairwise_sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between the rows of x and of y."""
    sq_x = np.einsum("ij,ij->i", x, x)
    sq_y = np.einsum("ij,ij->i", y, y)
    out = sq_x[:, None] + sq_y[None, :] - 2.0 * (x @ y.T)
    return np.maximum(out, 0.0)


# Warm-start schedule for small regularization: stages shrink the working
# epsilon from unit scale down to the target, each reusing the previous
# potentials. Only the target-epsilon stage decides convergence.
_STAGE_START = 1.0
_STAGE_DECAY = 0.25
_STAGE_ITERS = 60
_STAGE_TOL = 1e-4


def sinkhorn_ot(x: EmbeddingSet, y: EmbeddingSet, cfg: OTConfig | None = None) -> SinkhornResult:
    """Entropic transport cost between two embedding sets.

    Returns the plan's transport cost without the entropy term, together
    with a convergence flag: iterations stop once both marginal L1
    violations drop below ``cfg.tol`` or ``cfg.max_iters`` is reached.
    ``iterations`` counts update pairs across all warm-start stages.
    """
    cfg = cfg or OTConfig()
    if x.dim != y.dim:
        raise ValidationError(f"embedding dims differ: {x.dim} vs {y.dim}")
    cost = pairwise_sq_dists(x.vectors, y.vectors)
    scale = float(cost.mean())
    if scale == 0.0:
        return SinkhornResult(0.0, True, 0)

    n_x, n_y = cost.shape
    normed = cost / scale
    log_a = np.full(n_x, -math.log(n_x))
    log_b = np.full(n_y, -math.log(n_y))
    weight_a = np.exp(log_a)
    weight_b = np.exp(log_b)

    levels = []
    eps = _STAGE_START
    while eps > cfg.epsilon:
        levels.append(eps)
        eps *= _STAGE_DECAY
    levels.append(cfg.epsilon)

    row_cost_pot = np.zeros(n_x)
    col_cost_pot = np.zeros(n_y)
    total_iters = 0
    for level, eps in enumerate(levels):
        final = level == len(levels) - 1
        kernel = -normed / eps
        row_pot = row_cost_pot / eps
        col_pot = col_cost_pot / eps
        budget = cfg.max_iters - total_iters
        if not final:
            budget = min(budget, _STAGE_ITERS)
        stage_tol = cfg.tol if final else max(cfg.tol, _STAGE_TOL)
        for _ in range(budget):
            # Row sums of the current plan factor through the next update's
            # logsumexp, so the marginal check costs nothing extra. Column
            # sums are exact by construction after every column update.
            col_lse = _logsumexp(kernel + col_pot[None, :], axis=1)
            if np.abs(np.exp(row_pot + col_lse) - weight_a).sum() <= stage_tol:
                break
            row_pot = log_a - col_lse
            col_pot = log_b - _logsumexp(kernel + row_pot[:, None], axis=0)
            total_iters += 1
        row_cost_pot = row_pot * eps
        col_cost_pot = col_pot * eps

    plan = np.exp(kernel + row_pot[:, None] + col_pot[None, :])
    row_gap = np.abs(plan.sum(axis=1) - weight_a).sum()
    col_gap = np.abs(plan.sum(axis=0) - weight_b).sum()
    converged = bool(row_gap <= cfg.tol and col_gap <= cfg.tol)
    return SinkhornResult(float((plan * cost).sum()), converged, total_iters)


def ot_similarity(x: EmbeddingSet, y: EmbeddingSet, cfg: OTConfig | None = None) -> float:
    """``exp(-gamma * transport cost)``, clamped to the smallest positive normal."""
    cfg = cfg or OTConfig()
    result = sinkhorn_ot(x, y, cfg)
    return _exp_transform(cfg.gamma, result.cost)


def label_similarity(h_task: LabelHistogram, h_meta: LabelHistogram) -> float:
    """Inner product of empirical class frequencies over the meta classes."""
    return float(
        sum(h_task.frequency(c) * h_meta.frequency(c) for c in h_meta.classes)
    )


def cosine_mean_distance(x: EmbeddingSet, y: EmbeddingSet) -> float:
    """One minus the cosine of the two mean embedding vectors; range [0, 2]."""
    if x.dim != y.dim:
        raise ValidationError(f"embedding dims differ: {x.dim} vs {y.dim}")
    mean_x = x.vectors.mean(axis=0)
    mean_y = y.vectors.mean(axis=0)
    norm_x = np.linalg.norm(mean_x)
    norm_y = np.linalg.norm(mean_y)
    if norm_x == 0.0 or norm_y == 0.0:
        raise DegenerateInputError("zero-norm mean")
    cosine = float(mean_x @ mean_y / (norm_x * norm_y))
    return min(max(1.0 - cosine, 0.0), 2.0)


def median_heuristic_bandwidth(x: EmbeddingSet, y: EmbeddingSet) -> float:
    """Median pairwise distance over the pooled samples (1.0 when all coincide)."""
    pooled = np.vstack([x.vectors, y.vectors])
    dists = np.sqrt(pairwise_sq_dists(pooled, pooled))
    upper = dists[np.triu_indices(pooled.shape[0], k=1)]
    if upper.size == 0:
        return 1.0
    median = float(np.median(upper))
    return median if median > 0.0 else 1.0


def mmd_rbf(x: EmbeddingSet, y: EmbeddingSet, bandwidth: float | None = None) -> float:
    """Biased RBF-kernel maximum mean discrepancy (the square root of MMD^2)."""
    if x.dim != y.dim:
        raise ValidationError(f"embedding dims differ: {x.dim} vs {y.dim}")
    if bandwidth is None:
        bandwidth = median_heuristic_bandwidth(x, y)
    if bandwidth <= 0:
        raise ValidationError("bandwidth must be positive")
    denom = 2.0 * bandwidth * bandwidth
    k_xx = np.exp(-pairwise_sq_dists(x.vectors, x.vectors) / denom).mean()
    k_yy = np.exp(-pairwise_sq_dists(y.vectors, y.vectors) / denom).mean()
    k_xy = np.exp(-pairwise_sq_dists(x.vectors, y.vectors) / denom).mean()
    mmd_sq = max(float(k_xx + k_yy - 2.0 * k_xy), 0.0)
    return math.sqrt(mmd_sq)


def similarity_vector(
    task_inputs: Sequence[Union[EmbeddingSet, LabelHistogram]],
    meta_input,
    metric: str,
    cfg: OTConfig | None = None,
    workers: int = 1,
) -> SimilarityVector:
    """Score every task against the meta dataset with one metric.

    ``meta_input`` is either a single input shared by all tasks or a
    sequence with one (task-specific) meta input per task.
    """
    cfg = cfg or OTConfig()
    if metric not in METRICS:
        raise ValidationError(f"unknown metric {metric!r}")
    tasks = list(task_inputs)
    if not tasks:
        raise ValidationError("need at least one task input")
    metas = _broadcast_meta(meta_input, len(tasks))
    expected = LabelHistogram if metric == "label" else EmbeddingSet
    for item in [*tasks, *metas]:
        if not isinstance(item, expected):
            raise ValidationError(
                f"metric {metric!r} requires {expected.__name__} inputs, got {type(item).__name__}"
            )

    def score(pair: tuple) -> float:
        task, meta = pair
        if metric == "ot":
            return ot_similarity(task, meta, cfg)
        if metric == "label":
            return label_similarity(task, meta)
        if metric == "cos":
            return _exp_transform(cfg.gamma_cos, cosine_mean_distance(task, meta))
        return _exp_transform(cfg.gamma_mmd, mmd_rbf(task, meta, cfg.mmd_bandwidth))

    pairs = list(zip(tasks, metas))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score, pairs))
    else:
        scores = [score(p) for p in pairs]
    return SimilarityVector(tuple(scores), metric=metric)


def _broadcast_meta(meta_input, num_tasks: int) -> list:
    if isinstance(meta_input, (EmbeddingSet, LabelHistogram)):
        return [meta_input] * num_tasks
    metas = list(meta_input)
    if len(metas) == 1:
        return metas * num_tasks
    if len(metas) != num_tasks:
        raise ValidationError(
            f"got {len(metas)} meta inputs for {num_tasks} tasks; need 1 or {num_tasks}"
        )
    return metas


def _exp_transform(gamma: float, distance: float) -> float:
    value = math.exp(-gamma * distance) if -gamma * distance > -745.0 else 0.0
    return max(value, _TINY)


def _logsumexp(values: np.ndarray, axis: int) -> np.ndarray:
    peak = values.max(axis=axis, keepdims=True)
    out = np.log(np.exp(values - peak).sum(axis=axis)) + peak.squeeze(axis)
    return out
