"""Deterministic desk-scale stand-in for a sequential fine-tuning pipeline.

Tasks are linear least-squares problems whose optima touch only a known
support of the parameter vector, so "fine-tuning" has a closed form and
merging behavior can be checked exactly. The full pipeline mirrors the
deployment flow: generate tasks, fit them sequentially, form per-task
deltas, build budgets (from a file, a geometric schedule, or dataset
similarity against a mixed target environment), merge, and evaluate.

All harness math runs in float64 on raw vectors; the container codec is
only involved when models are exchanged through the CLI.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .container import ParameterSet
from .errors import ConfigError, ValidationError
from .merging import (
    Assignment,
    MergeConfig,
    PreferenceVector,
    RESIDUAL_RANDOM,
    assignment_census,
    average_merge,
    magmax_merge,
    random_mix_merge,
    tunable_merge,
)
from .preference import (
    AlphaSchedule,
    load_preference,
    preference_from_alpha,
    preference_from_similarities,
)
from .similarity import EmbeddingSet, LabelHistogram, OTConfig, similarity_vector

SUPPORT_MODES = ("disjoint", "overlapping")
DELTA_MODES = ("incremental", "cumulative")
PREFERENCE_SOURCES = ("file", "alpha", "similarity")

_SUITE_SALT = 1
_ENV_SALT = 2


@dataclass
class SyntheticTask:
    """One linear regression task touching a fixed support of the parameters."""

    task_id: int
    design: np.ndarray  # (m, d); nonzero only on the support columns
    targets: np.ndarray  # (m,)
    support: np.ndarray  # sorted 0-based flat indices
    labels: np.ndarray  # (m,) integer class ids

    @property
    def num_samples(self) -> int:
        return self.design.shape[0]


@dataclass
class TargetEnvironment:
    """A mixture of member tasks with disjoint meta and evaluation splits."""

    member_ids: tuple[int, ...]
    mix: tuple[float, ...]
    counts: dict[int, int]
    meta_rows: dict[int, np.ndarray]
    eval_rows: dict[int, np.ndarray]

    @property
    def meta_size(self) -> int:
        return sum(rows.size for rows in self.meta_rows.values())

    @property
    def eval_size(self) -> int:
        return sum(rows.size for rows in self.eval_rows.values())


@dataclass
class EvalResult:
    task_losses: dict[int, float]
    env_loss: float | None = None


def generate_task_suite(
    num_tasks: int,
    dim: int,
    support_mode: str = "disjoint",
    samples_per_task: int = 48,
    seed: int = 0,
    *,
    overlap: int = 1,
    classes_per_task: int = 2,
    noise_sigma: float = 0.0,
    cluster_separation: float = 3.0,
) -> tuple[list[SyntheticTask], np.ndarray]:
    """Build a task suite and the zero base parameter vector.

    Disjoint mode splits the flat indices into contiguous blocks, one per
    task. Overlapping mode slides windows of width L over the indices so
    consecutive supports share ``overlap`` coordinates; the window width
    must come out integral, i.e. T must divide d + (T - 1) * overlap.
    """
    if num_tasks < 1 or dim < 1:
        raise ValidationError("num_tasks and dim must be >= 1")
    if support_mode not in SUPPORT_MODES:
        raise ValidationError(f"unknown support mode {support_mode!r}")
    if classes_per_task < 1:
        raise ValidationError("classes_per_task must be >= 1")
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be >= 0")
    supports = _build_supports(num_tasks, dim, support_mode, overlap)
    widest = max(s.size for s in supports)
    if samples_per_task < widest:
        raise ValidationError(
            f"samples_per_task {samples_per_task} < widest support {widest}"
        )

    tasks = []
    for task_id, support in enumerate(supports, start=1):
        rng = np.random.default_rng([seed, _SUITE_SALT, task_id])
        width = support.size
        truth = rng.normal(size=width)
        center = cluster_separation * _unit(rng.normal(size=width))
        restricted = center[None, :] + rng.normal(size=(samples_per_task, width))
        targets = restricted @ truth
        if noise_sigma > 0:
            targets = targets + noise_sigma * rng.normal(size=samples_per_task)
        design = np.zeros((samples_per_task, dim))
        design[:, support] = restricted
        first_class = (task_id - 1) * classes_per_task
        labels = first_class + np.arange(samples_per_task) % classes_per_task
        tasks.append(SyntheticTask(task_id, design, targets, support, labels))
    return tasks, np.zeros(dim)


def sequential_finetune_analog(
    tasks: Sequence[SyntheticTask], theta_0: np.ndarray
) -> list[np.ndarray]:
    """Closed-form analog of sequential fine-tuning.

    Each step copies the previous parameters and replaces the task's
    support coordinates with its restricted least-squares optimum, so
    later tasks overwrite shared coordinates and everything else drifts
    along unchanged.
    """
    theta = np.asarray(theta_0, dtype=np.float64).copy()
    out = []
    for task in tasks:
        restricted = task.design[:, task.support]
        solution, _, rank, _ = np.linalg.lstsq(restricted, task.targets, rcond=None)
        if rank < task.support.size:
            raise ValidationError(
                f"task {task.task_id}: singular restricted normal equations"
            )
        theta = theta.copy()
        theta[task.support] = solution
        out.append(theta)
    return out


def mix_target_environment(
    tasks: Sequence[SyntheticTask],
    member_ids: Sequence[int],
    mix: Sequence[float],
    total_samples: int,
    meta_fraction: float = 0.1,
    seed: int = 0,
) -> TargetEnvironment:
    """Sample a target environment mixing the member tasks at given ratios.

    Per-task sample counts follow largest-remainder rounding of the mixing
    ratio; the meta split takes ``meta_fraction`` of the samples, allocated
    across members by the same rounding so it stays stratified. Meta and
    evaluation rows are disjoint.
    """
    members = [int(t) for t in member_ids]
    by_id = {task.task_id: task for task in tasks}
    unknown = [t for t in members if t not in by_id]
    if unknown:
        raise ValidationError(f"unknown member task ids {unknown}")
    if len(members) != len(set(members)):
        raise ValidationError("member task ids must be distinct")
    ratios = np.asarray(mix, dtype=np.float64)
    if ratios.size != len(members):
        raise ValidationError("mix length must match member count")
    if np.any(ratios < 0):
        raise ValidationError("mixing ratios must be nonnegative")
    if abs(float(ratios.sum()) - 1.0) > 1e-9:
        raise ValidationError(f"mixing ratios sum to {ratios.sum()}, expected 1")
    if total_samples < len(members):
        raise ValidationError("total_samples must be at least the member count")
    if not (0.0 < meta_fraction < 1.0):
        raise ValidationError("meta_fraction must lie in (0, 1)")

    counts = largest_remainder_counts(ratios, total_samples)
    meta_total = int(round(meta_fraction * total_samples))
    meta_counts = largest_remainder_counts(counts.astype(np.float64), meta_total)

    meta_rows: dict[int, np.ndarray] = {}
    eval_rows: dict[int, np.ndarray] = {}
    for member, count, meta_count in zip(members, counts, meta_counts):
        task = by_id[member]
        rng = np.random.default_rng([seed, _ENV_SALT, member])
        if count <= task.num_samples:
            chosen = rng.permutation(task.num_samples)[:count]
        else:
            chosen = rng.integers(0, task.num_samples, size=count)
        meta_rows[member] = np.sort(chosen[:meta_count])
        eval_rows[member] = np.sort(chosen[meta_count:])
    return TargetEnvironment(
        tuple(members),
        tuple(float(r) for r in ratios),
        {m: int(c) for m, c in zip(members, counts)},
        meta_rows,
        eval_rows,
    )


def evaluate(
    theta: Union[np.ndarray, ParameterSet],
    tasks: Sequence[SyntheticTask],
    env: TargetEnvironment | None = None,
) -> EvalResult:
    """Mean squared error per task, plus the environment-weighted loss.

    The environment loss weights each member task's loss by its evaluation
    sample count, so a single-member environment reduces to that task's loss.
    """
    vec = np.asarray(theta.flat() if isinstance(theta, ParameterSet) else theta, dtype=np.float64)
    losses = {}
    for task in tasks:
        residual = task.design @ vec - task.targets
        losses[task.task_id] = float(residual @ residual / task.num_samples)
    env_loss = None
    if env is not None:
        weights = np.array([env.eval_rows[m].size for m in env.member_ids], dtype=np.float64)
        member_losses = np.array([losses[m] for m in env.member_ids])
        if weights.sum() <= 0:
            raise ValidationError("environment has no evaluation samples")
        env_loss = float(weights @ member_losses / weights.sum())
    return EvalResult(losses, env_loss)


def task_embeddings(task: SyntheticTask) -> EmbeddingSet:
    """Row-normalized design rows standing in for encoder features."""
    return EmbeddingSet(_normalize_rows(task.design), source=f"task-{task.task_id}")


def environment_meta_embeddings(
    env: TargetEnvironment, tasks: Sequence[SyntheticTask]
) -> EmbeddingSet:
    by_id = {task.task_id: task for task in tasks}
    blocks = [
        _normalize_rows(by_id[m].design[env.meta_rows[m]])
        for m in env.member_ids
        if env.meta_rows[m].size
    ]
    if not blocks:
        raise ValidationError("environment meta split is empty")
    return EmbeddingSet(np.vstack(blocks), source="meta")


def environment_meta_labels(
    env: TargetEnvironment, tasks: Sequence[SyntheticTask]
) -> LabelHistogram:
    by_id = {task.task_id: task for task in tasks}
    labels: list[int] = []
    for member in env.member_ids:
        labels.extend(by_id[member].labels[env.meta_rows[member]].tolist())
    if not labels:
        raise ValidationError("environment meta split is empty")
    return LabelHistogram.from_labels(labels)


def largest_remainder_counts(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, proportional to ``weights``.

    Floors first, then hands the leftover units to the largest fractional
    parts (ties broken by index order).
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() <= 0:
        raise ValidationError("weights must have a positive sum")
    shares = weights / weights.sum() * total
    floors = np.floor(shares).astype(np.int64)
    leftover = total - int(floors.sum())
    if leftover > 0:
        order = np.argsort(-(shares - floors), kind="stable")
        floors[order[:leftover]] += 1
    return floors


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    seed: int
    suite: dict
    merge: dict = field(default_factory=dict)
    preference: dict = field(default_factory=dict)
    environment: dict | None = None
    similarity_config: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        if not isinstance(raw, dict):
            raise ConfigError("pipeline config must be a JSON object")
        known = {"seed", "suite", "merge", "preference", "environment", "similarity_config", "report"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in raw:
            raise ConfigError("config must set 'seed'")
        if "suite" not in raw or not isinstance(raw["suite"], dict):
            raise ConfigError("config must set a 'suite' object")
        return cls(
            seed=int(raw["seed"]),
            suite=dict(raw["suite"]),
            merge=dict(raw.get("merge") or {}),
            preference=dict(raw.get("preference") or {}),
            environment=dict(raw["environment"]) if raw.get("environment") else None,
            similarity_config=dict(raw.get("similarity_config") or {}),
            report=dict(raw.get("report") or {}),
        )


@dataclass
class ReportRow:
    alpha: float | None
    task: int
    budget: int | None
    census: int | None
    loss: float


@dataclass
class PipelineReport:
    rows: list[ReportRow]
    summary: dict

    @property
    def sweep(self) -> bool:
        return any(row.alpha is not None for row in self.rows) and len(
            {row.alpha for row in self.rows}
        ) > 1

    def to_csv_text(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        columns = ["task", "budget", "census", "loss"]
        sweep = self.sweep
        writer.writerow(["alpha", *columns] if sweep else columns)
        for row in self.rows:
            cells = [
                row.task,
                "" if row.budget is None else row.budget,
                "" if row.census is None else row.census,
                repr(row.loss),
            ]
            writer.writerow([_format_alpha(row.alpha), *cells] if sweep else cells)
        return buffer.getvalue()

    def to_json_text(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True) + "\n"

    def write_csv(self, destination: Union[str, Path]) -> None:
        Path(destination).write_text(self.to_csv_text())

    def write_json(self, destination: Union[str, Path]) -> None:
        Path(destination).write_text(self.to_json_text())


def run_pipeline(config: Union[PipelineConfig, dict], workers: int = 1) -> PipelineReport:
    """Execute the full synthetic pipeline described by ``config``.

    Stages: generate the suite, fit tasks sequentially, form per-task
    deltas, build the budget vector from the configured source, merge,
    apply the merged delta at ``lambda_merge``, and evaluate. A list-valued
    alpha sweeps the schedule and emits one row block per alpha.
    """
    cfg = config if isinstance(config, PipelineConfig) else PipelineConfig.from_dict(config)
    suite_args = dict(cfg.suite)
    num_tasks = int(suite_args.pop("num_tasks"))
    dim = int(suite_args.pop("dim"))
    tasks, theta_0 = generate_task_suite(
        num_tasks,
        dim,
        support_mode=suite_args.pop("support_mode", "disjoint"),
        samples_per_task=int(suite_args.pop("samples_per_task", 48)),
        seed=cfg.seed,
        **_suite_extras(suite_args),
    )
    thetas = sequential_finetune_analog(tasks, theta_0)

    delta_mode = cfg.merge.get("delta_mode", "incremental")
    if delta_mode not in DELTA_MODES:
        raise ConfigError(f"unknown delta_mode {delta_mode!r}")
    if delta_mode == "incremental":
        bases = [theta_0, *thetas[:-1]]
        taus = np.stack([t - b for t, b in zip(thetas, bases)])
    else:
        taus = np.stack([t - theta_0 for t in thetas])

    env = None
    if cfg.environment is not None:
        env = mix_target_environment(
            tasks,
            cfg.environment.get("members", ()),
            cfg.environment.get("mix", ()),
            int(cfg.environment.get("total_samples", 0)),
            meta_fraction=float(cfg.environment.get("meta_fraction", 0.1)),
            seed=cfg.seed,
        )

    method = cfg.merge.get("method", "tunable")
    rounds = int(cfg.merge.get("rounds", 2))
    lambda_merge = float(cfg.merge.get("lambda_merge", 0.5))
    if not (0.0 <= lambda_merge <= 1.0):
        raise ValidationError(f"lambda_merge {lambda_merge} outside [0, 1]")

    source = cfg.preference.get("source")
    alphas: list[float | None]
    if method == "tunable":
        if source not in PREFERENCE_SOURCES:
            raise ConfigError(
                f"tunable merging needs a preference source in {PREFERENCE_SOURCES}"
            )
        if source == "alpha":
            raw_alpha = cfg.preference.get("alpha")
            if raw_alpha is None:
                raise ConfigError("preference source 'alpha' needs an 'alpha' value")
            alphas = [float(a) for a in raw_alpha] if isinstance(raw_alpha, list) else [
                float(raw_alpha)
            ]
        else:
            alphas = [None]
    else:
        if source is not None:
            raise ConfigError(f"method {method!r} does not take a preference source")
        alphas = [None]

    rows: list[ReportRow] = []
    runs = []
    for alpha in alphas:
        budgets = _build_budgets(cfg, source, alpha, num_tasks, dim, tasks, env, workers)
        merged, assignment = _merge(method, taus, budgets, rounds, cfg.seed)
        theta_merged = theta_0 + lambda_merge * merged
        result = evaluate(theta_merged, tasks, env)
        census = None if assignment is None else assignment_census(assignment)
        residual = (
            None
            if assignment is None
            else float(np.mean(assignment.provenance == RESIDUAL_RANDOM))
        )
        for task in tasks:
            rows.append(
                ReportRow(
                    alpha=alpha,
                    task=task.task_id,
                    budget=None if budgets is None else int(budgets.budgets[task.task_id - 1]),
                    census=None if census is None else int(census[task.task_id - 1]),
                    loss=result.task_losses[task.task_id],
                )
            )
        runs.append(
            {
                "alpha": alpha,
                "budgets": None if budgets is None else list(budgets.budgets),
                "census": None if census is None else [int(c) for c in census],
                "residual_random_fraction": residual,
                "task_losses": {str(t): result.task_losses[t] for t in sorted(result.task_losses)},
                "env_loss": result.env_loss,
            }
        )

    summary = {
        "seed": cfg.seed,
        "method": method,
        "delta_mode": delta_mode,
        "lambda_merge": lambda_merge,
        "rounds": rounds,
        "num_tasks": num_tasks,
        "dim": dim,
        "support_sizes": [int(t.support.size) for t in tasks],
        "preference_source": source,
        "environment": None
        if env is None
        else {
            "members": list(env.member_ids),
            "mix": list(env.mix),
            "counts": {str(m): env.counts[m] for m in env.member_ids},
            "meta_size": env.meta_size,
            "eval_size": env.eval_size,
        },
        "runs": runs,
    }
    return PipelineReport(rows, summary)


def _build_budgets(
    cfg: PipelineConfig,
    source: str | None,
    alpha: float | None,
    num_tasks: int,
    dim: int,
    tasks: Sequence[SyntheticTask],
    env: TargetEnvironment | None,
    workers: int,
) -> PreferenceVector | None:
    if source is None:
        return None
    if source == "file":
        path = cfg.preference.get("path")
        if not path:
            raise ConfigError("preference source 'file' needs a 'path'")
        pref = load_preference(path)
        if pref.total != dim or pref.num_tasks != num_tasks:
            raise ValidationError(
                f"preference file describes {pref.num_tasks} tasks / {pref.total} elements, "
                f"suite has {num_tasks} / {dim}"
            )
        return pref
    if source == "alpha":
        return preference_from_alpha(AlphaSchedule(float(alpha), num_tasks, dim))
    metric = cfg.preference.get("metric", "label")
    if env is None:
        raise ConfigError("preference source 'similarity' needs an 'environment'")
    ot_cfg = OTConfig(**cfg.similarity_config) if cfg.similarity_config else OTConfig()
    if metric == "label":
        task_inputs = [LabelHistogram.from_labels(t.labels.tolist()) for t in tasks]
        meta = environment_meta_labels(env, tasks)
    else:
        task_inputs = [task_embeddings(t) for t in tasks]
        meta = environment_meta_embeddings(env, tasks)
    scores = similarity_vector(task_inputs, meta, metric, ot_cfg, workers=workers)
    return preference_from_similarities(scores, dim)


def _merge(method: str, taus: np.ndarray, budgets: PreferenceVector | None, rounds: int, seed: int):
    if method == "tunable":
        return tunable_merge(taus, budgets, MergeConfig(method="tunable", rounds=rounds, seed=seed))
    if method == "magmax":
        return magmax_merge(taus)
    if method == "average":
        return average_merge(taus), None
    if method in ("random_mix", "randmix"):
        return random_mix_merge(taus, seed)
    raise ConfigError(f"unknown merge method {method!r}")


def _build_supports(
    num_tasks: int, dim: int, support_mode: str, overlap: int
) -> list[np.ndarray]:
    if support_mode == "disjoint":
        if dim < num_tasks:
            raise ValidationError("infeasible support partition: dim < num_tasks")
        return [np.asarray(chunk) for chunk in np.array_split(np.arange(dim), num_tasks)]
    if num_tasks == 1:
        return [np.arange(dim)]
    if overlap < 1:
        raise ValidationError("overlap must be >= 1 in overlapping mode")
    span = dim + (num_tasks - 1) * overlap
    if span % num_tasks:
        raise ValidationError(
            "infeasible support partition: num_tasks must divide dim + (num_tasks-1)*overlap"
        )
    width = span // num_tasks
    if width <= overlap:
        raise ValidationError("infeasible support partition: window not wider than overlap")
    stride = width - overlap
    return [np.arange(t * stride, t * stride + width) for t in range(num_tasks)]


def _suite_extras(raw: dict) -> dict:
    allowed = {"overlap", "classes_per_task", "noise_sigma", "cluster_separation"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown suite keys: {sorted(unknown)}")
    out = dict(raw)
    if "overlap" in out:
        out["overlap"] = int(out["overlap"])
    if "classes_per_task" in out:
        out["classes_per_task"] = int(out["classes_per_task"])
    if "noise_sigma" in out:
        out["noise_sigma"] = float(out["noise_sigma"])
    if "cluster_separation" in out:
        out["cluster_separation"] = float(out["cluster_separation"])
    return out


def _normalize_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return rows / np.maximum(norms, np.finfo(np.float64).tiny)


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def _format_alpha(alpha: float | None) -> str:
    if alpha is None:
        return ""
    return repr(alpha)
