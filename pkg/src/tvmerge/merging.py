"""Task-vector merging strategies and element-ownership bookkeeping.

All strategies operate on the global flat index: task vectors are stacked
into a (T, d) matrix and each output element is copied bitwise from exactly
one input row. Task ids are 1-based throughout; flat indices are 0-based
numpy indices.

Randomized selection is driven by counter-based keyed streams: a Philox
generator keyed by (seed, round, task), so results are reproducible and
independent of scheduling or invocation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .container import DTYPE_U16, ParameterSet, TaskVector, _read_records, _write_records
from .errors import ShapeMismatchError, ValidationError

LATER_TASK_WINS = "later_task_wins"

MERGE_METHODS = ("magmax", "tunable", "average", "random_mix")

#: Provenance code for elements assigned by the final random fill.
RESIDUAL_RANDOM = 0

TaskVectors = Union[np.ndarray, Sequence[ParameterSet], Sequence[np.ndarray]]


@dataclass(frozen=True)
class MergeConfig:
    """Knobs shared by the merge strategies.

    ``rounds`` is the number of budgeted assignment sweeps before the
    residual random fill. ``tie_rule`` is fixed: on equal magnitudes the
    task with the larger index wins.
    """

    method: str = "tunable"
    rounds: int = 2
    seed: int = 0
    tie_rule: str = LATER_TASK_WINS

    def __post_init__(self) -> None:
        if self.method not in MERGE_METHODS:
            raise ValidationError(f"unknown merge method {self.method!r}")
        if self.rounds < 1:
            raise ValidationError("rounds must be >= 1")
        if not (0 <= self.seed < 2**64):
            raise ValidationError("seed must fit in 64 unsigned bits")
        if self.tie_rule != LATER_TASK_WINS:
            raise ValidationError(f"unsupported tie rule {self.tie_rule!r}")


@dataclass(frozen=True)
class PreferenceVector:
    """Per-task element budgets; must sum to the model's element count."""

    budgets: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.budgets:
            raise ValidationError("preference vector must not be empty")
        if any(int(n) != n for n in self.budgets):
            raise ValidationError("budgets must be integers")
        if any(n < 0 for n in self.budgets):
            raise ValidationError("negative budget")
        object.__setattr__(self, "budgets", tuple(int(n) for n in self.budgets))

    @property
    def num_tasks(self) -> int:
        return len(self.budgets)

    @property
    def total(self) -> int:
        return sum(self.budgets)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.budgets, dtype=np.int64)


@dataclass
class Assignment:
    """Which task supplied each merged element, and in which phase.

    ``owner[p]`` is a task id in 1..T. ``provenance[p]`` is the round
    number that claimed the element, or :data:`RESIDUAL_RANDOM` for the
    final random fill.
    """

    owner: np.ndarray
    provenance: np.ndarray
    num_tasks: int

    def __post_init__(self) -> None:
        self.owner = np.asarray(self.owner, dtype=np.int32)
        self.provenance = np.asarray(self.provenance, dtype=np.int32)
        if self.owner.shape != self.provenance.shape or self.owner.ndim != 1:
            raise ValidationError("owner and provenance must be equal-length vectors")

    @property
    def num_elements(self) -> int:
        return self.owner.size


def provenance_label(code: int) -> str:
    return "residual-random" if code == RESIDUAL_RANDOM else f"round-{code}"


def selection_stream(seed: int, round_index: int, task: int) -> np.random.Generator:
    """Deterministic generator keyed by (seed, round, task)."""
    key = np.empty(2, dtype=np.uint64)
    key[0] = np.uint64(seed)
    key[1] = np.uint64(((round_index & 0xFFFFFFFF) << 32) | (task & 0xFFFFFFFF))
    return np.random.Generator(np.random.Philox(key=key))


def magmax_merge(
    taus: TaskVectors, tie_rule: str = LATER_TASK_WINS
) -> tuple[TaskVector | np.ndarray, Assignment]:
    """Keep, per element, the value of largest absolute magnitude.

    Ties go to the later task, so iterating tasks in order and keeping the
    running max-magnitude value reproduces this exactly.
    """
    if tie_rule != LATER_TASK_WINS:
        raise ValidationError(f"unsupported tie rule {tie_rule!r}")
    tau, template = _as_matrix(taus)
    num_tasks, _ = tau.shape
    # argmax picks the first maximum; scanning reversed rows makes the
    # later task win ties.
    rev_pick = np.abs(tau)[::-1].argmax(axis=0)
    owner = (num_tasks - rev_pick).astype(np.int32)
    merged = np.take_along_axis(tau, (owner - 1)[None, :], axis=0)[0]
    assignment = Assignment(owner, np.ones_like(owner), num_tasks)
    return _pack(merged, template), assignment


def tunable_merge(
    taus: TaskVectors,
    pref: PreferenceVector | Sequence[int] | np.ndarray,
    config: MergeConfig | None = None,
) -> tuple[TaskVector | np.ndarray, Assignment]:
    """Budgeted magnitude merge: task t contributes exactly ``pref[t]`` elements.

    For each round, tasks are scanned from last to first. A task claims the
    still-unassigned elements where its magnitude is the largest among
    tasks 1..t (later task wins ties); when the claim overshoots the
    remaining budget, the kept subset is chosen by shuffling the candidates
    (sorted by flat index) with the stream keyed (seed, round, task) and
    taking the prefix. After the rounds, leftover elements are shuffled
    once with key (seed, rounds+1, 0) and dealt to tasks with unmet
    budgets in ascending task order.
    """
    config = config or MergeConfig()
    tau, template = _as_matrix(taus)
    num_tasks, dim = tau.shape
    budgets = pref.as_array() if isinstance(pref, PreferenceVector) else np.asarray(pref)
    if budgets.ndim != 1 or budgets.size != num_tasks:
        raise ValidationError(
            f"preference vector has {budgets.size} budgets for {num_tasks} tasks"
        )
    if np.any(budgets < 0):
        raise ValidationError("negative budget")
    total = int(budgets.sum())
    if total != dim:
        raise ValidationError(f"budget sum {total} != element count {dim}")

    mag = np.abs(tau)
    # earlier_max[t] = per-element max magnitude over tasks before t;
    # task t's claim condition is mag[t] >= earlier_max[t].
    earlier_max = np.empty_like(mag)
    earlier_max[0] = -np.inf
    if num_tasks > 1:
        np.maximum.accumulate(mag[:-1], axis=0, out=earlier_max[1:])

    owner = np.zeros(dim, dtype=np.int32)
    provenance = np.full(dim, -1, dtype=np.int32)
    unassigned = np.ones(dim, dtype=bool)
    counts = np.zeros(num_tasks + 1, dtype=np.int64)

    for round_index in range(1, config.rounds + 1):
        for task in range(num_tasks, 0, -1):
            need = int(budgets[task - 1] - counts[task])
            if need <= 0:
                continue
            claim = np.flatnonzero(unassigned & (mag[task - 1] >= earlier_max[task - 1]))
            if claim.size == 0:
                continue
            if claim.size > need:
                shuffled = selection_stream(config.seed, round_index, task).permutation(claim)
                claim = shuffled[:need]
            owner[claim] = task
            provenance[claim] = round_index
            unassigned[claim] = False
            counts[task] += claim.size

    leftovers = np.flatnonzero(unassigned)
    if leftovers.size:
        shuffled = selection_stream(config.seed, config.rounds + 1, 0).permutation(leftovers)
        start = 0
        for task in range(1, num_tasks + 1):
            need = int(budgets[task - 1] - counts[task])
            if need <= 0:
                continue
            chosen = shuffled[start : start + need]
            owner[chosen] = task
            provenance[chosen] = RESIDUAL_RANDOM
            counts[task] += chosen.size
            start += need

    merged = np.take_along_axis(tau, (owner - 1)[None, :], axis=0)[0]
    assignment = Assignment(owner, provenance, num_tasks)
    return _pack(merged, template), assignment


def average_merge(taus: TaskVectors) -> TaskVector | np.ndarray:
    """Element-wise arithmetic mean of the task vectors."""
    tau, template = _as_matrix(taus)
    return _pack(tau.mean(axis=0), template)


def random_mix_merge(
    taus: TaskVectors, seed: int
) -> tuple[TaskVector | np.ndarray, Assignment]:
    """Assign each element to a task drawn uniformly from the seeded stream."""
    tau, template = _as_matrix(taus)
    num_tasks, dim = tau.shape
    stream = selection_stream(seed, 0, 0)
    owner = stream.integers(1, num_tasks + 1, size=dim, dtype=np.int32)
    merged = np.take_along_axis(tau, (owner - 1)[None, :], axis=0)[0]
    assignment = Assignment(owner, np.zeros(dim, dtype=np.int32), num_tasks)
    return _pack(merged, template), assignment


def assignment_census(assignment: Assignment, num_tasks: int | None = None) -> np.ndarray:
    """Count how many elements each task owns; entry t-1 belongs to task t."""
    num_tasks = assignment.num_tasks if num_tasks is None else num_tasks
    owner = assignment.owner
    if owner.size and (owner.min() < 1 or owner.max() > num_tasks):
        raise ValidationError("owner out of range")
    return np.bincount(owner, minlength=num_tasks + 1)[1:].astype(np.int64)


def write_assignment(destination, assignment: Assignment) -> None:
    """Persist owner and provenance maps as u16 records in a TVC1 side-file."""
    if assignment.num_tasks > 0xFFFF:
        raise ValidationError("owner map limited to 65535 tasks")
    if assignment.provenance.size and assignment.provenance.max() > 0xFFFF:
        raise ValidationError("provenance codes exceed u16")
    _write_records(
        [
            ("owner", DTYPE_U16, assignment.owner.astype(np.uint16)),
            ("provenance", DTYPE_U16, assignment.provenance.astype(np.uint16)),
            ("num_tasks", DTYPE_U16, np.asarray([assignment.num_tasks], dtype=np.uint16)),
        ],
        destination,
    )


def read_assignment(source) -> Assignment:
    records = {name: arr for name, _, arr in _read_records(source, (DTYPE_U16,))}
    try:
        owner = records["owner"]
        provenance = records["provenance"]
        num_tasks = int(records["num_tasks"][0])
    except KeyError as missing:
        raise ValidationError(f"assignment file lacks record {missing}") from None
    return Assignment(owner, provenance, num_tasks)


def _as_matrix(taus: TaskVectors) -> tuple[np.ndarray, ParameterSet | None]:
    """Stack task vectors into a (T, d) matrix, remembering any container layout."""
    if isinstance(taus, np.ndarray):
        if taus.ndim != 2:
            raise ValidationError("expected a (tasks, elements) matrix")
        if taus.shape[0] == 0:
            raise ValidationError("empty task list")
        mat = taus
        template = None
    else:
        entries = list(taus)
        if not entries:
            raise ValidationError("empty task list")
        if all(isinstance(t, ParameterSet) for t in entries):
            template = entries[0]
            for other in entries[1:]:
                if not template.same_layout(other):
                    raise ShapeMismatchError("shape mismatch: task vector layouts differ")
            mat = np.stack([t.flat() for t in entries])
        else:
            arrays = [np.asarray(t) for t in entries]
            if any(a.ndim != 1 for a in arrays):
                raise ValidationError("task vectors must be 1-D arrays")
            if len({a.size for a in arrays}) > 1:
                raise ShapeMismatchError("shape mismatch: task vector lengths differ")
            mat = np.stack(arrays)
            template = None
    if mat.shape[1] == 0:
        raise ValidationError("task vectors have no elements")
    if np.isnan(mat).any():
        raise ValidationError("task vectors must not contain NaN")
    return mat, template


def _pack(merged: np.ndarray, template: ParameterSet | None) -> TaskVector | np.ndarray:
    if template is None:
        return merged
    return TaskVector(template.with_flat(merged).items())
