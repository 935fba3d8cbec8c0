"""Stage sequence -> candidate proposals with pre-scores."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Proposal, ScoredProposal, Stage, StagePropError, StageSequence, TimeInterval
from .validation import as_label_vector

__all__ = [
    "StageRun",
    "InstanceGroup",
    "Containment",
    "DEFAULT_DECAY",
    "extract_runs",
    "group_instances",
    "candidates",
    "combine",
    "pre_score",
    "decode",
    "decode_arrays",
    "decode_groups",
    "split_episodes",
]

DEFAULT_DECAY = 0.09
GUARD_GROUP_LEN = 512
GUARD_MAX_PAIRS = 100_000


class Containment(str, enum.Enum):
    """Which stages a proposal span must contain to be emitted.

    ``ANY_CORE``: at least one Start or Confirm timestep.
    ``ALL_OF``: at least one each of Start, Confirm and Follow.
    Both forbid Background inside the span.
    """

    ANY_CORE = "any_core"
    ALL_OF = "all_of"


@dataclass(frozen=True, slots=True)
class StageRun:
    label: Stage
    interval: TimeInterval


@dataclass(frozen=True)
class InstanceGroup:
    runs: tuple[StageRun, ...]
    q_s: Optional[int] = None
    q_e: Optional[int] = None

    @property
    def span(self) -> TimeInterval:
        return TimeInterval(self.runs[0].interval.start, self.runs[-1].interval.end)

    def labels(self) -> np.ndarray:
        return np.concatenate([np.full(r.interval.length, int(r.label)) for r in self.runs])


def extract_runs(seq: StageSequence | np.ndarray) -> list[StageRun]:
    labels = as_label_vector(seq)
    if labels.size == 0:
        raise StagePropError("cannot run-length encode an empty sequence")
    cuts = np.flatnonzero(np.diff(labels)) + 1
    bounds = np.concatenate([[0], cuts, [labels.size]])
    return [
        StageRun(Stage(int(labels[lo])), TimeInterval(int(lo), int(hi)))
        for lo, hi in zip(bounds[:-1], bounds[1:])
    ]


def group_instances(runs: list[StageRun]) -> list[InstanceGroup]:
    """Maximal Background-free stretches of runs."""
    groups: list[InstanceGroup] = []
    current: list[StageRun] = []

    def flush():
        if current:
            groups.append(_make_group(current))
            current.clear()

    for run in runs:
        if run.label == Stage.BACKGROUND:
            flush()
        else:
            current.append(run)
    flush()
    return groups


def _make_group(runs: list[StageRun]) -> InstanceGroup:
    starts = [r for r in runs if r.label == Stage.START]
    ends = [r for r in runs if r.label == Stage.END]
    return InstanceGroup(
        tuple(runs),
        q_s=starts[0].interval.start if starts else None,
        q_e=ends[-1].interval.end - 1 if ends else None,
    )


_OPENING = (Stage.READY, Stage.START)
_CLOSING = (Stage.END, Stage.FOLLOW)


def split_episodes(group: InstanceGroup) -> list[InstanceGroup]:
    """Cut a group wherever a Ready or Start run directly follows an End
    or Follow run, i.e. where a new Ready-to-Follow episode begins.

    Neighbouring instances whose context padding touches form a single
    Background-free group; splitting keeps each episode's first Start and
    last End as its own pre-score anchors.
    """
    pieces: list[list[StageRun]] = [[]]
    for run in group.runs:
        prev = pieces[-1][-1] if pieces[-1] else None
        if prev is not None and prev.label in _CLOSING and run.label in _OPENING:
            pieces.append([])
        pieces[-1].append(run)
    if len(pieces) == 1:
        return [group]
    return [_make_group(p) for p in pieces]


def candidates(group: InstanceGroup) -> tuple[np.ndarray, np.ndarray]:
    """Sorted candidate start and end timesteps of a group.

    Starts: Ready and Start timesteps plus the first half of every Confirm
    run. Ends: End and Follow timesteps plus the second half. For a
    Confirm run ``[a, a+n)`` the midpoint ``a + n//2`` belongs to both.
    """
    starts, ends = [], []
    for run in group.runs:
        lo, hi = run.interval.start, run.interval.end
        if run.label in (Stage.READY, Stage.START):
            starts.append(np.arange(lo, hi))
        elif run.label in (Stage.END, Stage.FOLLOW):
            ends.append(np.arange(lo, hi))
        elif run.label == Stage.CONFIRM:
            mid = lo + (hi - lo) // 2
            starts.append(np.arange(lo, mid + 1))
            ends.append(np.arange(mid, hi))
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    return cat(starts).astype(np.int64), cat(ends).astype(np.int64)


def _guard(starts: np.ndarray, ends: np.ndarray, group_len: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = len(starts) * len(ends)
    if group_len <= GUARD_GROUP_LEN or pairs <= GUARD_MAX_PAIRS:
        return starts, ends
    k = math.ceil(math.sqrt(pairs / GUARD_MAX_PAIRS))
    return starts[::k], ends[::k]


def _combine_arrays(
    group: InstanceGroup,
    starts: np.ndarray,
    ends: np.ndarray,
    rule: Containment = Containment.ANY_CORE,
    guard: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized pair filter; returns ``[start, end)`` arrays."""
    span = group.span
    labels = group.labels()
    if guard:
        starts, ends = _guard(starts, ends, span.length)
    if len(starts) == 0 or len(ends) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty

    def prefix(*stages):
        hit = np.isin(labels, [int(s) for s in stages])
        return np.concatenate([[0], np.cumsum(hit)])

    s = np.repeat(starts, len(ends)) - span.start
    e = np.tile(ends, len(starts)) - span.start + 1
    ok = s < e
    s, e = s[ok], e[ok]
    bg = prefix(Stage.BACKGROUND)
    ok = (bg[e] - bg[s]) == 0
    if Containment(rule) is Containment.ANY_CORE:
        core = prefix(Stage.START, Stage.CONFIRM)
        ok &= (core[e] - core[s]) > 0
    else:
        for st in (Stage.START, Stage.CONFIRM, Stage.FOLLOW):
            c = prefix(st)
            ok &= (c[e] - c[s]) > 0
    return s[ok] + span.start, e[ok] + span.start


def combine(
    group: InstanceGroup,
    starts,
    ends,
    rule: Containment = Containment.ANY_CORE,
    source_video: str = "",
    guard: bool = True,
) -> list[Proposal]:
    """Pair candidate starts with candidate ends.

    A pair ``(s, e)`` with ``s <= e`` yields the interval ``[s, e + 1)``
    when the spanned labels satisfy ``rule``.
    """
    lo, hi = _combine_arrays(
        group, np.asarray(sorted(starts), dtype=np.int64), np.asarray(sorted(ends), dtype=np.int64), rule, guard
    )
    return [Proposal(TimeInterval(int(a), int(b)), source_video) for a, b in zip(lo, hi)]


def _pre_score_arrays(lo: np.ndarray, hi: np.ndarray, group: InstanceGroup, decay: float) -> np.ndarray:
    score = np.ones(len(lo))
    if group.q_s is not None:
        score *= np.maximum(0.0, 1.0 - np.abs(lo - group.q_s) * decay)
    if group.q_e is not None:
        score *= np.maximum(0.0, 1.0 - np.abs(hi - (group.q_e + 1)) * decay)
    return score


def pre_score(p: Proposal | TimeInterval, group: InstanceGroup, decay: float = DEFAULT_DECAY) -> float:
    """``(1 - d_s*decay)(1 - d_e*decay)`` with each factor clamped at 0.

    ``d_s`` is the distance to the group's first Start timestep and
    ``d_e`` the distance to the exclusive end of its last End run. A
    missing Start (or End) leaves that factor at 1.
    """
    if decay < 0:
        raise StagePropError("decay must be non-negative")
    iv = p.interval if isinstance(p, Proposal) else p
    return float(_pre_score_arrays(np.array([iv.start]), np.array([iv.end]), group, decay)[0])


def decode_groups(
    seq: StageSequence | np.ndarray,
    decay: float = DEFAULT_DECAY,
    rule: Containment = Containment.ANY_CORE,
    guard: bool = True,
    split: bool = True,
):
    """Yield ``(group, starts, ends, pre_scores)`` for every instance group
    (every episode when ``split`` is set)."""
    groups = group_instances(extract_runs(seq))
    if split:
        groups = [ep for g in groups for ep in split_episodes(g)]
    for group in groups:
        s, e = candidates(group)
        lo, hi = _combine_arrays(group, s, e, rule, guard)
        yield group, lo, hi, _pre_score_arrays(lo, hi, group, decay)


def decode_arrays(
    seq: StageSequence | np.ndarray,
    decay: float = DEFAULT_DECAY,
    rule: Containment = Containment.ANY_CORE,
    guard: bool = True,
    split: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All proposals of a sequence as ``(starts, ends, pre_scores)`` arrays."""
    parts = [(lo, hi, sc) for _, lo, hi, sc in decode_groups(seq, decay, rule, guard, split)]
    if not parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    return tuple(np.concatenate(col) for col in zip(*parts))


def decode(
    seq: StageSequence | np.ndarray,
    video_id: str = "",
    decay: float = DEFAULT_DECAY,
    rule: Containment = Containment.ANY_CORE,
    guard: bool = True,
    split: bool = True,
) -> list[ScoredProposal]:
    lo, hi, sc = decode_arrays(seq, decay, rule, guard, split)
    return [
        ScoredProposal(Proposal(TimeInterval(int(a), int(b)), video_id), float(p))
        for a, b, p in zip(lo, hi, sc)
    ]
