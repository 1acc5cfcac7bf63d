"""Adjacent-pair selection on squared capacity differences.

The selection maximises the summed squared differences of the chosen pairs
subject to choosing ``k`` of them. ``objective_value`` reports the matching
minimisation form ``-sum(score * m) + lam * (sum(m) - k)**2``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

from .capacity import CapacityVector
from .partition import GranularityScheme

MODES = ("data_free", "data_dependent")


@dataclass(frozen=True)
class PairScore:
    index: int
    score: float


def _values(cm) -> list[float]:
    return list(cm.values) if isinstance(cm, CapacityVector) else [float(v) for v in cm]


def score_pairs(cm: CapacityVector | Sequence[float]) -> list[PairScore]:
    vals = _values(cm)
    if len(vals) < 2:
        raise ValueError(f"need at least 2 modules to score pairs, got {len(vals)}")
    return [PairScore(i, (a - b) ** 2) for i, (a, b) in enumerate(zip(vals, vals[1:]))]


def _raw_scores(scores) -> list[float]:
    return [s.score if isinstance(s, PairScore) else float(s) for s in scores]


def select_topk(scores, k: int, mode: str = "data_free", metric: str = "modcap") -> GranularityScheme:
    """Pick the ``k`` largest-scoring pairs (ties to the lowest index).

    ``data_free`` refuses a pair that shares a module with one already chosen,
    so it may return fewer than ``k`` pairs; ``k_achieved`` says how many.
    """
    vals = _raw_scores(scores)
    if not 0 <= k <= len(vals):
        raise ValueError(f"k={k} outside [0, {len(vals)}]")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    order = sorted(range(len(vals)), key=lambda i: (-vals[i], i))
    mask = [0] * len(vals)
    if mode == "data_dependent":
        for i in order[:k]:
            mask[i] = 1
    else:
        chosen = 0
        for i in order:
            if chosen == k:
                break
            if (i > 0 and mask[i - 1]) or (i + 1 < len(mask) and mask[i + 1]):
                continue
            mask[i] = 1
            chosen += 1
    return GranularityScheme(mask, k, sum(mask), metric, mode)


def default_lambda(scores) -> float:
    vals = _raw_scores(scores)
    return max(vals) * (len(vals) + 1)


def objective_terms(mask, cm, k: int) -> tuple[float, float]:
    """``(selection, cardinality)`` terms: sum of selected squared differences
    and ``(sum(mask) - k)**2``."""
    vals = _values(cm)
    if len(mask) != len(vals) - 1:
        raise ValueError(f"mask length {len(mask)} != {len(vals) - 1}")
    sel = sum((vals[i] - vals[i + 1]) ** 2 for i, m in enumerate(mask) if m)
    return sel, float((sum(mask) - k) ** 2)


def objective_value(mask, cm, k: int, lam: float | None = None) -> float:
    """Minimisation form: ``-selection + lam * cardinality``.

    ``lam`` defaults to ``max(score) * L`` which makes the cardinality
    constraint effectively hard.
    """
    if lam is None:
        lam = default_lambda(score_pairs(cm))
    sel, card = objective_terms(mask, cm, k)
    return -sel + lam * card


def exhaustive_optimum(cm, k: int, lam: float | None = None) -> tuple[float, list[tuple[int, ...]]]:
    """Brute force over all ``2**(L-1)`` masks: best value and every mask attaining it."""
    vals = _values(cm)
    n = len(vals) - 1
    if lam is None:
        lam = max((a - b) ** 2 for a, b in zip(vals, vals[1:])) * len(vals)
    best = float("inf")
    arg: list[tuple[int, ...]] = []
    for mask in itertools.product((0, 1), repeat=n):
        sel = 0.0
        for i in range(n):
            if mask[i]:
                d = vals[i] - vals[i + 1]
                sel += d * d
        v = -sel + lam * (sum(mask) - k) ** 2
        if v < best:
            best, arg = v, [mask]
        elif v == best:
            arg.append(mask)
    return best, arg
