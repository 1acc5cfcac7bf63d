"""Oscillation measure, random-scheme sampling and the calibration-size study."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .graph import ModelGraph
from .model_io import CalibrationSet, generate_calibration
from .partition import build_modules
from .reconstruction import ReconConfig, run_pipeline


@dataclass(frozen=True)
class OscillationSummary:
    score: float
    num_drops: int
    max_loss: float
    final_loss: float

    def to_dict(self) -> dict:
        return asdict(self)


def oscillation_score(final_losses: Sequence[float]) -> OscillationSummary:
    """Total downward variation of the per-module final losses."""
    losses = [float(v) for v in final_losses]
    if not losses:
        raise ValueError("oscillation_score needs at least one loss")
    drops = [a - b for a, b in zip(losses, losses[1:]) if a > b]
    return OscillationSummary(float(sum(drops)), len(drops), max(losses), losses[-1])


# -- parallel map --------------------------------------------------------------


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("MRECG_THREADS", "1")))
    except ValueError:
        return 1


def _ordered_map(fn: Callable, jobs: list) -> list:
    """``map`` in input order, fanned out over ``MRECG_THREADS`` processes."""
    n = min(_workers(), len(jobs))
    if n <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(n) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# -- random schemes --------------------------------------------------------------


@dataclass
class SchemeSample:
    mask: list[int]
    max_prev_loss: float
    final_loss: float

    @property
    def k(self) -> int:
        return sum(self.mask)


def random_masks(num_pairs: int, num_samples: int, k_range: tuple[int, int], seed: int) -> list[list[int]]:
    """Zero mask first, then ``num_samples`` masks: ``k`` uniform on the
    inclusive ``k_range``, pair positions a uniform ``k``-subset."""
    lo, hi = k_range
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    if not 0 <= lo <= hi <= num_pairs:
        raise ValueError(f"k_range {k_range} outside [0, {num_pairs}]")
    rng = np.random.default_rng(np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF))
    masks = [[0] * num_pairs]
    for _ in range(num_samples):
        k = int(rng.integers(lo, hi + 1))
        m = [0] * num_pairs
        for i in rng.choice(num_pairs, k, replace=False):
            m[int(i)] = 1
        masks.append(m)
    return masks


def _scheme_job(model, mask, calib, cfg):
    rep = run_pipeline(model, mask, calib, cfg)
    losses = rep.final_losses
    prev = max(losses[:-1]) if len(losses) > 1 else float("nan")
    return SchemeSample(list(mask), prev, losses[-1])


def sample_schemes(
    model: ModelGraph,
    calib: CalibrationSet,
    num_samples: int,
    k_range: tuple[int, int],
    seed: int,
    cfg: ReconConfig,
) -> list[SchemeSample]:
    """Run the pipeline on the zero mask plus ``num_samples`` random masks.

    ``max_prev_loss`` is the largest final loss among all modules before the
    last one. A fully merged mask has no previous module and reports NaN.
    """
    n_pairs = len(build_modules(model, cfg.granularity)) - 1
    masks = random_masks(n_pairs, num_samples, k_range, seed)
    return _ordered_map(_scheme_job, [(model, m, calib, cfg) for m in masks])


def scheme_correlation(rows: Sequence[SchemeSample]) -> float:
    """Spearman rank correlation of max-previous loss vs final loss."""
    pts = [(r.max_prev_loss, r.final_loss) for r in rows if np.isfinite(r.max_prev_loss)]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 finite rows for a correlation, got {len(pts)}")
    a, b = zip(*pts)
    if len(set(a)) < 2 or len(set(b)) < 2:
        return float("nan")  # undefined for a constant column
    return float(spearmanr(a, b).statistic)


# -- calibration size study ------------------------------------------------------


@dataclass
class BatchRow:
    size: int
    median_final_loss: float
    loss_mad: float
    losses: list[float]


def _batch_job(model, size, seed, cfg, eval_inputs):
    calib = generate_calibration(model.input_shape, size, cfg.num_batches, seed=seed)
    rep = run_pipeline(model, None, calib, replace(cfg, seed=seed), eval_inputs)
    return rep.modules[-1].eval_loss


def batch_size_study(
    model: ModelGraph,
    sizes: Sequence[int],
    seeds_per_size: int,
    cfg: ReconConfig,
    eval_inputs: np.ndarray,
    seed: int = 0,
) -> list[BatchRow]:
    """Median and MAD of the held-out final loss for each calibration batch size.

    Each run draws ``size * cfg.num_batches`` fresh calibration samples, so a
    larger size means a better estimate of the expected reconstruction loss.
    """
    sizes = [int(s) for s in sizes]
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ValueError(f"sizes must be strictly ascending, got {sizes}")
    if seeds_per_size < 1:
        raise ValueError("seeds_per_size must be >= 1")
    jobs = [(model, s, seed * 1000 + r, cfg, eval_inputs) for s in sizes for r in range(seeds_per_size)]
    losses = _ordered_map(_batch_job, jobs)
    rows = []
    for i, s in enumerate(sizes):
        v = np.array(losses[i * seeds_per_size : (i + 1) * seeds_per_size])
        med = float(np.median(v))
        rows.append(BatchRow(s, med, float(np.median(np.abs(v - med))), [float(x) for x in v]))
    return rows


# -- tables ------------------------------------------------------------------------


def _f(x: float) -> str:
    return repr(float(x))


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def oscillation_csv(summaries: Sequence[tuple[str, OscillationSummary]]) -> str:
    return _csv(
        ["run", "score", "num_drops", "max_loss", "final_loss"],
        [[name, _f(s.score), s.num_drops, _f(s.max_loss), _f(s.final_loss)] for name, s in summaries],
    )


def schemes_csv(rows: Sequence[SchemeSample]) -> str:
    return _csv(
        ["row", "mask", "k", "max_prev_loss", "final_loss"],
        [[i, "".join(map(str, r.mask)), r.k, _f(r.max_prev_loss), _f(r.final_loss)] for i, r in enumerate(rows)],
    )


def batch_csv(rows: Sequence[BatchRow]) -> str:
    return _csv(
        ["size", "median_final_loss", "loss_mad", "losses"],
        [[r.size, _f(r.median_final_loss), _f(r.loss_mad), ";".join(_f(x) for x in r.losses)] for r in rows],
    )


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def write_table(path, text: str, summary: dict | None = None) -> None:
    """Write a CSV and, when given, its JSON twin next to it."""
    path = Path(path)
    path.write_text(text)
    if summary is not None:
        path.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def schemes_summary(rows: Sequence[SchemeSample]) -> dict:
    def num(x):
        return float(x) if np.isfinite(x) else None

    out = {"rows": [{"mask": r.mask, "max_prev_loss": num(r.max_prev_loss), "final_loss": r.final_loss} for r in rows]}
    try:
        out["spearman"] = num(scheme_correlation(rows))
    except ValueError:
        out["spearman"] = None
    return out


def batch_summary(rows: Sequence[BatchRow]) -> dict:
    return {"rows": [asdict(r) for r in rows]}
