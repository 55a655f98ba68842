"""Distortion-Distortion curves, their normalized area (AUDDC) and aggregation."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .attack import BOUNDARY, Boundaries

logger = logging.getLogger(__name__)

TREATMENT_KEYS = ("dataset", "model", "latent_size", "timesteps", "layer")


class DegenerateCurveWarning(UserWarning):
    pass


@dataclass
class DDCurve:
    """Raw (input distortion, target distance) points plus the boundary lines."""

    points: np.ndarray          # (n, 2)
    b_top: float
    b_bottom: float
    b_right: float
    pair_id: int = 0
    layer: str = "latent"
    model: str = ""
    b_left: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    @classmethod
    def from_bounds(cls, points, bounds: Boundaries, **kw) -> "DDCurve":
        return cls(points, bounds.top, bounds.bottom, bounds.right, **kw)

    @property
    def degenerate(self) -> bool:
        return not self.b_top > self.b_bottom


@dataclass
class NormalizedCurve:
    points: np.ndarray          # (n, 2), u ascending, starts at u=0 and ends at u=1
    degenerate: bool = False


def normalize_curve(curve: DDCurve) -> NormalizedCurve:
    """Map a curve into the unit box spanned by its boundary lines."""
    if not curve.b_right > 0:
        raise ValueError(f"pair {curve.pair_id}: rightmost boundary must be positive, got {curve.b_right}")
    if curve.degenerate:
        warnings.warn(f"pair {curve.pair_id} ({curve.layer}): top boundary {curve.b_top:.6g} does not "
                      f"exceed bottom boundary {curve.b_bottom:.6g}; AUDDC set to 1",
                      DegenerateCurveWarning, stacklevel=2)
        return NormalizedCurve(np.array([[0.0, 1.0], [1.0, 1.0]]), degenerate=True)
    raw = curve.points
    u = np.clip(raw[:, 0] / curve.b_right, 0.0, 1.0)
    v = np.clip((raw[:, 1] - curve.b_bottom) / (curve.b_top - curve.b_bottom), 0.0, 1.0)
    best: dict[float, float] = {}
    for ui, vi in zip(u, v):
        best[ui] = min(vi, best.get(ui, np.inf))
    if 0.0 not in best:
        best[0.0] = 1.0
    us = np.array(sorted(best))
    pts = np.column_stack([us, [best[k] for k in us]])
    if pts[-1, 0] < 1.0:
        pts = np.vstack([pts, [1.0, pts[-1, 1]]])
    return NormalizedCurve(pts)


def auddc(points) -> float:
    """Trapezoid area over u in [0, 1] under the piecewise-linear interpolant.

    The curve is held flat beyond its first and last abscissa.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("cannot integrate an empty curve")
    pts = pts[np.argsort(pts[:, 0], kind="stable")]
    u, v = pts[:, 0], pts[:, 1]
    if u[0] > 0:
        u, v = np.concatenate([[0.0], u]), np.concatenate([[v[0]], v])
    if u[-1] < 1:
        u, v = np.concatenate([u, [1.0]]), np.concatenate([v, [v[-1]]])
    return float(np.sum(np.diff(u) * (v[1:] + v[:-1]) / 2.0))


def curve_auddc(curve: DDCurve) -> float:
    norm = normalize_curve(curve)
    return 1.0 if norm.degenerate else auddc(norm.points)


def monotone_compromise_test(curve: DDCurve) -> float:
    """Spearman rho between input distortion and approach to the target (b_top - distance)."""
    pts = curve.points
    if len(np.unique(pts, axis=0)) < 5:
        raise ValueError("need at least 5 distinct points for a rank correlation")
    rho = stats.spearmanr(pts[:, 0], curve.b_top - pts[:, 1])[0]
    return float(rho)


# ------------------------------------------------------------ aggregation

@dataclass(frozen=True)
class Score:
    treatment: tuple
    pair_id: int
    value: float


@dataclass(frozen=True)
class Summary:
    treatment: tuple
    n: int
    mean: float
    half_width: float | None     # 95% t-interval; None for a single score


def confidence_half_width(values, level: float = 0.95) -> float | None:
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 2:
        return None
    s = values.std(ddof=1)
    return float(stats.t.ppf(0.5 + level / 2.0, n - 1) * s / math.sqrt(n))


def aggregate(scores: list[Score]) -> list[Summary]:
    groups: dict[tuple, list[float]] = defaultdict(list)
    for s in scores:
        groups[s.treatment].append(s.value)
    return [Summary(t, len(v), float(np.mean(v)), confidence_half_width(v))
            for t, v in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0])))]


@dataclass
class ScoredRun:
    scores: list[Score] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    curves: dict[tuple, DDCurve] = field(default_factory=dict)


def curves_from_rows(rows: list[dict[str, str]]) -> tuple[dict[tuple, DDCurve], list[str]]:
    """Group raw-CSV rows into curves keyed by (treatment, pair_id)."""
    points: dict[tuple, list] = defaultdict(list)
    bounds: dict[tuple, tuple] = {}
    for row in rows:
        treatment = tuple(row.get(k, "") for k in TREATMENT_KEYS)
        key = (treatment, int(row["pair_id"]))
        if row["C"] == BOUNDARY:
            bounds[key] = (float(row["mean_target_distance"]), float(row["objective"]),
                           float(row["mean_input_distortion"]))
        else:
            points[key].append((float(row["mean_input_distortion"]), float(row["mean_target_distance"])))
    curves, errors = {}, []
    for key in sorted(set(points) | set(bounds), key=lambda k: (tuple(map(str, k[0])), k[1])):
        treatment, pid = key
        if key not in bounds:
            errors.append(f"pair {pid} {'/'.join(map(str, treatment))}: missing boundary row")
            continue
        if key not in points:
            errors.append(f"pair {pid} {'/'.join(map(str, treatment))}: no attack points")
            continue
        top, bottom, right = bounds[key]
        curves[key] = DDCurve(points[key], top, bottom, right, pair_id=pid, layer=treatment[-1],
                              model=treatment[1])
    return curves, errors


def score_rows(rows: list[dict[str, str]]) -> ScoredRun:
    curves, errors = curves_from_rows(rows)
    run = ScoredRun(errors=errors, curves=curves)
    for (treatment, pid), curve in curves.items():
        try:
            run.scores.append(Score(treatment, pid, curve_auddc(curve)))
        except ValueError as e:
            run.errors.append(f"pair {pid}: {e}")
    for e in run.errors:
        logger.error(e)
    return run


def scores_csv(scores: list[Score]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TREATMENT_KEYS + ("pair_id", "auddc"))
    for s in scores:
        w.writerow(list(s.treatment) + [s.pair_id, repr(s.value)])
    return buf.getvalue()


def summary_csv(summaries: list[Summary]) -> str:
    """Means and 95% half-widths scaled by 100; a blank half-width marks n = 1."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TREATMENT_KEYS + ("n", "auddc_x100", "ci95_x100"))
    for s in summaries:
        hw = "" if s.half_width is None else f"{100 * s.half_width:.2f}"
        w.writerow(list(s.treatment) + [s.n, f"{100 * s.mean:.2f}", hw])
    return buf.getvalue()
