"""Targeted attacks on the latent code and on the output of a trained model.

For a regularization constant C the attack solves, over a batch of replicas
of the original image x,

    latent:  min_d  KL(q(z | x + d) || q(z | target)) + C ||d||^2
    output:  min_d  ||decode(z_a) - target||^2 + C ||d||^2,  z_a ~ q(z | x + d)

subject to 0 <= x + d <= 1, with d as the optimization variable.  Output
attacks freeze one noise draw per replica for the whole optimization.
Reported target distances decode the posterior mean, so the point at d = 0
sits exactly on the top boundary.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .gaussian import kl_between
from .lbfgsb import LbfgsbConfig, lbfgsb_minimize
from .models import ModelParameters, encode, forward, output_transform, reconstruct

logger = logging.getLogger(__name__)

LAYERS = ("latent", "output")
RAW_COLUMNS = ("pair_id", "layer", "C", "mean_input_distortion", "mean_target_distance",
               "objective", "iterations", "converged", "dataset", "model", "latent_size", "timesteps")
BOUNDARY = "boundary"


def sweep_C(count: int = 51, lo: float = -20.0, hi: float = 20.0) -> np.ndarray:
    """{0} followed by ``count - 1`` powers of two with exponents evenly spaced in [lo, hi]."""
    if count < 2:
        raise ValueError("a sweep needs at least two values")
    return np.concatenate([[0.0], 2.0 ** np.linspace(lo, hi, count - 1)])


def distortion_box(x: np.ndarray, lower: float = 0.0, upper: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Bounds on d such that lower <= x + d <= upper holds in floating point."""
    lo = lower - x
    hi = upper - x
    while True:
        over = x + hi > upper
        under = x + lo < lower
        if not over.any() and not under.any():
            return lo, hi
        hi[over] = np.nextafter(hi[over], -np.inf)
        lo[under] = np.nextafter(lo[under], np.inf)


@dataclass(frozen=True, eq=False)
class AttackProblem:
    params: ModelParameters
    x: np.ndarray
    target: np.ndarray
    C: float
    layer: str = "latent"
    batch: int = 128
    seed: int = 0
    checkpoint: str = ""

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        t = np.asarray(self.target, dtype=np.float64)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "target", t)
        if x.shape != t.shape or x.shape != tuple(self.params.arch.image):
            raise ValueError(f"original {x.shape} and target {t.shape} must both have shape "
                             f"{self.params.arch.image}")
        for name, img in (("original", x), ("target", t)):
            if img.min() < 0.0 or img.max() > 1.0:
                raise ValueError(f"{name} image leaves [0, 1]")
        if not self.C >= 0:
            raise ValueError(f"C must be nonnegative, got {self.C}")
        if self.layer not in LAYERS:
            raise ValueError(f"unknown layer {self.layer!r}; expected one of {LAYERS}")
        if self.batch < 1:
            raise ValueError("batch width must be positive")

    @cached_property
    def noise(self) -> np.ndarray:
        """One frozen standard-normal draw per replica."""
        return np.random.default_rng(self.seed).standard_normal((self.batch, self.params.arch.code_size))

    @cached_property
    def target_posterior(self):
        return encode(self.params, self.target)

    @cached_property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = distortion_box(self.x)
        shape = (self.batch,) + self.x.shape
        return np.broadcast_to(lo, shape).ravel().copy(), np.broadcast_to(hi, shape).ravel().copy()

    def with_C(self, C: float) -> "AttackProblem":
        return AttackProblem(self.params, self.x, self.target, C, self.layer, self.batch,
                             self.seed, self.checkpoint)


def _objective(problem: AttackProblem, d: np.ndarray, distance) -> tuple[float, np.ndarray]:
    shape = (problem.batch,) + problem.x.shape
    dt = Tensor(np.reshape(d, shape), requires_grad=True)
    with Tape() as tape:
        xa = Tensor(problem.x) + dt
        dist = distance(xa)
        penalty = ad.square(dt).reshape(problem.batch, -1).sum(axis=-1)
        value = (dist + problem.C * penalty).sum() / float(problem.batch)
    grad = backward(tape, value, [dt])[dt].data
    return value.item(), grad.reshape(np.shape(d))


def attack_objective_output(problem: AttackProblem, d: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of squared l2 output-to-target distance plus C ||d||^2, and its gradient."""
    params, target = problem.params, Tensor(problem.target)

    def distance(xa):
        _, raw = forward(params, xa, problem.noise)
        r = output_transform(params.arch, raw)
        return ad.square(r - target).reshape(problem.batch, -1).sum(axis=-1)

    return _objective(problem, d, distance)


def attack_objective_latent(problem: AttackProblem, d: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of KL(q(x + d) || q(target)) plus C ||d||^2, and its gradient."""
    qt = problem.target_posterior
    return _objective(problem, d, lambda xa: kl_between(encode(problem.params, xa), qt))


OBJECTIVES = {"latent": attack_objective_latent, "output": attack_objective_output}


@dataclass(frozen=True)
class AttackPoint:
    C: float
    mean_input_distortion: float
    mean_target_distance: float
    objective: float
    iterations: int
    converged: bool
    adversarial: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class Boundaries:
    """Reference lines of a Distortion-Distortion plot (the left one is 0)."""

    top: float       # original's reconstruction to target
    bottom: float    # target's own reconstruction to target
    right: float     # original to target


def target_distances(problem: AttackProblem, images: np.ndarray) -> np.ndarray:
    """||reconstruct(image) - target|| per image, decoding the posterior mean."""
    images = np.asarray(images).reshape((-1,) + problem.x.shape)
    r = reconstruct(problem.params, images)
    return np.linalg.norm((r - problem.target).reshape(len(images), -1), axis=1)


def boundaries(problem: AttackProblem) -> Boundaries:
    return Boundaries(
        top=float(target_distances(problem, problem.x)[0]),
        bottom=float(target_distances(problem, problem.target)[0]),
        right=float(np.linalg.norm(problem.x - problem.target)),
    )


def initial_distortion(problem: AttackProblem, scale: float) -> np.ndarray:
    lo, hi = problem.box
    rng = np.random.default_rng([problem.seed, 2])
    return np.clip(rng.uniform(-scale, scale, size=lo.shape), lo, hi)


def attack_point(problem: AttackProblem, cfg: LbfgsbConfig = LbfgsbConfig(),
                 keep_adversarial: bool = False) -> AttackPoint:
    """Optimize all replicas jointly and report batch-averaged distortions."""
    fg = lambda d: OBJECTIVES[problem.layer](problem, d)  # noqa: E731
    lo, hi = problem.box
    d0 = initial_distortion(problem, cfg.init_scale)
    try:
        res = lbfgsb_minimize(fg, d0, lo, hi, cfg)
        d, value, iters, ok = res.x, res.fun, res.iterations, res.converged
        if not ok:
            logger.debug("C=%g: %s after %d iterations", problem.C, res.message, iters)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
        logger.warning("attack at C=%g failed: %s", problem.C, e)
        d, iters, ok = d0, 0, False
        value = float("nan")
    shape = (problem.batch,) + problem.x.shape
    d = d.reshape(shape)
    adv = problem.x + d
    dist = np.linalg.norm(d.reshape(problem.batch, -1), axis=1)
    reach = target_distances(problem, adv)
    return AttackPoint(float(problem.C), float(dist.mean()), float(reach.mean()), float(value),
                       int(iters), bool(ok), adv if keep_adversarial else None)


@dataclass
class PairResult:
    pair_id: int
    layer: str
    bounds: Boundaries
    points: list[AttackPoint]


def _run_point(args):
    problem, cfg, keep = args
    return attack_point(problem, cfg, keep)


def attack_pair(params: ModelParameters, x: np.ndarray, target: np.ndarray, layer: str, *,
                Cs=None, batch: int = 128, seed: int = 0, cfg: LbfgsbConfig = LbfgsbConfig(),
                pair_id: int = 0, jobs: int = 1, keep_adversarial: bool = False) -> PairResult:
    """Boundaries plus one attack point per C of the sweep."""
    Cs = sweep_C() if Cs is None else np.asarray(Cs, dtype=np.float64)
    base = AttackProblem(params, x, target, 0.0, layer, batch, seed)
    tasks = [(base.with_C(float(C)), cfg, keep_adversarial) for C in Cs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(_run_point, tasks))
    else:
        points = [_run_point(t) for t in tasks]
    return PairResult(pair_id, layer, boundaries(base), points)


# ------------------------------------------------------------------ raw CSV

def _fmt(v: float) -> str:
    return repr(float(v))


def raw_rows(result: PairResult, treatment: dict) -> list[list[str]]:
    extra = [str(treatment.get(k, "")) for k in ("dataset", "model", "latent_size", "timesteps")]
    rows = []
    for p in result.points:
        rows.append([str(result.pair_id), result.layer, _fmt(p.C), _fmt(p.mean_input_distortion),
                     _fmt(p.mean_target_distance), _fmt(p.objective), str(p.iterations),
                     str(int(p.converged))] + extra)
    b = result.bounds
    rows.append([str(result.pair_id), result.layer, BOUNDARY, _fmt(b.right), _fmt(b.top),
                 _fmt(b.bottom), "0", "1"] + extra)
    return rows


def write_raw_csv(path, results: list[PairResult], treatment: dict) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RAW_COLUMNS)
    for r in results:
        w.writerows(raw_rows(r, treatment))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_raw_csv(path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in RAW_COLUMNS[:8] if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        return list(reader)
