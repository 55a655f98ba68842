"""Desk-scale experiment drivers shared by the acceptance suite and scripts/."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .attack import PairResult, attack_pair, sweep_C
from .data import Dataset, EvaluationSet, bundled_mnist_path, load_mnist, sample_evaluation_pairs
from .evaluation import DDCurve, curve_auddc, monotone_compromise_test
from .lbfgsb import LbfgsbConfig
from .models import ModelParameters, preset
from .training import TrainConfig, TrainReport, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackSettings:
    layer: str = "latent"
    c_sweep: int = 11
    batch: int = 16
    pairs: int = 5
    max_iter: int = 1000
    seed_pairs: int = 0
    seed_noise: int = 0
    jobs: int = 1


@dataclass
class PairSummary:
    pair_id: int
    auddc: float
    rho: float
    degenerate: bool
    seconds: float
    result: PairResult = field(repr=False)

    @property
    def curve(self) -> DDCurve:
        pts = [(p.mean_input_distortion, p.mean_target_distance) for p in self.result.points]
        return DDCurve.from_bounds(pts, self.result.bounds, pair_id=self.pair_id, layer=self.result.layer)


def mnist_subset(seed: int = 0) -> Dataset:
    return load_mnist(bundled_mnist_path(), seed=seed)


def train_model(dataset: Dataset, family: str, latent: int, *, epochs: int, lr: float, seed: int = 0,
                **arch_kw) -> tuple[ModelParameters, TrainReport]:
    arch = preset(family, dataset.name, latent, image=dataset.dims, **arch_kw)
    t0 = time.perf_counter()
    params, report = train(arch, dataset, TrainConfig(epochs=epochs, lr=lr, seed=seed))
    logger.info("%s trained in %.0fs: validation ELBO %.2f -> %.2f", family, time.perf_counter() - t0,
                report.val_elbo[0][1], report.best_elbo)
    return params, report


def pair_seed(noise_seed: int, pair_id: int) -> int:
    return int(np.random.SeedSequence([noise_seed, pair_id]).generate_state(1)[0])


def attack_evaluation_set(params: ModelParameters, dataset: Dataset, settings: AttackSettings,
                          keep_adversarial: bool = False) -> tuple[EvaluationSet, list[PairSummary]]:
    """Attack every evaluation pair and score each curve."""
    pairs = sample_evaluation_pairs(dataset, settings.seed_pairs, settings.pairs)
    cfg = LbfgsbConfig(max_iter=settings.max_iter)
    out = []
    for pid, (i, j) in enumerate(pairs.pairs):
        t0 = time.perf_counter()
        res = attack_pair(params, dataset.images[i], dataset.images[j], settings.layer,
                          Cs=sweep_C(settings.c_sweep), batch=settings.batch,
                          seed=pair_seed(settings.seed_noise, pid), cfg=cfg, pair_id=pid,
                          jobs=settings.jobs, keep_adversarial=keep_adversarial)
        summary = PairSummary(pid, float("nan"), float("nan"), False, time.perf_counter() - t0, res)
        curve = summary.curve
        summary.degenerate = curve.degenerate
        summary.auddc = curve_auddc(curve)
        try:
            summary.rho = monotone_compromise_test(curve)
        except ValueError as e:
            logger.warning("pair %d: %s", pid, e)
        logger.info("pair %d: AUDDC %.3f, rho %.3f, %.0fs", pid, summary.auddc, summary.rho, summary.seconds)
        out.append(summary)
    return pairs, out
