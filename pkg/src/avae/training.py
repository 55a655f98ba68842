"""ELBO maximization with Adam, keeping the best validation weights."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .checkpoint import save_checkpoint
from .data import Dataset
from .gaussian import kl_to_standard_normal
from .models import Architecture, ModelParameters, forward, init_params

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    lr: float = 1e-4
    val_period: int = 10
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.val_period < 1 or not self.lr > 0:
            raise ValueError(f"invalid training configuration: {self}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class TrainReport:
    val_elbo: list[tuple[int, float]] = field(default_factory=list)
    best_epoch: int = 0
    checkpoint: Path | None = None

    @property
    def best_elbo(self) -> float:
        return dict(self.val_elbo)[self.best_epoch]

    def to_text(self) -> str:
        first = self.val_elbo[0][1] if self.val_elbo else float("nan")
        lines = [
            f"best_epoch={self.best_epoch}",
            f"best_val_elbo={self.best_elbo!r}",
            f"initial_val_elbo={first!r}",
            f"evaluations={len(self.val_elbo)}",
            f"checkpoint={self.checkpoint or ''}",
        ]
        return "\n".join(lines) + "\n"

    def trace_csv(self) -> str:
        return "epoch,value\n" + "".join(f"{e},{v!r}\n" for e, v in self.val_elbo)

    def write(self, directory) -> None:
        directory = Path(directory)
        (directory / "train_report.txt").write_text(self.to_text(), encoding="utf-8")
        (directory / "val_elbo.csv").write_text(self.trace_csv(), encoding="utf-8")


def reconstruction_nll(arch: Architecture, x, raw: Tensor) -> Tensor:
    """Per-image negative log-likelihood of ``x`` under the decoder output."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    bsz = x.shape[0]
    if arch.likelihood == "gaussian":
        return 0.5 * ad.square(x - raw).reshape(bsz, -1).sum(axis=-1)
    p = ad.sigmoid(raw)
    if logger.isEnabledFor(logging.DEBUG):
        n = int(np.sum((p.data < PROB_CLAMP) | (p.data > 1 - PROB_CLAMP)))
        if n:
            logger.debug("clamped %d Bernoulli probabilities", n)
    p = ad.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = x * ad.log(p) + (1.0 - x) * ad.log(1.0 - p)
    return -ll.reshape(bsz, -1).sum(axis=-1)


def elbo_loss(params: ModelParameters, x, noise, weights=None) -> Tensor:
    """Batch mean of the negative ELBO with one posterior sample per image."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    q, raw = forward(params, xt, noise, weights)
    per_image = reconstruction_nll(params.arch, xt, raw) + kl_to_standard_normal(q)
    return per_image.sum() / float(xt.shape[0])


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in arrays.items()},
                   {k: np.zeros_like(v) for k, v in arrays.items()})


def adam_step(state: AdamState, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              lr: float) -> tuple[AdamState, dict[str, np.ndarray]]:
    """Bias-corrected Adam update; returns new state and new arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r} at Adam step {state.t + 1}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m, v, out = {}, {}, {}
    for name, w in arrays.items():
        g = grads[name]
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** t)
        v_hat = v[name] / (1 - b2 ** t)
        out[name] = w - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(m, v, t, b1, b2, state.eps), out


def loss_and_grads(params: ModelParameters, x: np.ndarray, noise: np.ndarray
                   ) -> tuple[float, dict[str, np.ndarray]]:
    leaves = params.leaves()
    with Tape() as tape:
        loss = elbo_loss(params, x, noise, leaves)
    grads = backward(tape, loss, list(leaves.values()))
    return loss.item(), {k: grads[t].data for k, t in leaves.items()}


def evaluate_elbo(params: ModelParameters, images: np.ndarray, seed: int, batch_size: int = 256) -> float:
    """Mean ELBO (higher is better) with noise drawn from a fixed ``seed``."""
    noise = np.random.default_rng(seed).standard_normal((len(images), params.arch.code_size))
    total = 0.0
    for i in range(0, len(images), batch_size):
        xb = images[i:i + batch_size]
        total += elbo_loss(params, xb, noise[i:i + batch_size]).item() * len(xb)
    return -total / len(images)


def train(model: Architecture | ModelParameters, dataset: Dataset, config: TrainConfig,
          out_dir=None) -> tuple[ModelParameters, TrainReport]:
    """Train and return the best-validation weights.

    Validation runs at epoch 0 (the initialization), every
    ``config.val_period`` epochs and after the last epoch.  With ``out_dir``
    the best weights are checkpointed there as they improve.
    """
    rng = np.random.default_rng(config.seed)
    params = model if isinstance(model, ModelParameters) else init_params(model, rng)
    val_seed = int(np.random.default_rng([config.seed, 1]).integers(2 ** 31))
    train_x = dataset.split("train")
    val_x = dataset.split("validation")
    ckpt = Path(out_dir) / "checkpoint.avae" if out_dir is not None else None

    report = TrainReport(checkpoint=ckpt)
    best = params
    state = AdamState.zeros_like(params.arrays)

    def validate(epoch, current):
        nonlocal best
        elbo = evaluate_elbo(current, val_x, val_seed)
        if not np.isfinite(elbo):
            raise NumericalError(f"validation ELBO is {elbo} at epoch {epoch}")
        report.val_elbo.append((epoch, elbo))
        if len(report.val_elbo) == 1 or elbo > report.best_elbo:
            report.best_epoch = epoch
            best = current
            if ckpt is not None:
                save_checkpoint(ckpt, current)
        logger.info("epoch %d validation ELBO %.4f (best %.4f @ %d)",
                    epoch, elbo, report.best_elbo, report.best_epoch)

    validate(0, params)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_x))
        for i in range(0, len(order), config.batch_size):
            xb = train_x[order[i:i + config.batch_size]]
            noise = rng.standard_normal((len(xb), params.arch.code_size))
            loss, grads = loss_and_grads(params, xb, noise)
            if not np.isfinite(loss):
                raise NumericalError(f"training loss is {loss} in epoch {epoch}; "
                                     f"best weights kept at {ckpt or 'memory'}")
            state, arrays = adam_step(state, params.arrays, grads, config.lr)
            params = params.with_arrays(arrays)
        if epoch % config.val_period == 0 or epoch == config.epochs:
            validate(epoch, params)
    return best, report
