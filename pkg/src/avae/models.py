"""Encoder/decoder families: fully-connected VAE, convolutional VAE and DRAW.

All forward functions are deterministic.  The only source of randomness is
the explicit ``noise`` argument used by the reparameterized sampler, so an
attack can freeze it for the whole optimization.

Images are ``(B, C, H, W)`` arrays in [0, 1]; single images ``(C, H, W)``
are accepted and unbatched results returned.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from functools import cached_property
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, conv_output_size, deconv_output_size
from .gaussian import DiagonalGaussian, sample_latent

logger = logging.getLogger(__name__)

FAMILIES = ("vae", "cvae", "draw")
LIKELIHOODS = ("bernoulli", "gaussian")


def _specs(text: str) -> tuple[tuple[int, int], ...]:
    if not text.strip():
        return ()
    out = []
    for item in text.split(","):
        f, k = item.strip().split("x")
        out.append((int(f), int(k)))
    return tuple(out)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class Architecture:
    """Everything needed to rebuild a model's parameter shapes.

    ``latent`` is per timestep for DRAW; the attacked code is ``latent *
    timesteps`` long.  Conv specs are ``(filters, kernel)`` pairs and every
    (de)convolution uses ``stride``.
    """

    family: str
    image: tuple[int, int, int]
    latent: int
    likelihood: str = "bernoulli"
    hidden: tuple[int, ...] = (512, 512)
    enc_convs: tuple[tuple[int, int], ...] = ()
    enc_fc: int = 512
    dec_fc: int = 512
    dec_dconvs: tuple[tuple[int, int], ...] = ()
    stride: int = 2
    timesteps: int = 1
    lstm: int = 256
    attention: bool = False
    read_n: int = 0
    write_n: int = 0
    note: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.latent < 1 or self.timesteps < 1 or self.stride < 1:
            raise ValueError("latent size, timesteps and stride must be positive")
        if self.family == "draw" and self.attention and (self.read_n < 1 or self.write_n < 1):
            raise ValueError("attention window must be at least 1x1")

    @property
    def pixels(self) -> int:
        c, h, w = self.image
        return c * h * w

    @property
    def code_size(self) -> int:
        """Length of the (concatenated) latent code."""
        return self.latent * (self.timesteps if self.family == "draw" else 1)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("enc_convs", "dec_dconvs"):
                v = ",".join(f"{a}x{b}" for a, b in v)
            elif isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = "on" if v else "off"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Architecture":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        known = {f.name: f for f in fields(cls)}
        args = {}
        for k, v in kv.items():
            if k not in known:
                raise ValueError(f"unknown architecture field {k!r}")
            if k in ("enc_convs", "dec_dconvs"):
                args[k] = _specs(v)
            elif k in ("image", "hidden"):
                args[k] = _ints(v)
            elif k == "attention":
                args[k] = v == "on"
            elif k in ("family", "likelihood", "note"):
                args[k] = v
            else:
                args[k] = int(v)
        return cls(**args)


DATASET_IMAGES = {"mnist": (1, 28, 28), "svhn": (3, 32, 32), "celeba": (3, 64, 64)}
_CVAE_LAYERS = {
    "mnist": (((32, 4), (64, 4), (128, 4)), ((128, 3), (64, 3), (32, 2), (16, 2))),
    "svhn": (((32, 4), (64, 4), (128, 4)), ((128, 5), (64, 5), (32, 5))),
    "celeba": (((32, 4), (64, 4), (128, 4), (256, 4)), ((256, 5), (128, 5), (64, 5), (32, 5))),
}
_DRAW_WINDOW = {"mnist": 8, "svhn": 16, "celeba": 24}


def preset(family: str, dataset: str, latent: int, *, timesteps: int = 1,
           attention: bool = False, lstm: int | None = None,
           image: tuple[int, int, int] | None = None) -> Architecture:
    """Architectures used for each dataset.

    ``image`` overrides the dataset's native size (desk-scale data); layer
    lists stay those of ``dataset``.
    """
    if dataset not in DATASET_IMAGES:
        raise ValueError(f"unknown dataset {dataset!r}")
    img = tuple(image) if image is not None else DATASET_IMAGES[dataset]
    lik = "bernoulli" if dataset == "mnist" else "gaussian"
    if family == "vae":
        return Architecture("vae", img, latent, lik, hidden=(512, 512))
    if family == "cvae":
        enc, dec = _CVAE_LAYERS[dataset]
        return Architecture("cvae", img, latent, lik, hidden=(), enc_convs=enc, dec_dconvs=dec,
                            note="1x1 projection to image channels appended after the last dconv")
    if family == "draw":
        if lstm is None:
            lstm = {"celeba": 2500 if timesteps == 1 else 400}.get(dataset, 256)
        n = _DRAW_WINDOW[dataset] if attention else 0
        return Architecture("draw", img, latent, lik, hidden=(), timesteps=timesteps, lstm=lstm,
                            attention=attention, read_n=n, write_n=n)
    raise ValueError(f"unknown model family {family!r}; expected one of {FAMILIES}")


# ------------------------------------------------------------------ shapes

def _cvae_geometry(arch: Architecture) -> tuple[int, int, int]:
    """(flattened encoder conv size, decoder start h0, w0)."""
    c, h, w = arch.image
    for f, k in arch.enc_convs:
        h, w = conv_output_size(h, k, arch.stride), conv_output_size(w, k, arch.stride)
        if h < 1 or w < 1:
            raise ValueError(f"encoder convolutions shrink {arch.image} below 1 pixel")
        c = f
    flat = c * h * w

    def grow(n):
        for f, k in arch.dec_dconvs:
            n = deconv_output_size(n, k, arch.stride)
        return n

    _, th, tw = arch.image
    h0 = next(s for s in range(1, th + 1) if grow(s) >= th)
    w0 = next(s for s in range(1, tw + 1) if grow(s) >= tw)
    return flat, h0, w0


def _read_dim(arch: Architecture) -> int:
    c, h, w = arch.image
    return 2 * c * (arch.read_n ** 2 if arch.attention else h * w)


def param_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor of ``arch``, in a fixed order."""
    s: dict[str, tuple[int, ...]] = {}
    L, P = arch.latent, arch.pixels
    C = arch.image[0]

    def dense(name, n_in, n_out):
        s[f"{name}.w"] = (n_in, n_out)
        s[f"{name}.b"] = (n_out,)

    if arch.family == "vae":
        n = P
        for i, u in enumerate(arch.hidden):
            dense(f"enc.fc{i}", n, u)
            n = u
        dense("enc.mu", n, L)
        dense("enc.logvar", n, L)
        n = L
        for i, u in enumerate(arch.hidden):
            dense(f"dec.fc{i}", n, u)
            n = u
        dense("dec.out", n, P)
    elif arch.family == "cvae":
        flat, h0, w0 = _cvae_geometry(arch)
        c = C
        for i, (f, k) in enumerate(arch.enc_convs):
            s[f"enc.conv{i}.w"] = (f, c, k, k)
            s[f"enc.conv{i}.b"] = (f,)
            c = f
        dense("enc.fc", flat, arch.enc_fc)
        dense("enc.mu", arch.enc_fc, L)
        dense("enc.logvar", arch.enc_fc, L)
        dense("dec.fc", L, arch.dec_fc * h0 * w0)
        c = arch.dec_fc
        for i, (f, k) in enumerate(arch.dec_dconvs):
            s[f"dec.dconv{i}.w"] = (c, f, k, k)
            s[f"dec.dconv{i}.b"] = (f,)
            c = f
        s["dec.proj.w"] = (C, c, 1, 1)
        s["dec.proj.b"] = (C,)
    else:
        H = arch.lstm
        dense("enc.lstm", _read_dim(arch) + 2 * H, 4 * H)  # [read, h_dec] + own h
        dense("enc.mu", H, L)
        dense("enc.logvar", H, L)
        dense("dec.lstm", L + H, 4 * H)
        if arch.attention:
            dense("read.att", H, 5)
            dense("write.att", H, 5)
            dense("write", H, C * arch.write_n ** 2)
        else:
            dense("write", H, P)
    return s


@dataclass(eq=False)
class ModelParameters:
    """Named weight arrays plus the architecture they belong to."""

    arch: Architecture
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.arch)
        if set(expected) != set(self.arrays):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise ValueError(f"parameter names do not match architecture (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if tuple(self.arrays[name].shape) != shape:
                raise ValueError(f"{name}: shape {self.arrays[name].shape}, architecture expects {shape}")
        self.arrays = {k: np.asarray(self.arrays[k], dtype=np.float64) for k in expected}

    @cached_property
    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v, name=k) for k, v in self.arrays.items()}

    def leaves(self) -> dict[str, Tensor]:
        """Fresh grad-requiring leaves, one per weight."""
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.arrays.items()}

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ModelParameters":
        return ModelParameters(self.arch, {k: np.array(v) for k, v in arrays.items()})

    def num_weights(self) -> int:
        return int(np.sum([v.size for v in self.arrays.values()]))


def init_params(arch: Architecture, rng: np.random.Generator) -> ModelParameters:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    arrays = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".b"):
            b = np.zeros(shape)
            if name.endswith("lstm.b"):
                h = shape[0] // 4
                b[h:2 * h] = 1.0
            arrays[name] = b
            continue
        if len(shape) == 4:
            rf = shape[2] * shape[3]
            if ".dconv" in name:
                fan_in, fan_out = shape[0] * rf, shape[1] * rf
            else:
                fan_in, fan_out = shape[1] * rf, shape[0] * rf
        else:
            fan_in, fan_out = shape
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        arrays[name] = rng.uniform(-lim, lim, size=shape)
    return ModelParameters(arch, arrays)


# ------------------------------------------------------------- primitives

def _dense(w, name: str, x: Tensor) -> Tensor:
    return x @ w[f"{name}.w"] + w[f"{name}.b"]


def _lstm(w, name: str, inp: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    n = h.shape[-1]
    gates = _dense(w, name, ad.concat([inp, h], axis=-1))
    i = ad.sigmoid(gates[:, :n])
    f = ad.sigmoid(gates[:, n:2 * n])
    o = ad.sigmoid(gates[:, 2 * n:3 * n])
    g = ad.tanh(gates[:, 3 * n:])
    c_new = f * c + i * g
    return o * ad.tanh(c_new), c_new


def _as_batch(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ad.ShapeError("image", x.shape, detail="expected (C,H,W) or (B,C,H,W)")
    return x, False


def _check_image(arch: Architecture, x: Tensor):
    if tuple(x.shape[1:]) != tuple(arch.image):
        raise ad.ShapeError("encode", x.shape, (None,) + tuple(arch.image),
                            detail="image shape does not match the architecture")


def attention_filterbank(grid, n: int, width: int, height: int, eps: float = 1e-8):
    """Gaussian read/write filterbanks of an N x N attention window.

    ``grid`` holds (center-x, center-y, log-stride, log-variance,
    log-intensity) on its last axis.  Returns ``(F_x, F_y, intensity)`` with
    ``F_x`` of shape (..., N, width) and ``F_y`` of shape (..., N, height);
    a read is ``intensity * F_y @ image @ F_x.T``.
    """
    if n < 1:
        raise ValueError(f"window size must be >= 1, got {n}")
    grid = grid if isinstance(grid, Tensor) else Tensor(grid)
    if grid.shape[-1] != 5:
        raise ad.ShapeError("attention_filterbank", grid.shape, detail="need 5 grid parameters")
    gx = (width + 1) / 2.0 * (grid[..., 0:1] + 1.0)
    gy = (height + 1) / 2.0 * (grid[..., 1:2] + 1.0)
    scale = (max(width, height) - 1) / (n - 1) if n > 1 else 0.0
    delta = scale * ad.exp(grid[..., 2:3])
    var = ad.exp(grid[..., 3:4])
    offsets = np.arange(1, n + 1) - n / 2.0 - 0.5

    def bank(center, size):
        mu = center + delta * offsets                                     # (..., N)
        pos = np.arange(1, size + 1, dtype=np.float64)
        d2 = ad.square(pos - mu[..., None])                              # (..., N, size)
        f = ad.exp(-d2 / (2.0 * var[..., None]))
        return f / (f.sum(axis=-1, keepdims=True) + eps)

    intensity = ad.exp(grid[..., 4])
    return bank(gx, width), bank(gy, height), intensity


def _read(arch: Architecture, w, x: Tensor, x_err: Tensor, h_dec: Tensor) -> Tensor:
    bsz = x.shape[0]
    if not arch.attention:
        return ad.concat([x.reshape(bsz, -1), x_err.reshape(bsz, -1)], axis=-1)
    _, hgt, wid = arch.image
    fx, fy, gamma = attention_filterbank(_dense(w, "read.att", h_dec), arch.read_n, wid, hgt)
    fy4, fxt4 = fy[:, None], ad.transpose(fx)[:, None]
    g4 = gamma.reshape(bsz, 1, 1, 1)
    glimpse = [(g4 * (fy4 @ img @ fxt4)).reshape(bsz, -1) for img in (x, x_err)]
    return ad.concat(glimpse, axis=-1)


def _write(arch: Architecture, w, h_dec: Tensor) -> Tensor:
    bsz = h_dec.shape[0]
    c, hgt, wid = arch.image
    if not arch.attention:
        return _dense(w, "write", h_dec).reshape(bsz, c, hgt, wid)
    n = arch.write_n
    patch = _dense(w, "write", h_dec).reshape(bsz, c, n, n)
    fx, fy, gamma = attention_filterbank(_dense(w, "write.att", h_dec), n, wid, hgt)
    out = ad.transpose(fy)[:, None] @ patch @ fx[:, None]
    return out / gamma.reshape(bsz, 1, 1, 1)


# --------------------------------------------------------------- DRAW steps

@dataclass(frozen=True, eq=False)
class DrawState:
    canvas: Tensor
    h_enc: Tensor
    c_enc: Tensor
    h_dec: Tensor
    c_dec: Tensor
    t: int = 0

    @classmethod
    def initial(cls, arch: Architecture, batch: int) -> "DrawState":
        zeros = Tensor(np.zeros((batch, arch.lstm)))
        return cls(Tensor(np.zeros((batch,) + tuple(arch.image))), zeros, zeros, zeros, zeros, 0)


def draw_step(params: ModelParameters, state: DrawState, x, noise, weights=None
              ) -> tuple[DrawState, DiagonalGaussian]:
    """One DRAW iteration: read, encode, sample, decode, write."""
    arch = params.arch
    if state.t >= arch.timesteps:
        raise ValueError(f"DRAW already ran all {arch.timesteps} timesteps")
    w = params.constants if weights is None else weights
    x, _ = _as_batch(x)
    x_err = x - ad.sigmoid(state.canvas)
    r = _read(arch, w, x, x_err, state.h_dec)
    h_enc, c_enc = _lstm(w, "enc.lstm", ad.concat([r, state.h_dec], axis=-1), state.h_enc, state.c_enc)
    q = DiagonalGaussian(_dense(w, "enc.mu", h_enc), _dense(w, "enc.logvar", h_enc))
    z = sample_latent(q, noise)
    h_dec, c_dec = _lstm(w, "dec.lstm", z, state.h_dec, state.c_dec)
    canvas = state.canvas + _write(arch, w, h_dec)
    return DrawState(canvas, h_enc, c_enc, h_dec, c_dec, state.t + 1), q


def _draw_noise(arch: Architecture, noise, batch: int) -> np.ndarray:
    if noise is None:
        return np.zeros((batch, arch.code_size))
    arr = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=np.float64)
    arr = np.broadcast_to(arr, (batch, arr.shape[-1]))
    if arr.shape[-1] != arch.code_size:
        raise ValueError(f"noise length {arr.shape[-1]} does not match code size {arch.code_size}")
    return arr


def _draw_forward(params: ModelParameters, x: Tensor, noise, w) -> tuple[DiagonalGaussian, Tensor]:
    arch = params.arch
    eps = _draw_noise(arch, noise, x.shape[0])
    state = DrawState.initial(arch, x.shape[0])
    qs = []
    L = arch.latent
    for t in range(arch.timesteps):
        state, q = draw_step(params, state, x, eps[:, t * L:(t + 1) * L], w)
        qs.append(q)
    return DiagonalGaussian.concatenate(qs), state.canvas


# ---------------------------------------------------------------- public API

def _encode_batch(params: ModelParameters, x: Tensor, noise, w) -> DiagonalGaussian:
    arch = params.arch
    bsz = x.shape[0]
    if arch.family == "vae":
        h = x.reshape(bsz, -1)
        for i in range(len(arch.hidden)):
            h = ad.relu(_dense(w, f"enc.fc{i}", h))
        return DiagonalGaussian(_dense(w, "enc.mu", h), _dense(w, "enc.logvar", h))
    if arch.family == "cvae":
        h = x
        for i in range(len(arch.enc_convs)):
            h = ad.conv2d(h, w[f"enc.conv{i}.w"], arch.stride)
            h = ad.relu(h + w[f"enc.conv{i}.b"].reshape(-1, 1, 1))
        h = ad.relu(_dense(w, "enc.fc", h.reshape(bsz, -1)))
        return DiagonalGaussian(_dense(w, "enc.mu", h), _dense(w, "enc.logvar", h))
    return _draw_forward(params, x, noise, w)[0]


def encode(params: ModelParameters, x, noise=None, weights=None) -> DiagonalGaussian:
    """Posterior parameters q(z|x).

    For DRAW the result is all timesteps' Gaussians concatenated.  The
    encoder's recurrence feeds on its own samples, so ``noise`` (length
    ``code_size``) drives it; ``None`` means zero noise, i.e. posterior
    means are fed forward and the result is noise-free.  Non-recurrent
    encoders ignore ``noise``.
    """
    w = params.constants if weights is None else weights
    xb, single = _as_batch(x)
    _check_image(params.arch, xb)
    q = _encode_batch(params, xb, noise, w)
    return q[0] if single else q


def decode_raw(params: ModelParameters, z, weights=None) -> Tensor:
    """Decoder output before the Bernoulli sigmoid (Gaussian models: the mean)."""
    arch = params.arch
    w = params.constants if weights is None else weights
    z = z if isinstance(z, Tensor) else Tensor(z)
    single = z.ndim == 1
    if single:
        z = z.reshape(1, -1)
    if z.shape[-1] != arch.code_size:
        raise ad.ShapeError("decode", z.shape, (arch.code_size,), detail="latent length mismatch")
    bsz = z.shape[0]
    c, hgt, wid = arch.image
    if arch.family == "vae":
        h = z
        for i in range(len(arch.hidden)):
            h = ad.relu(_dense(w, f"dec.fc{i}", h))
        out = _dense(w, "dec.out", h).reshape(bsz, c, hgt, wid)
    elif arch.family == "cvae":
        _, h0, w0 = _cvae_geometry(arch)
        h = ad.relu(_dense(w, "dec.fc", z)).reshape(bsz, arch.dec_fc, h0, w0)
        for i in range(len(arch.dec_dconvs)):
            h = ad.deconv2d(h, w[f"dec.dconv{i}.w"], arch.stride)
            h = ad.relu(h + w[f"dec.dconv{i}.b"].reshape(-1, 1, 1))
        h = ad.conv2d(h, w["dec.proj.w"], 1) + w["dec.proj.b"].reshape(-1, 1, 1)
        if h.shape[2] != hgt or h.shape[3] != wid:
            h = h[:, :, :hgt, :wid]
        out = h
    else:
        L = arch.latent
        state = DrawState.initial(arch, bsz)
        hd, cd, canvas = state.h_dec, state.c_dec, state.canvas
        for t in range(arch.timesteps):
            hd, cd = _lstm(w, "dec.lstm", z[:, t * L:(t + 1) * L], hd, cd)
            canvas = canvas + _write(arch, w, hd)
        out = canvas
    return out[0] if single else out


def output_transform(arch: Architecture, raw: Tensor) -> Tensor:
    return ad.sigmoid(raw) if arch.likelihood == "bernoulli" else raw


def decode(params: ModelParameters, z, weights=None) -> Tensor:
    """Reconstruction in image space (Bernoulli means, or Gaussian means)."""
    return output_transform(params.arch, decode_raw(params, z, weights))


def forward(params: ModelParameters, x, noise, weights=None) -> tuple[DiagonalGaussian, Tensor]:
    """One stochastic pass: (posterior, raw decoder output) for a batch."""
    arch = params.arch
    w = params.constants if weights is None else weights
    xb, _ = _as_batch(x)
    _check_image(arch, xb)
    if arch.family == "draw":
        return _draw_forward(params, xb, noise, w)
    q = _encode_batch(params, xb, None, w)
    return q, decode_raw(params, sample_latent(q, noise), w)


def reconstruct(params: ModelParameters, x, noise=None) -> np.ndarray:
    """Decoded sample for each image; zero noise decodes the posterior mean."""
    xb, single = _as_batch(x)
    if noise is None:
        noise = np.zeros((xb.shape[0], params.arch.code_size))
    q, raw = forward(params, xb, noise)
    out = output_transform(params.arch, raw).data
    return out[0] if single else out
