"""Dataset ingestion, seeded splits and evaluation-pair sampling."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import tensorfile
from .tensorfile import FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
VALIDATION_FRACTION = 0.2


class DataError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    """Images in [0, 1] with disjoint train/validation/test index lists."""

    name: str
    images: np.ndarray                      # (N, C, H, W)
    splits: dict[str, np.ndarray]
    seed: int

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def split(self, which: str) -> np.ndarray:
        return self.images[self.splits[which]]


@dataclass(frozen=True)
class EvaluationSet:
    pairs: tuple[tuple[int, int], ...]      # (original_index, target_index) into Dataset.images
    seed: int

    def __len__(self):
        return len(self.pairs)


def _open(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) of unsigned bytes."""
    buf = _open(Path(path))
    if len(buf) < 4:
        raise FormatError(f"truncated header: expected 4 bytes, got {len(buf)}", 0)
    magic = struct.unpack(">I", buf[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"bad IDX magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise FormatError(f"truncated header: expected {head} bytes, got {len(buf)}", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) - head != n:
        raise FormatError(f"payload length mismatch: expected {n} bytes, got {len(buf) - head}", head)
    return np.frombuffer(buf, dtype=np.uint8, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool = False) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    buf = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    Path(path).write_bytes(gzip.compress(buf, mtime=0) if compress else buf)


def _find(directory: Path, stem: str) -> Path | None:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = directory / cand
        if p.exists():
            return p
    return None


def split_indices(n_train: int, n_test: int, seed: int,
                  val_fraction: float = VALIDATION_FRACTION) -> dict[str, np.ndarray]:
    """Hold out ``val_fraction`` of the training source for validation."""
    if not 0 < val_fraction < 1:
        raise ValueError("validation fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n_train)
    n_val = int(round(val_fraction * n_train))
    return {
        "train": np.sort(perm[n_val:]),
        "validation": np.sort(perm[:n_val]),
        "test": np.arange(n_train, n_train + n_test),
    }


def _from_sources(name: str, train: np.ndarray, test: np.ndarray, seed: int) -> Dataset:
    images = np.concatenate([train, test]).astype(np.float64)
    return Dataset(name, images, split_indices(len(train), len(test), seed), seed)


def load_mnist(path, seed: int = 0) -> Dataset:
    """MNIST from a directory holding ``train-images-idx3-ubyte`` and ``t10k-images-idx3-ubyte``.

    Either file may be gzipped.  Pixels are scaled to [0, 1] by /255.
    """
    directory = Path(path)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    found = {}
    for key, stem in (("train", "train-images-idx3-ubyte"), ("test", "t10k-images-idx3-ubyte")):
        p = _find(directory, stem)
        if p is None:
            raise DataError(f"missing {stem} in {directory}")
        arr = read_idx(p)
        if arr.ndim != 3:
            raise DataError(f"{p}: expected a rank-3 image file, got rank {arr.ndim}")
        found[key] = arr[:, None].astype(np.float64) / 255.0
    return _from_sources("mnist", found["train"], found["test"], seed)


def bundled_mnist_path() -> Path:
    """Directory of the packaged 1000-image MNIST subset."""
    return Path(str(resources.files("avae") / "data" / "mnist-subset"))


def load_raw_tensor(path, seed: int = 0, name: str | None = None) -> Dataset:
    """Dataset from the binary tensor format.

    The file holds a rank-4 ``images`` tensor (count, C, H, W) in [0, 1].  The
    descriptor may carry ``name=...`` and ``test_count=K`` lines; the last K
    images form the test source (default: one sixth).
    """
    descriptor, tensors = tensorfile.load(path)
    if "images" not in tensors:
        raise DataError(f"{path}: no tensor named 'images'")
    images = tensors["images"]
    if images.ndim != 4:
        raise DataError(f"{path}: images must have rank 4, got rank {images.ndim}")
    if not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0:
        raise DataError(f"{path}: pixel values must lie in [0, 1]")
    meta = dict(line.split("=", 1) for line in descriptor.splitlines() if "=" in line)
    n_test = int(meta.get("test_count", len(images) // 6))
    if not 0 <= n_test < len(images):
        raise DataError(f"{path}: test_count {n_test} out of range")
    n_train = len(images) - n_test
    return _from_sources(name or meta.get("name", Path(path).stem), images[:n_train], images[n_train:], seed)


def save_raw_tensor(path, images: np.ndarray, name: str = "", test_count: int | None = None) -> None:
    lines = [f"name={name}"] if name else []
    if test_count is not None:
        lines.append(f"test_count={test_count}")
    tensorfile.save(path, "\n".join(lines), {"images": images})


def sample_evaluation_pairs(dataset: Dataset, seed: int, count: int = 20) -> EvaluationSet:
    """``count`` (original, target) pairs drawn without replacement from the test split."""
    if count < 1:
        raise DataError("need at least one evaluation pair")
    test = dataset.splits["test"]
    if len(test) < 2 * count:
        raise DataError(f"test split has {len(test)} images; {2 * count} needed for {count} pairs")
    chosen = np.random.default_rng(seed).choice(test, size=2 * count, replace=False)
    pairs = tuple((int(a), int(b)) for a, b in zip(chosen[:count], chosen[count:]))
    return EvaluationSet(pairs, seed)
