"""Datasets: the ``.t64`` tensor format, CSV import and a synthetic ECG-like generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ARCHITECTURES

CLASS_NAMES = ("N", "L", "R", "A", "V")
MAGIC = b"T64\x00"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1}
_HEAD = struct.Struct("<4sBB")  # magic, dtype code, rank


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # [S, C, T] float64
    y: np.ndarray  # [S] int64 labels in [0, m)
    classes: int = 5
    name: str = ""

    def __post_init__(self):
        if self.x.ndim != 3:
            raise DataFormatError(f"x must be [S, C, T], got shape {self.x.shape}")
        if self.y.ndim != 1 or len(self.y) != len(self.x):
            raise DataFormatError(f"{len(self.x)} samples but {self.y.shape} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise DataFormatError(f"labels outside [0, {self.classes})")
        if not np.all(np.isfinite(self.x)):
            raise DataFormatError("non-finite sample values")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.classes, self.name)

    def check_layout(self, layout: str) -> None:
        arch = ARCHITECTURES[layout]
        if self.x.shape[1:] != (arch.in_channels, arch.length):
            raise DataFormatError(
                f"{layout} expects [S, {arch.in_channels}, {arch.length}], got {list(self.x.shape)}")


# ---- .t64 tensors -----------------------------------------------------------

def write_tensor(f, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = np.dtype("<f8") if arr.dtype.kind == "f" else np.dtype("<i8")
    f.write(_HEAD.pack(MAGIC, _CODES[dt], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(f) -> np.ndarray:
    head = f.read(_HEAD.size)
    if len(head) != _HEAD.size:
        raise DataFormatError("truncated tensor header")
    magic, code, rank = _HEAD.unpack(head)
    if magic != MAGIC or code not in _DTYPES or not 1 <= rank <= 3:
        raise DataFormatError("not a .t64 tensor")
    raw = f.read(8 * rank)
    if len(raw) != 8 * rank:
        raise DataFormatError("truncated tensor dims")
    dims = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(dims))
    body = f.read(8 * count)
    if len(body) != 8 * count:
        raise DataFormatError(f"payload holds {len(body)} bytes, header declares {8 * count}")
    return np.frombuffer(body, dtype=_DTYPES[code]).reshape(dims).astype(_DTYPES[code].newbyteorder("="))


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as f:
        write_tensor(f, ds.x.astype(np.float64))
        write_tensor(f, ds.y.astype(np.int64))


def load_dataset(path, layout: str | None = None, classes: int = 5) -> Dataset:
    """Load an x record followed by a y record; ``layout`` (M1/M2/M3) checks [C, T]."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        ds = load_csv(path, layout, classes)
    else:
        with open(path, "rb") as f:
            x = read_tensor(f)
            y = read_tensor(f)
            if f.read(1):
                raise DataFormatError("trailing bytes after label record")
        if x.ndim == 2:
            x = x[:, None, :]
        if y.dtype.kind == "f":
            if not np.all(y == np.round(y)):
                raise DataFormatError("labels must be integers")
            y = y.astype(np.int64)
        ds = Dataset(x.astype(np.float64), y.ravel(), classes, path.stem)
    if layout:
        ds.check_layout(layout)
    return ds


def load_csv(path, layout: str | None = None, classes: int = 5) -> Dataset:
    """One sample per row, label in the last column; channels are concatenated."""
    try:
        table = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise DataFormatError(str(exc)) from None
    labels = table[:, -1]
    if not np.all(labels == np.round(labels)):
        raise DataFormatError("labels must be integers")
    feats = table[:, :-1]
    c = ARCHITECTURES[layout].in_channels if layout else 1
    if feats.shape[1] % c:
        raise DataFormatError(f"{feats.shape[1]} features do not split into {c} channels")
    return Dataset(feats.reshape(len(feats), c, -1), labels.astype(np.int64), classes, Path(path).stem)


# ---- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    per_class: int = 100
    channels: int = 1
    length: int = 128
    classes: int = 5
    seed: int = 0
    amplitude: float = 1.0
    width: float = 0.04
    jitter: float = 0.03
    noise: float = 0.05


def generate_synth(spec: SynthSpec) -> Dataset:
    """Pulse trains whose position, width, polarity and a second bump depend on the class.

    Samples are emitted class-interleaved so the label histogram is exactly
    balanced; shuffle before training.
    """
    rng = np.random.default_rng(spec.seed)
    t = np.linspace(0.0, 1.0, spec.length)
    s = spec.per_class * spec.classes
    y = np.tile(np.arange(spec.classes), spec.per_class)
    k = y / max(spec.classes - 1, 1)
    centre = 0.25 + 0.5 * k + rng.normal(0, spec.jitter, s)
    width = spec.width * (1.0 + 1.5 * (y % 2)) * rng.uniform(0.8, 1.2, s)
    polarity = np.where(y == spec.classes - 1, -1.0, 1.0)
    amp = spec.amplitude * rng.uniform(0.8, 1.2, s) * polarity
    pulse = amp[:, None] * np.exp(-0.5 * ((t[None, :] - centre[:, None]) / width[:, None]) ** 2)
    second = 0.4 * (y >= 2)[:, None] * np.exp(-0.5 * ((t[None, :] - centre[:, None] - 0.15) / 0.03) ** 2)
    base = pulse + second
    gains = 1.0 + 0.2 * np.arange(spec.channels) / max(spec.channels, 1)
    x = base[:, None, :] * gains[None, :, None] + rng.normal(0, spec.noise, (s, spec.channels, spec.length))
    return Dataset(x, y.astype(np.int64), spec.classes, f"synth-seed{spec.seed}")


def synth_for(layout: str, samples: int, seed: int = 0) -> Dataset:
    arch = ARCHITECTURES[layout]
    per = -(-samples // arch.classes)
    ds = generate_synth(SynthSpec(per_class=per, channels=arch.in_channels, length=arch.length,
                                  classes=arch.classes, seed=seed))
    return ds.subset(np.arange(samples))


def one_hot(y, m: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    out = np.zeros((y.size, m))
    out[np.arange(y.size), y] = 1.0
    return out


def train_test_split(ds: Dataset, ratio: float = 0.9, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded permutation; the first ``round(ratio * S)`` samples go to training."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(ratio * len(ds)))
    return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))
