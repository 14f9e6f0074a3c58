"""Datasets (IDX files, synthetic generators, one-hot sequences), sequence mutation, checkpoints."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
ALPHABET = 20


class IdxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def load_idx(path: str | os.PathLike) -> np.ndarray:
    """Read an unsigned-byte IDX file; images come back scaled to [0, 1], labels as int64."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxError(f"truncated header: {len(raw)} bytes", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC):
        raise IdxError(
            f"bad magic 0x{magic:08x}; expected 0x{IMAGE_MAGIC:08x} (images) or 0x{LABEL_MAGIC:08x} (labels)", 0
        )
    ndim = 3 if magic == IMAGE_MAGIC else 1
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxError("truncated dimension sizes", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) - header_end < count:
        raise IdxError(f"truncated data: need {count} bytes, found {len(raw) - header_end}", len(raw))
    if len(raw) - header_end > count:
        raise IdxError(f"{len(raw) - header_end - count} trailing bytes after data", header_end + count)
    values = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)
    if magic == IMAGE_MAGIC:
        return values.astype(np.float64) / 255.0
    return values.astype(np.int64)


def write_idx(path: str | os.PathLike, values: np.ndarray) -> None:
    """Write a 3-D image array (floats in [0, 1] or uint8) or a 1-D label array."""
    values = np.asarray(values)
    if values.ndim == 3:
        magic = IMAGE_MAGIC
        if values.dtype != np.uint8:
            values = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    elif values.ndim == 1:
        magic = LABEL_MAGIC
        if values.min(initial=0) < 0 or values.max(initial=0) > 255:
            raise ValueError("labels must fit in one unsigned byte")
        values = values.astype(np.uint8)
    else:
        raise ValueError(f"IDX writer supports 3-D images or 1-D labels, got rank {values.ndim}")
    header = struct.pack(">I", magic) + struct.pack(f">{values.ndim}I", *values.shape)
    Path(path).write_bytes(header + values.tobytes())


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    provenance: str = ""

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.inputs)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.splits:
            raise KeyError(f"no split {name!r}; available: {sorted(self.splits)}")
        idx = self.splits[name]
        return self.inputs[idx], self.labels[idx]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


def random_splits(n: int, sizes: Mapping[str, int], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Disjoint sorted index sets; a size of -1 takes whatever remains."""
    perm = rng.permutation(n)
    fixed = sum(s for s in sizes.values() if s >= 0)
    if fixed > n:
        raise ValueError(f"split sizes {dict(sizes)} exceed {n} examples")
    out, start = {}, 0
    for name, size in sizes.items():
        size = n - fixed if size < 0 else size
        out[name] = np.sort(perm[start : start + size])
        start += size
    return out


def _fraction_splits(n: int, rng: np.random.Generator, fractions=(0.6, 0.2, 0.2)) -> dict[str, np.ndarray]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return random_splits(n, {"train": n_train, "val": n_val, "test": -1}, rng)


def to_signed(labels: np.ndarray) -> np.ndarray:
    """Map binary class indices {0, 1} to {-1, +1}."""
    labels = np.asarray(labels)
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("expected binary class indices in {0, 1}")
    return 2 * labels.astype(np.int64) - 1


def gaussian_blobs(n: int, seed: int, separation: float = 10.0, sigma: float = 1.0) -> Dataset:
    """Two isotropic 2-D Gaussians whose centres are ``separation * sigma`` apart, symmetric about 0."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction)
    labels = rng.integers(0, 2, size=n)
    centres = np.where(labels[:, None] == 1, 1.0, -1.0) * direction * (separation * sigma / 2)
    x = centres + sigma * rng.normal(size=(n, 2))
    return Dataset(x, labels, _fraction_splits(n, rng), f"gaussian-blobs-2d(n={n}, seed={seed}, sep={separation})")


def ring_vs_blob(n: int, seed: int, radius: float = 3.0, sigma: float = 0.5) -> Dataset:
    """Class 0 is a blob at the origin, class 1 a noisy ring; a constant third feature stands in for a bias."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    angle = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(labels == 1, radius + sigma * rng.normal(size=n), np.abs(sigma * rng.normal(size=n)))
    x = np.stack([r * np.cos(angle), r * np.sin(angle), np.ones(n)], axis=1)
    return Dataset(x, labels, _fraction_splits(n, rng), f"ring-vs-blob-2d(n={n}, seed={seed})")


def _contains(seq: np.ndarray, motif: np.ndarray) -> bool:
    k = len(motif)
    windows = np.lib.stride_tricks.sliding_window_view(seq, k)
    return bool(np.any(np.all(windows == motif, axis=1)))


def onehot(symbols: np.ndarray, alphabet: int = ALPHABET) -> np.ndarray:
    """Integer sequences (n, L) to one-hot inputs (n, alphabet, 1, L)."""
    symbols = np.asarray(symbols)
    out = np.zeros((symbols.shape[0], alphabet, 1, symbols.shape[1]))
    n_idx, pos = np.meshgrid(np.arange(symbols.shape[0]), np.arange(symbols.shape[1]), indexing="ij")
    out[n_idx, symbols, 0, pos] = 1.0
    return out


def decode_onehot(x: np.ndarray) -> np.ndarray:
    return np.argmax(x[:, :, 0, :], axis=1)


def onehot_sequences(n: int, seed: int, length: int = 40, motif_length: int = 5, alphabet: int = ALPHABET) -> Dataset:
    """Random sequences; class 1 carries a fixed motif at a random position, class 0 never contains it."""
    if motif_length > length:
        raise ValueError("motif longer than sequence")
    rng = np.random.default_rng(seed)
    motif = rng.integers(0, alphabet, size=motif_length)
    labels = rng.integers(0, 2, size=n)
    seqs = rng.integers(0, alphabet, size=(n, length))
    for i in range(n):
        if labels[i] == 1:
            start = rng.integers(0, length - motif_length + 1)
            seqs[i, start : start + motif_length] = motif
        else:
            while _contains(seqs[i], motif):
                seqs[i] = rng.integers(0, alphabet, size=length)
    provenance = f"onehot-sequences(n={n}, seed={seed}, length={length}, motif={motif.tolist()})"
    return Dataset(onehot(seqs, alphabet), labels, _fraction_splits(n, rng), provenance)


SYNTHETIC = {
    "gaussian-blobs-2d": gaussian_blobs,
    "ring-vs-blob-2d": ring_vs_blob,
    "onehot-sequences": onehot_sequences,
}


def make_synthetic(kind: str, n: int, seed: int, **options) -> Dataset:
    if kind not in SYNTHETIC:
        raise ValueError(f"unknown synthetic dataset {kind!r}; choose from {sorted(SYNTHETIC)}")
    return SYNTHETIC[kind](n, seed, **options)


def mutate_sequence(x: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Resample each position to a *different* symbol with probability ``p``.

    ``x`` is one-hot with layout (alphabet, 1, L) or a batch (n, alphabet, 1, L).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    single = x.ndim == 3
    batch = x[None] if single else x
    symbols = decode_onehot(batch)
    alphabet = batch.shape[1]
    flip = rng.random(symbols.shape) < p
    # a shift in 1..alphabet-1 always lands on a different symbol, uniformly
    shift = rng.integers(1, alphabet, size=symbols.shape)
    mutated = np.where(flip, (symbols + shift) % alphabet, symbols)
    out = onehot(mutated, alphabet)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# MNIST


def _mnist_source() -> tuple[np.ndarray, np.ndarray, str]:
    """Raw MNIST images (uint8, n x 28 x 28) and labels.

    A directory named by ``KERNREG_MNIST_DIR`` with the standard
    ``train-images-idx3-ubyte``/``train-labels-idx1-ubyte`` files takes
    precedence; otherwise the 5000-digit sample bundled with mlxtend is used.
    """
    root = os.environ.get("KERNREG_MNIST_DIR")
    if root:
        images = load_idx(Path(root) / "train-images-idx3-ubyte")
        labels = load_idx(Path(root) / "train-labels-idx1-ubyte")
        return np.round(images * 255).astype(np.uint8), labels, f"idx:{root}"
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError(
            "MNIST needs either KERNREG_MNIST_DIR pointing at IDX files or the optional "
            "'mlxtend' package (pip install 'artifact[mnist]')"
        ) from exc
    X, y = mnist_data()
    return X.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.int64), "mlxtend:mnist_5k"


def cache_dir() -> Path:
    return Path(os.environ.get("KERNREG_CACHE", Path.home() / ".cache" / "kernreg"))


def load_mnist(train_size: int = 1000, val_size: int = 1000, test_size: int = -1, seed: int = 0) -> Dataset:
    """Seeded MNIST subset with disjoint train/val/test splits, read back through the IDX reader."""
    root = cache_dir() / "mnist"
    img_path, lab_path = root / "images-idx3-ubyte", root / "labels-idx1-ubyte"
    if not (img_path.exists() and lab_path.exists()):
        images, labels, source = _mnist_source()
        root.mkdir(parents=True, exist_ok=True)
        write_idx(img_path, images)
        write_idx(lab_path, labels)
        (root / "SOURCE").write_text(source + "\n")
    images = load_idx(img_path)[:, None]
    labels = load_idx(lab_path)
    source = (root / "SOURCE").read_text().strip() if (root / "SOURCE").exists() else "unknown"
    splits = random_splits(len(labels), {"train": train_size, "val": val_size, "test": test_size}, np.random.default_rng(seed))
    return Dataset(images, labels, splits, f"mnist[{source}](train={train_size}, val={val_size}, seed={seed})")


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"KRNR"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    network: dict
    params: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    header = json.dumps(
        {"network": ckpt.network, "step": ckpt.step, "rng_state": ckpt.rng_state, "meta": ckpt.meta},
        sort_keys=True,
    ).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(header)), header]
    parts.append(struct.pack("<I", len(ckpt.params)))
    for name, value in ckpt.params.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        parts += [struct.pack("<I", len(encoded)), encoded, struct.pack("<I", value.ndim)]
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(value.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"corrupt checkpoint: truncated while reading {what} at offset {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; this build reads {CHECKPOINT_VERSION}")
    try:
        header = json.loads(r.take(r.u32("header length"), "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    params: dict[str, np.ndarray] = {}
    for _ in range(r.u32("parameter count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        ndim = r.u32("ndim")
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, "dims"))
        count = int(np.prod(shape))
        params[name] = np.frombuffer(r.take(8 * count, f"values of {name}"), dtype="<f8").reshape(shape).copy()
    if r.pos != len(r.raw):
        raise CheckpointError(f"corrupt checkpoint: {len(r.raw) - r.pos} trailing bytes")
    return Checkpoint(header["network"], params, header["step"], header.get("rng_state"), header.get("meta", {}), version)
