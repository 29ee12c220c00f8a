"""Datasets: MNIST IDX files, synthetic 2-D generators and deterministic splits."""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import struct
import tarfile
import urllib.request
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

# the npm "mnist-data" package ships the four original IDX files uncompressed
MNIST_ARCHIVE_URL = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz"
MNIST_ARCHIVE_SHA256 = "8f87f2d0d9133e6c9f7012d6d26bb05409e7e870a1de21d1a600b8d400cc07ed"
MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


class DataError(ValueError):
    """Dataset files or parameters are invalid."""


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64
    class_count: int
    split_tag: str = "train"

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise DataError(f"inputs must be a matrix, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DataError(f"{x.shape[0]} inputs but {y.shape} labels")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(x)):
            raise DataError("inputs contain non-finite values")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def take(self, idx, split_tag: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            inputs=self.inputs[idx],
            labels=self.labels[idx],
            split_tag=split_tag or self.split_tag,
        )

    def head(self, n: int) -> "LabeledDataset":
        return self.take(np.arange(min(n, len(self))))


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise DataError(f"{what}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{what}: bad magic 0x{magic:08X}, expected 0x{expected_magic:08X}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{what}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataError(f"{what}: payload has {len(raw) - header} bytes, header declares {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path, class_count: int = 10, split_tag: str = "train") -> LabeledDataset:
    """Read an IDX image/label pair; pixels are flattened row-major and scaled by 1/255."""
    images = _read_idx(_read_bytes(images_path), IMAGES_MAGIC, str(images_path))
    labels = _read_idx(_read_bytes(labels_path), LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(x, labels.astype(np.int64), class_count, split_tag)


def write_idx(ds: LabeledDataset, images_path, labels_path, image_shape: tuple[int, int] | None = None) -> None:
    """Write a dataset whose inputs are multiples of 1/255 in [0, 1] as an IDX pair."""
    q = np.rint(ds.inputs * 255.0)
    if np.any(q < 0) or np.any(q > 255) or not np.allclose(q / 255.0, ds.inputs, rtol=0, atol=1e-12):
        raise DataError("inputs must be multiples of 1/255 within [0, 1] to be stored as IDX bytes")
    if ds.class_count > 256:
        raise DataError("IDX labels are single bytes")
    rows, cols = image_shape or (1, ds.dim)
    if rows * cols != ds.dim:
        raise DataError(f"image shape {rows}x{cols} does not match {ds.dim} features")
    n = len(ds)
    Path(images_path).write_bytes(
        struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + q.astype(np.uint8).tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


def _find(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise DataError(f"{name} not found in {directory}")


def load_mnist(directory, split: str = "train") -> LabeledDataset:
    try:
        images, labels = MNIST_FILES[split]
    except KeyError:
        raise DataError(f"unknown MNIST split {split!r}") from None
    d = Path(directory)
    return load_idx(_find(d, images), _find(d, labels), 10, split)


def has_mnist(directory) -> bool:
    d = Path(directory)
    try:
        for pair in MNIST_FILES.values():
            for name in pair:
                _find(d, name)
    except DataError:
        return False
    return True


def fetch_mnist(directory, url: str = MNIST_ARCHIVE_URL, timeout: float = 120.0) -> Path:
    """Download the MNIST IDX files into ``directory`` and verify their checksums."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        archive = resp.read()
    digest = hashlib.sha256(archive).hexdigest()
    if digest != MNIST_ARCHIVE_SHA256:
        raise DataError(f"archive checksum mismatch: {digest}")
    with tarfile.open(fileobj=io.BytesIO(archive), mode="r:gz") as tar:
        for member in tar.getmembers():
            name = Path(member.name).name
            if name not in MNIST_SHA256:
                continue
            payload = tar.extractfile(member).read()
            if hashlib.sha256(payload).hexdigest() != MNIST_SHA256[name]:
                raise DataError(f"checksum mismatch for {name}")
            (d / name).write_bytes(payload)
    if not has_mnist(d):
        raise DataError("archive did not contain all four MNIST files")
    return d


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _balanced_labels(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64) % 2


def make_blobs(n: int, noise: float = 0.5, seed: int = 0, separation: float = 4.0) -> LabeledDataset:
    """Two Gaussian clusters centred at (+-separation/2, 0)."""
    if n < 2:
        raise DataError("need at least two samples")
    rng = np.random.default_rng(seed)
    y = _balanced_labels(n)
    centers = np.where(y[:, None] == 0, [-separation / 2, 0.0], [separation / 2, 0.0])
    x = centers + noise * rng.standard_normal((n, 2))
    perm = rng.permutation(n)
    return LabeledDataset(x[perm], y[perm], 2)


def make_two_moons(n: int, noise: float = 0.1, seed: int = 0) -> LabeledDataset:
    """Two interleaving half circles."""
    if n < 2:
        raise DataError("need at least two samples")
    rng = np.random.default_rng(seed)
    y = _balanced_labels(n)
    t = rng.uniform(0.0, np.pi, size=n)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    x = np.where(y[:, None] == 0, upper, lower) + noise * rng.standard_normal((n, 2))
    perm = rng.permutation(n)
    return LabeledDataset(x[perm], y[perm], 2)


# ---------------------------------------------------------------------------
# splits and manifests
# ---------------------------------------------------------------------------


def split(
    ds: LabeledDataset, fractions: Sequence[float], seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Shuffle once and cut into (train, heldout, test) pieces."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"fractions must be three nonnegative numbers summing to 1, got {list(fractions)}")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_held = min(int(round(fr[1] * n)), n - n_train)
    cuts = (perm[:n_train], perm[n_train : n_train + n_held], perm[n_train + n_held :])
    return tuple(ds.take(np.sort(c), tag) for c, tag in zip(cuts, ("train", "heldout", "test")))


def subsample(ds: LabeledDataset, n: int, seed: int = 0) -> LabeledDataset:
    if n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).permutation(len(ds))[:n])
    return ds.take(idx)


def load_from_manifest(path_or_dict) -> LabeledDataset:
    """Materialise a dataset from a manifest dict / JSON file.

    ``{"source": "mnist", "dir": ..., "split": "train", "subset": 10000, "seed": 0}``
    or ``{"source": "blobs" | "moons", "n": 400, "noise": 0.5, "seed": 0}``.
    """
    if isinstance(path_or_dict, dict):
        spec = path_or_dict
        base = Path(".")
    else:
        base = Path(path_or_dict).parent
        spec = json.loads(Path(path_or_dict).read_text())
    source = spec.get("source")
    seed = int(spec.get("seed", 0))
    if source == "mnist":
        d = Path(spec["dir"])
        ds = load_mnist(d if d.is_absolute() else base / d, spec.get("split", "train"))
        if "subset" in spec:
            ds = subsample(ds, int(spec["subset"]), seed)
        return ds
    if source == "blobs":
        return make_blobs(int(spec["n"]), float(spec.get("noise", 0.5)), seed)
    if source == "moons":
        return make_two_moons(int(spec["n"]), float(spec.get("noise", 0.1)), seed)
    raise DataError(f"unknown dataset source {source!r}")


def load_dataset(location, split_name: str = "train") -> LabeledDataset:
    """A directory holding MNIST IDX files, or a dataset manifest JSON file."""
    p = Path(location)
    if p.is_dir():
        return load_mnist(p, split_name)
    if p.is_file() and p.suffix == ".json":
        return load_from_manifest(p)
    raise DataError(f"{location} is neither an MNIST directory nor a dataset manifest")
