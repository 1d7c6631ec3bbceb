"""Corpus loading, the owner partition, and trigger-set generation.

The experiment corpus is the concatenated MNIST train+test set (70,000 images,
IDX format), shuffled once, with 25% reserved for evaluation / attack data and
the rest split i.i.d. into equal owner shards.  When no MNIST files are
available (offline CI), a deterministic synthetic digit corpus takes its
place: DejaVu glyphs rendered at random fonts/sizes with affine jitter, blur
and noise, which preserves the experiment's shape (10 balanced classes,
28x28x1 in [0,1], small-shard models clearly weaker than the full corpus).

Trigger images are i.i.d. uniform pixels in [0,1]; per-owner sets use child
seeds of the shared trigger seed.
"""

from __future__ import annotations

import glob
import gzip
import importlib.util
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxParseError(ValueError):
    """Malformed IDX data; carries the byte offset of the failure."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path} at byte {offset}: {message}")
        self.offset = offset


class MissingFileError(FileNotFoundError):
    pass


# ---------------------------------------------------------------- IDX files

def _open_maybe_gz(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx_images(path) -> np.ndarray:
    """Parse an IDX3 image file into (n, rows, cols) uint8."""
    if not os.path.exists(path):
        raise MissingFileError(path)
    with _open_maybe_gz(path) as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise IdxParseError(path, len(header), "truncated header")
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGE_MAGIC:
            raise IdxParseError(path, 0, f"bad image magic 0x{magic:08x}")
        data = fh.read(n * rows * cols)
        if len(data) != n * rows * cols:
            raise IdxParseError(path, 16 + len(data), "truncated pixel data")
        return np.frombuffer(data, dtype=np.uint8).reshape(n, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    """Parse an IDX1 label file into (n,) uint8."""
    if not os.path.exists(path):
        raise MissingFileError(path)
    with _open_maybe_gz(path) as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise IdxParseError(path, len(header), "truncated header")
        magic, n = struct.unpack(">II", header)
        if magic != LABEL_MAGIC:
            raise IdxParseError(path, 0, f"bad label magic 0x{magic:08x}")
        data = fh.read(n)
        if len(data) != n:
            raise IdxParseError(path, 8 + len(data), "truncated label data")
        return np.frombuffer(data, dtype=np.uint8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


_MNIST_STEMS = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
]


def find_mnist_dir() -> str | None:
    """Directory with the four IDX files, from $FLTRACE_MNIST_DIR if set."""
    cand = os.environ.get("FLTRACE_MNIST_DIR")
    if cand and _has_mnist(cand):
        return cand
    return None


def _has_mnist(d) -> bool:
    for img, lab in _MNIST_STEMS:
        if not (_first_existing(d, img) and _first_existing(d, lab)):
            return False
    return True


def _first_existing(d, stem):
    for suffix in ("", ".gz"):
        p = os.path.join(d, stem + suffix)
        if os.path.exists(p):
            return p
    return None


def load_mnist_corpus(mnist_dir) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated train+test corpus as float32 images in [0,1] and labels."""
    if not _has_mnist(mnist_dir):
        raise MissingFileError(f"no MNIST IDX files under {mnist_dir}")
    images, labels = [], []
    for img_stem, lab_stem in _MNIST_STEMS:
        imgs = load_idx_images(_first_existing(mnist_dir, img_stem))
        labs = load_idx_labels(_first_existing(mnist_dir, lab_stem))
        if imgs.shape[0] != labs.shape[0]:
            raise IdxParseError(mnist_dir, 0,
                                f"{img_stem}: {imgs.shape[0]} images vs "
                                f"{labs.shape[0]} labels")
        images.append(imgs)
        labels.append(labs)
    x = np.concatenate(images).astype(np.float32)[..., None] / 255.0
    y = np.concatenate(labels).astype(np.int64)
    return x, y


# ------------------------------------------------------- synthetic fallback

def _find_fonts() -> list[str]:
    paths: list[str] = []
    spec = importlib.util.find_spec("matplotlib")
    if spec and spec.submodule_search_locations:
        ttf = os.path.join(list(spec.submodule_search_locations)[0],
                           "mpl-data", "fonts", "ttf")
        for name in ("DejaVuSans.ttf", "DejaVuSans-Bold.ttf",
                     "DejaVuSans-Oblique.ttf", "DejaVuSerif.ttf",
                     "DejaVuSerif-Bold.ttf", "DejaVuSansMono.ttf"):
            p = os.path.join(ttf, name)
            if os.path.exists(p):
                paths.append(p)
    if not paths:
        paths = sorted(glob.glob("/usr/share/fonts/**/*.ttf", recursive=True))[:6]
    return paths


# Bump when the rendering/augmentation recipe changes: it keys the disk cache.
SYNTH_GENERATION = 3

_GLYPH_CACHE: dict[tuple, np.ndarray] = {}


def _glyph(digit: int, font_path: str, size: int) -> np.ndarray:
    """Rendered digit on a 40x40 float canvas in [0,1] (cached)."""
    key = (digit, font_path, size)
    hit = _GLYPH_CACHE.get(key)
    if hit is not None:
        return hit
    from PIL import Image, ImageDraw, ImageFont

    img = Image.new("L", (40, 40), 0)
    draw = ImageDraw.Draw(img)
    font = ImageFont.truetype(font_path, size) if font_path else ImageFont.load_default()
    draw.text((20, 20), str(digit), fill=255, font=font, anchor="mm")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    _GLYPH_CACHE[key] = arr
    return arr


def synthetic_digits(n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic offline digit corpus: (n,28,28,1) float32 in [0,1], labels.

    Image k depends only on (seed, k), so a shorter corpus is a prefix of a
    longer one under the same seed.
    """
    fonts = _find_fonts()
    master = np.random.default_rng(seed)
    labels = master.integers(0, 10, size=n)
    images = np.empty((n, 28, 28, 1), dtype=np.float32)
    center_out = np.array([13.5, 13.5])
    center_src = np.array([19.5, 19.5])
    for k in range(n):
        rng = np.random.default_rng([int(seed) if np.isscalar(seed) else 0, k])
        font = fonts[rng.integers(len(fonts))] if fonts else ""
        glyph = _glyph(int(labels[k]), font, int(rng.integers(18, 27)))
        theta = rng.uniform(-0.20, 0.20)
        scale = rng.uniform(0.95, 1.12)
        shear = rng.uniform(-0.10, 0.10)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        mat = rot @ np.array([[1.0, shear], [0.0, 1.0]]) / scale
        shift = rng.uniform(-1.5, 1.5, size=2)
        offset = center_src - mat @ center_out + shift
        out = ndimage.affine_transform(glyph, mat, offset=offset,
                                       output_shape=(28, 28), order=1)
        sigma = rng.uniform(0.0, 0.4)
        if sigma > 0.05:
            out = ndimage.gaussian_filter(out, sigma)
        out = out * rng.uniform(0.85, 1.0)
        out += rng.normal(0.0, rng.uniform(0.02, 0.05), size=out.shape)
        images[k, :, :, 0] = np.clip(out, 0.0, 1.0)
    return images, labels.astype(np.int64)


def synthetic_digits_cached(n: int, seed, cache_dir=None):
    """Disk-cached wrapper; regeneration is bit-identical anyway."""
    cache_dir = cache_dir or os.environ.get(
        "FLTRACE_CACHE_DIR", os.path.join(os.path.expanduser("~"), ".cache", "fltrace"))
    path = Path(cache_dir) / f"synth_g{SYNTH_GENERATION}_{n}_{seed}.npz"
    if path.exists():
        with np.load(path) as z:
            return z["x"], z["y"]
    x, y = synthetic_digits(n, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez_compressed(tmp, x=x, y=y)
    os.replace(tmp, path)
    return x, y


# ------------------------------------------------------------- partitioning

@dataclass
class PartitionedData:
    """Evaluation split plus disjoint equal owner shards."""

    eval_images: np.ndarray
    eval_labels: np.ndarray
    shard_images: list[np.ndarray]
    shard_labels: list[np.ndarray]
    seed: object = None
    eval_indices: np.ndarray = field(default=None, repr=False)
    shard_indices: list = field(default=None, repr=False)

    @property
    def n_owners(self) -> int:
        return len(self.shard_images)

    @property
    def train_size(self) -> int:
        return sum(len(s) for s in self.shard_labels)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "eval_size": int(len(self.eval_labels)),
            "n_owners": self.n_owners,
            "shard_sizes": [int(len(s)) for s in self.shard_labels],
            "eval_indices": self.eval_indices.tolist()
            if self.eval_indices is not None else None,
            "shard_indices": [s.tolist() for s in self.shard_indices]
            if self.shard_indices is not None else None,
        }


def partition(images: np.ndarray, labels: np.ndarray, n_owners: int,
              eval_fraction: float, seed, corpus_fraction: float = 1.0
              ) -> PartitionedData:
    """Shuffle, optionally subsample, split eval/train, shard i.i.d."""
    if not (0.0 < eval_fraction < 1.0):
        raise ValueError(f"eval_fraction={eval_fraction} outside (0, 1)")
    if not (0.0 < corpus_fraction <= 1.0):
        raise ValueError(f"corpus_fraction={corpus_fraction} outside (0, 1]")
    if n_owners < 1:
        raise ValueError("need at least one owner")
    n = len(labels)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    keep = order[: int(round(n * corpus_fraction))]
    n_eval = int(round(len(keep) * eval_fraction))
    eval_idx = keep[:n_eval]
    train_idx = keep[n_eval:]
    if len(train_idx) < n_owners:
        raise ValueError(f"{len(train_idx)} training images cannot cover "
                         f"{n_owners} owners")
    shards = np.array_split(train_idx, n_owners)
    return PartitionedData(
        eval_images=images[eval_idx], eval_labels=labels[eval_idx],
        shard_images=[images[s] for s in shards],
        shard_labels=[labels[s] for s in shards],
        seed=seed, eval_indices=eval_idx, shard_indices=list(shards))


def load_and_partition(mnist_dir, n_owners: int, eval_fraction: float, seed,
                       corpus_fraction: float = 1.0) -> PartitionedData:
    """Load the IDX corpus and partition it (convenience wrapper)."""
    images, labels = load_mnist_corpus(mnist_dir)
    return partition(images, labels, n_owners, eval_fraction, seed,
                     corpus_fraction)


def resolve_corpus(mnist_dir, corpus_fraction: float, seed,
                   synthetic_size: int | None = None, full_size: int = 70000):
    """Real MNIST when available, otherwise the synthetic fallback.

    Returns (images, labels, source) where source is "mnist" or "synthetic".
    The synthetic path generates `synthetic_size` images directly (or
    round(full_size * corpus_fraction) when unset): i.i.d. samples, so
    equivalent to subsampling, and the caller should then partition with
    corpus_fraction=1.
    """
    d = mnist_dir or find_mnist_dir()
    if d and _has_mnist(d):
        x, y = load_mnist_corpus(d)
        return x, y, "mnist"
    n = synthetic_size or int(round(full_size * corpus_fraction))
    x, y = synthetic_digits_cached(n, seed)
    return x, y, "synthetic"


# ----------------------------------------------------------------- triggers

@dataclass(frozen=True)
class TriggerSet:
    """Synthetic query images whose learned labels carry the fingerprint."""

    images: np.ndarray  # (m, 28, 28, 1) float32 in [0,1]
    shared: bool = True
    owner_id: int | None = None
    seed: object = None

    @property
    def m(self) -> int:
        return self.images.shape[0]


def generate_triggers(m: int, seed, hw: int = 28, channels: int = 1) -> TriggerSet:
    """Shared trigger set: i.i.d. uniform pixels in [0,1]."""
    if m < 1:
        raise ValueError("need m >= 1 triggers")
    rng = np.random.default_rng(seed)
    imgs = rng.random((m, hw, hw, channels), dtype=np.float32)
    return TriggerSet(imgs, shared=True, owner_id=None, seed=seed)


def generate_owner_triggers(m: int, n_owners: int, seed, hw: int = 28,
                            channels: int = 1) -> list[TriggerSet]:
    """Distinct per-owner trigger sets T_j from child seeds of `seed`."""
    out = []
    for j, child in enumerate(np.random.SeedSequence(seed).spawn(n_owners)):
        rng = np.random.default_rng(child)
        imgs = rng.random((m, hw, hw, channels), dtype=np.float32)
        out.append(TriggerSet(imgs, shared=False, owner_id=j, seed=seed))
    return out
