"""Image <-> token codecs and task-informed codebook training.

Two codecs share one contract (encode emits exactly q ids in [0, N), decode
reassembles patches row-major): a lossless identity codec for pinning the
harness, and a k-means patch quantizer trained on balanced samples of images
and rendered task outputs, optionally with color remapping augmentation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

from .core import DatasetRecord, ImageRaster, resize_image
from .errors import CodecError, ConfigError, TrainingError
from .rng import RngState
from .task_ops import DiscriminativeKind, default_palette, kind_label, render_discriminative, sample_palette

TFCB_MAGIC = b"TFCB"
TFCB_VERSION = 1


class Codebook(Protocol):
    """Contract every codec satisfies."""

    N: int
    q: int
    grid: tuple[int, int]
    patch_side: int
    side: int

    def encode(self, image: ImageRaster) -> np.ndarray: ...

    def decode(self, tokens) -> ImageRaster: ...


def _patchify(pixels: np.ndarray, grid: tuple[int, int], patch: int) -> np.ndarray:
    rows, cols = grid
    return (
        pixels.reshape(rows, patch, cols, patch, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, patch * patch * 3)
    )


def _unpatchify(flat: np.ndarray, grid: tuple[int, int], patch: int) -> np.ndarray:
    rows, cols = grid
    return (
        flat.reshape(rows, cols, patch, patch, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * patch, cols * patch, 3)
    )


def _check_side(image: ImageRaster, side: int):
    if image.height != side or image.width != side:
        raise CodecError(f"codec expects {side}x{side} images, got {image.height}x{image.width}")


def _check_tokens(tokens, q: int, n: int) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).ravel()
    if ids.size != q:
        raise CodecError(f"expected exactly {q} token ids, got {ids.size}")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= n:
        raise CodecError(f"token id out of range [0, {n})")
    return ids


class IdentityCodebook:
    """Lossless reference codec: token ids index verbatim stored patches.

    decode(encode(x)) is bit-exact, which pins every downstream metric at its
    perfect value. Ids are only meaningful against the instance that encoded
    them; call :meth:`reset` between unrelated runs to reclaim memory.
    """

    def __init__(self, side: int, grid: tuple[int, int] = (10, 10), capacity_images: int = 4096):
        rows, cols = grid
        if side % rows != 0 or side % cols != 0 or side // rows != side // cols:
            raise ConfigError(f"grid {grid} does not divide side {side} into square patches")
        self.side = side
        self.grid = (rows, cols)
        self.q = rows * cols
        self.patch_side = side // rows
        self.N = capacity_images * self.q
        self._store: list[np.ndarray] = []

    def reset(self):
        self._store.clear()

    def encode(self, image: ImageRaster) -> np.ndarray:
        _check_side(image, self.side)
        base = len(self._store)
        if base + self.q > self.N:
            raise CodecError(f"identity codec capacity {self.N} exhausted; call reset()")
        patches = _patchify(image.pixels, self.grid, self.patch_side)
        self._store.extend(patches)
        return np.arange(base, base + self.q, dtype=np.int64)

    def decode(self, tokens) -> ImageRaster:
        ids = _check_tokens(tokens, self.q, self.N)
        if ids.max(initial=0) >= len(self._store):
            raise CodecError("token id references a patch that was never stored")
        flat = np.stack([self._store[int(i)] for i in ids])
        return ImageRaster(_unpatchify(flat, self.grid, self.patch_side))


def make_identity_codebook(side: int, grid: tuple[int, int],
                           capacity_images: int = 4096) -> IdentityCodebook:
    return IdentityCodebook(side=side, grid=grid, capacity_images=capacity_images)


class KMeansCodebook:
    """Patch quantizer: each patch maps to its nearest centroid id.

    Encoding measures distance to the uint8 rendering of each centroid (what
    decode emits), which makes decode(encode(.)) an exact projection: a second
    round trip reproduces the first bit-for-bit.
    """

    def __init__(self, centroids: np.ndarray, grid: tuple[int, int], patch_side: int):
        rows, cols = grid
        dim = patch_side * patch_side * 3
        if centroids.ndim != 2 or centroids.shape[1] != dim:
            raise ConfigError(f"centroids must be (N, {dim}), got {centroids.shape}")
        self.centroids = centroids.astype(np.float32)
        self.grid = (rows, cols)
        self.patch_side = patch_side
        self.q = rows * cols
        self.N = centroids.shape[0]
        self.side = rows * patch_side
        if cols * patch_side != self.side:
            raise ConfigError("grid must form a square raster")
        self._rendered = np.rint(self.centroids).clip(0, 255).astype(np.float32)

    def encode(self, image: ImageRaster) -> np.ndarray:
        _check_side(image, self.side)
        patches = _patchify(image.pixels, self.grid, self.patch_side).astype(np.float32)
        # argmin over squared distances; ties resolve to the lowest id
        d2 = (
            (patches * patches).sum(axis=1, keepdims=True)
            - 2.0 * patches @ self._rendered.T
            + (self._rendered * self._rendered).sum(axis=1)[None, :]
        )
        return np.argmin(d2, axis=1).astype(np.int64)

    def decode(self, tokens) -> ImageRaster:
        ids = _check_tokens(tokens, self.q, self.N)
        flat = self._rendered[ids].astype(np.uint8)
        return ImageRaster(_unpatchify(flat, self.grid, self.patch_side))


def save_codebook(codebook: KMeansCodebook, path: str | Path) -> Path:
    """Write the bit-exact TFCB file: header then float32-LE centroids."""
    if not isinstance(codebook, KMeansCodebook):
        raise ConfigError("only trained k-means codebooks serialize; the identity codec is in-memory only")
    path = Path(path)
    header = struct.pack(
        "<4sIIIIII", TFCB_MAGIC, TFCB_VERSION, codebook.N, codebook.q,
        codebook.grid[0], codebook.grid[1], codebook.patch_side,
    )
    body = codebook.centroids.astype("<f4").tobytes()
    path.write_bytes(header + body)
    return path


def load_codebook(path: str | Path) -> KMeansCodebook:
    raw = Path(path).read_bytes()
    if len(raw) < 28 or raw[:4] != TFCB_MAGIC:
        raise CodecError(f"not a TFCB codebook file: {path}")
    _, version, n, q, rows, cols, patch = struct.unpack("<4sIIIIII", raw[:28])
    if version != TFCB_VERSION:
        raise CodecError(f"unsupported TFCB version {version}")
    dim = patch * patch * 3
    expected = 28 + n * dim * 4
    if len(raw) != expected:
        raise CodecError(f"TFCB payload size mismatch: {len(raw)} != {expected}")
    centroids = np.frombuffer(raw[28:], dtype="<f4").reshape(n, dim).copy()
    cb = KMeansCodebook(centroids, (rows, cols), patch)
    if cb.q != q:
        raise CodecError("TFCB header q disagrees with grid")
    return cb


# -- balanced training stream --------------------------------------------------------

@dataclass(frozen=True)
class BalanceConfig:
    task_balancing: bool = True
    dataset_balancing: bool = True
    recolor: bool = True
    # Explicit per-bucket weights (image bucket first, then tasks in order);
    # only consulted when task_balancing is off.
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if (w < 0).any() or not np.isclose(w.sum(), 1.0):
                raise ConfigError("bucket weights must be non-negative and sum to 1")


@dataclass(frozen=True, eq=False)
class StreamSample:
    image: ImageRaster
    bucket: str
    dataset_id: str
    record_id: str


IMAGE_BUCKET = "image"


def balanced_stream(
    datasets: Sequence[Sequence[DatasetRecord]],
    tasks: Sequence[DiscriminativeKind],
    config: BalanceConfig,
    rng: RngState,
    n_draws: int,
    palette_floor: float = 48.0,
) -> Iterator[StreamSample]:
    """Yield training samples balanced over task buckets and datasets.

    Buckets are the raw image plus one per task kind. With task balancing the
    buckets are drawn uniformly; otherwise raw images get half the mass and
    the task buckets split the rest (or explicit weights apply). With dataset
    balancing the dataset is drawn uniformly regardless of size. With recolor
    augmentation every rendered sample uses a fresh random palette; otherwise
    one fixed palette per dataset.
    """
    datasets = [list(d) for d in datasets if d]
    if not datasets:
        raise ConfigError("balanced_stream needs at least one non-empty dataset")
    buckets = [IMAGE_BUCKET] + [kind_label(t) for t in tasks]
    by_bucket = {kind_label(t): t for t in tasks}
    if config.task_balancing:
        weights = np.full(len(buckets), 1.0 / len(buckets))
    elif config.weights is not None:
        if len(config.weights) != len(buckets):
            raise ConfigError(f"expected {len(buckets)} bucket weights")
        weights = np.asarray(config.weights, dtype=np.float64)
    elif len(buckets) == 1:
        weights = np.array([1.0])
    else:
        weights = np.array([0.5] + [0.5 / (len(buckets) - 1)] * (len(buckets) - 1))

    sizes = np.array([len(d) for d in datasets], dtype=np.float64)
    ds_weights = (
        np.full(len(datasets), 1.0 / len(datasets))
        if config.dataset_balancing
        else sizes / sizes.sum()
    )
    fixed_palettes = {}
    for d in datasets:
        classes = set().union(*(r.mask.present for r in d)) or {1}
        fixed_palettes[d[0].dataset_id] = default_palette(classes)

    cum_buckets = np.cumsum(weights)
    cum_ds = np.cumsum(ds_weights)
    for i in range(n_draws):
        draw = rng.child("draw", i)
        bucket = buckets[int(np.searchsorted(cum_buckets, draw.random(), side="right"))]
        ds = datasets[int(np.searchsorted(cum_ds, draw.random(), side="right"))]
        rec = ds[int(draw.integers(0, len(ds)))]
        if bucket == IMAGE_BUCKET:
            yield StreamSample(rec.image, bucket, rec.dataset_id, rec.record_id)
            continue
        classes = rec.mask.present or {1}
        if config.recolor:
            palette = sample_palette(set(classes), draw.child("palette"), floor=palette_floor)
        else:
            palette = fixed_palettes[rec.dataset_id]
        rendered = render_discriminative(rec.mask, by_bucket[bucket], palette)
        yield StreamSample(rendered, bucket, rec.dataset_id, rec.record_id)


# -- training ---------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    N: int = 512
    patch_side: int = 16
    grid: tuple[int, int] = (12, 12)
    iterations: int = 20
    seed: int = 0
    max_patches: int = 65536


def _kmeans_pp_seed(patches: np.ndarray, n: int, rng: RngState) -> np.ndarray:
    """k-means++ seeding: D^2-weighted draws, deterministic per rng."""
    count = patches.shape[0]
    sq = (patches * patches).sum(axis=1)
    centroids = np.empty((n, patches.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, count))
    centroids[0] = patches[first]

    def dist_to(c):
        return np.maximum(sq - 2.0 * (patches @ c) + (c @ c), 0.0)

    d2 = dist_to(centroids[0])
    for i in range(1, n):
        total = d2.sum()
        if total <= 0.0:  # all remaining patches identical to a centroid
            pick = int(rng.integers(0, count))
        else:
            r = rng.random() * total
            pick = int(np.searchsorted(np.cumsum(d2), r, side="right").clip(0, count - 1))
        centroids[i] = patches[pick]
        d2 = np.minimum(d2, dist_to(centroids[i]))
    return centroids


def train_codebook(stream: Iterator, config: TrainConfig = TrainConfig()) -> KMeansCodebook:
    """Lloyd's k-means over image patches with k-means++ seeding.

    Samples are resized to the codec side and cut into patches. Empty
    clusters are reseeded from the patch farthest from its centroid, and the
    quantization objective is asserted non-increasing across iterations.
    """
    if config.N < 1:
        raise TrainingError("vocabulary size must be >= 1")
    side = config.grid[0] * config.patch_side
    if config.grid[1] * config.patch_side != side:
        raise TrainingError("grid and patch side must form a square raster")

    rng = RngState(config.seed)
    chunks = []
    for sample in stream:
        image = sample.image if isinstance(sample, StreamSample) else sample
        px = resize_image(image.pixels, side)
        chunks.append(_patchify(px, config.grid, config.patch_side))
    if not chunks:
        raise TrainingError("training stream is empty")
    patches = np.concatenate(chunks).astype(np.float64)
    if patches.shape[0] < config.N:
        raise TrainingError(
            f"stream yielded {patches.shape[0]} patches; need at least N={config.N}"
        )
    if patches.shape[0] > config.max_patches:
        idx = rng.child("subsample").integers(0, patches.shape[0], size=config.max_patches)
        patches = patches[np.sort(idx)]

    centroids = _kmeans_pp_seed(patches, config.N, rng.child("seed"))
    sq = (patches * patches).sum(axis=1)
    prev_obj = np.inf
    for _ in range(config.iterations):
        d2 = sq[:, None] - 2.0 * patches @ centroids.T + (centroids * centroids).sum(axis=1)[None, :]
        assign = np.argmin(d2, axis=1)
        obj = float(np.take_along_axis(d2, assign[:, None], axis=1).sum())
        assert obj <= prev_obj * (1 + 1e-9) + 1e-6, "k-means objective increased"
        prev_obj = obj
        counts = np.bincount(assign, minlength=config.N)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, patches)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        own = np.take_along_axis(d2, assign[:, None], axis=1).ravel()
        for k in np.flatnonzero(~nonempty):
            worst = int(np.argmax(own))
            centroids[k] = patches[worst]
            own[worst] = -np.inf  # keep later reseeds distinct
    return KMeansCodebook(centroids.astype(np.float32), config.grid, config.patch_side)
