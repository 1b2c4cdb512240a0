"""Domain types, dataset ingestion, and the synthetic fixture generator.

All rasters are numpy arrays with read-only buffers: images are (H, W, 3)
uint8, segmentation maps are (H, W) uint8 class ids with 0 as background.
Records are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError, FixtureError, IngestError, ValidationError
from .rng import RngState

CANONICAL_SIDE = 200


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr and arr.flags.writeable:
        out = arr.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ImageRaster:
    """An (H, W, 3) uint8 raster, the universal currency of all tasks."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise DimensionError(f"image must be (H, W, 3) uint8, got {px.shape} {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise DimensionError("image dimensions must be positive")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def same_pixels(self, other: "ImageRaster") -> bool:
        return bool(np.array_equal(self.pixels, other.pixels))


@dataclass(frozen=True, eq=False)
class SegMap:
    """An (H, W) raster of class ids; ``present`` is recomputed on construction."""

    classes: np.ndarray
    present: frozenset[int] = field(init=False)

    def __post_init__(self):
        arr = self.classes
        if arr.ndim != 2 or arr.dtype != np.uint8:
            raise DimensionError(f"mask must be (H, W) uint8, got {arr.shape} {arr.dtype}")
        object.__setattr__(self, "classes", _frozen(arr))
        ids = np.unique(arr)
        object.__setattr__(self, "present", frozenset(int(i) for i in ids if i != 0))

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]


@dataclass(frozen=True)
class Palette:
    """Injective mapping from class id to an RGB triple plus a background color."""

    colors: dict[int, tuple[int, int, int]]
    background: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        seen = set(self.colors.values())
        if len(seen) != len(self.colors):
            raise ValidationError("palette colors must be injective")
        if self.background in seen:
            raise ValidationError("background color collides with a class color")

    def color(self, class_id: int) -> tuple[int, int, int]:
        if class_id == 0:
            return self.background
        return self.colors[class_id]

    def covers(self, class_ids) -> bool:
        return all(c in self.colors for c in class_ids)

    def min_pairwise_distance(self) -> float:
        """Smallest Euclidean RGB distance over all color pairs (incl. background)."""
        pts = np.array([self.background, *self.colors.values()], dtype=np.int64)
        if len(pts) < 2:
            return float("inf")
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
        d2[np.diag_indices(len(pts))] = np.iinfo(np.int64).max
        return float(np.sqrt(d2.min()))

    def lut(self, max_id: int | None = None) -> np.ndarray:
        """(max_id+1, 3) uint8 lookup table, row 0 = background."""
        top = max(self.colors, default=0) if max_id is None else max_id
        table = np.zeros((top + 1, 3), dtype=np.uint8)
        table[0] = self.background
        for cid, rgb in self.colors.items():
            if cid <= top:
                table[cid] = rgb
        return table


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    """One image/mask pair of a dataset."""

    record_id: str
    image: ImageRaster
    mask: SegMap
    dataset_id: str

    def __post_init__(self):
        if (self.image.height, self.image.width) != (self.mask.height, self.mask.width):
            raise ValidationError(
                f"record {self.record_id!r}: image {self.image.height}x{self.image.width} "
                f"does not match mask {self.mask.height}x{self.mask.width}"
            )


# -- resizing ----------------------------------------------------------------

def resize_image(pixels: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of an (H, W, 3) uint8 array to side x side."""
    if pixels.shape[0] == side and pixels.shape[1] == side:
        return pixels
    im = Image.fromarray(pixels, mode="RGB").resize((side, side), Image.BILINEAR)
    return np.asarray(im, dtype=np.uint8)


def resize_mask(classes: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbor resize of an (H, W) uint8 class raster; ids never blend."""
    if classes.shape[0] == side and classes.shape[1] == side:
        return classes
    im = Image.fromarray(classes, mode="L").resize((side, side), Image.NEAREST)
    return np.asarray(im, dtype=np.uint8)


# -- manifest I/O -------------------------------------------------------------

def load_dataset(manifest_path: str | Path, canonical_side: int = CANONICAL_SIDE) -> list[DatasetRecord]:
    """Load a dataset manifest and return records resized to the canonical side.

    The manifest is a JSON file: ``{"dataset_id", "classes": [{"id", "name"}],
    "records": [{"id", "image", "mask"}]}`` with file paths relative to the
    manifest. Images resize bilinearly, masks with nearest-neighbor.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestError(f"manifest not found: {manifest_path}")
    spec = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    dataset_id = spec["dataset_id"]
    declared = {int(c["id"]) for c in spec["classes"]}
    if 0 in declared:
        raise ValidationError(f"dataset {dataset_id!r}: class id 0 is reserved for background")
    if any(c > 255 or c < 0 for c in declared):
        raise ValidationError(f"dataset {dataset_id!r}: class ids must be in [1, 255]")

    records = []
    for entry in spec["records"]:
        rid = entry["id"]
        image_path = root / entry["image"]
        mask_path = root / entry["mask"]
        for p in (image_path, mask_path):
            if not p.is_file():
                raise IngestError(f"record {rid!r}: missing file {p}")
        img = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.uint8)
        msk = np.asarray(Image.open(mask_path).convert("L"), dtype=np.uint8)
        if img.shape[:2] != msk.shape:
            raise ValidationError(
                f"record {rid!r}: image {img.shape[:2]} does not match mask {msk.shape}"
            )
        found = {int(i) for i in np.unique(msk) if i != 0}
        extra = found - declared
        if extra:
            raise ValidationError(
                f"record {rid!r}: mask contains undeclared class ids {sorted(extra)}"
            )
        records.append(
            DatasetRecord(
                record_id=rid,
                image=ImageRaster(resize_image(img, canonical_side)),
                mask=SegMap(resize_mask(msk, canonical_side)),
                dataset_id=dataset_id,
            )
        )
    return records


def save_dataset(records: list[DatasetRecord], out_dir: str | Path,
                 class_names: dict[int, str] | None = None) -> Path:
    """Write records as PNGs plus a manifest; returns the manifest path.

    The layout mirrors what :func:`load_dataset` expects, so a load/save/load
    round trip is bit-identical.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    all_classes: set[int] = set()
    entries = []
    for rec in records:
        all_classes |= rec.mask.present
        img_rel = f"images/{rec.record_id}.png"
        msk_rel = f"masks/{rec.record_id}.png"
        Image.fromarray(rec.image.pixels, mode="RGB").save(out_dir / img_rel)
        Image.fromarray(rec.mask.classes, mode="L").save(out_dir / msk_rel)
        entries.append({"id": rec.record_id, "image": img_rel, "mask": msk_rel})
    names = class_names or {}
    manifest = {
        "dataset_id": records[0].dataset_id if records else "empty",
        "classes": [
            {"id": cid, "name": names.get(cid, f"class_{cid}")} for cid in sorted(all_classes)
        ],
        "records": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


# -- synthetic fixtures --------------------------------------------------------

def _shape_footprint(kind: str, cy: float, cx: float, ry: float, rx: float, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    if kind == "ellipse":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def generate_fixture(
    n_records: int,
    n_classes: int,
    side: int = 64,
    rng: RngState | None = None,
    dataset_id: str = "fixture",
    min_frac: float = 0.10,
    max_frac: float = 0.22,
) -> list[DatasetRecord]:
    """Generate records with one non-overlapping shape per class.

    Each mask holds one filled ellipse or rectangle per class id 1..n_classes;
    the image is a smooth per-channel gradient with a flat per-class shading
    offset inside each shape, so image content correlates with the mask.
    min_frac/max_frac bound shape radii as a fraction of the side.
    """
    if n_classes < 1:
        raise FixtureError("n_classes must be >= 1")
    if side < 16:
        raise FixtureError("side must be >= 16")
    rng = rng or RngState(0)

    records = []
    for r in range(n_records):
        rec_rng = rng.child("record", r)
        mask = np.zeros((side, side), dtype=np.uint8)
        for cls in range(1, n_classes + 1):
            placed = False
            for _ in range(64):
                kind = "ellipse" if rec_rng.coin() else "rect"
                ry = side * rec_rng.uniform(min_frac, max_frac)
                rx = side * rec_rng.uniform(min_frac, max_frac)
                cy = rec_rng.uniform(ry + 1, side - ry - 1)
                cx = rec_rng.uniform(rx + 1, side - rx - 1)
                foot = _shape_footprint(kind, cy, cx, ry, rx, side)
                if not foot.any():
                    continue
                if (mask[foot] == 0).all():
                    mask[foot] = cls
                    placed = True
                    break
            if not placed:
                raise FixtureError(
                    f"record {r}: could not place class {cls} without overlap "
                    f"({n_classes} classes at side {side})"
                )

        base = rec_rng.uniform(70.0, 150.0)
        yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
        img = np.empty((side, side, 3), dtype=np.float64)
        for ch in range(3):
            gx = rec_rng.uniform(-45.0, 45.0)
            gy = rec_rng.uniform(-45.0, 45.0)
            img[:, :, ch] = base + gx * (xx / side) + gy * (yy / side)
        for cls in range(1, n_classes + 1):
            shade = rec_rng.uniform(35.0, 80.0) * (1 if rec_rng.coin() else -1)
            region = mask == cls
            img[region] += shade
        pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        records.append(
            DatasetRecord(
                record_id=f"r{r:04d}",
                image=ImageRaster(pixels),
                mask=SegMap(mask),
                dataset_id=dataset_id,
            )
        )
    return records
