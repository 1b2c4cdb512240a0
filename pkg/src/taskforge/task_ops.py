"""Single-image task operators: degradations, geometric transforms, and
mask-derived renderings.

All operators are pure given an explicit RngState and never change raster
dimensions. Degradations return the *input* side of a restoration task; the
original image is always the target.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np
import scipy.ndimage as ndi
from PIL import Image

from .core import ImageRaster, Palette, SegMap
from .errors import DimensionError, PaletteError, ParameterError
from .rng import RngState

# Parameter sampling ranges. Degradations are visible but recoverable.
NOISE_MEAN_RANGE = (-0.1 * 255, 0.1 * 255)
NOISE_SIGMA_RANGE = (0.02 * 255, 0.25 * 255)
INPAINT_COUNT_RANGE = (1, 4)
INPAINT_AREA_RANGE = (0.05, 0.20)
BRIGHTNESS_RANGE = (0.5, 1.5)
JITTER_DELTA_RANGE = (-0.2, 0.2)
SUPERRES_FACTORS = (8, 4, 2)
DISC_WIDTHS = (1, 3, 5)
PALETTE_DISTANCE_FLOOR = 48.0


# -- task kinds ----------------------------------------------------------------

@dataclass(frozen=True)
class SuperRes:
    target_side: int

    def __post_init__(self):
        if self.target_side < 1:
            raise ParameterError("super-resolution target side must be >= 1")


@dataclass(frozen=True)
class Inpaint:
    rects: tuple[tuple[int, int, int, int], ...]  # (col, row, width, height)

    def __post_init__(self):
        for x, y, w, h in self.rects:
            if w < 1 or h < 1 or x < 0 or y < 0:
                raise ParameterError(f"bad inpaint rectangle {(x, y, w, h)}")


@dataclass(frozen=True)
class Noise:
    mean: float
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ParameterError("noise sigma must be >= 0")


@dataclass(frozen=True)
class ColorJitter:
    hue: float = 0.0
    saturation: float = 0.0
    brightness: float = 0.0

    def __post_init__(self):
        for d in (self.hue, self.saturation, self.brightness):
            if not -1.0 <= d <= 1.0:
                raise ParameterError("jitter deltas must be in [-1, 1]")


@dataclass(frozen=True)
class Invert:
    pass


@dataclass(frozen=True)
class Equalize:
    pass


@dataclass(frozen=True)
class Brightness:
    factor: float

    def __post_init__(self):
        if self.factor <= 0:
            raise ParameterError("brightness factor must be positive")


GenerativeKind = Union[SuperRes, Inpaint, Noise, ColorJitter, Invert, Equalize, Brightness]


class TransformKind(Enum):
    FLIP_H = "flip_h"
    FLIP_V = "flip_v"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"


def _widthcheck(width: int):
    if width not in DISC_WIDTHS:
        raise ParameterError(f"stroke width must be one of {DISC_WIDTHS}, got {width}")


@dataclass(frozen=True)
class Segmentation:
    pass


@dataclass(frozen=True)
class Edges:
    width: int = 1

    def __post_init__(self):
        _widthcheck(self.width)


@dataclass(frozen=True)
class Boxes:
    width: int = 1

    def __post_init__(self):
        _widthcheck(self.width)


@dataclass(frozen=True)
class Skeleton:
    width: int = 1

    def __post_init__(self):
        _widthcheck(self.width)


@dataclass(frozen=True)
class Points:
    width: int = 1

    def __post_init__(self):
        _widthcheck(self.width)


DiscriminativeKind = Union[Segmentation, Edges, Boxes, Skeleton, Points]
TaskKind = Union[GenerativeKind, TransformKind, DiscriminativeKind]


def kind_label(kind: TaskKind) -> str:
    """Stable human-readable label, e.g. 'noise', 'rot90', 'edges_w3'."""
    if isinstance(kind, TransformKind):
        return kind.value
    name = type(kind).__name__.lower()
    if name == "superres":
        return f"superres_{kind.target_side}"
    width = getattr(kind, "width", None)
    return f"{name}_w{width}" if width is not None else name


# -- generative degradations -----------------------------------------------------

def _box_downsample(px: np.ndarray, target: int) -> np.ndarray:
    h, w = px.shape[:2]
    if h % target == 0 and w % target == 0:
        fy, fx = h // target, w // target
        area = fy * fx
        sums = px.astype(np.int64).reshape(target, fy, target, fx, 3).sum(axis=(1, 3))
        return ((sums + area // 2) // area).astype(np.uint8)
    im = Image.fromarray(px, mode="RGB").resize((target, target), Image.BOX)
    return np.asarray(im, dtype=np.uint8)


def _nearest_upsample(px: np.ndarray, side: int) -> np.ndarray:
    t = px.shape[0]
    if side % t == 0:
        f = side // t
        return np.repeat(np.repeat(px, f, axis=0), f, axis=1)
    im = Image.fromarray(px, mode="RGB").resize((side, side), Image.NEAREST)
    return np.asarray(im, dtype=np.uint8)


def _equalize_channel(ch: np.ndarray) -> np.ndarray:
    hist = np.bincount(ch.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    nonzero = cdf[cdf > 0]
    cdf_min = int(nonzero[0])
    total = int(cdf[-1])
    if total == cdf_min:  # constant channel
        return ch
    lut = np.rint((cdf - cdf_min) / (total - cdf_min) * 255.0).clip(0, 255).astype(np.uint8)
    return lut[ch]


def apply_generative(image: ImageRaster, kind: GenerativeKind, rng: RngState) -> ImageRaster:
    """Return the degraded input of a restoration task; the original image is
    the target. Output dimensions always equal input dimensions."""
    px = image.pixels
    side = px.shape[0]

    if isinstance(kind, SuperRes):
        if kind.target_side > side:
            raise ParameterError(
                f"super-resolution target {kind.target_side} exceeds image side {side}"
            )
        small = _box_downsample(px, kind.target_side)
        return ImageRaster(_nearest_upsample(small, side))

    if isinstance(kind, Inpaint):
        out = px.copy()
        for x, y, w, h in kind.rects:
            if x + w > px.shape[1] or y + h > px.shape[0]:
                raise ParameterError(f"inpaint rectangle {(x, y, w, h)} exceeds image bounds")
            out[y:y + h, x:x + w] = 0
        return ImageRaster(out)

    if isinstance(kind, Noise):
        field = rng.normal(kind.mean, kind.sigma, size=px.shape)
        out = np.clip(np.rint(px.astype(np.float64) + field), 0, 255).astype(np.uint8)
        return ImageRaster(out)

    if isinstance(kind, ColorJitter):
        hsv = np.asarray(Image.fromarray(px, mode="RGB").convert("HSV"), dtype=np.int32)
        h = (hsv[:, :, 0] + int(round(kind.hue * 255))) % 256
        s = np.clip(np.rint(hsv[:, :, 1] * (1.0 + kind.saturation)), 0, 255)
        v = np.clip(np.rint(hsv[:, :, 2] * (1.0 + kind.brightness)), 0, 255)
        jittered = np.stack([h, s, v], axis=-1).astype(np.uint8)
        out = Image.fromarray(jittered, mode="HSV").convert("RGB")
        return ImageRaster(np.asarray(out, dtype=np.uint8))

    if isinstance(kind, Invert):
        return ImageRaster(255 - px)

    if isinstance(kind, Equalize):
        out = np.stack([_equalize_channel(px[:, :, c]) for c in range(3)], axis=-1)
        return ImageRaster(out)

    if isinstance(kind, Brightness):
        out = np.clip(np.rint(px.astype(np.float64) * kind.factor), 0, 255).astype(np.uint8)
        return ImageRaster(out)

    raise ParameterError(f"unknown generative kind {kind!r}")


# -- geometric transforms ---------------------------------------------------------

def _transform_array(arr: np.ndarray, kind: TransformKind) -> np.ndarray:
    if kind in (TransformKind.ROT90, TransformKind.ROT270) and arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"{kind.value} requires a square raster, got {arr.shape[:2]}")
    if kind is TransformKind.FLIP_H:
        return arr[:, ::-1].copy()
    if kind is TransformKind.FLIP_V:
        return arr[::-1, :].copy()
    if kind is TransformKind.ROT90:  # clockwise
        return np.rot90(arr, k=-1).copy()
    if kind is TransformKind.ROT180:
        return np.rot90(arr, k=2).copy()
    if kind is TransformKind.ROT270:
        return np.rot90(arr, k=1).copy()
    raise ParameterError(f"unknown transform {kind!r}")


def apply_transform(image: ImageRaster, kind: TransformKind) -> ImageRaster:
    """Exact pixel permutation; no interpolation, no value changes."""
    return ImageRaster(_transform_array(image.pixels, kind))


def apply_transform_mask(mask: SegMap, kind: TransformKind) -> SegMap:
    return SegMap(_transform_array(mask.classes, kind))


TRANSFORM_INVERSE = {
    TransformKind.FLIP_H: TransformKind.FLIP_H,
    TransformKind.FLIP_V: TransformKind.FLIP_V,
    TransformKind.ROT90: TransformKind.ROT270,
    TransformKind.ROT180: TransformKind.ROT180,
    TransformKind.ROT270: TransformKind.ROT90,
}


# -- mask machinery ----------------------------------------------------------------

_EIGHT = np.ones((3, 3), dtype=np.int32)


@dataclass(frozen=True, eq=False)
class Component:
    """One 8-connected region of a class, with its tight bounding box."""

    mask: np.ndarray  # full-size bool raster
    bbox: tuple[int, int, int, int]  # (row0, col0, row1, col1) inclusive


def connected_components(mask: SegMap, class_id: int) -> list[Component]:
    """8-connected components of one class, in row-major discovery order."""
    binary = mask.classes == class_id
    if not binary.any():
        return []
    labels, count = ndi.label(binary, structure=_EIGHT)
    out = []
    for lab in range(1, count + 1):
        comp = labels == lab
        rows = np.flatnonzero(comp.any(axis=1))
        cols = np.flatnonzero(comp.any(axis=0))
        out.append(Component(
            mask=comp,
            bbox=(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])),
        ))
    return out


def subsample_classes(mask: SegMap, keep: set[int]) -> SegMap:
    """Zero out every class id not in ``keep``; present is recomputed."""
    keep = set(keep)
    if not keep:
        raise ParameterError("keep set must be non-empty")
    missing = keep - mask.present
    if missing:
        raise ParameterError(f"keep ids {sorted(missing)} not present in mask")
    arr = mask.classes.copy()
    arr[~np.isin(arr, list(keep))] = 0
    return SegMap(arr)


def medial_axis(component: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning of a binary raster.

    The skeleton is a subset of the foreground and keeps one connected piece
    per input component; components too small to survive thinning (e.g. 2x2
    blocks, which the classic scheme erases) are restored as their innermost
    pixel. An empty input yields an empty output.
    """
    fg = np.asarray(component, dtype=bool)
    if not fg.any():
        return np.zeros_like(fg)

    img = np.zeros((fg.shape[0] + 2, fg.shape[1] + 2), dtype=np.uint8)
    img[1:-1, 1:-1] = fg

    def neighbors(a):
        p2 = a[:-2, 1:-1]; p3 = a[:-2, 2:]; p4 = a[1:-1, 2:]; p5 = a[2:, 2:]
        p6 = a[2:, 1:-1]; p7 = a[2:, :-2]; p8 = a[1:-1, :-2]; p9 = a[:-2, :-2]
        return p2, p3, p4, p5, p6, p7, p8, p9

    while True:
        changed = False
        for step in (0, 1):
            p2, p3, p4, p5, p6, p7, p8, p9 = neighbors(img)
            ring = [p2, p3, p4, p5, p6, p7, p8, p9, p2]
            b = sum(ring[:-1])
            a = sum(((ring[i] == 0) & (ring[i + 1] == 1)) for i in range(8))
            cond = (img[1:-1, 1:-1] == 1) & (b >= 2) & (b <= 6) & (a == 1)
            if step == 0:
                cond &= (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                cond &= (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            if cond.any():
                img[1:-1, 1:-1][cond] = 0
                changed = True
        if not changed:
            break

    thin = img[1:-1, 1:-1].astype(bool)
    labels, count = ndi.label(fg, structure=_EIGHT)
    for lab in range(1, count + 1):
        comp = labels == lab
        if not (thin & comp).any():
            dist = ndi.distance_transform_edt(comp)
            idx = np.unravel_index(int(np.argmax(dist)), dist.shape)
            thin[idx] = True
    return thin


def _dilate(binary: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return binary
    return ndi.binary_dilation(binary, structure=np.ones((width, width), dtype=bool))


def _class_edges(classes: np.ndarray, class_id: int) -> np.ndarray:
    """Pixels of a class adjacent (4-neighborhood) to any other value.

    Out-of-raster neighbors count as background, so shapes touching the
    border get a closed outline.
    """
    padded = np.zeros((classes.shape[0] + 2, classes.shape[1] + 2), dtype=classes.dtype)
    padded[1:-1, 1:-1] = classes
    center = padded[1:-1, 1:-1]
    differs = np.zeros(classes.shape, dtype=bool)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        neigh = padded[1 + dy:padded.shape[0] - 1 + dy, 1 + dx:padded.shape[1] - 1 + dx]
        differs |= neigh != center
    return (classes == class_id) & differs


def _bbox_ring(bbox: tuple[int, int, int, int], shape: tuple[int, int]) -> np.ndarray:
    r0, c0, r1, c1 = bbox
    ring = np.zeros(shape, dtype=bool)
    ring[r0, c0:c1 + 1] = True
    ring[r1, c0:c1 + 1] = True
    ring[r0:r1 + 1, c0] = True
    ring[r0:r1 + 1, c1] = True
    return ring


def _point_disc(center: tuple[int, int], width: int, shape: tuple[int, int]) -> np.ndarray:
    cy, cx = center
    r = width / 2.0
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _innermost_pixel(comp: np.ndarray) -> tuple[int, int]:
    dist = ndi.distance_transform_edt(comp)
    idx = np.unravel_index(int(np.argmax(dist)), dist.shape)
    return int(idx[0]), int(idx[1])


def render_discriminative(mask: SegMap, kind: DiscriminativeKind, palette: Palette) -> ImageRaster:
    """Render a mask-derived annotation on a background-colored canvas.

    Classes are painted in ascending id order, so later ids win where dilated
    strokes of different classes overlap.
    """
    if not palette.covers(mask.present):
        missing = sorted(c for c in mask.present if c not in palette.colors)
        raise PaletteError(f"palette missing class ids {missing}")

    shape = mask.classes.shape
    canvas = np.empty((*shape, 3), dtype=np.uint8)
    canvas[:] = palette.background

    if isinstance(kind, Segmentation):
        canvas = palette.lut(int(mask.classes.max(initial=0)))[mask.classes]
        return ImageRaster(canvas)

    for cls in sorted(mask.present):
        if isinstance(kind, Edges):
            drawn = _dilate(_class_edges(mask.classes, cls), kind.width)
        elif isinstance(kind, Boxes):
            drawn = np.zeros(shape, dtype=bool)
            for comp in connected_components(mask, cls):
                drawn |= _bbox_ring(comp.bbox, shape)
            drawn = _dilate(drawn, kind.width)
        elif isinstance(kind, Skeleton):
            drawn = _dilate(medial_axis(mask.classes == cls), kind.width)
        elif isinstance(kind, Points):
            drawn = np.zeros(shape, dtype=bool)
            for comp in connected_components(mask, cls):
                drawn |= _point_disc(_innermost_pixel(comp.mask), kind.width, shape)
        else:
            raise ParameterError(f"unknown discriminative kind {kind!r}")
        canvas[drawn] = palette.color(cls)
    return ImageRaster(canvas)


# -- palette sampling ----------------------------------------------------------------

def sample_palette(
    classes: set[int],
    rng: RngState,
    floor: float = PALETTE_DISTANCE_FLOOR,
    background: tuple[int, int, int] = (0, 0, 0),
    max_tries: int = 256,
) -> Palette:
    """Random injective palette whose colors are pairwise at least ``floor``
    apart (background included). Deterministic per rng stream."""
    classes = sorted(set(classes))
    if not classes:
        raise PaletteError("cannot sample a palette for zero classes")

    # Pigeonhole precheck: cells of side floor/2 hold at most one color each.
    cell = max(1.0, floor / 2.0)
    capacity = int(np.ceil(256.0 / cell)) ** 3
    if len(classes) + 1 > capacity:
        raise PaletteError(
            f"{len(classes)} classes cannot be {floor} apart in RGB space "
            f"(capacity bound {capacity})"
        )

    chosen: list[np.ndarray] = [np.array(background, dtype=np.int64)]
    floor2 = floor * floor
    for cls in classes:
        for _ in range(max_tries):
            cand = rng.integers(0, 256, size=3).astype(np.int64)
            d2 = ((np.stack(chosen) - cand) ** 2).sum(axis=1)
            if (d2 >= floor2).all():
                chosen.append(cand)
                break
        else:
            raise PaletteError(
                f"could not place color for class {cls} at distance floor {floor} "
                f"after {max_tries} tries"
            )
    colors = {cls: tuple(int(v) for v in vec) for cls, vec in zip(classes, chosen[1:])}
    return Palette(colors=colors, background=background)


def enrichment_variants(
    image: ImageRaster,
    mask: SegMap,
    palette: Palette,
    rng: RngState,
) -> list[tuple[str, ImageRaster]]:
    """Every task variant derivable from one image/mask pair, with labels.

    Covers the raw image, three super-resolution factors, the six other
    degradations, the five transforms, and all annotation kinds at each
    stroke width: 28 variants in total.
    """
    side = image.pixels.shape[0]
    out: list[tuple[str, ImageRaster]] = [("image", image)]

    for factor in SUPERRES_FACTORS:
        target = max(1, side // factor)
        out.append((f"superres_{target}", apply_generative(image, SuperRes(target), rng.child("sr", factor))))

    rect_rng = rng.child("inpaint")
    rects = []
    for i in range(2):
        w = max(2, int(side * rect_rng.uniform(0.2, 0.4)))
        h = max(2, int(side * rect_rng.uniform(0.2, 0.4)))
        x = int(rect_rng.integers(0, side - w + 1))
        y = int(rect_rng.integers(0, side - h + 1))
        rects.append((x, y, w, h))
    degradations: list[tuple[str, GenerativeKind]] = [
        ("inpaint", Inpaint(tuple(rects))),
        ("noise", Noise(mean=0.0, sigma=float(rng.child("noise").uniform(*NOISE_SIGMA_RANGE)))),
        ("jitter", ColorJitter(
            hue=float(rng.child("jh").uniform(*JITTER_DELTA_RANGE)),
            saturation=float(rng.child("js").uniform(*JITTER_DELTA_RANGE)),
            brightness=float(rng.child("jb").uniform(*JITTER_DELTA_RANGE)),
        )),
        ("invert", Invert()),
        ("equalize", Equalize()),
        ("brightness", Brightness(factor=float(rng.child("bf").uniform(*BRIGHTNESS_RANGE)))),
    ]
    for name, kind in degradations:
        out.append((name, apply_generative(image, kind, rng.child("apply", name))))

    for t in TransformKind:
        out.append((t.value, apply_transform(image, t)))

    out.append(("segmentation", render_discriminative(mask, Segmentation(), palette)))
    for cls in (Edges, Boxes, Skeleton, Points):
        for width in DISC_WIDTHS:
            kind = cls(width)
            out.append((kind_label(kind), render_discriminative(mask, kind, palette)))
    return out


def default_palette(classes: set[int], background: tuple[int, int, int] = (0, 0, 0)) -> Palette:
    """Deterministic well-spread palette: evenly spaced hues at full value.

    Used as the 'fixed color semantics' reference; depends only on the class
    id set, never on an rng.
    """
    classes = sorted(set(classes))
    if not classes:
        raise PaletteError("cannot build a palette for zero classes")
    colors = {}
    n = len(classes)
    for i, cls in enumerate(classes):
        hue = int(round(255 * i / n)) % 256
        sat = 255 if i % 2 == 0 else 160
        rgb = Image.new("HSV", (1, 1), (hue, sat, 255)).convert("RGB").getpixel((0, 0))
        colors[cls] = tuple(int(v) for v in rgb)
    return Palette(colors=colors, background=background)
