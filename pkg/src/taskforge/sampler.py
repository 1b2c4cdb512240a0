"""Guardrailed compositional task sequence sampling.

A sampled structure follows the grammar ``degradations* image transforms*
annotations*``. Degradations stack right-to-left so the first chain element
is the most corrupted input; transforms accumulate left-to-right on the raw
image; annotation renderings use the mask after class subsampling and after
the full cumulative transform. Bundles share one structure and one palette
across all context chains and the query/output chain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .core import DatasetRecord, ImageRaster, Palette
from .errors import SamplerError, ValidationError
from .rng import RngState
from . import task_ops
from .task_ops import (
    Boxes,
    Brightness,
    ColorJitter,
    DiscriminativeKind,
    Edges,
    Equalize,
    GenerativeKind,
    Inpaint,
    Invert,
    Noise,
    Points,
    Segmentation,
    Skeleton,
    SuperRes,
    TransformKind,
    apply_generative,
    apply_transform,
    apply_transform_mask,
    kind_label,
    render_discriminative,
    sample_palette,
    subsample_classes,
)

DEFAULT_T_MAX = 15
DEFAULT_IMAGE_BUDGET = 30


class OrderingMode(Enum):
    TASK_BASIS = "task_basis"  # all classes for one task, then the next task
    CLASS_BASIS = "class_basis"  # all tasks for one class, then the next class


@dataclass(frozen=True)
class TaskStructure:
    """One compositional task: kinds per family plus class-expansion flags."""

    generative: tuple[GenerativeKind, ...] = ()
    transforms: tuple[TransformKind, ...] = ()
    discriminative: tuple[DiscriminativeKind, ...] = ()
    ordering_mode: OrderingMode = OrderingMode.TASK_BASIS
    classwise: bool = False

    def __post_init__(self):
        if self.task_count == 0:
            raise ValidationError("a structure needs at least one task besides the raw image")

    @property
    def task_count(self) -> int:
        return len(self.generative) + len(self.transforms) + len(self.discriminative)

    @property
    def base_length(self) -> int:
        """Chain length without classwise expansion (includes the raw image)."""
        return self.task_count + 1

    def chain_length(self, n_classes: int) -> int:
        if self.classwise:
            return (
                len(self.generative) + 1 + len(self.transforms)
                + len(self.discriminative) * n_classes
            )
        return self.base_length


@dataclass(frozen=True)
class PositionSpec:
    """What one chain slot holds: its family, label, kind, and class scope."""

    family: str  # "generative" | "image" | "transform" | "discriminative"
    label: str
    kind: object | None = None
    class_id: int | None = None  # set for classwise discriminative slots


def chain_layout(structure: TaskStructure, keep_sorted) -> list[PositionSpec]:
    """Slot descriptors for a realized chain, in chain order."""
    keep_sorted = list(keep_sorted)
    slots = [
        PositionSpec("generative", kind_label(g), g) for g in structure.generative
    ]
    slots.append(PositionSpec("image", "image"))
    slots.extend(PositionSpec("transform", kind_label(t), t) for t in structure.transforms)
    disc = structure.discriminative
    if not structure.classwise:
        slots.extend(PositionSpec("discriminative", kind_label(d), d) for d in disc)
    elif structure.ordering_mode is OrderingMode.TASK_BASIS:
        for d in disc:
            slots.extend(
                PositionSpec("discriminative", kind_label(d), d, class_id=c)
                for c in keep_sorted
            )
    else:
        for c in keep_sorted:
            slots.extend(
                PositionSpec("discriminative", kind_label(d), d, class_id=c) for d in disc
            )
    return slots


@dataclass(frozen=True, eq=False)
class ImageChain:
    """One realized chain plus everything needed to re-derive it bit-exactly."""

    images: tuple[ImageRaster, ...]
    record_id: str
    keep: frozenset[int]
    palette: Palette
    seed: int
    record: DatasetRecord | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True, eq=False)
class TaskBundle:
    """Context chains, a query image, and the ground-truth output chain."""

    context: tuple[ImageChain, ...]
    query_chain: ImageChain
    structure: TaskStructure
    palette: Palette

    @property
    def query(self) -> ImageRaster:
        return self.query_chain.images[0]

    @property
    def output(self) -> tuple[ImageRaster, ...]:
        return self.query_chain.images[1:]

    @property
    def output_chain(self) -> ImageChain:
        return ImageChain(
            images=self.output,
            record_id=self.query_chain.record_id,
            keep=self.query_chain.keep,
            palette=self.palette,
            seed=self.query_chain.seed,
            record=self.query_chain.record,
        )

    @property
    def n_context(self) -> int:
        return len(self.context)

    @property
    def chain_len(self) -> int:
        return len(self.query_chain)

    @property
    def total_images(self) -> int:
        return sum(len(c) for c in self.context) + len(self.query_chain)

    def all_chains(self) -> tuple[ImageChain, ...]:
        return (*self.context, self.query_chain)


# -- structure sampling ------------------------------------------------------------

@dataclass(frozen=True)
class StructureLimits:
    t_max: int = DEFAULT_T_MAX
    max_per_family: int = 4
    side: int = 200  # canonical image side; bounds degradation geometry


_GENERATIVE_FAMILIES = ("superres", "inpaint", "noise", "jitter", "invert", "equalize", "brightness")
_DISC_FAMILIES = ("segmentation", "edges", "boxes", "skeleton", "points")


def sample_generative_kind(rng: RngState, side: int) -> GenerativeKind:
    family = _GENERATIVE_FAMILIES[int(rng.integers(0, len(_GENERATIVE_FAMILIES)))]
    if family == "superres":
        factor = int(rng.choice(task_ops.SUPERRES_FACTORS))
        return SuperRes(target_side=max(1, side // factor))
    if family == "inpaint":
        lo, hi = task_ops.INPAINT_COUNT_RANGE
        count = int(rng.integers(lo, hi + 1))
        rects = []
        for _ in range(count):
            frac = rng.uniform(*task_ops.INPAINT_AREA_RANGE)
            aspect = rng.uniform(0.5, 2.0)
            w = int(np.clip(round(side * np.sqrt(frac * aspect)), 2, side))
            h = int(np.clip(round(side * np.sqrt(frac / aspect)), 2, side))
            x = int(rng.integers(0, side - w + 1))
            y = int(rng.integers(0, side - h + 1))
            rects.append((x, y, w, h))
        return Inpaint(rects=tuple(rects))
    if family == "noise":
        return Noise(
            mean=float(rng.uniform(*task_ops.NOISE_MEAN_RANGE)),
            sigma=float(rng.uniform(*task_ops.NOISE_SIGMA_RANGE)),
        )
    if family == "jitter":
        lo, hi = task_ops.JITTER_DELTA_RANGE
        return ColorJitter(
            hue=float(rng.uniform(lo, hi)),
            saturation=float(rng.uniform(lo, hi)),
            brightness=float(rng.uniform(lo, hi)),
        )
    if family == "invert":
        return Invert()
    if family == "equalize":
        return Equalize()
    return Brightness(factor=float(rng.uniform(*task_ops.BRIGHTNESS_RANGE)))


def sample_transform_kind(rng: RngState) -> TransformKind:
    return rng.choice(list(TransformKind))


def sample_discriminative_kind(rng: RngState) -> DiscriminativeKind:
    family = _DISC_FAMILIES[int(rng.integers(0, len(_DISC_FAMILIES)))]
    if family == "segmentation":
        return Segmentation()
    width = int(rng.choice(task_ops.DISC_WIDTHS))
    return {"edges": Edges, "boxes": Boxes, "skeleton": Skeleton, "points": Points}[family](width)


def sample_structure(rng: RngState, limits: StructureLimits = StructureLimits()) -> TaskStructure:
    """Draw a grammar-valid structure within the limits; deterministic per seed."""
    if limits.t_max < 2 or limits.max_per_family < 1:
        raise SamplerError(f"limits admit no valid structure: {limits}")
    # Family counts drawn against the remaining task budget, so tight limits
    # still resolve; at the default limits this is plain uniform per family.
    remaining = limits.t_max - 1
    counts = []
    for _ in range(3):
        hi = min(limits.max_per_family, remaining)
        c = int(rng.integers(0, hi + 1))
        counts.append(c)
        remaining -= c
    if sum(counts) == 0:
        counts[int(rng.integers(0, 3))] = 1
    n_gen, n_tr, n_disc = counts
    return TaskStructure(
        generative=tuple(sample_generative_kind(rng, limits.side) for _ in range(n_gen)),
        transforms=tuple(sample_transform_kind(rng) for _ in range(n_tr)),
        discriminative=tuple(sample_discriminative_kind(rng) for _ in range(n_disc)),
        ordering_mode=OrderingMode.TASK_BASIS if rng.coin() else OrderingMode.CLASS_BASIS,
        classwise=rng.coin(),
    )


# -- chain realization -------------------------------------------------------------

def realize_chain(
    record: DatasetRecord,
    structure: TaskStructure,
    palette: Palette,
    keep: set[int],
    rng: RngState,
    t_max: int = DEFAULT_T_MAX,
) -> ImageChain:
    """Compute the image chain of one record under a structure.

    Randomness contract: degradation element i draws from ``rng.child("gen", i)``
    only, so a chain can be re-derived bit-exactly from its stored seed.
    """
    keep = frozenset(keep)
    if not keep:
        raise SamplerError("keep set must be non-empty")
    if not keep <= record.mask.present:
        raise SamplerError(
            f"keep {sorted(keep)} not contained in record classes {sorted(record.mask.present)}"
        )
    if not palette.covers(keep):
        raise SamplerError(f"palette does not cover keep set {sorted(keep)}")
    length = structure.chain_length(len(keep))
    if length > t_max:
        raise SamplerError(
            f"chain length {length} exceeds t_max {t_max} after classwise expansion"
        )

    x = record.image
    images: list[ImageRaster] = []

    # Degradations stack right-to-left: element i corrupts element i+1.
    suffix = x
    degraded: list[ImageRaster] = []
    for i in range(len(structure.generative) - 1, -1, -1):
        suffix = apply_generative(suffix, structure.generative[i], rng.child("gen", i))
        degraded.append(suffix)
    images.extend(reversed(degraded))
    images.append(x)

    # Transforms accumulate on the raw image.
    current = x
    for t in structure.transforms:
        current = apply_transform(current, t)
        images.append(current)

    # Annotations render from the subsampled mask after the full transform.
    base_mask = subsample_classes(record.mask, set(keep))
    for t in structure.transforms:
        base_mask = apply_transform_mask(base_mask, t)
    for slot in chain_layout(structure, sorted(keep))[len(images):]:
        slot_mask = base_mask
        if slot.class_id is not None:
            slot_mask = subsample_classes(base_mask, {slot.class_id})
        images.append(render_discriminative(slot_mask, slot.kind, palette))

    if len(images) != length:
        raise SamplerError(f"internal layout mismatch: {len(images)} != {length}")
    return ImageChain(
        images=tuple(images),
        record_id=record.record_id,
        keep=keep,
        palette=palette,
        seed=rng.seed,
        record=record,
    )


# -- bundle sampling ---------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    n_context_min: int = 1
    n_context_max: int = 2
    image_budget: int = DEFAULT_IMAGE_BUDGET
    limits: StructureLimits = StructureLimits()
    palette_floor: float = task_ops.PALETTE_DISTANCE_FLOOR
    max_attempts: int = 64


def _draw_keep(present, size: int, rng: RngState) -> frozenset[int]:
    return frozenset(rng.choice(sorted(present), size=size, replace=False))


def _keeps_with_cover(records, query_keep, sizes, rng: RngState):
    """Keep sets per context record whose union covers the query keep.

    Pure rejection first; if that does not land, assign each needed class to a
    context that has it and fill remaining slots randomly.
    """
    n = len(records)
    for _ in range(16):
        keeps = [_draw_keep(records[i].mask.present, sizes[i], rng) for i in range(n)]
        if query_keep <= frozenset().union(*keeps):
            return keeps
    assigned: list[set[int]] = [set() for _ in range(n)]
    for cls in sorted(query_keep):
        holders = [i for i in range(n) if cls in records[i].mask.present]
        if not holders:
            return None
        order = rng.shuffled(holders)
        target = next((i for i in order if len(assigned[i]) < sizes[i]), order[0])
        assigned[target].add(cls)
    keeps = []
    for i in range(n):
        chosen = set(assigned[i])
        if len(chosen) > sizes[i]:
            return None
        pool = sorted(records[i].mask.present - chosen)
        extra = sizes[i] - len(chosen)
        if extra > 0:
            chosen |= set(rng.choice(pool, size=extra, replace=False))
        keeps.append(frozenset(chosen))
    if not query_keep <= frozenset().union(*keeps):
        return None
    return keeps


def sample_bundle(
    dataset: list[DatasetRecord],
    rng: RngState,
    config: SamplerConfig = SamplerConfig(),
) -> TaskBundle:
    """Sample one guardrail-satisfying bundle from a dataset.

    One structure and one palette are shared by all chains; context records
    are distinct from the query record and from each other, and their kept
    classes jointly cover the query's kept classes.
    """
    if config.n_context_min < 1 or config.n_context_max < config.n_context_min:
        raise SamplerError(f"bad context range [{config.n_context_min}, {config.n_context_max}]")
    by_dataset: dict[str, list[DatasetRecord]] = {}
    for rec in dataset:
        by_dataset.setdefault(rec.dataset_id, []).append(rec)

    last_reason = "no attempt made"
    for attempt in range(config.max_attempts):
        a_rng = rng.child("attempt", attempt)
        query_rec = a_rng.choice(dataset)
        pool = [r for r in by_dataset[query_rec.dataset_id] if r.record_id != query_rec.record_id]
        n = int(a_rng.integers(config.n_context_min, config.n_context_max + 1))
        if len(pool) < n:
            last_reason = f"dataset {query_rec.dataset_id!r} too small for n_context={n}"
            continue
        context_recs = a_rng.choice(pool, size=n, replace=False)

        structure = sample_structure(a_rng.child("structure"), config.limits)

        if structure.classwise:
            s_cap = min(len(r.mask.present) for r in (query_rec, *context_recs))
            if s_cap < 1:
                last_reason = "a chosen record has no foreground classes"
                continue
            s = int(a_rng.integers(1, s_cap + 1))
            fixed = structure.base_length - len(structure.discriminative)
            n_disc = len(structure.discriminative)
            if n_disc and fixed + n_disc * s > config.limits.t_max:
                s = (config.limits.t_max - fixed) // n_disc  # shrink keep before tasks
                if s < 1:
                    last_reason = "classwise expansion cannot fit t_max"
                    continue
            t = structure.chain_length(s)
            query_size = s
            context_sizes = [s] * n
        else:
            t = structure.base_length
            query_size = int(a_rng.integers(1, len(query_rec.mask.present) + 1))
            context_sizes = [
                int(a_rng.integers(1, len(r.mask.present) + 1)) for r in context_recs
            ]

        if (n + 1) * t > config.image_budget:
            last_reason = f"(n+1)*t = {(n + 1) * t} exceeds budget {config.image_budget}"
            continue

        query_keep = _draw_keep(query_rec.mask.present, query_size, a_rng)
        keeps = _keeps_with_cover(context_recs, query_keep, context_sizes, a_rng)
        if keeps is None:
            last_reason = "context records cannot cover the query classes"
            continue

        all_classes = set().union(query_rec.mask.present, *(r.mask.present for r in context_recs))
        palette = sample_palette(all_classes, a_rng.child("palette"), floor=config.palette_floor)

        context = tuple(
            realize_chain(rec, structure, palette, keeps[i], a_rng.child("chain", i),
                          t_max=config.limits.t_max)
            for i, rec in enumerate(context_recs)
        )
        query_chain = realize_chain(
            query_rec, structure, palette, query_keep, a_rng.child("chain", "query"),
            t_max=config.limits.t_max,
        )
        return TaskBundle(
            context=context, query_chain=query_chain, structure=structure, palette=palette
        )
    raise SamplerError(f"no valid bundle after {config.max_attempts} attempts: {last_reason}")


# -- guardrails --------------------------------------------------------------------

@dataclass(frozen=True)
class GuardrailReport:
    grammar: bool
    shared_structure: bool
    shared_palette: bool
    class_cover: bool
    budget: bool
    composition_spot_check: bool
    messages: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return all((
            self.grammar, self.shared_structure, self.shared_palette,
            self.class_cover, self.budget, self.composition_spot_check,
        ))


def _palette_consistent(bundle: TaskBundle) -> tuple[bool, str]:
    allowed = {bundle.palette.background, *bundle.palette.colors.values()}
    for which, chain in enumerate(bundle.all_chains()):
        layout = chain_layout(bundle.structure, sorted(chain.keep))
        for idx, slot in enumerate(layout):
            if slot.family != "discriminative":
                continue
            px = chain.images[idx].pixels
            seen = {tuple(int(v) for v in c) for c in np.unique(px.reshape(-1, 3), axis=0)}
            stray = seen - allowed
            if stray:
                return False, f"chain {which} position {idx} uses colors outside the palette"
    return True, ""


def check_guardrails(bundle: TaskBundle, image_budget: int = DEFAULT_IMAGE_BUDGET) -> GuardrailReport:
    """Verify every sampling rule on a finished bundle.

    The composition spot check re-derives the query chain from its stored
    seed and requires bit-exact equality, so silent edits to any query/output
    image are caught.
    """
    messages = []

    try:
        grammar = bundle.structure.task_count >= 1
    except Exception:  # pragma: no cover - constructor enforces this
        grammar = False

    t = bundle.chain_len
    shared_structure = all(
        len(c) == bundle.structure.chain_length(len(c.keep)) for c in bundle.all_chains()
    ) and all(len(c) == t for c in bundle.all_chains())
    if not shared_structure:
        messages.append("chain lengths disagree with the shared structure")

    shared_palette = all(c.palette == bundle.palette for c in bundle.all_chains())
    if shared_palette:
        shared_palette, msg = _palette_consistent(bundle)
        if msg:
            messages.append(msg)
    else:
        messages.append("chains carry different palettes")

    covered = frozenset().union(*(c.keep for c in bundle.context)) if bundle.context else frozenset()
    class_cover = bundle.query_chain.keep <= covered
    if not class_cover:
        messages.append(
            f"output classes {sorted(bundle.query_chain.keep - covered)} missing from context"
        )

    budget = bundle.total_images <= image_budget
    if not budget:
        messages.append(f"{bundle.total_images} images exceed budget {image_budget}")

    spot = False
    if bundle.query_chain.record is None:
        messages.append("query chain has no attached record; cannot re-derive")
    else:
        try:
            rederived = realize_chain(
                bundle.query_chain.record,
                bundle.structure,
                bundle.palette,
                set(bundle.query_chain.keep),
                RngState(bundle.query_chain.seed),
                t_max=max(DEFAULT_T_MAX, t),
            )
            spot = all(
                a.same_pixels(b) for a, b in zip(rederived.images, bundle.query_chain.images)
            ) and len(rederived) == len(bundle.query_chain)
        except Exception as exc:
            messages.append(f"re-derivation failed: {exc}")
        if not spot and not messages:
            messages.append("re-derived query chain differs bit-wise")

    return GuardrailReport(
        grammar=grammar,
        shared_structure=shared_structure,
        shared_palette=shared_palette,
        class_cover=class_cover,
        budget=budget,
        composition_spot_check=spot,
        messages=tuple(messages),
    )


# -- serialization -----------------------------------------------------------------

def kind_to_dict(kind) -> dict:
    if isinstance(kind, TransformKind):
        return {"kind": "transform", "name": kind.value}
    name = type(kind).__name__.lower()
    payload: dict = {"kind": name}
    if isinstance(kind, SuperRes):
        payload["target_side"] = kind.target_side
    elif isinstance(kind, Inpaint):
        payload["rects"] = [list(r) for r in kind.rects]
    elif isinstance(kind, Noise):
        payload.update(mean=kind.mean, sigma=kind.sigma)
    elif isinstance(kind, ColorJitter):
        payload.update(hue=kind.hue, saturation=kind.saturation, brightness=kind.brightness)
    elif isinstance(kind, Brightness):
        payload["factor"] = kind.factor
    elif isinstance(kind, (Edges, Boxes, Skeleton, Points)):
        payload["width"] = kind.width
    return payload


def kind_from_dict(payload: dict):
    name = payload["kind"]
    if name == "transform":
        return TransformKind(payload["name"])
    if name == "superres":
        return SuperRes(target_side=payload["target_side"])
    if name == "inpaint":
        return Inpaint(rects=tuple(tuple(r) for r in payload["rects"]))
    if name == "noise":
        return Noise(mean=payload["mean"], sigma=payload["sigma"])
    if name == "colorjitter":
        return ColorJitter(
            hue=payload["hue"], saturation=payload["saturation"], brightness=payload["brightness"]
        )
    if name == "invert":
        return Invert()
    if name == "equalize":
        return Equalize()
    if name == "brightness":
        return Brightness(factor=payload["factor"])
    simple = {"segmentation": Segmentation, "edges": Edges, "boxes": Boxes,
              "skeleton": Skeleton, "points": Points}
    if name in simple:
        cls = simple[name]
        return cls() if name == "segmentation" else cls(width=payload["width"])
    raise ValidationError(f"unknown kind payload {payload!r}")


def structure_to_dict(structure: TaskStructure) -> dict:
    return {
        "generative": [kind_to_dict(k) for k in structure.generative],
        "transforms": [kind_to_dict(k) for k in structure.transforms],
        "discriminative": [kind_to_dict(k) for k in structure.discriminative],
        "ordering_mode": structure.ordering_mode.value,
        "classwise": structure.classwise,
    }


def structure_from_dict(payload: dict) -> TaskStructure:
    return TaskStructure(
        generative=tuple(kind_from_dict(k) for k in payload["generative"]),
        transforms=tuple(kind_from_dict(k) for k in payload["transforms"]),
        discriminative=tuple(kind_from_dict(k) for k in payload["discriminative"]),
        ordering_mode=OrderingMode(payload["ordering_mode"]),
        classwise=payload["classwise"],
    )


def save_bundle(bundle: TaskBundle, out_dir: str | Path) -> Path:
    """Write one image file per chain element plus a JSON descriptor."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chain_meta = []
    for i, chain in enumerate(bundle.all_chains()):
        prefix = f"ctx{i}" if i < bundle.n_context else "qo"
        files = []
        for j, img in enumerate(chain.images):
            rel = f"{prefix}_{j:02d}.png"
            Image.fromarray(img.pixels, mode="RGB").save(out_dir / rel)
            files.append(rel)
        chain_meta.append({
            "role": "context" if i < bundle.n_context else "query_output",
            "record_id": chain.record_id,
            "keep": sorted(chain.keep),
            "seed": chain.seed,
            "files": files,
        })
    descriptor = {
        "structure": structure_to_dict(bundle.structure),
        "palette": {
            "background": list(bundle.palette.background),
            "colors": {str(cid): list(rgb) for cid, rgb in sorted(bundle.palette.colors.items())},
        },
        "chains": chain_meta,
    }
    path = out_dir / "bundle.json"
    path.write_text(json.dumps(descriptor, indent=2, sort_keys=True) + "\n")
    return path


def load_bundle(bundle_dir: str | Path,
                records_by_id: dict[str, DatasetRecord] | None = None) -> TaskBundle:
    """Reload a serialized bundle; attach records (for guardrail re-derivation)
    when a record index is supplied."""
    bundle_dir = Path(bundle_dir)
    descriptor = json.loads((bundle_dir / "bundle.json").read_text())
    structure = structure_from_dict(descriptor["structure"])
    pal = descriptor["palette"]
    palette = Palette(
        colors={int(cid): tuple(rgb) for cid, rgb in pal["colors"].items()},
        background=tuple(pal["background"]),
    )
    chains = []
    for meta in descriptor["chains"]:
        images = tuple(
            ImageRaster(np.asarray(Image.open(bundle_dir / rel).convert("RGB"), dtype=np.uint8))
            for rel in meta["files"]
        )
        chains.append(ImageChain(
            images=images,
            record_id=meta["record_id"],
            keep=frozenset(meta["keep"]),
            palette=palette,
            seed=meta["seed"],
            record=(records_by_id or {}).get(meta["record_id"]),
        ))
    return TaskBundle(
        context=tuple(chains[:-1]), query_chain=chains[-1],
        structure=structure, palette=palette,
    )
