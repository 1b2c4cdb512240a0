"""Command-line front door: fixtures, enrichment previews, bundle sampling,
codebook training, tokenization, masking, and evaluation runs.

Every subcommand is reproducible under (config, seed) and writes its
effective configuration beside its outputs. Exit codes: 0 success, 1
validation or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import codebook as cb_mod
from . import harness, masking, sampler, task_ops
from .core import generate_fixture, load_dataset, save_dataset
from .errors import ConfigError, TaskforgeError
from .rng import RngState

CONFIG_ENV_VAR = "TASKFORGE_CONFIG"
HARD_MAX_IMAGE_BUDGET = 30


@dataclass
class RunConfig:
    seed: int = 0
    canonical_side: int = 200
    # sampler
    image_budget: int = 30
    t_max: int = 15
    max_per_family: int = 4
    n_context_min: int = 1
    n_context_max: int = 2
    palette_floor: float = 48.0
    # codec
    codebook_n: int = 512
    patch_side: int = 16
    grid_rows: int = 12
    grid_cols: int = 12
    train_iterations: int = 20
    train_draws: int = 512
    # masking
    mask_strategy: str = "sequence"
    mask_p: float = 0.15
    mask_n_images: int = 5
    k_special: int = 1
    context_window: int = 4500
    # balancing
    task_balancing: bool = True
    dataset_balancing: bool = True
    recolor: bool = True
    upper_bound_samples: int = 200

    def validate(self):
        def bad(field_name, message):
            raise ConfigError(f"{field_name}: {message}")

        if not 2 <= self.image_budget <= HARD_MAX_IMAGE_BUDGET:
            bad("image_budget", f"must be in [2, {HARD_MAX_IMAGE_BUDGET}], got {self.image_budget}")
        if not 2 <= self.t_max <= 15:
            bad("t_max", f"must be in [2, 15], got {self.t_max}")
        if self.max_per_family < 1:
            bad("max_per_family", "must be >= 1")
        if self.n_context_min < 1 or self.n_context_max < self.n_context_min:
            bad("n_context", f"bad range [{self.n_context_min}, {self.n_context_max}]")
        if self.canonical_side < 16:
            bad("canonical_side", "must be >= 16")
        if self.codebook_n < 1:
            bad("codebook_n", "must be >= 1")
        if self.patch_side < 1 or self.grid_rows < 1 or self.grid_cols < 1:
            bad("patch_side/grid", "must be positive")
        if not 0.0 < self.mask_p < 1.0:
            bad("mask_p", f"must be in (0, 1), got {self.mask_p}")
        if self.mask_n_images < 1:
            bad("mask_n_images", "must be >= 1")
        if self.k_special not in (1, 2, 4):
            bad("k_special", f"must be one of 1, 2, 4, got {self.k_special}")
        if self.mask_strategy not in ("token", "image", "sequence", "mixed"):
            bad("mask_strategy", f"unknown strategy {self.mask_strategy!r}")
        q = self.grid_rows * self.grid_cols
        worst = self.image_budget * (q + self.k_special) + self.n_context_max * self.k_special
        if worst > self.context_window:
            bad("image_budget", f"{worst} tokens exceed the context window {self.context_window}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def load_config(path: str | Path | None, overrides: dict) -> RunConfig:
    """Defaults, then a JSON config file, then explicit flags; flags win."""
    values = {}
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: file not found: {p}")
        loaded = json.loads(p.read_text())
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(loaded) - known
        if unknown:
            raise ConfigError(f"config: unknown fields {sorted(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    config = RunConfig(**values)
    config.validate()
    return config


def _write_effective_config(config: RunConfig, out: Path):
    target = out / "effective_config.json" if out.is_dir() else out.with_suffix(out.suffix + ".config.json")
    target.write_text(config.to_json())


def _parse_task_labels(spec: str) -> list:
    kinds = []
    for label in (s.strip() for s in spec.split(",") if s.strip()):
        if label == "segmentation":
            kinds.append(task_ops.Segmentation())
            continue
        name, _, w = label.partition("_w")
        table = {"edges": task_ops.Edges, "boxes": task_ops.Boxes,
                 "skeleton": task_ops.Skeleton, "points": task_ops.Points}
        if name not in table or not w.isdigit():
            raise ConfigError(f"tasks: cannot parse task label {label!r}")
        kinds.append(table[name](int(w)))
    if not kinds:
        raise ConfigError("tasks: no task labels given")
    return kinds


def _sampler_config(config: RunConfig) -> sampler.SamplerConfig:
    return sampler.SamplerConfig(
        n_context_min=config.n_context_min,
        n_context_max=config.n_context_max,
        image_budget=config.image_budget,
        limits=sampler.StructureLimits(
            t_max=config.t_max,
            max_per_family=config.max_per_family,
            side=config.canonical_side,
        ),
        palette_floor=config.palette_floor,
    )


def _load_codec(spec: str, config: RunConfig, image_side: int):
    if spec == "identity":
        grid = (config.grid_rows, config.grid_cols)
        return cb_mod.make_identity_codebook(image_side, grid)
    return cb_mod.load_codebook(spec)


# -- subcommands -------------------------------------------------------------------

def cmd_fixtures(args, config: RunConfig) -> int:
    out = Path(args.out)
    side = args.side or config.canonical_side
    records = generate_fixture(
        n_records=args.n_records, n_classes=args.n_classes, side=side,
        rng=RngState(config.seed).child("fixtures"),
    )
    save_dataset(records, out)
    _write_effective_config(config, out)
    print(f"wrote {len(records)} records to {out}")
    return 0


def cmd_enrich(args, config: RunConfig) -> int:
    records = load_dataset(args.dataset, canonical_side=config.canonical_side)
    match = [r for r in records if r.record_id == args.record]
    if not match:
        raise ConfigError(f"record: {args.record!r} not found in {args.dataset}")
    rec = match[0]
    rng = RngState(config.seed).child("enrich", rec.record_id)
    palette = task_ops.sample_palette(
        set(rec.mask.present) or {1}, rng.child("palette"), floor=config.palette_floor
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variants = task_ops.enrichment_variants(rec.image, rec.mask, palette, rng)
    for name, image in variants:
        Image.fromarray(image.pixels, mode="RGB").save(out / f"{name}.png")
    _write_effective_config(config, out)
    print(f"wrote {len(variants)} task variants to {out}")
    return 0


def cmd_sample(args, config: RunConfig) -> int:
    records = load_dataset(args.dataset, canonical_side=config.canonical_side)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scfg = _sampler_config(config)
    master = RngState(config.seed).child("sample")
    for i in range(args.n_bundles):
        bundle = sampler.sample_bundle(records, master.child("bundle", i), scfg)
        sampler.save_bundle(bundle, out / f"bundle_{i:04d}")
    _write_effective_config(config, out)
    print(f"wrote {args.n_bundles} bundles to {out}")
    return 0


def cmd_train_codebook(args, config: RunConfig) -> int:
    datasets = [load_dataset(m, canonical_side=config.canonical_side) for m in args.dataset]
    tasks = _parse_task_labels(args.tasks)
    balance = cb_mod.BalanceConfig(
        task_balancing=config.task_balancing,
        dataset_balancing=config.dataset_balancing,
        recolor=config.recolor,
    )
    rng = RngState(config.seed).child("train-codebook")
    stream = cb_mod.balanced_stream(
        datasets, tasks, balance, rng, n_draws=config.train_draws,
        palette_floor=config.palette_floor,
    )
    trained = cb_mod.train_codebook(stream, cb_mod.TrainConfig(
        N=config.codebook_n, patch_side=config.patch_side,
        grid=(config.grid_rows, config.grid_cols),
        iterations=config.train_iterations, seed=rng.child("kmeans").seed,
    ))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cb_mod.save_codebook(trained, out)
    _write_effective_config(config, out)
    print(f"trained codebook N={trained.N} q={trained.q} -> {out}")
    return 0


def cmd_tokenize(args, config: RunConfig) -> int:
    bundles_dir = Path(args.bundles)
    bundle_dirs = sorted(p for p in bundles_dir.iterdir() if (p / "bundle.json").is_file())
    if not bundle_dirs:
        raise ConfigError(f"bundles: no bundles under {bundles_dir}")
    first = sampler.load_bundle(bundle_dirs[0])
    codec = _load_codec(args.codebook, config, first.query.height)
    sequences = []
    for bdir in bundle_dirs:
        bundle = sampler.load_bundle(bdir)
        sequences.append(masking.assemble_tokens(
            bundle, codec, k=config.k_special, context_window=config.context_window,
        ))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    masking.save_token_file(out, sequences)
    _write_effective_config(config, out)
    print(f"tokenized {len(sequences)} bundles -> {out}")
    return 0


def cmd_mask(args, config: RunConfig) -> int:
    sequences, _ = masking.load_token_file(args.tokens)
    strategy = {
        "token": masking.TokenMasking(config.mask_p),
        "image": masking.ImageTokenMasking(config.mask_n_images),
        "sequence": masking.SequenceTokenMasking(),
        "mixed": masking.MixedMasking(config.mask_p, min(config.mask_n_images, 3)),
    }[config.mask_strategy]
    rng = RngState(config.seed).child("mask")
    masked = [
        masking.apply_masking(seq, strategy, rng.child("item", i))
        for i, seq in enumerate(sequences)
    ]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    masking.save_token_file(out, sequences, masked)
    _write_effective_config(config, out)
    total = sum(len(m.masked_positions) for m in masked)
    print(f"masked {len(masked)} sequences ({total} positions) -> {out}")
    return 0


def cmd_eval_codebook(args, config: RunConfig) -> int:
    records = load_dataset(args.dataset, canonical_side=config.canonical_side)
    codec = _load_codec(args.codebook, config, records[0].image.height)
    tasks = _parse_task_labels(args.tasks)
    protocols = {
        "fixed": [harness.ColorProtocol.FIXED],
        "random": [harness.ColorProtocol.RANDOM],
        "both": [harness.ColorProtocol.FIXED, harness.ColorProtocol.RANDOM],
    }[args.protocol]
    rows = []
    descriptor = harness.describe_codebook(codec)
    for protocol in protocols:
        if hasattr(codec, "reset"):
            codec.reset()
        report = harness.codebook_upper_bound(
            codec, records, tasks, protocol,
            RngState(config.seed).child("eval-codebook"),
            n_samples=config.upper_bound_samples, palette_floor=config.palette_floor,
        )
        rows.extend(report.rows)
    combined = harness.UpperBoundReport(rows=tuple(rows), codebook_descriptor=descriptor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "upper_bounds.json").write_text(combined.to_json() + "\n")
    (out / "upper_bounds.txt").write_text(combined.to_text() + "\n")
    _write_effective_config(config, out)
    print(combined.to_text())
    return 0


def cmd_eval_preds(args, config: RunConfig) -> int:
    eval_config = harness.EvalConfig(
        bundles_dir=Path(args.bundles),
        out_dir=Path(args.out),
        predictor=args.predictor,
        codebook_path=Path(args.codebook) if args.codebook else None,
        seed=config.seed,
    )
    paths = harness.run_eval(eval_config)
    _write_effective_config(config, Path(args.out))
    print(f"wrote {', '.join(str(p) for p in paths)}")
    return 0


def cmd_preview(args, config: RunConfig) -> int:
    bundle = sampler.load_bundle(args.bundle)
    side = bundle.query.height
    gap = 3
    rows = []
    for chain in bundle.all_chains():
        strip = np.full((side, len(chain) * (side + gap) - gap, 3), 230, dtype=np.uint8)
        for j, img in enumerate(chain.images):
            x = j * (side + gap)
            strip[:, x:x + side] = img.pixels
        rows.append(strip)
    width = max(r.shape[1] for r in rows)
    canvas = np.full((len(rows) * (side + gap) - gap, width, 3), 230, dtype=np.uint8)
    for i, r in enumerate(rows):
        y = i * (side + gap)
        canvas[y:y + side, :r.shape[1]] = r
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas, mode="RGB").save(out)
    print(f"wrote preview {out}")
    return 0


# -- argument wiring ----------------------------------------------------------------

_CONFIG_FLAGS = [
    ("--seed", int, "seed"),
    ("--canonical-side", int, "canonical_side"),
    ("--budget", int, "image_budget"),
    ("--t-max", int, "t_max"),
    ("--max-per-family", int, "max_per_family"),
    ("--n-context-min", int, "n_context_min"),
    ("--n-context-max", int, "n_context_max"),
    ("--palette-floor", float, "palette_floor"),
    ("--codebook-n", int, "codebook_n"),
    ("--patch-side", int, "patch_side"),
    ("--grid-rows", int, "grid_rows"),
    ("--grid-cols", int, "grid_cols"),
    ("--train-iterations", int, "train_iterations"),
    ("--train-draws", int, "train_draws"),
    ("--mask-strategy", str, "mask_strategy"),
    ("--mask-p", float, "mask_p"),
    ("--mask-n-images", int, "mask_n_images"),
    ("--k", int, "k_special"),
    ("--context-window", int, "context_window"),
    ("--upper-bound-samples", int, "upper_bound_samples"),
]

_BOOL_FLAGS = [
    ("task-balancing", "task_balancing"),
    ("dataset-balancing", "dataset_balancing"),
    ("recolor", "recolor"),
]


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("--config", default=None, help=f"JSON config file (or ${CONFIG_ENV_VAR})")
    for flag, typ, dest in _CONFIG_FLAGS:
        sub.add_argument(flag, type=typ, dest=dest, default=None)
    for flag, dest in _BOOL_FLAGS:
        group = sub.add_mutually_exclusive_group()
        group.add_argument(f"--{flag}", dest=dest, action="store_true", default=None)
        group.add_argument(f"--no-{flag}", dest=dest, action="store_false", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskforge", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("fixtures", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-records", type=int, default=12)
    p.add_argument("--n-classes", type=int, default=3)
    p.add_argument("--side", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_fixtures)

    p = subs.add_parser("enrich", help="render every task variant of one record")
    p.add_argument("--dataset", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_enrich)

    p = subs.add_parser("sample", help="sample guardrailed task bundles")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-bundles", type=int, default=10)
    _add_common(p)
    p.set_defaults(func=cmd_sample)

    p = subs.add_parser("train-codebook", help="train the k-means patch codebook")
    p.add_argument("--dataset", required=True, action="append")
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", default="segmentation,edges_w1,boxes_w1")
    _add_common(p)
    p.set_defaults(func=cmd_train_codebook)

    p = subs.add_parser("tokenize", help="turn bundles into token sequences")
    p.add_argument("--bundles", required=True)
    p.add_argument("--codebook", required=True, help="TFCB path or 'identity'")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_tokenize)

    p = subs.add_parser("mask", help="apply a masking objective to token files")
    p.add_argument("--tokens", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_mask)

    p = subs.add_parser("eval-codebook", help="codebook task-recovery upper bounds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--tasks", default="segmentation,edges_w1,boxes_w1,skeleton_w1,points_w1")
    p.add_argument("--protocol", choices=["fixed", "random", "both"], default="both")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval_codebook)

    p = subs.add_parser("eval-preds", help="evaluate a predictor over bundles")
    p.add_argument("--bundles", required=True)
    p.add_argument("--predictor", choices=["copy", "oracle", "roundtrip"], default="copy")
    p.add_argument("--codebook", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval_preds)

    p = subs.add_parser("preview", help="render a bundle as an image strip")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_preview)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    overrides = {
        dest: getattr(args, dest, None)
        for _, _, dest in _CONFIG_FLAGS
    }
    overrides.update({dest: getattr(args, dest, None) for _, dest in _BOOL_FLAGS})
    try:
        config = load_config(args.config, overrides)
        return args.func(args, config)
    except TaskforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
