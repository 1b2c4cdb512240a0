"""Token sequence assembly, masking objectives, and training-pair emission.

A bundle tokenizes to ``c_0 ... c_{n-1} Q O`` with k image-end markers after
every image and k context-end markers after each completed context chain,
giving the exact length law I*(q+k) + n*k. Masking corrupts content positions
only; special markers are never touched.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Union

import numpy as np

from .core import ImageRaster, resize_image, resize_mask
from .errors import CodecError, ParameterError
from .rng import RngState
from .sampler import TaskBundle, chain_layout

TFTS_MAGIC = b"TFTS"
TFTS_VERSION = 1
CONTEXT_WINDOW = 4500


class BudgetWarning(UserWarning):
    """Assembled sequence exceeds the configured context window."""


class Role(Enum):
    CONTEXT = 0
    QUERY = 1
    OUTPUT = 2


@dataclass(frozen=True)
class ImageEntry:
    """Bookkeeping for one image inside a flat token stream."""

    role: Role
    chain_index: int  # context chain index; -1 for the query/output chain
    position: int  # index within its chain
    span: tuple[int, int]  # content token range [start, end)
    ends_context: bool  # k context-end markers follow this image's markers


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Flat token ids plus the role map needed to interpret them.

    Content ids live in [0, N); id N marks an image end and id N+1 a context
    chain end, each repeated k times.
    """

    ids: np.ndarray
    images: tuple[ImageEntry, ...]
    N: int
    q: int
    k: int
    n_context: int
    exceeds_window: bool = False

    @property
    def image_end_id(self) -> int:
        return self.N

    @property
    def context_end_id(self) -> int:
        return self.N + 1

    def __len__(self) -> int:
        return len(self.ids)

    def content_positions(self) -> np.ndarray:
        out = np.zeros(len(self.ids), dtype=bool)
        for entry in self.images:
            out[entry.span[0]:entry.span[1]] = True
        return np.flatnonzero(out)

    def positions_of(self, role: Role) -> np.ndarray:
        spans = [e.span for e in self.images if e.role is role]
        if not spans:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([np.arange(a, b) for a, b in spans])


def _to_codec_side(image: ImageRaster, side: int, discriminative: bool) -> ImageRaster:
    if image.height == side and image.width == side:
        return image
    if discriminative:
        # nearest keeps annotation colors exact palette members
        stacked = np.stack(
            [resize_mask(image.pixels[:, :, c], side) for c in range(3)], axis=-1
        )
        return ImageRaster(stacked)
    return ImageRaster(resize_image(image.pixels, side))


def assemble_tokens(
    bundle: TaskBundle,
    codebook,
    k: int = 1,
    context_window: int = CONTEXT_WINDOW,
) -> TokenSequence:
    """Tokenize a bundle into one flat sequence with special markers.

    Images whose side differs from the codec's are resized at the boundary
    (nearest-neighbor for annotation renderings, bilinear otherwise).
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    n = bundle.n_context
    i_end = codebook.N
    c_end = codebook.N + 1

    ids: list[np.ndarray] = []
    entries: list[ImageEntry] = []
    cursor = 0

    def push(image: ImageRaster, role: Role, chain_index: int, position: int,
             discriminative: bool, ends_context: bool):
        nonlocal cursor
        tokens = codebook.encode(_to_codec_side(image, codebook.side, discriminative))
        ids.append(np.asarray(tokens, dtype=np.int64))
        entries.append(ImageEntry(
            role=role, chain_index=chain_index, position=position,
            span=(cursor, cursor + codebook.q), ends_context=ends_context,
        ))
        cursor += codebook.q
        ids.append(np.full(k, i_end, dtype=np.int64))
        cursor += k
        if ends_context:
            ids.append(np.full(k, c_end, dtype=np.int64))
            cursor += k

    for ci, chain in enumerate(bundle.context):
        layout = chain_layout(bundle.structure, sorted(chain.keep))
        last = len(chain.images) - 1
        for pos, (slot, image) in enumerate(zip(layout, chain.images)):
            push(image, Role.CONTEXT, ci, pos,
                 slot.family == "discriminative", ends_context=pos == last)

    q_layout = chain_layout(bundle.structure, sorted(bundle.query_chain.keep))
    for pos, (slot, image) in enumerate(zip(q_layout, bundle.query_chain.images)):
        role = Role.QUERY if pos == 0 else Role.OUTPUT
        push(image, role, -1, pos, slot.family == "discriminative", ends_context=False)

    flat = np.concatenate(ids)
    total_images = bundle.total_images
    expected = total_images * (codebook.q + k) + n * k
    if len(flat) != expected:
        raise CodecError(f"length law violated: {len(flat)} != {expected}")
    exceeds = len(flat) > context_window
    if exceeds:
        warnings.warn(
            f"sequence length {len(flat)} exceeds context window {context_window}",
            BudgetWarning,
            stacklevel=2,
        )
    return TokenSequence(
        ids=flat, images=tuple(entries), N=codebook.N, q=codebook.q, k=k,
        n_context=n, exceeds_window=exceeds,
    )


# -- masking strategies ---------------------------------------------------------

@dataclass(frozen=True)
class TokenMasking:
    p: float = 0.15

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ParameterError("masking probability must be in (0, 1)")


@dataclass(frozen=True)
class ImageTokenMasking:
    n_images: int = 5

    def __post_init__(self):
        if self.n_images < 1:
            raise ParameterError("n_images must be >= 1")


@dataclass(frozen=True)
class SequenceTokenMasking:
    pass


@dataclass(frozen=True)
class MixedMasking:
    p: float = 0.15
    n_images: int = 3

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ParameterError("masking probability must be in (0, 1)")
        if self.n_images < 1:
            raise ParameterError("n_images must be >= 1")


MaskingStrategy = Union[TokenMasking, ImageTokenMasking, SequenceTokenMasking, MixedMasking]


@dataclass(frozen=True, eq=False)
class MaskedSequence:
    corrupted: np.ndarray
    masked_positions: np.ndarray  # ascending
    true_ids: np.ndarray
    strategy: str


def _token_positions(seq: TokenSequence, p: float, rng: RngState) -> np.ndarray:
    content = seq.content_positions()
    return content[rng.random(size=len(content)) < p]


def _image_positions(seq: TokenSequence, n_images: int, rng: RngState) -> np.ndarray:
    total = len(seq.images)
    if n_images > total:
        raise ParameterError(f"cannot mask {n_images} images out of {total}")
    picks = rng.choice(range(total), size=n_images, replace=False)
    spans = [seq.images[i].span for i in sorted(picks)]
    return np.concatenate([np.arange(a, b) for a, b in spans])


def apply_masking(seq: TokenSequence, strategy: MaskingStrategy, rng: RngState) -> MaskedSequence:
    """Corrupt content tokens per the strategy; replacements are uniform
    random content ids, so a corrupted position may collide with its true id."""
    if isinstance(strategy, TokenMasking):
        positions = _token_positions(seq, strategy.p, rng)
        name = f"token(p={strategy.p})"
    elif isinstance(strategy, ImageTokenMasking):
        positions = _image_positions(seq, strategy.n_images, rng)
        name = f"image_token(n={strategy.n_images})"
    elif isinstance(strategy, SequenceTokenMasking):
        positions = seq.positions_of(Role.OUTPUT)
        name = "sequence_token"
    elif isinstance(strategy, MixedMasking):
        parts = [
            _token_positions(seq, strategy.p, rng),
            _image_positions(seq, strategy.n_images, rng),
            seq.positions_of(Role.OUTPUT),
        ]
        positions = np.unique(np.concatenate(parts))
        name = f"mixed(p={strategy.p}, n={strategy.n_images})"
    else:
        raise ParameterError(f"unknown masking strategy {strategy!r}")

    positions = np.sort(np.asarray(positions, dtype=np.int64))
    corrupted = seq.ids.copy()
    true_ids = seq.ids[positions].copy()
    corrupted[positions] = rng.integers(0, seq.N, size=len(positions))
    return MaskedSequence(
        corrupted=corrupted, masked_positions=positions, true_ids=true_ids, strategy=name
    )


@dataclass(frozen=True, eq=False)
class TrainingPair:
    input_ids: np.ndarray
    targets: tuple[tuple[int, int], ...]  # (position, true id), ascending


def split_targets(masked: MaskedSequence) -> TrainingPair:
    """Model input plus the (position, true id) supervision list."""
    order = np.argsort(masked.masked_positions, kind="stable")
    targets = tuple(
        (int(masked.masked_positions[i]), int(masked.true_ids[i])) for i in order
    )
    return TrainingPair(input_ids=masked.corrupted, targets=targets)


def patch_back(masked: MaskedSequence) -> np.ndarray:
    """Restore true ids at masked positions; inverse of the corruption."""
    out = masked.corrupted.copy()
    out[masked.masked_positions] = masked.true_ids
    return out


# -- token file format -------------------------------------------------------------

_ROLE_CODE = {Role.CONTEXT: 0, Role.QUERY: 1, Role.OUTPUT: 2}
_CODE_ROLE = {v: k for k, v in _ROLE_CODE.items()}


def save_token_file(
    path: str | Path,
    sequences: list[TokenSequence],
    masked: list[MaskedSequence] | None = None,
) -> Path:
    """Write the TFTS stream: header, then per record a role map, the token
    ids as little-endian int32, and (for masked files) a target block."""
    if not sequences:
        raise ParameterError("no sequences to write")
    if masked is not None and len(masked) != len(sequences):
        raise ParameterError("masked list must align with sequences")
    first = sequences[0]
    flags = 1 if masked is not None else 0
    chunks = [struct.pack(
        "<4sIIIIIIII", TFTS_MAGIC, TFTS_VERSION, flags, first.N + 2, first.q, first.k,
        first.N, first.N + 1, len(sequences),
    )]
    for idx, seq in enumerate(sequences):
        if (seq.N, seq.q, seq.k) != (first.N, first.q, first.k):
            raise ParameterError("all sequences in one file must share N, q, k")
        chunks.append(struct.pack("<II", len(seq.images), seq.n_context))
        for e in seq.images:
            chunks.append(struct.pack(
                "<BiIB", _ROLE_CODE[e.role], e.chain_index, e.position, int(e.ends_context)
            ))
        # masked files store the corrupted (training input) ids; the original
        # sequence is recovered by patching the targets back in
        ids = masked[idx].corrupted if masked is not None else seq.ids
        chunks.append(struct.pack("<I", len(ids)))
        chunks.append(ids.astype("<i4").tobytes())
        if masked is not None:
            m = masked[idx]
            chunks.append(struct.pack("<I", len(m.masked_positions)))
            for pos, tid in zip(m.masked_positions, m.true_ids):
                chunks.append(struct.pack("<II", int(pos), int(tid)))
    path = Path(path)
    path.write_bytes(b"".join(chunks))
    return path


def load_token_file(path: str | Path) -> tuple[list[TokenSequence], list[MaskedSequence] | None]:
    raw = Path(path).read_bytes()
    if len(raw) < 36 or raw[:4] != TFTS_MAGIC:
        raise CodecError(f"not a TFTS token file: {path}")
    _, version, flags, n_total, q, k, i_end, c_end, count = struct.unpack("<4sIIIIIIII", raw[:36])
    if version != TFTS_VERSION:
        raise CodecError(f"unsupported TFTS version {version}")
    n_vocab = n_total - 2
    if (i_end, c_end) != (n_vocab, n_vocab + 1):
        raise CodecError("special token ids disagree with vocabulary size")
    offset = 36
    sequences: list[TokenSequence] = []
    masked: list[MaskedSequence] | None = [] if flags & 1 else None
    for _ in range(count):
        n_images, n_context = struct.unpack_from("<II", raw, offset)
        offset += 8
        entries = []
        cursor = 0
        for _ in range(n_images):
            role_code, chain_index, position, ends = struct.unpack_from("<BiIB", raw, offset)
            offset += 10
            entries.append(ImageEntry(
                role=_CODE_ROLE[role_code], chain_index=chain_index, position=position,
                span=(cursor, cursor + q), ends_context=bool(ends),
            ))
            cursor += q + k + (k if ends else 0)
        (seq_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        ids = np.frombuffer(raw, dtype="<i4", count=seq_len, offset=offset).astype(np.int64)
        offset += seq_len * 4
        if masked is not None:
            (n_targets,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            pairs = [struct.unpack_from("<II", raw, offset + 8 * i) for i in range(n_targets)]
            offset += 8 * n_targets
            m = MaskedSequence(
                corrupted=ids,
                masked_positions=np.array([p for p, _ in pairs], dtype=np.int64),
                true_ids=np.array([t for _, t in pairs], dtype=np.int64),
                strategy="loaded",
            )
            masked.append(m)
            ids = patch_back(m)  # the uncorrupted sequence
        seq = TokenSequence(
            ids=ids, images=tuple(entries), N=n_vocab, q=q, k=k, n_context=n_context,
            exceeds_window=seq_len > CONTEXT_WINDOW,
        )
        sequences.append(seq)
    return sequences, masked
