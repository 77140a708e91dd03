"""Versioned little-endian model checkpoints ("HFL1").

Layout::

    b"HFL1"
    u32 descriptor length, descriptor bytes (ASCII)
    u32 layer count, u32 per layer width
    weights then biases, row-major, each value's bit pattern in
        ceil(total_bits / 8) bytes
    optional sections: 1-byte tag, u32 body length, body
        'M' packed retention masks (row-major, LSB first), one per matrix
        'C' codebooks: per matrix u32 k (0 = none), k centroid patterns,
            ceil(log2 k)-bit indices of retained weights, packed LSB first
        'Q' affine weights: per matrix u8 bits (0 = none), f64 scale,
            u32 zero point, codes of retained weights in ceil(bits/8) bytes
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .compress import Codebook, CompressedState
from .kernels import from_bits, to_bits
from .mlp import Matrix, MlpModel
from .numfmt import ScalarFormat, make_format

MAGIC = b"HFL1"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class CompressionSections:
    masks: tuple[np.ndarray, ...] | None = None
    codebooks: tuple[Codebook | None, ...] | None = None
    affine: tuple[ScalarFormat | None, ...] | None = None


def _pack_values(values, fmt: ScalarFormat) -> bytes:
    bits = to_bits(np.asarray(values).ravel(), fmt)
    n = fmt.nbytes
    raw = bits.astype("<u8").view(np.uint8).reshape(-1, 8)[:, :n]
    return raw.tobytes()


def _unpack_values(buf: bytes, count: int, fmt: ScalarFormat) -> np.ndarray:
    n = fmt.nbytes
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(count, n)
    wide = np.zeros((count, 8), dtype=np.uint8)
    wide[:, :n] = raw
    return from_bits(wide.view("<u8").ravel(), fmt)


def _pack_uint(values, width_bits: int) -> bytes:
    values = np.asarray(values, dtype=np.uint64)
    if width_bits == 0 or values.size == 0:
        return b""
    bits = ((values[:, None] >> np.arange(width_bits, dtype=np.uint64)) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def _unpack_uint(buf: bytes, count: int, width_bits: int) -> np.ndarray:
    if width_bits == 0 or count == 0:
        return np.zeros(count, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[: count * width_bits]
    weights = np.left_shift(np.uint64(1), np.arange(width_bits, dtype=np.uint64))
    return (bits.reshape(count, width_bits).astype(np.uint64) * weights).sum(axis=1).astype(np.int64)


def _index_bits(k: int) -> int:
    return math.ceil(math.log2(k)) if k > 1 else 0


def _section(tag: bytes, body: bytes) -> bytes:
    return tag + struct.pack("<I", len(body)) + body


def dumps(model: MlpModel, state: CompressedState | None = None) -> bytes:
    fmt = model.fmt
    desc = fmt.descriptor.encode("ascii")
    out = [MAGIC, struct.pack("<I", len(desc)), desc, struct.pack(f"<I{len(model.layer_dims)}I", len(model.layer_dims), *model.layer_dims)]
    for w in model.weights:
        out.append(_pack_values(w.as_float(), fmt) if w.fmt != fmt else _pack_values(w.values, fmt))
    for b in model.biases:
        out.append(_pack_values(b.values, fmt))
    if state is not None:
        if state.pruned:
            out.append(_section(b"M", b"".join(np.packbits(m.ravel(), bitorder="little").tobytes() for m in state.masks)))
        if any(b is not None for b in state.codebooks):
            body = []
            for mask, book in zip(state.masks, state.codebooks):
                if book is None:
                    body.append(struct.pack("<I", 0))
                    continue
                body += [struct.pack("<I", book.k), _pack_values(book.centroids, fmt)]
                body.append(_pack_uint(book.index[mask], _index_bits(book.k)))
            out.append(_section(b"C", b"".join(body)))
        if any(a is not None for a in state.affine):
            body = []
            for w, mask, afmt in zip(model.weights, state.masks, state.affine):
                if afmt is None:
                    body.append(struct.pack("<B", 0))
                    continue
                codes = to_bits(w.values[mask], afmt)
                body.append(struct.pack("<BdI", afmt.bit_width, afmt.scale, afmt.zero_point))
                nb = afmt.nbytes
                body.append(codes.astype("<u8").view(np.uint8).reshape(-1, 8)[:, :nb].tobytes())
            out.append(_section(b"Q", b"".join(body)))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def loads(buf: bytes) -> tuple[MlpModel, CompressionSections]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an HFL1 checkpoint")
    (n_desc,) = r.unpack("<I")
    fmt = make_format(r.take(n_desc).decode("ascii"))
    (n_dims,) = r.unpack("<I")
    dims = tuple(r.unpack(f"<{n_dims}I"))
    shapes = list(zip(dims[:-1], dims[1:]))
    weights = [_unpack_values(r.take(a * b * fmt.nbytes), a * b, fmt).reshape(a, b) for a, b in shapes]
    biases = [_unpack_values(r.take(b * fmt.nbytes), b, fmt).reshape(1, b) for _, b in shapes]
    masks = books = affine = None
    while not r.done:
        tag = r.take(1)
        (length,) = r.unpack("<I")
        body = _Reader(r.take(length))
        if tag == b"M":
            masks = tuple(
                np.unpackbits(np.frombuffer(body.take(math.ceil(a * b / 8)), np.uint8), bitorder="little")[: a * b]
                .astype(bool)
                .reshape(a, b)
                for a, b in shapes
            )
        elif tag == b"C":
            books = []
            for i, (a, b) in enumerate(shapes):
                (k,) = body.unpack("<I")
                if k == 0:
                    books.append(None)
                    continue
                centroids = _unpack_values(body.take(k * fmt.nbytes), k, fmt)
                mask = masks[i] if masks is not None else np.ones((a, b), dtype=bool)
                kept = int(mask.sum())
                nbits = _index_bits(k)
                labels = _unpack_uint(body.take(math.ceil(kept * nbits / 8)), kept, nbits)
                index = np.full((a, b), -1, dtype=np.int64)
                index[mask] = labels
                books.append(Codebook(centroids, index))
            books = tuple(books)
        elif tag == b"Q":
            affine = []
            for i, (a, b) in enumerate(shapes):
                (bits,) = body.unpack("<B")
                if bits == 0:
                    affine.append(None)
                    continue
                scale, zp = body.unpack("<dI")
                afmt = ScalarFormat.affine(bits, scale, zp)
                mask = masks[i] if masks is not None else np.ones((a, b), dtype=bool)
                kept = int(mask.sum())
                raw = np.frombuffer(body.take(kept * afmt.nbytes), np.uint8).reshape(kept, afmt.nbytes)
                wide = np.zeros((kept, 8), dtype=np.uint8)
                wide[:, : afmt.nbytes] = raw
                values = np.zeros((a, b))
                values[mask] = from_bits(wide.view("<u8").ravel(), afmt)
                weights[i] = values
                affine.append(afmt)
            affine = tuple(affine)
        else:
            raise CheckpointError(f"unknown section tag {tag!r}")
    wfmts = affine or (None,) * len(shapes)
    model = MlpModel(
        dims,
        tuple(Matrix(w, f or fmt) for w, f in zip(weights, wfmts)),
        tuple(Matrix(b, fmt) for b in biases),
        fmt,
    )
    return model, CompressionSections(masks, books, affine)


def save(path: str | Path, model: MlpModel, state: CompressedState | None = None) -> None:
    Path(path).write_bytes(dumps(model, state))


def load(path: str | Path) -> tuple[MlpModel, CompressionSections]:
    return loads(Path(path).read_bytes())
