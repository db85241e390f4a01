"""Hashed character-trigram text encoder producing unit-norm embeddings.

A tiny trainable substitute for a transformer backbone: texts become
bags of character trigrams hashed into buckets, bucket rows are
mean-pooled, projected and L2-normalized. Every step is differentiable
through the kernels in :mod:`xmcreg.diffmath`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm

MAX_CHARS = 128

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_FNV_MASK = 0xFFFFFFFFFFFFFFFF


@dataclass
class TextRecord:
    id: int
    text: str


@dataclass
class EncoderParams:
    """Trainable encoder state: hashed-trigram table plus projection."""

    bucket_table: dm.Tensor  # (H, d_in)
    projection: dm.Tensor  # (d_in, d)

    @property
    def num_buckets(self) -> int:
        return self.bucket_table.shape[0]

    @property
    def dim(self) -> int:
        return self.projection.shape[1]


def init_encoder(rng: np.random.Generator, d: int = 32, d_in: int = 64, num_buckets: int = 4096) -> EncoderParams:
    if num_buckets < 1024 or d < 2:
        raise ValueError("need num_buckets >= 1024 and d >= 2")
    table = rng.uniform(-0.05, 0.05, size=(num_buckets, d_in))
    proj = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d))
    return EncoderParams(bucket_table=dm.Tensor(table), projection=dm.Tensor(proj))


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _FNV_MASK
    return h


def featurize(text: str, num_buckets: int) -> dict[int, int]:
    """Bucket -> count map of hashed character trigrams.

    Text is truncated to MAX_CHARS characters, lowercased, and padded
    with a '#' sentinel on both ends. Empty text maps to the reserved
    bucket 0.
    """
    text = text[:MAX_CHARS].lower()
    if not text:
        return {0: 1}
    padded = "#" + text + "#"
    counts: dict[int, int] = {}
    for i in range(len(padded) - 2):
        bucket = fnv1a64(padded[i : i + 3].encode("utf-8")) % num_buckets
        counts[bucket] = counts.get(bucket, 0) + 1
    return counts


def encode(params: EncoderParams, text: str, tape: dm.GradTape | None = None) -> dm.Tensor:
    """Unit-norm embedding of a text (count-weighted mean of bucket rows)."""
    counts = featurize(text, params.num_buckets)
    idx = np.array(sorted(counts), dtype=np.intp)
    weights = np.array([counts[i] for i in idx], dtype=np.float64)
    weights /= weights.sum()
    rows = dm.gather_rows(tape, params.bucket_table, idx)
    pooled = dm.sum_axis0(tape, dm.mul(tape, rows, weights[:, None]))
    projected = dm.matmul(tape, pooled, params.projection)
    return dm.l2_normalize(tape, projected)


def encode_matrix(params: EncoderParams, texts: list[str]) -> np.ndarray:
    """Stacked embeddings for frozen-parameter inference (no tape)."""
    return np.stack([encode(params, t).data for t in texts]) if texts else np.zeros((0, params.dim))
