"""Query-label pair representations and their in-group contextualization.

A pair is first represented by the concatenation of the two embeddings,
their absolute difference, and their elementwise product (length 4d).
The K pairs of a group are then contextualized by a single pre-norm
transformer encoder block (one attention head, no positional encoding,
so the operation is permutation-equivariant over the K rows), and the
before/after representations are combined the same way into a length-16d
vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import DimensionMismatch


def build_gamma(tape, h_q: dm.Tensor, h_l: dm.Tensor) -> dm.Tensor:
    """4d pair feature: {h_q, h_l, |h_q - h_l|, h_q * h_l}."""
    if h_q.shape != h_l.shape or h_q.ndim != 1:
        raise DimensionMismatch(f"gamma inputs {h_q.shape} vs {h_l.shape}")
    diff = dm.elementwise_abs(tape, dm.sub(tape, h_q, h_l))
    prod = dm.mul(tape, h_q, h_l)
    return dm.concat(tape, [h_q, h_l, diff, prod])


def build_delta(tape, gamma: dm.Tensor, lam: dm.Tensor) -> dm.Tensor:
    """16d feature combining a pair's raw and contextualized forms.

    Works on a single pair (rank-1) or a group of pairs (rank-2, rows);
    concatenation runs along the feature axis.
    """
    if gamma.shape != lam.shape:
        raise DimensionMismatch(f"delta inputs {gamma.shape} vs {lam.shape}")
    diff = dm.elementwise_abs(tape, dm.sub(tape, gamma, lam))
    prod = dm.mul(tape, gamma, lam)
    return dm.concat(tape, [gamma, lam, diff, prod], axis=gamma.ndim - 1)


@dataclass
class BlockContextParams:
    """One pre-norm transformer encoder block over K tokens of width w=4d."""

    wq: dm.Tensor
    wk: dm.Tensor
    wv: dm.Tensor
    wo: dm.Tensor
    bq: dm.Tensor
    bk: dm.Tensor
    bv: dm.Tensor
    bo: dm.Tensor
    ln1_gain: dm.Tensor
    ln1_bias: dm.Tensor
    ln2_gain: dm.Tensor
    ln2_bias: dm.Tensor
    ff_w1: dm.Tensor  # (w, 2w)
    ff_b1: dm.Tensor
    ff_w2: dm.Tensor  # (2w, w)
    ff_b2: dm.Tensor

    @property
    def width(self) -> int:
        return self.wq.shape[0]


def init_block(rng: np.random.Generator, width: int) -> BlockContextParams:
    def proj(n_in, n_out):
        return dm.Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)))

    def zeros(n):
        return dm.Tensor(np.zeros(n))

    return BlockContextParams(
        wq=proj(width, width),
        wk=proj(width, width),
        wv=proj(width, width),
        wo=proj(width, width),
        bq=zeros(width),
        bk=zeros(width),
        bv=zeros(width),
        bo=zeros(width),
        ln1_gain=dm.Tensor(np.ones(width)),
        ln1_bias=zeros(width),
        ln2_gain=dm.Tensor(np.ones(width)),
        ln2_bias=zeros(width),
        ff_w1=proj(width, 2 * width),
        ff_b1=zeros(2 * width),
        ff_w2=proj(2 * width, width),
        ff_b2=zeros(width),
    )


def contextualize(tape, block: BlockContextParams, gammas: dm.Tensor, return_attention: bool = False):
    """Apply the encoder block to a (K, 4d) group of pair features.

    Returns the contextualized (K, 4d) matrix; with return_attention,
    also the (K, K) softmax attention matrix.
    """
    if gammas.ndim != 2 or gammas.shape[1] != block.width:
        raise DimensionMismatch(f"group shape {gammas.shape}, block width {block.width}")
    if gammas.shape[0] < 2:
        raise DimensionMismatch("contextualize needs K >= 2 pairs")

    # run attention in a canonical row order so the operation is
    # bit-exactly permutation-equivariant (summation order would
    # otherwise leak the input ordering into the last ulp)
    n = gammas.shape[0]
    canon = sorted(range(n), key=lambda i: gammas.data[i].tobytes())
    inverse = np.empty(n, dtype=np.intp)
    inverse[canon] = np.arange(n)
    permuted = canon != list(range(n))
    if permuted:
        gammas = dm.gather_rows(tape, gammas, np.asarray(canon, dtype=np.intp))

    xn = dm.layer_norm(tape, gammas, block.ln1_gain, block.ln1_bias)
    q = dm.add(tape, dm.matmul(tape, xn, block.wq), block.bq)
    k = dm.add(tape, dm.matmul(tape, xn, block.wk), block.bk)
    v = dm.add(tape, dm.matmul(tape, xn, block.wv), block.bv)
    scores = dm.mul(tape, dm.matmul(tape, q, dm.transpose(tape, k)), 1.0 / math.sqrt(block.width))
    attn = dm.softmax(tape, scores)
    mixed = dm.add(tape, dm.matmul(tape, dm.matmul(tape, attn, v), block.wo), block.bo)
    x2 = dm.add(tape, gammas, mixed)

    yn = dm.layer_norm(tape, x2, block.ln2_gain, block.ln2_bias)
    hidden = dm.gelu(tape, dm.add(tape, dm.matmul(tape, yn, block.ff_w1), block.ff_b1))
    ff = dm.add(tape, dm.matmul(tape, hidden, block.ff_w2), block.ff_b2)
    out = dm.add(tape, x2, ff)
    if permuted:
        out = dm.gather_rows(tape, out, inverse)
    if return_attention:
        if permuted:
            rows_fixed = dm.gather_rows(tape, attn, inverse)
            attn = dm.transpose(tape, dm.gather_rows(tape, dm.transpose(tape, rows_fixed), inverse))
        return out, attn
    return out
