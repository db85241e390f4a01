"""Batch construction and hard-negative mining.

Two samplers are provided: clustered in-batch mining (semantically
related queries grouped so their positives act as semi-hard negatives
for each other) and a pool-based sampler that keeps, per query, the
globally hardest non-positive labels under the current embeddings.
Per-query groups ("blockings") of one positive plus the K-1 hardest
negatives feed the auxiliary classifiers.

All tie-breaking is by ascending label id for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import TextRecord

POSITIVE_TARGET = 0.0
NEGATIVE_TARGET = 1.0


class TooFewQueries(ValueError):
    """Fewer queries than the requested batch size."""


class BadBlocking(ValueError):
    """A blocking does not contain exactly one positive pair."""


@dataclass
class QueryRecord:
    id: int
    text: str
    positives: frozenset[int]


@dataclass
class Dataset:
    queries: list[QueryRecord]
    labels: list[TextRecord]

    def __post_init__(self) -> None:
        self.label_by_id = {l.id: l for l in self.labels}
        self.query_by_id = {q.id: q for q in self.queries}


@dataclass
class Batch:
    query_ids: list[int]
    pos_label_ids: dict[int, int]  # query id -> sampled positive label id
    neg_pools: dict[int, tuple[int, ...]]  # query id -> candidate negative ids
    # when set, restricts the triplet term to these negatives (pool sampling);
    # the full pool still drives blocking construction
    base_neg_ids: dict[int, list[int]] | None = None


@dataclass
class Blocking:
    query_id: int
    pair_label_ids: tuple[int, ...]  # positive first, then negatives
    targets: tuple[float, ...]  # 0.0 = positive, 1.0 = negative


def sample_positives(dataset: Dataset, rng: np.random.Generator) -> dict[int, int]:
    """Uniformly pick one positive label per query."""
    out = {}
    for q in dataset.queries:
        choices = sorted(q.positives)
        out[q.id] = int(choices[rng.integers(len(choices))])
    return out


def cluster_batches(query_embeddings: np.ndarray, batch_size: int, seed: int) -> list[list[int]]:
    """Greedy balanced clustering of query indices by cosine similarity.

    Repeatedly seeds a group with an unassigned query and attaches its
    batch_size-1 nearest unassigned neighbours. A trailing singleton
    group is padded with one random already-grouped query so every group
    has at least two members.
    """
    n = query_embeddings.shape[0]
    if batch_size < 2 or n < batch_size:
        raise TooFewQueries(f"{n} queries for batch size {batch_size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    assigned = np.zeros(n, dtype=bool)
    groups: list[list[int]] = []
    for seed_idx in order:
        if assigned[seed_idx]:
            continue
        assigned[seed_idx] = True
        sims = query_embeddings @ query_embeddings[seed_idx]
        sims[assigned] = -np.inf
        take = min(batch_size - 1, int((~assigned).sum()))
        # sort by similarity desc, index asc
        candidates = np.lexsort((np.arange(n), -sims))[:take]
        group = [int(seed_idx)] + [int(c) for c in candidates]
        assigned[group] = True
        groups.append(group)
    if len(groups[-1]) == 1:
        others = [i for g in groups[:-1] for i in g]
        groups[-1].append(int(others[rng.integers(len(others))]))
    return groups


def in_batch_negatives(batch: Batch, dataset: Dataset) -> dict[int, list[int]]:
    """Negatives for each query: other queries' sampled positives, minus
    anything in the query's own positive set."""
    out: dict[int, list[int]] = {}
    for qid in batch.query_ids:
        own = dataset.query_by_id[qid].positives
        negs = {
            batch.pos_label_ids[other]
            for other in batch.query_ids
            if other != qid and batch.pos_label_ids[other] not in own
        }
        out[qid] = sorted(negs)
    return out


def ance_pool(
    query_embeddings: np.ndarray,
    label_embeddings: np.ndarray,
    label_ids: list[int],
    positives_per_query: list[frozenset[int]],
    pool_size: int,
) -> list[list[int]]:
    """Per-query pools of the pool_size hardest non-positive labels.

    Exact brute-force search over all labels; ordered by similarity
    descending, ties by ascending label id.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    ids = np.asarray(label_ids)
    sims = query_embeddings @ label_embeddings.T
    pools = []
    for qi, pos in enumerate(positives_per_query):
        row = sims[qi].copy()
        for j, lid in enumerate(ids):
            if int(lid) in pos:
                row[j] = -np.inf
        order = np.lexsort((ids, -row))
        picked = [int(ids[j]) for j in order if np.isfinite(row[j])][:pool_size]
        pools.append(picked)
    return pools


def build_blockings(
    batch: Batch,
    negatives: dict[int, list[int]],
    sims: dict[int, dict[int, float]],
    k: int,
) -> tuple[list[Blocking], int]:
    """Assemble per-query blockings of the positive plus K-1 hardest negatives.

    A query with fewer than K-1 available negatives yields a shrunk
    blocking (never dropped); the count of shrunk blockings is returned.
    """
    if k < 2:
        raise ValueError("blocking size must be >= 2")
    blockings = []
    shrunk = 0
    for qid in batch.query_ids:
        cand = negatives.get(qid, [])
        ranked = sorted(cand, key=lambda lid: (-sims[qid][lid], lid))
        chosen = ranked[: k - 1]
        if len(chosen) < k - 1:
            shrunk += 1
        pos = batch.pos_label_ids[qid]
        blockings.append(
            Blocking(
                query_id=qid,
                pair_label_ids=(pos, *chosen),
                targets=(POSITIVE_TARGET, *([NEGATIVE_TARGET] * len(chosen))),
            )
        )
    return blockings, shrunk


def validate_blocking(blocking: Blocking) -> None:
    if sum(1 for t in blocking.targets if t == POSITIVE_TARGET) != 1:
        raise BadBlocking(f"blocking for query {blocking.query_id} lacks a unique positive")
