"""Top-1 retrieval, precision, coverage at a target precision, and
score-histogram reporting."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class EmptyLabelSpace(ValueError):
    """Retrieval over zero labels."""


class EmptyPredictions(ValueError):
    """Metric over an empty prediction list."""


@dataclass
class ScoredPrediction:
    query_id: int
    top1_label_id: int
    score: float
    correct: bool


@dataclass
class Histogram:
    edges: list[float]
    correct_counts: list[int]
    incorrect_counts: list[int]
    overlap: float


@dataclass
class EvalReport:
    p_at_1: float
    c_at_1: float
    threshold: float | None
    target_precision: float
    histogram: Histogram

    def as_dict(self) -> dict:
        return {
            "p_at_1": self.p_at_1,
            "c_at_1": self.c_at_1,
            "threshold": self.threshold,
            "target_precision": self.target_precision,
            "histogram": {
                "edges": self.histogram.edges,
                "correct_counts": self.histogram.correct_counts,
                "incorrect_counts": self.histogram.incorrect_counts,
                "overlap": self.histogram.overlap,
            },
        }


def retrieve_top1(
    query_embeddings: np.ndarray,
    label_embeddings: np.ndarray,
    query_ids: list[int],
    label_ids: list[int],
    positives: list[frozenset[int]],
) -> list[ScoredPrediction]:
    """Exact brute-force argmax over all labels; ties go to the lower label id."""
    if label_embeddings.shape[0] == 0:
        raise EmptyLabelSpace("no labels to retrieve from")
    ids = np.asarray(label_ids)
    id_order = np.argsort(ids, kind="stable")
    sims = query_embeddings @ label_embeddings.T
    preds = []
    for qi, qid in enumerate(query_ids):
        row = sims[qi][id_order]
        j = int(np.argmax(row))  # first max wins; rows are in ascending-id order
        lid = int(ids[id_order][j])
        preds.append(
            ScoredPrediction(
                query_id=qid,
                top1_label_id=lid,
                score=float(row[j]),
                correct=lid in positives[qi],
            )
        )
    return preds


def precision_at_1(preds: list[ScoredPrediction]) -> float:
    if not preds:
        raise EmptyPredictions("no predictions")
    return sum(p.correct for p in preds) / len(preds)


def coverage_at_target(preds: list[ScoredPrediction], target_precision: float) -> tuple[float, float | None]:
    """Largest score-threshold acceptance set whose precision meets the target.

    Equal scores are accepted or rejected together. Returns the accepted
    fraction and the threshold (minimum accepted score), or (0, None) if
    no threshold works.
    """
    if not (0.0 < target_precision <= 1.0):
        raise ValueError("target_precision must be in (0, 1]")
    if not preds:
        raise EmptyPredictions("no predictions")
    rows = sorted(preds, key=lambda p: -p.score)
    best_size = 0
    best_tau: float | None = None
    accepted = 0
    correct = 0
    i = 0
    n = len(rows)
    while i < n:
        j = i
        while j < n and rows[j].score == rows[i].score:
            correct += rows[j].correct
            j += 1
        accepted = j
        if correct / accepted >= target_precision and accepted > best_size:
            best_size = accepted
            best_tau = rows[i].score
        i = j
    if best_size == 0:
        return 0.0, None
    return best_size / n, best_tau


def score_histogram(preds: list[ScoredPrediction], bins: int = 50) -> Histogram:
    """Uniform-bin counts over the observed score range, split by
    correctness, plus the overlap coefficient of the two normalized
    distributions."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not preds:
        raise EmptyPredictions("no predictions")
    scores = np.array([p.score for p in preds])
    lo, hi = float(scores.min()), float(scores.max())
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    correct = np.array([p.correct for p in preds])
    c_counts, _ = np.histogram(scores[correct], bins=edges)
    i_counts, _ = np.histogram(scores[~correct], bins=edges)
    n_c, n_i = c_counts.sum(), i_counts.sum()
    if n_c == 0 or n_i == 0:
        overlap = 0.0
    else:
        overlap = float(np.minimum(c_counts / n_c, i_counts / n_i).sum())
    return Histogram(
        edges=[float(e) for e in edges],
        correct_counts=[int(c) for c in c_counts],
        incorrect_counts=[int(c) for c in i_counts],
        overlap=overlap,
    )


def evaluate(preds: list[ScoredPrediction], target_precision: float, bins: int = 50) -> EvalReport:
    c_at_1, tau = coverage_at_target(preds, target_precision)
    return EvalReport(
        p_at_1=precision_at_1(preds),
        c_at_1=c_at_1,
        threshold=tau,
        target_precision=target_precision,
        histogram=score_histogram(preds, bins=bins),
    )


# ---------------------------------------------------------------------------
# file formats

SCORES_HEADER = "query_id\tlabel_id\tscore\tcorrect"


def write_scores(path, preds: list[ScoredPrediction]) -> None:
    lines = [SCORES_HEADER]
    for p in preds:
        lines.append(f"{p.query_id}\t{p.top1_label_id}\t{p.score!r}\t{int(p.correct)}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_scores(path) -> list[ScoredPrediction]:
    preds = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != SCORES_HEADER:
            raise ValueError(f"{path}: unexpected scores header {header!r}")
        for line in f:
            qid, lid, score, correct = line.rstrip("\n").split("\t")
            preds.append(
                ScoredPrediction(
                    query_id=int(qid),
                    top1_label_id=int(lid),
                    score=float(score),
                    correct=bool(int(correct)),
                )
            )
    return preds


def write_report(path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.as_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
