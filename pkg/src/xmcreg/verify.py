"""Gradient verification suites: per-kernel checks and the full objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from . import mining
from .data_io import SyntheticSpec, build_synthetic
from .losses import total_loss
from .trainer import TrainConfig, init_model


@dataclass
class SuiteReport:
    max_relative_error: float
    passed: bool
    worst_case: str


def _square_mean(tape, t: dm.Tensor) -> dm.Tensor:
    # quadratic scalarization so every output coordinate contributes a
    # non-constant gradient
    return dm.mean_all(tape, dm.mul(tape, t, t))


def kernel_gradchecks(seed: int, tol: float = 1e-4, max_coords: int = 64) -> SuiteReport:
    """Finite-difference check of every kernel's backward pass."""
    rng = np.random.default_rng(seed)

    def away_from_zero(shape):
        # keep |x| >= 0.2 so abs/relu kinks stay out of fd range
        return rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)

    x2 = dm.Tensor(rng.normal(size=(3, 4)))
    y2 = dm.Tensor(rng.normal(size=(3, 4)))
    w = dm.Tensor(rng.normal(size=(4, 2)))
    v1 = dm.Tensor(rng.normal(size=5))
    v2 = dm.Tensor(rng.normal(size=5))
    kinky = dm.Tensor(away_from_zero((3, 4)))
    gain = dm.Tensor(rng.normal(size=4))
    bias = dm.Tensor(rng.normal(size=4))
    targets = rng.integers(0, 2, size=5).astype(float)
    idx = rng.integers(0, 3, size=6)
    probe = rng.normal(size=5)

    checks = {
        "add": (lambda tape: _square_mean(tape, dm.add(tape, x2, y2)), {"x": x2, "y": y2}),
        "hadamard": (lambda tape: _square_mean(tape, dm.mul(tape, x2, y2)), {"x": x2, "y": y2}),
        "matmul": (lambda tape: _square_mean(tape, dm.matmul(tape, x2, w)), {"x": x2, "w": w}),
        "concat": (lambda tape: _square_mean(tape, dm.concat(tape, [v1, v2])), {"a": v1, "b": v2}),
        "elementwise-abs": (lambda tape: _square_mean(tape, dm.elementwise_abs(tape, kinky)), {"x": kinky}),
        "relu": (lambda tape: _square_mean(tape, dm.relu(tape, kinky)), {"x": kinky}),
        "sigmoid": (lambda tape: _square_mean(tape, dm.sigmoid(tape, x2)), {"x": x2}),
        "gelu": (lambda tape: _square_mean(tape, dm.gelu(tape, x2)), {"x": x2}),
        "layer_norm": (
            lambda tape: _square_mean(tape, dm.layer_norm(tape, x2, gain, bias)),
            {"x": x2, "gain": gain, "bias": bias},
        ),
        "softmax": (lambda tape: _square_mean(tape, dm.softmax(tape, x2)), {"x": x2}),
        "mean-pool": (lambda tape: _square_mean(tape, dm.sum_axis0(tape, x2)), {"x": x2}),
        # linear functional: the squared norm of a unit vector is constant
        "l2_normalize": (
            lambda tape: dm.mean_all(tape, dm.mul(tape, dm.l2_normalize(tape, v1), probe)),
            {"v": v1},
        ),
        "dot": (lambda tape: _square_mean(tape, dm.dot(tape, v1, v2)), {"a": v1, "b": v2}),
        "bce_with_logits": (
            lambda tape: dm.mean_all(tape, dm.bce_with_logits(tape, v1, targets)),
            {"z": v1},
        ),
        "gather_rows": (lambda tape: _square_mean(tape, dm.gather_rows(tape, x2, idx)), {"x": x2}),
        "transpose": (lambda tape: _square_mean(tape, dm.transpose(tape, x2)), {"x": x2}),
    }

    worst = 0.0
    worst_name = ""
    for name, (fn, params) in checks.items():
        report = dm.grad_check(fn, params, seed=seed, tol=tol, max_coords=max_coords)
        if report.max_relative_error > worst:
            worst = report.max_relative_error
            worst_name = name
    return SuiteReport(max_relative_error=worst, passed=worst <= tol, worst_case=worst_name)


def make_micro_objective(seed: int, d: int = 8, batch_size: int = 6, k: int = 3, num_labels: int = 20):
    """A tiny end-to-end objective closure plus its parameter set.

    Dropout is disabled so the objective is deterministic across calls.
    """
    spec = SyntheticSpec(
        num_labels=num_labels,
        num_train_queries=batch_size,
        num_test_queries=0,
        families=4,
        noise_rate=0.1,
        abbreviation_rate=0.3,
        seed=seed,
    )
    labels, queries, _ = build_synthetic(spec)
    dataset = mining.Dataset(queries=queries, labels=labels)
    config = TrainConfig(
        epochs=1, batch_size=batch_size, k=k,
        dim=d, dim_hidden=2 * d, num_buckets=1024, dropout=0.0, seed=seed,
    )
    rng = np.random.default_rng(seed)
    model = init_model(rng, config)
    sampled = mining.sample_positives(dataset, rng)
    qids = [q.id for q in dataset.queries]
    batch = mining.Batch(query_ids=qids, pos_label_ids=sampled, neg_pools={})
    negs = mining.in_batch_negatives(batch, dataset)
    batch.neg_pools = {qid: tuple(negs[qid]) for qid in qids}
    loss_cfg = config.loss_config()

    def fn(tape):
        return total_loss(
            tape, dataset, batch, model.enc, model.head_ql, model.head_qb,
            model.block, loss_cfg, training=False,
        )[0]

    return fn, model.named_tensors()


def total_loss_gradcheck(seed: int, tol: float = 1e-4, max_coords: int = 8) -> dm.GradCheckReport:
    """Finite-difference check of the complete objective on a micro batch."""
    fn, params = make_micro_objective(seed)
    return dm.grad_check(fn, params, seed=seed, tol=tol, max_coords=max_coords)


def full_suite(seed: int, tol: float = 1e-4) -> SuiteReport:
    kernels = kernel_gradchecks(seed, tol=tol)
    end_to_end = total_loss_gradcheck(seed, tol=tol)
    worst = max(kernels.max_relative_error, end_to_end.max_relative_error)
    worst_name = kernels.worst_case if kernels.max_relative_error >= end_to_end.max_relative_error else "total_loss"
    return SuiteReport(max_relative_error=worst, passed=worst <= tol, worst_case=worst_name)
