"""Command-line interface.

Subcommands: generate-data, train, eval, gradcheck, histogram.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import data_io, evaluation, mining, trainer, verify
from .encoder import encode_matrix


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _build_parser() -> _Parser:
    parser = _Parser(prog="xmcreg")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="write a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--spec", help="key = value file with SyntheticSpec fields")
    gen.add_argument("--num-labels", type=int)
    gen.add_argument("--num-queries", type=int)
    gen.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", help="key = value file with TrainConfig fields")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--target-precision", type=float, default=0.85)
    ev.add_argument("--report", required=True)
    ev.add_argument("--scores")
    ev.add_argument("--bins", type=int, default=50)
    ev.add_argument("--calibration-split", help="pick the threshold on this split instead of the evaluated set")

    gc = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-4)

    hist = sub.add_parser("histogram", help="bin a scores file by correctness")
    hist.add_argument("--scores", required=True)
    hist.add_argument("--bins", type=int, default=50)
    hist.add_argument("--out", required=True)

    return parser


def _parse_spec_file(path: str) -> data_io.SyntheticSpec:
    import dataclasses

    fields = {f.name: f for f in dataclasses.fields(data_io.SyntheticSpec)}
    overrides = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise data_io.ParseError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in fields:
                raise data_io.ParseError(f"{path}:{lineno}: unknown key {key!r}")
            ftype = fields[key].type
            overrides[key] = float(value) if ftype == "float" else int(value)
    return data_io.SyntheticSpec(**overrides)


def _cmd_generate(args) -> int:
    if args.spec:
        spec = _parse_spec_file(args.spec)
    else:
        if args.num_labels is None or args.num_queries is None:
            raise UsageError("generate-data needs --spec or both --num-labels and --num-queries")
        spec = data_io.SyntheticSpec(
            num_labels=args.num_labels,
            num_train_queries=args.num_queries,
            num_test_queries=max(1, args.num_queries // 4),
            seed=args.seed,
        )
    data_io.generate(spec, args.out)
    print(f"wrote dataset under {args.out}")
    return 0


def _cmd_train(args) -> int:
    if args.config:
        config, _ = data_io.load_run_config(args.config)
    else:
        config = trainer.TrainConfig()
    dataset = data_io.load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt, log = trainer.train(dataset, config, log_path=out_dir / "train_log.jsonl")
    ckpt.save(out_dir / "checkpoint.bin")
    final = log[-1]
    print(f"trained {config.epochs} epochs; final total loss {final['total']:.6f}")
    print(f"checkpoint: {out_dir / 'checkpoint.bin'}")
    return 0


def _predictions(ckpt: trainer.Checkpoint, dataset: mining.Dataset) -> list[evaluation.ScoredPrediction]:
    model = trainer.model_from_tensors(ckpt.tensors)
    q_embs = encode_matrix(model.enc, [q.text for q in dataset.queries])
    l_embs = encode_matrix(model.enc, [l.text for l in dataset.labels])
    return evaluation.retrieve_top1(
        q_embs,
        l_embs,
        [q.id for q in dataset.queries],
        [l.id for l in dataset.labels],
        [q.positives for q in dataset.queries],
    )


def _cmd_eval(args) -> int:
    ckpt = trainer.Checkpoint.load(args.checkpoint)
    dataset = data_io.load_dataset(args.data)
    preds = _predictions(ckpt, dataset)
    if args.calibration_split:
        calib = _predictions(ckpt, data_io.load_dataset(args.calibration_split))
        _, tau = evaluation.coverage_at_target(calib, args.target_precision)
        c_at_1 = sum(p.score >= tau for p in preds) / len(preds) if tau is not None else 0.0
        report = evaluation.EvalReport(
            p_at_1=evaluation.precision_at_1(preds),
            c_at_1=c_at_1,
            threshold=tau,
            target_precision=args.target_precision,
            histogram=evaluation.score_histogram(preds, bins=args.bins),
        )
    else:
        report = evaluation.evaluate(preds, args.target_precision, bins=args.bins)
    _atomic_write_text(Path(args.report), json.dumps(report.as_dict(), sort_keys=True, indent=2) + "\n")
    if args.scores:
        evaluation.write_scores(args.scores, preds)
    print(f"P@1 {report.p_at_1:.4f}  C@1 {report.c_at_1:.4f}  threshold {report.threshold}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = verify.full_suite(args.seed, tol=args.tol)
    print(f"max relative error {report.max_relative_error:.3e} (worst: {report.worst_case})")
    if not report.passed:
        print(f"FAIL: exceeds tolerance {args.tol:g}", file=sys.stderr)
        return 2
    print("PASS")
    return 0


def _cmd_histogram(args) -> int:
    preds = evaluation.read_scores(args.scores)
    hist = evaluation.score_histogram(preds, bins=args.bins)
    payload = {
        "edges": hist.edges,
        "correct_counts": hist.correct_counts,
        "incorrect_counts": hist.incorrect_counts,
        "overlap": hist.overlap,
    }
    _atomic_write_text(Path(args.out), json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(f"overlap coefficient {hist.overlap:.4f}")
    return 0


_COMMANDS = {
    "generate-data": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "histogram": _cmd_histogram,
}


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
