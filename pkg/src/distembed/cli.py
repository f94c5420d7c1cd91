"""Command-line entry point: ``distembed {train,eval,gradcheck,softlabels,project}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure
(non-finite values or a gradient-check tolerance breach).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .checkpoint import load_model
from .config import RunConfig
from .errors import (
    CapabilityError,
    ConfigError,
    ContractError,
    DataError,
    DomainError,
    GeometryError,
    NumericError,
    ShapeError,
)
from .gaussian import DiagGaussian
from .gradcheck import DEFAULT_TOL
from .losses import export_soft_labels_csv, row_entropy, soft_labels

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with dotted section.key settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--synthetic", help="synthetic data spec, e.g. k=10,per_class=60")
    p.add_argument("--dataset", help="Market-style dataset directory")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", choices=["distribution", "gm", "ce"])
    p.add_argument("--variance-head", choices=["sigma", "bm", "mlp", "none"])
    p.add_argument("--stage2", dest="stage2", action="store_true", default=None)
    p.add_argument("--no-stage2", dest="stage2", action="store_false")
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--stage1-epochs", type=int)
    p.add_argument("--stage2-epochs", type=int)
    p.add_argument("--train-label-noise", type=float, help="fraction of training labels to corrupt")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corrupt", help="query corruption, e.g. gaussian-blur:k=5")
    p.add_argument("--distance", choices=["euclidean", "cosine", "wasserstein"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="distembed", description="Distribution embeddings for re-identification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="two-stage training, checkpoints, logs and a final report")
    _common(p), _data_flags(p), _model_flags(p), _eval_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally on corrupted queries")
    _common(p), _data_flags(p), _eval_flags(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable component")
    _common(p)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    p.add_argument("--mutate", choices=["kl-sign"], help="inject a known gradient bug")

    p = sub.add_parser("softlabels", help="export the soft-label matrix of a checkpoint's priors")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--sweep", help="comma-separated tau values for a row-entropy report")

    p = sub.add_parser("project", help="project priors or image posteriors to 2-D ellipses")
    _common(p), _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ids", help="comma-separated class indices (default: all priors)")
    p.add_argument("--images", help="comma-separated query indices to project as posteriors")
    p.add_argument("--method", choices=["pca", "tsne"])
    p.add_argument("--samples", type=int)
    p.add_argument("--points", action="store_true", help="include the sampled point clouds")
    return parser


_FLAG_KEYS = {
    "seed": "run.seed",
    "out": "run.out",
    "synthetic": "data.synthetic",
    "dataset": "data.dataset",
    "train_label_noise": "data.train_label_noise",
    "variance_head": "model.variance_head",
    "loss": "train.loss",
    "stage2": "train.stage2",
    "tau": "train.tau",
    "lam": "train.lam",
    "lr": "train.base_lr",
    "stage1_epochs": "train.stage1_epochs",
    "stage2_epochs": "train.stage2_epochs",
    "corrupt": "eval.corrupt",
    "distance": "eval.distance",
    "method": "project.method",
    "samples": "project.samples",
    "ids": "project.ids",
}


def _overrides(args) -> Dict[str, object]:
    out = {}
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    # an explicit dataset replaces synthetic data
    if out.get("data.dataset"):
        out.setdefault("data.synthetic", "")
    return out


def _resolve(args, base: Optional[Dict[str, str]] = None) -> RunConfig:
    return RunConfig.resolve(args.config, _overrides(args), base)


def _print_report(report, prefix: str = "") -> None:
    row = report.summary_row()
    print(
        f"{prefix}rank1={row['rank1']:.4f} rank5={row['rank5']:.4f} rank10={row['rank10']:.4f} "
        f"mAP={row['map']:.4f} valid={report.num_valid} skipped={report.num_skipped}"
    )


def cmd_train(args) -> int:
    from .pipeline import run_training

    rc = _resolve(args)
    result = run_training(rc)
    for name, path in result.files.items():
        print(f"wrote {name}: {path}")
    _print_report(result.report)
    return EXIT_OK


def _checkpoint_base(meta: dict) -> Dict[str, str]:
    base = dict(meta.get("run_config", {}))
    base.pop("run.out", None)
    return base


def cmd_eval(args) -> int:
    from .pipeline import corruption_spec, evaluate_model, load_data

    model, meta = load_model(args.checkpoint)
    rc = _resolve(args, _checkpoint_base(meta))
    data = load_data(rc)
    if data.num_classes != model.config.num_classes:
        raise ShapeError(f"checkpoint has {model.config.num_classes} classes, data has {data.num_classes}")
    report = evaluate_model(model, data, rc.get("eval.distance"), corruption_spec(rc))
    out = rc.out
    rc.write(out)
    report.to_json(out / "eval_report.json")
    report.to_csv(out / "eval_report.csv")
    label = rc.get("eval.corrupt") or "clean"
    _print_report(report, f"[{label}] ")
    print(f"wrote {out / 'eval_report.json'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuites import run_suites, summarize

    rc = _resolve(args)
    results = run_suites(rc.seed, args.suite, args.mutate)
    summary = summarize(results, args.tol)
    out = rc.out
    rc.write(out)
    payload = {name: {"max_error": err, "worst": worst, "passed": ok} for name, (err, worst, ok) in summary.items()}
    (out / "gradcheck.json").write_text(json.dumps({"tol": args.tol, "suites": payload, "detail": results}, indent=2, sort_keys=True))
    failed = False
    for name, (err, worst, ok) in summary.items():
        print(f"{'PASS' if ok else 'FAIL'} {name:<18} max_rel_err={err:.3e} ({worst})")
        failed |= not ok
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_softlabels(args) -> int:
    model, meta = load_model(args.checkpoint)
    rc = _resolve(args, _checkpoint_base(meta))
    out = rc.out
    rc.write(out)
    tau = rc.get_float("train.tau")
    matrix = soft_labels(model.bank, tau)
    export_soft_labels_csv(matrix, out / "soft_labels.csv")
    print(f"tau={tau} wrote {out / 'soft_labels.csv'}")
    if args.sweep:
        taus = [float(t) for t in args.sweep.split(",") if t.strip()]
        lines = ["tau,mean_row_entropy"]
        for t in taus:
            h = float(row_entropy(soft_labels(model.bank, t)).mean())
            lines.append(f"{t!r},{h!r}")
            print(f"tau={t} mean_row_entropy={h:.6f}")
        (out / "entropy_sweep.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_project(args) -> int:
    from .pipeline import load_data
    from .projection import export_ellipses, project_distributions

    model, meta = load_model(args.checkpoint)
    rc = _resolve(args, _checkpoint_base(meta))
    out = rc.out
    rc.write(out)
    if args.images:
        data = load_data(rc)
        picks = _int_list(args.images)
        query = data.splits.query
        if any(not 0 <= i < len(query) for i in picks):
            raise ConfigError(f"image indices must lie in [0, {len(query)})")
        means, variances = model.embed(data.images[[query[i] for i in picks]])
        dists = [DiagGaussian(m, v) for m, v in zip(means, variances)]
        labels = [f"q{i}:id{data.index.entries[query[i]].raw_id}" for i in picks]
    else:
        ids = _int_list(rc.get("project.ids")) or list(range(model.bank.num_classes))
        if any(not 0 <= i < model.bank.num_classes for i in ids):
            raise ConfigError(f"prior ids must lie in [0, {model.bank.num_classes})")
        mu, var = model.bank.means.data, model.bank.variances().data
        dists = [DiagGaussian(mu[i].copy(), var[i].copy()) for i in ids]
        labels = [f"id{i}" for i in ids]
    projected = project_distributions(
        dists, rc.get_int("project.samples"), rc.get("project.method"), rc.seed, labels
    )
    svg = export_ellipses(projected, out / "projection.svg", include_points=args.points)
    print(f"wrote {svg} and {svg.with_suffix('.csv')} ({len(projected)} distributions)")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "softlabels": cmd_softlabels,
    "project": cmd_project,
}


def _fail(args, exc: Exception) -> None:
    print(f"distembed {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CapabilityError, ContractError, GeometryError) as exc:
        _fail(args, exc)
        return EXIT_USAGE
    except (DataError, ShapeError, OSError) as exc:
        _fail(args, exc)
        return EXIT_DATA
    except (NumericError, DomainError, FloatingPointError) as exc:
        _fail(args, exc)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
