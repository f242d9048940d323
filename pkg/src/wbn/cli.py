"""Command-line entry point: generate, train, evaluate, verify, compare.

Exit codes: 0 success, 1 verification/acceptance failure, 2 usage or
configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .config import OUTPUT_ROOT_ENV, ExperimentConfig, load_experiment_config
from .data import DomainDataset, load_dataset, merge_domains, save_dataset
from .errors import (
    ConfigError,
    ConstraintError,
    ContractError,
    FormatError,
    NumericError,
    ShapeError,
    WbnError,
)
from .losses import format_histogram_table, weight_histogram
from .model import build_model
from .train import Checkpoint, evaluate_model, lodo_protocol, train_loop
from .verification import format_suite_table, run_and_time


def _resolve_out(path: str) -> Path:
    out = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _join_splits(train: DomainDataset, test: DomainDataset) -> DomainDataset:
    joined = DomainDataset(
        np.concatenate([train.features, test.features]),
        np.concatenate([train.class_labels, test.class_labels]),
        None
        if train.domain_labels is None
        else np.concatenate([train.domain_labels, test.domain_labels]),
        train.num_classes,
        train.num_domains,
        dict(train.meta),
    )
    joined.meta.pop("split", None)
    return joined


def _split_file_dataset(ds: DomainDataset) -> tuple[DomainDataset, DomainDataset]:
    n_train = ds.meta.get("train_per_domain")
    if n_train is None or not 0 < n_train <= len(ds):
        return ds, ds
    return ds.split(n_train)


def cmd_gen(config: ExperimentConfig) -> int:
    if config.benchmark is None:
        raise ConfigError("gen needs generator keys in [dataset], not paths")
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    pairs = config.benchmark.build()
    for j, (train, test) in enumerate(pairs):
        save_dataset(_join_splits(train, test), out / f"domain{j}.wbnd")
    (out / "resolved.ini").write_text(config.resolved_text())
    print(f"wrote {len(pairs)} domain files to {out}")
    return 0


def _training_dataset(config: ExperimentConfig) -> DomainDataset:
    if config.data_paths is not None:
        parts = [load_dataset(p) for p in config.data_paths]
        if len(parts) == 1:
            return parts[0]
        return merge_domains([_split_file_dataset(p)[0] for p in parts])
    pairs = config.benchmark.build()
    return merge_domains([train for train, _ in pairs[:-1]])


def cmd_train(config: ExperimentConfig) -> int:
    dataset = _training_dataset(config)
    model_cfg = config.model.build(
        dataset.num_features, dataset.num_classes, dataset.num_domains
    )
    if model_cfg.needs_domain_labels and dataset.domain_labels is None:
        raise ConfigError(
            f"norm_mode {model_cfg.norm_mode} needs domain labels, "
            "but the training dataset has none"
        )
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(model_cfg, config.train.seed)
    checkpoint, trace = train_loop(model, dataset, config.train)
    checkpoint.save(out / "checkpoint.wbnc")
    lines = [
        "# wbn training report",
        f"# config_hash {checkpoint.config_hash}",
        f"# seed {config.train.seed}",
        "iter\tloss\tbase_lr\thead_lr",
    ]
    lines += [f"{r.iteration}\t{r.loss!r}\t{r.base_lr!r}\t{r.head_lr!r}" for r in trace]
    lines.append(f"collapse_count\t{checkpoint.collapse_count}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    (out / "resolved.ini").write_text(config.resolved_text())
    print(f"trained {config.train.iterations} iterations; final loss {trace[-1].loss:.6f}")
    print(f"checkpoint: {out / 'checkpoint.wbnc'}")
    return 0


def cmd_eval(ckpt_path: str, data_path: str, out_dir: str | None) -> int:
    checkpoint = Checkpoint.load(ckpt_path)
    model = checkpoint.restore_model()
    dataset = load_dataset(data_path)
    result = evaluate_model(model, dataset)

    lines = [
        "# wbn evaluation report",
        f"# checkpoint {ckpt_path} config_hash {checkpoint.config_hash}",
        f"# dataset {data_path} samples {len(dataset)} features {dataset.num_features}",
        f"avg_class_accuracy\t{result.accuracy!r}",
    ]
    rows = [("avg_class_accuracy", repr(result.accuracy))]
    for c, recall in enumerate(result.per_class_recall):
        lines.append(f"class_{c}_recall\t{recall!r}")
        rows.append((f"class_{c}_recall", repr(recall)))
    if result.assignments is not None:
        groups = (
            dataset.domain_labels
            if dataset.domain_labels is not None
            else np.zeros(len(dataset), dtype=np.int64)
        )
        histograms = weight_histogram(result.assignments, groups)
        lines.append("")
        lines.append(format_histogram_table(histograms))
        for h in histograms:
            for b, count in enumerate(h.counts):
                rows.append((f"hist_domain{h.domain}_bin{b}", str(int(count))))
            rows.append((f"hist_domain{h.domain}_mean_w0", repr(h.mean_weight)))
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if out_dir is not None:
        out = _resolve_out(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report)
        (out / "metrics.tsv").write_text(
            "\n".join(f"{k}\t{v}" for k, v in rows) + "\n"
        )
    return 0


def cmd_gradcheck() -> int:
    results, seconds = run_and_time()
    print(format_suite_table(results))
    print(f"runtime: {seconds:.2f} s")
    if all(r.passed for r in results):
        print("gradient suite: PASS")
        return 0
    print("gradient suite: FAIL")
    return 1


def cmd_compare(config: ExperimentConfig) -> int:
    if not config.methods:
        raise ConfigError("compare needs [compare] methods")
    if config.data_paths is not None:
        files = [load_dataset(p) for p in config.data_paths]
        splits = [_split_file_dataset(ds) for ds in files]
    else:
        splits = config.benchmark.build()
    train_domains = [train for train, _ in splits]
    eval_domains = [test for _, test in splits]

    columns: dict[str, list[float]] = {}
    for mode in config.methods:
        spec = config.model.with_mode(mode)
        template = spec.build(
            train_domains[0].num_features, train_domains[0].num_classes, len(train_domains) - 1
        )
        result = lodo_protocol(train_domains, template, config.train, eval_domains)
        columns[mode] = [row.accuracy for row in result.rows] + [result.mean]

    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    header = ["held_out"] + config.methods
    body = []
    for i in range(len(train_domains)):
        body.append([str(i)] + [f"{columns[m][i]:.4f}" for m in config.methods])
    body.append(["mean"] + [f"{columns[m][-1]:.4f}" for m in config.methods])
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    table = "\n".join(
        "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row))
        for row in [header] + body
    )
    print(table)
    (out / "table.txt").write_text(table + "\n")
    (out / "table.tsv").write_text(
        "\n".join("\t".join(row) for row in [header] + body) + "\n"
    )
    (out / "resolved.ini").write_text(config.resolved_text())
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wbn",
        description="Weighted batch normalization: dataset generation, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate benchmark dataset files")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", help="override [output] dir")

    train = sub.add_parser("train", help="train a model from a config")
    train.add_argument("--config", required=True)

    evl = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    evl.add_argument("--ckpt", required=True)
    evl.add_argument("--data", required=True)
    evl.add_argument("--out")

    sub.add_parser("gradcheck", help="finite-difference check of every operation")

    compare = sub.add_parser("compare", help="side-by-side leave-one-domain-out table")
    compare.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "gen":
            config = load_experiment_config(args.config)
            if args.out:
                config.output_dir = _resolve_out(args.out)
            return cmd_gen(config)
        if args.command == "train":
            return cmd_train(load_experiment_config(args.config))
        if args.command == "eval":
            return cmd_eval(args.ckpt, args.data, args.out)
        if args.command == "gradcheck":
            return cmd_gradcheck()
        if args.command == "compare":
            return cmd_compare(load_experiment_config(args.config))
        raise ConfigError(f"unknown command {args.command!r}")
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ContractError, FormatError, ConstraintError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except WbnError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
