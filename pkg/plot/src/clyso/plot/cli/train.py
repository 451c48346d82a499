# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

import argparse
import datetime
import time

import humanize

from clyso.plot.api.dataio import save_model, write_report
from clyso.plot.api.loaders import load_dataset, load_model
from clyso.plot.core.head import FLAG_TAGS
from clyso.plot.core.trainer import EpochLog, TrainConfig, evaluate, overhead_report, train

from .common import (
    HEAD_OPTIONS,
    SINKHORN_OPTIONS,
    TRAIN_OPTIONS,
    PlotCommand,
    add_config_argument,
    add_head_arguments,
    add_train_arguments,
    build_train_config,
    make_table,
    merge_options,
)

TRAIN_CONFIG_KEYS = ("method", "beta", *HEAD_OPTIONS, *SINKHORN_OPTIONS, *TRAIN_OPTIONS)


class TrainCommand(PlotCommand):
    """Train prompts on a dataset file and write a model file."""

    name = "train"

    def __init__(self, args: argparse.Namespace) -> None:
        super().__init__(args)
        self.config: TrainConfig | None = None

    def _validate_args(self) -> None:
        self.config = build_train_config(merge_options(self.args, TRAIN_CONFIG_KEYS))

    def _progress(self, entry: EpochLog) -> None:
        assert self.config is not None
        self._info(
            f"epoch {entry.epoch + 1}/{self.config.epochs}  "
            + f"loss {entry.loss:.6f}  lr {entry.lr:.3g}"
        )

    def _run(self) -> bool:
        assert self.config is not None
        cfg = self.config
        dataset = load_dataset(self.args.data)
        self._debug(f"config: {cfg.model_dump_json()}")

        start = time.perf_counter()
        model = train(dataset, cfg, progress=self._progress, init_only=self.args.init_only)
        elapsed = time.perf_counter() - start
        save_model(model, self.args.out)

        tbl = make_table(("method", "N", "L", "epochs", "final loss", "time"))
        tbl.add_row(
            (
                cfg.method.label,
                cfg.head.n_prompts,
                cfg.ctx_len,
                len(model.train_log),
                f"{model.train_log[-1].loss:.6f}" if model.train_log else "-",
                humanize.precisedelta(datetime.timedelta(seconds=elapsed)),
            )
        )
        self._info(f"Wrote {self.args.out}")
        self._info(tbl.get_string())
        return True


class EvalCommand(PlotCommand):
    """Evaluate a model file on a dataset split and report accuracy."""

    name = "eval"

    def _run(self) -> bool:
        model = load_model(self.args.model)
        dataset = load_dataset(self.args.data)
        report = evaluate(dataset, model, split=self.args.split)
        if self.args.out:
            write_report(report, self.args.out)
            self._debug(f"report written to {self.args.out}")

        tbl = make_table(("class", "name", "accuracy"))
        for k, acc in enumerate(report.per_class):
            name = dataset.class_names[k] if k < len(dataset.class_names) else str(k)
            tbl.add_row((k, name, "-" if acc is None else f"{acc:.4f}"))
        self._info(
            f"{report.method} on {report.split} split: accuracy {report.accuracy:.4f} "
            + f"({report.correct}/{report.n_images})"
        )
        self._info(tbl.get_string())
        self._info(
            f"mean Sinkhorn iterations {report.mean_iterations:.2f}, "
            + f"{report.timing.seconds_per_image * 1e3:.3f} ms per image"
        )
        overhead = overhead_report(report.method, report.timing.overhead)
        for check in overhead.checks():
            self._info(f"- {check['result']} {check['id']}: {check['summary']}")
        return overhead.passed or not self.args.enforce_overhead


def add_command_train(subparsers: argparse._SubParsersAction) -> None:
    parser_train = subparsers.add_parser(
        "train",
        help="Train prompts on a dataset file",
        description="Train context vectors with the chosen head and write a model file",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""Example:
           plot train --data d.plotfs --method plot --n-prompts 4 --out m.json
        """,
    )
    parser_train.add_argument("--data", required=True, help="dataset file")
    parser_train.add_argument("--out", required=True, help="model file to write")
    parser_train.add_argument(
        "--method", choices=list(FLAG_TAGS), help="classification head (default: plot)"
    )
    parser_train.add_argument(
        "--beta", type=float, help="prompt-variance weight for g+v and m+v (default: 0.1)"
    )
    parser_train.add_argument("--seed", type=int, help="run seed (default: 0)")
    add_head_arguments(parser_train)
    add_train_arguments(parser_train)
    parser_train.add_argument(
        "--init-only", action="store_true", help="write the untrained, initialized model"
    )
    add_config_argument(parser_train)
    parser_train.add_argument("--verbose", action="store_true", help="Verbose output")
    parser_train.set_defaults(func=lambda args: TrainCommand(args).execute())


def add_command_eval(subparsers: argparse._SubParsersAction) -> None:
    parser_eval = subparsers.add_parser(
        "eval",
        aliases=["evaluate"],
        help="Evaluate a model file on a dataset file",
    )
    parser_eval.add_argument("--model", required=True, help="model file")
    parser_eval.add_argument("--data", required=True, help="dataset file")
    parser_eval.add_argument(
        "--split", choices=["test", "train"], default="test", help="split to score"
    )
    parser_eval.add_argument("--out", help="write the JSON report here")
    parser_eval.add_argument(
        "--enforce-overhead",
        action="store_true",
        help="exit with status 2 when scoring exceeds 2x the COOP time per image",
    )
    parser_eval.add_argument("--verbose", action="store_true", help="Verbose output")
    parser_eval.set_defaults(func=lambda args: EvalCommand(args).execute())
