# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

import argparse
from pathlib import Path

import numpy as np

from clyso.plot.api.dataio import PlanExporter, write_report
from clyso.plot.api.loaders import load_dataset, load_model
from clyso.plot.core.encoders import encode_prompts
from clyso.plot.core.head import MethodTag, plot_distances
from clyso.plot.core.numerics import PlotError
from clyso.plot.core.oracle import (
    DEFAULT_MAX_RESIDUAL,
    OracleStats,
    check_oracle_shape,
    oracle_report,
    oracle_trials,
)
from clyso.plot.core.ot import SinkhornConfig
from clyso.plot.core.result import CheckReport
from clyso.plot.core.trainer import GradCheckReport, check_compatible, grad_check

from .common import PlotCommand, UsageError, make_table

ORACLE_DEFAULTS = {"lam": 0.01, "max_iter": 1000, "delta": 1e-6}
GRAD_THRESHOLD = 1e-4


class OracleCheckCommand(PlotCommand):
    """Compare Sinkhorn costs with the exact oracle on random small instances."""

    name = "oracle-check"

    def __init__(self, args: argparse.Namespace) -> None:
        super().__init__(args)
        self.config: SinkhornConfig | None = None

    def _validate_args(self) -> None:
        check_oracle_shape(self.args.rows, self.args.cols)
        if self.args.trials < 1:
            raise UsageError(f"--trials must be positive, got {self.args.trials}")
        options = dict(ORACLE_DEFAULTS)
        for key in ORACLE_DEFAULTS:
            if getattr(self.args, key) is not None:
                options[key] = getattr(self.args, key)
        self.config = SinkhornConfig(stabilized=bool(self.args.stabilized), **options)

    def _print(self, stats: OracleStats, report: CheckReport) -> None:
        tbl = make_table(("shape", "λ", "trials", "max gap", "mean gap", "max residual"))
        tbl.add_row(
            (
                f"{stats.rows}x{stats.cols}",
                f"{stats.lam:g}",
                stats.trials,
                f"{stats.max_gap:.3e}",
                f"{stats.mean_gap:.3e}",
                f"{stats.max_residual:.3e}",
            )
        )
        self._info(tbl.get_string())
        for check in report.checks():
            self._info(f"- {check['result']} {check['id']}: {check['summary']}")

    def _run(self) -> bool:
        assert self.config is not None
        stats = oracle_trials(
            self.args.rows, self.args.cols, self.args.trials, self.config, self.args.seed
        )
        report = oracle_report(stats, self.args.max_gap, self.args.max_residual)
        if self.args.out:
            Path(self.args.out).write_text(report.dump() + "\n")
        self._print(stats, report)
        return report.passed


def grad_check_report(result: GradCheckReport, threshold: float, seed: int) -> CheckReport:
    report = CheckReport("grad-check")
    report.set_provenance(seed=seed)
    report.add_section("gradient")
    for key, value in result.model_dump().items():
        report.add_info_result("gradient", key, value)
    report.check(
        "gradient",
        "max_relative_error",
        result.max_rel_error <= threshold,
        f"max relative error {result.max_rel_error:.3e} (limit {threshold:g})",
        [],
    )
    return report


class GradCheckCommand(PlotCommand):
    """Audit the analytic context gradient with central finite differences."""

    name = "grad-check"

    def _validate_args(self) -> None:
        if self.args.batch_size < 1:
            raise UsageError(f"--batch-size must be positive, got {self.args.batch_size}")
        if self.args.coords < 1:
            raise UsageError(f"--coords must be positive, got {self.args.coords}")

    def _run(self) -> bool:
        model = load_model(self.args.model)
        dataset = load_dataset(self.args.data)
        check_compatible(dataset, model.n_classes, model.feat_dim)
        split = dataset.train_split() if dataset.n_train else dataset
        batch = split.batch(np.arange(min(self.args.batch_size, split.n_images)))
        result = grad_check(
            model, batch, eps=self.args.eps, n_coords=self.args.coords, seed=self.args.seed
        )
        report = grad_check_report(result, self.args.threshold, self.args.seed)
        if self.args.out:
            Path(self.args.out).write_text(report.dump() + "\n")

        tbl = make_table(("coords", "compared", "zero", "max rel err", "mean rel err"))
        tbl.add_row(
            (
                result.n_sampled,
                result.n_compared,
                result.n_zero,
                f"{result.max_rel_error:.3e}",
                f"{result.mean_rel_error:.3e}",
            )
        )
        self._info(tbl.get_string())
        for check in report.checks():
            self._info(f"- {check['result']} {check['id']}: {check['summary']}")
        return report.passed


class InspectPlanCommand(PlotCommand):
    """Export the transport plans of one image as CSV files and graymaps."""

    name = "inspect-plan"

    def _run(self) -> bool:
        model = load_model(self.args.model)
        dataset = load_dataset(self.args.data)
        check_compatible(dataset, model.n_classes, model.feat_dim)
        i = self.args.image_index
        if not 0 <= i < dataset.n_images:
            raise PlotError(f"image index {i} out of range [0, {dataset.n_images})")
        if model.method.tag != MethodTag.PLOT:
            raise PlotError(
                f"{model.method.label} models have no transport plans; use a PLOT model"
            )

        g_all = encode_prompts(model.bank, model.encoder)
        scores = plot_distances(dataset.features[i], g_all, model.head)
        classes = None if self.args.class_index is None else [self.args.class_index]
        exporter = PlanExporter(
            self.args.out_dir,
            verbose=self.verbose,
            output_stream=self.output_stream,
            error_stream=self.error_stream,
        )
        written = exporter.export(scores, i, dataset.grid, classes)

        tbl = make_table(("class", "distance", "probability", "iterations"))
        assert scores.iterations is not None
        for k in classes if classes is not None else range(model.n_classes):
            tbl.add_row(
                (
                    k,
                    f"{scores.distances[k]:.6f}",
                    f"{scores.probabilities[k]:.4f}",
                    int(scores.iterations[k]),
                )
            )
        self._info(
            f"image {i} (label {int(dataset.labels[i])}): wrote {len(written)} files "
            + f"to {self.args.out_dir}"
        )
        self._info(tbl.get_string())
        return True


def add_command_oracle_check(subparsers: argparse._SubParsersAction) -> None:
    parser_oracle = subparsers.add_parser(
        "oracle-check",
        help="Compare Sinkhorn against exact OT on small random instances",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""Example:
           plot oracle-check --rows 4 --cols 4 --trials 100 --lambda 0.01 --max-gap 0.05
        """,
    )
    parser_oracle.add_argument("--rows", type=int, default=4, help="rows M (default: 4)")
    parser_oracle.add_argument("--cols", type=int, default=4, help="columns N (default: 4)")
    parser_oracle.add_argument(
        "--trials", type=int, default=100, help="random instances (default: 100)"
    )
    parser_oracle.add_argument(
        "--lambda", dest="lam", type=float, help="entropy weight λ (default: 0.01)"
    )
    parser_oracle.add_argument("--max-iter", type=int, help="iteration cap (default: 1000)")
    parser_oracle.add_argument("--delta", type=float, help="stop threshold (default: 1e-6)")
    parser_oracle.add_argument(
        "--stabilized", action="store_true", help="use the log-domain solver"
    )
    parser_oracle.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    parser_oracle.add_argument("--max-gap", type=float, help="fail above this max gap")
    parser_oracle.add_argument(
        "--max-residual",
        type=float,
        default=DEFAULT_MAX_RESIDUAL,
        help=f"fail above this L1 marginal residual (default: {DEFAULT_MAX_RESIDUAL})",
    )
    parser_oracle.add_argument("--out", help="write the JSON report here")
    parser_oracle.add_argument("--verbose", action="store_true", help="Verbose output")
    parser_oracle.set_defaults(func=lambda args: OracleCheckCommand(args).execute())


def add_command_grad_check(subparsers: argparse._SubParsersAction) -> None:
    parser_grad = subparsers.add_parser(
        "grad-check", help="Check the analytic gradient with finite differences"
    )
    parser_grad.add_argument("--model", required=True, help="model file")
    parser_grad.add_argument("--data", required=True, help="dataset file")
    parser_grad.add_argument(
        "--batch-size", type=int, default=8, help="training images in the batch (default: 8)"
    )
    parser_grad.add_argument(
        "--eps", type=float, default=1e-5, help="finite-difference step (default: 1e-5)"
    )
    parser_grad.add_argument(
        "--coords", type=int, default=100, help="sampled ctx coordinates (default: 100)"
    )
    parser_grad.add_argument("--seed", type=int, default=0, help="sampling seed (default: 0)")
    parser_grad.add_argument(
        "--threshold",
        type=float,
        default=GRAD_THRESHOLD,
        help=f"fail above this max relative error (default: {GRAD_THRESHOLD:g})",
    )
    parser_grad.add_argument("--out", help="write the JSON report here")
    parser_grad.add_argument("--verbose", action="store_true", help="Verbose output")
    parser_grad.set_defaults(func=lambda args: GradCheckCommand(args).execute())


def add_command_inspect_plan(subparsers: argparse._SubParsersAction) -> None:
    parser_inspect = subparsers.add_parser(
        "inspect-plan", help="Export transport-plan heatmaps of one image"
    )
    parser_inspect.add_argument("--model", required=True, help="PLOT model file")
    parser_inspect.add_argument("--data", required=True, help="dataset file")
    parser_inspect.add_argument(
        "--image-index", type=int, required=True, help="image index in the dataset file"
    )
    parser_inspect.add_argument(
        "--class", dest="class_index", type=int, help="only this class (default: all)"
    )
    parser_inspect.add_argument(
        "--out-dir", default="plans", help="output directory (default: plans)"
    )
    parser_inspect.add_argument("--verbose", action="store_true", help="Verbose output")
    parser_inspect.set_defaults(func=lambda args: InspectPlanCommand(args).execute())
