# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

import argparse
import math

from clyso.plot.api.loaders import load_dataset
from clyso.plot.core.ablation import (
    AblationRunner,
    overhead_ratio,
    shots_pivot,
    summarize,
)
from clyso.plot.core.encoders import SynthConfig
from clyso.plot.core.trainer import TrainConfig, overhead_report

from .common import (
    HEAD_OPTIONS,
    SINKHORN_OPTIONS,
    SYNTH_OPTIONS,
    TRAIN_OPTIONS,
    PlotCommand,
    UsageError,
    add_config_argument,
    add_head_arguments,
    add_synth_arguments,
    add_train_arguments,
    build_synth_config,
    build_train_config,
    make_table,
    merge_options,
    pick,
    thread_count,
)

ACCURACY_COLUMNS = ["study", "variant", "n_prompts", "shots", "mean", "std", "seeds"]
TIMING_COLUMNS = [
    "study",
    "variant",
    "n_prompts",
    "shots",
    "train_seconds",
    "eval_seconds_per_image",
]

_SYNTH_KEYS = tuple(k for k in SYNTH_OPTIONS if k != "seed")
_TRAIN_KEYS = tuple(k for k in TRAIN_OPTIONS if k != "seed")
_HEAD_KEYS = tuple(k for k in HEAD_OPTIONS if k != "n_prompts")
ABLATE_CONFIG_KEYS = ("beta", *_SYNTH_KEYS, *_HEAD_KEYS, *SINKHORN_OPTIONS, *_TRAIN_KEYS)


def int_list(value: str) -> list[int]:
    try:
        items = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")
    if not items:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return items


class AblateCommand(PlotCommand):
    """Run the method and prompt-count ablations and write the comparison table."""

    name = "ablate"

    def __init__(self, args: argparse.Namespace) -> None:
        super().__init__(args)
        self.base: TrainConfig | None = None
        self.synth: SynthConfig | None = None
        self.beta: float | None = None
        self.threads = 0

    def _validate_args(self) -> None:
        options = merge_options(self.args, ABLATE_CONFIG_KEYS)
        synth_given = pick(options, _SYNTH_KEYS)
        if self.args.data and synth_given:
            raise UsageError(
                f"--data excludes generator options ({', '.join(sorted(synth_given))})"
            )
        self.beta = options.pop("beta", None)
        self.base = build_train_config(options)
        if not self.args.data:
            self.synth = build_synth_config(options)
        if self.args.shots_list and min(self.args.shots_list) < 1:
            raise UsageError("--shots-list entries must be positive")
        self.threads = thread_count()

    def _run(self) -> bool:
        assert self.base is not None
        runner = AblationRunner(
            self.base,
            seeds=self.args.seeds,
            shots_list=self.args.shots_list,
            dataset=load_dataset(self.args.data) if self.args.data else None,
            synth=self.synth,
            beta=self.beta,
            threads=self.threads,
            verbose=self.verbose,
            output_stream=self.output_stream,
            error_stream=self.error_stream,
        )
        summary = summarize(runner.run())

        if self.args.out:
            summary[ACCURACY_COLUMNS].to_csv(self.args.out, index=False, float_format="%.6f")
            self._debug(f"accuracy table written to {self.args.out}")
        if self.args.timing_out:
            summary[TIMING_COLUMNS].to_csv(self.args.timing_out, index=False, float_format="%.9f")

        tbl = make_table(("study", "variant", "N", "shots", "accuracy", "seeds"))
        for row in summary.itertuples(index=False):
            tbl.add_row(
                (
                    row.study,
                    row.variant,
                    row.n_prompts,
                    row.shots,
                    f"{row.mean:.4f} ± {row.std:.4f}",
                    row.seeds,
                )
            )
        self._info(tbl.get_string())

        if self.args.shots_list:
            pivot = shots_pivot(summary)
            grid = make_table(("study", "variant", "N", *(str(s) for s in pivot.columns)))
            for (study, variant, n_prompts), values in pivot.iterrows():
                grid.add_row(
                    (
                        study,
                        variant,
                        n_prompts,
                        *("-" if math.isnan(v) else f"{v:.4f}" for v in values),
                    )
                )
            self._info(grid.get_string())

        overhead = overhead_report("PLOT", overhead_ratio(summary))
        for check in overhead.checks():
            self._info(f"- {check['result']} {check['id']}: {check['summary']}")
        return overhead.passed or not self.args.enforce_overhead


def add_command_ablate(subparsers: argparse._SubParsersAction) -> None:
    parser_ablate = subparsers.add_parser(
        "ablate",
        help="Compare heads and prompt counts over seeds",
        description=(
            "Train and evaluate PLOT, COOP, G, G+V, G+E, M and M+V, plus PLOT with "
            + "N in {1, 2, 4, 8}, and report mean ± std test accuracy over seeds"
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""Example:
           PLOT_THREADS=4 plot ablate --seeds 0,1,2,3,4 --out ablate.csv
        """,
    )
    parser_ablate.add_argument("--data", help="dataset file (default: generate per seed)")
    parser_ablate.add_argument(
        "--seeds", type=int_list, default=[0], help="comma-separated seeds (default: 0)"
    )
    parser_ablate.add_argument(
        "--shots-list", type=int_list, help="comma-separated shots per class, e.g. 1,2,4,8,16"
    )
    parser_ablate.add_argument("--out", help="accuracy CSV to write")
    parser_ablate.add_argument("--timing-out", help="timing CSV to write")
    parser_ablate.add_argument(
        "--enforce-overhead",
        action="store_true",
        help="exit with status 2 when PLOT scoring exceeds 2x the COOP time per image",
    )
    parser_ablate.add_argument(
        "--beta", type=float, help="prompt-variance weight for G+V and M+V (default: 0.1)"
    )
    add_synth_arguments(parser_ablate)
    add_head_arguments(parser_ablate, with_prompts=False)
    add_train_arguments(parser_ablate)
    add_config_argument(parser_ablate)
    parser_ablate.add_argument("--verbose", action="store_true", help="Verbose output")
    parser_ablate.set_defaults(func=lambda args: AblateCommand(args).execute())
