# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

import argparse
from pathlib import Path

import humanize

from clyso.plot.api.dataio import save_dataset
from clyso.plot.core.encoders import SynthConfig, gen_synthetic

from .common import (
    SYNTH_OPTIONS,
    PlotCommand,
    add_config_argument,
    add_synth_arguments,
    build_synth_config,
    make_table,
    merge_options,
)


class GenCommand(PlotCommand):
    """Generate a synthetic few-shot dataset file and its manifest."""

    name = "gen"

    def __init__(self, args: argparse.Namespace) -> None:
        super().__init__(args)
        self.config: SynthConfig | None = None

    def _validate_args(self) -> None:
        self.config = build_synth_config(merge_options(self.args, SYNTH_OPTIONS))

    def _run(self) -> bool:
        assert self.config is not None
        cfg = self.config
        dataset = gen_synthetic(cfg)
        out = Path(self.args.out)
        save_dataset(dataset, out)
        self._debug(f"grid {dataset.grid}, {dataset.n_images} images")

        tbl = make_table(("K", "A", "M", "C", "shots", "test", "grid", "seed", "size"))
        h, w = dataset.grid or (dataset.m_locals, 1)
        tbl.add_row(
            (
                cfg.n_classes,
                cfg.n_attributes,
                cfg.m_locals,
                cfg.feat_dim,
                cfg.shots,
                cfg.test_per_class,
                f"{h}x{w}",
                cfg.seed,
                humanize.naturalsize(out.stat().st_size, binary=True),
            )
        )
        self._info(f"Wrote {out} ({dataset.n_images} images)")
        self._info(tbl.get_string())
        return True


def add_command_gen(subparsers: argparse._SubParsersAction) -> None:
    parser_gen = subparsers.add_parser(
        "gen",
        aliases=["generate"],
        help="Generate a synthetic few-shot dataset",
        description="Generate a synthetic few-shot dataset file and its YAML manifest",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""Example:
           plot gen --classes 5 --attributes 4 --shots 16 --seed 0 --out d.plotfs
        """,
    )
    parser_gen.add_argument("--out", required=True, help="dataset file to write")
    parser_gen.add_argument("--seed", type=int, help="generator seed (default: 0)")
    add_synth_arguments(parser_gen)
    add_config_argument(parser_gen)
    parser_gen.add_argument("--verbose", action="store_true", help="Verbose output")
    parser_gen.set_defaults(func=lambda args: GenCommand(args).execute())
