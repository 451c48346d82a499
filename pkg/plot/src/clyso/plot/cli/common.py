# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

import argparse
import os
import sys
from collections.abc import Iterable
from typing import Any

import prettytable
from pydantic import ValidationError

from clyso.plot.api.loaders import DataLoadingError, load_config
from clyso.plot.core.encoders import SynthConfig
from clyso.plot.core.head import HeadConfig, Method, MethodTag
from clyso.plot.core.numerics import PlotError
from clyso.plot.core.ot import SinkhornConfig
from clyso.plot.core.trainer import TrainConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

THREADS_ENV = "PLOT_THREADS"

# flag dest -> SynthConfig field
SYNTH_OPTIONS = (
    "n_classes",
    "n_attributes",
    "shots",
    "test_per_class",
    "m_locals",
    "feat_dim",
    "noise_sigma",
    "background_prototypes",
    "background_prob",
    "prototypes",
    "view_strength",
    "seed",
)
SINKHORN_OPTIONS = ("lam", "max_iter", "delta", "stabilized")
HEAD_OPTIONS = ("tau", "n_prompts", "distance")
TRAIN_OPTIONS = (
    "lr",
    "epochs",
    "batch_size",
    "warmup_lr",
    "seed",
    "shuffle",
    "ctx_len",
    "embed_dim",
    "encoder_seed",
    "vocabulary",
)


class UsageError(Exception):
    """Raised for invalid command-line or config-file options."""

    pass


class PlotParser(argparse.ArgumentParser):
    def __init__(self, *args: Any, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"plot: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 0
    try:
        threads = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got '{raw}'")
    if threads < 0:
        raise UsageError(f"{THREADS_ENV} must not be negative, got {threads}")
    return threads


def merge_options(args: argparse.Namespace, keys: Iterable[str]) -> dict[str, Any]:
    """Defaults < YAML ``--config`` file < explicit flags.

    Only options that were actually given end up in the result; missing ones fall
    back to the defaults of the config models.
    """
    keys = tuple(keys)
    options: dict[str, Any] = {}
    config_path = getattr(args, "config", None)
    if config_path:
        from_file = load_config(config_path)
        unknown = sorted(set(from_file) - set(keys))
        if unknown:
            raise UsageError(f"unknown keys in config file '{config_path}': {', '.join(unknown)}")
        options.update(from_file)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            options[key] = value
    return options


def pick(options: dict[str, Any], keys: Iterable[str]) -> dict[str, Any]:
    return {k: options[k] for k in keys if k in options}


def build_synth_config(options: dict[str, Any]) -> SynthConfig:
    return SynthConfig(**pick(options, SYNTH_OPTIONS))


def build_head_config(options: dict[str, Any], method: Method) -> HeadConfig:
    head = pick(options, HEAD_OPTIONS)
    head.setdefault("n_prompts", 1 if method.tag == MethodTag.COOP else 4)
    return HeadConfig(sinkhorn=SinkhornConfig(**pick(options, SINKHORN_OPTIONS)), **head)


def build_train_config(options: dict[str, Any]) -> TrainConfig:
    method = Method.from_flag(options.get("method", "plot"), options.get("beta"))
    return TrainConfig(
        method=method,
        head=build_head_config(options, method),
        **pick(options, TRAIN_OPTIONS),
    )


def add_config_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        metavar="FILE",
        help="YAML file with option values; explicit flags take precedence",
    )


def add_synth_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("synthetic generator")
    options = (
        ("--classes", "n_classes", int, "number of classes K (default: 5)"),
        ("--attributes", "n_attributes", int, "attribute views per class A (default: 4)"),
        ("--shots", "shots", int, "training images per class (default: 16)"),
        ("--test", "test_per_class", int, "test images per class (default: 20)"),
        ("--m", "m_locals", int, "local features per image M (default: 49)"),
        ("--dim", "feat_dim", int, "feature dimension C (default: 64)"),
        ("--sigma", "noise_sigma", float, "feature noise (default: 0.1)"),
        ("--background", "background_prototypes", int, "background prototypes (default: 8)"),
        ("--background-prob", "background_prob", float, "background slot rate (default: 0.3)"),
        ("--view-strength", "view_strength", float, "view weight, views layout (default: 1)"),
    )
    for flag, dest, kind, text in options:
        group.add_argument(flag, dest=dest, type=kind, help=text)
    group.add_argument(
        "--prototypes",
        choices=["independent", "views"],
        help="attribute prototypes: one Gaussian each, or class concept plus a shared view "
        + "(default: independent)",
    )


def add_head_arguments(parser: argparse.ArgumentParser, with_prompts: bool = True) -> None:
    group = parser.add_argument_group("head and solver")
    if with_prompts:
        group.add_argument(
            "--n-prompts", type=int, help="prompts per class N (default: 4, 1 for coop)"
        )
    group.add_argument("--tau", type=float, help="softmax temperature (default: 0.01)")
    group.add_argument("--lambda", dest="lam", type=float, help="entropy weight λ (default: 0.1)")
    group.add_argument("--max-iter", type=int, help="Sinkhorn iteration cap (default: 100)")
    group.add_argument("--delta", type=float, help="Sinkhorn early-stop threshold (default: 0.01)")
    group.add_argument(
        "--stabilized",
        action="store_const",
        const=True,
        help="use the log-domain Sinkhorn solver",
    )
    group.add_argument(
        "--distance",
        choices=["transport", "entropic"],
        help="PLOT distance: ⟨T,C⟩ or ⟨T,C⟩ - λh(T) (default: transport)",
    )


def add_train_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training")
    group.add_argument("--lr", type=float, help="initial learning rate (default: 0.002)")
    group.add_argument("--epochs", type=int, help="training epochs (default: 50)")
    group.add_argument("--batch-size", type=int, help="minibatch size (default: 32)")
    group.add_argument("--warmup-lr", type=float, help="learning rate of epoch 0 (default: 1e-5)")
    group.add_argument(
        "--no-shuffle",
        dest="shuffle",
        action="store_const",
        const=False,
        help="iterate minibatches in dataset order",
    )
    group.add_argument("--ctx-len", type=int, help="context tokens per prompt L (default: 16)")
    group.add_argument("--embed-dim", type=int, help="token embedding dim d_e (default: 64)")
    group.add_argument("--encoder-seed", type=int, help="frozen text encoder seed (default: 0)")
    group.add_argument(
        "--vocabulary",
        choices=["random", "dataset", "blank"],
        help="class-token vocabulary (default: random)",
    )


def make_table(fields: Iterable[str]) -> prettytable.PrettyTable:
    tbl = prettytable.PrettyTable(
        tuple(fields), hrules=prettytable.HEADER, vrules=prettytable.NONE
    )
    tbl.align = "r"
    return tbl


class PlotCommand:
    """Base for subcommand workflows.

    ``_validate_args`` builds every config model before any work starts; its
    failures are usage errors. Failures in ``_run`` are runtime errors.
    """

    name = "command"

    def __init__(self, args: argparse.Namespace) -> None:
        self.args = args
        self.verbose: bool = bool(getattr(args, "verbose", False))
        self.output_stream = sys.stdout
        self.error_stream = sys.stderr

    def _info(self, msg: str) -> None:
        print(msg, file=self.output_stream)

    def _debug(self, msg: str) -> None:
        if self.verbose:
            print(f"DEBUG: {msg}", file=self.error_stream)

    def _error(self, msg: str) -> None:
        print(f"ERROR: {msg}", file=self.error_stream)

    def execute(self) -> None:
        try:
            self._validate_args()
        except (UsageError, ValidationError, PlotError) as e:
            print(f"plot {self.name}: invalid options: {e}", file=sys.stderr)
            sys.exit(EXIT_USAGE)
        except DataLoadingError as e:
            print(f"plot {self.name}: {e}", file=sys.stderr)
            sys.exit(EXIT_USAGE)

        try:
            ok = self._run()
        except DataLoadingError as e:
            print(f"Error loading data: {e}", file=sys.stderr)
            sys.exit(EXIT_RUNTIME)
        except Exception as e:
            print(f"Error during {self.name}: {e}", file=sys.stderr)
            sys.exit(EXIT_RUNTIME)
        if not ok:
            sys.exit(EXIT_RUNTIME)

    def _validate_args(self) -> None:
        pass

    def _run(self) -> bool:
        raise NotImplementedError
