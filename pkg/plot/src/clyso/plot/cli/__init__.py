# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

from clyso.__version__ import __version__

from .ablate import add_command_ablate
from .checks import add_command_grad_check, add_command_inspect_plan, add_command_oracle_check
from .common import PlotParser
from .data import add_command_gen
from .train import add_command_eval, add_command_train


def main() -> None:
    # Create the top-level parser
    parser = PlotParser(
        prog="plot", description="PLOT: prompt learning with optimal transport."
    )

    subparsers = parser.add_subparsers(
        title="subcommands",
        description="valid subcommands",
        dest="command",
    )
    parser.add_argument(
        "--version",
        "-v",
        "-V",
        action="version",
        version=f"PLOT v{__version__}",
    )
    subparsers.required = True

    help_parser = subparsers.add_parser("help", help="Show this help message and exit")
    help_parser.set_defaults(func=lambda args: parser.print_help())

    add_command_gen(subparsers)
    add_command_train(subparsers)
    add_command_eval(subparsers)
    add_command_ablate(subparsers)
    add_command_oracle_check(subparsers)
    add_command_grad_check(subparsers)
    add_command_inspect_plan(subparsers)

    # Parse the arguments and call the appropriate function
    args = parser.parse_args()
    args.func(args)
