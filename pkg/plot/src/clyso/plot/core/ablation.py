# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

"""
Ablation studies: every head against each other, and PLOT over prompt counts.

Each (variant, shots, seed) run trains and evaluates independently with its own
seeded state, so runs may execute on a thread pool. Results keep job order
regardless of scheduling.
"""

import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Literal, TextIO

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from clyso.plot.core.encoders import Dataset, SynthConfig, gen_synthetic, subsample_shots
from clyso.plot.core.head import Method, MethodTag
from clyso.plot.core.numerics import PlotError
from clyso.plot.core.trainer import TrainConfig, evaluate, train

METHOD_FLAGS = ("plot", "coop", "g", "g+v", "g+e", "m", "m+v")
PROMPT_COUNTS = (1, 2, 4, 8)
DEFAULT_PROMPTS = 4
GROUP_KEYS = ["study", "variant", "n_prompts", "shots"]

Study = Literal["methods", "prompts"]


class Variant(BaseModel):
    model_config = ConfigDict(frozen=True)

    study: Study
    flag: str
    n_prompts: int

    @property
    def label(self) -> str:
        return Method.from_flag(self.flag).label


class RunResult(BaseModel):
    study: Study
    variant: str
    n_prompts: int
    shots: int
    seed: int
    accuracy: float
    train_seconds: float
    eval_seconds_per_image: float


def ablation_variants() -> list[Variant]:
    variants = [
        Variant(
            study="methods",
            flag=flag,
            n_prompts=1 if Method.from_flag(flag).tag == MethodTag.COOP else DEFAULT_PROMPTS,
        )
        for flag in METHOD_FLAGS
    ]
    variants.extend(Variant(study="prompts", flag="plot", n_prompts=n) for n in PROMPT_COUNTS)
    return variants


def min_shots(dataset: Dataset) -> int:
    counts = np.bincount(dataset.labels[: dataset.n_train], minlength=dataset.n_classes)
    return int(counts.min())


class AblationRunner:
    """Train and evaluate every variant over seeds and (optionally) shot counts.

    Without ``dataset`` a fresh synthetic dataset is generated per seed from
    ``synth`` with that seed; with it, seeds only change the training run.
    """

    def __init__(
        self,
        base: TrainConfig,
        seeds: list[int],
        shots_list: list[int] | None = None,
        dataset: Dataset | None = None,
        synth: SynthConfig | None = None,
        beta: float | None = None,
        threads: int = 0,
        verbose: bool = False,
        output_stream: TextIO = sys.stdout,
        error_stream: TextIO = sys.stderr,
    ) -> None:
        if not seeds:
            raise PlotError("at least one seed is required")
        if dataset is None and synth is None:
            raise PlotError("either a dataset or a generator config is required")
        self.base = base
        self.seeds = seeds
        self.shots_list = shots_list
        self.dataset = dataset
        self.synth = synth
        self.beta = beta
        self.threads = threads
        self.verbose = verbose
        self.output_stream = output_stream
        self.error_stream = error_stream

    def _info(self, msg: str) -> None:
        print(msg, file=self.output_stream)

    def _debug(self, msg: str) -> None:
        if self.verbose:
            print(f"DEBUG: {msg}", file=self.error_stream)

    def _dataset_for(self, seed: int) -> Dataset:
        if self.dataset is not None:
            return self.dataset
        assert self.synth is not None
        return gen_synthetic(self.synth.model_copy(update={"seed": seed}))

    def config_for(self, variant: Variant, seed: int) -> TrainConfig:
        method = Method.from_flag(variant.flag)
        if method.tag in (MethodTag.G_V, MethodTag.M_V) and self.beta is not None:
            method = Method.from_flag(variant.flag, self.beta)
        data = self.base.model_dump()
        data["head"]["n_prompts"] = variant.n_prompts
        data.update(method=method.model_dump(), seed=seed)
        return TrainConfig.model_validate(data)

    def _run_one(self, job: tuple[Variant, int, int, Dataset]) -> RunResult:
        variant, shots, seed, dataset = job
        tag = f"{variant.label} N={variant.n_prompts} shots={shots} seed={seed}"
        try:
            start = time.perf_counter()
            model = train(dataset, self.config_for(variant, seed))
            trained = time.perf_counter()
            report = evaluate(dataset, model)
        except PlotError as e:
            raise PlotError(f"{tag}: {e}") from e
        self._debug(f"{tag}: accuracy {report.accuracy:.4f}")
        return RunResult(
            study=variant.study,
            variant=variant.label,
            n_prompts=variant.n_prompts,
            shots=shots,
            seed=seed,
            accuracy=report.accuracy,
            train_seconds=trained - start,
            eval_seconds_per_image=report.timing.seconds_per_image,
        )

    def jobs(self) -> list[tuple[Variant, int, int, Dataset]]:
        variants = ablation_variants()
        jobs: list[tuple[Variant, int, int, Dataset]] = []
        for seed in self.seeds:
            full = self._dataset_for(seed)
            for shots in self.shots_list or [min_shots(full)]:
                data = subsample_shots(full, shots) if self.shots_list else full
                jobs.extend((variant, shots, seed, data) for variant in variants)
        return jobs

    def run(self) -> list[RunResult]:
        jobs = self.jobs()
        self._info(
            f"Running {len(jobs)} trainings"
            + (f" on {self.threads} threads" if self.threads else "")
        )
        if self.threads:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                return list(pool.map(self._run_one, jobs))
        return [self._run_one(job) for job in jobs]


def _population_std(values: pd.Series) -> float:
    return float(values.std(ddof=0))


def summarize(results: list[RunResult]) -> pd.DataFrame:
    """Mean ± population std of accuracy per (study, variant, N, shots)."""
    frame = pd.DataFrame([r.model_dump() for r in results])
    summary = frame.groupby(GROUP_KEYS, sort=False).agg(
        mean=("accuracy", "mean"),
        std=("accuracy", _population_std),
        seeds=("seed", "count"),
        train_seconds=("train_seconds", "mean"),
        eval_seconds_per_image=("eval_seconds_per_image", "mean"),
    )
    return summary.reset_index()


def overhead_ratio(summary: pd.DataFrame) -> float | None:
    """PLOT / COOP evaluation time per image, from the methods study."""
    methods = summary[summary["study"] == "methods"]
    plot = methods[methods["variant"] == "PLOT"]["eval_seconds_per_image"]
    coop = methods[methods["variant"] == "COOP"]["eval_seconds_per_image"]
    if plot.empty or coop.empty or float(coop.mean()) <= 0.0:
        return None
    return float(plot.mean() / coop.mean())


def shots_pivot(summary: pd.DataFrame) -> pd.DataFrame:
    return summary.pivot_table(
        index=["study", "variant", "n_prompts"], columns="shots", values="mean", sort=False
    )
