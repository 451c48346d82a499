# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

"""
Two-stage few-shot training, evaluation and the gradient audit.

Each optimizer step first solves the transport plans with the prompts fixed
(inside ``loss_and_grad``) and then applies plain SGD to the context vectors
with the plans held constant. The schedule is a constant warmup rate for the
first epoch followed by cosine annealing.
"""

from __future__ import annotations

import math
import time
from collections.abc import Callable
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from clyso.plot.core.encoders import (
    Batch,
    Dataset,
    PromptBank,
    TextEncoder,
    Vocabulary,
    class_tokens_for,
    encode_prompts,
    encode_prompts_backward,
    init_context,
)
from clyso.plot.core.head import (
    HeadConfig,
    Method,
    MethodTag,
    frozen_plan_loss,
    head_forward,
    loss_and_grad,
    score_batch,
)
from clyso.plot.core.numerics import ArrayModel, Mat, PlotError, ShapeError, make_rng
from clyso.plot.core.result import CheckReport

EVAL_CHUNK = 256
OVERHEAD_LIMIT = 2.0
GRAD_ZERO_TOL = 1e-6
GRAD_EPS_RANGE = (1e-7, 1e-3)


class TrainingError(PlotError):
    """Raised when a training step fails; the message names epoch and batch."""

    def __init__(self, epoch: int, batch: int, cause: Exception) -> None:
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"epoch {epoch}, batch {batch}: {cause}")


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(default=0.002, gt=0)
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=32, ge=1)
    warmup_lr: float = Field(default=1e-5, gt=0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    method: Method = Field(default_factory=Method)
    head: HeadConfig = Field(default_factory=HeadConfig)
    shuffle: bool = True
    ctx_len: int = Field(default=16, ge=1)
    embed_dim: int = Field(default=64, ge=1)
    encoder_seed: int = Field(default=0, ge=0, lt=2**64)
    vocabulary: Vocabulary = "random"

    @model_validator(mode="after")
    def _check_prompts(self) -> TrainConfig:
        if self.method.tag == MethodTag.COOP and self.head.n_prompts != 1:
            raise ValueError(f"COOP learns a single prompt, got n_prompts={self.head.n_prompts}")
        return self


class EpochLog(BaseModel):
    model_config = ConfigDict(frozen=True)

    epoch: int
    loss: float
    lr: float


class ModelState(ArrayModel):
    bank: PromptBank
    encoder: TextEncoder
    head: HeadConfig
    method: Method
    train_log: list[EpochLog] = Field(default_factory=list)
    provenance: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_dims(self) -> ModelState:
        if self.bank.embed_dim != self.encoder.embed_dim:
            raise ValueError(
                f"prompt embedding dim {self.bank.embed_dim} != "
                + f"encoder input dim {self.encoder.embed_dim}"
            )
        if self.bank.n_prompts != self.head.n_prompts:
            raise ValueError(
                f"bank holds {self.bank.n_prompts} prompts, head expects {self.head.n_prompts}"
            )
        return self

    @property
    def n_classes(self) -> int:
        return self.bank.n_classes

    @property
    def feat_dim(self) -> int:
        return self.encoder.feat_dim


class Timing(BaseModel):
    total_seconds: float
    seconds_per_image: float
    reference_seconds_per_image: float | None = None

    @property
    def overhead(self) -> float | None:
        """Per-image scoring time relative to a single-prompt COOP head."""
        ref = self.reference_seconds_per_image
        if ref is None or ref <= 0.0:
            return None
        return self.seconds_per_image / ref


class EvalReport(BaseModel):
    method: str
    split: str
    n_images: int
    correct: int
    accuracy: float
    per_class: list[float | None]
    mean_iterations: float
    timing: Timing
    provenance: dict[str, Any] = Field(default_factory=dict)

    def deterministic(self) -> dict[str, Any]:
        return self.model_dump(exclude={"timing"})


class GradCheckReport(BaseModel):
    eps: float
    zero_tol: float
    n_sampled: int
    n_compared: int
    n_zero: int
    max_rel_error: float
    mean_rel_error: float


def lr_at(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise PlotError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch == 0:
        return config.warmup_lr
    # anneal over epochs 1..E-1 so the last epoch sits at cos(pi)
    span = max(1, config.epochs - 2)
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * (epoch - 1) / span))


def sgd_step(params: Mat, grads: Mat, lr: float) -> Mat:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeError(f"parameter shape {params.shape} != gradient shape {grads.shape}")
    if not lr > 0:
        raise PlotError(f"learning rate must be positive, got {lr}")
    return params - lr * grads


def check_compatible(dataset: Dataset, n_classes: int, feat_dim: int) -> None:
    if dataset.n_classes != n_classes or dataset.feat_dim != feat_dim:
        raise ShapeError(
            f"model expects K={n_classes} C={feat_dim}, dataset has "
            + f"K={dataset.n_classes} C={dataset.feat_dim} "
            + f"(features {dataset.n_images}×{dataset.m_locals}×{dataset.feat_dim})"
        )


def init_model(dataset: Dataset, config: TrainConfig, rng: np.random.Generator) -> ModelState:
    """Fresh model: frozen encoder and class tokens, initial context from ``rng``."""
    encoder = TextEncoder.create(config.embed_dim, dataset.feat_dim, config.encoder_seed)
    tokens = class_tokens_for(
        config.vocabulary,
        dataset.n_classes,
        dataset.concepts,
        encoder,
        config.ctx_len,
        seed=config.encoder_seed,
    )
    ctx = init_context(
        config.method.init_strategy,
        config.head.n_prompts,
        config.ctx_len,
        config.embed_dim,
        rng,
    )
    return ModelState(
        bank=PromptBank(ctx=ctx, class_tokens=tokens),
        encoder=encoder,
        head=config.head,
        method=config.method,
        provenance={
            "seed": config.seed,
            "train_config": config.model_dump(mode="json"),
            "dataset": dataset.provenance,
        },
    )


def train(
    dataset: Dataset,
    config: TrainConfig,
    progress: Callable[[EpochLog], None] | None = None,
    init_only: bool = False,
) -> ModelState:
    """Train the context vectors on the training split of ``dataset``.

    The same generator initializes the context and shuffles the minibatches, so
    a run is fully determined by (dataset, config).
    """
    split = dataset.train_split()
    if split.n_images == 0:
        raise PlotError("training split is empty")
    rng = make_rng(config.seed)
    model = init_model(dataset, config, rng)
    if init_only:
        return model

    bank = model.bank
    n = split.n_images
    log: list[EpochLog] = []
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        for index, start in enumerate(range(0, n, config.batch_size)):
            picked = order[start : start + config.batch_size]
            try:
                loss, grad = loss_and_grad(
                    split.batch(picked), bank, model.encoder, config.method, config.head
                )
            except PlotError as e:
                raise TrainingError(epoch, index, e) from e
            bank = bank.with_ctx(sgd_step(bank.ctx, grad, lr))
            total += loss * len(picked)
        entry = EpochLog(epoch=epoch, loss=total / n, lr=lr)
        log.append(entry)
        if progress is not None:
            progress(entry)

    return model.model_copy(update={"bank": bank, "train_log": log})


def _reference_seconds(data: Dataset, g_all: Mat, head: HeadConfig) -> float:
    """Per-image time of COOP scoring with the first prompt of each class."""
    coop = Method(tag=MethodTag.COOP)
    single = head.model_copy(update={"n_prompts": 1})
    g_first = np.ascontiguousarray(g_all[:, :1, :])
    start = time.perf_counter()
    for lo in range(0, data.n_images, EVAL_CHUNK):
        batch = data.batch(np.arange(lo, min(lo + EVAL_CHUNK, data.n_images)))
        np.argmax(score_batch(batch, g_first, coop, single).probabilities, axis=1)
    return (time.perf_counter() - start) / data.n_images


def overhead_report(
    method: str, overhead: float | None, limit: float = OVERHEAD_LIMIT
) -> CheckReport:
    report = CheckReport("inference-overhead")
    report.set_provenance(method=method, limit=limit)
    report.add_section("inference")
    report.add_info_result("inference", "overhead", overhead)
    if overhead is not None:
        report.check(
            "inference",
            "overhead_bound",
            overhead <= limit,
            f"{method} scores at {overhead:.2f}x the COOP time per image (limit {limit:g}x)",
            [],
        )
    return report


def evaluate(dataset: Dataset, model: ModelState, split: str = "test") -> EvalReport:
    """Top-1 accuracy of argmax-probability classification on one split."""
    check_compatible(dataset, model.n_classes, model.feat_dim)
    if split == "test":
        data = dataset.test_split()
    elif split == "train":
        data = dataset.train_split()
    else:
        raise PlotError(f"unknown split '{split}', expected 'test' or 'train'")
    if data.n_images == 0:
        raise PlotError(f"{split} split is empty")

    start = time.perf_counter()
    g_all = encode_prompts(model.bank, model.encoder)
    predictions: list[np.ndarray] = []
    iterations: list[np.ndarray] = []
    for lo in range(0, data.n_images, EVAL_CHUNK):
        scores = score_batch(
            data.batch(np.arange(lo, min(lo + EVAL_CHUNK, data.n_images))),
            g_all,
            model.method,
            model.head,
        )
        predictions.append(np.argmax(scores.probabilities, axis=1))
        if scores.iterations is not None:
            iterations.append(scores.iterations.ravel())
    elapsed = time.perf_counter() - start
    reference = _reference_seconds(data, g_all, model.head)

    predicted = np.concatenate(predictions)
    hits = predicted == data.labels
    per_class: list[float | None] = []
    for k in range(data.n_classes):
        members = data.labels == k
        per_class.append(float(hits[members].mean()) if members.any() else None)
    return EvalReport(
        method=model.method.label,
        split=split,
        n_images=data.n_images,
        correct=int(hits.sum()),
        accuracy=float(hits.mean()),
        per_class=per_class,
        mean_iterations=float(np.concatenate(iterations).mean()) if iterations else 0.0,
        timing=Timing(
            total_seconds=elapsed,
            seconds_per_image=elapsed / data.n_images,
            reference_seconds_per_image=reference,
        ),
        provenance={"model": model.provenance, "dataset": dataset.provenance},
    )


def grad_check(
    model: ModelState,
    batch: Batch,
    eps: float = 1e-5,
    n_coords: int = 100,
    seed: int = 0,
    zero_tol: float = GRAD_ZERO_TOL,
) -> GradCheckReport:
    """Compare the analytic ctx gradient against central differences.

    PLOT plans are solved once at the current context and frozen for every
    perturbed evaluation. Coordinates where both gradients are below
    ``zero_tol`` are counted as zero and left out of the error statistics.
    """
    lo, hi = GRAD_EPS_RANGE
    if not lo <= eps <= hi:
        raise PlotError(f"finite-difference step {eps} outside [{lo}, {hi}]")
    bank, enc = model.bank, model.encoder
    fwd = head_forward(batch, encode_prompts(bank, enc), model.method, model.head)
    assert fwd.grad_g is not None
    plans = fwd.scores.plans
    analytic = encode_prompts_backward(fwd.grad_g, bank, enc)

    ctx = bank.ctx
    picks = np.sort(make_rng(seed).choice(ctx.size, size=min(n_coords, ctx.size), replace=False))
    errors: list[float] = []
    n_zero = 0
    for flat in picks:
        shifted = []
        for step in (eps, -eps):
            moved = ctx.copy()
            moved.flat[flat] += step
            shifted.append(
                frozen_plan_loss(batch, bank.with_ctx(moved), enc, model.method, model.head, plans)
            )
        numeric = (shifted[0] - shifted[1]) / (2.0 * eps)
        exact = float(analytic.flat[flat])
        scale = max(abs(exact), abs(numeric))
        if scale < zero_tol:
            n_zero += 1
            continue
        errors.append(abs(exact - numeric) / scale)

    return GradCheckReport(
        eps=eps,
        zero_tol=zero_tol,
        n_sampled=int(picks.size),
        n_compared=len(errors),
        n_zero=n_zero,
        max_rel_error=max(errors, default=0.0),
        mean_rel_error=float(np.mean(errors)) if errors else 0.0,
    )
