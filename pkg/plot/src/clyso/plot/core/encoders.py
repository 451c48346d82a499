# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

"""
Toy encoders standing in for a pretrained vision-language model.

Text side: a prompt for class k and context n is the token sequence
(ω_n,1 .. ω_n,L, c_k). The frozen encoder mean-pools the L+1 tokens, applies a
frozen linear map and L2-normalizes the result. Only the context vectors ω are
trainable; class tokens c_k come from the class vocabulary.

Visual side: ``gen_synthetic`` builds few-shot datasets of M local features per
image. Every class owns A attribute prototypes; local slots show an attribute
prototype of the image's class or one of the shared background prototypes, plus
Gaussian noise. With ``independent`` prototypes each one is its own Gaussian
direction and the class concept is their normalized mean. With ``views`` the
classes share A view directions and a prototype is the normalized sum of the
class concept and one view.

Vocabularies: ``random`` draws class tokens from a seeded stream that knows
nothing about the dataset, so an untrained model ranks classes at random and
only the learned context carries class evidence. ``dataset`` maps each class
token onto the class concept, a zero-shot starting point. ``blank`` uses zero
class tokens, so every class scores the same.
"""

from __future__ import annotations

import hashlib
import math
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from clyso.plot.core.numerics import (
    UNIT_NORM_TOLERANCE,
    ArrayModel,
    Mat,
    PlotError,
    Rng,
    ShapeError,
    ZeroNormError,
    l2_normalize_rows,
    make_rng,
    row_norms,
)

CTX_INIT_STD = 0.02
CLASS_TOKEN_NORM = 0.2
CLASS_TOKEN_SPREAD = (0.5, 1.5)

PRESETS = ("a photo of a", "this is a photo", "this is a", "one picture of a")

InitStrategy = Literal["random", "preset_ensemble"]
Vocabulary = Literal["random", "dataset", "blank"]
PrototypeLayout = Literal["independent", "views"]


class PromptBank(ArrayModel):
    ctx: np.ndarray
    class_tokens: np.ndarray

    @model_validator(mode="after")
    def _check_shapes(self) -> PromptBank:
        if self.ctx.ndim != 3 or self.class_tokens.ndim != 2:
            raise ValueError(
                f"ctx must be N×L×d_e and class tokens K×d_e, got {self.ctx.shape} "
                + f"and {self.class_tokens.shape}"
            )
        if self.ctx.shape[2] != self.class_tokens.shape[1]:
            raise ValueError(
                f"embedding dims differ: ctx {self.ctx.shape[2]}, "
                + f"class tokens {self.class_tokens.shape[1]}"
            )
        if not (np.all(np.isfinite(self.ctx)) and np.all(np.isfinite(self.class_tokens))):
            raise ValueError("prompt bank contains non-finite values")
        return self

    @property
    def n_prompts(self) -> int:
        return int(self.ctx.shape[0])

    @property
    def ctx_len(self) -> int:
        return int(self.ctx.shape[1])

    @property
    def embed_dim(self) -> int:
        return int(self.ctx.shape[2])

    @property
    def n_classes(self) -> int:
        return int(self.class_tokens.shape[0])

    def with_ctx(self, ctx: Mat) -> PromptBank:
        if ctx.shape != self.ctx.shape:
            raise ShapeError(f"ctx shape {ctx.shape} != {self.ctx.shape}")
        return PromptBank(ctx=ctx, class_tokens=self.class_tokens)


class TextEncoder(ArrayModel):
    proj: np.ndarray

    @field_validator("proj")
    @classmethod
    def _check_proj(cls, value: np.ndarray) -> np.ndarray:
        if value.ndim != 2 or not np.all(np.isfinite(value)):
            raise ValueError("projection must be a finite d_e×C matrix")
        return value

    @classmethod
    def create(cls, embed_dim: int, feat_dim: int, seed: int) -> TextEncoder:
        rng = make_rng(seed)
        proj = rng.standard_normal((embed_dim, feat_dim)) / math.sqrt(embed_dim)
        return cls(proj=proj)

    @property
    def embed_dim(self) -> int:
        return int(self.proj.shape[0])

    @property
    def feat_dim(self) -> int:
        return int(self.proj.shape[1])


def _encode(bank: PromptBank, enc: TextEncoder) -> tuple[Mat, Mat]:
    if bank.embed_dim != enc.embed_dim:
        raise ShapeError(
            f"prompt embedding dim {bank.embed_dim} != encoder input dim {enc.embed_dim}"
        )
    ctx_sum = bank.ctx.sum(axis=1)
    pooled = (ctx_sum[None, :, :] + bank.class_tokens[:, None, :]) / (bank.ctx_len + 1)
    x = pooled @ enc.proj
    norms = row_norms(x)
    zero = np.argwhere(norms == 0.0)
    if zero.size:
        raise ZeroNormError(tuple(int(i) for i in zero[0]), what="pooled prompt (class, prompt)")
    return x / norms[..., None], norms


def encode_prompts(bank: PromptBank, enc: TextEncoder) -> Mat:
    """Prompt features G as a K×N×C stack of unit rows."""
    g, _ = _encode(bank, enc)
    return g


def encode_prompts_backward(grad_g: Mat, bank: PromptBank, enc: TextEncoder) -> Mat:
    """Gradient w.r.t. ctx for an upstream gradient on the K×N×C prompt features."""
    g, norms = _encode(bank, enc)
    grad_g = np.asarray(grad_g, dtype=np.float64)
    if grad_g.shape != g.shape:
        raise ShapeError(f"upstream gradient shape {grad_g.shape} != {g.shape}")
    radial = np.sum(g * grad_g, axis=-1, keepdims=True)
    dx = (grad_g - g * radial) / norms[..., None]
    dpool = dx @ enc.proj.T
    per_token = dpool.sum(axis=0) / (bank.ctx_len + 1)
    return np.repeat(per_token[:, None, :], bank.ctx_len, axis=1)


def _named_seed(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def init_context(
    strategy: InitStrategy, n_prompts: int, ctx_len: int, embed_dim: int, rng: Rng
) -> Mat:
    if min(n_prompts, ctx_len, embed_dim) < 1:
        raise PlotError(
            f"context dims must be positive, got N={n_prompts} L={ctx_len} d_e={embed_dim}"
        )
    if strategy == "random":
        return rng.normal(0.0, CTX_INIT_STD, size=(n_prompts, ctx_len, embed_dim))
    if strategy == "preset_ensemble":
        if n_prompts > len(PRESETS):
            raise PlotError(
                f"preset ensemble has {len(PRESETS)} presets, cannot build {n_prompts} prompts"
            )
        return np.stack(
            [
                make_rng(_named_seed(name)).normal(
                    0.0, CTX_INIT_STD, size=(ctx_len, embed_dim)
                )
                for name in PRESETS[:n_prompts]
            ]
        )
    raise PlotError(f"unknown context initialization '{strategy}'")


def _tokens_onto(targets: Mat, enc: TextEncoder, ctx_len: int) -> Mat:
    """Tokens whose pooled share maps onto ``targets``: projᵀ c_k / (L+1) = target_k."""
    tokens, *_ = np.linalg.lstsq(enc.proj.T, targets.T, rcond=None)
    return (ctx_len + 1) * tokens.T


def class_tokens_for(
    vocabulary: Vocabulary,
    n_classes: int,
    concepts: Mat | None,
    enc: TextEncoder,
    ctx_len: int,
    seed: int = 0,
) -> Mat:
    """Frozen class tokens for a vocabulary.

    ``random`` targets seeded Gaussian directions with norms spread around
    ``CLASS_TOKEN_NORM``; ``dataset`` targets the class concepts.
    """
    if vocabulary == "blank":
        return np.zeros((n_classes, enc.embed_dim))
    if vocabulary == "random":
        rng = make_rng(_named_seed(f"vocabulary/{seed}"))
        directions = l2_normalize_rows(rng.standard_normal((n_classes, enc.feat_dim)))
        norms = CLASS_TOKEN_NORM * rng.uniform(*CLASS_TOKEN_SPREAD, size=n_classes)
        return _tokens_onto(directions * norms[:, None], enc, ctx_len)
    if concepts is None:
        raise PlotError("dataset carries no class concepts; cannot build class tokens")
    if concepts.shape[0] != n_classes:
        raise ShapeError(f"{concepts.shape[0]} class concepts for {n_classes} classes")
    if concepts.shape[1] != enc.feat_dim:
        raise ShapeError(
            f"class concepts have dim {concepts.shape[1]}, encoder outputs {enc.feat_dim}"
        )
    return _tokens_onto(concepts, enc, ctx_len)


class SynthConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_classes: int = Field(default=5, ge=1)
    n_attributes: int = Field(default=4, ge=1)
    shots: int = Field(default=16, ge=1)
    test_per_class: int = Field(default=20, ge=1)
    m_locals: int = Field(default=49, ge=1)
    feat_dim: int = Field(default=64, ge=1)
    noise_sigma: float = Field(default=0.1, ge=0)
    background_prototypes: int = Field(default=8, ge=0)
    background_prob: float = Field(default=0.3, ge=0, lt=1)
    prototypes: PrototypeLayout = "independent"
    view_strength: float = Field(default=1.0, ge=0)
    seed: int = Field(default=0, ge=0, lt=2**64)


class Batch(ArrayModel):
    features: np.ndarray
    global_features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


class Dataset(ArrayModel):
    """Images with M local features, a global feature and a label.

    The first ``n_train`` images form the training split, the rest the test split.
    """

    features: np.ndarray
    global_features: np.ndarray
    labels: np.ndarray
    n_classes: int = Field(ge=1)
    n_train: int = Field(ge=0)
    concepts: np.ndarray | None = None
    grid: tuple[int, int] | None = None
    class_names: list[str] = Field(default_factory=list)
    provenance: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self) -> Dataset:
        n = self.labels.shape[0]
        if self.features.ndim != 3 or self.features.shape[0] != n:
            raise ValueError(f"features must be n×M×C, got {self.features.shape}")
        if self.global_features.shape != (n, self.features.shape[2]):
            raise ValueError(
                f"global features must be {n}×{self.features.shape[2]}, "
                + f"got {self.global_features.shape}"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if self.n_train > n:
            raise ValueError(f"n_train {self.n_train} exceeds {n} images")
        for name, rows in (("local", self.features), ("global", self.global_features)):
            if rows.size and np.max(np.abs(row_norms(rows) - 1.0)) > UNIT_NORM_TOLERANCE:
                raise ValueError(f"{name} features must be unit-norm")
        if self.grid is not None and self.grid[0] * self.grid[1] != self.features.shape[1]:
            raise ValueError(f"grid {self.grid} does not cover M={self.features.shape[1]}")
        return self

    @property
    def n_images(self) -> int:
        return int(self.labels.shape[0])

    @property
    def m_locals(self) -> int:
        return int(self.features.shape[1])

    @property
    def feat_dim(self) -> int:
        return int(self.features.shape[2])

    def subset(self, indices: Any, n_train: int) -> Dataset:
        idx = np.asarray(indices, dtype=np.intp)
        return self.model_copy(
            update={
                "features": self.features[idx],
                "global_features": self.global_features[idx],
                "labels": self.labels[idx],
                "n_train": n_train,
            }
        )

    def train_split(self) -> Dataset:
        return self.subset(np.arange(self.n_train), self.n_train)

    def test_split(self) -> Dataset:
        return self.subset(np.arange(self.n_train, self.n_images), 0)

    def batch(self, indices: Any) -> Batch:
        idx = np.asarray(indices, dtype=np.intp)
        return Batch(
            features=self.features[idx],
            global_features=self.global_features[idx],
            labels=self.labels[idx],
        )


def grid_for(m: int) -> tuple[int, int]:
    """Most square H×W factorization of M (H ≤ W)."""
    h = max(d for d in range(1, math.isqrt(m) + 1) if m % d == 0)
    return h, m // h


def synth_prototypes(cfg: SynthConfig) -> tuple[Mat, Mat, Mat]:
    """Class concepts (K×C), attribute prototypes (K×A×C), background (bg×C)."""
    rng = make_rng(cfg.seed)
    k, a, c = cfg.n_classes, cfg.n_attributes, cfg.feat_dim
    if cfg.prototypes == "independent":
        prototypes = l2_normalize_rows(rng.standard_normal((k, a, c)))
        concepts = l2_normalize_rows(prototypes.mean(axis=1))
    else:
        concepts = l2_normalize_rows(rng.standard_normal((k, c)))
        views = l2_normalize_rows(rng.standard_normal((a, c)))
        prototypes = l2_normalize_rows(
            concepts[:, None, :] + cfg.view_strength * views[None, :, :]
        )
    background = l2_normalize_rows(rng.standard_normal((cfg.background_prototypes, c)))
    return concepts, prototypes, background


def gen_synthetic(cfg: SynthConfig) -> Dataset:
    concepts, prototypes, background = synth_prototypes(cfg)
    # the image stream is independent from the prototype stream
    rng = make_rng(cfg.seed).spawn(1)[0]
    m, c = cfg.m_locals, cfg.feat_dim

    features: list[Mat] = []
    labels: list[int] = []
    for count in (cfg.shots, cfg.test_per_class):
        for k in range(cfg.n_classes):
            attr = rng.integers(0, cfg.n_attributes, size=(count, m))
            slots = prototypes[k][attr]
            if cfg.background_prototypes:
                use_bg = rng.random((count, m)) < cfg.background_prob
                which = rng.integers(0, cfg.background_prototypes, size=(count, m))
                slots = np.where(use_bg[..., None], background[which], slots)
            noise = rng.standard_normal((count, m, c))
            features.append(l2_normalize_rows(slots + cfg.noise_sigma * noise))
            labels.extend([k] * count)

    locals_ = np.concatenate(features)
    return Dataset(
        features=locals_,
        global_features=l2_normalize_rows(locals_.mean(axis=1)),
        labels=np.asarray(labels, dtype=np.int64),
        n_classes=cfg.n_classes,
        n_train=cfg.shots * cfg.n_classes,
        concepts=concepts,
        grid=grid_for(m),
        class_names=[f"class_{k}" for k in range(cfg.n_classes)],
        provenance={"generator": cfg.model_dump(), "seed": cfg.seed},
    )


def subsample_shots(dataset: Dataset, shots: int) -> Dataset:
    """Keep the first ``shots`` training images of every class and the whole test split."""
    if shots < 1:
        raise PlotError(f"shots must be positive, got {shots}")
    train_labels = dataset.labels[: dataset.n_train]
    keep: list[int] = []
    for k in range(dataset.n_classes):
        members = np.flatnonzero(train_labels == k)
        if members.size < shots:
            raise PlotError(
                f"class {k} has {members.size} training images, {shots} shots requested"
            )
        keep.extend(int(i) for i in members[:shots])
    keep.sort()
    test = np.arange(dataset.n_train, dataset.n_images)
    return dataset.subset(np.concatenate([np.asarray(keep, dtype=np.intp), test]), len(keep))
