# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

"""
Classification heads over prompt features.

Every method turns a K×N×C stack of prompt features G into per-class distances
d_k; class probabilities are softmax((1 - d) / τ) and the loss is cross-entropy.

  PLOT     d_k = ⟨T*_k, C_k⟩, C_k = 1 - F G_kᵀ, T*_k from Sinkhorn on the M local features
  COOP     d_k = 1 - cos(f, g_k) with a single prompt and the global feature
  G, G_E   d_k = 1 - cos(f, normalize(mean_n g_kn))
  G_V      G plus β · mean pairwise prompt similarity
  M        d_k = mean_{m,n} C_k[m, n] (the uniform plan)
  M_V      M plus β · mean pairwise prompt similarity

Gradients are two-stage: the transport plans are solved with the prompts fixed
and then held constant, so ∂d_k/∂g_kn = -Σ_m T*_k[m, n] f_m.
"""

from __future__ import annotations

from enum import Enum
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from clyso.plot.core.encoders import (
    Batch,
    PromptBank,
    TextEncoder,
    encode_prompts,
    encode_prompts_backward,
)
from clyso.plot.core.numerics import (
    ArrayModel,
    Mat,
    NumericalError,
    PlotError,
    ShapeError,
    Vec64,
    ZeroNormError,
    check_unit_rows,
    row_norms,
    softmax_temp,
)
from clyso.plot.core.ot import SinkhornConfig, SinkhornUnderflowError, solve_batch

PROB_CLAMP = 1e-12
DEFAULT_VAR_WEIGHT = 0.1


class MethodTag(str, Enum):
    PLOT = "PLOT"
    COOP = "COOP"
    G = "G"
    G_V = "G_V"
    G_E = "G_E"
    M = "M"
    M_V = "M_V"


FLAG_TAGS = {
    "plot": MethodTag.PLOT,
    "coop": MethodTag.COOP,
    "g": MethodTag.G,
    "g+v": MethodTag.G_V,
    "g+e": MethodTag.G_E,
    "m": MethodTag.M,
    "m+v": MethodTag.M_V,
}

_VARIANCE_TAGS = (MethodTag.G_V, MethodTag.M_V)
_FEATURE_MAP_TAGS = (MethodTag.PLOT, MethodTag.M, MethodTag.M_V)


class Method(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    tag: MethodTag = MethodTag.PLOT
    var_weight: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _check_weight(self) -> Method:
        if self.var_weight != 0 and self.tag not in _VARIANCE_TAGS:
            raise ValueError(f"var_weight must be 0 for method {self.tag.value}")
        return self

    @classmethod
    def from_flag(cls, flag: str, var_weight: float | None = None) -> Method:
        tag = FLAG_TAGS.get(flag.lower())
        if tag is None:
            raise PlotError(
                f"unknown method '{flag}', expected one of {', '.join(FLAG_TAGS)}"
            )
        if var_weight is None:
            var_weight = DEFAULT_VAR_WEIGHT if tag in _VARIANCE_TAGS else 0.0
        return cls(tag=tag, var_weight=var_weight)

    @property
    def label(self) -> str:
        return self.tag.value.replace("_", "+")

    @property
    def uses_feature_map(self) -> bool:
        return self.tag in _FEATURE_MAP_TAGS

    @property
    def init_strategy(self) -> Literal["random", "preset_ensemble"]:
        return "preset_ensemble" if self.tag == MethodTag.G_E else "random"


class HeadConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    tau: float = Field(default=0.01, gt=0)
    sinkhorn: SinkhornConfig = Field(default_factory=SinkhornConfig)
    n_prompts: int = Field(default=4, ge=1)
    distance: Literal["transport", "entropic"] = "transport"


class ClassScores(ArrayModel):
    """Distances and probabilities over the last axis (K); plans only for PLOT."""

    distances: np.ndarray
    probabilities: np.ndarray
    plans: np.ndarray | None = None
    iterations: np.ndarray | None = None


class HeadForward(ArrayModel):
    scores: ClassScores
    loss: float
    grad_g: np.ndarray | None = None


def cost_matrix(f: Mat, g_k: Mat) -> Mat:
    f = np.asarray(f, dtype=np.float64)
    g_k = np.asarray(g_k, dtype=np.float64)
    if f.ndim != 2 or g_k.ndim != 2 or f.shape[1] != g_k.shape[1]:
        raise ShapeError(f"feature set {f.shape} and prompts {g_k.shape} do not match")
    check_unit_rows(f, "feature")
    check_unit_rows(g_k, "prompt")
    return 1.0 - f @ g_k.T


def class_probabilities(distances: Vec64, tau: float) -> Vec64:
    return softmax_temp(1.0 - np.asarray(distances, dtype=np.float64), tau)


def coop_logits(f_global: Vec64, g_single: Mat, tau: float) -> ClassScores:
    f_global = np.asarray(f_global, dtype=np.float64)
    g_single = np.asarray(g_single, dtype=np.float64)
    check_unit_rows(f_global[None], "global feature")
    check_unit_rows(g_single, "prompt")
    cos = g_single @ f_global
    return ClassScores(distances=1.0 - cos, probabilities=softmax_temp(cos, tau))


def ensemble_distance(f_global: Vec64, g_k: Mat) -> float:
    f_global = np.asarray(f_global, dtype=np.float64)
    check_unit_rows(f_global[None], "global feature")
    check_unit_rows(g_k, "prompt")
    mean = np.asarray(g_k, dtype=np.float64).mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise ZeroNormError(0, what="prompt ensemble mean")
    return float(1.0 - f_global @ (mean / norm))


def mean_pair_distance(f: Mat, g_k: Mat) -> float:
    return float(np.mean(cost_matrix(f, g_k)))


def variance_regularizer(g_k: Mat) -> float:
    """Mean cosine similarity over the N(N-1)/2 prompt pairs; 0 for one prompt."""
    g_k = np.asarray(g_k, dtype=np.float64)
    n = g_k.shape[0]
    if n < 2:
        return 0.0
    gram = g_k @ g_k.T
    return float((gram.sum() - np.trace(gram)) / (n * (n - 1)))


def cross_entropy_loss(probs: Mat, labels: np.ndarray) -> float:
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != probs.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {probs.shape[0]} probability rows")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise PlotError(f"label out of range [0, {probs.shape[1]})")
    picked = probs[np.arange(labels.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_CLAMP))))


def _solve_plans(costs: Mat, cfg: HeadConfig) -> tuple[Mat, np.ndarray]:
    b, k, m, n = costs.shape
    try:
        res = solve_batch(costs.reshape(b * k, m, n), cfg.sinkhorn)
    except SinkhornUnderflowError as e:
        image, klass = divmod(e.problem, k)
        raise PlotError(f"class {klass} (image {image}): {e}") from e
    return res.plans.reshape(b, k, m, n), res.iterations.reshape(b, k)


def _entropy(plans: Mat) -> Mat:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(plans > 0, plans * np.log(plans), 0.0)
    return -terms.sum(axis=(-2, -1))


def head_forward(
    batch: Batch,
    g_all: Mat,
    method: Method,
    cfg: HeadConfig,
    plans: Mat | None = None,
    with_grad: bool = True,
) -> HeadForward:
    """Distances, loss and (optionally) the loss gradient w.r.t. G.

    ``plans`` freezes the PLOT transport plans instead of solving them.
    """
    f_map = batch.features
    f_glob = batch.global_features
    labels = batch.labels
    n_batch = len(batch)
    n_classes, n_prompts, feat_dim = g_all.shape
    if f_glob.shape[1] != feat_dim:
        raise ShapeError(
            f"visual features have dim {f_glob.shape[1]}, prompt features {feat_dim}"
        )
    check_unit_rows(g_all, "prompt")

    solved_plans = None
    iterations = None
    gbar = gbar_norms = None
    if method.uses_feature_map:
        check_unit_rows(f_map, "local feature")
        costs = 1.0 - np.einsum("bmc,knc->bkmn", f_map, g_all)
        if method.tag == MethodTag.PLOT:
            if plans is None:
                plans, iterations = _solve_plans(costs, cfg)
            elif plans.shape != costs.shape:
                raise ShapeError(f"frozen plans {plans.shape} != costs {costs.shape}")
            solved_plans = plans
        else:
            m = costs.shape[2]
            plans = np.full(costs.shape, 1.0 / (m * n_prompts))
        distances = np.sum(plans * costs, axis=(2, 3))
        if method.tag == MethodTag.PLOT and cfg.distance == "entropic":
            distances = distances - cfg.sinkhorn.lam * _entropy(plans)
    elif method.tag == MethodTag.COOP:
        if n_prompts != 1:
            raise PlotError(f"COOP uses a single prompt, got {n_prompts}")
        check_unit_rows(f_glob, "global feature")
        distances = 1.0 - f_glob @ g_all[:, 0, :].T
    else:
        check_unit_rows(f_glob, "global feature")
        sums = g_all.mean(axis=1)
        gbar_norms = row_norms(sums)
        zero = np.flatnonzero(gbar_norms == 0.0)
        if zero.size:
            raise ZeroNormError(int(zero[0]), what="prompt ensemble mean of class")
        gbar = sums / gbar_norms[:, None]
        distances = 1.0 - f_glob @ gbar.T

    probs = class_probabilities(distances, cfg.tau)
    loss = cross_entropy_loss(probs, labels)
    if method.var_weight:
        loss += method.var_weight * float(
            np.mean([variance_regularizer(g_all[k]) for k in range(n_classes)])
        )
    if not np.isfinite(loss):
        raise NumericalError(f"loss is not finite ({loss})")

    scores = ClassScores(
        distances=distances,
        probabilities=probs,
        plans=solved_plans,
        iterations=iterations,
    )
    if not with_grad:
        return HeadForward(scores=scores, loss=loss)

    rows = np.arange(n_batch)
    grad_logits = probs.copy()
    grad_logits[rows, labels] -= 1.0
    grad_logits[probs[rows, labels] < PROB_CLAMP] = 0.0
    # logits are (1 - d) / tau
    grad_d = -grad_logits / (n_batch * cfg.tau)

    grad_g = np.zeros_like(g_all)
    if method.uses_feature_map:
        grad_g -= np.einsum("bk,bkmn,bmc->knc", grad_d, plans, f_map)
    elif method.tag == MethodTag.COOP:
        grad_g[:, 0, :] -= grad_d.T @ f_glob
    else:
        assert gbar is not None and gbar_norms is not None
        grad_gbar = -(grad_d.T @ f_glob)
        radial = np.sum(gbar * grad_gbar, axis=1, keepdims=True)
        grad_sums = (grad_gbar - gbar * radial) / gbar_norms[:, None]
        grad_g += grad_sums[:, None, :] / n_prompts
    if method.var_weight and n_prompts > 1:
        scale = 2.0 * method.var_weight / (n_classes * n_prompts * (n_prompts - 1))
        grad_g += scale * (g_all.sum(axis=1, keepdims=True) - g_all)

    return HeadForward(scores=scores, loss=loss, grad_g=grad_g)


def plot_distances(f: Mat, g_all: Mat, cfg: HeadConfig) -> ClassScores:
    """PLOT distances, probabilities and plans for one image's feature set."""
    f = np.asarray(f, dtype=np.float64)
    g_all = np.asarray(g_all, dtype=np.float64)
    if f.ndim != 2 or g_all.ndim != 3 or f.shape[1] != g_all.shape[2]:
        raise ShapeError(f"feature set {f.shape} and prompts {g_all.shape} do not match")
    check_unit_rows(f, "local feature")
    check_unit_rows(g_all, "prompt")
    costs = 1.0 - np.einsum("mc,knc->kmn", f, g_all)
    plans, iterations = _solve_plans(costs[None], cfg)
    distances = np.sum(plans[0] * costs, axis=(1, 2))
    if cfg.distance == "entropic":
        distances = distances - cfg.sinkhorn.lam * _entropy(plans[0])
    return ClassScores(
        distances=distances,
        probabilities=class_probabilities(distances, cfg.tau),
        plans=plans[0],
        iterations=iterations[0],
    )


def score_batch(batch: Batch, g_all: Mat, method: Method, cfg: HeadConfig) -> ClassScores:
    return head_forward(batch, g_all, method, cfg, with_grad=False).scores


def loss_and_grad(
    batch: Batch,
    bank: PromptBank,
    enc: TextEncoder,
    method: Method,
    cfg: HeadConfig,
    plans: Mat | None = None,
) -> tuple[float, Mat]:
    """Total loss and exact ctx gradient; PLOT plans are solved unless given."""
    g_all = encode_prompts(bank, enc)
    fwd = head_forward(batch, g_all, method, cfg, plans=plans)
    assert fwd.grad_g is not None
    return fwd.loss, encode_prompts_backward(fwd.grad_g, bank, enc)


def frozen_plan_loss(
    batch: Batch,
    bank: PromptBank,
    enc: TextEncoder,
    method: Method,
    cfg: HeadConfig,
    plans: Mat | None,
) -> float:
    """Loss with PLOT plans held at ``plans``; the surrogate the gradient differentiates."""
    g_all = encode_prompts(bank, enc)
    return head_forward(batch, g_all, method, cfg, plans=plans, with_grad=False).loss
