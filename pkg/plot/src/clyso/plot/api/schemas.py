# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

"""
Pydantic schemas for persisted documents.

  - ``DatasetManifest``: YAML sidecar next to every binary dataset file
  - ``ModelFile``: JSON model document with full-precision parameters

Unlike the in-memory models these are plain-list documents, validated on load.
Unknown fields are rejected so that a malformed file never loads half-way.
"""

from __future__ import annotations

from typing import Annotated, Any, Literal

import numpy as np
from packaging.version import InvalidVersion, Version
from pydantic import AfterValidator, BaseModel, ConfigDict, Field, model_validator

from clyso.plot.core.encoders import Dataset, PromptBank, TextEncoder
from clyso.plot.core.head import HeadConfig, Method
from clyso.plot.core.trainer import EpochLog, ModelState

FORMAT_VERSION = "1.0"
DATASET_MAGIC = b"PLOTFS01"
SUPPORTED_MAJOR = 1


class PlotBaseModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


def check_format_version(value: str) -> str:
    try:
        version = Version(value)
    except InvalidVersion as e:
        raise ValueError(f"unparseable format version '{value}'") from e
    if version.major != SUPPORTED_MAJOR:
        raise ValueError(
            f"unsupported format version {value}, this build reads {SUPPORTED_MAJOR}.x"
        )
    return value


FormatVersion = Annotated[str, AfterValidator(check_format_version)]


class DatasetManifest(PlotBaseModel):
    format: Literal["PLOTFS01"] = "PLOTFS01"
    version: FormatVersion = FORMAT_VERSION
    n_images: int = Field(ge=0)
    m_locals: int = Field(ge=1)
    feat_dim: int = Field(ge=1)
    n_classes: int = Field(ge=1)
    n_train: int = Field(ge=0)
    grid: tuple[int, int] | None = None
    class_names: list[str] = Field(default_factory=list)
    seed: int | None = None
    generator: dict[str, Any] | None = None
    concepts: list[list[float]] | None = None

    @model_validator(mode="after")
    def _check(self) -> DatasetManifest:
        if self.n_train > self.n_images:
            raise ValueError(f"n_train {self.n_train} exceeds n_images {self.n_images}")
        if self.class_names and len(self.class_names) != self.n_classes:
            raise ValueError(f"{len(self.class_names)} class names for {self.n_classes} classes")
        if self.concepts is not None and (
            len(self.concepts) != self.n_classes
            or any(len(row) != self.feat_dim for row in self.concepts)
        ):
            raise ValueError(f"concepts must be {self.n_classes}×{self.feat_dim}")
        return self

    @classmethod
    def for_dataset(cls, d: Dataset) -> DatasetManifest:
        return cls(
            n_images=d.n_images,
            m_locals=d.m_locals,
            feat_dim=d.feat_dim,
            n_classes=d.n_classes,
            n_train=d.n_train,
            grid=d.grid,
            class_names=list(d.class_names),
            seed=d.provenance.get("seed"),
            generator=d.provenance.get("generator"),
            concepts=None if d.concepts is None else d.concepts.tolist(),
        )


class ModelDims(PlotBaseModel):
    ctx_len: int = Field(ge=1)
    embed_dim: int = Field(ge=1)
    feat_dim: int = Field(ge=1)
    n_classes: int = Field(ge=1)
    n_prompts: int = Field(ge=1)


class ModelFile(PlotBaseModel):
    version: FormatVersion = FORMAT_VERSION
    method: Method
    head: HeadConfig
    dims: ModelDims
    ctx: list[list[list[float]]]
    class_tokens: list[list[float]]
    projection: list[list[float]]
    train_log: list[EpochLog] = Field(default_factory=list)
    provenance: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_dims(self) -> ModelFile:
        d = self.dims
        shapes = {
            "ctx": (np.shape(self.ctx), (d.n_prompts, d.ctx_len, d.embed_dim)),
            "class_tokens": (np.shape(self.class_tokens), (d.n_classes, d.embed_dim)),
            "projection": (np.shape(self.projection), (d.embed_dim, d.feat_dim)),
        }
        for name, (actual, expected) in shapes.items():
            if actual != expected:
                raise ValueError(f"{name} has shape {actual}, dims say {expected}")
        return self

    @classmethod
    def from_state(cls, model: ModelState) -> ModelFile:
        bank = model.bank
        return cls(
            method=model.method,
            head=model.head,
            dims=ModelDims(
                ctx_len=bank.ctx_len,
                embed_dim=bank.embed_dim,
                feat_dim=model.feat_dim,
                n_classes=bank.n_classes,
                n_prompts=bank.n_prompts,
            ),
            ctx=bank.ctx.tolist(),
            class_tokens=bank.class_tokens.tolist(),
            projection=model.encoder.proj.tolist(),
            train_log=list(model.train_log),
            provenance=model.provenance,
        )

    def to_state(self) -> ModelState:
        return ModelState(
            bank=PromptBank(
                ctx=np.asarray(self.ctx, dtype=np.float64),
                class_tokens=np.asarray(self.class_tokens, dtype=np.float64),
            ),
            encoder=TextEncoder(proj=np.asarray(self.projection, dtype=np.float64)),
            head=self.head,
            method=self.method,
            train_log=self.train_log,
            provenance=self.provenance,
        )
