# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

"""
Writers for datasets, model files, reports and transport-plan heatmaps.

Dataset file layout (all integers little-endian 32-bit unsigned, floats
little-endian 32-bit IEEE):

  magic "PLOTFS01" | n_images | M | C | K | n_images × (label, M×C locals, C global)

Features are truncated from float64 to float32 on save. The YAML manifest
``<path>.yaml`` carries the split, class names, grid and generator provenance.
Model files are JSON documents; Python float reprs round-trip exactly.
"""

import json
import sys
from pathlib import Path
from typing import Any, TextIO

import numpy as np
import yaml
from pydantic import BaseModel

from clyso.plot.core.encoders import Dataset
from clyso.plot.core.head import ClassScores
from clyso.plot.core.numerics import Mat, PlotError
from clyso.plot.core.trainer import ModelState

from .loaders import manifest_path, record_dtype
from .schemas import DATASET_MAGIC, FORMAT_VERSION, DatasetManifest, ModelFile


class PlanExportError(PlotError):
    """Raised when transport plans cannot be exported."""

    pass


def save_dataset(d: Dataset, path: str | Path) -> None:
    path = Path(path)
    records = np.zeros(d.n_images, dtype=record_dtype(d.m_locals, d.feat_dim))
    records["label"] = d.labels
    records["locals"] = d.features
    records["global"] = d.global_features
    header = np.asarray([d.n_images, d.m_locals, d.feat_dim, d.n_classes], dtype="<u4")
    with path.open("wb") as f:
        f.write(DATASET_MAGIC)
        f.write(header.tobytes())
        f.write(records.tobytes())
    manifest = DatasetManifest.for_dataset(d)
    manifest_path(path).write_text(
        yaml.safe_dump(manifest.model_dump(mode="json"), sort_keys=False)
    )


def save_model(model: ModelState, path: str | Path) -> None:
    document = ModelFile.from_state(model).model_dump(mode="json")
    Path(path).write_text(json.dumps(document, indent=1) + "\n")


def write_report(report: BaseModel | dict[str, Any], path: str | Path) -> None:
    data = report.model_dump(mode="json") if isinstance(report, BaseModel) else dict(report)
    data.setdefault("version", FORMAT_VERSION)
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def plan_to_pixels(column: Mat) -> np.ndarray:
    """Max-normalize plan mass to 0..255; an all-zero column stays all zero."""
    column = np.asarray(column, dtype=np.float64)
    peak = float(column.max()) if column.size else 0.0
    if peak <= 0.0:
        return np.zeros(column.shape, dtype=np.uint8)
    return np.rint(255.0 * column / peak).astype(np.uint8)


def graymap_bytes(pixels: np.ndarray) -> bytes:
    """Binary P5 graymap of an H×W uint8 array."""
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


class PlanExporter:
    """Write one CSV and one P5 graymap per (class, prompt) transport-plan column."""

    def __init__(
        self,
        out_dir: str | Path,
        verbose: bool = False,
        output_stream: TextIO = sys.stdout,
        error_stream: TextIO = sys.stderr,
    ) -> None:
        self.out_dir = Path(out_dir)
        self.verbose = verbose
        self.output_stream = output_stream
        self.error_stream = error_stream

    def _debug(self, msg: str) -> None:
        if self.verbose:
            print(f"DEBUG: {msg}", file=self.error_stream)

    def _notice(self, msg: str) -> None:
        print(msg, file=self.error_stream)

    def export(
        self,
        scores: ClassScores,
        image_index: int,
        grid: tuple[int, int] | None,
        classes: list[int] | None = None,
    ) -> list[Path]:
        if scores.plans is None:
            raise PlanExportError("no transport plans to export; only PLOT produces plans")
        plans = scores.plans
        n_classes, m, n_prompts = plans.shape
        if grid is not None and grid[0] * grid[1] != m:
            raise PlanExportError(f"grid {grid} does not cover M={m} local features")
        if classes is None:
            classes = list(range(n_classes))
        for k in classes:
            if not 0 <= k < n_classes:
                raise PlanExportError(f"class {k} out of range [0, {n_classes})")
        if grid is None:
            self._notice(f"M={m} has no H×W grid; graymaps skipped, writing CSV only")

        self.out_dir.mkdir(parents=True, exist_ok=True)
        written: list[Path] = []
        for k in classes:
            for n in range(n_prompts):
                column = plans[k, :, n]
                stem = self.out_dir / f"img{image_index}_class{k}_prompt{n}"
                shaped = column.reshape(grid) if grid is not None else column[:, None]
                csv_path = stem.with_suffix(".csv")
                np.savetxt(csv_path, shaped, fmt="%.17g", delimiter=",")
                written.append(csv_path)
                self._debug(f"wrote {csv_path} (mass {column.sum():.6g})")
                if grid is not None:
                    pgm_path = stem.with_suffix(".pgm")
                    pgm_path.write_bytes(graymap_bytes(plan_to_pixels(shaped)))
                    written.append(pgm_path)
        return written


def export_plan(
    scores: ClassScores,
    image_index: int,
    grid: tuple[int, int] | None,
    out_dir: str | Path,
    classes: list[int] | None = None,
) -> list[Path]:
    return PlanExporter(out_dir).export(scores, image_index, grid, classes)
