# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

"""Loading functions for datasets, model files and config files."""

import json
from pathlib import Path
from typing import Any

import numpy as np
import yaml
from pydantic import ValidationError

from clyso.plot.core.encoders import Dataset
from clyso.plot.core.trainer import ModelState

from .schemas import DATASET_MAGIC, DatasetManifest, ModelFile

HEADER_BYTES = len(DATASET_MAGIC) + 16


class DataLoadingError(Exception):
    """Raised when data cannot be loaded or validated."""

    pass


def manifest_path(path: str | Path) -> Path:
    return Path(f"{path}.yaml")


def record_dtype(m_locals: int, feat_dim: int) -> np.dtype:
    """One image record: label, M×C local features, C global features."""
    return np.dtype(
        [
            ("label", "<u4"),
            ("locals", "<f4", (m_locals, feat_dim)),
            ("global", "<f4", (feat_dim,)),
        ]
    )


def expected_file_size(n_images: int, m_locals: int, feat_dim: int) -> int:
    return HEADER_BYTES + n_images * (4 + 4 * feat_dim * (m_locals + 1))


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load the YAML sidecar manifest of a dataset file."""
    sidecar = manifest_path(path)
    try:
        raw = yaml.safe_load(sidecar.read_text())
        return DatasetManifest.model_validate(raw)
    except FileNotFoundError:
        raise DataLoadingError(f"Dataset manifest '{sidecar}' not found")
    except ValidationError as e:
        raise DataLoadingError(f"Invalid dataset manifest '{sidecar}': {e}") from e
    except yaml.YAMLError as e:
        raise DataLoadingError(f"Failed to parse dataset manifest '{sidecar}': {e}") from e


def load_dataset(path: str | Path) -> Dataset:
    """Load a binary dataset file and its manifest.

    Features come back as float64 holding the stored float32 values exactly.
    """
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataLoadingError(f"Dataset file '{path}' not found")
    except OSError as e:
        raise DataLoadingError(f"Failed to read dataset file '{path}': {e}") from e

    magic = blob[: len(DATASET_MAGIC)]
    if magic != DATASET_MAGIC:
        raise DataLoadingError(
            f"Bad magic in '{path}': expected {DATASET_MAGIC.decode()!r}, got {magic!r}"
        )
    if len(blob) < HEADER_BYTES:
        raise DataLoadingError(
            f"Truncated header in '{path}': expected {HEADER_BYTES} bytes, got {len(blob)}"
        )
    n, m, c, k = (
        int(v) for v in np.frombuffer(blob, dtype="<u4", count=4, offset=len(DATASET_MAGIC))
    )
    if m == 0 or c == 0 or k == 0:
        raise DataLoadingError(f"Invalid header in '{path}': M={m} C={c} K={k}")
    expected = expected_file_size(n, m, c)
    if len(blob) != expected:
        raise DataLoadingError(
            f"File length mismatch in '{path}': header (n={n}, M={m}, C={c}) "
            + f"implies {expected} bytes, file has {len(blob)}"
        )

    records = np.frombuffer(blob, dtype=record_dtype(m, c), count=n, offset=HEADER_BYTES)
    labels = records["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        raise DataLoadingError(
            f"Invalid label {labels[bad[0]]} for image {bad[0]} in '{path}' (K={k})"
        )

    manifest = load_manifest(path)
    header = (n, m, c, k)
    declared = (manifest.n_images, manifest.m_locals, manifest.feat_dim, manifest.n_classes)
    if header != declared:
        raise DataLoadingError(
            f"Manifest of '{path}' declares (n, M, C, K) = {declared}, file header has {header}"
        )

    try:
        return Dataset(
            features=records["locals"].astype(np.float64),
            global_features=records["global"].astype(np.float64),
            labels=labels,
            n_classes=k,
            n_train=manifest.n_train,
            concepts=(
                None
                if manifest.concepts is None
                else np.asarray(manifest.concepts, dtype=np.float64)
            ),
            grid=manifest.grid,
            class_names=manifest.class_names,
            provenance={
                "generator": manifest.generator,
                "seed": manifest.seed,
                "version": manifest.version,
            },
        )
    except ValidationError as e:
        raise DataLoadingError(f"Invalid dataset contents in '{path}': {e}") from e


def load_model(path: str | Path) -> ModelState:
    """Load a JSON model file."""
    try:
        raw = json.loads(Path(path).read_text())
        return ModelFile.model_validate(raw).to_state()
    except FileNotFoundError:
        raise DataLoadingError(f"Model file '{path}' not found")
    except ValidationError as e:
        raise DataLoadingError(f"Invalid model file '{path}': {e}") from e
    except Exception as e:
        raise DataLoadingError(f"Failed to parse model file '{path}': {e}") from e


def load_config(path: str | Path) -> dict[str, Any]:
    """Load a YAML config file as a flat mapping of option names to values."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise DataLoadingError(f"Config file '{path}' not found")
    except yaml.YAMLError as e:
        raise DataLoadingError(f"Failed to parse config file '{path}': {e}") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise DataLoadingError(
            f"Expected a mapping in config file '{path}', got {type(raw).__name__}"
        )
    return {str(key).replace("-", "_"): value for key, value in raw.items()}
