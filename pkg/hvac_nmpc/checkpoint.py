from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from hvac_nmpc.dataio import LagSpec, Normalizer
from hvac_nmpc.errors import CheckpointError, ContractError, ShapeError
from hvac_nmpc.surrogate import MODEL_KINDS, SurrogateModel

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class WeightArray(BaseModel):
    shape: list[int]
    data: list[float]


class CheckpointDocument(BaseModel):
    """On-disk JSON layout of a trained surrogate."""
    schema_version: int = SCHEMA_VERSION
    kind: str
    lags: tuple[int, int, int]
    n_x: int
    n_u: int
    n_d: int
    width: int = 0
    depth: int = 0
    normalizer: dict[str, list]
    weights: dict[str, WeightArray]
    metadata: dict[str, Any] = Field(default_factory=dict)


def _encode(value: float) -> float:
    # json writes repr(float), which is the shortest string that reads back bit-exact.
    return float(value)


def save_checkpoint(path: str | Path, model: SurrogateModel, metadata: dict[str, Any] | None = None) -> None:
    doc = CheckpointDocument(
        kind=model.kind,
        lags=model.lags.as_tuple(),
        n_x=model.n_x,
        n_u=model.n_u,
        n_d=model.n_d,
        width=model.width,
        depth=model.depth,
        normalizer=model.normalizer.to_dict(),
        weights={
            name: WeightArray(shape=list(arr.shape), data=[_encode(v) for v in arr.reshape(-1)])
            for name, arr in model.params.items()
        },
        metadata=metadata or {},
    )
    Path(path).write_text(json.dumps(doc.model_dump(mode="json")), encoding="utf-8")
    logger.info("CHECKPOINT: wrote %s model (%d params) to %s", model.kind, model.parameter_count, path)


def read_document(path: str | Path) -> CheckpointDocument:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    try:
        return CheckpointDocument.model_validate_json(text)
    except ValidationError as e:
        raise CheckpointError(f"Malformed checkpoint {path}: {e.error_count()} validation errors") from e


def load_checkpoint(path: str | Path, expected_kind: str | None = None) -> tuple[SurrogateModel, dict[str, Any]]:
    """Rebuild the model; the whole document is validated before any model is returned."""
    doc = read_document(path)
    if expected_kind is not None and doc.kind != expected_kind:
        raise CheckpointError(f"Checkpoint {path} holds a {doc.kind} model, expected {expected_kind}")
    cls = MODEL_KINDS.get(doc.kind)
    if cls is None:
        raise CheckpointError(f"Checkpoint {path} has unknown model kind '{doc.kind}'")

    params: dict[str, np.ndarray] = {}
    for name, w in doc.weights.items():
        if int(np.prod(w.shape, dtype=np.int64)) != len(w.data):
            raise CheckpointError(f"Checkpoint {path}: weight {name} has {len(w.data)} values for shape {w.shape}")
        params[name] = np.asarray(w.data, dtype=np.float64).reshape(w.shape)

    try:
        model = cls(
            lags=LagSpec(*doc.lags),
            normalizer=Normalizer.from_dict(doc.normalizer),
            n_x=doc.n_x,
            n_u=doc.n_u,
            n_d=doc.n_d,
            params=params,
            width=doc.width,
            depth=doc.depth,
        )
    except (ShapeError, ContractError, KeyError, ValueError) as e:
        raise CheckpointError(f"Checkpoint {path} does not describe a valid {doc.kind} model: {e}") from e
    return model, doc.metadata
