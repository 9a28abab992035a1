"""Python front end for the normlab C++ core.

Configs are plain dicts following docs/config.md; reports come back as dicts.
"""

from __future__ import annotations

import csv
import io
import json
from typing import Any, Iterable, Optional

from . import _normlab
from ._normlab import (
    ConfigError,
    ContractError,
    UndefinedSimilarityError,
    branchnorm_alpha,
    cosine_similarity,
    deepnorm_coeffs,
    relu_sparsity,
)

__version__ = _normlab.__version__

__all__ = [
    "ConfigError",
    "ContractError",
    "UndefinedSimilarityError",
    "analyze",
    "branchnorm_alpha",
    "config_hash",
    "cosine_similarity",
    "deepnorm_coeffs",
    "oracle",
    "probe",
    "relu_sparsity",
    "resolved_config",
    "sweep",
    "train",
]


def _text(config: dict[str, Any]) -> str:
    return json.dumps(config)


def resolved_config(config: dict[str, Any]) -> dict[str, Any]:
    """Fully defaulted and validated copy of `config`."""
    return json.loads(_normlab.resolved_config(_text(config)))


def config_hash(config: dict[str, Any]) -> str:
    return _normlab.config_hash(_text(config))


def probe(config: dict[str, Any], strategy: Optional[str] = None,
          steps: Iterable[int] = (0,)) -> list[dict[str, Any]]:
    lines = _normlab.probe(_text(config), strategy, list(steps))
    return [json.loads(line) for line in lines.splitlines()]


def train(config: dict[str, Any]) -> dict[str, Any]:
    return json.loads(_normlab.train(_text(config)))


def sweep(config: dict[str, Any], workers: Optional[int] = None) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(_normlab.sweep(_text(config), workers))))


def analyze(config: dict[str, Any], t: int = 0) -> dict[str, Any]:
    return json.loads(_normlab.analyze(_text(config), t))


def oracle(config: dict[str, Any], strategy: Optional[str] = None, t: int = 0) -> dict[str, Any]:
    return dict(_normlab.oracle(_text(config), strategy, t))
