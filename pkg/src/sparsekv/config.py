"""Engine configuration: one declarative JSON document covering the window,
planner, index construction, and search defaults.

Precedence, lowest to highest: built-in defaults, the config file (the
``--config`` flag, else the ``SPARSEKV_CONFIG`` environment variable), then
explicit CLI flag overrides.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .index import GraphParams
from .planner import PlannerConfig

CONFIG_ENV_VAR = "SPARSEKV_CONFIG"


@dataclass(frozen=True)
class EngineConfig:
    # window tokens always kept in the attention selection
    window_initial: int = 16
    window_last: int = 64
    # DIPR search
    l0: int = 128
    beta: float = 110.0
    # graph construction
    max_degree: int = 32
    knn_k: int = 32
    enhance_ef: int = 64
    enhance_k: int = 8
    sample_ratio: float = 0.4
    # coarse block index
    block_size: int = 128
    representatives: int = 4
    top_k_blocks: int = 16
    # planner
    short_context_threshold: int = 1024
    resident_fraction: float = 1.0
    first_layers: tuple[int, ...] = (0,)
    top_k: int = 100
    memory_budget_bytes: int = 0
    # filtered search
    two_hop_threshold: float = 1.0
    two_hop_fanout: int = 20
    always_two_hop: bool = False
    # execution
    workers: int = 1
    deterministic: bool = True
    # storage
    element_width: int = 32
    buffer_pool_blocks: int = 4096

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(
            short_context_threshold=self.short_context_threshold,
            resident_fraction=self.resident_fraction,
            first_layers=tuple(self.first_layers),
            top_k=self.top_k,
            beta=self.beta,
        )

    def graph_params(self) -> GraphParams:
        workers = 1 if self.deterministic else self.workers
        return GraphParams(
            max_degree=self.max_degree,
            knn_k=self.knn_k,
            enhance_ef=self.enhance_ef,
            enhance_k=self.enhance_k,
            workers=workers,
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["first_layers"] = list(self.first_layers)
        return out


_FIELD_NAMES = {f.name for f in dataclasses.fields(EngineConfig)}


def _coerce(overrides: dict) -> dict:
    out = {}
    for name, value in overrides.items():
        if value is None:
            continue
        if name not in _FIELD_NAMES:
            raise ValueError(f"unknown config field: {name}")
        if name == "first_layers":
            value = tuple(int(v) for v in value)
        out[name] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> EngineConfig:
    """Resolve the effective config from defaults, file, and overrides."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    merged: dict = {}
    if path is not None:
        with open(path) as fh:
            merged.update(_coerce(json.load(fh)))
    if overrides:
        merged.update(_coerce(overrides))
    return EngineConfig(**merged)


def dump_config(cfg: EngineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
