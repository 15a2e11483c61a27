"""Shared helpers for the experiment scripts."""

from __future__ import annotations

import json
from pathlib import Path

from dice.config import build_data, build_topology, parse_config
from dice.engine import run_training

CONFIGS = Path(__file__).resolve().parent / "configs"


def load_obj(name: str) -> dict:
    return json.loads((CONFIGS / name).read_text())


def train(obj: dict):
    cfg = parse_config(obj)
    topo, w = build_topology(cfg, CONFIGS)
    shards, ev = build_data(cfg, topo.n, CONFIGS)
    return cfg, run_training(cfg.train, topo, w, shards, cfg.model), ev
