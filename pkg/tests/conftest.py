"""Shared fixtures: a tiny fleet bundle cheap enough for CLI and pipeline tests."""

import copy
from pathlib import Path

import pytest
import yaml

from sohcast import pipeline
from sohcast.config import config_from_dict

# Small fleet, short life, tiny model: generate + full chain in seconds.
TINY_CONFIG = {
    "simulator": {
        "seed": 99,
        "source_cells_per_batch": 3,
        "target_cells": 2,
        "total_throughput_kah": 8.0,
        "record_kah": 1.0,
        "segment_kah": 1.0,
        "steps_per_half_cycle": 25,
        "cutoff_kah": 4.0,
    },
    "model": {
        "window": 3,
        "hidden": 4,
        "epochs": 2,
        "batch_size": 16,
        "seed": 5,
        "finetune_epochs": 5,
    },
    "adapt": {"lam": 0.1, "lambda_grid": [0.0, 0.3], "lobo_epochs": 1},
    "conformal": {"alpha": 0.1, "calib_per_batch": 1},
}


@pytest.fixture(scope="session")
def tiny_bundle(tmp_path_factory) -> Path:
    """Generate the tiny bundle once; stages treat it as read-only."""
    bundle_dir = tmp_path_factory.mktemp("tiny") / "bundle"
    data = copy.deepcopy(TINY_CONFIG)
    data["paths"] = {"bundle_dir": str(bundle_dir), "out_dir": str(bundle_dir.parent / "unused")}
    pipeline.cmd_generate(config_from_dict(data))
    return bundle_dir


@pytest.fixture
def cfg_factory(tiny_bundle, tmp_path):
    """Write a config YAML against the shared bundle with a private out dir."""

    def make(name: str = "out", **section_overrides) -> Path:
        data = copy.deepcopy(TINY_CONFIG)
        data["paths"] = {
            "bundle_dir": str(tiny_bundle),
            "out_dir": str(tmp_path / name),
        }
        for section, kv in section_overrides.items():
            data.setdefault(section, {}).update(kv)
        path = tmp_path / f"cfg_{name}.yaml"
        path.write_text(yaml.safe_dump(data))
        return path

    return make
