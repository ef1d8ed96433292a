"""
Pytest configuration and shared fixtures for the offroad planner tests.
"""

import logging
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest
from dotenv import load_dotenv

from offroad_planner.config import resolve
from offroad_planner.events import SMOOTH_ROAD
from offroad_planner.vehicle import ModelParams
from offroad_planner.worldsim import TerrainWorld, blank_world, generate_world

# Load environment variables (PLANNER_THREADS, PLANNER_LOG_LEVEL)
load_dotenv()

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s [%(levelname)s] %(name)s: %(message)s'
)


@pytest.fixture(scope="session")
def config() -> Dict[str, Any]:
    """Resolved default run configuration."""
    return resolve()


@pytest.fixture(scope="session")
def car_params() -> ModelParams:
    """Vehicle parameters of the reference RC car."""
    return ModelParams(c1=0.5, c2=1.69, cm1=12.0, cm2=2.5, cr2=0.15, cr0=0.7, g=9.81, mass_scale=1.0)


@pytest.fixture(scope="session")
def small_world() -> TerrainWorld:
    """Seeded 32x32 world with the default class priors."""
    return generate_world(seed=3, size=32)


@pytest.fixture(scope="session")
def road_world() -> TerrainWorld:
    """Flat 64x64 world of smooth road (32 m across)."""
    return blank_world(64, SMOOTH_ROAD)


@pytest.fixture(scope="function")
def tmp_output_dir(tmp_path: Path) -> Path:
    """Fresh output directory per test."""
    out = tmp_path / "output"
    out.mkdir()
    return out


@pytest.fixture(scope="function")
def rng() -> np.random.Generator:
    """Seeded generator; every test gets the same stream."""
    return np.random.default_rng(12345)


def pytest_collection_modifyitems(config, items):
    """Modify test collection to add markers based on test location."""
    for item in items:
        # Add markers based on file path
        path = str(item.fspath)
        if "functional" in path:
            item.add_marker(pytest.mark.functional)
        if "performance" in path:
            item.add_marker(pytest.mark.performance)
        if "studies" in path:
            item.add_marker(pytest.mark.studies)
            item.add_marker(pytest.mark.slow)
