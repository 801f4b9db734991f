"""
tests/conftest.py - Shared Test Fixtures

This file is automatically loaded by pytest. Any fixture defined here
is available to ALL test files without importing.

Fixture hierarchy:
    conftest.py (this file) → shared across all tests
    tests/integration/conftest.py → shared across integration tests only
"""

import copy
import json

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from app.core.run_config import RunConfig, parse_config
from app.services.surface import TriMesh

_BOX_TRIANGLES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # z = lo
        [4, 5, 6], [4, 6, 7],  # z = hi
        [0, 1, 5], [0, 5, 4],  # y = lo
        [3, 7, 6], [3, 6, 2],  # y = hi
        [0, 4, 7], [0, 7, 3],  # x = lo
        [1, 2, 6], [1, 6, 5],  # x = hi
    ]
)


def box_surface(lo, hi) -> TriMesh:
    """Closed, outward-wound axis-aligned box (mm)."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    vertices = np.array(
        [
            [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
            [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
        ],
        dtype=np.float64,
    )
    return TriMesh(vertices, _BOX_TRIANGLES.copy())


HULL_PARAMETERS = [
    {"name": "cp1", "min": 0.0, "max": 200.0},
    {"name": "cp2", "min": 0.0, "max": 200.0},
    {"name": "cp3", "min": 0.0, "max": 200.0},
    {"name": "cp4", "min": 0.0, "max": 200.0},
    {"name": "cp5", "min": 0.0, "max": 200.0},
    {"name": "cp6", "min": 0.0, "max": 200.0},
    {"name": "nose_length", "min": 10.0, "max": 900.0},
]

WINGED_PARAMETERS = [
    {"name": "nose_radius", "min": 100.0, "max": 800.0},
    {"name": "fuselage_length", "min": 100.0, "max": 800.0},
    {"name": "tail_length", "min": 100.0, "max": 800.0},
    {"name": "thickness_wing", "min": 5.0, "max": 50.0},
    {"name": "half_span", "min": 50.0, "max": 200.0},
    {"name": "chord", "min": 50.0, "max": 200.0},
]

BASE_CONFIG = {
    "mode": "Cfd",
    "fluid": {
        "inlet_speed": 1.00584,
        "density": 1027.0,
        "dynamic_viscosity": 1.789e-5,
        "turbulence_intensity": 0.04,
    },
    "mesh": {
        "domain_scale": {"upstream": 1.0, "downstream": 2.0, "lateral": 1.0},
        "base_cells": [16, 8, 8],
        "surface_refinement_levels": 1,
        "max_retries": 3,
    },
    "design": {"seed_design": "RevolvedHull", "parameters": HULL_PARAMETERS},
    "solver_backend": "Internal",
    "output_dir": "runs/test",
    "rng_seed": 0,
}


@pytest.fixture
def box():
    """Factory for closed box surfaces: box((x0, y0, z0), (x1, y1, z1))."""
    return box_surface


@pytest.fixture
def config_dict():
    """A valid Cfd run configuration as a plain dict (fresh copy per test)."""
    return copy.deepcopy(BASE_CONFIG)


@pytest.fixture
def make_config(config_dict):
    """
    Build a RunConfig from the base dict with top-level sections replaced.

    Example:
        config = make_config(mode="Optimize", optimizer={"budget": 5, "initial_samples": 2})
    """

    def _make(**sections) -> RunConfig:
        data = copy.deepcopy(config_dict)
        data.update(sections)
        return parse_config(json.dumps(data))

    return _make


def sphere_surface(radius: float, center=(0.0, 0.0, 0.0), n: int = 800) -> TriMesh:
    """Closed, outward-wound sphere from the convex hull of a Fibonacci point set (mm)."""
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azimuth = np.pi * (1.0 + 5.0**0.5) * i
    unit = np.column_stack([np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)])
    triangles = ConvexHull(unit).simplices.copy()
    a, b, c = unit[triangles[:, 0]], unit[triangles[:, 1]], unit[triangles[:, 2]]
    inward = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    triangles[inward] = triangles[inward][:, ::-1]
    return TriMesh(radius * unit + np.asarray(center, dtype=np.float64), triangles)


@pytest.fixture
def sphere():
    """Factory for closed sphere surfaces: sphere(radius, center)."""
    return sphere_surface
