"""Shared fixtures: procedural models, pipeline library directories and helpers."""

from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from silrecon import shapes
from silrecon.geometry import normalize_model, save_mesh
from silrecon.render import CameraPose, SilhouetteImage, canonical_scale, render_silhouette, save_png

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

RES = 256

MODEL_FACTORIES = {
    "chair": shapes.chair,
    "table": shapes.table,
    "lamp": shapes.lamp,
    "stool_asym": shapes.stool_asym,
    "desk": shapes.desk,
    "armchair": lambda: shapes.chair(arms=True),
}


def canonical_pose(az_deg: float, el_deg: float = 0.0, res: int = RES) -> CameraPose:
    return CameraPose(math.radians(az_deg), math.radians(el_deg), ortho_scale=canonical_scale(res))


def mask_image(mask: np.ndarray) -> SilhouetteImage:
    """Unlabeled single-part silhouette from a boolean mask."""
    return SilhouetteImage(np.where(mask, 0, -1).astype(np.int32))


def write_library(directory: Path, names) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for name in names:
        save_mesh(MODEL_FACTORIES[name](), directory / f"{name}.obj")
    return directory


def stretched_chair_target(path: Path, factor: float = 1.3, pose: CameraPose | None = None,
                           res: int = RES) -> Path:
    """Chair with legs scaled by ``factor``, floor kept at y = 0, expressed in the
    normalized frame of the unmodified chair and rendered with canonical framing."""
    _, sim = normalize_model(shapes.chair())
    raw = shapes.translate(shapes.chair(leg_length=0.45 * factor), (0, -0.45 * (factor - 1), 0))
    target = raw.with_vertices(sim.apply(raw.vertices))
    img = render_silhouette(target, pose or canonical_pose(45.0), res)
    save_png(mask_image(img.mask), path)
    return path


@pytest.fixture(scope="session")
def normalized_models():
    return {name: normalize_model(f())[0] for name, f in MODEL_FACTORIES.items()}
