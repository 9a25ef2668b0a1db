from __future__ import annotations

import pytest

from sketchgen.backbone import load_backbone
from sketchgen.guidance import GuidanceConfig
from sketchgen.pipeline import RunConfig

from _fixtures import exemplar_png_bytes, sketch_png_bytes


@pytest.fixture(scope="session")
def toy():
    # Stateless forward pass, safe to share across tests.
    return load_backbone("toy")


@pytest.fixture(scope="session")
def sketch_png() -> bytes:
    return sketch_png_bytes()


@pytest.fixture(scope="session")
def exemplar_png() -> bytes:
    return exemplar_png_bytes()


@pytest.fixture()
def fast_config() -> RunConfig:
    return RunConfig(
        num_inference_steps=10,
        output_size=32,
        guidance=GuidanceConfig(guided_steps=3),
    )
