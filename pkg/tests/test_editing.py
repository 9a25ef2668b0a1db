from __future__ import annotations

import hashlib

import numpy as np
import pytest
import torch

from sketchgen.containers import ContainerError, write_container
from sketchgen.editing import (
    EditingConfig,
    ExemplarFeatures,
    export_exemplar,
    generate_with_exemplar,
    load_exemplar,
    record_exemplar,
)
from sketchgen.guidance import GuidanceConfig
from sketchgen.pipeline import RunConfig, generate

from _fixtures import make_blob_stack, stub_trajectory


@pytest.fixture(scope="module")
def fast_cfg():
    return RunConfig(
        num_inference_steps=10, output_size=32, guidance=GuidanceConfig(guided_steps=3)
    )


@pytest.fixture(scope="module")
def exemplar_feats(toy, exemplar_png, fast_cfg):
    return record_exemplar(exemplar_png, "cat", fast_cfg, backbone=toy)


@pytest.fixture(scope="module")
def blob_features(toy, fast_cfg):
    return (stub_trajectory(toy), make_blob_stack(toy, fast_cfg.make_schedule()))


def test_record_exemplar_covers_every_step_and_clean_pass(
    toy, exemplar_png, fast_cfg, exemplar_feats
):
    expected = tuple(sorted([-1] + list(fast_cfg.make_schedule().sample_timesteps)))
    assert exemplar_feats.timesteps == expected
    assert len(exemplar_feats.timesteps) == 11
    for t in exemplar_feats.timesteps:
        per = exemplar_feats.features[t]
        assert set(per) == set(toy.self_layer_ids)
        k, v = per["self_4x4"]
        assert k.shape == (2, 16, 8) and v.shape == (2, 16, 8)
    assert exemplar_feats.source_hash == hashlib.sha256(exemplar_png).hexdigest()
    assert exemplar_feats.prompt_used == "a photo of a cat"


def test_record_exemplar_no_layers_is_inert(toy, exemplar_png, fast_cfg):
    feats = record_exemplar(exemplar_png, "cat", fast_cfg, backbone=toy, layers=())
    assert all(per == {} for per in feats.features.values())


def test_disabled_substitution_is_bitwise_plain_generate(
    toy, fast_cfg, blob_features, exemplar_feats
):
    plain = generate(blob_features, "cat", 7, fast_cfg, backbone=toy)
    edited = generate_with_exemplar(
        blob_features, exemplar_feats, "cat", 7, fast_cfg,
        editing=EditingConfig(enabled=False), backbone=toy,
    )
    assert edited.latent.numpy().tobytes() == plain.latent.numpy().tobytes()
    assert np.array_equal(edited.image, plain.image)


def test_enabled_substitution_changes_output(toy, fast_cfg, blob_features, exemplar_feats):
    plain = generate(blob_features, "cat", 7, fast_cfg, backbone=toy)
    edited = generate_with_exemplar(
        blob_features, exemplar_feats, "cat", 7, fast_cfg,
        editing=EditingConfig(start_step=1), backbone=toy,
    )
    assert not torch.equal(edited.latent, plain.latent)


def test_window_choice_changes_output(toy, fast_cfg, blob_features, exemplar_feats):
    early = generate_with_exemplar(
        blob_features, exemplar_feats, "cat", 7, fast_cfg,
        editing=EditingConfig(start_step=1, end_step=5), backbone=toy,
    )
    late = generate_with_exemplar(
        blob_features, exemplar_feats, "cat", 7, fast_cfg,
        editing=EditingConfig(start_step=6, end_step=10), backbone=toy,
    )
    assert not torch.equal(early.latent, late.latent)


def test_window_past_schedule_is_inactive(toy, fast_cfg, blob_features, exemplar_feats):
    plain = generate(blob_features, "cat", 3, fast_cfg, backbone=toy)
    out = generate_with_exemplar(
        blob_features, exemplar_feats, "cat", 3, fast_cfg,
        editing=EditingConfig(start_step=11), backbone=toy,
    )
    assert out.latent.numpy().tobytes() == plain.latent.numpy().tobytes()


def test_editing_config_validation():
    with pytest.raises(ValueError, match="1-based"):
        EditingConfig(start_step=0)
    with pytest.raises(ValueError, match="end_step"):
        EditingConfig(start_step=5, end_step=4)
    assert EditingConfig().end_step is None


def test_missing_timestep_coverage_is_rejected(toy, exemplar_feats):
    config = RunConfig(
        num_inference_steps=25, output_size=32, guidance=GuidanceConfig(guided_steps=3)
    )
    features = (stub_trajectory(toy), make_blob_stack(toy, config.make_schedule()))
    with pytest.raises(ValueError, match="missing substituted timesteps"):
        generate_with_exemplar(features, exemplar_feats, "cat", 0, config, backbone=toy)


def test_exemplar_features_shape_consistency():
    k = torch.zeros(2, 16, 8, dtype=torch.float64)
    with pytest.raises(ValueError, match="inconsistent"):
        ExemplarFeatures(
            {
                100: {"self_4x4": (k, k)},
                200: {"self_4x4": (torch.zeros(2, 4, 8, dtype=torch.float64), k)},
            },
            "x",
            "p",
        )


def test_export_load_roundtrip_is_bitexact(tmp_path, exemplar_feats):
    path = tmp_path / "exemplar.sgc"
    export_exemplar(exemplar_feats, path, dtype="<f8")
    loaded = load_exemplar(path)
    assert loaded.timesteps == exemplar_feats.timesteps
    assert loaded.source_hash == exemplar_feats.source_hash
    assert loaded.prompt_used == exemplar_feats.prompt_used
    for t in exemplar_feats.timesteps:
        for layer, (k, v) in exemplar_feats.features[t].items():
            lk, lv = loaded.features[t][layer]
            assert lk.numpy().tobytes() == k.numpy().tobytes()
            assert lv.numpy().tobytes() == v.numpy().tobytes()


def test_load_rejects_foreign_container(tmp_path):
    path = tmp_path / "other.sgc"
    write_container(path, "latent-trajectory", [("latents", np.zeros((2, 2)))], {})
    with pytest.raises(ContainerError, match="not exemplar features"):
        load_exemplar(path)
