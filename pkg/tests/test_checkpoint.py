import json
import os

import numpy as np
import pytest

from conftest import small_config
from repact import piecewise
from repact.checkpoint import (
    Checkpoint,
    FusedModel,
    fuse_checkpoint,
    load_any,
    load_checkpoint,
    load_fused,
    save_checkpoint,
    save_fused,
)
from repact.errors import CheckpointError, ValidationError
from repact.model import TinyCNN


def make_checkpoint(activation="repact_iii", seed=0):
    config = small_config(activation, seed=seed)
    model = TinyCNN.from_config(config)
    rng = np.random.default_rng(seed)
    for params in model.repact_layers().values():
        params.alphas[...] = rng.uniform(-1, 1, params.alphas.shape)
        if params.bn is not None:
            params.bn.running_mean, params.bn.running_var = 0.2, 1.7
    return Checkpoint.from_model(model, config, final_top1=0.5)


@pytest.fixture
def saved(tmp_path):
    checkpoint = make_checkpoint()
    path = str(tmp_path / "checkpoint")
    save_checkpoint(checkpoint, path)
    return checkpoint, path


class TestCheckpoint:
    def test_round_trip(self, saved):
        checkpoint, path = saved
        loaded = load_checkpoint(path)
        assert loaded.config == checkpoint.config
        assert loaded.model == checkpoint.model
        assert loaded.metadata == {"final_top1": 0.5}
        assert set(loaded.state) == set(checkpoint.state)
        for name, value in checkpoint.state.items():
            assert loaded.state[name].dtype == value.dtype
            np.testing.assert_array_equal(loaded.state[name], value)

    def test_rebuilt_model_matches(self, saved):
        checkpoint, path = saved
        x = np.random.default_rng(1).random((3, 1, 8, 8)).astype(np.float32)
        original = checkpoint.build_model().forward(x, "eval").data
        rebuilt = load_checkpoint(path).build_model().forward(x, "eval").data
        np.testing.assert_array_equal(original, rebuilt)

    def test_manifest_layout(self, saved):
        _, path = saved
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
        assert manifest["kind"] == "checkpoint"
        assert manifest["format_version"] == 1
        entry = manifest["tensors"]["block0.conv.weight"]
        assert entry == {"file": "block0.conv.weight.bin", "shape": [4, 1, 3, 3], "dtype": "<f4"}
        assert os.path.getsize(os.path.join(path, entry["file"])) == 4 * 9 * 4
        assert manifest["tensors"]["block0.act.alphas"]["dtype"] == "<f8"

    def test_experiment_config(self, saved):
        checkpoint, _ = saved
        assert checkpoint.experiment_config() == small_config("repact_iii")

    def test_truncated_payload(self, saved):
        _, path = saved
        payload = os.path.join(path, "head.weight.bin")
        with open(payload, "rb") as f:
            data = f.read()
        with open(payload, "wb") as f:
            f.write(data[:-4])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_unknown_version(self, saved):
        _, path = saved
        manifest_path = os.path.join(path, "manifest.json")
        with open(manifest_path) as f:
            manifest = json.load(f)
        manifest["format_version"] = 99
        with open(manifest_path, "w") as f:
            json.dump(manifest, f)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_invalid_json(self, saved):
        _, path = saved
        with open(os.path.join(path, "manifest.json"), "w") as f:
            f.write("{not json")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(str(tmp_path / "nowhere"))

    def test_mismatched_state(self, saved):
        checkpoint, _ = saved
        del checkpoint.state["head.bias"]
        with pytest.raises(ValidationError):
            checkpoint.build_model()


class TestFused:
    def test_layers_match_model(self, saved):
        checkpoint, _ = saved
        fused = fuse_checkpoint(checkpoint)
        assert isinstance(fused, FusedModel)
        assert set(fused.layers) == {"block0", "block1", "block2", "block3"}
        assert fused.layers == checkpoint.build_model().fused_polys()

    def test_round_trip_is_exact(self, saved, tmp_path):
        checkpoint, _ = saved
        fused = fuse_checkpoint(checkpoint)
        path = str(tmp_path / "fused")
        save_fused(fused, path)
        loaded = load_fused(path)
        assert loaded.layers == fused.layers
        assert set(loaded.state) == set(checkpoint.state)

    def test_fused_layer_documents(self, saved, tmp_path):
        checkpoint, _ = saved
        path = str(tmp_path / "fused")
        save_fused(fuse_checkpoint(checkpoint), path)
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
        assert manifest["kind"] == "fused"
        doc = manifest["fused_layers"]["block0"]
        assert piecewise.poly_from_document(doc).breakpoints == (-3.0, 0.0, 3.0)

    def test_kinds_are_not_interchangeable(self, saved, tmp_path):
        checkpoint, path = saved
        fused_path = str(tmp_path / "fused")
        save_fused(fuse_checkpoint(checkpoint), fused_path)
        with pytest.raises(ValidationError):
            load_checkpoint(fused_path)
        with pytest.raises(ValidationError):
            load_fused(path)
        assert isinstance(load_any(fused_path), FusedModel)
        assert not isinstance(load_any(path), FusedModel)

    def test_baseline_model_has_no_fused_layers(self):
        fused = fuse_checkpoint(make_checkpoint("relu"))
        assert fused.layers == {}
