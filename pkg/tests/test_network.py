"""Model building, traced forward passes, and weight persistence."""

import numpy as np
import pytest

from relguide.engine import Tensor
from relguide.errors import ConfigError, DimensionError, FormatError
from relguide.network import (
    build_default_model,
    forward_inference,
    forward_with_trace,
    infer_shapes,
    load_weights,
    save_weights,
)

from helpers import random_conv_net


class TestBuildDefaultModel:
    def test_final_dense_fan_in(self):
        model = build_default_model((3, 64, 64), seed=0)
        shapes = infer_shapes(model.layers, model.input_shape)
        flat = [s for s in shapes if len(s) == 1]
        assert flat[0] == (128 * 4 * 4,)
        dense_weights = [
            model.params[n] for n in model.param_names()
            if n.endswith(".weight") and model.params[n].data.ndim == 2
        ]
        assert dense_weights[0].data.shape == (256, 2048)

    def test_same_seed_bit_identical(self):
        a = build_default_model((3, 64, 64), seed=42)
        b = build_default_model((3, 64, 64), seed=42)
        for name in a.param_names():
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_different_seed_differs(self):
        a = build_default_model((3, 64, 64), seed=1)
        b = build_default_model((3, 64, 64), seed=2)
        assert any(
            not np.array_equal(a.params[n].data, b.params[n].data)
            for n in a.param_names() if n.endswith(".weight")
        )

    def test_too_small_input_rejected(self):
        with pytest.raises(ConfigError):
            build_default_model((3, 8, 8), seed=0)

    def test_layer_count(self):
        model = build_default_model((3, 64, 64), seed=0)
        assert len(model.layers) == 18


class TestForward:
    def test_zero_input_zero_biases_gives_last_bias(self):
        model = build_default_model((3, 32, 32), seed=0, conv_channels=(4, 4, 4, 4), dense_units=8)
        last_dense = max(
            int(n.split(".")[0][5:]) for n in model.param_names() if n.endswith(".bias")
        )
        model.params[f"layer{last_dense}.bias"].data[:] = [0.5, -0.25]
        logits, _ = forward_with_trace(model, np.zeros((3, 32, 32), dtype=np.float32))
        np.testing.assert_array_equal(logits.data, [0.5, -0.25])

    def test_trace_length(self, rng):
        model, x = random_conv_net(rng)
        _, trace = forward_with_trace(model, x)
        assert len(trace) == len(model.layers) + 1

    def test_trace_matches_traceless_forward(self, rng):
        model, x = random_conv_net(rng, with_pool=True)
        logits_graph, trace = forward_with_trace(model, x)
        logits_plain, acts, _ = forward_inference(model, x)
        np.testing.assert_array_equal(logits_graph.data, logits_plain)
        for t, a in zip(trace.tensors, acts):
            np.testing.assert_array_equal(t.data, a)

    def test_shape_mismatch(self, rng):
        model, _ = random_conv_net(rng)
        with pytest.raises(DimensionError):
            forward_with_trace(model, np.zeros((1, 3, 3), dtype=np.float32))

    def test_dropout_only_in_training_mode(self):
        model = build_default_model((3, 32, 32), seed=3, conv_channels=(4, 4, 4, 4), dense_units=8)
        x = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
        inference1, _ = forward_with_trace(model, x, training=False)
        inference2, _ = forward_with_trace(model, x, training=False)
        np.testing.assert_array_equal(inference1.data, inference2.data)
        t1, _ = forward_with_trace(model, x, training=True, rng=np.random.default_rng(5))
        t2, _ = forward_with_trace(model, x, training=True, rng=np.random.default_rng(5))
        t3, _ = forward_with_trace(model, x, training=True, rng=np.random.default_rng(6))
        np.testing.assert_array_equal(t1.data, t2.data)
        assert not np.array_equal(t1.data, t3.data)


class TestWeightPersistence:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        model, _ = random_conv_net(rng)
        path = tmp_path / "w.rgtw"
        save_weights(model, path)
        loaded = load_weights(path, template=model)
        for name in model.param_names():
            np.testing.assert_array_equal(loaded.params[name].data, model.params[name].data)
        path2 = tmp_path / "w2.rgtw"
        save_weights(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_template_free_load_of_default_family(self, tmp_path):
        model = build_default_model((3, 32, 32), seed=9, conv_channels=(4, 6, 8, 10), dense_units=16)
        path = tmp_path / "w.rgtw"
        save_weights(model, path)
        loaded = load_weights(path)
        assert loaded.input_shape == (3, 32, 32)
        for name in model.param_names():
            np.testing.assert_array_equal(loaded.params[name].data, model.params[name].data)

    def test_corrupted_magic(self, tmp_path, rng):
        model, _ = random_conv_net(rng)
        path = tmp_path / "w.rgtw"
        save_weights(model, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_weights(path, template=model)

    def test_wrong_tensor_count(self, tmp_path, rng):
        model, _ = random_conv_net(rng)
        path = tmp_path / "w.rgtw"
        save_weights(model, path)
        blob = bytearray(path.read_bytes())
        # header: magic u32 version u32 count -> bump the tensor count
        count = int.from_bytes(blob[8:12], "little")
        blob[8:12] = (count + 1).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_weights(path, template=model)

    def test_truncated_file(self, tmp_path, rng):
        model, _ = random_conv_net(rng)
        path = tmp_path / "w.rgtw"
        save_weights(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 7])
        with pytest.raises(FormatError):
            load_weights(path, template=model)
