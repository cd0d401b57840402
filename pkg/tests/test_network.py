"""Architecture assembly, forward contract, and checkpoint persistence."""

import numpy as np
import pytest

from median_denoise.network import (NetworkConfig, build_network, forward,
                                    save_checkpoint, load_checkpoint,
                                    CheckpointError)
from median_denoise.tensor import Tape


def param_count(blocks, features, channels):
    """Closed-form size of the residual variant."""
    f, c = features, channels
    conv_in = f * c * 9 + f
    per_block = 2 * (f * f * 9 + f) + 4 * f  # two convs, two bn pairs
    conv_out = c * f * 9 + c
    return conv_in + blocks * per_block + conv_out


def test_layer_plan_for_4_blocks():
    plan = NetworkConfig(blocks=4, features=8).layer_plan()
    kinds = [("conv", "conv_in"), ("median",), ("median",),
             ("block", "block0"), ("median",),
             ("block", "block1"), ("median",),
             ("block", "block2"), ("block", "block3"),
             ("conv", "conv_out")]
    assert plan == kinds


def test_layer_plan_without_medians_is_plain_residual_cnn():
    plan = NetworkConfig(blocks=4, features=8, median_half=False).layer_plan()
    assert [p[0] for p in plan] == ["conv"] + ["block"] * 4 + ["conv"]


def test_layer_plan_medians_on_raw_input():
    plan = NetworkConfig(blocks=2, features=8,
                         medians_on_input=True).layer_plan()
    assert plan[0] == ("median",) and plan[1] == ("median",)
    assert plan[2] == ("conv", "conv_in")


def test_same_seed_gives_bit_identical_parameters():
    cfg = NetworkConfig(blocks=2, features=8, seed=42)
    a, b = build_network(cfg), build_network(cfg)
    assert sorted(a.params) == sorted(b.params)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    c = build_network(NetworkConfig(blocks=2, features=8, seed=43))
    assert (c.params["conv_in.weight"].data !=
            a.params["conv_in.weight"].data).any()


@pytest.mark.parametrize("blocks", [2, 4, 16])
def test_parameter_count_matches_closed_form(blocks):
    cfg = NetworkConfig(blocks=blocks, features=16, in_channels=3)
    assert build_network(cfg).num_parameters() == param_count(blocks, 16, 3)


def test_conv_relu_variant_has_single_conv_per_block():
    cfg = NetworkConfig(blocks=2, features=8, block_kind="conv_relu")
    model = build_network(cfg)
    assert "block0.conv2.weight" not in model.params
    assert "block0.bn2" not in model.bn_states
    x = np.random.default_rng(0).random((1, 3, 10, 10)).astype(np.float32)
    assert model.predict(x, mode="train").shape == x.shape


@pytest.mark.parametrize("field,value", [
    ("blocks", 1), ("features", 0), ("median_kernel", 4),
    ("leading_medians", -1), ("in_channels", 2), ("block_kind", "dense")])
def test_invalid_config_error_names_the_field(field, value):
    with pytest.raises(ValueError, match=field):
        NetworkConfig(**{field: value})


def test_config_json_round_trip():
    cfg = NetworkConfig(blocks=4, features=32, median_kernel=5,
                        median_half=False, in_channels=1, seed=9,
                        block_kind="conv_relu", medians_on_input=True)
    assert NetworkConfig.from_json(cfg.to_json()) == cfg


@pytest.mark.parametrize("h,w", [(8, 8), (21, 17), (70, 70)])
def test_forward_accepts_any_spatial_size(h, w):
    model = build_network(NetworkConfig(blocks=2, features=4))
    x = np.random.default_rng(1).random((1, 3, h, w)).astype(np.float32)
    out = model.predict(x, mode="train")
    assert out.shape == x.shape
    assert np.isfinite(out).all()


def test_eval_output_clamped_to_unit_range():
    model = build_network(NetworkConfig(blocks=2, features=4))
    model.init_bn_stats()
    x = np.random.default_rng(2).random((1, 3, 12, 12)).astype(np.float32)
    out = model.predict(x, mode="eval")
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_eval_before_training_requires_explicit_init():
    model = build_network(NetworkConfig(blocks=2, features=4))
    x = np.zeros((1, 3, 8, 8), dtype=np.float32)
    with pytest.raises(RuntimeError, match="uninitialized"):
        model.predict(x, mode="eval")
    model.init_bn_stats()
    model.predict(x, mode="eval")


def test_forward_rejects_channel_mismatch():
    model = build_network(NetworkConfig(blocks=2, features=4, in_channels=3))
    tape = Tape()
    with pytest.raises(ValueError, match="channels"):
        forward(model, tape.constant(np.zeros((1, 1, 8, 8))), tape)


def test_translation_covariance_in_the_interior():
    # eval-mode batchnorm is a fixed per-channel affine map, so the whole
    # network is a composition of local, shift-covariant operations
    model = build_network(NetworkConfig(blocks=2, features=4, in_channels=1,
                                        seed=3))
    model.init_bn_stats()
    rng = np.random.default_rng(4)
    master = rng.random((1, 1, 48, 48)).astype(np.float32)
    out_a = model.predict(master[:, :, 0:40, 0:40], mode="eval")
    out_b = model.predict(master[:, :, 2:42, 2:42], mode="eval")
    # receptive radius is 9 pixels (9 stacked 3x3 layers); margin 14
    np.testing.assert_allclose(out_a[:, :, 16:36, 16:36],
                               out_b[:, :, 14:34, 14:34], atol=1e-6)


# -- checkpoints -------------------------------------------------------------

@pytest.mark.parametrize("blocks", [2, 4])
def test_checkpoint_round_trip_forward_bit_identical(blocks, tmp_path):
    model = build_network(NetworkConfig(blocks=blocks, features=8, seed=5))
    model.init_bn_stats()
    x = np.random.default_rng(6).random((1, 3, 16, 16)).astype(np.float32)
    before = model.predict(x, mode="eval")
    path = tmp_path / "ckpt"
    save_checkpoint(model, path, step=7)
    loaded, meta, opt = load_checkpoint(path)
    assert meta["step"] == 7 and opt == {}
    np.testing.assert_array_equal(loaded.predict(x, mode="eval"), before)


def test_checkpoint_is_self_describing(tmp_path):
    cfg = NetworkConfig(blocks=4, features=8, median_kernel=5, in_channels=1)
    path = tmp_path / "ckpt"
    save_checkpoint(build_network(cfg), path)
    loaded, _, _ = load_checkpoint(path)
    assert loaded.config == cfg


def test_truncated_checkpoint_rejected(tmp_path):
    path = tmp_path / "ckpt"
    save_checkpoint(build_network(NetworkConfig(blocks=2, features=4)), path)
    data = path.read_bytes()
    trunc = tmp_path / "trunc"
    trunc.write_bytes(data[:len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated|corrupt"):
        load_checkpoint(trunc)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "ckpt"
    save_checkpoint(build_network(NetworkConfig(blocks=2, features=4)), path)
    path.write_bytes(path.read_bytes() + b"extra")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_non_checkpoint_file_rejected(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"PNG\x89 definitely not a checkpoint")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "ckpt"
    save_checkpoint(build_network(NetworkConfig(blocks=2, features=4)), path)
    data = bytearray(path.read_bytes())
    data[8] = 99  # bump the little-endian version field
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_preserves_bn_running_stats(tmp_path):
    model = build_network(NetworkConfig(blocks=2, features=4))
    x = np.random.default_rng(7).random((2, 3, 8, 8)).astype(np.float32)
    model.predict(x, mode="train")  # populate running stats
    path = tmp_path / "ckpt"
    save_checkpoint(model, path)
    loaded, _, _ = load_checkpoint(path)
    for name, st in model.bn_states.items():
        assert loaded.bn_states[name].initialized
        np.testing.assert_array_equal(loaded.bn_states[name].running_mean,
                                      st.running_mean)
        np.testing.assert_array_equal(loaded.bn_states[name].running_var,
                                      st.running_var)
