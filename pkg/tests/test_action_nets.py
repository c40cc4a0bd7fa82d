import numpy as np
import pytest

from action_nets import (
    Conv3dNetLite,
    FeatureProjection,
    SkeletonGraphNetLite,
    build_network,
    export_backbone,
    inflate_from_modality,
    load_network,
    make_projection,
    normalized_adjacency,
    replace_head,
    save_network,
    set_trainable,
    split_parameters,
)
from autograd_tensor import ShapeError, Tensor, backward, no_grad, softmax, sum_axis
from experiment_config import ConfigError
from tensor_checkpoint import CheckpointError, load_checkpoint


def _clip_net(**kwargs):
    options = dict(in_channels=1, feature_dim=6, num_classes=5, num_blocks=3, stem_channels=4, clip_len=8, seed=1)
    options.update(kwargs)
    return Conv3dNetLite(**options)


def _skeleton_net(**kwargs):
    options = dict(num_joints=5, feature_dim=6, num_classes=3, num_blocks=2, hidden_channels=4, seed=1)
    options.update(kwargs)
    return SkeletonGraphNetLite(**options)


def _clips(n, channels=1, seed=0):
    return np.random.default_rng(seed).random((n, channels, 8, 16, 16)).astype(np.float32)


def _sequence(frames, joints=5, seed=0):
    return (np.random.default_rng(seed).random((joints, frames, 2)) * 16.0).astype(np.float32)


# ─────────────────────────────────────────────────────────────────────────────
# Conv3dNetLite
# ─────────────────────────────────────────────────────────────────────────────

def test_zero_head_gives_equal_logits():
    net = _clip_net()
    net.params["head.weight"].data[:] = 0.0
    with no_grad():
        logits = net.forward_classify(_clips(1)[0])
    assert logits.shape == (5,)
    assert np.all(logits.data == logits.data[0])


def test_features_deterministic_bit_exact():
    clip = _clips(1)[0]
    with no_grad():
        a = _clip_net().forward_features(clip).data
        b = _clip_net().forward_features(clip).data
    assert a.tobytes() == b.tobytes()


def test_feature_width_matches_config():
    net = _clip_net(feature_dim=7)
    with no_grad():
        feats = net.forward_features(_clips(10, seed=3))
    assert feats.shape == (10, 7)


def test_softmax_of_logits_sums_to_one():
    net = _clip_net()
    with no_grad():
        probs = softmax(net.forward_classify(_clips(3)))
    np.testing.assert_allclose(probs.data.sum(axis=-1), np.ones(3), atol=1e-5)


@pytest.mark.parametrize("shape", [(2, 8, 16, 16), (1, 6, 16, 16), (16, 16)])
def test_wrong_clip_shape_names_expectation(shape):
    with pytest.raises(ShapeError, match=r"expected \[1, 8, H, W\]"):
        _clip_net().forward_features(np.zeros(shape, dtype=np.float32))


def test_gradients_reach_every_parameter():
    net = _clip_net(num_blocks=2)
    backward(sum_axis(net.forward_classify(_clips(2))))
    assert all(p.grad is not None for p in net.parameters().values())


def test_copy_is_independent():
    net = _clip_net()
    twin = net.copy()
    twin.params["stem.bias"].data += 1.0
    assert not np.array_equal(net.params["stem.bias"].data, twin.params["stem.bias"].data)


# ─────────────────────────────────────────────────────────────────────────────
# Parameter policies
# ─────────────────────────────────────────────────────────────────────────────

def test_all_layers_freezes_nothing():
    net = _clip_net()
    frozen, trainable = split_parameters(net, "all_layers")
    assert frozen == []
    assert trainable == list(net.parameters())


def test_head_plus_last_block_partition():
    net = _clip_net(num_blocks=3)
    frozen, trainable = split_parameters(net, "head_plus_last_block")
    assert all(name.startswith(("blocks.2.", "head.")) for name in trainable)
    assert all(name.startswith(("stem.", "blocks.0.", "blocks.1.")) for name in frozen)
    assert "head.weight" in trainable and "blocks.2.conv2.weight" in trainable
    assert sorted(frozen + trainable) == sorted(net.parameters())


def test_unknown_policy_rejected():
    with pytest.raises(ConfigError, match="freeze policy"):
        split_parameters(_clip_net(), "everything")


def test_set_trainable_only_marks_chosen():
    net = _clip_net()
    chosen = set_trainable(net, ["head.bias"])
    assert [p.name for p in chosen] == ["head.bias"]
    assert [n for n, p in net.parameters().items() if p.requires_grad] == ["head.bias"]


def test_replace_head_changes_width():
    net = _clip_net()
    replace_head(net, 2, seed=4)
    assert net.params["head.weight"].shape == (6, 2)
    with no_grad():
        assert net.forward_classify(_clips(1)[0]).shape == (2,)


# ─────────────────────────────────────────────────────────────────────────────
# SkeletonGraphNetLite
# ─────────────────────────────────────────────────────────────────────────────

def test_adjacency_is_symmetric_and_normalized():
    a = normalized_adjacency(5)
    np.testing.assert_allclose(a, a.T)
    # joint 2 hangs off joint 1, joint 3 off the root
    assert a[1, 2] > 0 and a[0, 3] > 0 and a[0, 2] == 0
    assert np.all(np.linalg.eigvalsh(a.astype(np.float64)) <= 1.0 + 1e-6)


def test_skeleton_feature_width():
    net = _skeleton_net(feature_dim=9)
    with no_grad():
        assert net.forward_features(_sequence(12)).shape == (9,)
        assert net.forward_features([_sequence(12), _sequence(7, seed=1)]).shape == (2, 9)


def test_padding_does_not_change_features():
    net = _skeleton_net()
    short = _sequence(7, seed=2)
    with no_grad():
        alone = net.forward_features(short).data
        batched = net.forward_features([_sequence(15, seed=3), short]).data[1]
    np.testing.assert_allclose(alone, batched, atol=1e-5)


def test_valid_frames_ignores_the_tail():
    net = _skeleton_net()
    seq = _sequence(12, seed=4)
    with no_grad():
        truncated = net.forward_features(seq[:, :9]).data
        masked = net.forward_features(seq, valid_frames=9).data
    np.testing.assert_allclose(truncated, masked, atol=1e-5)


@pytest.mark.parametrize("shape", [(4, 10, 2), (5, 10, 3), (5, 1, 2)])
def test_wrong_sequence_shape_rejected(shape):
    with pytest.raises(ShapeError, match="skeleton_graph"):
        _skeleton_net().forward_features(np.zeros(shape, dtype=np.float32))


def test_even_temporal_kernel_rejected():
    with pytest.raises(ConfigError, match="odd"):
        _skeleton_net(temporal_kernel=4)


# ─────────────────────────────────────────────────────────────────────────────
# Projection
# ─────────────────────────────────────────────────────────────────────────────

def test_projection_absent_for_equal_widths():
    assert make_projection(8, 8) is None


def test_projection_maps_to_teacher_width():
    projection = make_projection(6, 10, seed=0)
    assert isinstance(projection, FeatureProjection)
    assert projection(Tensor(np.ones((3, 6)))).shape == (3, 10)
    assert projection(Tensor(np.ones(6))).shape == (10,)
    with pytest.raises(ShapeError):
        projection(Tensor(np.ones(5)))


# ─────────────────────────────────────────────────────────────────────────────
# Persistence
# ─────────────────────────────────────────────────────────────────────────────

def test_save_and_load_network(tmp_path):
    net = _skeleton_net()
    save_network(tmp_path / "net.ckpt", net, {"seed": "1"})
    loaded, tags = load_network(tmp_path / "net.ckpt")
    assert isinstance(loaded, SkeletonGraphNetLite)
    assert tags["arch"] == "skeleton_graph" and tags["seed"] == "1"
    for name, p in net.parameters().items():
        np.testing.assert_array_equal(loaded.params[name].data, p.data)


def test_load_rejects_non_network_checkpoint(tmp_path):
    export_backbone(tmp_path / "backbone.ckpt", _clip_net())
    with pytest.raises(CheckpointError, match="parameter names"):
        load_network(tmp_path / "backbone.ckpt")


def test_export_backbone_drops_head(tmp_path):
    export_backbone(tmp_path / "backbone.ckpt", _clip_net())
    tensors, tags = load_checkpoint(tmp_path / "backbone.ckpt")
    assert tags["role"] == "backbone"
    assert "stem.weight" in tensors
    assert not [name for name in tensors if name.startswith("head.")]


def test_build_network_unknown_arch():
    with pytest.raises(ConfigError, match="arch"):
        build_network("transformer", {})


def test_inflate_averages_stem_over_channels():
    rgb = _clip_net(in_channels=3)
    depth = inflate_from_modality(rgb, 1)
    expected = rgb.params["stem.weight"].data.mean(axis=1, keepdims=True)
    np.testing.assert_allclose(depth.params["stem.weight"].data, expected)
    np.testing.assert_array_equal(depth.params["blocks.0.conv1.weight"].data, rgb.params["blocks.0.conv1.weight"].data)
    with no_grad():
        assert depth.forward_features(_clips(1)[0]).shape == (6,)
