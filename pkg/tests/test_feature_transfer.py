import logging

import numpy as np
import pytest

from action_nets import Conv3dNetLite, SkeletonGraphNetLite, backbone_names, freeze
from autograd_tensor import ShapeError, Tensor, backward, matmul, no_grad, sgd_step, zero_grad
from experiment_config import ConfigError
from feature_transfer import (
    Granularity,
    TeacherFeatureCache,
    all_clips,
    check_granularity,
    cosine_distance,
    extract_clip,
    mse_distance,
    num_clips,
    teacher_video_feature,
    transfer_loss,
)
from paired_dataset import PairedVideo

CLIP_LEN = 4


def _teacher(seed=1):
    return Conv3dNetLite(in_channels=3, feature_dim=6, num_classes=3, num_blocks=1, stem_channels=4,
                         clip_len=CLIP_LEN, seed=seed)


def _student(seed=2, feature_dim=6):
    return Conv3dNetLite(in_channels=1, feature_dim=feature_dim, num_classes=2, num_blocks=1, stem_channels=4,
                         clip_len=CLIP_LEN, seed=seed)


def _video(frames, seed=0, index=0):
    rng = np.random.default_rng([seed, index])
    return PairedVideo(
        id=f"v{seed}-{index}", class_id=0, label=None,
        streams={
            "rgb": rng.random((3, frames, 8, 8)).astype(np.float32),
            "depth": rng.random((1, frames, 8, 8)).astype(np.float32),
            "skeleton": (rng.random((5, frames, 2)) * 8.0).astype(np.float32),
        },
    )


# ─────────────────────────────────────────────────────────────────────────────
# Distances
# ─────────────────────────────────────────────────────────────────────────────

def test_cosine_identical_is_zero():
    assert cosine_distance([0.5, -2.0, 1.0], [0.5, -2.0, 1.0]).item() == pytest.approx(0.0, abs=1e-6)


def test_cosine_orthogonal_is_one():
    assert cosine_distance([1.0, 0.0], [0.0, 1.0]).item() == pytest.approx(1.0)


def test_cosine_hand_value():
    assert cosine_distance([1.0, 1.0], [1.0, 0.0]).item() == pytest.approx(1.0 - 1.0 / np.sqrt(2.0), abs=1e-6)


def test_cosine_rowwise_batch():
    out = cosine_distance(np.eye(2), np.array([[1.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-6)


def test_cosine_both_zero_is_one_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="feature_transfer"):
        value = cosine_distance([0.0, 0.0], [0.0, 0.0]).item()
    assert value == 1.0
    assert "all-zero" in caplog.text


@pytest.mark.parametrize("scale", [1e-3, 0.5, 3.0, 250.0])
def test_cosine_invariant_to_positive_scaling(scale):
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    np.testing.assert_allclose(cosine_distance(a, b * scale).data, cosine_distance(a, b).data, atol=1e-6)


def test_distance_width_mismatch():
    with pytest.raises(ShapeError, match="cosine_distance"):
        cosine_distance([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ShapeError, match="mse_distance"):
        mse_distance([1.0, 2.0], [1.0])


def test_mse_values():
    assert mse_distance([1.0, 2.0], [1.0, 2.0]).item() == 0.0
    assert mse_distance([0.0, 0.0], [2.0, 0.0]).item() == pytest.approx(2.0)
    a, b = [0.3, -1.0, 2.0], [1.5, 0.5, -0.5]
    assert mse_distance(a, b).item() == mse_distance(b, a).item()


# ─────────────────────────────────────────────────────────────────────────────
# Clips
# ─────────────────────────────────────────────────────────────────────────────

@pytest.mark.parametrize("frames,expected", [(64, 4), (70, 4), (16, 1)])
def test_num_clips(frames, expected):
    assert num_clips(frames, 16) == expected


def test_num_clips_too_short():
    with pytest.raises(ValueError, match="shorter than one clip"):
        num_clips(15, 16)


def test_clip_windows_are_non_overlapping_from_zero():
    stream = np.arange(11, dtype=np.float32).reshape(1, 11, 1, 1)
    clips = all_clips(stream, 4)
    assert clips.shape == (2, 1, 4, 1, 1)
    np.testing.assert_array_equal(clips[1, 0, :, 0, 0], [4, 5, 6, 7])
    np.testing.assert_array_equal(extract_clip(stream, 1, 4), clips[1])
    with pytest.raises(IndexError):
        extract_clip(stream, 2, 4)


def test_teacher_video_feature_is_mean_of_clip_features():
    teacher = _teacher()
    for index in range(20):
        video = _video(CLIP_LEN * (1 + index % 4) + index % 3, seed=7, index=index)
        with no_grad():
            clips = all_clips(video.streams["rgb"], CLIP_LEN)
            brute = np.mean([teacher.forward_features(clip).data for clip in clips], axis=0)
        np.testing.assert_allclose(teacher_video_feature(teacher, video, CLIP_LEN), brute, atol=1e-5)


def test_single_clip_video_feature_equals_clip_feature():
    teacher = _teacher()
    video = _video(CLIP_LEN)
    with no_grad():
        single = teacher.forward_features(video.streams["rgb"]).data
    np.testing.assert_allclose(teacher_video_feature(teacher, video, CLIP_LEN), single, atol=1e-6)


def test_cache_computes_once_per_video():
    cache = TeacherFeatureCache(_teacher(), "rgb", CLIP_LEN)
    video = _video(3 * CLIP_LEN)
    first = cache.clip_features(video)
    assert cache.clip_features(video) is first
    assert len(cache) == 1
    np.testing.assert_allclose(cache.video_feature(video), first.mean(axis=0))


# ─────────────────────────────────────────────────────────────────────────────
# Transfer loss
# ─────────────────────────────────────────────────────────────────────────────

def _loss(granularity, teacher, student, videos, seed=0, **kwargs):
    options = dict(source_modality="rgb", target_modality="depth", clip_len=CLIP_LEN)
    options.update(kwargs)
    return transfer_loss(granularity, teacher, student, videos, np.random.default_rng(seed), **options)


def test_combined_is_exact_sum_of_terms():
    videos = [_video(CLIP_LEN * 3, index=i) for i in range(3)]
    terms = _loss("combined", _teacher(), _student(), videos)
    assert terms.total.data[0] == (terms.clip_term.data + terms.video_term.data)[0]
    assert len(terms.clip_indices) == 3 and all(0 <= i < 3 for i in terms.clip_indices)


def test_same_clip_index_for_both_terms():
    videos = [_video(CLIP_LEN * 3, index=i) for i in range(4)]
    combined = _loss("combined", _teacher(), _student(), videos, seed=5)
    clip_only = _loss("clip_to_clip", _teacher(), _student(), videos, seed=5)
    assert combined.clip_indices == clip_only.clip_indices
    assert combined.clip_term.item() == clip_only.total.item()


def test_single_clip_collapses_video_to_clip():
    videos = [_video(CLIP_LEN, index=i) for i in range(3)]
    clip = _loss("clip_to_clip", _teacher(), _student(), videos).total.item()
    video = _loss("video_to_clip", _teacher(), _student(), videos).total.item()
    assert video == pytest.approx(clip, abs=1e-6)


def test_identical_networks_give_zero_clip_loss():
    teacher = _teacher()
    freeze(teacher)
    student = teacher.copy()
    videos = [_video(CLIP_LEN * 2, index=i) for i in range(2)]
    terms = _loss("clip_to_clip", teacher, student, videos, target_modality="rgb")
    assert terms.total.item() == pytest.approx(0.0, abs=1e-5)


def test_teacher_receives_no_gradient():
    teacher, student = _teacher(), _student()
    videos = [_video(CLIP_LEN * 2, index=i) for i in range(2)]
    backward(_loss("combined", teacher, student, videos).total)
    assert all(p.grad is None for p in teacher.parameters().values())
    assert all(student.params[name].grad is not None for name in backbone_names(student))
    assert student.params["head.weight"].grad is None and student.params["head.bias"].grad is None


def test_teacher_scaling_leaves_cosine_loss_unchanged():
    videos = [_video(CLIP_LEN * 2, index=i) for i in range(3)]
    teacher = _teacher()
    student = _student()
    base = _loss("video_to_clip", teacher, student, videos).total.item()
    cache = TeacherFeatureCache(teacher, "rgb", CLIP_LEN)
    for video in videos:
        cache.clip_features(video)
    cache._clips = {k: v * 7.5 for k, v in cache._clips.items()}
    cache._videos = {k: v * 7.5 for k, v in cache._videos.items()}
    scaled = _loss("video_to_clip", teacher, student, videos, cache=cache).total.item()
    assert scaled == pytest.approx(base, abs=1e-6)


def test_projection_bridges_widths():
    from action_nets import make_projection

    student = _student(feature_dim=4)
    projection = make_projection(4, 6, seed=0)
    terms = _loss("clip_to_clip", _teacher(), student, [_video(CLIP_LEN * 2)], projection=projection)
    backward(terms.total)
    assert projection.params["projection.weight"].grad is not None
    with pytest.raises(ShapeError):
        _loss("clip_to_clip", _teacher(), student, [_video(CLIP_LEN * 2)])


def test_video_to_video_with_skeleton_student():
    student = SkeletonGraphNetLite(num_joints=5, feature_dim=6, num_classes=2, num_blocks=1, hidden_channels=4,
                                   canvas_size=8.0, seed=0)
    videos = [_video(CLIP_LEN * 2, index=0), _video(CLIP_LEN * 3 + 1, index=1)]
    terms = _loss("video_to_video", _teacher(), student, videos, target_modality="skeleton")
    assert terms.clip_term is None and terms.clip_indices is None
    assert 0.0 <= terms.total.item() <= 2.0


def test_granularity_must_fit_student():
    skeleton = SkeletonGraphNetLite(num_joints=5, feature_dim=6, num_classes=2, num_blocks=1, seed=0)
    with pytest.raises(ConfigError, match="video_to_video"):
        check_granularity("combined", skeleton)
    with pytest.raises(ConfigError, match="whole-sequence"):
        check_granularity(Granularity.VIDEO_TO_VIDEO, _student())
    with pytest.raises(ConfigError, match="unknown granularity"):
        check_granularity("frame_to_frame", _student())
    assert check_granularity("video_to_video", skeleton) is Granularity.VIDEO_TO_VIDEO


def test_unknown_loss_rejected():
    with pytest.raises(ConfigError, match="unknown loss"):
        _loss("clip_to_clip", _teacher(), _student(), [_video(CLIP_LEN)], loss="huber")


def test_mse_loss_option():
    terms = _loss("clip_to_clip", _teacher(), _student(), [_video(CLIP_LEN * 2)], loss="mse")
    assert terms.total.item() >= 0.0


def test_cosine_supervision_drives_linear_student_to_targets():
    rng = np.random.default_rng(0)
    dim = 4
    targets = rng.standard_normal((dim, dim))
    start = rng.standard_normal((dim, dim))
    start *= np.sign(np.sum(start * targets, axis=1, keepdims=True))
    weight = Tensor(start, requires_grad=True)
    inputs = Tensor(np.eye(dim))
    for _ in range(500):
        loss = cosine_distance(matmul(inputs, weight), Tensor(targets)).mean()
        zero_grad([weight])
        backward(loss)
        sgd_step([weight], lr=0.5, momentum=0.9)
    final = cosine_distance(matmul(inputs, weight), Tensor(targets)).mean().item()
    assert final < 1e-3
