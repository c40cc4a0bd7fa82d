# -*- coding: utf-8 -*-
"""
Feature supervision across modalities.

A frozen teacher sees the source stream of a paired video, the student sees
the target stream, and the student is trained so its pre-head feature
points the same way as the teacher's. Four granularities decide which
features are compared:

    clip_to_clip     student clip i  vs  teacher clip i (same window)
    video_to_clip    student clip i  vs  mean of all teacher clips
    combined         clip_to_clip + video_to_clip on the same clip i
    video_to_video   whole student sequence  vs  mean of all teacher clips

Clips are the first N = floor(T / clip_len) non-overlapping windows starting
at frame 0; trailing frames are unused. The clip index i is drawn uniformly
from range(N) with the caller's Generator, one draw per sample, in batch
order.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from autograd_tensor import ShapeError, Tensor, l2_norm, mean_axis, no_grad, sum_axis
from experiment_config import ConfigError

logger = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────────────────────
# CONSTANTS
# ─────────────────────────────────────────────────────────────────────────────

COSINE_EPSILON = 1e-8


class Granularity(str, Enum):
    CLIP_TO_CLIP = "clip_to_clip"
    VIDEO_TO_CLIP = "video_to_clip"
    COMBINED = "combined"
    VIDEO_TO_VIDEO = "video_to_video"

    @property
    def uses_clips(self) -> bool:
        return self is not Granularity.VIDEO_TO_VIDEO


# ─────────────────────────────────────────────────────────────────────────────
# DISTANCES
# ─────────────────────────────────────────────────────────────────────────────

def _check_widths(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: feature shapes {a.shape} and {b.shape} differ")


def cosine_distance(a, b) -> Tensor:
    """
    1 - a·b / (‖a‖‖b‖ + 1e-8) along the last axis.

    Vectors give shape (1,), [N, D] batches give one distance per row. Two
    all-zero operands give exactly 1 and a warning.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    _check_widths("cosine_distance", a, b)
    both_zero = np.logical_and(~np.any(a.data, axis=-1), ~np.any(b.data, axis=-1))
    if np.any(both_zero):
        logger.warning("cosine_distance: %d pair(s) of all-zero features, distance taken as 1",
                       int(np.sum(both_zero)))
    dot = sum_axis(a * b, axis=-1)
    norms = l2_norm(a, axis=-1) * l2_norm(b, axis=-1)
    return 1.0 - dot / (norms + COSINE_EPSILON)


def mse_distance(a, b) -> Tensor:
    """Mean squared difference along the last axis."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    _check_widths("mse_distance", a, b)
    diff = a - b
    return mean_axis(diff * diff, axis=-1)


DISTANCES: Dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "cosine": cosine_distance,
    "mse": mse_distance,
}


# ─────────────────────────────────────────────────────────────────────────────
# CLIPS
# ─────────────────────────────────────────────────────────────────────────────

def num_clips(total_frames: int, clip_len: int) -> int:
    if clip_len < 1:
        raise ValueError(f"clip_len must be at least 1, got {clip_len}")
    if total_frames < clip_len:
        raise ValueError(f"video of {total_frames} frames is shorter than one clip of {clip_len}")
    return total_frames // clip_len


def extract_clip(stream: np.ndarray, index: int, clip_len: int) -> np.ndarray:
    """Window `index` of a [C, T, H, W] stream."""
    count = num_clips(stream.shape[1], clip_len)
    if not 0 <= index < count:
        raise IndexError(f"clip {index} out of range for {count} clips")
    return stream[:, index * clip_len:(index + 1) * clip_len]


def all_clips(stream: np.ndarray, clip_len: int) -> np.ndarray:
    """Every window of a [C, T, H, W] stream stacked as [N, C, clip_len, H, W]."""
    count = num_clips(stream.shape[1], clip_len)
    clips = stream[:, :count * clip_len].reshape(stream.shape[0], count, clip_len, *stream.shape[2:])
    return np.ascontiguousarray(clips.swapaxes(0, 1))


def teacher_video_feature(teacher, video, clip_len: int, source_modality: str = "rgb") -> np.ndarray:
    """Mean of the teacher's features over every clip of the source stream."""
    return teacher_clip_features(teacher, video, clip_len, source_modality).mean(axis=0)


def teacher_clip_features(teacher, video, clip_len: int, source_modality: str = "rgb") -> np.ndarray:
    with no_grad():
        return teacher.forward_features(all_clips(video.streams[source_modality], clip_len)).data


class TeacherFeatureCache:
    """
    Clip features of a frozen teacher, computed once per video id.

    Valid only while the teacher's parameters do not change.
    """

    def __init__(self, teacher, source_modality: str, clip_len: int):
        self.teacher = teacher
        self.source_modality = source_modality
        self.clip_len = clip_len
        self._clips: Dict[str, np.ndarray] = {}
        self._videos: Dict[str, np.ndarray] = {}

    def clip_features(self, video) -> np.ndarray:
        """[N, D] features, one row per clip window."""
        if video.id not in self._clips:
            feats = teacher_clip_features(self.teacher, video, self.clip_len, self.source_modality)
            self._clips[video.id] = feats
            self._videos[video.id] = feats.mean(axis=0)
        return self._clips[video.id]

    def video_feature(self, video) -> np.ndarray:
        self.clip_features(video)
        return self._videos[video.id]

    def __len__(self) -> int:
        return len(self._clips)


# ─────────────────────────────────────────────────────────────────────────────
# TRANSFER LOSS
# ─────────────────────────────────────────────────────────────────────────────

@dataclass
class TransferLoss:
    """Batch-mean loss terms; total is what backward runs on."""
    total: Tensor
    clip_term: Optional[Tensor] = None
    video_term: Optional[Tensor] = None
    clip_indices: Optional[List[int]] = None


def check_granularity(granularity, student) -> Granularity:
    try:
        granularity = Granularity(granularity)
    except ValueError:
        choices = ", ".join(g.value for g in Granularity)
        raise ConfigError(f"unknown granularity {granularity!r} (expected one of {choices})") from None
    if granularity.uses_clips and student.consumes != "clip":
        raise ConfigError(f"{granularity.value} needs a clip-consuming student, "
                          f"{student.arch} consumes whole sequences (use video_to_video)")
    if not granularity.uses_clips and student.consumes != "sequence":
        raise ConfigError(f"video_to_video needs a whole-sequence student, {student.arch} consumes clips")
    return granularity


def transfer_loss(granularity, teacher, student, paired_samples: Sequence, clip_index_rng: np.random.Generator, *,
                  source_modality: str = "rgb", target_modality: str = "depth", clip_len: int = 8,
                  loss: str = "cosine", projection=None,
                  cache: Optional[TeacherFeatureCache] = None) -> TransferLoss:
    """
    Feature-supervision loss of the student against the frozen teacher.

    Args:
        granularity: Granularity or its string value
        teacher: Clip network over the source modality (no grads reach it)
        student: Clip or sequence network over the target modality
        paired_samples: One paired video or a batch of them
        clip_index_rng: Draws one clip index per sample (clip granularities only)
        projection: Optional map from student width to teacher width
        cache: Teacher features to reuse across calls

    Returns:
        TransferLoss with batch means; for combined the total is exactly
        clip_term + video_term from the same student forward pass
    """
    granularity = check_granularity(granularity, student)
    if loss not in DISTANCES:
        raise ConfigError(f"unknown loss {loss!r} (expected one of {', '.join(DISTANCES)})")
    distance = DISTANCES[loss]
    if not isinstance(paired_samples, (list, tuple)):
        paired_samples = [paired_samples]
    if not paired_samples:
        raise ValueError("transfer_loss needs at least one paired sample")
    if cache is None:
        cache = TeacherFeatureCache(teacher, source_modality, clip_len)

    indices: Optional[List[int]] = None
    if granularity.uses_clips:
        indices = []
        clips = []
        for video in paired_samples:
            index = int(clip_index_rng.integers(num_clips(video.num_frames, clip_len)))
            indices.append(index)
            clips.append(extract_clip(video.streams[target_modality], index, clip_len))
        student_features = student.forward_features(np.stack(clips))
    else:
        student_features = student.forward_features([video.streams[target_modality] for video in paired_samples])

    if projection is not None:
        student_features = projection(student_features)

    clip_term = video_term = None
    if granularity in (Granularity.CLIP_TO_CLIP, Granularity.COMBINED):
        targets = np.stack([cache.clip_features(video)[index] for video, index in zip(paired_samples, indices)])
        clip_term = mean_axis(distance(student_features, Tensor(targets)))
    if granularity is not Granularity.CLIP_TO_CLIP:
        targets = np.stack([cache.video_feature(video) for video in paired_samples])
        video_term = mean_axis(distance(student_features, Tensor(targets)))

    if clip_term is not None and video_term is not None:
        total = clip_term + video_term
    else:
        total = clip_term if clip_term is not None else video_term
    return TransferLoss(total=total, clip_term=clip_term, video_term=video_term, clip_indices=indices)
