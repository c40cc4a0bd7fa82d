# -*- coding: utf-8 -*-
"""
Action networks for modalbridge.

Two small feature extractors share one interface (forward_features,
forward_classify, named parameters, block prefixes):

    Conv3dNetLite          clips [C, T, H, W]  (rgb, flow, depth)
        stem conv3d k3 stride (1,2,2) → relu → max-pool 2
        → residual blocks (block 1 downsamples, last block has width D)
        → global average pool → feature [D] → linear head

    SkeletonGraphNetLite   sequences [J, T, 2] of any length
        per block: 1×1 channel mix → normalized-adjacency graph step
        → temporal conv (kt × 1 × 1) → relu, padded frames masked out
        → masked average pool → feature [D] → linear head

The feature is the tensor right before the head; that is what feature
supervision compares. FeatureProjection maps a student feature width onto
the teacher width during transfer and is dropped afterwards.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from autograd_tensor import (
    ShapeError, Tensor, conv3d, global_avg_pool, matmul, max_pool3d, relu, reshape, sum_axis,
)
from experiment_config import ConfigError, FREEZE_POLICIES
from paired_dataset import skeleton_edges
from tensor_checkpoint import CheckpointError, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────────────────────
# CONSTANTS
# ─────────────────────────────────────────────────────────────────────────────

MODALITY_CHANNELS = {"rgb": 3, "flow": 2, "depth": 1}

SeedLike = Union[int, np.random.Generator, None]


def kaiming_normal(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


# ─────────────────────────────────────────────────────────────────────────────
# SHARED NETWORK PLUMBING
# ─────────────────────────────────────────────────────────────────────────────

class ActionNet:
    """Named parameters, a linear head and the classify path shared by both nets."""

    arch = ""
    consumes = ""  # "clip" or "sequence"

    def __init__(self, feature_dim: int, num_classes: int):
        if feature_dim < 1 or num_classes < 1:
            raise ConfigError(f"feature_dim and num_classes must be positive, got {feature_dim}, {num_classes}")
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.params: Dict[str, Tensor] = {}

    def _add(self, name: str, array: np.ndarray) -> Tensor:
        tensor = Tensor(array, requires_grad=True, name=name)
        self.params[name] = tensor
        return tensor

    def _init_head(self, rng: np.random.Generator) -> None:
        self._add("head.weight", kaiming_normal((self.feature_dim, self.num_classes), self.feature_dim, rng))
        self._add("head.bias", np.zeros(self.num_classes, dtype=np.float32))

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def block_prefixes(self) -> List[str]:
        raise NotImplementedError

    def config(self) -> Dict:
        raise NotImplementedError

    def forward_features(self, x, **kwargs) -> Tensor:
        raise NotImplementedError

    def forward_classify(self, x, **kwargs) -> Tensor:
        features = self.forward_features(x, **kwargs)
        single = features.ndim == 1
        if single:
            features = reshape(features, (1, self.feature_dim))
        logits = matmul(features, self.params["head.weight"]) + self.params["head.bias"]
        return reshape(logits, (self.num_classes,)) if single else logits

    def copy(self) -> "ActionNet":
        twin = build_network(self.arch, self.config())
        for name, p in self.params.items():
            twin.params[name].data = p.data.copy()
            twin.params[name].requires_grad = p.requires_grad
        return twin


# ─────────────────────────────────────────────────────────────────────────────
# 3D CONV NETWORK
# ─────────────────────────────────────────────────────────────────────────────

class Conv3dNetLite(ActionNet):
    """
    Residual 3D conv net over fixed-length clips.

    Args:
        in_channels: 3 (rgb), 2 (flow) or 1 (depth)
        feature_dim: Width D of the pooled feature
        num_classes: Head width
        num_blocks: Residual blocks after the stem
        stem_channels: Stem width; block i is stem·2^i wide, the last block D
        clip_len: Frames per clip the net accepts
        seed: Int seed or Generator for the Kaiming init
    """

    arch = "conv3d"
    consumes = "clip"

    def __init__(self, in_channels: int, feature_dim: int, num_classes: int, num_blocks: int = 3,
                 stem_channels: int = 16, clip_len: int = 8, seed: SeedLike = None):
        super().__init__(feature_dim, num_classes)
        if in_channels < 1 or num_blocks < 1 or stem_channels < 1 or clip_len < 1:
            raise ConfigError("Conv3dNetLite sizes must be positive")
        self.in_channels = in_channels
        self.num_blocks = num_blocks
        self.stem_channels = stem_channels
        self.clip_len = clip_len
        rng = np.random.default_rng(seed)

        fan = in_channels * 27
        self._add("stem.weight", kaiming_normal((stem_channels, in_channels, 3, 3, 3), fan, rng))
        self._add("stem.bias", np.zeros(stem_channels, dtype=np.float32))

        self.block_specs: List[Tuple[int, int, int]] = []
        width = stem_channels
        for i in range(num_blocks):
            out = feature_dim if i == num_blocks - 1 else stem_channels * 2 ** i
            stride = 2 if i == 1 else 1
            self.block_specs.append((width, out, stride))
            prefix = f"blocks.{i}"
            self._add(f"{prefix}.conv1.weight", kaiming_normal((out, width, 3, 3, 3), width * 27, rng))
            self._add(f"{prefix}.conv1.bias", np.zeros(out, dtype=np.float32))
            self._add(f"{prefix}.conv2.weight", kaiming_normal((out, out, 3, 3, 3), out * 27, rng))
            self._add(f"{prefix}.conv2.bias", np.zeros(out, dtype=np.float32))
            if width != out or stride != 1:
                self._add(f"{prefix}.skip.weight", kaiming_normal((out, width, 1, 1, 1), width, rng))
                self._add(f"{prefix}.skip.bias", np.zeros(out, dtype=np.float32))
            width = out
        self._init_head(rng)

    def config(self) -> Dict:
        return {
            "in_channels": self.in_channels, "feature_dim": self.feature_dim,
            "num_classes": self.num_classes, "num_blocks": self.num_blocks,
            "stem_channels": self.stem_channels, "clip_len": self.clip_len,
        }

    def block_prefixes(self) -> List[str]:
        return ["stem."] + [f"blocks.{i}." for i in range(self.num_blocks)] + ["head."]

    def _as_batch(self, x) -> Tuple[Tensor, bool]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        single = x.ndim == 4
        if single:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 5 or x.shape[1] != self.in_channels or x.shape[2] != self.clip_len:
            raise ShapeError(f"{self.arch}: expected [{self.in_channels}, {self.clip_len}, H, W] clips "
                             f"(optionally batched), got shape {x.shape}")
        return x, single

    def forward_features(self, x, **kwargs) -> Tensor:
        """[C, T, H, W] → [D], or [N, C, T, H, W] → [N, D]."""
        x, single = self._as_batch(x)
        p = self.params
        h = relu(conv3d(x, p["stem.weight"], p["stem.bias"], stride=(1, 2, 2), padding=1))
        h = max_pool3d(h, 2)
        for i, (_, _, stride) in enumerate(self.block_specs):
            prefix = f"blocks.{i}"
            y = relu(conv3d(h, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], stride=stride, padding=1))
            y = conv3d(y, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], padding=1)
            if f"{prefix}.skip.weight" in p:
                skip = conv3d(h, p[f"{prefix}.skip.weight"], p[f"{prefix}.skip.bias"], stride=stride)
            else:
                skip = h
            h = relu(y + skip)
        features = global_avg_pool(h)
        return reshape(features, (self.feature_dim,)) if single else features


# ─────────────────────────────────────────────────────────────────────────────
# SKELETON GRAPH NETWORK
# ─────────────────────────────────────────────────────────────────────────────

def normalized_adjacency(num_joints: int) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 over the skeleton edges."""
    adjacency = np.eye(num_joints)
    for parent, child in skeleton_edges(num_joints):
        adjacency[parent, child] = adjacency[child, parent] = 1.0
    inv_sqrt = 1.0 / np.sqrt(adjacency.sum(axis=1))
    return (adjacency * inv_sqrt[:, None] * inv_sqrt[None, :]).astype(np.float32)


class SkeletonGraphNetLite(ActionNet):
    """
    Graph-conv net over whole joint sequences of varying length.

    Sequences in a batch are zero-padded to the longest one and a frame
    mask is re-applied after every step, so padded frames never reach a
    valid frame and pooling divides by valid frames only.
    """

    arch = "skeleton_graph"
    consumes = "sequence"

    def __init__(self, num_joints: int, feature_dim: int, num_classes: int, num_blocks: int = 3,
                 hidden_channels: int = 32, temporal_kernel: int = 3, canvas_size: float = 16.0,
                 seed: SeedLike = None):
        super().__init__(feature_dim, num_classes)
        if temporal_kernel < 1 or temporal_kernel % 2 == 0:
            raise ConfigError(f"temporal_kernel must be a positive odd number, got {temporal_kernel}")
        if num_joints < 2 or num_blocks < 1 or hidden_channels < 1:
            raise ConfigError("SkeletonGraphNetLite sizes must be positive (and at least 2 joints)")
        self.num_joints = num_joints
        self.num_blocks = num_blocks
        self.hidden_channels = hidden_channels
        self.temporal_kernel = temporal_kernel
        self.canvas_size = float(canvas_size)
        self.adjacency = normalized_adjacency(num_joints)
        rng = np.random.default_rng(seed)

        width = 2
        for i in range(num_blocks):
            out = feature_dim if i == num_blocks - 1 else hidden_channels
            prefix = f"blocks.{i}"
            self._add(f"{prefix}.spatial.weight", kaiming_normal((out, width, 1, 1, 1), width, rng))
            self._add(f"{prefix}.spatial.bias", np.zeros(out, dtype=np.float32))
            self._add(f"{prefix}.temporal.weight",
                      kaiming_normal((out, out, temporal_kernel, 1, 1), out * temporal_kernel, rng))
            self._add(f"{prefix}.temporal.bias", np.zeros(out, dtype=np.float32))
            width = out
        self._init_head(rng)

    def config(self) -> Dict:
        return {
            "num_joints": self.num_joints, "feature_dim": self.feature_dim,
            "num_classes": self.num_classes, "num_blocks": self.num_blocks,
            "hidden_channels": self.hidden_channels, "temporal_kernel": self.temporal_kernel,
            "canvas_size": self.canvas_size,
        }

    def block_prefixes(self) -> List[str]:
        return [f"blocks.{i}." for i in range(self.num_blocks)] + ["head."]

    def prepare_sequences(self, sequences: Sequence[np.ndarray],
                          valid_frames: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Pad [J, T_i, 2] sequences into one batch.

        Returns:
            Tuple of (inputs [N, 2, T, J, 1] centred and scaled to about
            [-1, 1], frame mask [N, 1, T, 1, 1], valid frame counts [N])
        """
        for seq in sequences:
            if seq.ndim != 3 or seq.shape[0] != self.num_joints or seq.shape[2] != 2 or seq.shape[1] < 2:
                raise ShapeError(f"{self.arch}: expected [{self.num_joints}, T>=2, 2] sequences, "
                                 f"got shape {seq.shape}")
        lengths = np.array([seq.shape[1] for seq in sequences] if valid_frames is None else valid_frames)
        if len(lengths) != len(sequences) or np.any(lengths < 1) or np.any(
                lengths > [seq.shape[1] for seq in sequences]):
            raise ShapeError(f"{self.arch}: valid frame counts {lengths.tolist()} do not fit the sequences")
        longest = max(seq.shape[1] for seq in sequences)
        half = self.canvas_size / 2.0
        batch = np.zeros((len(sequences), 2, longest, self.num_joints, 1), dtype=np.float32)
        mask = np.zeros((len(sequences), 1, longest, 1, 1), dtype=np.float32)
        for n, (seq, length) in enumerate(zip(sequences, lengths)):
            batch[n, :, :length, :, 0] = ((seq[:, :length] - half) / half).transpose(2, 1, 0)
            mask[n, :, :length] = 1.0
        return batch, mask, lengths

    def forward_features(self, x, valid_frames=None, **kwargs) -> Tensor:
        """[J, T, 2] → [D], or a list of such sequences → [N, D]."""
        single = isinstance(x, np.ndarray) and x.ndim == 3
        sequences = [x] if single else [np.asarray(seq) for seq in x]
        if not sequences:
            raise ShapeError(f"{self.arch}: empty batch")
        if valid_frames is not None and single:
            valid_frames = [valid_frames]
        batch, mask, lengths = self.prepare_sequences(sequences, valid_frames)
        n, _, frames, joints, _ = batch.shape
        adjacency = Tensor(self.adjacency)
        p = self.params

        h = Tensor(batch * mask)
        for i in range(self.num_blocks):
            prefix = f"blocks.{i}"
            h = conv3d(h, p[f"{prefix}.spatial.weight"], p[f"{prefix}.spatial.bias"])
            width = h.shape[1]
            h = matmul(reshape(h, (n, width, frames, joints)), adjacency)
            h = reshape(h, (n, width, frames, joints, 1)) * mask
            h = conv3d(h, p[f"{prefix}.temporal.weight"], p[f"{prefix}.temporal.bias"],
                       padding=(self.temporal_kernel // 2, 0, 0))
            h = relu(h) * mask

        scale = (1.0 / (lengths * joints)).astype(np.float32)[:, None]
        features = sum_axis(h, axis=(2, 3, 4)) * scale
        return reshape(features, (self.feature_dim,)) if single else features


# ─────────────────────────────────────────────────────────────────────────────
# PROJECTION
# ─────────────────────────────────────────────────────────────────────────────

class FeatureProjection:
    """Linear map from student feature width to teacher feature width."""

    def __init__(self, in_dim: int, out_dim: int, seed: SeedLike = None):
        rng = np.random.default_rng(seed)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.params = {
            "projection.weight": Tensor(kaiming_normal((in_dim, out_dim), in_dim, rng), requires_grad=True,
                                        name="projection.weight"),
            "projection.bias": Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True,
                                      name="projection.bias"),
        }

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def __call__(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.in_dim:
            raise ShapeError(f"projection expects width {self.in_dim}, got shape {features.shape}")
        single = features.ndim == 1
        if single:
            features = reshape(features, (1, self.in_dim))
        out = matmul(features, self.params["projection.weight"]) + self.params["projection.bias"]
        return reshape(out, (self.out_dim,)) if single else out


def make_projection(student_dim: int, teacher_dim: int, seed: SeedLike = None) -> Optional[FeatureProjection]:
    """None when the widths already agree."""
    if student_dim == teacher_dim:
        return None
    return FeatureProjection(student_dim, teacher_dim, seed)


# ─────────────────────────────────────────────────────────────────────────────
# PARAMETER POLICIES
# ─────────────────────────────────────────────────────────────────────────────

def split_parameters(net: ActionNet, policy: str) -> Tuple[List[str], List[str]]:
    """
    Partition parameter names into (frozen, trainable) for fine-tuning.

    head_plus_last_block trains the head and the last block only;
    all_layers trains everything.
    """
    if policy not in FREEZE_POLICIES:
        raise ConfigError(f"unknown freeze policy {policy!r} (expected one of {', '.join(FREEZE_POLICIES)})")
    names = list(net.parameters())
    if policy == "all_layers":
        return [], names
    trainable_prefixes = tuple(net.block_prefixes()[-2:])
    frozen = [name for name in names if not name.startswith(trainable_prefixes)]
    trainable = [name for name in names if name.startswith(trainable_prefixes)]
    return frozen, trainable


def backbone_names(net: ActionNet) -> List[str]:
    """Parameter names feeding the feature tap (everything but the head)."""
    return [name for name in net.parameters() if not name.startswith("head.")]


def freeze(net: ActionNet) -> None:
    for p in net.parameters().values():
        p.requires_grad = False


def set_trainable(net: ActionNet, trainable: Sequence[str]) -> List[Tensor]:
    """Mark exactly `trainable` as requiring grad; return those tensors."""
    chosen = set(trainable)
    for name, p in net.parameters().items():
        p.requires_grad = name in chosen
    return [net.params[name] for name in trainable]


def replace_head(net: ActionNet, num_classes: int, seed: SeedLike = None) -> None:
    rng = np.random.default_rng(seed)
    net.num_classes = num_classes
    net._init_head(rng)


def inflate_from_modality(net: Conv3dNetLite, in_channels: int) -> Conv3dNetLite:
    """
    Copy a clip net onto a different input channel count.

    The new stem kernel is the old one averaged over input channels and
    repeated, the usual way to reuse an rgb/flow net on another modality.
    """
    config = dict(net.config(), in_channels=in_channels)
    inflated = Conv3dNetLite(**config, seed=0)
    for name, p in net.parameters().items():
        inflated.params[name].data = p.data.copy()
    stem = net.params["stem.weight"].data
    inflated.params["stem.weight"].data = np.repeat(stem.mean(axis=1, keepdims=True), in_channels, axis=1)
    return inflated


# ─────────────────────────────────────────────────────────────────────────────
# PERSISTENCE
# ─────────────────────────────────────────────────────────────────────────────

NETWORKS = {
    Conv3dNetLite.arch: Conv3dNetLite,
    SkeletonGraphNetLite.arch: SkeletonGraphNetLite,
}


def build_network(arch: str, config: Mapping, seed: SeedLike = 0) -> ActionNet:
    if arch not in NETWORKS:
        raise ConfigError(f"unknown network arch {arch!r}")
    return NETWORKS[arch](**config, seed=seed)


def save_network(path: Union[str, Path], net: ActionNet, tags: Optional[Mapping[str, str]] = None) -> str:
    """Write every parameter plus arch/config tags; returns the file digest."""
    all_tags = {"arch": net.arch, "config": json.dumps(net.config(), sort_keys=True)}
    all_tags.update(tags or {})
    return save_checkpoint(path, net.parameters(), all_tags)


def load_network(path: Union[str, Path]) -> Tuple[ActionNet, Dict[str, str]]:
    tensors, tags = load_checkpoint(path)
    if "arch" not in tags or "config" not in tags:
        raise CheckpointError(f"{path}: not a network checkpoint (arch/config tags missing)")
    net = build_network(tags["arch"], json.loads(tags["config"]))
    if set(tensors) != set(net.parameters()):
        raise CheckpointError(f"{path}: parameter names do not match a {tags['arch']} network")
    for name, array in tensors.items():
        if array.shape != net.params[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {array.shape}, expected {net.params[name].shape}")
        net.params[name].data = array
    return net, tags


def export_backbone(path: Union[str, Path], net: ActionNet) -> str:
    """Everything but the head, for reuse by a downstream model."""
    backbone = {name: net.params[name] for name in backbone_names(net)}
    tags = {"arch": net.arch, "config": json.dumps(net.config(), sort_keys=True), "role": "backbone"}
    return save_checkpoint(path, backbone, tags)
