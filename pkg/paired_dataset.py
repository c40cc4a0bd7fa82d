#!/usr/bin/env python3
"""
Synthetic paired-modality action dataset.

Every sample is rendered from one latent trajectory: a blob oscillating along
a class-specific axis at a class-specific frequency. The same trajectory
drives every stream of the sample:

    rgb       [3, T, S, S]  blob tinted by a random colour over a random texture
    flow      [2, T, S, S]  positive / negative part of the channel-mean
                            frame difference of rgb (last frame zero)
    depth     [1, T, S, S]  radial distance field around the blob centre
    skeleton  [J, T, 2]     ring-shaped joint template riding the centre,
                            limbs swinging in phase with the motion

Class identity lives only in the motion (axis + frequency). Position,
amplitude, phase, colour, texture, blob size and body scale are nuisances
drawn per sample, so appearance alone does not give the class away.

Source classes are 0..S-1 and target classes S..S+U-1 (disjoint by
construction); target labels are re-indexed to 0..U-1.

On disk a dataset is a directory holding manifest.json plus one checkpoint
file per stream kind (rgb.ckpt, flow.ckpt, depth.ckpt, skeleton.ckpt) keyed
by sample id. The manifest records a content digest that load_dataset
recomputes and checks.
"""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from tensor_checkpoint import CheckpointError, encode_checkpoint, file_digest, load_checkpoint, write_atomic

logger = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────────────────────
# CONSTANTS
# ─────────────────────────────────────────────────────────────────────────────

MANIFEST_FILE = "manifest.json"
DATASET_FORMAT = "modalbridge-dataset 1"

SOURCE_TRAIN = "source_train"
TARGET_UNLABELED = "target_unlabeled"
TARGET_LABELED = "target_labeled"
TARGET_EVAL = "target_eval"
SPLITS = (SOURCE_TRAIN, TARGET_UNLABELED, TARGET_LABELED, TARGET_EVAL)

SOURCE_STREAMS = ("rgb", "flow")
TARGET_STREAMS = ("depth", "skeleton")
STREAM_KINDS = SOURCE_STREAMS + TARGET_STREAMS

# Frames per oscillation unit: frequency f means f cycles every 16 frames
CYCLE_FRAMES = 16.0

PER_CLASS_KEYS = ("source", "unlabeled", "labeled", "eval")


class DatasetError(ValueError):
    """A dataset could not be generated, sampled or loaded."""


# ─────────────────────────────────────────────────────────────────────────────
# TYPES
# ─────────────────────────────────────────────────────────────────────────────

@dataclass
class PairedVideo:
    """One sample: every stream it has plus its class (label is None when unlabeled)."""
    id: str
    class_id: int
    label: Optional[int]
    streams: Dict[str, np.ndarray]

    @property
    def num_frames(self) -> int:
        return int(self.streams["rgb"].shape[1])


@dataclass(frozen=True)
class UnlabeledPair:
    id: str
    streams: Mapping[str, np.ndarray]

    @property
    def num_frames(self) -> int:
        return int(self.streams["rgb"].shape[1])


@dataclass(frozen=True)
class GeneratorConfig:
    num_source_classes: int = 6
    num_target_classes: int = 4
    source_per_class: int = 60
    unlabeled_per_class: int = 30
    labeled_per_class: int = 10
    eval_per_class: int = 20
    min_frames: int = 16
    max_frames: int = 40
    frame_size: int = 16
    num_joints: int = 8


@dataclass
class DatasetSplit:
    seed: int
    config: GeneratorConfig
    source_classes: List[int]
    target_classes: List[int]
    source_train: List[PairedVideo] = field(default_factory=list)
    target_unlabeled: List[PairedVideo] = field(default_factory=list)
    target_labeled: List[PairedVideo] = field(default_factory=list)
    target_eval: List[PairedVideo] = field(default_factory=list)

    def split_of(self, name: str) -> List[PairedVideo]:
        return getattr(self, name)

    def samples(self) -> Iterator[Tuple[str, PairedVideo]]:
        for name in SPLITS:
            for video in self.split_of(name):
                yield name, video

    @property
    def num_target_classes(self) -> int:
        return len(self.target_classes)


# ─────────────────────────────────────────────────────────────────────────────
# RENDERING
# ─────────────────────────────────────────────────────────────────────────────

def motion_parameters(class_id: int, total_classes: int) -> Tuple[np.ndarray, float]:
    """Motion axis (unit vector) and frequency that define a class."""
    theta = math.pi * class_id / total_classes
    axis = np.array([math.cos(theta), math.sin(theta)])
    frequency = 1.0 + (class_id % 3) / 2.0
    return axis, frequency


def latent_trajectory(class_id: int, total_classes: int, num_frames: int, frame_size: int,
                      rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Blob centre per frame plus the oscillation phase.

    Returns:
        Tuple of (centres [T, 2] as (x, y), phase [T])
    """
    axis, frequency = motion_parameters(class_id, total_classes)
    origin = frame_size / 2.0 + rng.uniform(-1.5, 1.5, size=2)
    amplitude = rng.uniform(3.0, 4.5)
    offset = rng.uniform(0.0, 2.0 * math.pi)
    phase = 2.0 * math.pi * frequency * np.arange(num_frames) / CYCLE_FRAMES + offset
    centres = origin + amplitude * np.sin(phase)[:, None] * axis
    return centres, phase


def _squared_distance(centres: np.ndarray, frame_size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:frame_size, 0:frame_size].astype(np.float64)
    dx = xx[None] - centres[:, 0, None, None]
    dy = yy[None] - centres[:, 1, None, None]
    return dx * dx + dy * dy


def render_rgb(centres: np.ndarray, frame_size: int, rng: np.random.Generator) -> np.ndarray:
    sigma = rng.uniform(1.5, 2.5)
    colour = rng.uniform(0.4, 1.0, size=3)
    texture = rng.uniform(0.0, 0.3, size=(3, frame_size, frame_size))
    blob = np.exp(-_squared_distance(centres, frame_size) / (2.0 * sigma * sigma))
    rgb = texture[:, None] * (1.0 - blob[None]) + colour[:, None, None, None] * blob[None]
    rgb += rng.normal(0.0, 0.01, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def derive_flow(rgb: np.ndarray) -> np.ndarray:
    """
    Motion stream from an rgb stream [3, T, H, W].

    Channel 0 holds the positive part of the channel-mean temporal
    difference rgb[t+1] - rgb[t], channel 1 the negative part; the last
    frame has no successor and stays zero.
    """
    diff = (rgb[:, 1:] - rgb[:, :-1]).mean(axis=0)
    flow = np.zeros((2,) + rgb.shape[1:], dtype=np.float32)
    flow[0, :-1] = np.maximum(diff, 0.0)
    flow[1, :-1] = np.maximum(-diff, 0.0)
    return flow


def render_depth(centres: np.ndarray, frame_size: int, rng: np.random.Generator) -> np.ndarray:
    gain = rng.uniform(0.6, 1.0)
    distance = np.sqrt(_squared_distance(centres, frame_size))
    depth = gain * (1.0 - np.minimum(distance / (frame_size / 2.0), 1.0))
    return depth[None].astype(np.float32)


def skeleton_edges(num_joints: int) -> List[Tuple[int, int]]:
    """(parent, child) pairs: odd joints hang off the root, even joints off the joint before."""
    return [(0 if child % 2 == 1 else child - 1, child) for child in range(1, num_joints)]


def render_skeleton(centres: np.ndarray, phase: np.ndarray, axis: np.ndarray, num_joints: int,
                    frame_size: int, rng: np.random.Generator) -> np.ndarray:
    scale = rng.uniform(0.8, 1.2)
    rotation = rng.uniform(-0.3, 0.3)
    template = np.zeros((num_joints, 2))
    for parent, child in skeleton_edges(num_joints):
        angle = rotation + 2.0 * math.pi * (child - 1) / max(num_joints - 1, 1)
        length = 2.0 if parent == 0 else 1.5
        template[child] = template[parent] + length * np.array([math.cos(angle), math.sin(angle)])

    across = np.array([-axis[1], axis[0]])
    coords = np.empty((num_joints, len(centres), 2))
    for joint in range(num_joints):
        coords[joint] = centres + scale * template[joint]
        if joint:
            reach = 0.8 if joint % 2 == 1 else 1.6
            coords[joint] += reach * np.sin(phase + 0.5 * joint)[:, None] * across
    return np.clip(coords, 0.0, float(frame_size)).astype(np.float32)


def render_sample(class_id: int, total_classes: int, num_frames: int, config: GeneratorConfig,
                  rng: np.random.Generator, with_target: bool) -> Dict[str, np.ndarray]:
    """All streams of one sample, in the fixed draw order centres → rgb → depth → skeleton."""
    centres, phase = latent_trajectory(class_id, total_classes, num_frames, config.frame_size, rng)
    rgb = render_rgb(centres, config.frame_size, rng)
    streams = {"rgb": rgb, "flow": derive_flow(rgb)}
    if with_target:
        axis, _ = motion_parameters(class_id, total_classes)
        streams["depth"] = render_depth(centres, config.frame_size, rng)
        streams["skeleton"] = render_skeleton(centres, phase, axis, config.num_joints, config.frame_size, rng)
    return streams


# ─────────────────────────────────────────────────────────────────────────────
# GENERATION
# ─────────────────────────────────────────────────────────────────────────────

def _check_config(config: GeneratorConfig) -> None:
    if config.num_source_classes < 2 or config.num_target_classes < 2:
        raise DatasetError(
            f"need at least 2 source and 2 target classes, got "
            f"{config.num_source_classes} and {config.num_target_classes}")
    counts = {
        "source_per_class": config.source_per_class,
        "unlabeled_per_class": config.unlabeled_per_class,
        "labeled_per_class": config.labeled_per_class,
        "eval_per_class": config.eval_per_class,
    }
    empty = [name for name, count in counts.items() if count < 1]
    if empty:
        raise DatasetError(f"per-class counts too small to populate every split: {', '.join(empty)}")
    if not 1 <= config.min_frames <= config.max_frames:
        raise DatasetError(f"invalid frame range [{config.min_frames}, {config.max_frames}]")
    if config.frame_size < 8:
        raise DatasetError(f"frame_size must be at least 8, got {config.frame_size}")
    if config.num_joints < 2:
        raise DatasetError(f"num_joints must be at least 2, got {config.num_joints}")


def generate(seed: int, num_source_classes: int, num_target_classes: int,
             per_class_counts: Mapping[str, int], **options) -> DatasetSplit:
    """
    Generate a dataset split deterministically from `seed`.

    Args:
        seed: Master seed; sample i draws from default_rng([seed, i])
        num_source_classes: |S|
        num_target_classes: |U|
        per_class_counts: Mapping with keys source, unlabeled, labeled, eval
        **options: min_frames, max_frames, frame_size, num_joints

    Returns:
        DatasetSplit with classes 0..S-1 in source_train and S..S+U-1 split
        into unlabeled pairs, a labeled pool and an eval set
    """
    unknown = set(per_class_counts) - set(PER_CLASS_KEYS)
    if unknown:
        raise DatasetError(f"unknown per-class count keys: {', '.join(sorted(unknown))}")
    config = GeneratorConfig(
        num_source_classes=num_source_classes,
        num_target_classes=num_target_classes,
        source_per_class=per_class_counts.get("source", GeneratorConfig.source_per_class),
        unlabeled_per_class=per_class_counts.get("unlabeled", GeneratorConfig.unlabeled_per_class),
        labeled_per_class=per_class_counts.get("labeled", GeneratorConfig.labeled_per_class),
        eval_per_class=per_class_counts.get("eval", GeneratorConfig.eval_per_class),
        **options,
    )
    return generate_from_config(seed, config)


def generate_from_config(seed: int, config: GeneratorConfig) -> DatasetSplit:
    _check_config(config)
    total_classes = config.num_source_classes + config.num_target_classes
    split = DatasetSplit(
        seed=seed,
        config=config,
        source_classes=list(range(config.num_source_classes)),
        target_classes=list(range(config.num_source_classes, total_classes)),
    )

    index = 0

    def make(prefix: str, class_id: int, label: Optional[int], with_target: bool) -> PairedVideo:
        nonlocal index
        rng = np.random.default_rng([seed, index])
        num_frames = int(rng.integers(config.min_frames, config.max_frames + 1))
        streams = render_sample(class_id, total_classes, num_frames, config, rng, with_target)
        video = PairedVideo(id=f"{prefix}{index:05d}", class_id=class_id, label=label, streams=streams)
        index += 1
        return video

    for class_id in split.source_classes:
        for _ in range(config.source_per_class):
            split.source_train.append(make("src", class_id, class_id, with_target=False))

    for local, class_id in enumerate(split.target_classes):
        for _ in range(config.unlabeled_per_class):
            split.target_unlabeled.append(make("tgt", class_id, None, with_target=True))
        for _ in range(config.labeled_per_class):
            split.target_labeled.append(make("tgt", class_id, local, with_target=True))
        for _ in range(config.eval_per_class):
            split.target_eval.append(make("tgt", class_id, local, with_target=True))

    logger.info("Generated %d samples (%d source, %d target classes) with seed %d",
                index, config.num_source_classes, config.num_target_classes, seed)
    return split


# ─────────────────────────────────────────────────────────────────────────────
# VIEWS AND SAMPLING
# ─────────────────────────────────────────────────────────────────────────────

def strip_labels(split: DatasetSplit) -> Tuple[UnlabeledPair, ...]:
    """The unlabeled target pairs as (id, streams) only, in generation order."""
    return tuple(UnlabeledPair(id=video.id, streams=dict(video.streams)) for video in split.target_unlabeled)


def sample_few_labels(split: DatasetSplit, k: int, seed: int) -> List[PairedVideo]:
    """
    Draw exactly `k` labeled examples per target class, uniformly without
    replacement from the labeled pool.

    Returns:
        Samples grouped by class (class order), pool order within a class
    """
    if k < 1:
        raise DatasetError(f"k must be at least 1, got {k}")
    rng = np.random.default_rng(seed)
    subset = []
    for local, class_id in enumerate(split.target_classes):
        pool = [video for video in split.target_labeled if video.label == local]
        if len(pool) < k:
            raise DatasetError(
                f"target class {class_id} (label {local}) has {len(pool)} labeled examples, need k={k}")
        chosen = np.sort(rng.choice(len(pool), size=k, replace=False))
        subset.extend(pool[i] for i in chosen)
    return subset


# ─────────────────────────────────────────────────────────────────────────────
# STORAGE
# ─────────────────────────────────────────────────────────────────────────────

def _stream_blobs(split: DatasetSplit) -> Dict[str, bytes]:
    blobs = {}
    for kind in STREAM_KINDS:
        tensors = {video.id: video.streams[kind] for _, video in split.samples() if kind in video.streams}
        blobs[kind] = encode_checkpoint(tensors, {"stream": kind})
    return blobs


def _manifest_body(split: DatasetSplit, stream_digests: Mapping[str, str]) -> Dict:
    samples = []
    for name, video in split.samples():
        samples.append({
            "id": video.id,
            "split": name,
            "class_id": video.class_id,
            "label": video.label,
            "frames": video.num_frames,
            "shapes": {kind: list(array.shape) for kind, array in video.streams.items()},
        })
    return {
        "format": DATASET_FORMAT,
        "seed": split.seed,
        "generator": asdict(split.config),
        "source_classes": split.source_classes,
        "target_classes": split.target_classes,
        "samples": samples,
        "streams": {kind: {"file": f"{kind}.ckpt", "digest": digest} for kind, digest in stream_digests.items()},
    }


def _body_digest(body: Mapping) -> str:
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def content_digest(split: DatasetSplit) -> str:
    """The digest save_dataset would record for this split."""
    digests = {kind: hashlib.sha256(blob).hexdigest() for kind, blob in _stream_blobs(split).items()}
    return _body_digest(_manifest_body(split, digests))


def save_dataset(split: DatasetSplit, directory: Union[str, Path]) -> str:
    """
    Write manifest.json and the per-stream checkpoint files.

    Returns:
        The content digest recorded in the manifest
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digests = {}
    for kind, blob in _stream_blobs(split).items():
        write_atomic(directory / f"{kind}.ckpt", blob)
        digests[kind] = hashlib.sha256(blob).hexdigest()
    body = _manifest_body(split, digests)
    manifest = dict(body, content_digest=_body_digest(body))
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    write_atomic(directory / MANIFEST_FILE, text.encode("utf-8"))
    logger.info("Saved dataset to %s (digest %s)", directory, manifest["content_digest"][:12])
    return manifest["content_digest"]


def read_manifest(directory: Union[str, Path]) -> Dict:
    path = Path(directory) / MANIFEST_FILE
    if not path.exists():
        raise DatasetError(f"no dataset at {directory} ({MANIFEST_FILE} missing)")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: {e}") from e


def load_dataset(directory: Union[str, Path]) -> DatasetSplit:
    """Load a dataset directory, refusing it if any digest does not match."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{directory}: unsupported dataset format {manifest.get('format')!r}")

    tensors: Dict[str, Dict[str, np.ndarray]] = {}
    for kind, entry in manifest["streams"].items():
        path = directory / entry["file"]
        if not path.exists():
            raise DatasetError(f"{directory}: stream file {entry['file']} missing")
        if file_digest(path) != entry["digest"]:
            raise DatasetError(f"{directory}: stream file {entry['file']} does not match its digest")
        try:
            tensors[kind], _ = load_checkpoint(path)
        except CheckpointError as e:
            raise DatasetError(str(e)) from e

    body = {key: value for key, value in manifest.items() if key != "content_digest"}
    if _body_digest(body) != manifest.get("content_digest"):
        raise DatasetError(f"{directory}: manifest content digest mismatch")

    split = DatasetSplit(
        seed=manifest["seed"],
        config=GeneratorConfig(**manifest["generator"]),
        source_classes=list(manifest["source_classes"]),
        target_classes=list(manifest["target_classes"]),
    )
    for entry in manifest["samples"]:
        streams = {kind: tensors[kind][entry["id"]] for kind in entry["shapes"]}
        video = PairedVideo(id=entry["id"], class_id=entry["class_id"], label=entry["label"], streams=streams)
        split.split_of(entry["split"]).append(video)
    return split
