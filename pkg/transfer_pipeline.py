# -*- coding: utf-8 -*-
"""
Training protocol: teacher → transfer → fine-tune → evaluate.

    1. train_teacher   cross-entropy on the labeled source modality, then frozen
    2. run_transfer    student (+ projection) matches teacher features on
                       unlabeled pairs; the projection is dropped afterwards
    3. finetune        fresh |U|-way head, freeze policy applied, k labels/class
    4. evaluate        clip_average (mean softmax over all clips) or
                       whole_sequence (one forward over the full sequence)

run_seed runs one baseline for one seed end to end; run_experiment_grid runs
every (baseline, seed) pair, optionally in worker processes, and aggregates
final accuracies as mean and unbiased sample variance.

Baselines:
    feature_supervised  the full protocol above
    from_scratch        fine-tune a freshly initialized student (all layers)
    modality_pretrain   train a student-width net on the labeled source
                        modality, inflate its stem to the target channels,
                        fine-tune

Every random draw comes from np.random.default_rng([seed, salt, ...]) with a
fixed salt per phase, so (config, seed) determines every MetricsRecord.
"""

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from action_nets import (
    MODALITY_CHANNELS, ActionNet, Conv3dNetLite, SkeletonGraphNetLite, backbone_names, export_backbone, freeze,
    inflate_from_modality, load_network, make_projection, replace_head, save_network, set_trainable,
    split_parameters,
)
from autograd_tensor import backward, cross_entropy, no_grad, parameter_digest, sgd_step, softmax, zero_grad
from experiment_config import ConfigError, deterministic_mode, section
from feature_transfer import (
    TeacherFeatureCache, all_clips, check_granularity, extract_clip, num_clips, transfer_loss,
)
from paired_dataset import DatasetError, DatasetSplit, PairedVideo, content_digest, sample_few_labels, strip_labels
from tensor_checkpoint import CheckpointError, file_digest

logger = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────────────────────
# CONSTANTS
# ─────────────────────────────────────────────────────────────────────────────

# Per-phase salts for np.random.default_rng([seed, salt, ...])
SALTS = {
    "teacher": 11,
    "pretrain": 12,
    "student": 13,
    "projection": 14,
    "transfer": 15,
    "clips": 16,
    "finetune": 17,
    "head": 18,
}

METRIC_FIELDS = ["phase", "epoch", "seed", "loss", "accuracy", "ms"]

TWO_STREAM_SOURCES = ("rgb", "flow")


class PipelineError(RuntimeError):
    """A phase broke one of the protocol's guarantees."""


# ─────────────────────────────────────────────────────────────────────────────
# METRICS
# ─────────────────────────────────────────────────────────────────────────────

@dataclass
class MetricsRecord:
    phase: str
    epoch: int
    seed: int
    loss: Optional[float] = None
    accuracy: Optional[float] = None
    ms: int = 0

    def as_row(self) -> Dict[str, str]:
        return {
            "phase": self.phase,
            "epoch": str(self.epoch),
            "seed": str(self.seed),
            "loss": "" if self.loss is None else repr(float(self.loss)),
            "accuracy": "" if self.accuracy is None else repr(float(self.accuracy)),
            "ms": str(self.ms),
        }


@dataclass
class SeedResult:
    baseline: str
    seed: int
    accuracy: float
    records: List[MetricsRecord] = field(default_factory=list)
    checkpoints: Dict[str, str] = field(default_factory=dict)  # path → sha256


class _Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    def ms(self) -> int:
        if deterministic_mode():
            return 0
        return int(round((time.perf_counter() - self.start) * 1000))


def write_metrics_csv(path: Union[str, Path], records: Sequence[MetricsRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_FIELDS, lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow(record.as_row())


def read_metrics_csv(path: Union[str, Path]) -> List[MetricsRecord]:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            records.append(MetricsRecord(
                phase=row["phase"], epoch=int(row["epoch"]), seed=int(row["seed"]),
                loss=float(row["loss"]) if row["loss"] else None,
                accuracy=float(row["accuracy"]) if row["accuracy"] else None,
                ms=int(row["ms"]),
            ))
    return records


def aggregate(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and unbiased sample variance (0.0 for a single value)."""
    if not values:
        raise ValueError("aggregate needs at least one value")
    array = np.asarray(values, dtype=np.float64)
    variance = float(array.var(ddof=1)) if array.size > 1 else 0.0
    return float(array.mean()), variance


# ─────────────────────────────────────────────────────────────────────────────
# SHARED TRAINING LOOP
# ─────────────────────────────────────────────────────────────────────────────

def phase_settings(config: Mapping, phase: str) -> Dict:
    return section(config, phase)


def learning_rate(settings: Mapping, epoch: int) -> float:
    """Step decay: lr · gamma^(epoch // lr_step); lr_step 0 keeps lr constant."""
    if settings["lr_step"] > 0:
        return settings["lr"] * settings["lr_gamma"] ** (epoch // settings["lr_step"])
    return settings["lr"]


def _batches(count: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


def _random_clip(video: PairedVideo, modality: str, clip_len: int, rng: np.random.Generator) -> np.ndarray:
    index = int(rng.integers(num_clips(video.num_frames, clip_len)))
    return extract_clip(video.streams[modality], index, clip_len)


def network_inputs(net: ActionNet, videos: Sequence[PairedVideo], modality: str, clip_len: int,
                   rng: np.random.Generator):
    """One random clip per video for clip nets, whole sequences otherwise."""
    if net.consumes == "clip":
        return np.stack([_random_clip(video, modality, clip_len, rng) for video in videos])
    return [video.streams[modality] for video in videos]


def _fit_classifier(net: ActionNet, videos: Sequence[PairedVideo], labels: np.ndarray, modality: str,
                    settings: Mapping, clip_len: int, rng: np.random.Generator, phase: str, seed: int,
                    records: List[MetricsRecord]) -> None:
    trainable = [p for p in net.parameters().values() if p.requires_grad]
    for epoch in range(settings["epochs"]):
        watch = _Stopwatch()
        lr = learning_rate(settings, epoch)
        total_loss = 0.0
        correct = 0
        for batch in _batches(len(videos), settings["batch_size"], rng):
            logits = net.forward_classify(network_inputs(net, [videos[i] for i in batch], modality, clip_len, rng))
            loss = cross_entropy(logits, labels[batch])
            zero_grad(trainable)
            backward(loss)
            sgd_step(trainable, lr, momentum=settings["momentum"], weight_decay=settings["weight_decay"])
            total_loss += loss.item() * len(batch)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[batch]))
        record = MetricsRecord(phase, epoch, seed, total_loss / len(videos), correct / len(videos), watch.ms())
        records.append(record)
        logger.info("[%s seed %d] epoch %d  loss %.4f  acc %.3f", phase, seed, epoch, record.loss, record.accuracy)


def _labels_of(videos: Sequence[PairedVideo], num_classes: int, what: str) -> np.ndarray:
    labels = []
    for video in videos:
        if video.label is None or not 0 <= video.label < num_classes:
            raise DatasetError(f"{what}: sample {video.id} has label {video.label}, "
                               f"outside classes 0..{num_classes - 1}")
        labels.append(video.label)
    return np.asarray(labels, dtype=np.int64)


# ─────────────────────────────────────────────────────────────────────────────
# PHASES
# ─────────────────────────────────────────────────────────────────────────────

def train_teacher(config: Mapping, source_train: Sequence[PairedVideo], *, seed: int,
                  source_modality: Optional[str] = None, feature_dim: Optional[int] = None,
                  phase: str = "teacher", records: Optional[List[MetricsRecord]] = None) -> Conv3dNetLite:
    """
    Train a clip network on the labeled source modality and freeze it.

    Args:
        config: Resolved experiment config
        source_train: Labeled source videos
        seed: Run seed
        source_modality: rgb or flow (defaults to experiment.source_modality)
        feature_dim: Feature width (defaults to nets.teacher_dim)
        phase: Name written to the metrics records
        records: List the per-epoch records are appended to

    Returns:
        The trained network with every parameter frozen
    """
    if not source_train:
        raise DatasetError("train_teacher: source_train is empty")
    modality = source_modality or config["experiment.source_modality"]
    if modality not in ("rgb", "flow"):
        raise ConfigError(f"teacher source modality must be rgb or flow, got {modality!r}")
    salt = SALTS["pretrain" if phase.startswith("pretrain") else "teacher"]
    rng = np.random.default_rng([seed, salt])
    num_classes = max(video.label if video.label is not None else -1 for video in source_train) + 1
    labels = _labels_of(source_train, num_classes, "train_teacher")

    net = Conv3dNetLite(
        in_channels=MODALITY_CHANNELS[modality],
        feature_dim=feature_dim or config["nets.teacher_dim"],
        num_classes=num_classes,
        num_blocks=config["nets.num_blocks"],
        stem_channels=config["nets.stem_channels"],
        clip_len=config["experiment.clip_len"],
        seed=rng,
    )
    _fit_classifier(net, source_train, labels, modality, phase_settings(config, "teacher"),
                    config["experiment.clip_len"], rng, phase, seed, records if records is not None else [])
    freeze(net)
    return net


def build_student(config: Mapping, seed: int, num_classes: int) -> ActionNet:
    """Freshly initialized target-modality network (same init for every baseline of a seed)."""
    rng = np.random.default_rng([seed, SALTS["student"]])
    if config["experiment.target_modality"] == "skeleton":
        return SkeletonGraphNetLite(
            num_joints=config["data.num_joints"],
            feature_dim=config["nets.student_dim"],
            num_classes=num_classes,
            num_blocks=config["nets.graph_blocks"],
            hidden_channels=config["nets.graph_channels"],
            temporal_kernel=config["nets.temporal_kernel"],
            canvas_size=float(config["data.frame_size"]),
            seed=rng,
        )
    return Conv3dNetLite(
        in_channels=MODALITY_CHANNELS[config["experiment.target_modality"]],
        feature_dim=config["nets.student_dim"],
        num_classes=num_classes,
        num_blocks=config["nets.num_blocks"],
        stem_channels=config["nets.stem_channels"],
        clip_len=config["experiment.clip_len"],
        seed=rng,
    )


def run_transfer(config: Mapping, teacher: ActionNet, student: ActionNet, unlabeled_pairs: Sequence, *,
                 seed: int, source_modality: Optional[str] = None, phase: str = "transfer",
                 records: Optional[List[MetricsRecord]] = None) -> ActionNet:
    """
    Train `student` in place to match the frozen teacher's features.

    A projection is trained alongside when the feature widths differ and is
    discarded on return.
    """
    records = records if records is not None else []
    settings = phase_settings(config, "transfer")
    granularity = check_granularity(config["experiment.granularity"], student)
    if not unlabeled_pairs:
        raise DatasetError("run_transfer: no unlabeled pairs")
    if any(p.requires_grad for p in teacher.parameters().values()):
        raise PipelineError("run_transfer: teacher must be frozen")
    source = source_modality or config["experiment.source_modality"]
    clip_len = config["experiment.clip_len"]

    projection = make_projection(student.feature_dim, teacher.feature_dim,
                                 seed=np.random.default_rng([seed, SALTS["projection"]]))
    # The head sits after the feature tap and gets no gradient here
    params = set_trainable(student, backbone_names(student))
    if projection is not None:
        params += list(projection.parameters().values())
    cache = TeacherFeatureCache(teacher, source, clip_len)
    shuffle_rng = np.random.default_rng([seed, SALTS["transfer"]])

    for epoch in range(settings["epochs"]):
        watch = _Stopwatch()
        clip_rng = np.random.default_rng([seed, SALTS["clips"], epoch])
        lr = learning_rate(settings, epoch)
        total = 0.0
        for batch in _batches(len(unlabeled_pairs), settings["batch_size"], shuffle_rng):
            terms = transfer_loss(
                granularity, teacher, student, [unlabeled_pairs[i] for i in batch], clip_rng,
                source_modality=source, target_modality=config["experiment.target_modality"],
                clip_len=clip_len, loss=config["experiment.loss"], projection=projection, cache=cache,
            )
            zero_grad(params)
            backward(terms.total)
            sgd_step(params, lr, momentum=settings["momentum"], weight_decay=settings["weight_decay"])
            total += terms.total.item() * len(batch)
        record = MetricsRecord(phase, epoch, seed, total / len(unlabeled_pairs), None, watch.ms())
        records.append(record)
        logger.info("[%s seed %d] epoch %d  %s loss %.4f", phase, seed, epoch, granularity.value, record.loss)
    return student


def finetune(config: Mapping, student: ActionNet, labeled_subset: Sequence[PairedVideo], *, seed: int,
             num_classes: int, policy: Optional[str] = None, phase: str = "finetune",
             records: Optional[List[MetricsRecord]] = None) -> ActionNet:
    """
    Copy `student`, give it a fresh `num_classes` head and train the
    partition the freeze policy leaves trainable. `student` is not modified.
    """
    if not labeled_subset:
        raise DatasetError("finetune: labeled subset is empty")
    labels = _labels_of(labeled_subset, num_classes, "finetune")
    rng = np.random.default_rng([seed, SALTS["finetune"]])
    classifier = student.copy()
    replace_head(classifier, num_classes, seed=np.random.default_rng([seed, SALTS["head"]]))
    _, trainable = split_parameters(classifier, policy or config["experiment.freeze_policy"])
    set_trainable(classifier, trainable)
    _fit_classifier(classifier, labeled_subset, labels, config["experiment.target_modality"],
                    phase_settings(config, "finetune"), config["experiment.clip_len"], rng, phase, seed,
                    records if records is not None else [])
    freeze(classifier)
    return classifier


def video_scores(classifier: ActionNet, video: PairedVideo, mode: str, modality: str, clip_len: int) -> np.ndarray:
    """Class probabilities for one video under `mode`."""
    stream = video.streams[modality]
    with no_grad():
        if mode == "clip_average":
            if classifier.consumes != "clip":
                raise ConfigError(f"clip_average evaluation needs a clip classifier, got {classifier.arch}")
            return softmax(classifier.forward_classify(all_clips(stream, clip_len)), axis=-1).data.mean(axis=0)
        if mode == "whole_sequence":
            if classifier.consumes != "sequence":
                raise ConfigError(f"whole_sequence evaluation needs a sequence classifier, got {classifier.arch}")
            return softmax(classifier.forward_classify(stream), axis=-1).data
    raise ConfigError(f"unknown eval mode {mode!r}")


def evaluate(classifier: ActionNet, target_eval: Sequence[PairedVideo], mode: str, *,
             modality: str = "depth", clip_len: int = 8) -> float:
    """Fraction of eval videos whose argmax score (lowest index on ties) matches the label."""
    if not target_eval:
        raise DatasetError("evaluate: eval set is empty")
    correct = 0
    for video in target_eval:
        correct += int(np.argmax(video_scores(classifier, video, mode, modality, clip_len)) == video.label)
    return correct / len(target_eval)


def two_stream_fuse(scores_a: Sequence[float], scores_b: Sequence[float]) -> Tuple[np.ndarray, int]:
    """Average two probability vectors; return (fused scores, argmax class)."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"two_stream_fuse: score shapes {a.shape} and {b.shape} differ")
    fused = (a + b) / 2.0
    return fused, int(np.argmax(fused))


def evaluate_two_stream(classifiers: Sequence[ActionNet], target_eval: Sequence[PairedVideo], mode: str, *,
                        modality: str, clip_len: int) -> float:
    if not target_eval:
        raise DatasetError("evaluate: eval set is empty")
    first, second = classifiers
    correct = 0
    for video in target_eval:
        _, predicted = two_stream_fuse(video_scores(first, video, mode, modality, clip_len),
                                       video_scores(second, video, mode, modality, clip_len))
        correct += int(predicted == video.label)
    return correct / len(target_eval)


# ─────────────────────────────────────────────────────────────────────────────
# TEACHER CACHE
# ─────────────────────────────────────────────────────────────────────────────

def teacher_cache_key(config: Mapping, source_modality: str, data_digest: str, seed: int) -> str:
    relevant = {
        "source": source_modality,
        "data": data_digest,
        "seed": seed,
        "clip_len": config["experiment.clip_len"],
        "teacher": section(config, "teacher"),
        "nets": {key: config[f"nets.{key}"] for key in ("teacher_dim", "num_blocks", "stem_channels")},
    }
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def obtain_teacher(config: Mapping, split: DatasetSplit, seed: int, source_modality: str, *,
                   data_digest: str, cache_dir: Optional[Union[str, Path]] = None, phase: str = "teacher",
                   records: Optional[List[MetricsRecord]] = None) -> ActionNet:
    """
    Train a teacher, or reuse one trained earlier with identical inputs.

    Cached checkpoints carry the original training records, which are
    replayed so metrics do not depend on cache hits.
    """
    records = records if records is not None else []
    path = None
    if cache_dir:
        key = teacher_cache_key(config, source_modality, data_digest, seed)
        path = Path(cache_dir) / f"teacher_{source_modality}_{key}.ckpt"
        if path.exists():
            try:
                teacher, tags = load_network(path)
            except CheckpointError as e:
                logger.warning("Ignoring unreadable cached teacher %s: %s", path, e)
            else:
                freeze(teacher)
                for row in json.loads(tags.get("metrics", "[]")):
                    records.append(MetricsRecord(**dict(row, phase=phase)))
                logger.info("Reusing cached %s teacher %s", source_modality, path.name)
                return teacher

    trained: List[MetricsRecord] = []
    teacher = train_teacher(config, split.source_train, seed=seed, source_modality=source_modality,
                            phase=phase, records=trained)
    records.extend(trained)
    if path is not None:
        save_network(path, teacher, {"metrics": json.dumps([asdict(r) for r in trained], sort_keys=True)})
    return teacher


# ─────────────────────────────────────────────────────────────────────────────
# RUNS
# ─────────────────────────────────────────────────────────────────────────────

def run_seed(config: Mapping, split: DatasetSplit, seed: int, baseline: str, *,
             checkpoint_dir: Optional[Union[str, Path]] = None, teacher_cache: Optional[Union[str, Path]] = None,
             data_digest: Optional[str] = None, records: Optional[List[MetricsRecord]] = None) -> SeedResult:
    """
    One baseline, one seed, end to end.

    Records are appended to `records` as they are produced, so a caller
    keeps the partial metrics of a run that raises.
    """
    records = records if records is not None else []
    first_record = len(records)
    target = config["experiment.target_modality"]
    clip_len = config["experiment.clip_len"]
    mode = config["experiment.eval_mode"]
    num_classes = split.num_target_classes
    data_digest = data_digest or content_digest(split)
    labeled = sample_few_labels(split, config["experiment.k"], seed)

    source_setting = config["experiment.source_modality"]
    if baseline == "from_scratch":
        sources: List[Optional[str]] = [None]
    elif source_setting == "two_stream":
        sources = list(TWO_STREAM_SOURCES)
    else:
        sources = [source_setting]

    classifiers = []
    teachers: List[Tuple[ActionNet, str]] = []
    checkpoints: Dict[str, str] = {}
    out_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for source in sources:
        suffix = f"_{source}" if len(sources) > 1 else ""

        def name(phase: str) -> str:
            return f"{phase}:{source}" if len(sources) > 1 else phase

        if baseline == "feature_supervised":
            teacher = obtain_teacher(config, split, seed, source, data_digest=data_digest, cache_dir=teacher_cache,
                                     phase=name("teacher"), records=records)
            teachers.append((teacher, parameter_digest(teacher.parameters())))
            if out_dir is not None:
                path = out_dir / f"teacher{suffix}.ckpt"
                checkpoints[str(path)] = save_network(path, teacher, {
                    "role": "teacher", "seed": str(seed), "source_modality": source,
                })
            student = build_student(config, seed, num_classes)
            run_transfer(config, teacher, student, strip_labels(split), seed=seed, source_modality=source,
                         phase=name("transfer"), records=records)
            if out_dir is not None:
                path = out_dir / f"student_backbone{suffix}.ckpt"
                checkpoints[str(path)] = export_backbone(path, student)
            policy = config["experiment.freeze_policy"]
        elif baseline == "modality_pretrain":
            if target == "skeleton":
                raise ConfigError("modality_pretrain needs a clip (depth) student")
            pretrained = train_teacher(config, split.source_train, seed=seed, source_modality=source,
                                       feature_dim=config["nets.student_dim"], phase=name("pretrain"),
                                       records=records)
            student = inflate_from_modality(pretrained, MODALITY_CHANNELS[target])
            policy = config["experiment.freeze_policy"]
        elif baseline == "from_scratch":
            student = build_student(config, seed, num_classes)
            policy = "all_layers"
        else:
            raise ConfigError(f"unknown baseline {baseline!r}")

        classifier = finetune(config, student, labeled, seed=seed, num_classes=num_classes, policy=policy,
                              phase=name("finetune"), records=records)
        classifiers.append(classifier)
        if out_dir is not None:
            path = out_dir / f"classifier{suffix}.ckpt"
            checkpoints[str(path)] = save_network(path, classifier, {
                "baseline": baseline, "seed": str(seed), "target_modality": target,
                "eval_mode": mode, "clip_len": str(clip_len), "policy": policy,
            })

    watch = _Stopwatch()
    if len(classifiers) == 2:
        accuracy = evaluate_two_stream(classifiers, split.target_eval, mode, modality=target, clip_len=clip_len)
    else:
        accuracy = evaluate(classifiers[0], split.target_eval, mode, modality=target, clip_len=clip_len)
    records.append(MetricsRecord("eval", 0, seed, None, accuracy, watch.ms()))

    for teacher, before in teachers:
        if parameter_digest(teacher.parameters()) != before:
            raise PipelineError(f"teacher parameters changed after transfer (seed {seed})")
    logger.info("[%s seed %d] eval accuracy %.3f", baseline, seed, accuracy)
    return SeedResult(baseline=baseline, seed=seed, accuracy=accuracy, records=records[first_record:],
                      checkpoints=checkpoints)


@dataclass
class GridResult:
    baselines: List[str]
    seeds: List[int]
    data_digest: str
    records: Dict[str, List[MetricsRecord]] = field(default_factory=dict)
    finals: Dict[str, Dict[int, float]] = field(default_factory=dict)
    checkpoints: Dict[str, str] = field(default_factory=dict)

    def summary(self) -> Dict:
        per_baseline = {}
        for baseline in self.baselines:
            finals = self.finals.get(baseline, {})
            entry = {"finals": {str(seed): finals[seed] for seed in self.seeds if seed in finals}}
            if len(finals) == len(self.seeds):
                entry["mean"], entry["variance"] = aggregate([finals[seed] for seed in self.seeds])
            per_baseline[baseline] = entry
        primary = per_baseline[self.baselines[0]]
        return {
            "primary_baseline": self.baselines[0],
            "mean": primary.get("mean"),
            "variance": primary.get("variance"),
            "finals": primary["finals"],
            "baselines": per_baseline,
            "data_digest": self.data_digest,
        }


def _seed_task(config, split, seed, baseline, checkpoint_dir, teacher_cache,
               data_digest) -> Tuple[Optional[SeedResult], List[MetricsRecord], Optional[Exception]]:
    # A failed run's records come back with its error
    records: List[MetricsRecord] = []
    try:
        outcome = run_seed(config, split, seed, baseline, checkpoint_dir=checkpoint_dir, teacher_cache=teacher_cache,
                           data_digest=data_digest, records=records)
    except Exception as e:
        return None, records, e
    return outcome, records, None


def run_experiment_grid(config: Mapping, split: DatasetSplit, *, jobs: int = 1,
                        checkpoint_dir: Optional[Union[str, Path]] = None,
                        teacher_cache: Optional[Union[str, Path]] = None,
                        result: Optional[GridResult] = None) -> GridResult:
    """
    Run every (baseline, seed) pair and collect finals and records.

    Pass a GridResult to have it filled in place; it then holds whatever
    completed if a run raises. Worker results are merged in task order, so
    the outcome does not depend on `jobs`.
    """
    baselines = list(config["experiment.baselines"])
    seeds = list(config["experiment.seeds"])
    if not seeds:
        raise ConfigError("run_experiment_grid needs at least one seed")
    if deterministic_mode():
        jobs = 1
    digest = content_digest(split)
    if result is None:
        result = GridResult(baselines=baselines, seeds=seeds, data_digest=digest)
    result.data_digest = digest
    tasks = [(baseline, seed) for baseline in baselines for seed in seeds]

    def seed_dir(baseline: str, seed: int) -> Optional[Path]:
        return Path(checkpoint_dir) / f"seed{seed}" / baseline if checkpoint_dir else None

    def collect(outcome: SeedResult) -> None:
        result.finals.setdefault(outcome.baseline, {})[outcome.seed] = outcome.accuracy
        result.checkpoints.update(outcome.checkpoints)

    if jobs <= 1:
        for baseline, seed in tasks:
            sink = result.records.setdefault(baseline, [])
            collect(run_seed(config, split, seed, baseline, checkpoint_dir=seed_dir(baseline, seed),
                             teacher_cache=teacher_cache, data_digest=digest, records=sink))
        return result

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_seed_task, dict(config), split, seed, baseline, seed_dir(baseline, seed),
                               teacher_cache, digest) for baseline, seed in tasks]
        # Merge in task order and stop at the first failure, as the serial loop does
        for (baseline, _), future in zip(tasks, futures):
            outcome, records, error = future.result()
            result.records.setdefault(baseline, []).extend(records)
            if error is not None:
                for pending in futures:
                    pending.cancel()
                raise error
            collect(outcome)
    return result


def checkpoint_digests_match(checkpoints: Mapping[str, str]) -> bool:
    return all(Path(path).exists() and file_digest(path) == digest for path, digest in checkpoints.items())
