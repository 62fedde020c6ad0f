"""The full training loop: augment, forward, loss, SGD, EMA, queue updates.

One step executes exactly: draw one strong view X1 and up to three
independent weak views X2..X4; embed X1 with the student (tracked) and
X2..X4 with the teachers (untracked); compute the configured method loss;
one backward pass; SGD on the student only; EMA both teachers; enqueue the
teacher embeddings. All randomness is keyed by (seed, purpose, step), so a
checkpoint resume replays the identical stream.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import augment, relation
from . import numcore as nc
from .data import LabeledImageDataset, batches, load_cifar10, stratified_subset, synth_clusters
from .errors import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    NonFiniteLossError,
    ShapeError,
)
from .memory import NegativeQueue
from .model import EncoderSpec, TriNetwork
from .numcore import Tape, Variable, backward, l2_normalize_rows, zero_grads
from .relation import Temperatures
from .rng import RngKey

METHODS = ("moco", "ressl", "msv", "mq", "msvq")

CHECKPOINT_MAGIC = b"MSVQCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"             # "synthetic" | "cifar10"
    class_count: int = 4
    per_class: int = 128
    per_class_test: int = 64
    image_size: tuple[int, int] = (16, 16)
    channels: int = 3
    noise_sigma: float = 0.35
    pattern_contrast: float = 0.2
    directory: str = ""                 # cifar10 only
    subset: int = 0                     # cifar10 only; 0 = full train split

    def validate(self) -> None:
        if self.kind not in ("synthetic", "cifar10"):
            raise ConfigError(f"dataset.kind: unknown kind '{self.kind}'")
        if self.kind == "synthetic":
            if self.class_count < 2:
                raise ConfigError("dataset.class_count: need >= 2 classes")
            if self.per_class < 1 or self.per_class_test < 1:
                raise ConfigError("dataset.per_class: need >= 1 sample per class")
        if self.kind == "cifar10" and not self.directory:
            raise ConfigError("dataset.directory: required for cifar10")


@dataclass(frozen=True)
class ProbeSpec:
    """Linear-probe fine-tuning block: 100 epochs, SGD, lr 1, no decay."""

    epochs: int = 100
    batch_size: int = 256
    base_lr: float = 1.0
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("finetune.epochs/batch_size: must be >= 1")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("finetune.base_lr/weight_decay: must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 0.06
    warmup_epochs: int = 5
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    m1: float = 0.99
    m2: float = 0.95
    tau_s: float = 0.1
    tau_t: float = 0.04
    queue_size: int = 256
    method: str = "msvq"
    seed: int = 0
    precision: str = "f32"              # "f32" | "f64"
    analysis_mode: bool = False
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    finetune: ProbeSpec = field(default_factory=ProbeSpec)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(
                f"method: '{self.method}' is not one of {', '.join(METHODS)}"
            )
        Temperatures(self.tau_s, self.tau_t)  # enforces tau_t < tau_s
        for name in ("m1", "m2"):
            m = getattr(self, name)
            if not 0.0 <= m <= 1.0:
                raise ConfigError(f"{name}: momentum {m} outside [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.batch_size > self.queue_size:
            raise ConfigError(
                f"batch_size: {self.batch_size} exceeds queue_size {self.queue_size}"
            )
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs/warmup_epochs: must be >= 0")
        if self.epochs and self.warmup_epochs > self.epochs:
            raise ConfigError(
                f"warmup_epochs: {self.warmup_epochs} exceeds epochs {self.epochs}"
            )
        if self.base_lr < 0:
            raise ConfigError("base_lr: must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision: '{self.precision}' not in (f32, f64)")
        self.dataset.validate()
        self.encoder.validate()
        self.finetune.validate()
        if self.encoder.image_size != self.dataset.image_size and self.dataset.kind == "synthetic":
            raise ConfigError(
                f"encoder.image_size {self.encoder.image_size} != "
                f"dataset.image_size {self.dataset.image_size}"
            )

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    ds = dict(d.pop("dataset"))
    ds["image_size"] = tuple(ds["image_size"])
    enc = dict(d.pop("encoder"))
    enc["image_size"] = tuple(enc["image_size"])
    enc["conv_channels"] = tuple(enc["conv_channels"])
    ft = dict(d.pop("finetune", {}))
    return TrainConfig(dataset=DatasetSpec(**ds), encoder=EncoderSpec(**enc),
                       finetune=ProbeSpec(**ft), **d)


def load_datasets(spec: DatasetSpec, seed: int) -> tuple[LabeledImageDataset, LabeledImageDataset]:
    """Materialize the (train, test) split a config describes."""
    if spec.kind == "synthetic":
        train = synth_clusters(spec.class_count, spec.per_class, spec.image_size,
                               spec.noise_sigma, seed, channels=spec.channels,
                               pattern_contrast=spec.pattern_contrast,
                               pattern_seed=seed, sample_stream="train")
        test = synth_clusters(spec.class_count, spec.per_class_test, spec.image_size,
                              spec.noise_sigma, seed, channels=spec.channels,
                              pattern_contrast=spec.pattern_contrast,
                              pattern_seed=seed, sample_stream="test")
        return train, test
    train = load_cifar10(spec.directory, "train")
    test = load_cifar10(spec.directory, "test")
    if spec.subset:
        train = stratified_subset(train, spec.subset, seed)
    return train, test


# ---------------------------------------------------------------------------
# Optimizer and schedule


def sgd_step(params, grads, buffers, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0) -> None:
    """Heavy-ball SGD with coupled L2 decay: v <- m v + (g + wd th); th -= lr v."""
    if lr < 0:
        raise ConfigError(f"learning rate {lr} must be >= 0")
    for p, g, v in zip(params, grads, buffers):
        if g.shape != p.value.shape or v.shape != p.value.shape:
            raise ShapeError(
                f"sgd_step: param {p.value.shape}, grad {g.shape}, buffer {v.shape}"
            )
        v *= momentum
        v += g + weight_decay * p.value
        p.value -= lr * v


class SGDOptimizer:
    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float) -> None:
        grads = [p.grad for p in self.params]
        sgd_step(self.params, grads, self.buffers, lr,
                 momentum=self.momentum, weight_decay=self.weight_decay)


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup to base_lr, then half-cosine decay to zero."""
    if step < 0:
        raise ConfigError(f"step {step} must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.base_lr * step / warm
    span = max(1, total - warm)
    progress = min(1.0, (step - warm) / span)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Training state


@dataclass
class StepMetrics:
    step: int
    epoch: int
    lr: float
    loss: float
    teacher_entropy_21: float | None
    teacher_entropy_31: float | None
    teacher_entropy_42: float | None
    wallclock_ms: float
    backward_traversals: int = 1

    def record(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "lr": self.lr,
            "loss": self.loss,
            "teacher_entropy_21": self.teacher_entropy_21,
            "teacher_entropy_31": self.teacher_entropy_31,
            "teacher_entropy_42": self.teacher_entropy_42,
            "wallclock_ms": self.wallclock_ms,
        }


class TrainState:
    def __init__(self, config: TrainConfig, tri: TriNetwork,
                 queue1: NegativeQueue, queue2: NegativeQueue,
                 opt: SGDOptimizer, norm_mean: np.ndarray, norm_std: np.ndarray,
                 steps_per_epoch: int):
        self.config = config
        self.tri = tri
        self.queue1 = queue1
        self.queue2 = queue2
        self.opt = opt
        self.norm_mean = norm_mean
        self.norm_std = norm_std
        self.steps_per_epoch = steps_per_epoch
        self.step = 0
        self.epoch = 0
        self.strong = augment.strong_policy(config.encoder.image_size)
        self.weak = augment.weak_policy(config.encoder.image_size)
        # Set after each step when analysis mode is on: what went into which
        # queue, for provenance assertions.
        self.last_enqueued: dict[str, np.ndarray] = {}


def compute_norm_stats(dataset: LabeledImageDataset) -> tuple[np.ndarray, np.ndarray]:
    mean = dataset.images.mean(axis=(0, 2, 3))
    std = np.maximum(dataset.images.std(axis=(0, 2, 3)), 1e-6)
    return mean.astype(np.float64), std.astype(np.float64)


def normalize_images(x: np.ndarray, mean: np.ndarray, std: np.ndarray,
                     dtype) -> np.ndarray:
    return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(dtype)


def init_state(cfg: TrainConfig, dataset: LabeledImageDataset) -> TrainState:
    cfg.validate()
    key = RngKey(cfg.seed)
    tri = TriNetwork(cfg.encoder, key.child("init"), cfg.m1, cfg.m2, cfg.dtype)
    queue1 = NegativeQueue(cfg.queue_size, cfg.encoder.embed_dim,
                           key.child("queue", 1).generator(), dtype=cfg.dtype,
                           with_labels=cfg.analysis_mode)
    queue2 = NegativeQueue(cfg.queue_size, cfg.encoder.embed_dim,
                           key.child("queue", 2).generator(), dtype=cfg.dtype,
                           with_labels=cfg.analysis_mode)
    opt = SGDOptimizer(tri.student.parameters(), momentum=cfg.sgd_momentum,
                       weight_decay=cfg.weight_decay)
    mean, std = compute_norm_stats(dataset)
    steps_per_epoch = len(dataset) // cfg.batch_size
    return TrainState(cfg, tri, queue1, queue2, opt, mean, std, steps_per_epoch)


def _embed_untracked(net, x: np.ndarray) -> np.ndarray:
    """Teacher-side embedding: forward with no tape, rows normalized."""
    assert nc.active_tape() is None
    return l2_normalize_rows(net.forward(x)).value


def _logit_stats(tag: str, arr: np.ndarray) -> str:
    return (f"{tag}: min={np.min(arr):.4g} max={np.max(arr):.4g} "
            f"mean={np.mean(arr):.4g} finite={np.all(np.isfinite(arr))}")


def train_step(state: TrainState, raw_batch) -> StepMetrics:
    """One full optimization step on a raw (images, labels) batch."""
    t0 = time.perf_counter()
    cfg = state.config
    images, labels = raw_batch
    if images.shape[0] != cfg.batch_size:
        raise ShapeError(
            f"batch of {images.shape[0]} images, configured batch_size {cfg.batch_size}"
        )
    method = cfg.method
    need_x3 = method in ("msv", "msvq")
    need_x4 = method in ("mq", "msvq")
    akey = RngKey(cfg.seed).child("augment", state.step)

    x1 = augment.apply_policy(images, state.strong, akey.child(1))
    x2 = augment.apply_policy(images, state.weak, akey.child(2))
    views = {"x1": x1, "x2": x2}
    if need_x3:
        views["x3"] = augment.apply_policy(images, state.weak, akey.child(3))
    if need_x4:
        views["x4"] = augment.apply_policy(images, state.weak, akey.child(4))
    normed = {
        k: normalize_images(v, state.norm_mean, state.norm_std, cfg.dtype)
        for k, v in views.items()
    }

    if need_x3:
        # One teacher1 forward serves both weak views.
        z23 = _embed_untracked(state.tri.teacher1,
                               np.concatenate([normed["x2"], normed["x3"]]))
        z2, z3 = z23[:cfg.batch_size], z23[cfg.batch_size:]
    else:
        z2 = _embed_untracked(state.tri.teacher1, normed["x2"])
        z3 = None
    z4 = _embed_untracked(state.tri.teacher2, normed["x4"]) if need_x4 else None

    q1 = state.queue1.as_matrix()
    q2 = state.queue2.as_matrix() if need_x4 else None

    logits21 = z2 @ q1
    logits31 = z3 @ q1 if need_x3 else None
    logits42 = z4 @ q2 if need_x4 else None

    zero_grads(state.tri.student.parameters())
    with Tape() as tape:
        z1 = l2_normalize_rows(state.tri.student.forward(normed["x1"]))
        if method == "moco":
            loss = relation.loss_moco(z1, z2, q1, cfg.tau_s)
        else:
            logits11 = relation.similarity_logits(z1, q1)
            if method == "ressl":
                loss = relation.loss_ressl(logits11, logits21, cfg.tau_s, cfg.tau_t)
            elif method == "msv":
                loss = relation.loss_msv(logits11, logits21, logits31,
                                         cfg.tau_s, cfg.tau_t)
            else:
                logits12 = relation.similarity_logits(z1, q2)
                if method == "mq":
                    loss = relation.loss_mq(logits11, logits21, logits12,
                                            logits42, cfg.tau_s, cfg.tau_t)
                else:
                    loss = relation.loss_msvq(logits11, logits12, logits21,
                                              logits31, logits42,
                                              cfg.tau_s, cfg.tau_t)
    backward(tape, loss)
    loss_val = float(loss.value)
    if not math.isfinite(loss_val):
        stats = [_logit_stats("logits21", logits21)]
        if logits31 is not None:
            stats.append(_logit_stats("logits31", logits31))
        if logits42 is not None:
            stats.append(_logit_stats("logits42", logits42))
        stats.append(_logit_stats("z1", z1.value))
        raise NonFiniteLossError(
            f"step {state.step}: loss={loss_val}; " + "; ".join(stats)
        )

    lr = lr_at(state.step, cfg, state.steps_per_epoch)
    state.opt.step(lr)
    state.tri.ema_step()

    enqueue_labels = labels if cfg.analysis_mode else None
    state.queue1.enqueue_dequeue(z2, enqueue_labels)
    if need_x4:
        state.queue2.enqueue_dequeue(z4, enqueue_labels)
    if cfg.analysis_mode:
        state.last_enqueued = {"queue1": z2.copy()}
        if need_x4:
            state.last_enqueued["queue2"] = z4.copy()

    ent21 = relation.mean_entropy(nc.softmax_rows_array(logits21, cfg.tau_t)) \
        if method != "moco" else None
    ent31 = relation.mean_entropy(nc.softmax_rows_array(logits31, cfg.tau_t)) \
        if need_x3 else None
    ent42 = relation.mean_entropy(nc.softmax_rows_array(logits42, cfg.tau_t)) \
        if need_x4 else None

    metrics = StepMetrics(
        step=state.step, epoch=state.epoch, lr=lr, loss=loss_val,
        teacher_entropy_21=ent21, teacher_entropy_31=ent31,
        teacher_entropy_42=ent42,
        wallclock_ms=(time.perf_counter() - t0) * 1000.0,
        backward_traversals=tape.traversals,
    )
    state.step += 1
    return metrics


def train(cfg: TrainConfig, dataset: LabeledImageDataset,
          out_dir: str | None = None, resume: TrainState | None = None,
          step_callback=None) -> tuple[TrainState, list[StepMetrics]]:
    """Run the configured number of epochs; returns final state and metrics."""
    cfg.validate()
    state = resume if resume is not None else init_state(cfg, dataset)
    state.steps_per_epoch = len(dataset) // cfg.batch_size
    metrics: list[StepMetrics] = []
    writer = None
    if out_dir:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        writer = open(os.path.join(out_dir, "metrics.jsonl"), "a", encoding="utf-8")
    try:
        for epoch in range(state.epoch, cfg.epochs):
            ekey = RngKey(cfg.seed).child("shuffle", epoch)
            for raw in batches(dataset, cfg.batch_size, ekey):
                m = train_step(state, raw)
                metrics.append(m)
                if writer:
                    writer.write(json.dumps(m.record()) + "\n")
                if step_callback:
                    step_callback(state, m)
            state.epoch = epoch + 1
            if out_dir:
                save_checkpoint(state, os.path.join(
                    out_dir, "checkpoints", f"epoch_{state.epoch:04d}.ckpt"))
        if writer:
            writer.flush()
    finally:
        if writer:
            writer.close()
    return state, metrics


# ---------------------------------------------------------------------------
# Checkpointing


def _named_state_arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    arrays: list[tuple[str, np.ndarray]] = []
    for prefix, net in (("student", state.tri.student),
                        ("teacher1", state.tri.teacher1),
                        ("teacher2", state.tri.teacher2)):
        for name, p in net.named_parameters():
            arrays.append((f"{prefix}.{name}", p.value))
    for (name, _), buf in zip(state.tri.student.named_parameters(),
                              state.opt.buffers):
        arrays.append((f"opt.{name}", buf))
    for qname, q in (("queue1", state.queue1), ("queue2", state.queue2)):
        storage, _, labels = q.state()
        arrays.append((f"{qname}.storage", storage))
        if labels is not None:
            arrays.append((f"{qname}.labels", labels))
    return arrays


def save_checkpoint(state: TrainState, path: str) -> None:
    arrays = _named_state_arrays(state)
    manifest = []
    blobs = []
    for name, arr in arrays:
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": le.dtype.str})
        blobs.append(np.ascontiguousarray(le).tobytes())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "steps_per_epoch": state.steps_per_epoch,
        "queue1_head": state.queue1.state()[1],
        "queue2_head": state.queue2.state()[1],
        "norm_mean": state.norm_mean.tolist(),
        "norm_std": state.norm_std.tolist(),
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(
            f"checkpoint ended inside {what}: wanted {n} bytes, got {len(data)}"
        )
    return data


def load_checkpoint(path: str) -> TrainState:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointVersionError(
                f"{path}: bad magic {magic!r}, not a checkpoint file"
            )
        hlen = int.from_bytes(_read_exact(f, 4, "header length"), "little")
        try:
            header = json.loads(_read_exact(f, hlen, "header"))
        except json.JSONDecodeError as e:
            raise CheckpointVersionError(f"{path}: corrupt header: {e}") from e
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: format_version {header.get('format_version')} "
                f"unsupported (expected {CHECKPOINT_VERSION})"
            )
        loaded: dict[str, np.ndarray] = {}
        for entry in header["manifest"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = _read_exact(f, count * dtype.itemsize, entry["name"])
            arr = np.frombuffer(buf, dtype=dtype).reshape(shape)
            loaded[entry["name"]] = arr.astype(dtype.newbyteorder("="))

    cfg = config_from_dict(header["config"])
    dummy = LabeledImageDataset(
        images=np.zeros((1, cfg.dataset.channels) + tuple(cfg.encoder.image_size),
                        dtype=np.float32),
        labels=np.zeros(1, dtype=np.int64), class_count=max(2, cfg.dataset.class_count))
    state = init_state(cfg, dummy)
    state.norm_mean = np.asarray(header["norm_mean"], dtype=np.float64)
    state.norm_std = np.asarray(header["norm_std"], dtype=np.float64)
    state.steps_per_epoch = int(header["steps_per_epoch"])
    state.step = int(header["step"])
    state.epoch = int(header["epoch"])

    def take(name: str, like: np.ndarray) -> np.ndarray:
        if name not in loaded:
            raise CheckpointShapeError(f"{path}: missing tensor '{name}'")
        arr = loaded[name]
        if arr.shape != like.shape:
            raise CheckpointShapeError(
                f"{path}: tensor '{name}' has shape {arr.shape}, expected {like.shape}"
            )
        return arr.astype(like.dtype)

    for prefix, net in (("student", state.tri.student),
                        ("teacher1", state.tri.teacher1),
                        ("teacher2", state.tri.teacher2)):
        for name, p in net.named_parameters():
            p.value[...] = take(f"{prefix}.{name}", p.value)
    for (name, _), buf in zip(state.tri.student.named_parameters(),
                              state.opt.buffers):
        buf[...] = take(f"opt.{name}", buf)
    for qname, q, head_key in (("queue1", state.queue1, "queue1_head"),
                               ("queue2", state.queue2, "queue2_head")):
        storage = take(f"{qname}.storage", q.state()[0]).copy()
        labels = None
        if f"{qname}.labels" in loaded:
            labels = loaded[f"{qname}.labels"].astype(np.int64).copy()
        q.load_state(storage, int(header[head_key]), labels)
    return state
