"""Optimisers, schedules, augmentation and the pre-training / transfer loops."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import tensor as T
from .data_io import Dataset, load_checkpoint, save_checkpoint
from .errors import ConfigError, LabelMismatchError, NonFiniteError, ShapeMismatchError
from .geometry import (
    LossConfig,
    PointCloud,
    chamfer_distance,
    chamfer_per_cloud,
    earth_movers_distance,
    normalize,
    repulsion_loss,
    subsample,
)
from .model import UAE, classification_head, encoder_forward, segmentation_head
from .tensor import Tensor

# ---------------------------------------------------------------------- config


@dataclass
class TrainConfig:
    ratio: float = 0.125
    strategy: str = "random"
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: str = "adam"
    lr0: float = 1e-3
    lr_min: float = 0.0
    schedule: str = "step"  # step decay or cosine annealing
    decay_factor: float = 0.7
    decay_period: int = 10
    epochs: int = 120
    batch_size: int = 32
    bn_momentum: float = 0.9
    sgd_momentum: float = 0.9
    seed: int = 0
    normalize: str = "unit_cube"
    translate: float = 0.0  # per-axis shift drawn from [-translate, translate]; 0 disables
    scale_range: Optional[tuple] = None  # (low, high) anisotropic scale; None disables
    input_dropout: float = 0.0
    precision: str = "float32"
    checkpoint_every: int = 0  # epochs; 0 keeps only the final checkpoint
    log_wall_time: bool = False

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.scale_range is not None:
            self.scale_range = tuple(float(v) for v in self.scale_range)
        self.validate()

    def validate(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factoratio must lie in (0, 1], got {self.decay_factor}")
        if self.decay_period < 1:
            raise ConfigError("decay_period must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0 < self.ratio <= 1:
            raise ConfigError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.schedule not in ("step", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if not 0 <= self.input_dropout < 1:
            raise ConfigError("input_dropout must lie in [0, 1)")
        if self.loss.variant not in LossConfig.VARIANTS:
            raise ConfigError(f"unknown loss variant {self.loss.variant!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scale_range"] = None if self.scale_range is None else list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        if isinstance(d.get("loss"), dict):
            lk = set(d["loss"]) - {f.name for f in dataclasses.fields(LossConfig)}
            if lk:
                raise ConfigError(f"unknown loss keys: {sorted(lk)}")
        return cls(**d)


PRESETS = {
    # pre-training hyperparameters as published
    "paper": dict(
        lr0=1e-3, decay_factor=0.7, decay_period=10, epochs=120, batch_size=32, ratio=0.125, bn_momentum=0.9,
        loss=dict(cd_weight=100.0, rep_weight=1.0, variant="CD+RL"),
    ),
    # one batch of 8 shapes, 500 steps; the decay period is stretched so the
    # rate does not vanish long before the last step
    "desk": dict(
        lr0=1e-3, decay_factor=0.7, decay_period=100, epochs=500, batch_size=8, ratio=0.125, bn_momentum=0.9,
        loss=dict(cd_weight=100.0, rep_weight=1.0, variant="CD+RL"),
    ),
    "probe": dict(lr0=1e-3, lr_min=1e-5, schedule="cosine", epochs=100, batch_size=32),
    "sgd-probe": dict(optimizer="sgd", lr0=1e-2, lr_min=1e-4, schedule="cosine", epochs=100, batch_size=32),
    "sgd-finetune": dict(optimizer="sgd", lr0=1e-1, lr_min=1e-3, schedule="cosine", epochs=100, batch_size=32),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = json.loads(json.dumps(PRESETS[name]))
    loss = dict(d.pop("loss", {}))
    loss.update(overrides.pop("loss", {}) or {})
    d.update(overrides)
    return TrainConfig(loss=LossConfig(**loss), **d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay (lr0 * factor^floor(e / period)) or cosine annealing."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    if cfg.schedule == "step":
        return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_period)
    total = max(cfg.epochs, 1)
    frac = min(epoch, total) / total
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1 + math.cos(math.pi * frac))


# ------------------------------------------------------------------- optimiser


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kind: str = "adam"
    momentum: float = 0.9

    def to_dict(self) -> dict:
        return {"m": self.m, "v": self.v, "step": self.step, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "kind": self.kind, "momentum": self.momentum}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        return cls(**d)


def _check_grads(params, grads):
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeMismatchError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState, lr: float):
    """Bias-corrected Adam without weight decay.

    Returns new parameter and state objects; inputs are left untouched.
    Only parameters present in ``grads`` move.
    """
    _check_grads(params, grads)
    step = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1 - b1**step
    c2 = 1 - b2**step
    new_params = dict(params)
    m_all, v_all = dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        m = (1 - b1) * g
        if name in m_all:
            m += b1 * m_all[name]
        v = (1 - b2) * (g * g)
        if name in v_all:
            v += b2 * v_all[name]
        m_all[name], v_all[name] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
        if lr != 0:
            denom = np.sqrt(v / c2)
            denom += eps
            update = m * (lr / c1)
            update /= denom
            new_params[name] = (p - update).astype(p.dtype, copy=False)
    return new_params, dataclasses.replace(state, m=m_all, v=v_all, step=step)


def sgd_step(params, grads, state: OptimizerState, lr: float):
    """SGD with heavy-ball momentum, no weight decay."""
    _check_grads(params, grads)
    new_params = dict(params)
    m_all = dict(state.m)
    for name, g in grads.items():
        p = params[name]
        m = (state.momentum * m_all.get(name, np.zeros_like(p)) + g).astype(p.dtype)
        m_all[name] = m
        if lr != 0:
            new_params[name] = (p - lr * m).astype(p.dtype)
    return new_params, dataclasses.replace(state, m=m_all, step=state.step + 1)


def optimizer_step(params, grads, state: OptimizerState, lr: float):
    return sgd_step(params, grads, state, lr) if state.kind == "sgd" else adam_step(params, grads, state, lr)


# ---------------------------------------------------------------- augmentation


def augment(cloud, rng: np.random.Generator, cfg: TrainConfig):
    """Per-axis scale, per-axis shift and input dropout, each only when enabled.

    Dropped points are overwritten by the first surviving point, so the
    number of points never changes.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    out = pts.copy()
    if cfg.scale_range is not None:
        lo, hi = cfg.scale_range
        out = out * rng.uniform(lo, hi, size=3)
    if cfg.translate > 0:
        out = out + rng.uniform(-cfg.translate, cfg.translate, size=3)
    if cfg.input_dropout > 0:
        drop = rng.random(len(out)) < cfg.input_dropout
        keep = np.flatnonzero(~drop)
        if len(keep) and drop.any():
            out[drop] = out[keep[0]]
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.labels, cloud.cls, cloud.source)
    return out


# ------------------------------------------------------------------------ loss


def loss_terms(pred: Tensor, target, loss: LossConfig) -> Dict[str, Tensor]:
    """Weighted loss and its raw components for one batch."""
    if isinstance(target, PointCloud):
        target = target.points
    variant = loss.variant
    if variant not in LossConfig.VARIANTS:
        raise ConfigError(f"unknown loss variant {variant!r}")
    terms = {}
    if variant.startswith("EMD"):
        recon = earth_movers_distance(pred, target, cap=loss.emd_cap)
        terms["emd"] = recon
    else:
        recon = chamfer_distance(pred, target)
        terms["cd"] = recon
    total = T.mul(recon, loss.cd_weight)
    if variant.endswith("+RL"):
        rep = repulsion_loss(pred, loss.rep_neighbors, loss.rep_radius)
        terms["rep"] = rep
        total = total + T.mul(rep, loss.rep_weight)
    terms["total"] = total
    return terms


def total_loss(pred: Tensor, target, loss: LossConfig) -> Tensor:
    return loss_terms(pred, target, loss)["total"]


# -------------------------------------------------------------------- batches


def _sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream, independent of batching, worker count and resume."""
    return np.random.default_rng([seed, epoch, index])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 2**31]).permutation(n)


def prepare_batch(dataset: Dataset, indices, epoch: int, cfg: TrainConfig):
    """Normalise, augment and subsample each cloud of one batch."""
    targets, inputs = [], []
    for i in indices:
        rng = _sample_rng(cfg.seed, epoch, int(i))
        cloud = normalize(dataset.samples[i].cloud, cfg.normalize)
        cloud = augment(cloud, rng, cfg)
        sub = subsample(cloud, cfg.ratio, cfg.strategy, rng)
        targets.append(cloud.points)
        inputs.append(cloud.points[sub.indices])
    if len({len(t) for t in targets}) != 1:
        raise ConfigError("all clouds of a batch need the same number of points")
    return np.stack(inputs).astype(cfg.dtype), np.stack(targets).astype(cfg.dtype)


# ------------------------------------------------------------------- metrics IO

CSV_FIELDS = ("epoch", "step", "loss", "cd", "lr", "wall_ms")


class MetricsSink:
    """Append-only per-epoch CSV. Floats are written with full precision."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.rows: List[dict] = []

    def start(self, resume_epoch: Optional[int] = None):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if resume_epoch is not None and self.path.exists():
            with open(self.path, newline="") as fh:
                self.rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= resume_epoch]
        with open(self.path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows)

    def emit(self, row: dict):
        row = {k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n").writerow(row)


@dataclass
class PretrainResult:
    params: Dict[str, np.ndarray]
    bn_state: Dict[str, tuple]
    optimizer: OptimizerState
    log: List[dict]
    initial_cd: float
    epochs_run: int


def _new_optimizer(cfg: TrainConfig) -> OptimizerState:
    return OptimizerState(kind=cfg.optimizer, momentum=cfg.sgd_momentum)


def pretrain(
    dataset: Dataset,
    model: UAE,
    cfg: TrainConfig,
    sink: Optional[MetricsSink] = None,
    checkpoint_dir=None,
    resume_from=None,
    stop_after: Optional[int] = None,
    on_step: Optional[Callable[[int, dict], None]] = None,
) -> PretrainResult:
    """Self-supervised reconstruction training.

    ``model`` is updated in place (its params and batch-norm state are
    replaced after every step). ``stop_after`` ends the run early after that
    many epochs, as an interrupted run would. On a non-finite loss the run
    aborts with NonFiniteError before anything is written for that step.
    """
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    sink = sink or MetricsSink()
    opt = _new_optimizer(cfg)
    start_epoch = 0
    initial_cd = None
    if resume_from is not None:
        ck = load_checkpoint(resume_from, expected_arch=model.arch)
        model.params = dict(ck.params)
        model.bn_state = dict(ck.bn_state)
        opt = OptimizerState.from_dict(ck.optimizer)
        start_epoch = int(ck.meta["epoch"]) + 1
        initial_cd = ck.meta.get("initial_cd")
        sink.start(resume_epoch=start_epoch - 1)
    else:
        sink.start()
    ckdir = None if checkpoint_dir is None else Path(checkpoint_dir)

    def save(epoch):
        if ckdir is None:
            return
        meta = {"epoch": epoch, "seed": cfg.seed, "initial_cd": initial_cd, "train": cfg.to_dict(),
                "rng": {"scheme": "per-sample", "seed": cfg.seed, "next_epoch": epoch + 1}}
        args = dict(arch=model.arch, params=model.params, bn_state=model.bn_state, optimizer=opt.to_dict(), meta=meta)
        save_checkpoint(ckdir / "last.ckpt", **args)
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(ckdir / f"epoch_{epoch:05d}.ckpt", **args)

    n = len(dataset)
    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, start_epoch + stop_after)
    epoch = start_epoch - 1
    for epoch in range(start_epoch, end_epoch):
        tic = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = epoch_order(n, cfg.seed, epoch)
        losses, cds = [], []
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            inputs, targets = prepare_batch(dataset, idx, epoch, cfg)
            fw = model.forward(training=True)
            pred, _ = model.reconstruct(fw, inputs, cfg.ratio)
            terms = loss_terms(pred, targets, cfg.loss)
            value = float(terms["total"].data)
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {opt.step}")
            cd = float(terms["cd"].data) if "cd" in terms else float(chamfer_per_cloud(pred.data, targets).mean())
            if initial_cd is None:
                initial_cd = cd
            grads = T.backward(terms["total"], fw.trainable())
            model.params, opt = optimizer_step(model.params, grads, opt, lr)
            model.bn_state = fw.committed_bn()
            losses.append(value)
            cds.append(cd)
            if on_step is not None:
                on_step(opt.step, {"loss": value, "cd": cd, "lr": lr, "pred": pred.data})
        wall = (time.perf_counter() - tic) * 1000 if cfg.log_wall_time else 0.0
        sink.emit({"epoch": epoch, "step": opt.step, "loss": float(np.mean(losses)), "cd": float(np.mean(cds)),
                   "lr": lr, "wall_ms": float(round(wall, 3))})
        save(epoch)
    return PretrainResult(model.params, model.bn_state, opt, sink.rows, float(initial_cd or 0.0), epoch + 1)


# ------------------------------------------------------------------- transfer


def log_softmax(logits: Tensor) -> Tensor:
    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    z = logits - shift
    return z - T.log(T.reduce_sum(T.exp(z), axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; the last axis holds class scores."""
    c = logits.shape[-1]
    onehot = np.eye(c, dtype=logits.dtype)[labels.reshape(-1)].reshape(logits.shape)
    picked = T.reduce_sum(log_softmax(logits) * Tensor(onehot), axis=-1)
    return T.neg(T.reduce_mean(picked))


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def part_miou(pred, labels, classes, part_space: Dict[int, List[int]]) -> float:
    """Per-sample mean part IoU over the parts of that sample's class, then averaged.

    A part absent from both prediction and ground truth counts as IoU 1.
    """
    scores = []
    for p, g, c in zip(pred, labels, classes):
        ious = []
        for part in part_space[int(c)]:
            inter = np.sum((p == part) & (g == part))
            union = np.sum((p == part) | (g == part))
            ious.append(1.0 if union == 0 else inter / union)
        scores.append(np.mean(ious))
    return float(np.mean(scores))


@dataclass
class TransferResult:
    mode: str
    head: str
    metric: str
    train_score: float
    test_score: float
    log: List[dict]
    params: Dict[str, np.ndarray]
    bn_state: Dict[str, tuple]


def _check_labels(dataset: Dataset, head: str, arch, part_space):
    for s in dataset.samples:
        c = s.cloud.cls
        if c is None or not 0 <= c < arch.num_classes:
            raise LabelMismatchError(f"{s.sample_id}: class {c} outside [0, {arch.num_classes})")
        if head == "segmentation":
            if s.cloud.labels is None:
                raise LabelMismatchError(f"{s.sample_id}: missing part labels")
            allowed = set(part_space.get(int(c), []))
            bad = set(np.unique(s.cloud.labels).tolist()) - allowed
            if bad or max(allowed, default=-1) >= arch.num_parts:
                raise LabelMismatchError(f"{s.sample_id}: part labels {sorted(bad)} not in class {c} part space")


def _transfer_inputs(dataset, indices, epoch, cfg, train):
    pts, labels = [], []
    for i in indices:
        s = dataset.samples[i]
        cloud = normalize(s.cloud, cfg.normalize)
        if train:
            cloud = augment(cloud, _sample_rng(cfg.seed, epoch, int(i)), cfg)
        pts.append(cloud.points)
        labels.append(s.cloud.labels)
    return np.stack(pts).astype(cfg.dtype), labels


def _restricted_argmax(logits: np.ndarray, classes, part_space):
    out = np.empty(logits.shape[:2], dtype=np.int64)
    for b, c in enumerate(classes):
        parts = np.asarray(part_space[int(c)])
        out[b] = parts[np.argmax(logits[b][:, parts], axis=-1)]
    return out


def transfer(
    train_set: Dataset,
    test_set: Dataset,
    model: UAE,
    mode: str,
    head: str,
    cfg: TrainConfig,
    sink: Optional[MetricsSink] = None,
) -> TransferResult:
    """Train a downstream head on a (frozen or trainable) pre-trained encoder.

    ``probe`` freezes the encoder, including its batch-norm statistics, and
    trains only the head. ``finetune`` trains everything. Reports overall
    accuracy for classification and instance mIoU for segmentation.
    """
    if mode not in ("probe", "finetune"):
        raise ConfigError(f"unknown transfer mode {mode!r}")
    if head not in ("classification", "segmentation"):
        raise ConfigError(f"unknown head {head!r}")
    arch = model.arch
    part_space = train_set.part_space() or test_set.part_space()
    for ds in (train_set, test_set):
        _check_labels(ds, head, arch, part_space)
    sink = sink or MetricsSink()
    sink.start()
    frozen = ("encoder", "decoder") if mode == "probe" else ("decoder",)
    head_fn = classification_head if head == "classification" else segmentation_head
    classes_train = train_set.classes()
    augmenting = cfg.translate > 0 or cfg.scale_range is not None or cfg.input_dropout > 0
    cached = None
    if mode == "probe" and not augmenting:
        pts, _ = _transfer_inputs(train_set, range(len(train_set)), 0, cfg, False)
        cached = model.encode(pts)

    opt = _new_optimizer(cfg)
    n = len(train_set)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = epoch_order(n, cfg.seed, epoch)
        losses = []
        for bi, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s : s + cfg.batch_size]
            fw = model.forward(training=True, rng=_sample_rng(cfg.seed, epoch, 2**30 + bi), frozen=frozen)
            if cached is not None:
                feats = Tensor(cached[idx])
                labels = [train_set.samples[i].cloud.labels for i in idx]
            else:
                pts, labels = _transfer_inputs(train_set, idx, epoch, cfg, True)
                feats = encoder_forward(fw, Tensor(pts), arch)
            logits = head_fn(fw, feats, arch)
            target = classes_train[idx] if head == "classification" else np.stack(labels)
            loss = cross_entropy(logits, target)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            grads = T.backward(loss, fw.trainable())
            model.params, opt = optimizer_step(model.params, grads, opt, lr)
            model.bn_state = fw.committed_bn()
            losses.append(value)
        sink.emit({"epoch": epoch, "step": opt.step, "loss": float(np.mean(losses)), "cd": 0.0, "lr": lr,
                   "wall_ms": 0.0})

    train_score = evaluate_transfer(train_set, model, head, cfg, part_space)
    test_score = evaluate_transfer(test_set, model, head, cfg, part_space)
    return TransferResult(mode, head, "accuracy" if head == "classification" else "miou",
                          train_score, test_score, sink.rows, model.params, model.bn_state)


def evaluate_transfer(dataset: Dataset, model: UAE, head: str, cfg: TrainConfig, part_space=None,
                      batch_size: int = 16) -> float:
    """Eval-mode overall accuracy or instance mIoU."""
    part_space = part_space or dataset.part_space()
    preds = []
    for s in range(0, len(dataset), batch_size):
        idx = list(range(s, min(s + batch_size, len(dataset))))
        pts, _ = _transfer_inputs(dataset, idx, 0, cfg, False)
        fw = model.forward(training=False)
        feats = encoder_forward(fw, Tensor(pts), model.arch)
        if head == "classification":
            preds.append(np.argmax(classification_head(fw, feats, model.arch).data, axis=-1))
        else:
            logits = segmentation_head(fw, feats, model.arch).data
            preds.append(_restricted_argmax(logits, dataset.classes()[idx], part_space))
    pred = np.concatenate(preds)
    if head == "classification":
        return accuracy(pred, dataset.classes())
    labels = [smp.cloud.labels for smp in dataset.samples]
    return part_miou(pred, labels, dataset.classes(), part_space)
