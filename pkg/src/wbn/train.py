"""SGD training, checkpointing, evaluation, and the leave-one-domain-out protocol.

Training is plain SGD over two rate groups: the classification head runs at
its own (typically 10x) learning rate, everything else at the base rate;
both drop by a fixed factor after a fixed fraction of the iterations. The
shared affine normalization terms are excluded from weight decay.

Batches are a pure function of (seed, iteration), so a run is fully
determined by its configuration and a checkpoint resume continues the exact
trajectory of the uninterrupted run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward
from .binio import Reader, Writer
from .data import Batch, DomainDataset, make_batches, merge_domains
from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    NumericError,
    VersionError,
)
from .losses import LossConfig, avg_class_accuracy, predict_classes, total_loss
from .model import Model, ModelConfig, build_model

CHECKPOINT_MAGIC = b"WBNC"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 64
    base_lr: float = 0.001
    head_lr: float = 0.01
    weight_decay: float = 0.0005
    lr_drop_factor: float = 0.1
    lr_drop_at_fraction: float = 0.9
    lam: float = 0.1
    momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 2:
            raise ConfigError("iterations and batch_size must be positive (batch >= 2)")
        if min(self.base_lr, self.head_lr) <= 0 or self.lr_drop_factor <= 0:
            raise ConfigError("learning rates and drop factor must be positive")
        if not 0 < self.lr_drop_at_fraction <= 1:
            raise ConfigError("lr_drop_at_fraction must lie in (0, 1]")
        if self.weight_decay < 0 or self.lam < 0:
            raise ConfigError("weight_decay and lambda must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("running-stats momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "iterations", "batch_size", "base_lr", "head_lr", "weight_decay",
            "lr_drop_factor", "lr_drop_at_fraction", "lam", "momentum", "seed",
        )}


def config_hash(model_config: ModelConfig, train_config: TrainConfig) -> str:
    payload = json.dumps(
        {"model": model_config.to_dict(), "train": train_config.to_dict()}, sort_keys=True
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def lr_schedule(iteration: int, config: TrainConfig, base: float) -> float:
    """Constant rate that drops once by `lr_drop_factor` late in the run."""
    if not 0 <= iteration < config.iterations:
        raise ConfigError(f"iteration {iteration} outside 0..{config.iterations - 1}")
    if iteration >= config.lr_drop_at_fraction * config.iterations:
        return base * config.lr_drop_factor
    return base


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    decay: bool = True


def sgd_step(groups: list[ParamGroup], weight_decay: float) -> None:
    """p <- p - lr * (grad + weight_decay * p); params without grads are skipped."""
    for group in groups:
        for p in group.params:
            if p.grad is None:
                continue
            if not np.isfinite(p.grad).all():
                raise NumericError("non-finite gradient; aborting the run")
            step = p.grad + weight_decay * p.data if group.decay else p.grad
            p.data -= group.lr * step
            p.grad = None


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    arrays: dict[str, np.ndarray]
    iteration: int
    config_hash: str
    collapse_count: int = 0

    def save(self, path) -> None:
        w = Writer()
        w.magic(CHECKPOINT_MAGIC)
        w.u16(CHECKPOINT_VERSION)
        meta = {
            "model": self.model_config.to_dict(),
            "train": self.train_config.to_dict(),
            "iteration": self.iteration,
            "config_hash": self.config_hash,
            "collapse_count": self.collapse_count,
        }
        w.blob(json.dumps(meta, sort_keys=True).encode("utf-8"))
        w.u32(len(self.arrays))
        for name in sorted(self.arrays):
            arr = self.arrays[name]
            w.blob(name.encode("utf-8"))
            w.u8(arr.ndim)
            for dim in arr.shape:
                w.u32(dim)
            w.f64_array(arr)
        Path(path).write_bytes(w.getvalue())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        r = Reader(Path(path).read_bytes())
        r.magic(CHECKPOINT_MAGIC)
        version = r.u16()
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        try:
            meta = json.loads(r.blob().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad checkpoint metadata ending at offset {r.pos}: {exc}") from exc
        arrays = {}
        for _ in range(r.u32()):
            name = r.blob().decode("utf-8")
            shape = tuple(r.u32() for _ in range(r.u8()))
            arrays[name] = r.f64_array(shape)
        r.expect_end()
        return cls(
            model_config=ModelConfig.from_dict(meta["model"]),
            train_config=TrainConfig(**meta["train"]),
            arrays=arrays,
            iteration=meta["iteration"],
            config_hash=meta["config_hash"],
            collapse_count=meta.get("collapse_count", 0),
        )

    def restore_model(self) -> Model:
        model = build_model(self.model_config, self.train_config.seed)
        model.load_arrays(self.arrays)
        return model


def make_checkpoint(model: Model, config: TrainConfig, iteration: int) -> Checkpoint:
    return Checkpoint(
        model_config=model.config,
        train_config=config,
        arrays={k: v.copy() for k, v in model.named_arrays().items()},
        iteration=iteration,
        config_hash=config_hash(model.config, config),
        collapse_count=model.collapse_count(),
    )


@dataclass
class TraceRow:
    iteration: int
    loss: float
    base_lr: float
    head_lr: float


class BatchSchedule:
    """Pure (seed, iteration) -> batch lookup; epoch e is permutation e.

    The per-batch domain quotas depend only on per-domain counts, so every
    epoch yields the same number of batches and iteration indices map
    stably onto (epoch, position) regardless of where a run resumes.
    """

    def __init__(self, ds: DomainDataset, config: TrainConfig, stratify: bool):
        self.ds = ds
        self.config = config
        self.stratify = stratify
        self._epoch = -1
        self._batches: list[Batch] = []
        self.per_epoch = len(self._load_epoch(0))

    def _load_epoch(self, epoch: int) -> list[Batch]:
        if epoch != self._epoch:
            self._epoch = epoch
            self._batches = list(
                make_batches(
                    self.ds, self.config.batch_size, self.config.seed, self.stratify, epoch
                )
            )
        return self._batches

    def batch(self, iteration: int) -> Batch:
        epoch, pos = divmod(iteration, self.per_epoch)
        return self._load_epoch(epoch)[pos]


def _check_finite(model: Model) -> None:
    for name, arr in model.named_arrays().items():
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in {name} after an update")


def train_loop(
    model: Model,
    dataset: DomainDataset,
    config: TrainConfig,
    start_iteration: int = 0,
) -> tuple[Checkpoint, list[TraceRow]]:
    """Optimize the combined objective; returns the final checkpoint and loss trace."""
    mode = model.config.norm_mode
    if model.config.needs_domain_labels and dataset.domain_labels is None:
        raise ContractError(f"mode {mode} requires a dataset with domain labels")
    if dataset.num_features != model.config.input_dim:
        raise ConfigError(
            f"dataset has {dataset.num_features} features, model expects {model.config.input_dim}"
        )
    loss_config = LossConfig(
        lam=config.lam,
        includes_domain_loss=model.config.uses_branch and mode != "WBN_SOFT_LATENT",
    )
    stratify = model.config.needs_domain_labels
    model.set_momentum(config.momentum)
    params = model.parameters()
    trace: list[TraceRow] = []
    schedule = BatchSchedule(dataset, config, stratify)
    for iteration in range(start_iteration, config.iterations):
        batch = schedule.batch(iteration)
        out = model.forward(batch.x, training=True, domain_labels=batch.d)
        loss = total_loss(out.class_logits, batch.y, out.domain_logits, batch.d, loss_config)
        backward(loss)
        base = lr_schedule(iteration, config, config.base_lr)
        head = lr_schedule(iteration, config, config.head_lr)
        sgd_step(_groups(params, model, base, head), config.weight_decay)
        _check_finite(model)
        trace.append(TraceRow(iteration, float(loss.data), base, head))
    return make_checkpoint(model, config, config.iterations), trace


def _groups(params, model: Model, base: float, head: float) -> list[ParamGroup]:
    affine = []
    for norm in model.norms:
        affine.extend((norm.affine.gamma, norm.affine.beta))
    affine_ids = {id(p) for p in affine}
    trunk = [p for p in params.theta_s if id(p) not in affine_ids]
    return [
        ParamGroup(trunk, base, decay=True),
        ParamGroup(affine, base, decay=False),
        ParamGroup(params.theta_w, base, decay=True),
        ParamGroup(params.theta_c, head, decay=True),
    ]


@dataclass
class EvalResult:
    accuracy: float
    per_class_recall: list[float]
    assignments: np.ndarray | None
    predictions: np.ndarray


def evaluate_model(
    model: Model,
    dataset: DomainDataset,
    batch_size: int = 256,
    calibrate_on: np.ndarray | None = None,
) -> EvalResult:
    """Inference over a dataset: average per-class recall plus assignment weights.

    For DABN models, statistics are calibrated on `calibrate_on` (defaults
    to the evaluated features themselves).
    """
    if dataset.num_features != model.config.input_dim:
        raise ConfigError(
            f"dataset has {dataset.num_features} features, model expects {model.config.input_dim}"
        )
    if model.config.norm_mode == "DABN":
        model.calibrate(dataset.features if calibrate_on is None else calibrate_on)
    logits_parts, assign_parts = [], []
    for start in range(0, len(dataset), batch_size):
        xs = dataset.features[start : start + batch_size]
        out = model.forward(xs, training=False)
        logits_parts.append(out.class_logits.data)
        if out.assignment is not None:
            assign_parts.append(out.assignment.w.data)
    logits = np.concatenate(logits_parts)
    predictions = predict_classes(logits)
    labels = dataset.class_labels
    recalls = [
        float(np.mean(predictions[labels == c] == c)) if np.any(labels == c) else float("nan")
        for c in range(dataset.num_classes)
    ]
    return EvalResult(
        accuracy=avg_class_accuracy(predictions, labels, dataset.num_classes),
        per_class_recall=recalls,
        assignments=np.concatenate(assign_parts) if assign_parts else None,
        predictions=predictions,
    )


@dataclass
class LodoRow:
    held_out: int
    accuracy: float


@dataclass
class LodoResult:
    rows: list[LodoRow]
    mean: float


def lodo_protocol(
    domains: list[DomainDataset],
    model_config: ModelConfig,
    train_config: TrainConfig,
    eval_domains: list[DomainDataset] | None = None,
) -> LodoResult:
    """Train on all domains but one, evaluate on the held-out one, rotate.

    The model's domain count follows the training fold; the fold seed is
    derived from the run seed and the held-out index. When `eval_domains`
    is given, fold k trains on `domains` minus k but scores on
    `eval_domains[k]` (separate test splits of the same domains).
    """
    if len(domains) < 2:
        raise ContractError("leave-one-domain-out needs at least two domains")
    if eval_domains is not None and len(eval_domains) != len(domains):
        raise ContractError("need one evaluation dataset per domain")
    rows = []
    for held in range(len(domains)):
        kept = [d for i, d in enumerate(domains) if i != held]
        train_ds = merge_domains(kept)
        fold_model_cfg = _fold_config(model_config, len(kept))
        fold_train_cfg = TrainConfig(**{**train_config.to_dict(), "seed": train_config.seed + held})
        model = build_model(fold_model_cfg, fold_train_cfg.seed)
        train_loop(model, train_ds, fold_train_cfg)
        held_ds = domains[held] if eval_domains is None else eval_domains[held]
        result = evaluate_model(model, held_ds)
        rows.append(LodoRow(held, result.accuracy))
    return LodoResult(rows, float(np.mean([r.accuracy for r in rows])))


def _fold_config(config: ModelConfig, num_train_domains: int) -> ModelConfig:
    raw = config.to_dict()
    n = 1 if config.norm_mode == "BN" else num_train_domains
    raw["num_domains"] = n
    if raw.get("branch") is not None:
        raw["branch"]["num_domains"] = n
    return ModelConfig.from_dict(raw)
