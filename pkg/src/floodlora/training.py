"""Optimization recipe: Adam, plateau LR schedule, early stopping, MAE pretraining, evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .data import Dataset, batch_indices
from .errors import ConfigurationError, NumericalError, StateError, UsageError
from .lora import Strategy
from .model import Encoder, EncoderConfig, SegModel, decode_and_fuse, patchify
from .nn import Linear, parameter
from .objectives import (
    ConfusionCounts,
    LossConfig,
    MetricsReport,
    combined_loss,
    confusion_counts,
    threshold_logits,
)
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 50
    early_stop_patience: int = 2
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sched_factor: float = 0.5
    sched_patience: int = 3
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.early_stop_patience < 1 or self.sched_patience < 1:
            raise ConfigurationError("patiences must be >= 1")
        if not 0 < self.sched_factor < 1:
            raise ConfigurationError("sched_factor must be in (0, 1)")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("max_epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- Adam


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: list[tuple[str, Tensor]], state: OptimizerState, cfg: TrainConfig,
              lr: float | None = None) -> None:
    """One Adam update with decoupled weight decay on ``params`` (in place)."""
    lr = cfg.lr if lr is None else lr
    missing = [n for n, p in params if p.grad is None]
    if missing:
        raise StateError(f"trainable parameters without gradient: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params:
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data = p.data - lr * update - lr * cfg.weight_decay * p.data


# ---------------------------------------------------------------- schedule / stopping


@dataclass
class PlateauScheduler:
    """Multiply the LR by ``factor`` once the metric fails to improve for more than ``patience`` epochs."""

    lr: float
    factor: float = 0.5
    patience: int = 3
    best: float = math.inf
    counter: int = 0

    def step(self, val_loss: float) -> float:
        if not math.isfinite(val_loss):
            raise ConfigurationError("scheduler needs a finite validation loss")
        if val_loss < self.best:
            self.best = val_loss
            self.counter = 0
        else:
            self.counter += 1
            if self.counter > self.patience:
                self.lr *= self.factor
                self.counter = 0
        return self.lr


def scheduler_step(sched: PlateauScheduler, val_loss: float) -> float:
    return sched.step(val_loss)


def early_stop(history, patience: int = 2) -> bool:
    """True when the last ``patience`` losses never beat the best loss seen before them."""
    if not len(history):
        raise UsageError("early_stop needs a non-empty history")
    if len(history) <= patience:
        return False
    best_before = min(history[:-patience])
    return min(history[-patience:]) >= best_before


# ---------------------------------------------------------------- records


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    val_metrics: MetricsReport
    wall_time: float = 0.0

    CSV_FIELDS = ("epoch", "train_loss", "val_loss", "lr", "val_accuracy", "val_precision", "val_recall",
                  "val_f1", "val_iou")

    def csv_row(self) -> dict:
        m = self.val_metrics
        return {
            "epoch": self.epoch,
            "train_loss": repr(self.train_loss),
            "val_loss": repr(self.val_loss),
            "lr": repr(self.lr),
            "val_accuracy": repr(m.accuracy),
            "val_precision": repr(m.precision),
            "val_recall": repr(m.recall),
            "val_f1": repr(m.f1),
            "val_iou": repr(m.iou),
        }


def epochs_csv(records: list[EpochRecord]) -> str:
    """Epoch log without wall-clock columns, so reruns are byte-identical."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EpochRecord.CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


class SplitArrays(NamedTuple):
    pre: np.ndarray
    post: np.ndarray
    mask: np.ndarray
    ids: list

    def __len__(self):
        return self.pre.shape[0]

    def take(self, idx) -> "SplitArrays":
        return SplitArrays(self.pre[idx], self.post[idx], self.mask[idx], [self.ids[i] for i in idx])


def split_arrays(dataset: Dataset, split: str) -> SplitArrays:
    return SplitArrays(*dataset.arrays(split))


@dataclass
class TrainResult:
    best_state: dict
    records: list[EpochRecord]
    best_epoch: int
    stopped_early: bool


# ---------------------------------------------------------------- forward helpers


class _FeatureCache:
    """Precomputed encoder outputs, valid while no encoder parameter trains."""

    def __init__(self, model: SegModel, data: SplitArrays, batch_size: int):
        zp, zq = [], []
        with no_grad():
            for idx in batch_indices(len(data), batch_size):
                zp.append(model.encoder(data.pre[idx]).data)
                zq.append(model.encoder(data.post[idx]).data)
        self.pre = np.concatenate(zp)
        self.post = np.concatenate(zq)


def _logits(model: SegModel, data: SplitArrays, idx, training: bool, rng, cache: _FeatureCache | None) -> Tensor:
    if cache is not None:
        return decode_and_fuse(model.decoder, Tensor(cache.pre[idx]), Tensor(cache.post[idx]), model.config.grid)
    return model(data.pre[idx], data.post[idx], training, rng)


def predict_logits(model: SegModel, data: SplitArrays, batch_size: int = 8,
                   cache: _FeatureCache | None = None) -> np.ndarray:
    out = []
    with no_grad():
        for idx in batch_indices(len(data), batch_size):
            out.append(_logits(model, data, idx, False, None, cache).data)
    return np.concatenate(out)


def _encoder_trains(model: SegModel) -> bool:
    return any(p.requires_grad for p in model.encoder.parameters())


# ---------------------------------------------------------------- training


def train(model: SegModel, train_data: SplitArrays, val_data: SplitArrays, cfg: TrainConfig,
          loss_cfg: LossConfig = LossConfig(), cache_features: bool = True) -> TrainResult:
    """Fit ``model`` with its current strategy; the best-validation weights are restored at the end."""
    if len(train_data) == 0 or len(val_data) == 0:
        raise UsageError("train and val splits must be non-empty")
    params = model.trainable_parameters()
    if not params:
        raise UsageError("model has no trainable parameters")
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    frozen_encoder = not _encoder_trains(model)
    tcache = _FeatureCache(model, train_data, cfg.batch_size) if (frozen_encoder and cache_features) else None
    vcache = _FeatureCache(model, val_data, cfg.batch_size) if (frozen_encoder and cache_features) else None

    opt = OptimizerState()
    sched = PlateauScheduler(cfg.lr, cfg.sched_factor, cfg.sched_patience)
    lr = cfg.lr
    records: list[EpochRecord] = []
    history: list[float] = []
    best_loss = math.inf
    best_state = model.state_dict()
    best_epoch = 0
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_data))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            model.zero_grad()
            logits = _logits(model, train_data, idx, True, dropout_rng, tcache)
            loss = combined_loss(logits, train_data.mask[idx][:, None].astype(np.float64), loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(
                    f"non-finite loss {value} at epoch {epoch}, batch {b}, lr {lr:g}", epoch=epoch, batch=b, lr=lr
                )
            T.backward(loss)
            adam_step(params, opt, cfg, lr)
            total += value * len(idx)
        train_loss = total / len(train_data)

        val_logits = predict_logits(model, val_data, cfg.batch_size, vcache)
        val_loss = combined_loss(Tensor(val_logits), val_data.mask[:, None].astype(np.float64), loss_cfg).item()
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}", epoch=epoch, lr=lr)
        metrics = MetricsReport.from_counts(confusion_counts(threshold_logits(val_logits)[:, 0], val_data.mask))
        records.append(EpochRecord(epoch, train_loss, val_loss, lr, metrics, time.perf_counter() - t0))
        log.info("epoch %d train %.4f val %.4f f1 %.4f lr %.2e", epoch, train_loss, val_loss, metrics.f1, lr)
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = model.state_dict()
            best_epoch = epoch
        history.append(val_loss)
        lr = sched.step(val_loss)
        if early_stop(history, cfg.early_stop_patience):
            stopped = True
            break
    model.load_state_dict(best_state)
    return TrainResult(best_state, records, best_epoch, stopped)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    report: MetricsReport
    per_sample: list[tuple[str, MetricsReport]]
    predictions: np.ndarray  # [N, H, W] uint8


def evaluate(model: SegModel, data: SplitArrays, batch_size: int = 8, threshold: float = 0.5) -> EvalResult:
    """Aggregate metrics from summed confusion counts (dropout off)."""
    if len(data) == 0:
        raise UsageError("cannot evaluate an empty split")
    logits = predict_logits(model, data, batch_size)
    preds = threshold_logits(logits, threshold)[:, 0]
    total = ConfusionCounts()
    per = []
    for i, sid in enumerate(data.ids):
        c = confusion_counts(preds[i], data.mask[i])
        total = total + c
        per.append((sid, MetricsReport.from_counts(c)))
    return EvalResult(MetricsReport.from_counts(total), per, preds)


# ---------------------------------------------------------------- MAE pretraining


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 20
    mask_ratio: float = 0.75
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    warmup_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs < 0:
            raise ConfigurationError("warmup_epochs must be >= 0")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("epochs, batch_size and lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class MaeHead:
    """Learned mask token + linear pixel-reconstruction head; discarded after pretraining."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.mask_token = parameter(rng.normal(0.0, 0.02, size=cfg.d_model))
        self.head = Linear(cfg.d_model, cfg.patch_dim, rng)

    def named_parameters(self):
        yield "mask_token", self.mask_token
        yield from self.head.named_parameters("head.")


def random_patch_mask(rng: np.random.Generator, batch: int, n_patches: int, ratio: float) -> np.ndarray:
    n_mask = max(1, int(round(ratio * n_patches)))
    m = np.zeros((batch, n_patches))
    for i in range(batch):
        m[i, rng.permutation(n_patches)[:n_mask]] = 1.0
    return m


def mae_loss(encoder: Encoder, head: MaeHead, images: np.ndarray, patch_mask: np.ndarray) -> Tensor:
    target = patchify(images, encoder.config.patch_size)
    z = encoder(images, patch_mask=patch_mask, mask_token=head.mask_token)
    pred = head.head(z)
    return T.mse(pred, target, weights=patch_mask[..., None])


def mae_pretrain(encoder: Encoder, images: np.ndarray, mask_ratio: float = 0.75, epochs: int = 20,
                 cfg: PretrainConfig | None = None) -> tuple[Encoder, list[float]]:
    """Masked-patch reconstruction pretraining; returns the encoder and per-epoch mean loss.

    Masked patches have their embedding replaced by a learned token before the
    position encoding is added; a linear head regresses the raw pixels of each
    patch and only masked patches enter the MSE.
    """
    if cfg is None:
        if not 0.0 < mask_ratio < 1.0:
            raise ConfigurationError(f"mask_ratio must be in (0, 1), got {mask_ratio}")
        cfg = PretrainConfig(epochs=epochs, mask_ratio=mask_ratio)
    mask_ratio, epochs = cfg.mask_ratio, cfg.epochs
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise UsageError(f"expected a non-empty [N, C, H, W] image stack, got shape {images.shape}")
    ss = np.random.SeedSequence([cfg.seed, 0x3AE])
    init_rng, order_rng, mask_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    head = MaeHead(encoder.config, init_rng)
    encoder.set_trainable(True)
    params = list(encoder.named_parameters("encoder.")) + [(f"mae.{n}", p) for n, p in head.named_parameters()]
    tcfg = TrainConfig(lr=cfg.lr, weight_decay=cfg.weight_decay, batch_size=cfg.batch_size, seed=cfg.seed)
    opt = OptimizerState()
    history = []
    steps_per_epoch = -(-len(images) // cfg.batch_size)
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    for epoch in range(1, epochs + 1):
        total = 0.0
        for idx in batch_indices(len(images), cfg.batch_size, int(order_rng.integers(2**31))):
            # linear warmup, then constant
            lr = cfg.lr * min(1.0, (opt.t + 1) / warmup_steps) if warmup_steps else cfg.lr
            for _, p in params:
                p.grad = None
            pm = random_patch_mask(mask_rng, len(idx), encoder.config.seq_len, mask_ratio)
            loss = mae_loss(encoder, head, images[idx], pm)
            if not math.isfinite(loss.item()):
                raise NumericalError(f"non-finite MAE loss at epoch {epoch}", epoch=epoch, lr=cfg.lr)
            T.backward(loss)
            adam_step(params, opt, tcfg, lr)
            total += loss.item() * len(idx)
        history.append(total / len(images))
        log.info("mae epoch %d loss %.4f", epoch, history[-1])
    for _, p in encoder.named_parameters():
        p.grad = None
    return encoder, history


# ---------------------------------------------------------------- memory estimate


def estimate_memory(cfg: EncoderConfig, strategy: Strategy, batch_size: int = 1, bytes_per_value: int = 4,
                    trainable: int | None = None, total_params: int | None = None) -> dict:
    """Rough training-memory estimate in bytes (weights, grads, Adam moments, stored activations).

    Activations count what reverse mode must keep for both snapshots: per block the
    qkv projection, attention scores and probabilities, context, MLP hidden and
    residual streams. With a frozen encoder nothing inside it is stored.
    """
    from .lora import count_trainable

    inv_total = total_params
    if inv_total is None:
        inv_total = count_trainable(_inventory(cfg), Strategy("full")).total
    if trainable is None:
        trainable = count_trainable(_inventory(cfg), strategy).total
    b, n, d, h = batch_size, cfg.seq_len, cfg.d_model, cfg.n_heads
    per_block = b * (3 * n * d + 2 * h * n * n + n * d + 2 * cfg.mlp_ratio * n * d + 4 * n * d)
    encoder_acts = 0 if strategy.kind == "frozen" else 2 * cfg.n_layers * per_block
    attention_maps = 0 if strategy.kind == "frozen" else 2 * cfg.n_layers * b * 2 * h * n * n
    size = cfg.image_size
    dec_c = [d // 2, d // 4, d // 8, d // 16, d // 32]
    grid = cfg.grid
    dec_acts = 2 * b * (dec_c[0] * grid**2 + dec_c[1] * grid**2 + dec_c[2] * (2 * grid) ** 2
                        + dec_c[3] * (4 * grid) ** 2 + dec_c[4] * size**2) + b * size * size
    out = {
        "weights": inv_total * bytes_per_value,
        "gradients": trainable * bytes_per_value,
        "adam_moments": 2 * trainable * bytes_per_value,
        "encoder_activations": encoder_acts * bytes_per_value,
        "of_which_attention_maps": attention_maps * bytes_per_value,
        "decoder_activations": dec_acts * bytes_per_value,
    }
    out["total"] = sum(v for k, v in out.items() if k != "of_which_attention_maps")
    return out


def _inventory(cfg: EncoderConfig):
    from .model import model_inventory

    return model_inventory(cfg)
