"""Pretraining, adapter fine-tuning, evaluation, and gradient-ratio analysis."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import (METHODS, AdapterParams, ModelLayout, adapter_init, layout_for_method)
from .checkpoint import save_checkpoint
from .errors import ConfigError, ContractError, NumericError
from .optim import AdamW
from .scheduler import OpRecord, ScheduleConfig, ScheduleState, step as schedule_step
from .sfs import SfsReport, sfs_report
from .tasks import Dataset, make_corpus
from .transformer import BaseConfig, BaseWeights, base_init, mlm_logits, model_forward

log = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 32
    n_seqs: int = 1024
    mask_prob: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.n_seqs < 1:
            raise ConfigError("pretrain epochs >= 0, batch_size >= 1, n_seqs >= 1 required")
        if not 0 < self.mask_prob < 1:
            raise ConfigError("mask_prob must be in (0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "lor2c"
    rank: int = 8
    learning_rate: float = 4e-4
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    record_grads: bool = False
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    scaling: float = 1.0
    lora_alpha: float | None = None
    linear_decay: bool = False
    eval_batch_size: int = 256
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.rank < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("rank, batch_size and epochs must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.schedule.total_epochs != self.epochs:
            object.__setattr__(self, "schedule", replace(self.schedule, total_epochs=self.epochs))
        if self.method == "imlor2c" and self.schedule.enabled and self.epochs < 2:
            raise ConfigError("restructuring needs epochs >= 2")


@dataclass
class TrainResult:
    metrics: list[dict]
    timings: list[float]
    layout: ModelLayout
    adapters: AdapterParams
    op_log: list[OpRecord]
    sfs_reports: list[SfsReport]
    predictions: np.ndarray
    snapshots: list[tuple[ModelLayout, dict[str, np.ndarray]]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# pretraining


def round_to_f32(weights: BaseWeights) -> BaseWeights:
    for t in weights.tensors.values():
        t.data = t.data.astype(np.float32).astype(np.float64)
    return weights


def _mask_batch(seqs: np.ndarray, mask_prob: float, mask_id: int, rng: np.random.Generator):
    valid = seqs >= 0
    chosen = (rng.random(seqs.shape) < mask_prob) & valid
    # guarantee one prediction target per sequence
    for i in np.flatnonzero(~chosen.any(axis=1)):
        chosen[i, rng.choice(np.flatnonzero(valid[i]))] = True
    inputs = np.where(chosen, mask_id, seqs)
    positions = np.flatnonzero(chosen.ravel())
    return inputs, positions, seqs.ravel()[positions]


def pretrain(cfg: BaseConfig, pcfg: PretrainConfig) -> tuple[BaseWeights, list[dict]]:
    """Masked-token pretraining of all base weights except the classifier head.

    Returns the frozen base (values rounded to float32, the checkpoint dtype)
    and one loss record per epoch.
    """
    w = base_init(cfg)
    corpus = make_corpus(cfg.vocab_size, cfg.max_seq_len, pcfg.n_seqs, pcfg.seed)
    named = [(n, t) for n, t in w.tensors.items() if n != "head"]
    for _, t in named:
        t.requires_grad = True
    opt = AdamW(named, lr=pcfg.learning_rate)
    history = []
    for epoch in range(pcfg.epochs):
        rng = np.random.default_rng([pcfg.seed, epoch, 11])
        order = rng.permutation(len(corpus))
        losses = []
        for start in range(0, len(order), pcfg.batch_size):
            seqs = corpus[order[start:start + pcfg.batch_size]]
            inputs, positions, targets = _mask_batch(seqs, pcfg.mask_prob, cfg.mask_token, rng)
            loss = ad.cross_entropy(mlm_logits(inputs, positions, w), targets)
            ad.backward(loss, leaves=[t for _, t in named])
            opt.step()
            losses.append(loss.item())
        history.append({"epoch": epoch, "mlm_loss": float(np.mean(losses))})
        log.info("pretrain epoch %d mlm loss %.4f", epoch, history[-1]["mlm_loss"])
    return round_to_f32(w.freeze()), history


# ---------------------------------------------------------------------------
# fine-tuning


def evaluate(data: Dataset, w: BaseWeights, layout: ModelLayout | None = None,
             adapters: AdapterParams | None = None, batch_size: int = 256) -> tuple[float, np.ndarray]:
    """Accuracy and argmax predictions over ``data``."""
    preds = []
    with ad.no_grad():
        for s in range(0, len(data), batch_size):
            logits = model_forward(data.tokens[s:s + batch_size], layout, w, adapters)
            preds.append(np.argmax(logits.data, axis=1))
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return float(np.mean(pred == data.labels)) if len(pred) else 0.0, pred


def _grad_stats(layout: ModelLayout, adapters: AdapterParams, n_layers: int,
                sums: np.ndarray, counts: np.ndarray) -> None:
    for m in layout.modules:
        tensors = adapters.module_tensors(m)
        s = sum(float(np.abs(t.grad).sum()) for t in tensors.values() if t.grad is not None)
        c = sum(t.size for t in tensors.values())
        for layer in m.layers:
            sums[layer] += s
            counts[layer] += c


def _feature_probe(layout: ModelLayout, w: BaseWeights, adapters: AdapterParams, tokens: np.ndarray) -> dict:
    captured: dict = {}
    with ad.no_grad():
        model_forward(tokens, layout, w, adapters, capture=captured)
    pad = tokens >= 0
    return {k: (v.data, pad) for k, v in captured.items()}


def _report(cfg: TrainConfig, layout: ModelLayout, adapters: AdapterParams, epoch: int,
            w: BaseWeights, probe: np.ndarray, state: ScheduleState) -> SfsReport:
    sc = cfg.schedule
    features = None
    if sc.metric_source == "features":
        features = _feature_probe(layout, w, adapters, probe)
    return sfs_report(layout, adapters, epoch, sc.k, sc.metric_source, features,
                      excluded_layers=state.excluded_layers, max_span=sc.max_span)


def adapter_meta(layout: ModelLayout, cfg: BaseConfig, epoch: int | None = None) -> dict:
    meta = {"kind": "adapters", "layout": layout.to_dict(), "d_model": cfg.d_model,
            "n_layers": cfg.n_layers}
    if epoch is not None:
        meta["epoch"] = epoch
    return meta


def train(cfg: TrainConfig, w: BaseWeights, train_set: Dataset, eval_set: Dataset,
          out_dir: str | Path | None = None, keep_snapshots: bool = False) -> TrainResult:
    """Fine-tune adapters on a frozen base; one metrics record per epoch.

    With ``out_dir`` set, each epoch's adapters are checkpointed under
    ``snapshots/`` so a divergence leaves the last good state on disk.
    """
    bc = w.cfg
    if not w.frozen:
        raise ContractError("fine-tuning requires a frozen base")
    if cfg.rank > bc.d_model:
        raise ConfigError(f"rank {cfg.rank} exceeds d_model {bc.d_model}")
    if train_set.tokens.max() >= bc.vocab_size - 1:
        raise ConfigError("task tokens collide with the reserved mask id; enlarge base vocab_size")
    if train_set.labels.max() >= bc.n_classes or eval_set.labels.max() >= bc.n_classes:
        raise ConfigError(f"task labels exceed base n_classes={bc.n_classes}")

    L = bc.n_layers
    layout = layout_for_method(cfg.method, L, cfg.rank, cfg.scaling, cfg.lora_alpha).validate(L)
    adapters = adapter_init(layout, bc.d_model, cfg.seed)
    opt = AdamW(adapters.named(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay)
    state = ScheduleState()
    residual = cfg.method != "lora"
    probe = eval_set.tokens[:cfg.eval_batch_size]
    out = Path(out_dir) if out_dir is not None else None

    n = len(train_set)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    global_step = 0
    metrics, timings, reports, snapshots = [], [], [], []
    pred = np.zeros(0, dtype=np.int64)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums, counts = np.zeros(L), np.zeros(L)
        losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            logits = model_forward(train_set.tokens[idx], layout, w, adapters)
            loss = ad.cross_entropy(logits, train_set.labels[idx])
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}, step {global_step}")
            ad.backward(loss, leaves=adapters.trainable())
            if cfg.record_grads:
                _grad_stats(layout, adapters, L, sums, counts)
            lr = cfg.learning_rate
            if cfg.linear_decay:
                lr *= 1.0 - global_step / total_steps
            opt.step(lr)
            global_step += 1
            losses.append(loss.item())

        acc, pred = evaluate(eval_set, w, layout, adapters, cfg.eval_batch_size)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "eval_acc": acc,
                  "trainable_params": adapters.count()}
        if cfg.record_grads:
            record["grad_mean_abs"] = [float(x) for x in np.divide(sums, counts, out=np.zeros(L), where=counts > 0)]

        if residual:
            report = _report(cfg, layout, adapters, epoch, w, probe, state)
            reports.append(report)
            if cfg.method == "imlor2c" and cfg.schedule.enabled:
                state, layout, adapters, ops = schedule_step(state, layout, adapters, epoch, report,
                                                             cfg.schedule, cfg.seed)
                if ops:
                    opt.set_params(adapters.named())
                record["ops"] = [op.op for op in ops]
        record["layout"] = layout.describe()
        record["trainable_params_after"] = adapters.count()
        metrics.append(record)
        timings.append(time.perf_counter() - t0)
        if keep_snapshots:
            snapshots.append((layout, adapters.snapshot()))
        if out is not None:
            save_checkpoint(out / "snapshots" / f"epoch_{epoch:03d}", adapters.snapshot(),
                            adapter_meta(layout, bc, epoch))
        log.info("epoch %d loss %.4f acc %.4f params %d", epoch, record["train_loss"], acc, adapters.count())

    return TrainResult(metrics, timings, layout, adapters, state.log, reports, pred, snapshots)


def first_batch_loss(cfg: TrainConfig, w: BaseWeights, train_set: Dataset,
                     layout: ModelLayout | None, adapters: AdapterParams | None) -> float:
    order = np.random.default_rng([cfg.seed, 0]).permutation(len(train_set))[:cfg.batch_size]
    with ad.no_grad():
        logits = model_forward(train_set.tokens[order], layout, w, adapters)
        return ad.cross_entropy(logits, train_set.labels[order]).item()


# ---------------------------------------------------------------------------
# gradient-ratio analysis


def grad_ratio_table(metrics_num: Sequence[dict], metrics_den: Sequence[dict]) -> list[tuple[int, int, float | None]]:
    """``(epoch, layer, num/den)`` of per-layer mean |grad|; None where den is 0."""
    if len(metrics_num) != len(metrics_den):
        raise ContractError(f"runs differ in epoch count: {len(metrics_num)} vs {len(metrics_den)}")
    rows = []
    for a, b in zip(metrics_num, metrics_den):
        if "grad_mean_abs" not in a or "grad_mean_abs" not in b:
            raise ContractError("both runs need record_grads enabled")
        ga, gb = a["grad_mean_abs"], b["grad_mean_abs"]
        if len(ga) != len(gb):
            raise ContractError(f"runs differ in layer count: {len(ga)} vs {len(gb)}")
        for layer, (x, y) in enumerate(zip(ga, gb)):
            rows.append((a["epoch"], layer, x / y if y != 0 else None))
    return rows


def epoch_mean_ratio(rows: Sequence[tuple[int, int, float | None]], layer: int) -> float:
    vals = [r for _, l, r in rows if l == layer and r is not None]
    if not vals:
        raise ContractError(f"no defined ratios for layer {layer}")
    return float(np.mean(vals))


def write_metrics(path, metrics: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def config_dict(obj) -> dict:
    return asdict(obj)
