"""Run directories and on-disk artifacts for pretraining, fine-tuning, grids and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import shutil
from pathlib import Path
from typing import Sequence

from .adapters import ModelLayout, param_count
from .autodiff import Tensor
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .config import (ExperimentConfig, config_hash, dump_yaml, finetune_payload, pretrain_payload)
from .errors import ConfigError, ContractError
from .sfs import read_sfs_csv, sv_trajectory, write_sfs_reports
from .tasks import make_task
from .training import (adapter_meta, grad_ratio_table, pretrain, read_metrics, train,
                       write_metrics)
from .transformer import (PARAM_COUNT_FORMULA, TENSOR_COUNT_FORMULA, BaseConfig, BaseWeights,
                          base_param_count, base_tensor_count, base_tensor_shapes)

log = logging.getLogger(__name__)

BASE_CKPT = "base"
ADAPTER_CKPT = "adapters"


def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists():
        if not force:
            raise ConfigError(f"run directory {path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _write_config(run_dir: Path, cfg: ExperimentConfig) -> None:
    (run_dir / "config.yaml").write_text(dump_yaml(cfg))


def pretrain_dir(cfg: ExperimentConfig, root: Path | None = None) -> Path:
    root = root if root is not None else cfg.output_root()
    return root / f"pretrain-{config_hash(pretrain_payload(cfg))}-s{cfg.base.seed}"


def finetune_dir(cfg: ExperimentConfig, root: Path | None = None) -> Path:
    root = root if root is not None else cfg.output_root()
    return root / f"finetune-{config_hash(finetune_payload(cfg))}-s{cfg.train.seed}"


def grid_dir(cfg: ExperimentConfig, root: Path | None = None) -> Path:
    root = root if root is not None else cfg.output_root()
    payload = dict(finetune_payload(cfg), grid=cfg.to_dict()["grid"])
    return root / f"grid-{config_hash(payload)}-s{cfg.train.seed}"


# ---------------------------------------------------------------------------
# base model


def base_meta(cfg: BaseConfig) -> dict:
    from dataclasses import asdict
    return {"kind": "base", "config": asdict(cfg), "param_count": base_param_count(cfg),
            "param_count_formula": PARAM_COUNT_FORMULA, "tensor_count": base_tensor_count(cfg),
            "tensor_count_formula": TENSOR_COUNT_FORMULA}


def save_base(prefix, w: BaseWeights) -> None:
    save_checkpoint(prefix, w.snapshot(), base_meta(w.cfg))


def load_base(prefix) -> BaseWeights:
    arrays, meta = load_checkpoint(prefix)
    if meta.get("kind") != "base":
        raise ContractError(f"{prefix} is not a base checkpoint")
    cfg = BaseConfig(**meta["config"])
    shapes = base_tensor_shapes(cfg)
    if set(arrays) != set(shapes):
        raise ContractError(f"{prefix}: tensor names do not match the base layout")
    tensors = {}
    for name, shape in shapes.items():
        if arrays[name].shape != shape:
            raise ContractError(f"{prefix}: {name} has shape {arrays[name].shape}, expected {shape}")
        tensors[name] = Tensor(arrays[name])
    return BaseWeights(cfg, tensors).freeze()


def run_pretrain(cfg: ExperimentConfig, force: bool = False, root: Path | None = None) -> Path:
    run_dir = _prepare_dir(pretrain_dir(cfg, root), force)
    _write_config(run_dir, cfg)
    w, history = pretrain(cfg.base, cfg.pretrain)
    save_base(run_dir / BASE_CKPT, w)
    write_metrics(run_dir / "pretrain_metrics.jsonl", history)
    return run_dir


# ---------------------------------------------------------------------------
# fine-tuning


def _resolve_base(cfg: ExperimentConfig, base: str | Path | None, root: Path | None) -> BaseWeights:
    prefix = Path(base) if base is not None else pretrain_dir(cfg, root) / BASE_CKPT
    if not prefix.with_suffix(".json").is_file():
        raise ConfigError(f"base checkpoint {prefix}.json not found; run `lor2c pretrain` with this config first")
    w = load_base(prefix)
    if w.cfg != cfg.base:
        raise ConfigError(f"base checkpoint {prefix} was built with a different [base] config")
    return w


def write_finetune_outputs(run_dir: Path, cfg: ExperimentConfig, result) -> None:
    write_metrics(run_dir / "metrics.jsonl", result.metrics)
    with open(run_dir / "timings.jsonl", "w") as fh:
        for epoch, secs in enumerate(result.timings):
            fh.write(json.dumps({"epoch": epoch, "seconds": secs}) + "\n")
    with open(run_dir / "oplog.jsonl", "w") as fh:
        for rec in result.op_log:
            fh.write(rec.to_json() + "\n")
    if result.sfs_reports:
        write_sfs_reports(run_dir / "sfs.csv", result.sfs_reports)
    _, eval_set = make_task(cfg.task)
    with open(run_dir / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "prediction"])
        for i, (y, p) in enumerate(zip(eval_set.labels, result.predictions)):
            w.writerow([i, int(y), int(p)])
    save_checkpoint(run_dir / ADAPTER_CKPT, result.adapters.snapshot(),
                    adapter_meta(result.layout, cfg.base))


def run_finetune(cfg: ExperimentConfig, force: bool = False, root: Path | None = None,
                 base: str | Path | None = None, run_dir: Path | None = None) -> Path:
    if cfg.train.rank > cfg.base.d_model:
        raise ConfigError(f"rank {cfg.train.rank} is incompatible with d_model {cfg.base.d_model}")
    w = _resolve_base(cfg, base, root)
    run_dir = _prepare_dir(run_dir or finetune_dir(cfg, root), force)
    _write_config(run_dir, cfg)
    train_set, eval_set = make_task(cfg.task)
    result = train(cfg.train, w, train_set, eval_set, out_dir=run_dir)
    write_finetune_outputs(run_dir, cfg, result)
    return run_dir


def run_grid(cfg: ExperimentConfig, force: bool = False, root: Path | None = None,
             base: str | Path | None = None) -> Path:
    """IMLoR2C sweep over ``grid.m_values x grid.i_values``; final eval accuracy per cell."""
    gdir = _prepare_dir(grid_dir(cfg, root), force)
    _write_config(gdir, cfg)
    rows = []
    for m in cfg.grid.m_values:
        for i in cfg.grid.i_values:
            cell_cfg = cfg.with_overrides(**{"train.method": "imlor2c", "schedule.m_max": m, "schedule.i_max": i})
            cell_dir = gdir / "cells" / f"m{m}_i{i}"
            status, acc, params = "ok", "", ""
            try:
                run_finetune(cell_cfg, force=True, root=root, base=base, run_dir=cell_dir)
                last = read_metrics(cell_dir / "metrics.jsonl")[-1]
                acc, params = repr(last["eval_acc"]), last["trainable_params_after"]
            except Exception as exc:  # a failed cell is recorded, the sweep continues
                log.error("grid cell m=%d i=%d failed: %s", m, i, exc)
                status = f"failed: {exc}"
            rows.append((m, i, acc, params, status))
    with open(gdir / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m_max", "i_max", "eval_acc", "trainable_params", "status"])
        w.writerows(rows)
    lookup = {(m, i): acc for m, i, acc, _, _ in rows}
    with open(gdir / "grid_matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i_max\\m_max", *cfg.grid.m_values])
        for i in cfg.grid.i_values:
            w.writerow([i, *[lookup[(m, i)] for m in cfg.grid.m_values]])
    return gdir


def read_grid(gdir) -> list[dict]:
    with open(Path(gdir) / "grid.csv", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# reports

REPORT_KINDS = ("sfs", "sv-trajectory", "grad-ratio", "params")


class MissingRecording(ConfigError):
    pass


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingRecording(f"{path} not found; {hint}")
    return path


def _csv_text(header: Sequence, rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def sfs_history(run_dir: Path) -> list[tuple[int, list[list[float]]]]:
    """Per-epoch spectra, one per covered layer, from a run's recorded sfs.csv."""
    rows = read_sfs_csv(_need(run_dir / "sfs.csv", "SFS is recorded only for residual methods"))
    by_epoch: dict[int, list[dict]] = {}
    for r in rows:
        by_epoch.setdefault(r["epoch"], []).append(r)
    out = []
    for epoch in sorted(by_epoch):
        layers = []
        for r in sorted(by_epoch[epoch], key=lambda r: r["span_start"]):
            layers.extend([r["singular_values"]] * r["span_len"])
        out.append((epoch, layers))
    return out


def report(run_dirs: Sequence[str | Path], kind: str, top_m: int = 50) -> str:
    runs = [Path(p) for p in run_dirs]
    if not runs:
        raise ConfigError("report needs at least one run directory")
    for r in runs:
        if not r.is_dir():
            raise ConfigError(f"run directory {r} not found")
    if kind == "sfs":
        header, rows = None, []
        for r in runs:
            with open(_need(r / "sfs.csv", "SFS is recorded only for residual methods"), newline="") as fh:
                data = list(csv.reader(fh))
            if header is None or len(data[0]) > len(header):
                header = data[0]
            rows.extend([r.name, *row] for row in data[1:])
        return _csv_text(["run", *header], rows)
    if kind == "sv-trajectory":
        rows = []
        for r in runs:
            rows.extend([r.name, *row] for row in sv_trajectory(sfs_history(r), top_m))
        return _csv_text(["run", "epoch", "index", "mean_value"],
                         [[n, e, i, repr(v)] for n, e, i, v in rows])
    if kind == "grad-ratio":
        if len(runs) not in (1, 2):
            raise ConfigError("grad-ratio takes one run (against itself) or two (numerator, denominator)")
        hint = "re-run fine-tuning with train.record_grads=true"
        num = read_metrics(_need(runs[0] / "metrics.jsonl", hint))
        den = read_metrics(_need(runs[-1] / "metrics.jsonl", hint))
        if any("grad_mean_abs" not in m for m in num + den):
            raise MissingRecording(f"gradient statistics missing; {hint}")
        rows = grad_ratio_table(num, den)
        return _csv_text(["epoch", "layer", "ratio"],
                         [[e, l, "" if v is None else repr(v)] for e, l, v in rows])
    if kind == "params":
        rows = []
        for r in runs:
            metrics = read_metrics(_need(r / "metrics.jsonl", "run did not finish any epoch"))
            for m in metrics:
                prefix = r / "snapshots" / f"epoch_{m['epoch']:03d}"
                _need(prefix.with_suffix(".json"), "per-epoch adapter snapshots missing")
                snap = read_manifest(prefix)
                layout = ModelLayout.from_dict(snap["meta"]["layout"])
                counts = param_count(layout, snap["meta"]["d_model"])
                rows.append([r.name, m["epoch"], counts["lor2c"], counts["shared_lor2c"], counts["lora_qv"],
                             m["trainable_params_after"]])
        return _csv_text(["run", "epoch", "lor2c", "shared_lor2c", "lora_qv", "total"], rows)
    raise ConfigError(f"unknown report kind {kind!r}; expected one of {REPORT_KINDS}")
