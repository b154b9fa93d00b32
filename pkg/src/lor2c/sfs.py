"""Singular values of low-rank adapter products and the SFS concentration score."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .adapters import AdapterModule, AdapterParams, ModelLayout
from .errors import ContractError, NumericError

METRIC_SOURCES = ("weights", "features")
INJECT_POLICIES = ("lowest_sfs", "highest_sfs")


def singular_values_lowrank(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Singular values of ``B @ A`` (``B: [m, r]``, ``A: [r, n]``), descending, length ``r``.

    Both factors are QR-reduced so only an ``r x r`` core is decomposed.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or B.shape[1] != A.shape[0]:
        raise ContractError(f"factor shapes do not chain: B {B.shape} @ A {A.shape}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NumericError("non-finite entries in adapter factors")
    r = A.shape[0]
    _, rb = np.linalg.qr(B)
    _, ra = np.linalg.qr(A.T)
    core = rb @ ra.T
    sv = np.linalg.svd(core, compute_uv=False)
    out = np.zeros(r)
    n = min(r, sv.size)
    out[:n] = np.sort(sv)[::-1][:n]
    return np.maximum(out, 0.0)


def sfs(singular_values: Sequence[float], k: int) -> float:
    """``1 - (sum of top k) / (sum of all)``; an all-zero spectrum scores 0."""
    lam = np.asarray(singular_values, dtype=np.float64)
    n = lam.size
    if not 1 <= k <= n:
        raise ContractError(f"k={k} outside [1, {n}]")
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ContractError("singular values must be finite and non-negative")
    if np.any(np.diff(lam) > 0):
        raise ContractError("singular values must be sorted in descending order")
    cs = np.cumsum(lam)
    total = cs[-1]
    if total == 0:
        return 0.0
    return float(min(1.0, max(0.0, 1.0 - cs[k - 1] / total)))


def default_k(rank: int) -> int:
    return max(1, math.ceil(rank / 2))


@dataclass(frozen=True)
class ModuleSfs:
    module_id: str
    kind: str
    span_start: int
    span_len: int
    singular_values: tuple[float, ...]
    sfs: float

    @property
    def span_end(self) -> int:
        return self.span_start + self.span_len - 1


@dataclass
class SfsReport:
    epoch: int
    modules: list[ModuleSfs]
    pair_scores: list[tuple[int, int, float]] = field(default_factory=list)

    def by_start(self) -> dict[int, ModuleSfs]:
        return {m.span_start: m for m in self.modules}

    def by_id(self) -> dict[str, ModuleSfs]:
        return {m.module_id: m for m in self.modules}


def pair_scores(modules: Sequence[ModuleSfs], excluded_layers: Iterable[int] = (),
                excluded_pairs: Iterable[tuple[int, int]] = (),
                max_span: int | None = None) -> list[tuple[int, int, float]]:
    """``(start_a, start_b, sfs_a + sfs_b)`` for each pair of touching LoR2C modules.

    A pair is dropped if either span covers an excluded layer, if the pair is
    listed in ``excluded_pairs``, or if the merged span would exceed ``max_span``.
    """
    excluded_layers = set(excluded_layers)
    excluded_pairs = set(map(tuple, excluded_pairs))
    mods = sorted((m for m in modules if m.kind == "lor2c"), key=lambda m: m.span_start)
    out = []
    for a, b in zip(mods, mods[1:]):
        if a.span_end + 1 != b.span_start:
            continue
        if (a.span_start, b.span_start) in excluded_pairs:
            continue
        layers = set(range(a.span_start, b.span_end + 1))
        if layers & excluded_layers:
            continue
        if max_span is not None and a.span_len + b.span_len > max_span:
            continue
        out.append((a.span_start, b.span_start, a.sfs + b.sfs))
    return out


def select_merge_pair(scores: Sequence[tuple[int, int, float]]) -> tuple[int, int] | None:
    if not scores:
        return None
    t, u, _ = min(scores, key=lambda s: (s[2], s[0]))
    return t, u


def select_inject_target(modules: Sequence[ModuleSfs], mask: Iterable[str | int] = (),
                         policy: str = "lowest_sfs") -> str | None:
    """Id of the extremal-SFS single-layer LoR2C module not in ``mask``.

    ``mask`` may hold module ids or layer indices. Ties go to the lowest layer.
    """
    if policy not in INJECT_POLICIES:
        raise ContractError(f"unknown inject policy {policy!r}")
    mask = set(mask)
    cands = [m for m in modules
             if m.kind == "lor2c" and m.span_len == 1
             and m.module_id not in mask and m.span_start not in mask]
    if not cands:
        return None
    sign = 1.0 if policy == "lowest_sfs" else -1.0
    return min(cands, key=lambda m: (sign * m.sfs, m.span_start)).module_id


def module_singular_values(module: AdapterModule, adapters: AdapterParams,
                           source: str = "weights", features: Mapping | None = None) -> np.ndarray:
    A, B = adapters.factors(module)
    if source == "weights":
        return singular_values_lowrank(A.data, B.data)
    if source != "features":
        raise ContractError(f"unknown metric source {source!r}")
    if features is None or module.id not in features:
        raise ContractError(f"feature mode needs captured inputs for {module.id}")
    h_in, pad_mask = features[module.id]
    rows = np.asarray(h_in)[np.asarray(pad_mask)]
    # residual-path outputs s * (h B) A stacked over the batch
    return singular_values_lowrank(A.data, module.scaling * (rows @ B.data))


def sfs_report(layout: ModelLayout, adapters: AdapterParams, epoch: int, k: int | None = None,
               source: str = "weights", features: Mapping | None = None,
               excluded_layers: Iterable[int] = (), max_span: int | None = None) -> SfsReport:
    mods = []
    for m in layout.residual_modules():
        lam = module_singular_values(m, adapters, source, features)
        kk = min(k if k is not None else default_k(m.rank), lam.size)
        mods.append(ModuleSfs(m.id, m.kind, m.span_start, m.span_len, tuple(float(x) for x in lam), sfs(lam, kk)))
    return SfsReport(epoch, mods, pair_scores(mods, excluded_layers, max_span=max_span))


def per_layer_spectra(report: SfsReport) -> list[np.ndarray]:
    """One spectrum per covered layer, merged spans repeated for each of their layers."""
    out = []
    for m in sorted(report.modules, key=lambda m: m.span_start):
        out.extend(np.asarray(m.singular_values) for _ in range(m.span_len))
    return out


def sv_trajectory(history: Sequence[tuple[int, Sequence[Sequence[float]]]], top_m: int) -> list[tuple[int, int, float]]:
    """Rows ``(epoch, index, mean singular value across layers)``, index from 1."""
    if not history:
        raise ContractError("singular-value history is empty")
    if top_m < 1:
        raise ContractError("top_m must be >= 1")
    lengths = {len(lam) for _, layers in history for lam in layers}
    if any(len(layers) == 0 for _, layers in history) or len(lengths) != 1:
        raise ContractError("ragged singular-value history: every layer needs the same rank")
    r = lengths.pop()
    rows = []
    for epoch, layers in history:
        mat = np.asarray(layers, dtype=np.float64)
        means = mat.mean(axis=0)
        for i in range(min(top_m, r)):
            rows.append((int(epoch), i + 1, float(means[i])))
    return rows


def write_sv_trajectory(path, rows: Sequence[tuple[int, int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "index", "mean_value"])
        for epoch, idx, value in rows:
            w.writerow([epoch, idx, repr(value)])


def sfs_report_rows(report: SfsReport) -> list[list]:
    return [[report.epoch, m.module_id, m.span_start, m.span_len, repr(m.sfs), *map(repr, m.singular_values)]
            for m in report.modules]


def write_sfs_reports(path, reports: Sequence[SfsReport]) -> None:
    r = max((len(m.singular_values) for rep in reports for m in rep.modules), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "module_id", "span_start", "span_len", "sfs", *[f"lambda_{i + 1}" for i in range(r)]])
        for rep in reports:
            w.writerows(sfs_report_rows(rep))


def read_sfs_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        lam = [float(v) for k, v in row.items() if k.startswith("lambda_") and v not in ("", None)]
        out.append({"epoch": int(row["epoch"]), "module_id": row["module_id"],
                    "span_start": int(row["span_start"]), "span_len": int(row["span_len"]),
                    "sfs": float(row["sfs"]), "singular_values": lam})
    return out
