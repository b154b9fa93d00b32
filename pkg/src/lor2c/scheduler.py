"""
Merge/inject restructuring driven by per-epoch SFS reports.

The cumulative number of merges the schedule asks for by (0-indexed) epoch e is

    T_M(e) = min(M_max, floor(e / (4 * M_max + eps)) + 1),   T_M = 0 if M_max = 0

and likewise for injections with I_max. At each epoch boundary the scheduler
performs at most one merge (first) and one injection, only inside the first
half of training; an unmet target is retried at later boundaries and dropped
once that window closes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .adapters import (AdapterParams, Lor2c, LoraQV, ModelLayout, init_module, injection_rank,
                       remove_module)
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .sfs import (INJECT_POLICIES, METRIC_SOURCES, SfsReport, pair_scores, select_inject_target,
                  select_merge_pair)

log = logging.getLogger(__name__)

ROUNDING_MODES = ("floor", "continuous")


@dataclass(frozen=True)
class ScheduleConfig:
    m_max: int = 0
    i_max: int = 0
    total_epochs: int = 30
    epsilon: float = 1e-9
    rounding: str = "floor"
    inject_policy: str = "lowest_sfs"
    k: int | None = None
    metric_source: str = "weights"
    max_span: int | None = None
    lora_scaling: float = 1.0

    def __post_init__(self):
        if self.m_max < 0 or self.i_max < 0:
            raise ConfigError("m_max and i_max must be >= 0")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if self.enabled and self.total_epochs < 2:
            raise ConfigError("restructuring needs at least 2 epochs (ops run in the first half)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.rounding not in ROUNDING_MODES:
            raise ConfigError(f"rounding must be one of {ROUNDING_MODES}")
        if self.inject_policy not in INJECT_POLICIES:
            raise ConfigError(f"inject_policy must be one of {INJECT_POLICIES}")
        if self.metric_source not in METRIC_SOURCES:
            raise ConfigError(f"metric_source must be one of {METRIC_SOURCES}")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.max_span is not None and self.max_span < 2:
            raise ConfigError("max_span must be >= 2 when set")
        for name, n in (("merges", self.m_max), ("injections", self.i_max)):
            done = completion_epoch(n, self.epsilon, self.rounding)
            if done is not None and done >= self.window:
                log.warning("schedule reaches %d %s only at epoch %d, after the restructuring window "
                            "(epochs < %d); later operations will be abandoned",
                            n, name, done, self.window)

    @property
    def enabled(self) -> bool:
        return self.m_max > 0 or self.i_max > 0

    @property
    def window(self) -> int:
        """Operations may fire at epoch boundaries ``e < window``."""
        return self.total_epochs // 2


def _target(epoch: int, n_max: int, eps: float, rounding: str) -> int:
    if n_max == 0:
        return 0
    ratio = epoch / (4 * n_max + eps)
    if rounding == "floor":
        target = math.floor(ratio) + 1
    else:
        # unrounded target: any fractional excess already asks for the next op
        target = math.ceil(ratio + 1)
    return min(n_max, target)


def schedule_targets(epoch: int, cfg: ScheduleConfig) -> tuple[int, int]:
    """Cumulative (merge, inject) operation counts requested by ``epoch``."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return (_target(epoch, cfg.m_max, cfg.epsilon, cfg.rounding),
            _target(epoch, cfg.i_max, cfg.epsilon, cfg.rounding))


def completion_epoch(n_max: int, eps: float = 1e-9, rounding: str = "floor") -> int | None:
    """First epoch at which the target reaches ``n_max``; None when disabled."""
    if n_max == 0:
        return None
    e = 0
    while _target(e, n_max, eps, rounding) < n_max:
        e += 1
    return e


@dataclass
class OpRecord:
    epoch: int
    op: str
    layers: list[int]
    sfs: dict[str, float]
    reason: str
    detail: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "OpRecord":
        return cls(**json.loads(line))


@dataclass
class ScheduleState:
    merges_done: int = 0
    injections_done: int = 0
    injected_layers: set[int] = field(default_factory=set)
    excluded_layers: set[int] = field(default_factory=set)
    window_closed: bool = False
    log: list[OpRecord] = field(default_factory=list)

    def copy(self) -> "ScheduleState":
        return replace(self, injected_layers=set(self.injected_layers),
                       excluded_layers=set(self.excluded_layers), log=list(self.log))

    def merge_excluded_pairs(self, layout: ModelLayout) -> set[tuple[int, int]]:
        """Touching LoR2C pairs currently barred by the injection exclusions."""
        mods = layout.lor2c_modules()
        out = set()
        for a, b in zip(mods, mods[1:]):
            if a.span_end + 1 == b.span_start and (set(a.layers) | set(b.layers)) & self.excluded_layers:
                out.add((a.span_start, b.span_start))
        return out


def apply_merge(layout: ModelLayout, adapters: AdapterParams, pair: tuple[int, int],
                report: SfsReport) -> tuple[ModelLayout, AdapterParams, str]:
    """Fuse the touching LoR2C modules starting at ``pair`` into one span.

    The surviving factors are copied from the higher-SFS module (ties: lower
    layer); the other module's factors are dropped. Returns the survivor's id.
    """
    starts = {m.span_start: m for m in layout.lor2c_modules()}
    a, b = starts.get(pair[0]), starts.get(pair[1])
    if a is None or b is None:
        raise ContractError(f"merge pair {pair} does not name two LoR2C modules")
    if a.span_end + 1 != b.span_start:
        raise ContractError(f"modules {a.id} and {b.id} do not touch")
    scores = report.by_id()
    if a.id not in scores or b.id not in scores:
        raise ContractError(f"SFS report lacks {a.id} or {b.id}")
    survivor = b if scores[b.id].sfs > scores[a.id].sfs else a
    merged = Lor2c(survivor.rank, a.span_start, a.span_len + b.span_len, survivor.scaling)
    A, B = adapters.factors(survivor)
    new_params = AdapterParams(adapters.d_model, dict(adapters.tensors))
    remove_module(new_params, a)
    remove_module(new_params, b)
    new_params.tensors[f"{merged.id}.A"] = Tensor(A.data, requires_grad=True)
    new_params.tensors[f"{merged.id}.B"] = Tensor(B.data, requires_grad=True)
    return layout.replace_modules([a, b], [merged]), new_params, survivor.id


def apply_inject(layout: ModelLayout, adapters: AdapterParams, module_id: str,
                 rng: np.random.Generator, r_inj: int | None = None,
                 lora_scaling: float = 1.0) -> tuple[ModelLayout, AdapterParams, int]:
    """Replace a single-layer LoR2C module with fresh half-rank LoRA on W_Q/W_V."""
    target = layout.by_id(module_id)
    if target.kind != "lor2c":
        raise ContractError(f"{module_id} is not a LoR2C module")
    if target.span_len != 1:
        raise ContractError(f"{module_id} spans {target.span_len} layers; only unmerged modules can be injected")
    r_inj = injection_rank(target.rank) if r_inj is None else r_inj
    lora = LoraQV(r_inj, target.span_start, lora_scaling)
    new_params = AdapterParams(adapters.d_model, dict(adapters.tensors))
    remove_module(new_params, target)
    init_module(new_params, lora, rng)
    return layout.replace_modules([target], [lora]), new_params, target.span_start


def injection_rng(seed: int, epoch: int, layer: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, layer, 0x1A7EC7])


def step(state: ScheduleState, layout: ModelLayout, adapters: AdapterParams, epoch: int,
         report: SfsReport, cfg: ScheduleConfig, seed: int = 0
         ) -> tuple[ScheduleState, ModelLayout, AdapterParams, list[OpRecord]]:
    """One epoch-boundary decision: at most one merge, then at most one injection."""
    state = state.copy()
    ops: list[OpRecord] = []
    tm, ti = schedule_targets(epoch, cfg)
    owe_m, owe_i = tm - state.merges_done, ti - state.injections_done

    if epoch >= cfg.window:
        if (owe_m > 0 or owe_i > 0) and not state.window_closed:
            ops.append(OpRecord(epoch, "skip", [], {}, "restructuring window closed",
                                {"abandoned_merges": owe_m, "abandoned_injections": owe_i}))
        state.window_closed = True
        state.log.extend(ops)
        return state, layout, adapters, ops

    live = {m.id for m in layout.residual_modules()}
    sfs_by_id = {m.module_id: m for m in report.modules if m.module_id in live}

    if owe_m > 0:
        scores = pair_scores(list(sfs_by_id.values()), state.excluded_layers, max_span=cfg.max_span)
        pair = select_merge_pair(scores)
        if pair is None:
            ops.append(OpRecord(epoch, "skip", [], {}, "no legal merge pair", {"wanted": "merge"}))
        else:
            starts = {m.span_start: m for m in sfs_by_id.values()}
            a, b = starts[pair[0]], starts[pair[1]]
            layout, adapters, survivor = apply_merge(layout, adapters, pair, report)
            state.merges_done += 1
            ops.append(OpRecord(epoch, "merge", list(range(a.span_start, b.span_end + 1)),
                                {a.module_id: a.sfs, b.module_id: b.sfs},
                                "minimum adjacent SFS sum",
                                {"pair": [a.span_start, b.span_start], "survivor": survivor,
                                 "score": a.sfs + b.sfs}))

    if owe_i > 0:
        live = {m.id for m in layout.residual_modules()}
        cands = [m for m in report.modules if m.module_id in live]
        target = select_inject_target(cands, policy=cfg.inject_policy)
        if target is None:
            ops.append(OpRecord(epoch, "skip", [], {}, "no unmerged LoR2C module to inject",
                                {"wanted": "inject"}))
        else:
            t = layout.by_id(target).span_start
            layout, adapters, t = apply_inject(layout, adapters, target, injection_rng(seed, epoch, t),
                                               lora_scaling=cfg.lora_scaling)
            state.injections_done += 1
            state.injected_layers.add(t)
            state.excluded_layers.update({t - 1, t, t + 1})
            rank = layout.by_id(f"lora:{t}").rank
            ops.append(OpRecord(epoch, "inject", [t], {target: report.by_id()[target].sfs},
                                f"{cfg.inject_policy} single-layer module", {"module": target, "rank": rank}))

    state.log.extend(ops)
    return state, layout, adapters, ops


def replay_layout(layout: ModelLayout, log_records: Sequence[OpRecord]) -> ModelLayout:
    """Rebuild the final structure from an initial layout and an operation log."""
    for rec in log_records:
        if rec.op == "merge":
            starts = {m.span_start: m for m in layout.lor2c_modules()}
            a, b = starts[rec.detail["pair"][0]], starts[rec.detail["pair"][1]]
            surv = a if rec.detail["survivor"] == a.id else b
            merged = Lor2c(surv.rank, a.span_start, a.span_len + b.span_len, surv.scaling)
            layout = layout.replace_modules([a, b], [merged])
        elif rec.op == "inject":
            target = layout.by_id(rec.detail["module"])
            lora = LoraQV(int(rec.detail["rank"]), target.span_start)
            layout = layout.replace_modules([target], [lora])
    return layout


def check_invariants(state: ScheduleState, layout: ModelLayout, cfg: ScheduleConfig, n_layers: int) -> None:
    """Raise ContractError if budgets, spans, or exclusions are violated."""
    layout.validate(n_layers)
    if state.merges_done > cfg.m_max or state.injections_done > cfg.i_max:
        raise ContractError("operation budget exceeded")
    for m in layout.residual_modules():
        if set(m.layers) & state.injected_layers:
            raise ContractError(f"{m.id} covers an injected layer")
    if layout.injected_layers() != state.injected_layers:
        raise ContractError("injected-layer set out of sync with layout")
