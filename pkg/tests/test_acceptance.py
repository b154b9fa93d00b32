"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line."""

import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from lor2c import autodiff as ad
from lor2c.adapters import Lor2c, LoraQV, ModelLayout, adapter_init, layout_for_method, param_count
from lor2c.autodiff import gradcheck
from lor2c.config import load_config
from lor2c.experiment import load_base, read_grid, run_finetune, run_grid, run_pretrain
from lor2c.scheduler import ScheduleConfig, apply_inject, apply_merge
from lor2c.sfs import sfs, sfs_report, singular_values_lowrank
from lor2c.tasks import TaskSpec, make_task
from lor2c.training import (PretrainConfig, TrainConfig, epoch_mean_ratio, evaluate, grad_ratio_table,
                            pretrain, read_metrics, train)
from lor2c.transformer import BaseConfig, model_forward

from conftest import probe_tokens, randomize_adapters, randomized_base
from oracles import jacobi_singular_values
from schedfuzz import fuzz_run

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.yaml"
ORACLE = json.loads((ROOT / "results" / "desk_oracle.json").read_text())


@contextmanager
def criterion(capsys, n: int):
    """Print ``PASS``/``FAIL criterion n: detail``; the body fills ``detail``."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        with capsys.disabled():
            print(f"\nFAIL criterion {n}: {info['detail']} {type(exc).__name__}: {exc}".rstrip())
        raise
    with capsys.disabled():
        print(f"\nPASS criterion {n}: {info['detail']}")


# --- 1 ------------------------------------------------------------------------------

def test_c1_parameter_counts(capsys):
    with criterion(capsys, 1) as c:
        d, r, L = 768, 8, 12
        counts = {m: param_count(layout_for_method(m, L, r), d)["total"] for m in ("lor2c", "lora", "sharelor2c")}
        c["detail"] = f"counts {counts}"
        assert counts == {"lor2c": 147456, "lora": 294912, "sharelor2c": 79872}
        assert 2 * counts["lor2c"] == counts["lora"]


# --- 2 ------------------------------------------------------------------------------

def random_layout(rng) -> tuple[ModelLayout, int, int]:
    """Random spans and earlier injections with at least one single-layer Lor2c."""
    while True:
        L = int(rng.integers(1, 13))
        r = 2 * int(rng.integers(1, 9))
        mods, t = [], 0
        while t < L:
            u = rng.random()
            if u < 0.2:
                mods.append(LoraQV(int(rng.integers(1, 9)), t))
                t += 1
            else:
                span = 1 if u < 0.6 else int(rng.integers(1, L - t + 1))
                mods.append(Lor2c(r, t, span))
                t += span
        if any(m.kind == "lor2c" and m.span_len == 1 for m in mods):
            return ModelLayout(tuple(mods)).validate(L), int(rng.integers(r, 65)), r


def test_c2_injection_conservation(capsys):
    with criterion(capsys, 2) as c:
        rng = np.random.default_rng(2024)
        checked = 0
        for _ in range(100):
            layout, d, r = random_layout(rng)
            p = adapter_init(layout, d, int(rng.integers(1 << 30)))
            singles = [m for m in layout.lor2c_modules() if m.span_len == 1]
            target = singles[int(rng.integers(len(singles)))]
            new_layout, new_p, t = apply_inject(layout, p, target.id, rng)
            assert new_layout.by_id(f"lora:{t}").rank == r // 2
            assert param_count(new_layout, d)["total"] == param_count(layout, d)["total"]
            assert new_p.count() == p.count()
            checked += 1
        c["detail"] = f"{checked} randomized layouts conserve the trainable count exactly"


# --- 3 ------------------------------------------------------------------------------

GC_CFG = BaseConfig(d_model=16, n_layers=4, n_heads=4, d_ff=32, vocab_size=8, max_seq_len=6, seed=7)


def _gc_setups():
    yield "lora", layout_for_method("lora", 4, 2)
    yield "lor2c", layout_for_method("lor2c", 4, 2)
    yield "sharelor2c", layout_for_method("sharelor2c", 4, 2)


def test_c3_gradcheck_suite(capsys):
    with criterion(capsys, 3) as c:
        start = time.perf_counter()
        w = randomized_base(GC_CFG, seed=11)
        toks = probe_tokens(GC_CFG, b=3, s=6)
        labels = np.array([0, 1, 1])
        cases = {}
        for name, layout in _gc_setups():
            cases[name] = (layout, randomize_adapters(adapter_init(layout, 16, 0), seed=3))
        base_layout = layout_for_method("lor2c", 4, 2)
        p = randomize_adapters(adapter_init(base_layout, 16, 0), seed=4)
        rep = sfs_report(base_layout, p, 0)
        merged_layout, merged_p, _ = apply_merge(base_layout, p, (1, 2), rep)
        cases["post-merge"] = (merged_layout, merged_p)
        p = randomize_adapters(adapter_init(base_layout, 16, 0), seed=5)
        inj_layout, inj_p, _ = apply_inject(base_layout, p, "lor2c:2", np.random.default_rng(0))
        cases["post-inject"] = (inj_layout, randomize_adapters(inj_p, seed=6))
        errors = {}
        for name, (layout, params) in cases.items():
            loss = lambda: ad.cross_entropy(model_forward(toks, layout, w, params), labels)
            errors[name] = gradcheck(loss, params.trainable())
        elapsed = time.perf_counter() - start
        c["detail"] = "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f"; {elapsed:.0f}s"
        assert all(e < 1e-4 for e in errors.values())
        assert elapsed < 300


# --- 4 ------------------------------------------------------------------------------

def test_c4_zero_init_neutrality(capsys):
    with criterion(capsys, 4) as c:
        cfg = BaseConfig(d_model=16, n_layers=4, n_heads=2, d_ff=32, vocab_size=8, max_seq_len=8, seed=0)
        w = randomized_base(cfg, seed=3)
        toks = probe_tokens(cfg, b=4, s=8)
        frozen = model_forward(toks, None, w).data.tobytes()
        same = {}
        for method in ("lora", "lor2c", "sharelor2c", "imlor2c"):
            layout = layout_for_method(method, cfg.n_layers, 4)
            same[method] = model_forward(toks, layout, w, adapter_init(layout, cfg.d_model, 9)).data.tobytes() == frozen
        c["detail"] = f"bit-identical to frozen base: {same}"
        assert all(same.values())


# --- 5 ------------------------------------------------------------------------------

def test_c5_sfs_correctness(capsys):
    with criterion(capsys, 5) as c:
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(200):
            d = int(rng.integers(1, 65))
            r = int(rng.integers(1, min(16, d) + 1))
            A, B = rng.normal(size=(r, d)), rng.normal(size=(d, r))
            if rng.random() < 0.2:
                B[:, int(rng.integers(r)):] = 0.0
            dense = jacobi_singular_values(B @ A)
            scale = max(1.0, dense[0])
            worst = max(worst, np.max(np.abs(singular_values_lowrank(A, B) - dense[:r])) / scale)
            assert np.all(dense[r:] <= 1e-8 * scale)
        assert worst <= 1e-8
        for _ in range(1000):
            n = int(rng.integers(1, 33))
            lam = np.sort(rng.exponential(size=n) * (rng.random(n) < 0.8))[::-1]
            vals = [sfs(lam, k) for k in range(1, n + 1)]
            assert all(0.0 <= v <= 1.0 for v in vals)
            assert all(a >= b for a, b in zip(vals, vals[1:]))
            scale = float(10 ** rng.uniform(-3, 3))
            assert all(abs(sfs(scale * lam, k) - v) <= 1e-12 for k, v in enumerate(vals, start=1))
        assert sfs([4, 3, 2, 1], 1) == 0.6
        c["detail"] = f"200 oracle cases (worst scaled err {worst:.1e}), 1000 spectra, sfs([4,3,2,1],1) == 0.6"


# --- 6 ------------------------------------------------------------------------------

SMALL = BaseConfig(d_model=8, n_layers=3, n_heads=2, d_ff=16, vocab_size=7, max_seq_len=6, seed=0)


def test_c6_scheduler_fuzz(capsys):
    with criterion(capsys, 6) as c:
        merges = injections = both = 0
        for seed in range(500):
            res = fuzz_run(seed)
            merges += res["state"].merges_done
            injections += res["state"].injections_done
            both += res["both_fired"]
        assert both > 0
        w, _ = pretrain(SMALL, PretrainConfig(epochs=1, n_seqs=64, batch_size=16))
        identical = []
        for seed in range(3):
            data = make_task(TaskSpec(kind="parity", vocab_size=4, seq_len=6, n_train=96, n_eval=48, seed=seed))
            common = dict(epochs=3, batch_size=32, learning_rate=1e-2, rank=2, seed=seed, record_grads=True)
            a = train(TrainConfig(method="lor2c", **common), w, *data)
            b = train(TrainConfig(method="imlor2c", schedule=ScheduleConfig(0, 0), **common), w, *data)
            identical.append(a.metrics == b.metrics)
        c["detail"] = (f"500 runs clean ({merges} merges, {injections} injections, merge-first checked in "
                       f"{both} epochs); M=I=0 identical to LoR2C for seeds 0-2: {identical}")
        assert all(identical)


# --- 7, 8, 10: desk-scale paired runs ----------------------------------------------

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = load_config(DESK)
    start = time.perf_counter()
    pdir = run_pretrain(cfg, root=root)
    runs = {m: run_finetune(cfg.with_overrides(**{"train.method": m}), root=root) for m in ("lor2c", "lora")}
    elapsed = time.perf_counter() - start
    _, eval_set = make_task(cfg.task)
    frozen_acc, _ = evaluate(eval_set, load_base(pdir / "base"))
    return {"root": root, "cfg": cfg, "pretrain": pdir, "runs": runs, "seconds": elapsed, "frozen": frozen_acc}


@pytest.mark.slow
def test_c7_desk_learning(capsys, desk):
    with criterion(capsys, 7) as c:
        last = {m: read_metrics(d / "metrics.jsonl")[-1] for m, d in desk["runs"].items()}
        acc = {m: last[m]["eval_acc"] for m in last}
        params = {m: last[m]["trainable_params"] for m in last}
        margin, gap = acc["lor2c"] - desk["frozen"], acc["lor2c"] - acc["lora"]
        pre = ORACLE["accuracy"]
        c["detail"] = (f"frozen {desk['frozen']:.4f}, LoR2C {acc['lor2c']:.4f}, LoRA {acc['lora']:.4f} "
                       f"(oracle {pre['frozen']:.4f}/{pre['lor2c']:.4f}/{pre['lora']:.4f}); margin {100 * margin:+.2f} pts, "
                       f"gap {100 * gap:+.2f} pts; params {params['lor2c']} vs {params['lora']}; {desk['seconds']:.0f}s")
        assert margin >= ORACLE["thresholds"]["min_margin_over_frozen"]
        assert abs(gap) <= ORACLE["thresholds"]["max_abs_gap_to_lora"]
        assert 2 * params["lor2c"] == params["lora"]
        assert desk["seconds"] < 15 * 60


@pytest.mark.slow
def test_c8_gradient_trend(capsys, desk):
    with criterion(capsys, 8) as c:
        num, den = (read_metrics(desk["runs"][m] / "metrics.jsonl") for m in ("lor2c", "lora"))
        rows = grad_ratio_table(num, den)
        L = desk["cfg"].base.n_layers
        means = [epoch_mean_ratio(rows, layer) for layer in range(L)]
        c["detail"] = "epoch-mean LoR2C/LoRA grad ratio by layer " + ", ".join(f"{m:.1f}" for m in means)
        assert means[0] > means[L - 1]


@pytest.mark.slow
def test_c10_replay_determinism(capsys, desk, tmp_path):
    with criterion(capsys, 10) as c:
        run_dir = desk["runs"]["lor2c"]
        replayed = run_finetune(load_config(run_dir / "config.yaml"), root=tmp_path / "a",
                                base=desk["pretrain"] / "base")
        same_desk = (replayed / "metrics.jsonl").read_bytes() == (run_dir / "metrics.jsonl").read_bytes()
        smoke = load_config(ROOT / "configs" / "smoke.yaml")
        pdir = run_pretrain(smoke, root=tmp_path / "b")
        first = run_finetune(smoke, root=tmp_path / "b")
        again = run_finetune(load_config(first / "config.yaml"), root=tmp_path / "c", base=pdir / "base")
        files = ("metrics.jsonl", "oplog.jsonl", "sfs.csv", "predictions.csv", "adapters.bin")
        same_smoke = all((first / f).read_bytes() == (again / f).read_bytes() for f in files)
        c["detail"] = f"desk LoR2C metrics replayed byte-identically: {same_desk}; smoke IMLoR2C outputs: {same_smoke}"
        assert same_desk and same_smoke


# --- 9 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_c9_grid(capsys, desk):
    with criterion(capsys, 9) as c:
        start = time.perf_counter()
        summary = {}
        for kind in ("parity", "majority-token"):
            cfg = desk["cfg"].with_overrides(**{"task.kind": kind})
            rows = read_grid(run_grid(cfg, root=desk["root"]))
            assert len(rows) == 16 and all(r["status"] == "ok" for r in rows), rows
            acc = {(int(r["m_max"]), int(r["i_max"])): float(r["eval_acc"]) for r in rows}
            best = max((v, k) for k, v in acc.items() if k != (0, 0))
            summary[kind] = (acc[(0, 0)], best)
        elapsed = time.perf_counter() - start
        c["detail"] = "; ".join(f"{k}: (0,0) {a:.4f}, best nonzero {b[1]} {b[0]:.4f}" for k, (a, b) in summary.items())
        c["detail"] += f"; {elapsed / 60:.1f} min"
        assert any(b[0] >= a for a, b in summary.values())
        assert elapsed < 2 * 3600
