import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lor2c import transformer
from lor2c.adapters import (SHARED_A, AdapterModule, Lor2c, LoraQV, ModelLayout, SharedLor2c,
                            adapter_init, injection_rank, layout_for_method, lor2c_span_forward,
                            lora_qv_forward_patch, param_count)
from lor2c.autodiff import Tensor, backward
from lor2c import autodiff as ad
from lor2c.checkpoint import load_checkpoint, save_checkpoint
from lor2c.errors import LayoutError
from lor2c.optim import AdamW
from lor2c.transformer import attention, layer_forward, model_forward

from conftest import TINY, randomize_adapters, randomized_base
from oracles import matmul_loops


def _restructured_layouts(L, r):
    yield "merged", ModelLayout((Lor2c(r, 0, 2), *[Lor2c(r, t) for t in range(2, L)]))
    yield "injected", ModelLayout((*[Lor2c(r, t) for t in range(L) if t != 1], LoraQV(r // 2 or 1, 1)))


@pytest.mark.parametrize("method", ["lora", "lor2c", "sharelor2c", "imlor2c", "merged", "injected"])
def test_zero_init_neutrality_bitwise(method, tiny_base, tiny_tokens):
    L = TINY.n_layers
    extra = dict(_restructured_layouts(L, 4))
    layout = extra.get(method) or layout_for_method(method, L, 4)
    params = adapter_init(layout, TINY.d_model, seed=11)
    base = model_forward(tiny_tokens, None, tiny_base).data
    adapted = model_forward(tiny_tokens, layout, tiny_base, params).data
    assert adapted.tobytes() == base.tobytes()


def test_adapter_init_deterministic():
    layout = layout_for_method("lora", 4, 3)
    a = adapter_init(layout, 16, 5).snapshot()
    b = adapter_init(layout, 16, 5).snapshot()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_adapter_init_distribution():
    layout = layout_for_method("lor2c", 2, 8)
    p = adapter_init(layout, 512, 0)
    A, B = p.factors(layout.modules[0])
    assert A.size >= 4096
    assert abs(A.data.std() - 0.02) < 0.2 * 0.02
    assert np.all(B.data == 0)
    assert A.shape == (8, 512) and B.shape == (512, 8)


def test_span_forward_with_zero_B_is_base_span(tiny_base):
    h = Tensor(np.random.default_rng(0).normal(size=(2, 4, TINY.d_model)))
    m = Lor2c(3, 1, 2)
    p = adapter_init(ModelLayout((m,)), TINY.d_model, 0)
    out = lor2c_span_forward(h, m, tiny_base, p)
    expect = layer_forward(layer_forward(h, 1, tiny_base), 2, tiny_base)
    assert out.data.tobytes() == expect.data.tobytes()


def test_span_forward_residual_only(monkeypatch, tiny_base):
    monkeypatch.setattr(transformer, "layer_forward", lambda x, t, w, pad_mask=None, lora=None: x * 0.0)
    h_np = np.random.default_rng(1).normal(size=(2, 3, TINY.d_model))
    m = Lor2c(2, 0, 3, scaling=0.5)
    p = randomize_adapters(adapter_init(ModelLayout((m,)), TINY.d_model, 0))
    A, B = p.factors(m)
    out = lor2c_span_forward(Tensor(h_np), m, tiny_base, p)
    assert np.array_equal(out.data, 0.0 + ((h_np @ B.data) @ A.data) * 0.5)


def test_span_forward_matches_dense_oracle(tiny_base):
    h_np = np.random.default_rng(2).normal(size=(2, 3, TINY.d_model))
    m = Lor2c(3, 0, 2, scaling=1.3)
    p = randomize_adapters(adapter_init(ModelLayout((m,)), TINY.d_model, 0))
    A, B = p.factors(m)
    W = matmul_loops(B.data, A.data)
    base = layer_forward(layer_forward(Tensor(h_np), 0, tiny_base), 1, tiny_base).data
    want = base + 1.3 * (h_np @ W)
    np.testing.assert_allclose(lor2c_span_forward(Tensor(h_np), m, tiny_base, p).data, want, atol=1e-10)


def test_span_out_of_bounds(tiny_base):
    m = Lor2c(2, 2, 2)
    p = adapter_init(ModelLayout((m,)), TINY.d_model, 0)
    with pytest.raises(LayoutError):
        lor2c_span_forward(Tensor(np.zeros((1, 2, TINY.d_model))), m, tiny_base, p)


def _dense_patched_base(w, t, wq, wv):
    w2 = randomized_base(TINY)
    for k in w.tensors:
        w2.tensors[k] = Tensor(w.tensors[k].data.copy())
    w2.layer(t, "w_q").data = wq
    w2.layer(t, "w_v").data = wv
    return w2


def test_lora_patch_zero_B_identical(tiny_base):
    m = LoraQV(2, 1)
    p = adapter_init(ModelLayout((m,)), TINY.d_model, 0)
    h = Tensor(np.random.default_rng(3).normal(size=(2, 4, TINY.d_model)))
    patched = attention(h, 1, tiny_base, lora=lora_qv_forward_patch(m, 1, p))
    assert patched.data.tobytes() == attention(h, 1, tiny_base).data.tobytes()


def test_lora_patch_rank2_matches_dense_oracle(tiny_base):
    m = LoraQV(2, 1, scaling=0.8)
    p = randomize_adapters(adapter_init(ModelLayout((m,)), TINY.d_model, 0))
    patch = lora_qv_forward_patch(m, 1, p)
    wq = tiny_base.layer(1, "w_q").data + 0.8 * matmul_loops(p["lora:1.B_q"].data, p["lora:1.A_q"].data)
    wv = tiny_base.layer(1, "w_v").data + 0.8 * matmul_loops(p["lora:1.B_v"].data, p["lora:1.A_v"].data)
    h = Tensor(np.random.default_rng(4).normal(size=(2, 4, TINY.d_model)))
    want = attention(h, 1, _dense_patched_base(tiny_base, 1, wq, wv)).data
    np.testing.assert_allclose(attention(h, 1, tiny_base, lora=patch).data, want, atol=1e-10)
    eq, ev = patch.effective(tiny_base.layer(1, "w_q").data, tiny_base.layer(1, "w_v").data)
    np.testing.assert_allclose(eq, wq, atol=1e-12)
    np.testing.assert_allclose(ev, wv, atol=1e-12)


def test_lora_full_rank_reproduces_dense_delta(tiny_base):
    d = TINY.d_model
    rng = np.random.default_rng(5)
    dq, dv = rng.normal(size=(d, d)), rng.normal(size=(d, d))
    m = LoraQV(d, 0)
    p = adapter_init(ModelLayout((m,)), d, 0)
    p["lora:0.B_q"].data, p["lora:0.A_q"].data = dq, np.eye(d)
    p["lora:0.B_v"].data, p["lora:0.A_v"].data = dv, np.eye(d)
    wq = tiny_base.layer(0, "w_q").data + dq
    wv = tiny_base.layer(0, "w_v").data + dv
    h = Tensor(rng.normal(size=(1, 3, d)))
    want = attention(h, 0, _dense_patched_base(tiny_base, 0, wq, wv)).data
    got = attention(h, 0, tiny_base, lora=lora_qv_forward_patch(m, 0, p)).data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_lora_patch_wrong_layer():
    m = LoraQV(2, 1)
    p = adapter_init(ModelLayout((m,)), 8, 0)
    with pytest.raises(LayoutError):
        lora_qv_forward_patch(m, 0, p)


# --- parameter counts -----------------------------------------------------------

def test_param_count_d768():
    d, r, L = 768, 8, 12
    assert param_count(layout_for_method("lor2c", L, r), d, L)["total"] == 147_456
    assert param_count(layout_for_method("lora", L, r), d, L)["total"] == 294_912
    assert param_count(layout_for_method("sharelor2c", L, r), d, L)["total"] == 79_872


def test_injection_identity_d768():
    d, L = 768, 12
    before = layout_for_method("lor2c", L, 8)
    after = before.replace_modules([before.modules[5]], [LoraQV(4, 5)])
    assert param_count(after, d, L)["total"] == param_count(before, d, L)["total"]
    assert 2 * 768 * 8 == 4 * 768 * 4


def test_param_count_matches_materialized_tensors():
    layout = ModelLayout((Lor2c(4, 0, 2), LoraQV(2, 2), Lor2c(4, 3)))
    assert param_count(layout, 16, 4)["total"] == adapter_init(layout, 16, 0).count()
    shared = layout_for_method("sharelor2c", 5, 3)
    p = adapter_init(shared, 16, 0)
    assert param_count(shared, 16, 5)["total"] == p.count() == 16 * 3 * (5 + 1)


@settings(max_examples=200, deadline=None)
@given(d=st.integers(1, 1024), r=st.integers(1, 64), L=st.integers(1, 48))
def test_half_parameter_identity(d, r, L):
    lor2c = param_count(layout_for_method("lor2c", L, r), d)["total"]
    lora = param_count(layout_for_method("lora", L, r), d)["total"]
    assert 2 * lor2c == lora


@settings(max_examples=200, deadline=None)
@given(d=st.integers(1, 256), half=st.integers(1, 16), L=st.integers(1, 24), data=st.data())
def test_injection_conservation_even_rank(d, half, L, data):
    r = 2 * half
    layout = layout_for_method("lor2c", L, r)
    t = data.draw(st.integers(0, L - 1))
    after = layout.replace_modules([layout.modules[t]], [LoraQV(injection_rank(r), t)])
    assert param_count(after, d, L)["total"] == param_count(layout, d, L)["total"]


def test_odd_rank_injection_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert injection_rank(5) == 3
    assert "odd rank" in caplog.text


# --- sharing and layouts -----------------------------------------------------------

def test_shared_A_aliasing_after_optimizer_step(tiny_base, tiny_tokens):
    layout = layout_for_method("sharelor2c", TINY.n_layers, 2)
    p = randomize_adapters(adapter_init(layout, TINY.d_model, 0))
    opt = AdamW(p.named(), lr=1e-2)
    loss = ad.cross_entropy(model_forward(tiny_tokens, layout, tiny_base, p), np.array([0, 1, 1]))
    backward(loss, leaves=p.trainable())
    opt.step()
    As = [p.factors(m)[0] for m in layout.modules]
    assert all(a is As[0] for a in As)
    assert sum(t.size for n, t in p.named() if n.endswith(".A")) == TINY.d_model * 2
    assert SHARED_A in p


def test_layout_validation():
    with pytest.raises(LayoutError):
        ModelLayout((Lor2c(2, 0, 2), Lor2c(2, 1))).validate(4)
    with pytest.raises(LayoutError):
        ModelLayout((Lor2c(2, 3, 2),)).validate(4)
    with pytest.raises(LayoutError):
        ModelLayout((SharedLor2c(2, 0), SharedLor2c(3, 1))).validate(4)
    with pytest.raises(LayoutError):
        layout_for_method("adalora", 4, 2)


def test_module_ids_and_roundtrip():
    layout = ModelLayout((LoraQV(2, 4), Lor2c(8, 2, 2), Lor2c(8, 0), SharedLor2c(4, 1)))
    assert [m.id for m in layout.modules] == ["lor2c:0", "share:1", "lor2c:2-3", "lora:4"]
    assert ModelLayout.from_dict(layout.to_dict()) == layout
    assert layout.injected_layers() == {4}


@settings(max_examples=100, deadline=None)
@given(d=st.integers(1, 32), r=st.integers(1, 8), n=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_low_rank_path_equivalence(d, r, n, seed):
    rng = np.random.default_rng(seed)
    h, B, A = rng.normal(size=(n, d)), rng.normal(size=(d, r)), rng.normal(size=(r, d))
    np.testing.assert_allclose((h @ B) @ A, h @ (B @ A), atol=1e-10)


def test_adapter_checkpoint_self_describing(tmp_path):
    layout = ModelLayout((Lor2c(4, 0, 2), LoraQV(2, 2)))
    p = randomize_adapters(adapter_init(layout, 8, 0))
    save_checkpoint(tmp_path / "ad", p.snapshot(), {"layout": layout.to_dict()})
    arrays, meta = load_checkpoint(tmp_path / "ad")
    assert ModelLayout.from_dict(meta["layout"]) == layout
    for k, v in p.snapshot().items():
        np.testing.assert_array_equal(arrays[k], v.astype(np.float32).astype(np.float64))


def test_adapter_module_validation():
    with pytest.raises(LayoutError):
        AdapterModule("lor2c", 0, 0)
    with pytest.raises(LayoutError):
        AdapterModule("lora_qv", 2, 0, span_len=2)
