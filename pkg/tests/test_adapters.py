import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import randomize, tiny_model
from diptych_edit.adapters import (LoRAAdapter, MoELoRALayer, adapter_parameters, attach, count_frozen,
                                   count_trainable, detach, expert_usage, lora_forward, merge_lora, moe_layers,
                                   moe_lora_forward, route, topk_gates)
from diptych_edit.config import FULL_SCALE_ADAPTERS, AdapterConfig, ConfigError, ModelConfig
from diptych_edit.core.dit import DiT

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=finite), st.data())
@settings(max_examples=300, deadline=None)
def test_topk_gate_properties(logits, data):
    n = logits.shape[-1]
    k = data.draw(st.integers(1, n))
    z = torch.from_numpy(logits)
    g = topk_gates(z, k)
    assert ((g > 0).sum(-1) == k).all()
    assert torch.allclose(g.sum(-1), torch.ones(g.shape[0], dtype=torch.float64), atol=1e-6)
    shift = data.draw(finite)
    # Shifting can only reorder logits that rounding makes equal; skip those near-ties.
    srt = np.sort(logits, axis=-1)[:, ::-1]
    gaps = np.abs(np.diff(srt, axis=-1))
    assume(k == n or (gaps[:, k - 1] > 1e-9 * (1 + abs(shift) + np.abs(srt).max())).all())
    assert torch.allclose(topk_gates(z + shift, k), g, atol=1e-9)


def test_topk_exactly_k_nonzero_on_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        k = int(rng.integers(1, n + 1))
        g = topk_gates(torch.from_numpy(rng.normal(size=(50, n))), k)
        assert ((g > 0).sum(-1) == k).all()


def test_topk_ties_go_to_lower_index():
    g = topk_gates(torch.tensor([[1.0, 3.0, 3.0, 3.0]]), 2)
    assert g.tolist() == [[0.0, 0.5, 0.5, 0.0]]
    g = topk_gates(torch.zeros(1, 4), 1)
    assert g.tolist() == [[1.0, 0.0, 0.0, 0.0]]


def test_topk_rejects_bad_k():
    for k in (0, 5):
        with pytest.raises(ValueError):
            topk_gates(torch.zeros(2, 4), k)


def test_lora_forward_formula(rng):
    a = LoRAAdapter(5, 3, rank=2, alpha=6.0).double()
    randomize(a, 1)
    x, base = torch.from_numpy(rng.normal(size=(4, 5))), torch.from_numpy(rng.normal(size=(4, 3)))
    want = base + 3.0 * x @ (a.B @ a.A).T
    assert torch.allclose(lora_forward(base, x, a), want, atol=1e-12)
    with pytest.raises(ValueError):
        lora_forward(base, torch.zeros(4, 6, dtype=torch.float64), a)


def test_lora_zero_init_is_identity(rng):
    a = LoRAAdapter(5, 3, rank=2, alpha=6.0)
    assert (a.B == 0).all() and a.A.abs().sum() > 0
    base = torch.randn(4, 3)
    assert torch.equal(a(base, torch.randn(4, 5)), base)


def test_single_expert_moe_equals_lora():
    rng = np.random.default_rng(1)
    worst = 0.0
    for i in range(1000):
        d_in, d_out, r = (int(v) for v in rng.integers(1, 7, size=3))
        moe = MoELoRALayer(d_in, d_out, r, float(rng.uniform(0.5, 4)), num_experts=1, top_k=1).double()
        randomize(moe, i, scale=1.0)
        x = torch.from_numpy(rng.normal(size=(3, d_in)))
        base = torch.from_numpy(rng.normal(size=(3, d_out)))
        diff = (moe_lora_forward(base, x, moe) - lora_forward(base, x, moe.experts[0])).abs().max().item()
        worst = max(worst, diff)
    assert worst <= 1e-9


def test_moe_forward_matches_per_token_loop(rng):
    moe = MoELoRALayer(6, 4, 3, 2.0, num_experts=4, top_k=2).double()
    randomize(moe, 7)
    x, base = torch.from_numpy(rng.normal(size=(2, 5, 6))), torch.from_numpy(rng.normal(size=(2, 5, 4)))
    out = moe_lora_forward(base, x, moe)
    gates = route(x, moe)
    for b in range(2):
        for t in range(5):
            want = base[b, t].clone()
            for e, expert in enumerate(moe.experts):
                want += gates[b, t, e] * expert.scaling * (expert.B @ (expert.A @ x[b, t]))
            assert torch.allclose(out[b, t], want, atol=1e-12)


def test_zero_init_adapters_leave_model_unchanged(rng):
    for seed in range(5):
        model = randomize(tiny_model(seed), seed)
        c = model.config
        args = (torch.from_numpy(rng.normal(size=(2, c.num_image_tokens, c.token_pixels))),
                torch.tensor([0.1, 0.9], dtype=torch.float64),
                torch.from_numpy(rng.normal(size=(2, c.num_image_tokens, c.token_pixels))),
                torch.ones(2, c.num_image_tokens, c.patch_size ** 2, dtype=torch.float64),
                torch.from_numpy(rng.integers(0, c.text_vocab, size=(2, c.max_text_len))))
        before = model(*args)
        attach(model, AdapterConfig(num_experts=3, top_k=2), seed=seed)
        after = model(*args)
        assert (after - before).abs().max().item() <= 1e-6


def test_attach_freezes_base_and_counts():
    model = DiT(ModelConfig())
    total = sum(p.numel() for p in model.parameters())
    assert count_trainable(model) == 0
    attach(model, AdapterConfig())
    d, h, depth, r, n = 192, 768, 2, 8, 4
    per_block = 3 * r * (d + d) + r * (d + h) + r * (h + d) + n * r * (d + d) + (d * n + n)
    assert count_trainable(model) == depth * per_block
    assert count_frozen(model) == total
    assert all(not p.requires_grad for p in model.base_parameters().values())
    assert len(moe_layers(model)) == depth
    detach(model)
    assert count_trainable(model) == 0 and all(p.requires_grad for p in model.parameters())


def test_attach_rejects_unknown_target():
    with pytest.raises(ValueError):
        attach(tiny_model(), AdapterConfig(lora_targets=("qkv",)))
    with pytest.raises(ConfigError):
        AdapterConfig(num_experts=2, top_k=3)
    with pytest.raises(ConfigError):
        AdapterConfig(moe_targets=("q",), lora_targets=("q",))


def test_full_scale_adapter_settings():
    a = FULL_SCALE_ADAPTERS
    assert (a.rank, a.alpha, a.num_experts, a.top_k) == (32, 32.0, 4, 1)


def test_merge_lora_matches_adapter(rng):
    model = tiny_model(0)
    attach(model, AdapterConfig(moe_targets=(), lora_targets=("q", "k", "v", "out", "fc1", "fc2")))
    randomize(model, 3, scale=0.2)
    c = model.config
    args = (torch.from_numpy(rng.normal(size=(1, c.num_image_tokens, c.token_pixels))),
            torch.tensor([0.5], dtype=torch.float64),
            torch.zeros(1, c.num_image_tokens, c.token_pixels, dtype=torch.float64),
            torch.ones(1, c.num_image_tokens, c.patch_size ** 2, dtype=torch.float64),
            torch.zeros(1, c.max_text_len, dtype=torch.long))
    before = model(*args)
    merge_lora(model)
    assert not adapter_parameters(model)
    assert torch.allclose(model(*args), before, atol=1e-10)


def test_expert_usage_frequencies_sum_to_one(rng):
    model = tiny_model(0)
    attach(model, AdapterConfig(num_experts=4, top_k=1))
    c = model.config
    x = torch.from_numpy(rng.normal(size=(8, c.num_image_tokens, c.token_pixels)))

    def run():
        model(x, torch.full((8,), 0.5, dtype=torch.float64), x, torch.ones(8, c.num_image_tokens, 16, dtype=torch.float64),
              torch.zeros(8, c.max_text_len, dtype=torch.long))
    usage = expert_usage(model, run)
    assert len(usage) == c.depth
    for freqs in usage.values():
        assert abs(sum(freqs) - 1) < 1e-12 and len(freqs) == 4
