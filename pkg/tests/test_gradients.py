import numpy as np
import pytest
import torch

from conftest import randomize, tiny_model
from diptych_edit.adapters import MoELoRALayer, adapter_parameters, attach, moe_lora_forward
from diptych_edit.config import AdapterConfig
from diptych_edit.core.dit import mma
from diptych_edit.core.flow import FlowState, dit_forward, fm_loss, make_condition
from gradcheck import fd_check

TOL = 1e-4
CONFIGS = [dict(dim=d, heads=h, depth=dep, rope_axes=ax)
           for d, h, ax in ((16, 2, (2, 2, 4)), (12, 1, (4, 4, 4)), (24, 3, (2, 2, 4)), (16, 1, (4, 6, 6)))
           for dep in (1, 2)]
CASES = [(i, CONFIGS[i % len(CONFIGS)]) for i in range(20)]


def _inputs(model, rng, batch=2):
    cfg = model.config
    h, w = cfg.image_size
    dip = rng.random((batch, h, 2 * w, 3))
    keep = np.zeros((batch, h, 2 * w))
    keep[:, :, w:] = 1
    ids = rng.integers(0, cfg.text_vocab, size=(batch, cfg.max_text_len))
    c = make_condition(dip, keep, ids, cfg.patch_size, torch.float64)
    x = torch.from_numpy(rng.normal(size=(batch, cfg.num_image_tokens, cfg.token_pixels)))
    return c, x


def mma_error(seed, kw):
    rng = np.random.default_rng(seed)
    model = randomize(tiny_model(seed, **kw), seed, scale=0.4)
    attn = model.blocks[0].attn
    d = model.config.dim
    text = torch.from_numpy(rng.normal(size=(3, d))).requires_grad_()
    image = torch.from_numpy(rng.normal(size=(4, d))).requires_grad_()
    tp = [(i + 1, 0, 0) for i in range(3)]
    ip = [(0, r, c) for r in range(2) for c in range(2)]
    w_t, w_i = torch.from_numpy(rng.normal(size=(3, d))), torch.from_numpy(rng.normal(size=(4, d)))

    def f():
        a, b = mma(text, image, attn, tp, ip, rope_axes=model.config.rope_axes)
        return (a * w_t).sum() + (b * w_i).sum()
    params = [text, image] + [p for n, p in attn.named_parameters() if n.endswith("weight")]
    return fd_check(f, params, rng)


def dit_forward_error(seed, kw):
    rng = np.random.default_rng(100 + seed)
    model = randomize(tiny_model(seed, **kw), seed, scale=0.3)
    c, x = _inputs(model, rng)
    x.requires_grad_()
    t = torch.tensor([0.3, 0.8], dtype=torch.float64)
    w = torch.from_numpy(rng.normal(size=x.shape))

    def f():
        return (dit_forward(model, FlowState(x, t, x, c)) * w).sum()
    params = [x] + [p for n, p in model.named_parameters() if n != "text_embed.weight"]
    return fd_check(f, params, rng, n_coords=6)


def fm_loss_error(seed, kw):
    rng = np.random.default_rng(200 + seed)
    model = randomize(tiny_model(seed, **kw), seed, scale=0.3)
    c, x1 = _inputs(model, rng)
    noise = torch.from_numpy(rng.normal(size=x1.shape))
    t = torch.tensor([0.25, 0.6], dtype=torch.float64)

    def f():
        return fm_loss(model, x1, c, t=t, noise=noise)
    params = list(model.parameters())
    return fd_check(f, params, rng, n_coords=4)


def moe_error(seed):
    rng = np.random.default_rng(300 + seed)
    d_in, d_out, n = int(rng.integers(3, 9)), int(rng.integers(3, 9)), int(rng.integers(2, 5))
    k = int(rng.integers(2, n + 1))
    layer = MoELoRALayer(d_in, d_out, rank=int(rng.integers(1, 4)), alpha=2.0, num_experts=n, top_k=k).double()
    randomize(layer, seed, scale=0.5)
    x = torch.from_numpy(rng.normal(size=(5, d_in)))
    base = torch.from_numpy(rng.normal(size=(5, d_out)))
    w = torch.from_numpy(rng.normal(size=(5, d_out)))

    def f():
        return (moe_lora_forward(base, x, layer) * w).sum()
    params = list(layer.parameters())
    err = fd_check(f, params, rng, n_coords=10)
    assert layer.router.weight.grad.abs().sum() > 0
    return err


@pytest.mark.parametrize("seed,kw", CASES)
def test_mma_gradients(seed, kw):
    assert mma_error(seed, kw) < TOL


@pytest.mark.parametrize("seed,kw", CASES)
def test_dit_forward_gradients(seed, kw):
    assert dit_forward_error(seed, kw) < TOL


@pytest.mark.parametrize("seed,kw", CASES)
def test_fm_loss_gradients(seed, kw):
    assert fm_loss_error(seed, kw) < TOL


@pytest.mark.parametrize("seed", range(20))
def test_moe_lora_parameter_gradients(seed):
    """Gradients reach expert A/B and (for k > 1) the router."""
    assert moe_error(seed) < TOL


@pytest.mark.parametrize("seed", range(4))
def test_adapted_model_gradients(seed):
    rng = np.random.default_rng(400 + seed)
    model = tiny_model(seed)
    attach(model, AdapterConfig(rank=2, alpha=4.0, num_experts=3, top_k=2), seed=seed)
    randomize(model, seed, scale=0.3)
    c, x1 = _inputs(model, rng)
    noise = torch.from_numpy(rng.normal(size=x1.shape))
    t = torch.tensor([0.4, 0.7], dtype=torch.float64)
    params = list(adapter_parameters(model).values())

    def f():
        return fm_loss(model, x1, c, t=t, noise=noise)
    assert fd_check(f, params, rng, n_coords=6) < TOL
