"""LoRA and mixture-of-LoRA-experts adapters for the toy DiT.

Plain LoRA adds ``(alpha / r) * B @ A @ x`` to a frozen linear layer. The MoE
variant keeps ``N`` such experts plus a one-layer router; each token is sent to
its ``k`` highest-scoring experts and their deltas are mixed with a softmax over
the retained router logits:

    out = base(x) + (alpha / r) * sum_i G(x)_i * B_i @ A_i @ x
    G(x) = softmax(topk(router(x), k))      # dropped logits set to -inf

Selection is discrete and gets no gradient; only the softmax over the kept
logits does. With ``k = 1`` the single kept gate is identically 1, so the
router receives no gradient at all and routing stays whatever the router's
initialization makes it.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import AdapterConfig

LAYER_NAMES = ("q", "k", "v", "out", "fc1", "fc2")


class LoRAAdapter(nn.Module):
    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, init_std: float = 0.02, generator=None):
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.rank, self.alpha = rank, float(alpha)
        self.A = nn.Parameter(torch.randn(rank, d_in, generator=generator) * init_std)
        self.B = nn.Parameter(torch.zeros(d_out, rank))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def forward(self, base_output: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return lora_forward(base_output, x, self)


def lora_forward(base_output: torch.Tensor, x: torch.Tensor, adapter: LoRAAdapter) -> torch.Tensor:
    if x.shape[-1] != adapter.A.shape[1] or base_output.shape[-1] != adapter.B.shape[0]:
        raise ValueError(
            f"shape mismatch: x {tuple(x.shape)}, base {tuple(base_output.shape)}, "
            f"A {tuple(adapter.A.shape)}, B {tuple(adapter.B.shape)}"
        )
    return base_output + adapter.scaling * ((x @ adapter.A.T) @ adapter.B.T)


def topk_gates(logits: torch.Tensor, k: int) -> torch.Tensor:
    """Softmax over the ``k`` largest logits, zeros elsewhere; ties go to the lower index."""
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    # Stable descending sort keeps equal logits in index order.
    order = torch.sort(logits.detach(), dim=-1, descending=True, stable=True).indices
    keep = torch.zeros_like(logits, dtype=torch.bool).scatter(-1, order[..., :k], True)
    masked = logits.masked_fill(~keep, float("-inf"))
    return torch.softmax(masked, dim=-1)


class MoELoRALayer(nn.Module):
    def __init__(
        self,
        d_in: int,
        d_out: int,
        rank: int,
        alpha: float,
        num_experts: int,
        top_k: int,
        init_std: float = 0.02,
        generator=None,
    ):
        super().__init__()
        if not 1 <= top_k <= num_experts:
            raise ValueError(f"top_k={top_k} outside [1, {num_experts}]")
        self.top_k = top_k
        self.experts = nn.ModuleList(
            LoRAAdapter(d_in, d_out, rank, alpha, init_std, generator) for _ in range(num_experts)
        )
        self.router = nn.Linear(d_in, num_experts)
        bound = 1.0 / math.sqrt(d_in)
        with torch.no_grad():
            self.router.weight.copy_(torch.rand(num_experts, d_in, generator=generator) * 2 * bound - bound)
            self.router.bias.zero_()
        self.record_usage = False
        self.usage_counts = torch.zeros(num_experts, dtype=torch.long)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def scaling(self) -> float:
        return self.experts[0].scaling

    def forward(self, base_output: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return moe_lora_forward(base_output, x, self)


def route(x: torch.Tensor, layer: MoELoRALayer) -> torch.Tensor:
    """Per-token gate vectors, shape (…, N)."""
    return topk_gates(layer.router(x), layer.top_k)


def moe_lora_forward(base_output: torch.Tensor, x: torch.Tensor, layer: MoELoRALayer) -> torch.Tensor:
    A = torch.stack([e.A for e in layer.experts])  # (N, r, d_in)
    B = torch.stack([e.B for e in layer.experts])  # (N, d_out, r)
    if x.shape[-1] != A.shape[-1] or base_output.shape[-1] != B.shape[1]:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)}, base {tuple(base_output.shape)}")
    gates = route(x, layer)
    if layer.record_usage:
        chosen = gates > 0
        layer.usage_counts += chosen.reshape(-1, gates.shape[-1]).sum(0).cpu()
    low = torch.einsum("...i,nri->...nr", x, A) * gates[..., None]
    delta = torch.einsum("...nr,nor->...o", low, B)
    return base_output + layer.scaling * delta


def _adaptable_layers(model: nn.Module):
    from .core.dit import AdaptableLinear

    for name, mod in model.named_modules():
        if isinstance(mod, AdaptableLinear):
            yield name, mod


def attach(model: nn.Module, config: AdapterConfig, seed: int = 0) -> nn.Module:
    """Freeze the base weights and hang adapters on the targeted projections.

    MoE-LoRA goes on ``config.moe_targets`` (the attention output projection by
    default) and plain LoRA on ``config.lora_targets``. Returns ``model``.
    """
    unknown = (set(config.moe_targets) | set(config.lora_targets)) - set(LAYER_NAMES)
    if unknown:
        raise ValueError(f"unknown target layers: {sorted(unknown)}")
    gen = torch.Generator().manual_seed(seed)
    for p in model.parameters():
        p.requires_grad_(False)
    dtype = next(model.parameters()).dtype
    for _, lin in _adaptable_layers(model):
        d_out, d_in = lin.base.weight.shape
        if lin.role in config.moe_targets:
            lin.adapter = MoELoRALayer(
                d_in, d_out, config.rank, config.alpha, config.num_experts, config.top_k, config.init_std, gen
            ).to(dtype)
        elif lin.role in config.lora_targets:
            lin.adapter = LoRAAdapter(d_in, d_out, config.rank, config.alpha, config.init_std, gen).to(dtype)
        else:
            lin.adapter = None
    model.adapter_config = config
    return model


def detach(model: nn.Module) -> nn.Module:
    for _, lin in _adaptable_layers(model):
        lin.adapter = None
    for p in model.parameters():
        p.requires_grad_(True)
    model.adapter_config = None
    return model


def adapter_parameters(model: nn.Module) -> dict[str, nn.Parameter]:
    out = {}
    for name, lin in _adaptable_layers(model):
        if lin.adapter is not None:
            for pname, p in lin.adapter.named_parameters():
                out[f"{name}.adapter.{pname}"] = p
    return out


def count_trainable(model: nn.Module) -> int:
    """Trainable adapter and router scalars (0 when nothing is attached)."""
    return sum(p.numel() for p in adapter_parameters(model).values() if p.requires_grad)


def count_frozen(model: nn.Module) -> int:
    adapter_ids = {id(p) for p in adapter_parameters(model).values()}
    return sum(p.numel() for p in model.parameters() if id(p) not in adapter_ids and not p.requires_grad)


def moe_layers(model: nn.Module) -> list[tuple[str, MoELoRALayer]]:
    return [(n, lin.adapter) for n, lin in _adaptable_layers(model) if isinstance(lin.adapter, MoELoRALayer)]


def expert_usage(model: nn.Module, run_forward) -> dict[str, list[float]]:
    """Per-layer expert selection frequencies while ``run_forward()`` executes.

    Counts every (token, selected expert) event, so each layer's frequencies sum
    to 1 regardless of ``top_k``.
    """
    layers = moe_layers(model)
    for _, layer in layers:
        layer.usage_counts.zero_()
        layer.record_usage = True
    try:
        with torch.no_grad():
            run_forward()
    finally:
        for _, layer in layers:
            layer.record_usage = False
    out = {}
    for name, layer in layers:
        counts = layer.usage_counts.to(torch.float64)
        total = counts.sum()
        out[name] = (counts / total).tolist() if total > 0 else [0.0] * layer.num_experts
    return out


def merge_lora(model: nn.Module) -> nn.Module:
    """Fold plain LoRA deltas into the base weights (test utility; MoE layers are left alone)."""
    with torch.no_grad():
        for _, lin in _adaptable_layers(model):
            if isinstance(lin.adapter, LoRAAdapter):
                a = lin.adapter
                lin.base.weight += a.scaling * a.B @ a.A
                lin.adapter = None
    return model
