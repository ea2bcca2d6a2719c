"""End-to-end steps shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adapters import adapter_parameters, attach, count_trainable
from .config import AdapterConfig, RunConfig
from .core.checkpoint import load_adapters, load_model, save_adapters, save_model
from .core.train import TokenSet, evaluate_loss, init_model, train
from .data.corpus import edit_corpus, pretrain_corpus
from .data.dataset import generate_pairs, ratio_counts, read_dataset
from .data.scenes import EditPair

log = logging.getLogger(__name__)

# Ablation rows: (adapter config or None for the bare base model, IC prompt at train/eval time).
PRESETS = {
    "training-free-no-ic": (None, False),
    "training-free-ic": (None, True),
    "only-moe": (AdapterConfig(lora_targets=()), True),
    "lora-only": (AdapterConfig(rank=16, alpha=16.0, moe_targets=(), lora_targets=("q", "k", "v", "out", "fc1", "fc2")), True),
    "ours-no-ic": (AdapterConfig(), False),
    "ours": (AdapterConfig(), True),
}


def train_pairs(cfg: RunConfig) -> list[EditPair]:
    return generate_pairs(ratio_counts(cfg.data.total), cfg.data.seed, cfg.data.corruption_rate)


def heldout_pairs(cfg: RunConfig) -> list[EditPair]:
    return generate_pairs(ratio_counts(cfg.data.heldout), cfg.data.seed + 1)


def load_pairs(directory) -> list[EditPair]:
    return list(read_dataset(directory))


def pretrain_tokens(cfg: RunConfig, n: int | None = None, seed_offset: int = 0) -> TokenSet:
    m = cfg.model
    d, k, t = pretrain_corpus(n or cfg.data.pretrain_records, cfg.data.seed + 100 + seed_offset, m.max_text_len)
    return TokenSet.from_pixels(d, k, t, m.patch_size)


def run_pretrain(cfg: RunConfig, out_dir=None, log_every: int = 500):
    """Train the base model; returns (model, summary) and writes a checkpoint when ``out_dir`` is set."""
    data = pretrain_tokens(cfg)
    model = init_model(cfg.model, cfg.pretrain.seed)
    held = pretrain_tokens(cfg, n=512, seed_offset=1)
    initial = evaluate_loss(model, held)
    losses = train(model, data, cfg.pretrain, list(model.parameters()), log_every=log_every)
    final = evaluate_loss(model, held)
    summary = {
        "steps": cfg.pretrain.steps,
        "seed": cfg.pretrain.seed,
        "heldout_loss_initial": initial,
        "heldout_loss_final": final,
        "train_loss_first": losses[0] if losses else None,
        "train_loss_last100": float(np.mean(losses[-100:])) if losses else None,
    }
    if out_dir is not None:
        save_model(out_dir, model, {
            "config": {"model": cfg.to_dict()["model"]},
            "config_fingerprint": cfg.fingerprint(),
            "seed": cfg.pretrain.seed,
            "step": cfg.pretrain.steps,
            "summary": summary,
        })
    return model, summary


def run_finetune(model, cfg: RunConfig, pairs: list[EditPair], adapter_cfg: AdapterConfig | None = None,
                 use_ic_prompt: bool = True, out_dir=None, log_every: int = 500):
    adapter_cfg = adapter_cfg or cfg.adapters
    attach(model, adapter_cfg, seed=cfg.finetune.seed)
    m = cfg.model
    data = TokenSet.from_pixels(*edit_corpus(pairs, m.max_text_len, use_ic_prompt), m.patch_size)
    params = list(adapter_parameters(model).values())
    losses = train(model, data, cfg.finetune, params, log_every=log_every)
    summary = {
        "steps": cfg.finetune.steps,
        "seed": cfg.finetune.seed,
        "pairs": len(pairs),
        "trainable": count_trainable(model),
        "ic_prompt": use_ic_prompt,
        "train_loss_first": losses[0] if losses else None,
        "train_loss_last100": float(np.mean(losses[-100:])) if losses else None,
    }
    if out_dir is not None:
        save_adapters(out_dir, model, {
            "config": cfg.to_dict(include_paths=False),
            "adapter_config": _adapter_dict(adapter_cfg),
            "config_fingerprint": cfg.fingerprint(),
            "seed": cfg.finetune.seed,
            "step": cfg.finetune.steps,
            "summary": summary,
        })
    return model, summary


def _adapter_dict(a: AdapterConfig) -> dict:
    from dataclasses import asdict

    d = asdict(a)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_edit_model(base_dir, adapter_dir=None):
    model, _ = load_model(base_dir)
    if adapter_dir is not None:
        load_adapters(adapter_dir, model)
    model.eval()
    return model


def cached(path: Path, fingerprint: str) -> bool:
    """True when ``path`` holds a checkpoint produced by a config with ``fingerprint``."""
    import json

    header = Path(path) / "header.json"
    if not header.exists():
        return False
    try:
        return json.loads(header.read_text()).get("config_fingerprint") == fingerprint
    except json.JSONDecodeError:
        return False


def with_adapters(cfg: RunConfig, adapter_cfg: AdapterConfig) -> RunConfig:
    return replace(cfg, adapters=adapter_cfg)
