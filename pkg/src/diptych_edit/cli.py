"""Command-line entry point: ``diptych-edit <command> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence,
5 endpoint failure. Failures print one line ``error: <category>: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import workflow
from .config import AdapterConfig, ConfigError, RunConfig, canonical_json, git_blob_hash
from .core.checkpoint import CheckpointError
from .core.patch import DimensionMismatch
from .core.train import TrainingDivergence
from .data.dataset import DatasetError, gen_dataset, manifest_hash, ratio_counts
from .evaluate import BenchmarkSettings, run_benchmark
from .incontext import EditRequest, edit
from .scaling import ScalingConfig, nfe, scale_edit
from .verifiers import FeatureJudge, JudgeFailure, VLMClient, VLMEndpointConfig, VLMJudge

log = logging.getLogger("diptych_edit")

EXIT_CODES = {"config": 2, "data": 3, "divergence": 4, "endpoint": 5}


def load_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    d = {}
    if path:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        try:
            node[parts[-1]] = json.loads(value)
        except json.JSONDecodeError:
            node[parts[-1]] = value
    return RunConfig.from_dict(d)


def write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(obj)
    body["content_hash"] = git_blob_hash(canonical_json(body).encode())
    path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")


# Location fields are echoed on stdout but kept out of files so reruns elsewhere stay byte-identical.
_PATH_KEYS = ("checkpoint", "report", "out")


def emit(result: dict, out: Path | None = None) -> None:
    if out is not None:
        write_json(out, {k: v for k, v in result.items() if k not in _PATH_KEYS})
    print(json.dumps(result, sort_keys=True))


def read_image(path: str, size: tuple[int, int]) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"no such image {path}")
    if p.suffix == ".f32":
        arr = np.fromfile(p, dtype="<f4")
        if arr.size != size[0] * size[1] * 3:
            raise DimensionMismatch(f"{path} holds {arr.size} floats, expected {size[0]}x{size[1]}x3")
        return arr.reshape(size[0], size[1], 3).astype(np.float32)
    from PIL import Image

    img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
    if img.shape[:2] != tuple(size):
        raise DimensionMismatch(f"{path} is {img.shape[1]}x{img.shape[0]}, model expects {size[1]}x{size[0]}")
    return img


def write_image(path: str, img: np.ndarray) -> None:
    from PIL import Image

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(p, format="PNG")
    np.ascontiguousarray(img, dtype="<f4").tofile(p.with_suffix(".f32"))


def cmd_gen_data(args, cfg: RunConfig) -> dict:
    out = Path(args.out)
    train_counts = ratio_counts(cfg.data.total)
    held_counts = ratio_counts(cfg.data.heldout)
    gen_dataset(out / "train", train_counts, cfg.data.seed, cfg.data.corruption_rate)
    gen_dataset(out / "heldout", held_counts, cfg.data.seed + 1)
    return {
        "command": "gen-data",
        "config_fingerprint": cfg.fingerprint(),
        "train": {"counts": train_counts, "manifest_sha256": manifest_hash(out / "train")},
        "heldout": {"counts": held_counts, "manifest_sha256": manifest_hash(out / "heldout")},
    }


def cmd_pretrain(args, cfg: RunConfig) -> dict:
    _, summary = workflow.run_pretrain(cfg, out_dir=args.out)
    return {"command": "pretrain", "config_fingerprint": cfg.fingerprint(), "checkpoint": str(args.out), **summary}


def _pairs(args, split: str):
    return workflow.load_pairs(Path(args.data) / split)


def cmd_finetune(args, cfg: RunConfig) -> dict:
    model = workflow.load_edit_model(args.base)
    _, summary = workflow.run_finetune(model, cfg, _pairs(args, "train"), use_ic_prompt=not args.no_ic_prompt,
                                       out_dir=args.out)
    return {"command": "finetune", "config_fingerprint": cfg.fingerprint(), **summary}


def _judge_for(args, instruction: str, reference=None):
    if args.judge == "vlm":
        if not args.endpoint:
            raise ConfigError("--judge vlm needs --endpoint <config.json>")
        return VLMJudge(instruction, VLMClient(VLMEndpointConfig.from_file(args.endpoint)))
    if args.judge == "feature":
        if reference is None:
            raise ConfigError("--judge feature needs --reference <image>")
        return FeatureJudge(reference)
    raise ConfigError(f"judge {args.judge!r} needs ground truth; use eval/scale-sweep for the oracle")


def cmd_edit(args, cfg: RunConfig) -> dict:
    model = workflow.load_edit_model(args.base, args.adapters)
    size = model.config.image_size
    src = read_image(args.source, size)
    steps = args.steps or cfg.sampler.n_steps
    guidance = cfg.sampler.guidance if args.guidance is None else args.guidance
    req = EditRequest(src, args.instruction, args.seed, steps, guidance)
    if args.num_candidates > 1:
        ref = read_image(args.reference, size) if args.reference else None
        sc = ScalingConfig(args.num_candidates, args.preview_steps or cfg.preview_steps, steps)
        judge = _judge_for(args, args.instruction, ref)
        res, account = scale_edit(model, req, sc, judge, use_ic_prompt=not args.no_ic_prompt)
        # Single failed comparisons fall back to the champion; an endpoint that never answers is an error.
        if getattr(judge, "failures", 0) and judge.failures == judge.calls:
            raise JudgeFailure(f"all {judge.calls} judge comparisons failed")
        total = account.total
    else:
        res = edit(model, req, use_ic_prompt=not args.no_ic_prompt)
        total = res.nfe_consumed
    write_image(args.out, res.edited)
    return {
        "command": "edit",
        "config_fingerprint": cfg.fingerprint(),
        "out": str(args.out),
        "seed": res.seed,
        "steps": res.steps,
        "nfe": total,
        "prompt": res.prompt,
        "edited_hash": git_blob_hash(np.ascontiguousarray(res.edited, dtype="<f4").tobytes()),
    }


def _settings(cfg: RunConfig, args, scaling: ScalingConfig | None, use_ic: bool) -> BenchmarkSettings:
    return BenchmarkSettings(
        seed=args.seed,
        n_steps=cfg.sampler.n_steps,
        guidance=cfg.sampler.guidance,
        use_ic_prompt=use_ic,
        scaling=scaling,
        judge=getattr(args, "judge", "oracle") or "oracle",
    )


def cmd_eval(args, cfg: RunConfig) -> dict:
    model = workflow.load_edit_model(args.base, args.adapters)
    pairs = _pairs(args, args.split)
    if args.limit:
        pairs = pairs[: args.limit]
    scaling = ScalingConfig(cfg.num_candidates, cfg.preview_steps, cfg.sampler.n_steps) if args.scaling == "on" else None
    report = run_benchmark(model, pairs, _settings(cfg, args, scaling, not args.no_ic_prompt),
                           model_tag=_model_tag(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = report.to_dict()
    if args.metrics:
        keep = set(args.metrics.split(",")) | {"index", "task_type", "instruction", "seed"}
        d["records"] = [{k: v for k, v in r.items() if k in keep} for r in d["records"]]
    (out / "report.json").write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
    (out / "report.txt").write_text(report.to_text())
    return {"command": "eval", "config_fingerprint": cfg.fingerprint(), "report": str(out / "report.json"),
            **{k: v for k, v in report.aggregates.items() if k != "success_by_task"}}


def _model_tag(args) -> str:
    parts = []
    for d in (args.base, getattr(args, "adapters", None)):
        if d:
            header = json.loads((Path(d) / "header.json").read_text())
            parts.append(header["content_hash"])
    return "+".join(parts)


def _parse_grid(text: str) -> list[tuple[int, int]]:
    try:
        return [tuple(int(v) for v in cell.split("x")) for cell in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --grid {text!r}; expected e.g. 6x10,6x4") from exc


def cmd_scale_sweep(args, cfg: RunConfig) -> dict:
    model = workflow.load_edit_model(args.base, args.adapters)
    pairs = _pairs(args, "heldout")
    if args.limit:
        pairs = pairs[: args.limit]
    n = args.full_steps or cfg.sampler.n_steps
    rows = []
    baseline = run_benchmark(model, pairs, replace(_settings(cfg, args, None, True), n_steps=n), _model_tag(args))
    rows.append({"verifier": "-", "num_candidates": 1, "preview_steps": None,
                 "nfe": nfe(ScalingConfig(1, 1, n), enabled=False),
                 "oracle_score": baseline.aggregates["oracle_score"], "edit_success": baseline.aggregates["edit_success"]})
    for m_cand, m_steps in _parse_grid(args.grid):
        sc = ScalingConfig(m_cand, m_steps, n)
        rep = run_benchmark(model, pairs, _settings(cfg, args, sc, True), _model_tag(args))
        rows.append({"verifier": args.judge, "num_candidates": m_cand, "preview_steps": m_steps, "nfe": nfe(sc),
                     "oracle_score": rep.aggregates["oracle_score"], "edit_success": rep.aggregates["edit_success"]})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = {"command": "scale-sweep", "config_fingerprint": cfg.fingerprint(), "full_steps": n, "rows": rows}
    write_json(out / "sweep.json", result)
    lines = [f"{'verifier':<9}{'noise':>6}{'steps':>7}{'NFE':>6}{'oracle':>10}{'success':>9}"]
    for r in rows:
        lines.append(f"{r['verifier']:<9}{r['num_candidates']:>6}{str(r['preview_steps'] or '-'):>7}{r['nfe']:>6}"
                     f"{r['oracle_score']:>10.4f}{r['edit_success']:>9.3f}")
    (out / "sweep.txt").write_text("\n".join(lines) + "\n")
    return result


def cmd_ablate(args, cfg: RunConfig) -> dict:
    adapter_cfg, use_ic = workflow.PRESETS[args.preset]
    cfg = cfg if adapter_cfg is None else replace(cfg, adapters=adapter_cfg)
    model = workflow.load_edit_model(args.base)
    out = Path(args.out)
    if adapter_cfg is not None:
        workflow.run_finetune(model, cfg, _pairs(args, "train"), adapter_cfg, use_ic, out_dir=out / "adapters")
    report = run_benchmark(model, _pairs(args, "heldout")[: args.limit or None],
                           _settings(cfg, args, None, use_ic), model_tag=_model_tag(args))
    out.mkdir(parents=True, exist_ok=True)
    d = report.to_dict()
    d["preset"] = args.preset
    d["config_fingerprint"] = cfg.fingerprint()
    d["adapter_config"] = None if adapter_cfg is None else workflow._adapter_dict(adapter_cfg)
    (out / "report.json").write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
    (out / "report.txt").write_text(f"preset {args.preset}\n" + report.to_text())
    return {"command": "ablate", "preset": args.preset, "config_fingerprint": cfg.fingerprint(),
            "edit_success": report.aggregates["edit_success"], "report": str(out / "report.json")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diptych-edit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON run config (defaults used when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. --set pretrain.steps=200")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate train and held-out editing pairs")
    p.add_argument("--out", required=True, help="dataset root (train/ and heldout/ are created)")

    p = add("pretrain", cmd_pretrain, "train the base model on identical-scene diptychs")
    p.add_argument("--out", required=True, help="checkpoint directory")

    p = add("finetune", cmd_finetune, "train adapters on editing pairs")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True, help="dataset root from gen-data")
    p.add_argument("--out", required=True, help="adapter checkpoint directory")
    p.add_argument("--no-ic-prompt", action="store_true", help="train on bare instructions")

    p = add("edit", cmd_edit, "edit one image")
    p.add_argument("--base", required=True)
    p.add_argument("--adapters")
    p.add_argument("--source", required=True, help="PNG or raw .f32 image")
    p.add_argument("--instruction", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", type=float)
    p.add_argument("--out", required=True, help="output PNG (a .f32 side file is written next to it)")
    p.add_argument("--no-ic-prompt", action="store_true")
    p.add_argument("--num-candidates", type=int, default=1, help=">1 enables early-filter scaling")
    p.add_argument("--preview-steps", type=int)
    p.add_argument("--judge", choices=["feature", "vlm"], default="feature")
    p.add_argument("--reference", help="reference image for the feature judge")
    p.add_argument("--endpoint", help="VLM endpoint config JSON")

    for name, func, text in (("eval", cmd_eval, "benchmark a model on a dataset split"),
                             ("scale-sweep", cmd_scale_sweep, "grid over (num_candidates, preview_steps)")):
        p = add(name, func, text)
        p.add_argument("--base", required=True)
        p.add_argument("--adapters")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="report directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--limit", type=int, default=0, help="evaluate only the first N pairs")
        p.add_argument("--judge", choices=["oracle", "feature"], default="oracle")
        if name == "eval":
            p.add_argument("--split", default="heldout", choices=["train", "heldout"])
            p.add_argument("--metrics", help="comma-separated subset of per-case fields to keep")
            p.add_argument("--scaling", choices=["on", "off"], default="off")
            p.add_argument("--no-ic-prompt", action="store_true")
        else:
            p.add_argument("--grid", default="6x10,6x4,12x10,6x50")
            p.add_argument("--full-steps", type=int)

    p = add("ablate", cmd_ablate, "fine-tune (if needed) and evaluate one ablation preset")
    p.add_argument("--preset", required=True, choices=sorted(workflow.PRESETS))
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=0)
    return parser


def _category(exc: BaseException) -> str | None:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (DatasetError, CheckpointError, DimensionMismatch, FileNotFoundError)):
        return "data"
    if isinstance(exc, TrainingDivergence):
        return "divergence"
    if isinstance(exc, JudgeFailure):
        return "endpoint"
    return None


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        out_file = None
        result = args.func(args, cfg)
        if args.command in ("pretrain", "finetune"):
            out_file = Path(args.out) / "run.json"
        elif args.command == "gen-data":
            out_file = Path(args.out) / "gen.json"
        elif args.command == "edit":
            out_file = Path(args.out).with_suffix(".json")
        emit(result, out_file)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        cat = _category(exc)
        if cat is None:
            raise
        msg = " ".join(str(exc).split())
        print(f"error: {cat}: {msg}", file=sys.stderr)
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
