"""Benchmark harness producing per-case metric records and aggregates."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import canonical_json, fingerprint, git_blob_hash
from .data.palette import TASK_TYPES
from .data.scenes import EditPair
from .incontext import EditRequest, edit_batch
from .metrics import binarize_sc, edit_success, feat_sim, keep_region, l1, pq_score, sc_score, vie_overall
from .scaling import ScalingConfig, scale_edit
from .verifiers import FeatureJudge, OracleJudge, oracle_score

NUMERIC = ("l1", "keep_l1", "feat_sim_source", "feat_sim_gt", "sc", "pq", "vie_overall", "oracle_score", "nfe")


@dataclass(frozen=True)
class BenchmarkSettings:
    seed: int = 0
    n_steps: int = 20
    guidance: float = 1.0
    use_ic_prompt: bool = True
    scaling: ScalingConfig | None = None
    judge: str = "oracle"  # or "feature"
    sc_threshold: float = 5.0
    batch_size: int = 100

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricReport:
    records: list[dict]
    aggregates: dict
    fingerprint: str
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        body = {
            "fingerprint": self.fingerprint,
            "settings": self.settings,
            "aggregates": self.aggregates,
            "records": self.records,
        }
        body["content_hash"] = git_blob_hash(canonical_json(body).encode())
        return body

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_text(self, vie_scale: float = 1.0) -> str:
        """Aligned plain-text summary; ``vie_scale=10`` shows VIE on a 0-100 scale."""
        a = self.aggregates
        rows = [("cases", f"{a['count']}"), ("edit_success", f"{a['edit_success']:.3f}")]
        for k in NUMERIC:
            v = a[k] * (vie_scale if k == "vie_overall" else 1.0)
            rows.append((k, f"{v:.4f}"))
        for t, v in a["success_by_task"].items():
            rows.append((f"success[{t}]", f"{v:.3f}"))
        width = max(len(r[0]) for r in rows)
        lines = [f"report {self.fingerprint}"] + [f"  {k.ljust(width)}  {v}" for k, v in rows]
        return "\n".join(lines) + "\n"


def aggregate(records: list[dict]) -> dict:
    if not records:
        raise ValueError("no records")
    agg = {"count": len(records), "edit_success": float(np.mean([r["edit_success"] for r in records]))}
    for k in NUMERIC:
        agg[k] = float(np.mean([r[k] for r in records]))
    agg["gpt_analog"] = float(np.mean([r["sc_binary"] * r["vie_overall"] / 10.0 for r in records]))
    by_task = {}
    for t in TASK_TYPES:
        sel = [r["edit_success"] for r in records if r["task_type"] == t]
        if sel:
            by_task[t] = float(np.mean(sel))
    agg["success_by_task"] = by_task
    return agg


def case_record(index: int, pair: EditPair, edited: np.ndarray, seed: int, nfe: int, sc_threshold: float) -> dict:
    sc = sc_score(edited, pair)
    pq = pq_score(edited)
    return {
        "index": index,
        "task_type": pair.task_type,
        "instruction": pair.instruction,
        "seed": int(seed),
        "nfe": int(nfe),
        "l1": l1(edited, pair.target),
        "keep_l1": l1(edited, pair.source, keep_region(pair)),
        "feat_sim_source": feat_sim(edited, pair.source),
        "feat_sim_gt": feat_sim(edited, pair.target),
        "edit_success": edit_success(edited, pair),
        "oracle_score": oracle_score(edited, pair),
        "sc": sc,
        "sc_binary": binarize_sc(sc, sc_threshold),
        "pq": pq,
        "vie_overall": vie_overall(sc, pq),
    }


def make_judge(kind: str, pair: EditPair):
    if kind == "oracle":
        return OracleJudge(pair)
    if kind == "feature":
        return FeatureJudge(pair.target)
    raise ValueError(f"unknown judge {kind!r}")


def run_benchmark(model, pairs: list[EditPair], settings: BenchmarkSettings = BenchmarkSettings(),
                  model_tag: str = "") -> MetricReport:
    """Edit every pair once (single default seed) or with scaling, then score it."""
    if not pairs:
        raise ValueError("empty dataset")
    records = []
    if settings.scaling is None:
        for start in range(0, len(pairs), settings.batch_size):
            chunk = pairs[start : start + settings.batch_size]
            reqs = [EditRequest(p.source, p.instruction, settings.seed, settings.n_steps, settings.guidance)
                    for p in chunk]
            for i, (p, res) in enumerate(zip(chunk, edit_batch(model, reqs, settings.use_ic_prompt))):
                records.append(case_record(start + i, p, res.edited, res.seed, res.nfe_consumed, settings.sc_threshold))
    else:
        for i, p in enumerate(pairs):
            req = EditRequest(p.source, p.instruction, settings.seed, settings.scaling.full_steps, settings.guidance)
            res, account = scale_edit(model, req, settings.scaling, make_judge(settings.judge, p),
                                      use_ic_prompt=settings.use_ic_prompt)
            records.append(case_record(i, p, res.edited, res.seed, account.total, settings.sc_threshold))
    fp = fingerprint({"settings": settings.to_dict(), "model": model_tag, "n": len(pairs)})
    return MetricReport(records=records, aggregates=aggregate(records), fingerprint=fp, settings=settings.to_dict())
