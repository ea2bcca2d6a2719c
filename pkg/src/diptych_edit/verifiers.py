"""Pairwise judges for candidate edits.

Every judge answers one question: given candidate images ``a`` and ``b``, which
one is the better edit? Three implementations share that interface:

* :class:`OracleJudge` scores against the procedural ground truth;
* :class:`FeatureJudge` compares both to a reference image in the
  :func:`~diptych_edit.metrics.feat_sim` feature space;
* :class:`VLMJudge` asks an external vision-language endpoint over HTTP.

Wire protocol of the VLM endpoint (POST ``{base_url}/judge``)::

    request  {"model": str, "prompt": str, "instruction": str,
              "image_a": <base64 PNG>, "image_b": <base64 PNG>}
    response {"decision": "A" | "B", "confidence": float (optional), ...}

A reply whose ``decision`` is not exactly one of ``A``/``B`` (after stripping
whitespace and case-folding) is a judge failure.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np
from PIL import Image

from .data.scenes import EditPair, Scene, render
from .metrics import features, keep_region, l1

log = logging.getLogger(__name__)


class JudgeFailure(RuntimeError):
    """The judge could not produce a verdict for a pair."""


@dataclass(frozen=True)
class JudgeVerdict:
    winner: str  # "A" or "B"
    confidence: float | None = None
    raw: str | None = None

    def __post_init__(self):
        if self.winner not in ("A", "B"):
            raise ValueError(f"winner must be 'A' or 'B', got {self.winner!r}")


class Judge(Protocol):
    def compare(self, a: np.ndarray, b: np.ndarray) -> JudgeVerdict: ...


def oracle_score(x: np.ndarray, pair: EditPair, lam: float = 1.0) -> float:
    """Negative edit-region error against ground truth minus ``lam`` times the keep-region drift."""
    if pair.target is None:
        raise ValueError("oracle needs a ground-truth target")
    return -l1(x, pair.target, pair.edit_region_mask) - lam * l1(x, pair.source, keep_region(pair))


def oracle_judge(a: np.ndarray, b: np.ndarray, pair: EditPair, lam: float = 1.0) -> JudgeVerdict:
    sa, sb = oracle_score(a, pair, lam), oracle_score(b, pair, lam)
    return JudgeVerdict("A" if sa >= sb else "B", confidence=None, raw=f"{sa:.6f} vs {sb:.6f}")


@dataclass
class OracleJudge:
    pair: EditPair
    lam: float = 1.0
    calls: int = 0

    def compare(self, a, b) -> JudgeVerdict:
        self.calls += 1
        return oracle_judge(a, b, self.pair, self.lam)


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    return 0.0 if nu < 1e-12 or nv < 1e-12 else float(u @ v / (nu * nv))


def feature_judge(a: np.ndarray, b: np.ndarray, descriptor) -> JudgeVerdict:
    """Higher feature similarity to the rendered descriptor wins; ties go to A.

    ``descriptor`` is a :class:`Scene` describing the intended result or an
    already-rendered reference image.
    """
    ref = render(descriptor) if isinstance(descriptor, Scene) else np.asarray(descriptor)
    fr = features(ref)
    sa, sb = _cosine(features(a), fr), _cosine(features(b), fr)
    return JudgeVerdict("A" if sa >= sb else "B", raw=f"{sa:.6f} vs {sb:.6f}")


@dataclass
class FeatureJudge:
    descriptor: object
    calls: int = 0

    def compare(self, a, b) -> JudgeVerdict:
        self.calls += 1
        return feature_judge(a, b, self.descriptor)


def default_prompt_template() -> str:
    return resources.files("diptych_edit").joinpath("prompts/vlm_filter.txt").read_text()


@dataclass(frozen=True)
class VLMEndpointConfig:
    base_url: str
    model: str = "vlm"
    token_env: str = "VLM_API_TOKEN"
    timeout: float = 30.0
    max_retries: int = 2
    backoff: float = 0.5  # first retry delay in seconds, doubled each retry
    max_concurrency: int = 4
    prompt_template: str | None = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_file(cls, path) -> "VLMEndpointConfig":
        d = json.loads(Path(path).read_text())
        if "prompt_file" in d:
            d["prompt_template"] = Path(path).parent.joinpath(d.pop("prompt_file")).read_text()
        return cls(**d)


def png_base64(img: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def parse_decision(payload) -> JudgeVerdict:
    """Extract the verdict from a decoded endpoint reply."""
    if not isinstance(payload, dict) or "decision" not in payload:
        raise JudgeFailure(f"reply lacks a decision field: {str(payload)[:200]}")
    decision = str(payload["decision"]).strip().upper()
    if decision not in ("A", "B"):
        raise JudgeFailure(f"unparseable decision {payload['decision']!r}")
    conf = payload.get("confidence")
    if conf is not None:
        conf = float(conf)
        if not 0.0 <= conf <= 1.0:
            conf = None
    return JudgeVerdict(decision, confidence=conf, raw=json.dumps(payload, sort_keys=True))


@dataclass
class VLMClient:
    """Blocking HTTP client with retries and a cap on in-flight requests.

    A single ``judge`` call never runs longer than
    ``timeout * (max_retries + 1)``: backoff sleeps are cut short when they
    would cross that budget.
    """

    endpoint: VLMEndpointConfig
    transport: httpx.BaseTransport | None = None
    sleep: object = time.sleep
    _sem: threading.Semaphore = field(init=False, repr=False)

    def __post_init__(self):
        self._sem = threading.BoundedSemaphore(self.endpoint.max_concurrency)

    def build_request(self, a, b, instruction: str) -> dict:
        template = self.endpoint.prompt_template or default_prompt_template()
        return {
            "model": self.endpoint.model,
            "prompt": template.replace("{instruction}", instruction),
            "instruction": instruction,
            "image_a": png_base64(a),
            "image_b": png_base64(b),
        }

    def judge(self, a, b, instruction: str) -> JudgeVerdict:
        ep = self.endpoint
        body = self.build_request(a, b, instruction)
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(ep.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        budget = ep.timeout * (ep.max_retries + 1)
        start = time.monotonic()
        last_error: Exception | None = None
        with self._sem, httpx.Client(transport=self.transport, timeout=ep.timeout) as client:
            for attempt in range(ep.max_retries + 1):
                if attempt:
                    remaining = budget - (time.monotonic() - start)
                    if remaining <= 0:
                        break
                    self.sleep(min(ep.backoff * 2 ** (attempt - 1), remaining))
                try:
                    resp = client.post(ep.base_url.rstrip("/") + "/judge", json=body, headers=headers)
                    resp.raise_for_status()
                    return parse_decision(resp.json())
                except (httpx.HTTPError, json.JSONDecodeError, JudgeFailure) as exc:
                    last_error = exc
                    log.warning("judge attempt %d failed: %s", attempt + 1, exc)
        raise JudgeFailure(f"endpoint failed after {ep.max_retries + 1} attempts: {last_error}")


def vlm_judge(a, b, instruction: str, endpoint: VLMEndpointConfig, transport=None) -> JudgeVerdict:
    return VLMClient(endpoint, transport=transport).judge(a, b, instruction)


@dataclass
class VLMJudge:
    instruction: str
    client: VLMClient
    calls: int = 0
    failures: int = 0

    def compare(self, a, b) -> JudgeVerdict:
        self.calls += 1
        try:
            return self.client.judge(a, b, self.instruction)
        except JudgeFailure:
            self.failures += 1
            raise
