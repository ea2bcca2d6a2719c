"""Early-filter inference-time scaling.

Draw ``num_candidates`` noise seeds, render each with a cheap ``preview_steps``
sampler run, keep a champion through one pass of pairwise judge calls, then
re-run only the winning seed with the full ``full_steps`` schedule. Cost in
network evaluations: ``full_steps + num_candidates * preview_steps``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .incontext import EditRequest, EditResult, edit, edit_batch
from .verifiers import JudgeFailure

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScalingConfig:
    num_candidates: int = 6
    preview_steps: int = 10
    full_steps: int = 50

    def __post_init__(self):
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be >= 1")
        if not 1 <= self.preview_steps <= self.full_steps:
            raise ValueError("need 1 <= preview_steps <= full_steps")


@dataclass
class Candidate:
    seed: int
    preview: np.ndarray
    preview_nfe: int


@dataclass(frozen=True)
class NFEAccount:
    previews: int
    final: int

    @property
    def total(self) -> int:
        return self.previews + self.final


def nfe(config: ScalingConfig, enabled: bool = True) -> int:
    if not enabled:
        return config.full_steps
    return config.full_steps + config.num_candidates * config.preview_steps


def generate_candidates(model, request: EditRequest, config: ScalingConfig,
                        use_ic_prompt: bool = True) -> list[Candidate]:
    """Coarse previews for seeds ``request.seed + i``, each a complete ``preview_steps`` sample."""
    reqs = [replace(request, seed=request.seed + i, n_steps=config.preview_steps) for i in range(config.num_candidates)]
    results = edit_batch(model, reqs, use_ic_prompt)
    return [Candidate(seed=r.seed, preview=r.edited, preview_nfe=config.preview_steps) for r in results]


def tournament_select(candidates: list[Candidate], judge, full_sort: bool = False) -> Candidate:
    """Champion-chain maximum: compare the champion with each later candidate in index order.

    Uses exactly ``len(candidates) - 1`` judge calls. A failed comparison keeps
    the current champion. ``full_sort`` instead bubble-sorts the whole list
    (more calls) and returns the top.
    """
    if not candidates:
        raise ValueError("no candidates")
    if full_sort:
        return _bubble_sort(candidates, judge)[0]
    champion = candidates[0]
    for challenger in candidates[1:]:
        if _prefers_second(judge, champion, challenger):
            champion = challenger
    return champion


def _prefers_second(judge, first: Candidate, second: Candidate) -> bool:
    try:
        return judge.compare(first.preview, second.preview).winner == "B"
    except JudgeFailure as exc:
        log.warning("judge failed on seeds (%d, %d); keeping %d: %s", first.seed, second.seed, first.seed, exc)
        return False


def _bubble_sort(candidates: list[Candidate], judge) -> list[Candidate]:
    order = list(candidates)
    for end in range(len(order) - 1, 0, -1):
        for i in range(end):
            # Move the better one toward the front.
            if _prefers_second(judge, order[i], order[i + 1]):
                order[i], order[i + 1] = order[i + 1], order[i]
    return order


def scale_edit(model, request: EditRequest, config: ScalingConfig, judge, enabled: bool = True,
               full_sort: bool = False, use_ic_prompt: bool = True) -> tuple[EditResult, NFEAccount]:
    """Best-of-candidates edit; the winner's seed is re-sampled with ``full_steps``."""
    if not enabled:
        res = edit(model, replace(request, n_steps=config.full_steps), use_ic_prompt)
        return res, NFEAccount(previews=0, final=config.full_steps)
    candidates = generate_candidates(model, request, config, use_ic_prompt)
    winner = tournament_select(candidates, judge, full_sort)
    res = edit(model, replace(request, seed=winner.seed, n_steps=config.full_steps), use_ic_prompt)
    account = NFEAccount(previews=sum(c.preview_nfe for c in candidates), final=config.full_steps)
    res.nfe_consumed = account.total
    res.provenance = dict(res.provenance, candidate_seeds=[c.seed for c in candidates], winner_seed=winner.seed)
    return res, account
