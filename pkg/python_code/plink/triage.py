"""
Candidate triage
Anchor-prior candidate generation with the index-backed two-stage expansion.
"""

import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, ValidationError

from .errors import InputValidationError
from .jsonl import iter_jsonl, write_jsonl
from .kbstore import InvertedIndex, KnowledgeBase, query_index
from .schemas import Candidate, TriageConfig


class CandidateSet(BaseModel):
    """One line of a candidate dump."""

    mention_id: str
    candidates: List[Candidate]


def estimate_prior(kb: KnowledgeBase, surface: str) -> List[Candidate]:
    """prior(e|s) = count(s→e) / total count of s; highest first, ties by id."""
    counts = kb.anchor_stats.get(surface)
    if not counts:
        return []
    total = sum(counts.values())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [Candidate(entity_id=eid, prior=count / total) for eid, count in ranked]


def _uniform(entity_ids: List[str]) -> List[Candidate]:
    if not entity_ids:
        return []
    prior = 1.0 / len(entity_ids)
    return [Candidate(entity_id=entity_id, prior=prior) for entity_id in entity_ids]


def generate_candidates(
    kb: KnowledgeBase,
    surface: str,
    cfg: TriageConfig,
    index: Optional[InvertedIndex] = None,
) -> List[Candidate]:
    """Top-k prior candidates, falling back to an index query with uniform priors."""
    candidates = estimate_prior(kb, surface)[: cfg.k]
    if candidates:
        return candidates
    index = index if index is not None else kb.name_index
    return _uniform(query_index(index, surface, cfg.k))


def allocate_proportional(priors: List[float], total: int) -> List[int]:
    """
    n_i = max(1, round_half_up(total * p_i / sum(p))), then overflow is trimmed
    from the last (lowest-prior) titles while they hold more than one slot.
    """
    if not priors:
        return []
    mass = sum(priors)
    if mass <= 0:
        allocation = [1] * len(priors)
    else:
        allocation = [max(1, math.floor(total * p / mass + 0.5)) for p in priors]
    excess = sum(allocation) - total
    for i in range(len(allocation) - 1, -1, -1):
        if excess <= 0:
            break
        cut = min(excess, allocation[i] - 1)
        allocation[i] -= cut
        excess -= cut
    return allocation


def two_stage_retrieve(
    kb: KnowledgeBase, index: InvertedIndex, surface: str, cfg: TriageConfig
) -> List[Candidate]:
    """
    Expand each prior title into n_i index hits (queried by wiki title, then by
    name), each inheriting prior p_i / n_i. Titles that retrieve nothing trigger one
    query on the mention surface. Duplicates keep their highest prior; output is
    capped at l.
    """
    titles = generate_candidates(kb, surface, cfg, index)
    if not titles:
        return _uniform(query_index(index, surface, cfg.l))

    allocation = allocate_proportional([c.prior for c in titles], cfg.l)
    best: Dict[str, float] = {}
    missed = False
    for title, n_i in zip(titles, allocation):
        entity = kb.entities.get(title.entity_id)
        hits: List[str] = []
        if entity is not None:
            queries = [entity.name]
            if entity.wiki_title:
                queries.insert(0, entity.wiki_title)
            for text in queries:
                for entity_id in query_index(index, text, n_i):
                    if entity_id not in hits:
                        hits.append(entity_id)
                if len(hits) >= n_i:
                    break
            hits = hits[:n_i]
        if not hits:
            missed = True
            continue
        share = title.prior / len(hits)
        for entity_id in hits:
            if share > best.get(entity_id, -1.0):
                best[entity_id] = share

    if missed and len(best) < cfg.l:
        fallback = [e for e in query_index(index, surface, cfg.l) if e not in best]
        # leftover mass spread over the surface hits
        leftover = max(0.0, 1.0 - sum(best.values()))
        slots = fallback[: cfg.l - len(best)]
        for entity_id in slots:
            best[entity_id] = leftover / len(slots)

    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[: cfg.l]
    return [Candidate(entity_id=eid, prior=min(1.0, prior)) for eid, prior in ranked]


def triage(
    kb: KnowledgeBase,
    surface: str,
    cfg: TriageConfig,
    index: Optional[InvertedIndex] = None,
) -> List[Candidate]:
    """Dispatch on cfg.two_stage."""
    if cfg.two_stage:
        index = index if index is not None else kb.name_index
        return two_stage_retrieve(kb, index, surface, cfg)
    return generate_candidates(kb, surface, cfg, index)


def write_candidates(
    path: Path, candidate_sets: Iterable[Tuple[str, List[Candidate]]]
) -> int:
    records = (
        CandidateSet(mention_id=mid, candidates=cands) for mid, cands in candidate_sets
    )
    return write_jsonl(path, records)


def read_candidates(path: Path) -> Dict[str, List[Candidate]]:
    result: Dict[str, List[Candidate]] = {}
    for line_no, obj in iter_jsonl(path):
        try:
            record = CandidateSet.model_validate(obj)
        except ValidationError as e:
            raise InputValidationError(
                f"{path}:{line_no}: invalid candidate record"
            ) from e
        result[record.mention_id] = record.candidates
    return result
