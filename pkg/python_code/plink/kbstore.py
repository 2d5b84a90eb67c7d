"""
Knowledge Base store
Loads a same-language entity KB from JSONL, computes cross-link popularity and
anchor statistics, and builds the token-level name index used by triage.
"""

import math
import re
import struct
from collections import defaultdict
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional

import numpy as np
from pydantic import ValidationError

from logger import app_logger

from .errors import EntityNotFoundError, InputValidationError, KBFormatError
from .jsonl import iter_jsonl, write_jsonl
from .schemas import AnchoredDocument, Entity

LinkDirection = Literal["out", "in", "both"]

INDEX_MAGIC = b"PLIDX1"
_U32 = struct.Struct("<I")
_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


class KnowledgeBase:
    """
    Entities of one language plus derived link statistics.

    Dangling outlinks are dropped on construction and counted in
    `dangling_links_dropped`. `median_outlinks` is recomputed on every change.
    """

    def __init__(
        self,
        entities: Iterable[Entity] = (),
        language: Optional[str] = None,
        link_direction: LinkDirection = "out",
    ):
        self.link_direction: LinkDirection = link_direction
        self.entities: Dict[str, Entity] = {}
        self.anchor_stats: Dict[str, Dict[str, int]] = {}
        self.dangling_links_dropped = 0
        self._link_counts: Dict[str, int] = {}
        self.median_outlinks: float = 0.0

        for entity in entities:
            if entity.id in self.entities:
                raise KBFormatError(f"Duplicate entity id: {entity.id!r}")
            self.entities[entity.id] = entity

        self.language = language or next(
            (e.language for e in self.entities.values()), ""
        )
        self._drop_dangling(self.entities.keys())
        self._recompute()

    def __len__(self) -> int:
        return len(self.entities)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.entities

    def get(self, entity_id: str) -> Entity:
        try:
            return self.entities[entity_id]
        except KeyError:
            raise EntityNotFoundError(entity_id) from None

    def add_entity(self, entity: Entity) -> None:
        """Insert one entity; its dangling outlinks are dropped and counted."""
        if entity.id in self.entities:
            raise KBFormatError(f"Duplicate entity id: {entity.id!r}")
        self.entities[entity.id] = entity
        self._drop_dangling([entity.id])
        self._recompute()

    def _drop_dangling(self, entity_ids: Iterable[str]) -> None:
        dropped = 0
        for entity_id in list(entity_ids):
            entity = self.entities[entity_id]
            valid = frozenset(t for t in entity.outlinks if t in self.entities)
            if len(valid) != len(entity.outlinks):
                dropped += len(entity.outlinks) - len(valid)
                self.entities[entity_id] = entity.model_copy(update={"outlinks": valid})
        if dropped:
            app_logger.warning(
                f"Dropped {dropped} dangling outlink(s) from the {self.language!r} KB"
            )
            self.dangling_links_dropped += dropped

    def _recompute(self) -> None:
        inlinks: Dict[str, set] = defaultdict(set)
        if self.link_direction != "out":
            for entity in self.entities.values():
                for target in entity.outlinks:
                    inlinks[target].add(entity.id)

        counts: Dict[str, int] = {}
        for entity in self.entities.values():
            if self.link_direction == "out":
                counts[entity.id] = len(entity.outlinks)
            elif self.link_direction == "in":
                counts[entity.id] = len(inlinks[entity.id])
            else:
                counts[entity.id] = len(entity.outlinks | inlinks[entity.id])
        self._link_counts = counts
        self.median_outlinks = 0.0
        if counts:
            self.median_outlinks = float(np.median(list(counts.values())))
        self.__dict__.pop("name_index", None)

    def link_count(self, entity_id: str) -> int:
        """Unique cross-link count of an entity in the configured direction."""
        if entity_id not in self._link_counts:
            raise EntityNotFoundError(entity_id)
        return self._link_counts[entity_id]

    # ── anchors ──

    def add_anchor(self, surface: str, entity_id: str, count: int = 1) -> None:
        if entity_id not in self.entities:
            raise EntityNotFoundError(entity_id)
        targets = self.anchor_stats.setdefault(surface, {})
        targets[entity_id] = targets.get(entity_id, 0) + count

    def count_anchors(self, documents: Iterable[AnchoredDocument]) -> int:
        """Accumulate anchor statistics from anchored documents; returns skips."""
        skipped = 0
        for doc in documents:
            for anchor in doc.anchors:
                if anchor.target not in self.entities:
                    skipped += 1
                    continue
                sentence = doc.sentences[anchor.sentence_index]
                self.add_anchor(sentence[anchor.start : anchor.end], anchor.target)
        if skipped:
            app_logger.warning(
                f"Skipped {skipped} anchor(s) whose target is not in the KB"
            )
        return skipped

    @cached_property
    def name_index(self) -> "InvertedIndex":
        return build_name_index(self)


# ── loading and saving ────────────────────────────────────────────────────────


def load_kb(
    path: Path,
    anchors_path: Optional[Path] = None,
    link_direction: LinkDirection = "out",
) -> KnowledgeBase:
    """Load an entity JSONL file (and optionally persisted anchor statistics)."""
    entities: List[Entity] = []
    seen: Dict[str, int] = {}
    language: Optional[str] = None
    for line_no, obj in iter_jsonl(path, KBFormatError):
        try:
            entity = Entity.model_validate(obj)
        except ValidationError as e:
            raise KBFormatError(
                f"{path}:{line_no}: invalid entity record "
                f"({e.error_count()} error(s))"
            ) from e
        if entity.id in seen:
            raise KBFormatError(
                f"Duplicate entity id: {entity.id!r} "
                f"(lines {seen[entity.id]} and {line_no})"
            )
        if language is None:
            language = entity.language
        elif entity.language != language:
            raise KBFormatError(
                f"{path}:{line_no}: entity language {entity.language!r} "
                f"differs from KB language {language!r}"
            )
        seen[entity.id] = line_no
        entities.append(entity)

    kb = KnowledgeBase(entities, language=language, link_direction=link_direction)
    if anchors_path is not None:
        load_anchor_stats(kb, anchors_path)
    app_logger.info(
        f"Loaded {len(kb)} {kb.language or '?'} entities from {path} "
        f"(median links {kb.median_outlinks:g}, "
        f"{kb.dangling_links_dropped} dangling dropped)"
    )
    return kb


def save_kb(kb: KnowledgeBase, path: Path) -> None:
    records = (
        {**e.model_dump(mode="json"), "outlinks": sorted(e.outlinks)}
        for _, e in sorted(kb.entities.items())
    )
    write_jsonl(path, records)


def load_anchor_stats(kb: KnowledgeBase, path: Path) -> None:
    """Read {surface, entity_id, count} lines; unknown entity ids are skipped."""
    skipped = 0
    for line_no, obj in iter_jsonl(path, KBFormatError):
        try:
            surface, entity_id = obj["surface"], obj["entity_id"]
            count = int(obj.get("count", 1))
        except (KeyError, TypeError, ValueError) as e:
            raise KBFormatError(f"{path}:{line_no}: invalid anchor record") from e
        if entity_id not in kb:
            skipped += 1
            continue
        kb.add_anchor(surface, entity_id, count)
    if skipped:
        app_logger.warning(
            f"Skipped {skipped} anchor record(s) for unknown entities in {path}"
        )


def save_anchor_stats(kb: KnowledgeBase, path: Path) -> None:
    write_jsonl(
        path,
        (
            {"surface": surface, "entity_id": entity_id, "count": count}
            for surface, targets in sorted(kb.anchor_stats.items())
            for entity_id, count in sorted(targets.items())
        ),
    )


def popularity_score(kb: KnowledgeBase, entity_id: str) -> float:
    """Unique cross-link count divided by the KB median (0 when the median is 0)."""
    count = kb.link_count(entity_id)
    if kb.median_outlinks == 0:
        return 0.0
    return count / kb.median_outlinks


# ── name index ────────────────────────────────────────────────────────────────


def tokenize_name(text: str) -> List[str]:
    return [t.casefold() for t in _TOKEN_RE.findall(text)]


class InvertedIndex:
    """
    Token → entity postings over names and wiki titles.
    Score is the sum of idf over distinct matching query tokens, idf = ln(1 + N/df);
    ties break by ascending entity id.
    """

    def __init__(self, entity_ids: List[str], postings: Dict[str, List[int]]):
        self.entity_ids = entity_ids
        self.postings = postings

    @property
    def n_entities(self) -> int:
        return len(self.entity_ids)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        if df == 0:
            return 0.0
        return math.log(1.0 + self.n_entities / df)

    def search(self, text: str, limit: Optional[int] = None) -> List[str]:
        scores: Dict[int, float] = defaultdict(float)
        for term in dict.fromkeys(tokenize_name(text)):
            postings = self.postings.get(term)
            if not postings:
                continue
            weight = self.idf(term)
            for idx in postings:
                scores[idx] += weight
        # entity_ids are sorted, so index order is id order
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        if limit is not None:
            ranked = ranked[:limit]
        return [self.entity_ids[idx] for idx, _ in ranked]

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        terms = sorted(self.postings)
        with open(path, "wb") as f:
            f.write(INDEX_MAGIC)
            f.write(struct.pack("<II", len(self.entity_ids), len(terms)))
            for entity_id in self.entity_ids:
                _write_str(f, entity_id)
            for term in terms:
                postings = self.postings[term]
                _write_str(f, term)
                f.write(_U32.pack(len(postings)))
                f.write(struct.pack(f"<{len(postings)}I", *postings))

    @classmethod
    def load(cls, path: Path) -> "InvertedIndex":
        data = Path(path).read_bytes()
        if not data.startswith(INDEX_MAGIC):
            raise InputValidationError(f"{path}: not a plink index (bad magic)")
        try:
            offset = len(INDEX_MAGIC)
            n_entities, n_terms = struct.unpack_from("<II", data, offset)
            offset += 8
            entity_ids = []
            for _ in range(n_entities):
                entity_id, offset = _read_str(data, offset)
                entity_ids.append(entity_id)
            postings: Dict[str, List[int]] = {}
            for _ in range(n_terms):
                term, offset = _read_str(data, offset)
                (n,) = _U32.unpack_from(data, offset)
                offset += 4
                postings[term] = list(struct.unpack_from(f"<{n}I", data, offset))
                offset += 4 * n
        except struct.error as e:
            raise InputValidationError(f"{path}: truncated index file") from e
        return cls(entity_ids, postings)


def _write_str(f, value: str) -> None:
    raw = value.encode("utf-8")
    f.write(_U32.pack(len(raw)))
    f.write(raw)


def _read_str(data: bytes, offset: int):
    (n,) = _U32.unpack_from(data, offset)
    offset += 4
    if offset + n > len(data):
        raise struct.error("string runs past end of buffer")
    return data[offset : offset + n].decode("utf-8"), offset + n


def build_name_index(kb: KnowledgeBase) -> InvertedIndex:
    entity_ids = sorted(kb.entities)
    postings: Dict[str, List[int]] = defaultdict(list)
    for idx, entity_id in enumerate(entity_ids):
        entity = kb.entities[entity_id]
        tokens = set(tokenize_name(entity.name))
        if entity.wiki_title:
            tokens.update(tokenize_name(entity.wiki_title))
        for token in tokens:
            postings[token].append(idx)
    return InvertedIndex(entity_ids, dict(postings))


def query_index(index: InvertedIndex, text: str, limit: int) -> List[str]:
    if limit < 1:
        raise InputValidationError(f"limit must be >= 1, got {limit}")
    return index.search(text, limit)
