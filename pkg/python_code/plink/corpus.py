"""
Corpus loading and silver-data construction
Annotated mention datasets (documents.jsonl + mentions.jsonl), Wiki-style silver
datasets built from anchor links, and surface/name similarity statistics.
"""

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError
from rapidfuzz.distance import JaroWinkler

from logger import app_logger

from .errors import DatasetFormatError, InputValidationError
from .jsonl import iter_jsonl, write_jsonl
from .kbstore import KnowledgeBase
from .schemas import NIL, AnchoredDocument, Document, Mention

DOCUMENTS_FILE = "documents.jsonl"
MENTIONS_FILE = "mentions.jsonl"
METADATA_FILE = "dataset.json"


@dataclass
class Dataset:
    """Documents by id plus an ordered list of mentions."""

    documents: Dict[str, Document]
    mentions: List[Mention]
    split: str = "train"
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.mentions)

    def document_for(self, mention: Mention) -> Document:
        return self.documents[mention.doc_id]

    @property
    def non_nil(self) -> List[Mention]:
        return [m for m in self.mentions if not m.is_nil]


class DatasetStats(BaseModel):
    n_mentions: int
    n_non_nil: int
    exact_match_rate: Optional[float] = None
    mean_jaro_winkler: Optional[float] = None


# ── loading ───────────────────────────────────────────────────────────────────


def _validate_mention(mention: Mention, doc: Document) -> None:
    if mention.sentence_index >= len(doc.sentences):
        raise DatasetFormatError(
            f"mention {mention.id}: sentence_index {mention.sentence_index} out of "
            f"range for document {doc.id} ({len(doc.sentences)} sentences)"
        )
    sentence = doc.sentences[mention.sentence_index]
    if mention.end > len(sentence):
        raise DatasetFormatError(
            f"mention {mention.id}: span ({mention.start}, {mention.end}) exceeds "
            f"sentence length {len(sentence)}"
        )
    spanned = sentence[mention.start : mention.end]
    if spanned != mention.surface:
        raise DatasetFormatError(
            f"mention {mention.id}: surface {mention.surface!r} does not match "
            f"spanned text {spanned!r}"
        )


def load_documents(path: Path) -> Dict[str, Document]:
    documents: Dict[str, Document] = {}
    for line_no, obj in iter_jsonl(path, DatasetFormatError):
        try:
            doc = Document.model_validate(obj)
        except ValidationError as e:
            raise DatasetFormatError(
                f"{path}:{line_no}: invalid document ({e.errors()[0]['msg']})"
            ) from e
        if doc.id in documents:
            raise DatasetFormatError(
                f"{path}:{line_no}: duplicate document id {doc.id!r}"
            )
        documents[doc.id] = doc
    return documents


def load_mentions(path: Path) -> List[Mention]:
    """Load a mentions file on its own (gold files for evaluation)."""
    mentions: List[Mention] = []
    seen = set()
    for line_no, obj in iter_jsonl(path, DatasetFormatError):
        try:
            mention = Mention.model_validate(obj)
        except ValidationError as e:
            mention_id = obj.get("id", f"line {line_no}")
            raise DatasetFormatError(
                f"mention {mention_id}: {e.errors()[0]['msg']} ({path}:{line_no})"
            ) from e
        if mention.id in seen:
            raise DatasetFormatError(
                f"{path}:{line_no}: duplicate mention id {mention.id!r}"
            )
        seen.add(mention.id)
        mentions.append(mention)
    return mentions


def load_dataset(path: Path, split: Optional[str] = None) -> Dataset:
    """
    Load and validate a dataset directory.
    Every mention must resolve its document and match its spanned text exactly.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"Dataset directory not found: {path}")

    documents = load_documents(path / DOCUMENTS_FILE)
    raw_mentions = load_mentions(path / MENTIONS_FILE)

    mentions = []
    for mention in raw_mentions:
        doc = documents.get(mention.doc_id)
        if doc is None:
            raise DatasetFormatError(
                f"mention {mention.id}: unknown doc_id {mention.doc_id!r}"
            )
        _validate_mention(mention, doc)
        if mention.language is None:
            mention = mention.model_copy(update={"language": doc.language})
        mentions.append(mention)

    meta_path = path / METADATA_FILE
    stored = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    ds = Dataset(
        documents=documents,
        mentions=mentions,
        split=split or stored.get("split", "train"),
        metadata=stored.get("metadata", {}),
    )
    app_logger.info(
        f"Loaded {ds.split} dataset from {path}: "
        f"{len(documents)} documents, {len(mentions)} mentions"
    )
    return ds


def save_dataset(ds: Dataset, path: Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_jsonl(path / DOCUMENTS_FILE, ds.documents.values())
    write_jsonl(path / MENTIONS_FILE, ds.mentions)
    meta = {"split": ds.split, "metadata": ds.metadata}
    (path / METADATA_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_anchored_docs(path: Path) -> List[AnchoredDocument]:
    docs: List[AnchoredDocument] = []
    for line_no, obj in iter_jsonl(path, DatasetFormatError):
        try:
            doc = AnchoredDocument.model_validate(obj)
        except ValidationError as e:
            raise DatasetFormatError(
                f"{path}:{line_no}: invalid anchored document "
                f"({e.errors()[0]['msg']})"
            ) from e
        for anchor in doc.anchors:
            if anchor.sentence_index >= len(doc.sentences) or not (
                anchor.start < anchor.end <= len(doc.sentences[anchor.sentence_index])
            ):
                raise DatasetFormatError(
                    f"{path}:{line_no}: anchor to {anchor.target!r} has an invalid "
                    f"span in document {doc.id}"
                )
        docs.append(doc)
    return docs


# ── silver data ───────────────────────────────────────────────────────────────


def build_silver_dataset(
    anchored_docs: Sequence[AnchoredDocument],
    kb: KnowledgeBase,
    seed_entities: Optional[Iterable[str]] = None,
    nil_fraction: float = 0.2,
    rng_seed: int = 0,
) -> Dataset:
    """
    Wiki-style silver data: one sampled anchor per seed entity selects its page,
    every KB-resolvable anchor on a selected page becomes a mention, then
    floor(nil_fraction * N) mentions are relabelled NIL (the original target is
    kept in nil_source).
    """
    if not 0 <= nil_fraction < 1:
        raise InputValidationError(
            f"nil_fraction must be in [0, 1), got {nil_fraction}"
        )
    if seed_entities is None:
        seed_entities = [e.id for e in kb.entities.values() if e.wiki_title]
    rng = np.random.default_rng(rng_seed)

    docs_by_id = {d.id: d for d in anchored_docs}
    by_target: Dict[str, List[str]] = {}
    for doc in sorted(anchored_docs, key=lambda d: d.id):
        for anchor in doc.anchors:
            by_target.setdefault(anchor.target, []).append(doc.id)

    selected: Dict[str, None] = {}
    skipped = 0
    for seed in sorted(set(seed_entities)):
        pages = by_target.get(seed)
        if not pages:
            skipped += 1
            continue
        selected.setdefault(pages[int(rng.integers(len(pages)))])
    if skipped:
        app_logger.warning(f"Skipped {skipped} seed entit(ies) with no anchors")

    documents: Dict[str, Document] = {}
    mentions: List[Mention] = []
    seen_ids = set()
    unresolved = 0
    for doc_id in selected:
        doc = docs_by_id[doc_id]
        documents[doc_id] = Document(
            id=doc.id, language=doc.language, sentences=doc.sentences
        )
        for anchor in doc.anchors:
            if anchor.target not in kb:
                unresolved += 1
                continue
            mention_id = (
                f"{doc.id}:{anchor.sentence_index}:{anchor.start}-{anchor.end}"
            )
            if mention_id in seen_ids:
                continue
            seen_ids.add(mention_id)
            sentence = doc.sentences[anchor.sentence_index]
            mentions.append(
                Mention(
                    id=mention_id,
                    doc_id=doc.id,
                    sentence_index=anchor.sentence_index,
                    start=anchor.start,
                    end=anchor.end,
                    surface=sentence[anchor.start : anchor.end],
                    gold=anchor.target,
                    language=doc.language,
                )
            )

    n_nil = math.floor(Fraction(str(nil_fraction)) * len(mentions))
    if n_nil:
        picks = rng.choice(len(mentions), size=n_nil, replace=False)
        for idx in sorted(picks.tolist()):
            m = mentions[idx]
            mentions[idx] = m.model_copy(update={"gold": NIL, "nil_source": m.gold})

    app_logger.info(
        f"Built silver dataset: {len(documents)} pages, {len(mentions)} mentions, "
        f"{n_nil} relabelled NIL"
    )
    return Dataset(
        documents=documents,
        mentions=mentions,
        split="train",
        metadata={
            "seeds_skipped": skipped,
            "anchors_unresolved": unresolved,
            "nil_fraction": nil_fraction,
            "rng_seed": rng_seed,
        },
    )


# ── statistics ────────────────────────────────────────────────────────────────


def jaro_winkler(a: str, b: str) -> float:
    """Jaro-Winkler similarity, prefix scale 0.1 over at most 4 characters."""
    return float(JaroWinkler.similarity(a, b, prefix_weight=0.1))


def dataset_stats(ds: Dataset, kb: KnowledgeBase) -> DatasetStats:
    non_nil = ds.non_nil
    missing = sorted({m.gold for m in non_nil if m.gold not in kb})
    if missing:
        raise DatasetFormatError(f"gold ids not found in KB: {', '.join(missing)}")
    if not non_nil:
        return DatasetStats(n_mentions=len(ds), n_non_nil=0)

    exact = sum(m.surface == kb.get(m.gold).name for m in non_nil)
    similarities = [jaro_winkler(m.surface, kb.get(m.gold).name) for m in non_nil]
    return DatasetStats(
        n_mentions=len(ds),
        n_non_nil=len(non_nil),
        exact_match_rate=exact / len(non_nil),
        mean_jaro_winkler=float(np.mean(similarities)),
    )
