"""
Subword encoders and the four pooled representations
Mention string (m_s), entity name (e_s), mention context (m_c) and entity
description (e_c) vectors, all max-pooled over subword vectors.
"""

import hashlib
import json
import re
import sys
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from cache import RepresentationCache
from logger import app_logger

from .errors import AlignmentError, InputValidationError
from .kbstore import KnowledgeBase, popularity_score
from .schemas import Document, EncoderConfig, Entity, Mention

_PIECE_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


@dataclass(frozen=True)
class Subword:
    text: str
    start: int
    end: int
    token_id: Optional[int] = None


class EncoderAdapter(ABC):
    """Interface of the subword encoders; encode returns one row per subword."""

    dimension: int
    subword_limit: int

    @property
    @abstractmethod
    def fingerprint(self) -> str: ...

    @abstractmethod
    def tokenize(self, text: str, language: Optional[str] = None) -> List[Subword]: ...

    @abstractmethod
    def encode(
        self, subwords: Sequence[Subword], language: Optional[str] = None
    ) -> np.ndarray: ...


# ── stub encoder ──────────────────────────────────────────────────────────────


def _seed_from(*parts) -> int:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def orthogonal_matrix(d: int, seed: int) -> np.ndarray:
    """Haar-distributed d x d orthogonal matrix (QR with sign correction)."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


class StubEncoder(EncoderAdapter):
    """
    Deterministic hash-based encoder.

    A subword vector depends only on the subword string, its position parity and
    the language transform (an orthogonal matrix, so norms are preserved).

    register_scale adds a fixed seeded direction of that length to every subword
    before the transform, so each language's vectors sit around their own
    offset. Zero keeps all languages centred on the origin.
    """

    def __init__(
        self,
        dimension: int = 768,
        seed: int = 0,
        subword_limit: int = 512,
        piece_length: int = 4,
        transforms: Optional[Dict[str, np.ndarray]] = None,
        register_scale: float = 0.0,
    ):
        if dimension < 1 or subword_limit < 1 or piece_length < 1:
            raise InputValidationError(
                "dimension, subword_limit and piece_length must be >= 1"
            )
        self.dimension = dimension
        self.subword_limit = subword_limit
        self.seed = seed
        self.piece_length = piece_length
        self.register_scale = float(register_scale)
        self.transforms: Dict[str, np.ndarray] = dict(transforms or {})
        for language, matrix in self.transforms.items():
            if matrix.shape != (dimension, dimension):
                raise InputValidationError(
                    f"transform for {language!r} must be {dimension}x{dimension}"
                )
        rng = np.random.default_rng(_seed_from(seed, "parity"))
        self._parity = rng.standard_normal((2, dimension)) / np.sqrt(dimension)
        direction = np.random.default_rng(_seed_from(seed, "register")).standard_normal(
            dimension
        )
        self._register = self.register_scale * direction / np.linalg.norm(direction)
        self._token_vector = lru_cache(maxsize=65536)(self._compute_token_vector)

    @classmethod
    def with_orthogonal_languages(
        cls, dimension: int, seed: int, languages: Iterable[str], **kwargs
    ) -> "StubEncoder":
        transforms = {
            lang: orthogonal_matrix(dimension, _seed_from(seed, "lang", lang))
            for lang in languages
        }
        return cls(dimension=dimension, seed=seed, transforms=transforms, **kwargs)

    @classmethod
    def from_config(cls, cfg: EncoderConfig) -> "StubEncoder":
        return cls.with_orthogonal_languages(
            cfg.dimension,
            cfg.seed,
            cfg.language_transforms,
            subword_limit=cfg.subword_limit,
            piece_length=cfg.piece_length,
            register_scale=cfg.register_scale,
        )

    @property
    def fingerprint(self) -> str:
        payload = {
            "kind": "stub",
            "dimension": self.dimension,
            "seed": self.seed,
            "piece_length": self.piece_length,
            "register_scale": self.register_scale,
            "transforms": {
                lang: hashlib.sha256(
                    np.ascontiguousarray(m, dtype="<f8").tobytes()
                ).hexdigest()[:16]
                for lang, m in sorted(self.transforms.items())
            },
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def tokenize(self, text: str, language: Optional[str] = None) -> List[Subword]:
        pieces: List[Subword] = []
        for match in _PIECE_RE.finditer(text):
            word, offset = match.group(), match.start()
            for i in range(0, len(word), self.piece_length):
                piece = word[i : i + self.piece_length]
                pieces.append(Subword(piece, offset + i, offset + i + len(piece)))
        return pieces

    def _compute_token_vector(self, text: str) -> np.ndarray:
        rng = np.random.default_rng(_seed_from(self.seed, "token", text))
        return rng.standard_normal(self.dimension) / np.sqrt(self.dimension)

    def encode(
        self, subwords: Sequence[Subword], language: Optional[str] = None
    ) -> np.ndarray:
        if not subwords:
            return np.zeros((0, self.dimension), dtype=np.float32)
        vectors = np.stack(
            [
                self._token_vector(s.text) + 0.1 * self._parity[i % 2]
                for i, s in enumerate(subwords)
            ]
        )
        vectors = vectors + self._register
        transform = self.transforms.get(language) if language is not None else None
        if transform is not None:
            vectors = vectors @ transform.T
        return vectors.astype(np.float32)


# ── transformer encoder ───────────────────────────────────────────────────────


class TransformerEncoder(EncoderAdapter):
    """
    Pretrained multilingual encoder loaded through sentence-transformers.
    Subwords come from the model tokenizer's offset mapping; vectors are the last
    hidden states with special tokens removed.
    """

    def __init__(
        self,
        model_name: str = "xlm-roberta-base",
        subword_limit: int = 512,
        device: Optional[str] = None,
    ):
        self.model_name = model_name
        self.device = device
        self._model = None
        # room for the two special tokens
        self.subword_limit = subword_limit - 2
        self.dimension = self.model.get_sentence_embedding_dimension()

    @property
    def model(self):
        if self._model is None:
            from sentence_transformers import SentenceTransformer

            app_logger.info(f"Loading encoder model {self.model_name}")
            self._model = SentenceTransformer(self.model_name, device=self.device)
            self._model.eval()
        return self._model

    @property
    def tokenizer(self):
        return self.model.tokenizer

    @property
    def fingerprint(self) -> str:
        payload = f"transformer\x1f{self.model_name}\x1f{self.dimension}"
        return hashlib.sha256(payload.encode()).hexdigest()

    def tokenize(self, text: str, language: Optional[str] = None) -> List[Subword]:
        encoded = self.tokenizer(
            text, add_special_tokens=False, return_offsets_mapping=True
        )
        return [
            Subword(text[start:end], start, end, token_id)
            for token_id, (start, end) in zip(
                encoded["input_ids"], encoded["offset_mapping"]
            )
            if end > start
        ]

    def encode(
        self, subwords: Sequence[Subword], language: Optional[str] = None
    ) -> np.ndarray:
        import torch

        if not subwords:
            return np.zeros((0, self.dimension), dtype=np.float32)
        ids = self.tokenizer.build_inputs_with_special_tokens(
            [s.token_id for s in subwords]
        )
        input_ids = torch.tensor([ids], device=self.model.device)
        with torch.no_grad():
            hidden = self.model[0].auto_model(input_ids=input_ids).last_hidden_state
        return hidden[0, 1 : 1 + len(subwords)].float().cpu().numpy()


def make_encoder(cfg: EncoderConfig) -> EncoderAdapter:
    if cfg.kind == "transformer":
        return TransformerEncoder(cfg.model_name, cfg.subword_limit)
    return StubEncoder.from_config(cfg)


# ── pooled representations ────────────────────────────────────────────────────


def max_pool(vectors: np.ndarray, dimension: int) -> np.ndarray:
    """Component-wise max over rows; zeros when there are none."""
    if len(vectors) == 0:
        return np.zeros(dimension, dtype=np.float32)
    return np.asarray(vectors, dtype=np.float32).max(axis=0)


def _mention_language(doc: Document, mention: Mention) -> str:
    return mention.language or doc.language


def mention_string_rep(
    enc: EncoderAdapter, doc: Document, mention: Mention
) -> np.ndarray:
    """Max pool over the sentence subwords whose offsets overlap the mention span."""
    language = _mention_language(doc, mention)
    subwords = enc.tokenize(doc.sentences[mention.sentence_index], language)
    overlap = [
        i
        for i, s in enumerate(subwords)
        if s.start < mention.end and s.end > mention.start
    ]
    if not overlap:
        raise AlignmentError(f"mention {mention.id}: span aligns to no subword")

    lo = 0
    limit = enc.subword_limit
    if len(subwords) > limit:
        # window the sentence around the mention
        span = overlap[-1] - overlap[0] + 1
        if span >= limit:
            lo = overlap[0]
        else:
            centred = overlap[0] - (limit - span) // 2
            lo = max(0, min(centred, len(subwords) - limit))
        subwords = subwords[lo : lo + limit]
    vectors = enc.encode(subwords, language)
    rows = [i - lo for i in overlap if 0 <= i - lo < len(subwords)]
    return max_pool(vectors[rows], enc.dimension)


def context_window(counts: Sequence[int], center: int, limit: int) -> Tuple[int, int]:
    """
    Grow a sentence window from `center`, alternating after/before (after first).
    An exhausted side is skipped; growth stops at the first addition that would
    exceed `limit`. Returns the half-open sentence range.
    """
    lo, hi = center, center + 1
    total = counts[center]
    take_after = True
    while lo > 0 or hi < len(counts):
        after = hi < len(counts) and (take_after or lo == 0)
        size = counts[hi] if after else counts[lo - 1]
        if total + size > limit:
            break
        total += size
        if after:
            hi += 1
        else:
            lo -= 1
        take_after = not after
    return lo, hi


def mention_context_rep(
    enc: EncoderAdapter, doc: Document, mention: Mention
) -> np.ndarray:
    language = _mention_language(doc, mention)
    tokenized = [enc.tokenize(s, language) for s in doc.sentences]
    center = mention.sentence_index
    if len(tokenized[center]) >= enc.subword_limit:
        window = tokenized[center][: enc.subword_limit]
    else:
        lo, hi = context_window([len(t) for t in tokenized], center, enc.subword_limit)
        window = [s for sentence in tokenized[lo:hi] for s in sentence]
    return max_pool(enc.encode(window, language), enc.dimension)


def entity_name_rep(enc: EncoderAdapter, entity: Entity) -> np.ndarray:
    subwords = enc.tokenize(entity.name, entity.language)[: enc.subword_limit]
    if not subwords:
        raise InputValidationError(f"entity {entity.id}: empty name")
    return max_pool(enc.encode(subwords, entity.language), enc.dimension)


def entity_context_rep(enc: EncoderAdapter, entity: Entity) -> np.ndarray:
    subwords = enc.tokenize(entity.description, entity.language)[: enc.subword_limit]
    return max_pool(enc.encode(subwords, entity.language), enc.dimension)


# ── bundles ───────────────────────────────────────────────────────────────────


@dataclass
class RepresentationBundle:
    m_s: np.ndarray
    e_s: np.ndarray
    m_c: np.ndarray
    e_c: np.ndarray
    popularity: float

    def __post_init__(self):
        for name in ("m_s", "e_s", "m_c", "e_c"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        if self.popularity < 0:
            raise ValueError("popularity must be non-negative")


def _text_digest(*texts: str) -> str:
    return hashlib.sha256("\x1f".join(texts).encode("utf-8")).hexdigest()[:24]


def mention_key(doc: Document, mention: Mention) -> str:
    """
    Cache address of a mention's vectors. Covers every input they read: the
    document text (the context window can reach any sentence), the sentence
    index, the span and the language.
    """
    return (
        f"{_mention_language(doc, mention)}|{doc.id}|{mention.sentence_index}"
        f"|{mention.start}|{mention.end}|{_text_digest(*doc.sentences)}"
    )


def entity_key(entity: Entity) -> str:
    digest = _text_digest(entity.name, entity.description)
    return f"{entity.language}|{entity.id}|{digest}"


class BundleBuilder:
    """Builds RepresentationBundles through a read-or-compute cache."""

    def __init__(
        self, encoder: EncoderAdapter, cache: Optional[RepresentationCache] = None
    ):
        self.encoder = encoder
        self.cache = cache or RepresentationCache(encoder.fingerprint)

    def mention_string(self, doc: Document, mention: Mention) -> np.ndarray:
        return self.cache.get_or_compute(
            "m_s",
            mention_key(doc, mention),
            lambda: mention_string_rep(self.encoder, doc, mention),
        )

    def mention_context(self, doc: Document, mention: Mention) -> np.ndarray:
        return self.cache.get_or_compute(
            "m_c",
            mention_key(doc, mention),
            lambda: mention_context_rep(self.encoder, doc, mention),
        )

    def entity_name(self, entity: Entity) -> np.ndarray:
        return self.cache.get_or_compute(
            "e_s", entity_key(entity), lambda: entity_name_rep(self.encoder, entity)
        )

    def entity_context(self, entity: Entity) -> np.ndarray:
        return self.cache.get_or_compute(
            "e_c", entity_key(entity), lambda: entity_context_rep(self.encoder, entity)
        )

    def build(
        self, kb: KnowledgeBase, doc: Document, mention: Mention, entity_id: str
    ) -> RepresentationBundle:
        entity = kb.get(entity_id)
        return RepresentationBundle(
            m_s=self.mention_string(doc, mention),
            e_s=self.entity_name(entity),
            m_c=self.mention_context(doc, mention),
            e_c=self.entity_context(entity),
            popularity=popularity_score(kb, entity_id),
        )

    def warm(
        self,
        mentions: Iterable[Tuple[Document, Mention]] = (),
        entities: Iterable[Entity] = (),
        workers: int = 4,
    ) -> None:
        """Precompute representations concurrently."""
        jobs = [(self.mention_string, (d, m)) for d, m in mentions]
        jobs += [(self.mention_context, args) for _, args in jobs]
        for entity in entities:
            jobs.append((self.entity_name, (entity,)))
            jobs.append((self.entity_context, (entity,)))
        if not jobs:
            return
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(fn, *args) for fn, args in jobs]
            progress = tqdm(
                futures, desc="Encoding", unit="rep", disable=not sys.stderr.isatty()
            )
            for future in progress:
                future.result()
        self.cache.flush()
        app_logger.debug(f"Warmed {len(jobs)} representations ({self.cache.stats()})")


def build_bundle(
    enc: EncoderAdapter,
    kb: KnowledgeBase,
    doc: Document,
    mention: Mention,
    entity: Entity,
    cache: Optional[RepresentationCache] = None,
) -> RepresentationBundle:
    return BundleBuilder(enc, cache).build(kb, doc, mention, entity.id)
