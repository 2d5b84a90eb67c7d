"""
End-to-end linking pipeline.

Composes triage, representation building, scoring and NIL prediction over one or
more same-language KBs (keyed by language code):

  candidates_for()   → triage (or a precomputed candidate dump)
  build_examples()   → TrainingExamples with fixed sampled negatives
  predict()          → Predictions through the ranker or the cosine baseline
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from cache import RepresentationCache
from logger import app_logger

from .corpus import Dataset
from .encoder import BundleBuilder, EncoderAdapter
from .errors import ConfigError
from .evaluation import evaluate, predict_with_nil
from .kbstore import InvertedIndex, KnowledgeBase
from .ranker import (
    RankerModel,
    TrainingExample,
    nn_baseline_score,
    sample_negatives,
    score_batch,
)
from .schemas import Candidate, Document, Mention, Prediction, TriageConfig
from .triage import triage


@dataclass
class _PipelineStats:
    """Counters accumulated over the lifetime of one LinkingPipeline."""

    mentions_triaged: int = 0
    empty_candidate_sets: int = 0
    gold_in_candidates: int = 0
    gold_missed: int = 0
    nil_skipped: int = 0
    unknown_gold: int = 0
    examples_built: int = 0
    predictions: int = 0

    @property
    def triage_recall(self) -> Optional[float]:
        seen = self.gold_in_candidates + self.gold_missed
        return self.gold_in_candidates / seen if seen else None


class LinkingPipeline:
    def __init__(
        self,
        kbs: Mapping[str, KnowledgeBase],
        encoder: EncoderAdapter,
        triage_cfg: TriageConfig,
        cache: Optional[RepresentationCache] = None,
        indexes: Optional[Mapping[str, InvertedIndex]] = None,
        candidates: Optional[Mapping[str, List[Candidate]]] = None,
    ):
        self.kbs = dict(kbs)
        self.encoder = encoder
        self.triage_cfg = triage_cfg
        self.builder = BundleBuilder(encoder, cache)
        self.indexes = dict(indexes or {})
        self.precomputed = dict(candidates or {})
        self.stats = _PipelineStats()

    def kb_for(self, language: str) -> KnowledgeBase:
        try:
            return self.kbs[language]
        except KeyError:
            raise ConfigError(
                f"no knowledge base loaded for language {language!r}"
            ) from None

    def index_for(self, language: str) -> InvertedIndex:
        if language not in self.indexes:
            self.indexes[language] = self.kb_for(language).name_index
        return self.indexes[language]

    # ── triage ──

    def candidates_for(self, mention: Mention) -> List[Candidate]:
        if mention.id in self.precomputed:
            candidates = self.precomputed[mention.id]
        else:
            language = mention.language or ""
            candidates = triage(
                self.kb_for(language),
                mention.surface,
                self.triage_cfg,
                self.index_for(language),
            )
        self.stats.mentions_triaged += 1
        if not candidates:
            self.stats.empty_candidate_sets += 1
        if not mention.is_nil:
            if any(c.entity_id == mention.gold for c in candidates):
                self.stats.gold_in_candidates += 1
            else:
                self.stats.gold_missed += 1
        return candidates

    def triage_dataset(self, dataset: Dataset) -> List[Tuple[str, List[Candidate]]]:
        result = [(m.id, self.candidates_for(m)) for m in dataset.mentions]
        recall = self.stats.triage_recall
        app_logger.info(
            f"Triaged {len(result)} mentions "
            f"({self.stats.empty_candidate_sets} empty), "
            f"recall {recall if recall is not None else 'n/a'}"
        )
        return result

    # ── training data ──

    def warm(self, datasets: Sequence[Dataset]) -> None:
        mentions = [(ds.document_for(m), m) for ds in datasets for m in ds.mentions]
        entities = [e for kb in self.kbs.values() for e in kb.entities.values()]
        self.builder.warm(mentions, entities)

    def build_examples(
        self, datasets: Sequence[Dataset], n_negatives: int, rng_seed: int
    ) -> List[TrainingExample]:
        """
        One example per non-NIL mention whose gold is in its KB. Negatives are
        sampled once here and stay fixed for the whole run.
        """
        rng = np.random.default_rng(rng_seed)
        examples: List[TrainingExample] = []
        for ds in datasets:
            for mention in ds.mentions:
                if mention.is_nil:
                    self.stats.nil_skipped += 1
                    continue
                kb = self.kb_for(mention.language or "")
                if mention.gold not in kb:
                    self.stats.unknown_gold += 1
                    continue
                doc = ds.document_for(mention)
                candidate_ids = [c.entity_id for c in self.candidates_for(mention)]
                negatives = sample_negatives(
                    candidate_ids, mention.gold, n_negatives, kb, rng
                )
                examples.append(
                    TrainingExample(
                        mention_id=mention.id,
                        language=kb.language,
                        positive=self.builder.build(kb, doc, mention, mention.gold),
                        negatives=[
                            self.builder.build(kb, doc, mention, e) for e in negatives
                        ],
                    )
                )
        if self.stats.unknown_gold:
            app_logger.warning(
                f"Skipped {self.stats.unknown_gold} training mention(s) "
                "whose gold is not in the KB"
            )
        self.stats.examples_built += len(examples)
        self.builder.cache.flush()
        app_logger.info(
            f"Built {len(examples)} training examples "
            f"({self.stats.nil_skipped} NIL mentions skipped)"
        )
        return examples

    # ── scoring ──

    def score_candidates(
        self,
        doc: Document,
        mention: Mention,
        candidate_ids: Sequence[str],
        model: Optional[RankerModel] = None,
    ) -> Dict[str, float]:
        """Ranker scores, or cosine(m_s, e_s) when no model is given."""
        if not candidate_ids:
            return {}
        kb = self.kb_for(mention.language or doc.language)
        bundles = [self.builder.build(kb, doc, mention, e) for e in candidate_ids]
        if model is None:
            return {e: nn_baseline_score(b) for e, b in zip(candidate_ids, bundles)}
        with torch.no_grad():
            scores = score_batch(model, bundles, train_mode=False)
        return {e: float(s) for e, s in zip(candidate_ids, scores)}

    def predict(
        self,
        dataset: Dataset,
        model: Optional[RankerModel] = None,
        threshold: float = -1.0,
    ) -> List[Prediction]:
        predictions = []
        for mention in dataset.mentions:
            candidate_ids = [c.entity_id for c in self.candidates_for(mention)]
            doc = dataset.document_for(mention)
            scores = self.score_candidates(doc, mention, candidate_ids, model)
            predictions.append(
                predict_with_nil(
                    scores.__getitem__, mention.id, candidate_ids, threshold
                )
            )
        self.stats.predictions += len(predictions)
        self.builder.cache.flush()
        return predictions

    def dev_evaluator(self, dataset: Dataset, threshold: float = -1.0):
        """Callable returning dev F1 for a model, for epoch selection."""

        def evaluate_dev(model: RankerModel) -> float:
            predictions = self.predict(dataset, model, threshold)
            return evaluate(dataset.mentions, predictions).f1

        return evaluate_dev

    def stats_dict(self) -> dict:
        return {
            **asdict(self.stats),
            "triage_recall": self.stats.triage_recall,
            "cache": self.builder.cache.stats(),
        }
