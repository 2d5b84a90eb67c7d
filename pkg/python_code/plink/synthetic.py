"""
Synthetic two-language linking world for transfer experiments.

Both languages share the same latent tokens; the stub encoder adds a fixed
register offset to every subword and rotates the result by each language's own
orthogonal matrix. The rotation leaves name-to-mention matching intact but moves
each language to its own region of the vector space, so a ranker fitted on the
source language sees target vectors far from anything it was trained on. A
language-invariant shared layer can close that gap.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from cache import RepresentationCache
from logger import app_logger

from .adversarial import UnlabeledPool, prepare_ranker_config, train_with_adversary
from .corpus import Dataset
from .encoder import StubEncoder
from .evaluation import evaluate
from .kbstore import KnowledgeBase
from .pipeline import LinkingPipeline
from .ranker import fit, init_model
from .schemas import (
    AdversarialConfig,
    Document,
    Entity,
    Mention,
    RankerConfig,
    TriageConfig,
)

REGISTER_SCALE = 4.0
CLASSIFIER_LEARNING_RATE = 1e-2


@dataclass
class TransferWorld:
    languages: Tuple[str, str]
    kbs: Dict[str, KnowledgeBase]
    datasets: Dict[str, Dataset]
    encoder: StubEncoder
    pool: UnlabeledPool


def _entity(language: str, concept: int, member: int) -> Entity:
    # no description: e_c is zero and contexts carry no signal
    return Entity(
        id=f"{language}:{concept:03d}-{member}",
        language=language,
        name=f"w{concept:03d} e{concept:03d}{member}",
    )


def make_transfer_world(
    seed: int = 0,
    n_concepts: int = 200,
    per_concept: int = 5,
    n_mentions: int = 1000,
    dimension: int = 32,
    languages: Tuple[str, str] = ("en", "xx"),
    register_scale: float = REGISTER_SCALE,
) -> TransferWorld:
    """
    n_concepts groups of per_concept entities per language. The members of a
    group share their first name token, so triage returns the whole group and
    the ranker has to pick the member whose full name the mention spells out.
    Each mention is its own one-sentence document.
    """
    rng = np.random.default_rng(seed)
    encoder = StubEncoder.with_orthogonal_languages(
        dimension, seed, languages, piece_length=8, register_scale=register_scale
    )
    kbs: Dict[str, KnowledgeBase] = {}
    datasets: Dict[str, Dataset] = {}
    for language in languages:
        entities = [
            _entity(language, c, j)
            for c in range(n_concepts)
            for j in range(per_concept)
        ]
        kbs[language] = KnowledgeBase(entities, language=language)

        documents: Dict[str, Document] = {}
        mentions = []
        for i in range(n_mentions):
            concept = int(rng.integers(n_concepts))
            member = int(rng.integers(per_concept))
            entity = _entity(language, concept, member)
            doc_id = f"{language}-doc{i:04d}"
            documents[doc_id] = Document(
                id=doc_id, language=language, sentences=[entity.name]
            )
            mentions.append(
                Mention(
                    id=f"{doc_id}:0",
                    doc_id=doc_id,
                    sentence_index=0,
                    start=0,
                    end=len(entity.name),
                    surface=entity.name,
                    gold=entity.id,
                    language=language,
                )
            )
        datasets[language] = Dataset(
            documents=documents, mentions=mentions, split="train"
        )

    pool = UnlabeledPool.from_kbs(kbs.values(), kind="name")
    return TransferWorld(
        languages=languages, kbs=kbs, datasets=datasets, encoder=encoder, pool=pool
    )


def transfer_ranker_config(dimension: int, seed: int, epochs: int) -> RankerConfig:
    # contexts are uninformative here, so the context block is a single unit
    return RankerConfig(
        input_dim=dimension,
        string_layers=[dimension],
        context_layers=[1],
        final_layers=[dimension],
        dropout=0.0,
        learning_rate=1e-3,
        optimizer="adam",
        margin=0.5,
        batch_size=32,
        epochs=epochs,
        rng_seed=seed,
    )


def transfer_adversarial_config(
    world: TransferWorld, adv_lambda: float
) -> AdversarialConfig:
    return AdversarialConfig(
        adv_lambda=adv_lambda,
        languages=world.languages,
        classifier_width=world.encoder.dimension,
        classifier_learning_rate=CLASSIFIER_LEARNING_RATE,
    )


def run_transfer(
    world: TransferWorld,
    adv_lambda: float,
    seed: int = 0,
    epochs: int = 10,
    cache: Optional[RepresentationCache] = None,
) -> float:
    """
    Train on the source language, return linking recall on the target language.
    Both settings build the same architecture from the same seed; lambda 0 just
    never runs the classifier.
    """
    source, target = world.languages
    dimension = world.encoder.dimension
    adv_cfg = transfer_adversarial_config(world, adv_lambda)
    ranker_cfg = prepare_ranker_config(
        transfer_ranker_config(dimension, seed, epochs), adv_cfg
    )
    model = init_model(ranker_cfg, seed)

    cache = cache or RepresentationCache(
        world.encoder.fingerprint, max_memory_entries=100_000
    )
    triage_cfg = TriageConfig(k=10, l=10)
    pipeline = LinkingPipeline(world.kbs, world.encoder, triage_cfg, cache)
    examples = pipeline.build_examples(
        [world.datasets[source]], ranker_cfg.n_negatives, seed
    )

    if adv_lambda > 0:
        train_with_adversary(
            model, adv_cfg, ranker_cfg, examples, world.pool, world.encoder, cache
        )
    else:
        fit(model, ranker_cfg, examples)

    dataset = world.datasets[target]
    recall = evaluate(dataset.mentions, pipeline.predict(dataset, model)).recall
    app_logger.info(
        f"Transfer {source}→{target} (lambda={adv_lambda}, seed={seed}): "
        f"recall {recall:.4f}"
    )
    return recall
