"""
Integration tests for the linking pipeline
"""

import pytest

from python_code.plink.errors import ConfigError
from python_code.plink.pipeline import LinkingPipeline
from python_code.plink.ranker import fit, init_model
from python_code.plink.schemas import NIL, Candidate, Mention, TriageConfig

pytestmark = pytest.mark.integration


@pytest.fixture
def pipeline(kb_with_anchors, stub_encoder, memory_cache):
    return LinkingPipeline(
        {"es": kb_with_anchors}, stub_encoder, TriageConfig(k=10, l=10), memory_cache
    )


class TestTriage:
    """Test triage through the pipeline"""

    def test_triage_dataset(self, pipeline, dataset):
        """Candidate sets, empty-set count and triage recall"""
        sets = dict(pipeline.triage_dataset(dataset))
        assert [c.entity_id for c in sets["m1"]] == ["Q1", "Q3"]
        assert sets["m4"] == []
        assert pipeline.stats.empty_candidate_sets == 1
        assert pipeline.stats.triage_recall == 1.0

    def test_precomputed_candidates_win(self, kb_with_anchors, stub_encoder, dataset):
        """A candidate dump replaces triage"""
        pipeline = LinkingPipeline(
            {"es": kb_with_anchors},
            stub_encoder,
            TriageConfig(),
            candidates={"m1": [Candidate(entity_id="Q2", prior=1.0)]},
        )
        candidates = pipeline.candidates_for(dataset.mentions[0])
        assert [c.entity_id for c in candidates] == ["Q2"]
        assert pipeline.stats.gold_missed == 1

    def test_unknown_language(self, pipeline):
        """A mention with no KB for its language is a config error"""
        mention = Mention(
            id="x",
            doc_id="d",
            sentence_index=0,
            start=0,
            end=1,
            surface="a",
            language="en",
        )
        with pytest.raises(ConfigError, match="en"):
            pipeline.candidates_for(mention)


class TestExamplesAndPrediction:
    """Test training examples and predictions"""

    def test_build_examples(self, pipeline, dataset):
        """NIL mentions are skipped; each example gets its negatives"""
        examples = pipeline.build_examples([dataset], n_negatives=2, rng_seed=0)
        assert [e.mention_id for e in examples] == ["m1", "m2", "m3"]
        assert all(len(e.negatives) == 2 for e in examples)
        assert pipeline.stats.nil_skipped == 1
        assert examples[0].positive.popularity == 2.0

    def test_examples_are_reproducible(self, kb_with_anchors, stub_encoder, dataset):
        """Same seed, same negatives"""
        runs = []
        for _ in range(2):
            kbs = {"es": kb_with_anchors}
            pipeline = LinkingPipeline(kbs, stub_encoder, TriageConfig())
            examples = pipeline.build_examples([dataset], n_negatives=2, rng_seed=4)
            runs.append([[n.e_s.tobytes() for n in e.negatives] for e in examples])
        assert runs[0] == runs[1]

    def test_nn_baseline_predictions(self, pipeline, dataset):
        """Without a model candidates are scored by string similarity"""
        predictions = {p.mention_id: p for p in pipeline.predict(dataset)}
        assert predictions["m4"].predicted == NIL
        assert predictions["m4"].score is None
        # single candidate with the default threshold of -1
        assert predictions["m2"].predicted == "Q4"
        assert predictions["m3"].predicted == "Q2"
        assert -1.0 <= predictions["m1"].score <= 1.0

    def test_lowest_threshold_nil_only_without_candidates(
        self, pipeline, dataset, toy_ranker_config
    ):
        """At -1 exactly the mentions with no candidates come out NIL"""
        model = init_model(toy_ranker_config)
        sets = dict(pipeline.triage_dataset(dataset))
        for p in pipeline.predict(dataset, model, threshold=-1.0):
            assert p.is_nil == (not sets[p.mention_id])

    def test_model_predictions(self, pipeline, dataset, toy_ranker_config):
        """One prediction per mention, in dataset order"""
        model = init_model(toy_ranker_config)
        fit(model, toy_ranker_config, pipeline.build_examples([dataset], 2, 0))
        predictions = pipeline.predict(dataset, model)
        assert [p.mention_id for p in predictions] == ["m1", "m2", "m3", "m4"]
        assert predictions[0].predicted in {"Q1", "Q3"}

    def test_dev_evaluator(self, pipeline, dataset, toy_ranker_config):
        """The dev callback returns an F1"""
        f1 = pipeline.dev_evaluator(dataset)(init_model(toy_ranker_config))
        assert 0.0 <= f1 <= 1.0

    def test_stats_dict(self, pipeline, dataset):
        """Counters and cache stats in one dict"""
        pipeline.predict(dataset)
        stats = pipeline.stats_dict()
        assert stats["predictions"] == 4
        assert stats["cache"]["backend"] == "memory"
        assert "triage_recall" in stats
