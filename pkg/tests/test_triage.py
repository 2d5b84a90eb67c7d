"""
Tests for candidate triage and two-stage retrieval
"""

import pytest

from python_code.plink.kbstore import KnowledgeBase
from python_code.plink.schemas import Candidate, Entity, TriageConfig
from python_code.plink.triage import (
    allocate_proportional,
    estimate_prior,
    generate_candidates,
    read_candidates,
    triage,
    two_stage_retrieve,
    write_candidates,
)


def _kb(*specs):
    return KnowledgeBase(
        [
            Entity(id=i, language="en", name=name, wiki_title=title)
            for i, name, title in specs
        ]
    )


@pytest.fixture
def greek_kb():
    kb = _kb(
        ("A1", "alpha one", "Alpha"),
        ("A2", "alpha two", None),
        ("A3", "alpha three", None),
        ("B1", "beta one", "Beta"),
        ("B2", "beta two", None),
    )
    kb.add_anchor("x", "A1", 8)
    kb.add_anchor("x", "B1", 2)
    return kb


class TestPriors:
    """Test estimate_prior and generate_candidates"""

    def test_prior_is_anchor_share(self, kb_with_anchors):
        """Prior is the share of anchors with this surface"""
        priors = estimate_prior(kb_with_anchors, "Senado")
        assert [c.entity_id for c in priors] == ["Q1", "Q3"]
        assert [c.prior for c in priors] == pytest.approx([0.8, 0.2])

    def test_top_k(self):
        """Only the k most likely candidates are kept"""
        kb = _kb(*[(f"E{i:02d}", f"e{i}", None) for i in range(12)])
        for i in range(12):
            kb.add_anchor("x", f"E{i:02d}", 12 - i)
        candidates = generate_candidates(kb, "x", TriageConfig(k=10, l=10))
        assert len(candidates) == 10
        assert candidates[0].entity_id == "E00"

    def test_ties_break_by_id(self):
        """Equal counts go by id"""
        kb = _kb(("b", "b", None), ("a", "a", None))
        kb.add_anchor("s", "b", 1)
        kb.add_anchor("s", "a", 1)
        assert [c.entity_id for c in estimate_prior(kb, "s")] == ["a", "b"]

    def test_unseen_surface_falls_back_to_index(self, kb):
        """An unseen surface gets uniform priors over index hits"""
        candidates = generate_candidates(kb, "Senado", TriageConfig(k=10, l=10))
        assert [c.entity_id for c in candidates] == ["Q1", "Q3"]
        assert [c.prior for c in candidates] == [0.5, 0.5]

    def test_nothing_matches(self, kb):
        """No anchors and no index hits gives no candidates"""
        assert generate_candidates(kb, "zzz", TriageConfig()) == []

    def test_most_likely_candidate_first(self, kb_with_anchors):
        """The first candidate is the argmax of the prior"""
        for surface, counts in kb_with_anchors.anchor_stats.items():
            best = max(counts, key=counts.get)
            candidates = generate_candidates(kb_with_anchors, surface, TriageConfig())
            assert candidates[0].entity_id == best


class TestAllocation:
    """Test allocate_proportional"""

    def test_proportional(self):
        """Slots follow the prior shares"""
        assert allocate_proportional([0.8, 0.2], 10) == [8, 2]

    def test_round_half_up(self):
        """Halves round up"""
        assert allocate_proportional([0.6, 0.4], 5) == [3, 2]

    def test_overflow_trimmed_from_last(self):
        """Extra slots come off the last titles first"""
        # rounds to [3, 2, 1]; the last title keeps its minimum slot
        assert allocate_proportional([0.5, 0.3, 0.2], 5) == [3, 1, 1]

    def test_every_title_gets_a_slot(self):
        """A tiny share still gets one slot"""
        assert allocate_proportional([0.99, 0.01], 10) == [9, 1]

    def test_empty(self):
        """No titles, no slots"""
        assert allocate_proportional([], 10) == []


class TestTwoStage:
    """Test index-backed two-stage retrieval"""

    def test_titles_expand_through_index(self, greek_kb):
        """Each title pulls its share of index neighbours"""
        cfg = TriageConfig(k=2, l=4, two_stage=True)
        candidates = two_stage_retrieve(greek_kb, greek_kb.name_index, "x", cfg)
        assert [c.entity_id for c in candidates] == ["A1", "A2", "A3", "B1"]
        assert sum(c.prior for c in candidates) == pytest.approx(1.0)
        assert candidates[0].prior == pytest.approx(0.8 / 3)

    def test_output_capped_at_l(self, greek_kb):
        """No more than l candidates"""
        cfg = TriageConfig(k=2, l=2, two_stage=True)
        assert len(two_stage_retrieve(greek_kb, greek_kb.name_index, "x", cfg)) == 2

    def test_missed_title_falls_back_to_surface(self):
        """A title the index cannot find is replaced by a surface query"""
        kb = _kb(
            ("P1", "!!!", None), ("Z1", "zeta one", None), ("Z2", "zeta two", None)
        )
        kb.add_anchor("zeta", "P1", 1)
        cfg = TriageConfig(k=1, l=4, two_stage=True)
        candidates = two_stage_retrieve(kb, kb.name_index, "zeta", cfg)
        pairs = [(c.entity_id, c.prior) for c in candidates]
        assert pairs == [("Z1", 0.5), ("Z2", 0.5)]

    def test_no_candidates_at_all(self, greek_kb):
        """Nothing anywhere gives an empty list"""
        cfg = TriageConfig(k=2, l=4, two_stage=True)
        assert two_stage_retrieve(greek_kb, greek_kb.name_index, "gamma", cfg) == []

    def test_priors_stay_in_range(self, greek_kb):
        """Priors in [0, 1] with no duplicate ids"""
        cfg = TriageConfig(k=2, l=4, two_stage=True)
        candidates = two_stage_retrieve(greek_kb, greek_kb.name_index, "alpha", cfg)
        assert 0 < len(candidates) <= 4
        assert all(0 <= c.prior <= 1 for c in candidates)
        assert len({c.entity_id for c in candidates}) == len(candidates)

    def test_dispatch(self, greek_kb):
        """two_stage selects the retrieval path"""
        single = triage(greek_kb, "x", TriageConfig(k=2, l=4))
        assert [c.entity_id for c in single] == ["A1", "B1"]
        double = triage(greek_kb, "x", TriageConfig(k=2, l=4, two_stage=True))
        assert len(double) == 4

    def test_l_must_cover_k(self):
        """l below k is a config error"""
        with pytest.raises(ValueError):
            TriageConfig(k=5, l=2)


class TestCandidateFiles:
    """Test candidate dumps"""

    def test_write_and_read(self, tmp_path):
        """Candidate dumps load back equal"""
        pairs = [("m1", [Candidate(entity_id="Q1", prior=0.8)]), ("m2", [])]
        assert write_candidates(tmp_path / "c.jsonl", pairs) == 2
        assert read_candidates(tmp_path / "c.jsonl") == dict(pairs)
