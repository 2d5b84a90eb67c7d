"""
Tests for subword encoders and pooled representations
"""

import re

import numpy as np
import pytest

from cache import RepresentationCache
from python_code.plink.encoder import (
    BundleBuilder,
    EncoderAdapter,
    RepresentationBundle,
    StubEncoder,
    Subword,
    context_window,
    entity_context_rep,
    entity_key,
    entity_name_rep,
    make_encoder,
    max_pool,
    mention_context_rep,
    mention_key,
    mention_string_rep,
)
from python_code.plink.errors import (
    AlignmentError,
    EntityNotFoundError,
    InputValidationError,
)
from python_code.plink.schemas import Document, EncoderConfig, Entity, Mention


def token_vector(text):
    return np.array([len(text), -len(text), ord(text[0]) % 7], dtype=np.float32)


class FakeEncoder(EncoderAdapter):
    """Whitespace tokens; each vector is a fixed function of the token text."""

    dimension = 3

    def __init__(self, subword_limit=512):
        self.subword_limit = subword_limit
        self.encoded_lengths = []

    @property
    def fingerprint(self):
        return "fake"

    def tokenize(self, text, language=None):
        return [
            Subword(m.group(), m.start(), m.end()) for m in re.finditer(r"\S+", text)
        ]

    def encode(self, subwords, language=None):
        self.encoded_lengths.append(len(subwords))
        if not subwords:
            return np.zeros((0, 3), dtype=np.float32)
        return np.stack([token_vector(s.text) for s in subwords])


def _mention(start, end, surface, sentence_index=0):
    return Mention(
        id="m",
        doc_id="d",
        sentence_index=sentence_index,
        start=start,
        end=end,
        surface=surface,
    )


class TestMaxPool:
    """Test max_pool"""

    def test_componentwise_max(self):
        """Each component takes its own row maximum"""
        rows = np.array([[1, -2, 3], [0, 5, -1]], dtype=np.float32)
        np.testing.assert_array_equal(max_pool(rows, 3), [1, 5, 3])

    def test_empty_gives_zeros(self):
        """No rows pools to the zero vector"""
        pooled = max_pool(np.zeros((0, 4)), 4)
        assert pooled.shape == (4,)
        assert not pooled.any()

    def test_matches_brute_force(self):
        """1000 random matrices against a per-component loop"""
        rng = np.random.default_rng(21)
        for _ in range(1000):
            d = int(rng.integers(1, 9))
            n = int(rng.integers(0, 7))
            rows = rng.standard_normal((n, d)).astype(np.float32)
            expected = [
                max((rows[i, j] for i in range(n)), default=0.0) for j in range(d)
            ]
            pooled = max_pool(rows, d)
            assert pooled.shape == (d,)
            np.testing.assert_array_equal(pooled, np.array(expected, dtype=np.float32))


class TestMentionString:
    """Test the mention string representation"""

    def test_pools_overlapping_subwords_only(self):
        """Only the subwords under the span are pooled"""
        doc = Document(id="d", language="en", sentences=["aa b cccc"])
        rep = mention_string_rep(FakeEncoder(), doc, _mention(3, 9, "b cccc"))
        expected = np.maximum(token_vector("b"), token_vector("cccc"))
        np.testing.assert_array_equal(rep, expected)

    def test_partial_overlap_counts(self):
        """A subword touched by one character is included"""
        doc = Document(id="d", language="en", sentences=["aa b cccc"])
        rep = mention_string_rep(FakeEncoder(), doc, _mention(1, 2, "a"))
        np.testing.assert_array_equal(rep, token_vector("aa"))

    def test_span_over_whitespace_raises(self):
        """A span covering no subword is an alignment error"""
        doc = Document(id="d", language="en", sentences=["a  b"])
        with pytest.raises(AlignmentError):
            mention_string_rep(FakeEncoder(), doc, _mention(2, 3, " "))

    def test_long_sentence_is_windowed(self):
        """600 subwords with a limit of 512: one window still covering the mention"""
        words = [f"t{i}" for i in range(600)]
        sentence = " ".join(words)
        start = sentence.index("t550 ")
        doc = Document(id="d", language="en", sentences=[sentence])
        enc = FakeEncoder(subword_limit=512)
        rep = mention_string_rep(enc, doc, _mention(start, start + 4, "t550"))
        assert enc.encoded_lengths == [512]
        np.testing.assert_array_equal(rep, token_vector("t550"))


class TestContextWindow:
    """Test sentence window growth"""

    def test_after_is_taken_first(self):
        """The next sentence is tried before the previous one"""
        assert context_window([3, 3, 3], 1, 6) == (1, 3)

    def test_grows_both_sides(self):
        """With room, both neighbours join"""
        assert context_window([3, 3, 3], 1, 9) == (0, 3)

    def test_center_only_when_nothing_fits(self):
        """The centre sentence alone when no neighbour fits"""
        assert context_window([3, 3, 3], 1, 5) == (1, 2)

    def test_exhausted_side_is_skipped(self):
        """Growth continues on the side that has sentences left"""
        assert context_window([2, 2, 2, 2], 3, 100) == (0, 4)
        assert context_window([2, 2, 2, 2], 0, 100) == (0, 4)

    def test_stops_at_first_overflow(self):
        """Growth ends at the first neighbour that does not fit"""
        # the sentence before would fit, but the one after overflows first
        assert context_window([1, 2, 10, 1], 1, 5) == (1, 2)

    def test_alternation(self):
        """After, before, after"""
        assert context_window([1, 5, 1, 1], 1, 7) == (0, 3)


class TestMentionContext:
    """Test the mention context representation"""

    def test_uses_neighbouring_sentences(self):
        """The window reaches into the surrounding sentences"""
        doc = Document(id="d", language="en", sentences=["zzzzz", "a", "bb"])
        enc = FakeEncoder(subword_limit=10)
        rep = mention_context_rep(enc, doc, _mention(0, 1, "a", sentence_index=1))
        assert enc.encoded_lengths == [3]
        expected = np.max([token_vector(t) for t in ("zzzzz", "a", "bb")], axis=0)
        np.testing.assert_array_equal(rep, expected)

    def test_oversized_sentence_is_truncated(self):
        """A sentence over the limit is cut to its first subwords"""
        doc = Document(id="d", language="en", sentences=["x", "a bb ccc dddd", "y"])
        enc = FakeEncoder(subword_limit=3)
        rep = mention_context_rep(enc, doc, _mention(0, 1, "a", sentence_index=1))
        assert enc.encoded_lengths == [3]
        expected = np.max([token_vector(t) for t in ("a", "bb", "ccc")], axis=0)
        np.testing.assert_array_equal(rep, expected)


class TestEntityReps:
    """Test entity name and description representations"""

    def test_empty_description_gives_zeros(self):
        """No description, zero context vector"""
        rep = entity_context_rep(FakeEncoder(), Entity(id="E", language="en", name="x"))
        np.testing.assert_array_equal(rep, np.zeros(3))

    def test_empty_name_raises(self):
        """A blank name cannot be encoded"""
        with pytest.raises(InputValidationError, match="E"):
            entity_name_rep(FakeEncoder(), Entity(id="E", language="en", name="  "))

    def test_name_pools_all_subwords(self):
        """Every name subword is pooled"""
        rep = entity_name_rep(FakeEncoder(), Entity(id="E", language="en", name="ab c"))
        expected = np.maximum(token_vector("ab"), token_vector("c"))
        np.testing.assert_array_equal(rep, expected)


class TestStubEncoder:
    """Test the deterministic stub encoder"""

    def test_piece_offsets(self, stub_encoder):
        """Words split into fixed-length pieces with character offsets"""
        pieces = stub_encoder.tokenize("Senado")
        assert [(p.text, p.start, p.end) for p in pieces] == [
            ("Sena", 0, 4),
            ("do", 4, 6),
        ]

    def test_deterministic(self):
        """Same seed, same vectors"""
        a = StubEncoder(dimension=8, seed=1)
        b = StubEncoder(dimension=8, seed=1)
        subwords = a.tokenize("el Senado")
        np.testing.assert_array_equal(a.encode(subwords), b.encode(subwords))

    def test_seed_changes_vectors(self):
        """Another seed gives other vectors and another fingerprint"""
        a = StubEncoder(dimension=8, seed=1)
        b = StubEncoder(dimension=8, seed=2)
        subwords = a.tokenize("Senado")
        assert not np.allclose(a.encode(subwords), b.encode(subwords))
        assert a.fingerprint != b.fingerprint

    def test_position_parity(self, stub_encoder):
        """Equal pieces at equal parity encode the same"""
        vectors = stub_encoder.encode(stub_encoder.tokenize("ab ab x ab"))
        assert not np.allclose(vectors[0], vectors[1])
        np.testing.assert_allclose(vectors[1], vectors[3])

    def test_language_transform_preserves_norms(self):
        """The language transform is a rotation"""
        enc = StubEncoder.with_orthogonal_languages(16, 4, ["xx"])
        subwords = enc.tokenize("Congreso nacional")
        plain = enc.encode(subwords)
        moved = enc.encode(subwords, "xx")
        np.testing.assert_allclose(
            np.linalg.norm(plain, axis=1), np.linalg.norm(moved, axis=1), rtol=1e-5
        )
        assert not np.allclose(plain, moved)

    def test_register_is_a_constant_offset(self):
        """register_scale shifts every subword by one vector of that length"""
        plain = StubEncoder(dimension=8, seed=1)
        shifted = StubEncoder(dimension=8, seed=1, register_scale=3.0)
        subwords = plain.tokenize("Senado convocó a Madrid")
        offsets = shifted.encode(subwords) - plain.encode(subwords)
        expected = offsets[:1].repeat(len(offsets), axis=0)
        np.testing.assert_allclose(offsets, expected, atol=1e-5)
        assert np.linalg.norm(offsets[0]) == pytest.approx(3.0, rel=1e-5)
        assert plain.fingerprint != shifted.fingerprint

    def test_output_dtype(self, stub_encoder):
        """Vectors come out as float32"""
        assert stub_encoder.encode(stub_encoder.tokenize("Madrid")).dtype == np.float32

    def test_make_encoder_defaults_to_stub(self):
        """Without a model name the stub is built"""
        enc = make_encoder(EncoderConfig(dimension=8, language_transforms=["en"]))
        assert isinstance(enc, StubEncoder)
        assert set(enc.transforms) == {"en"}

    def test_invalid_dimension(self):
        """Dimension must be positive"""
        with pytest.raises(InputValidationError):
            StubEncoder(dimension=0)


def one_sentence_doc(sentence):
    doc = Document(id="d1", language="es", sentences=[sentence])
    mention = Mention(
        id="m1", doc_id="d1", sentence_index=0, start=0, end=6, surface=sentence[:6]
    )
    return doc, mention


class TestBundleBuilder:
    """Test bundle construction through the cache"""

    def test_build_bundle(self, stub_encoder, memory_cache, kb, dataset):
        """All four vectors plus popularity"""
        builder = BundleBuilder(stub_encoder, memory_cache)
        mention = dataset.mentions[0]
        bundle = builder.build(kb, dataset.document_for(mention), mention, "Q1")
        assert bundle.popularity == 2.0
        assert bundle.m_s.shape == bundle.e_c.shape == (8,)

    def test_second_build_hits_cache(self, stub_encoder, memory_cache, kb, dataset):
        """A repeated build computes nothing"""
        builder = BundleBuilder(stub_encoder, memory_cache)
        mention = dataset.mentions[0]
        doc = dataset.document_for(mention)
        first = builder.build(kb, doc, mention, "Q1")
        misses = memory_cache.misses
        second = builder.build(kb, doc, mention, "Q1")
        assert memory_cache.misses == misses
        np.testing.assert_array_equal(first.m_c, second.m_c)

    def test_unknown_entity(self, stub_encoder, kb, dataset):
        """An id outside the KB raises"""
        mention = dataset.mentions[0]
        doc = dataset.document_for(mention)
        with pytest.raises(EntityNotFoundError):
            BundleBuilder(stub_encoder).build(kb, doc, mention, "Q404")

    def test_warm_fills_cache(self, stub_encoder, memory_cache, kb, dataset):
        """Warming computes two vectors per mention and two per entity"""
        builder = BundleBuilder(stub_encoder, memory_cache)
        pairs = [(dataset.document_for(m), m) for m in dataset.mentions]
        builder.warm(pairs, kb.entities.values(), workers=2)
        assert memory_cache.misses == 2 * len(pairs) + 2 * len(kb)

    def test_non_finite_bundle_rejected(self):
        """NaN in a vector is refused"""
        ok = np.zeros(2)
        with pytest.raises(ValueError, match="m_s"):
            RepresentationBundle(
                m_s=np.array([np.nan, 0]), e_s=ok, m_c=ok, e_c=ok, popularity=0.0
            )

    def test_edited_document_is_not_served_stale(self, tmp_path, stub_encoder):
        """Same document id and span with new text gets fresh vectors from disk"""
        first_doc, first_mention = one_sentence_doc("Senado convocó.")
        cache = RepresentationCache(stub_encoder.fingerprint, tmp_path / "c")
        builder = BundleBuilder(stub_encoder, cache)
        old = builder.mention_string(first_doc, first_mention)
        cache.flush()

        doc, mention = one_sentence_doc("Madrid creció.")
        reopened = RepresentationCache(stub_encoder.fingerprint, tmp_path / "c")
        new = BundleBuilder(stub_encoder, reopened).mention_string(doc, mention)
        fresh = mention_string_rep(stub_encoder, doc, mention)
        np.testing.assert_array_equal(new, fresh)
        assert not np.allclose(new, old)
        assert mention_key(doc, mention) != mention_key(first_doc, first_mention)

    def test_edited_entity_is_not_served_stale(self, tmp_path, stub_encoder):
        """Renaming an entity changes its cache address"""
        before = Entity(id="Q1", language="es", name="Senado")
        after = Entity(id="Q1", language="es", name="Congreso")
        cache = RepresentationCache(stub_encoder.fingerprint, tmp_path / "c")
        BundleBuilder(stub_encoder, cache).entity_name(before)
        cache.flush()

        reopened = RepresentationCache(stub_encoder.fingerprint, tmp_path / "c")
        vector = BundleBuilder(stub_encoder, reopened).entity_name(after)
        np.testing.assert_array_equal(vector, entity_name_rep(stub_encoder, after))
        assert entity_key(before) != entity_key(after)
