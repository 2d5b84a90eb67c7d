"""
Pytest configuration and fixtures
"""

import json
import os
import tempfile

# Set test environment BEFORE importing any project modules
os.environ["ENVIRONMENT"] = "test"
os.environ["LOG_LEVEL"] = "WARNING"
os.environ["PLINK_CACHE_DIR"] = tempfile.mkdtemp(prefix="plink-test-cache-")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
import torch  # noqa: E402

from cache import RepresentationCache  # noqa: E402
from python_code.plink.corpus import load_dataset  # noqa: E402
from python_code.plink.encoder import RepresentationBundle, StubEncoder  # noqa: E402
from python_code.plink.kbstore import load_kb  # noqa: E402
from python_code.plink.ranker import TrainingExample  # noqa: E402
from python_code.plink.schemas import RankerConfig  # noqa: E402

ENTITIES = [
    {
        "id": "Q1",
        "language": "es",
        "name": "Senado",
        "description": "Cámara alta del parlamento",
        "wiki_title": "Senado",
        "outlinks": ["Q2", "Q3"],
    },
    {
        "id": "Q2",
        "language": "es",
        "name": "Congreso",
        "description": "Cámara baja del parlamento",
        "wiki_title": "Congreso",
        "outlinks": ["Q1"],
    },
    {
        "id": "Q3",
        "language": "es",
        "name": "Senado de Chile",
        "description": "Cámara alta de Chile",
        "outlinks": ["Q1", "Q9"],
    },
    {
        "id": "Q4",
        "language": "es",
        "name": "Madrid",
        "description": "",
        "wiki_title": "Madrid",
    },
]

DOCUMENTS = [
    {
        "id": "d1",
        "language": "es",
        "sentences": ["Senado convocó a Madrid.", "El Congreso votó ayer."],
    },
]

MENTIONS = [
    {
        "id": "m1",
        "doc_id": "d1",
        "sentence_index": 0,
        "start": 0,
        "end": 6,
        "surface": "Senado",
        "gold": "Q1",
        "mention_type": "ORG",
    },
    {
        "id": "m2",
        "doc_id": "d1",
        "sentence_index": 0,
        "start": 17,
        "end": 23,
        "surface": "Madrid",
        "gold": "Q4",
        "mention_type": "GPE",
    },
    {
        "id": "m3",
        "doc_id": "d1",
        "sentence_index": 1,
        "start": 3,
        "end": 11,
        "surface": "Congreso",
        "gold": "Q2",
        "mention_type": "ORG",
    },
    {
        "id": "m4",
        "doc_id": "d1",
        "sentence_index": 1,
        "start": 17,
        "end": 21,
        "surface": "ayer",
        "gold": "NIL",
    },
]

ANCHOR_STATS = [
    {"surface": "Senado", "entity_id": "Q1", "count": 8},
    {"surface": "Senado", "entity_id": "Q3", "count": 2},
    {"surface": "Congreso", "entity_id": "Q2", "count": 5},
    {"surface": "Madrid", "entity_id": "Q4", "count": 3},
]


def write_lines(path, records):
    """Write dicts as JSON lines and return the path."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records)
    path.write_text(lines, encoding="utf-8")
    return path


def make_bundle(rng, d=8, popularity=1.0):
    return RepresentationBundle(
        m_s=rng.standard_normal(d).astype(np.float32),
        e_s=rng.standard_normal(d).astype(np.float32),
        m_c=rng.standard_normal(d).astype(np.float32),
        e_c=rng.standard_normal(d).astype(np.float32),
        popularity=popularity,
    )


def make_examples(n, n_negatives=2, seed=0, d=8, language="en"):
    rng = np.random.default_rng(seed)
    return [
        TrainingExample(
            mention_id=f"m{i}",
            language=language,
            positive=make_bundle(rng, d, float(rng.uniform(0, 3))),
            negatives=[
                make_bundle(rng, d, float(rng.uniform(0, 3)))
                for _ in range(n_negatives)
            ],
        )
        for i in range(n)
    ]


def random_small_config(rng, d, **overrides):
    """A RankerConfig with one or two random layers (width <= 8) per block."""

    def widths():
        return [int(w) for w in rng.integers(1, 9, size=int(rng.integers(1, 3)))]

    fields = dict(
        input_dim=d,
        string_layers=widths(),
        context_layers=widths(),
        final_layers=widths(),
        dropout=0.0,
        use_popularity=bool(rng.integers(2)),
        invariant_layer=bool(rng.integers(2)),
        classifier_width=int(rng.integers(1, 9)),
        rng_seed=int(rng.integers(1000)),
    )
    fields.update(overrides)
    return RankerConfig(**fields)


def gradient_error(model, loss_fn, rng, per_tensor=4, h=1e-6):
    """
    Relative distance between autograd and central-difference gradients of
    loss_fn() over a random sample of each parameter tensor's entries.
    """
    model.zero_grad()
    loss_fn().backward()
    analytic, numeric = [], []
    for param in model.parameters():
        if param.grad is None:
            continue
        flat, grad = param.data.view(-1), param.grad.view(-1)
        size = min(per_tensor, flat.numel())
        for idx in rng.choice(flat.numel(), size=size, replace=False):
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + h
                up = loss_fn().item()
                flat[idx] = original - h
                down = loss_fn().item()
                flat[idx] = original
            numeric.append((up - down) / (2 * h))
            analytic.append(grad[idx].item())
    analytic, numeric = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


@pytest.fixture
def kb_path(tmp_path):
    return write_lines(tmp_path / "kb" / "entities.jsonl", ENTITIES)


@pytest.fixture
def anchors_path(tmp_path):
    return write_lines(tmp_path / "kb" / "anchor_stats.jsonl", ANCHOR_STATS)


@pytest.fixture
def kb(kb_path):
    return load_kb(kb_path)


@pytest.fixture
def kb_with_anchors(kb_path, anchors_path):
    return load_kb(kb_path, anchors_path)


@pytest.fixture
def dataset_dir(tmp_path):
    root = tmp_path / "dataset"
    write_lines(root / "documents.jsonl", DOCUMENTS)
    write_lines(root / "mentions.jsonl", MENTIONS)
    return root


@pytest.fixture
def dataset(dataset_dir):
    return load_dataset(dataset_dir)


@pytest.fixture
def stub_encoder():
    return StubEncoder(dimension=8, seed=3, subword_limit=64)


@pytest.fixture
def memory_cache(stub_encoder):
    return RepresentationCache(stub_encoder.fingerprint)


@pytest.fixture
def toy_ranker_config():
    return RankerConfig(
        input_dim=8,
        string_layers=[8],
        context_layers=[8],
        final_layers=[8, 4],
        dropout=0.2,
        learning_rate=1e-2,
        n_negatives=2,
        batch_size=2,
        epochs=2,
        rng_seed=5,
    )


@pytest.fixture
def loguru_messages():
    """Capture loguru messages at WARNING and above."""
    from logger import app_logger

    messages = []
    handler_id = app_logger.add(
        lambda m: messages.append(str(m)), level="WARNING", format="{message}"
    )
    yield messages
    app_logger.remove(handler_id)
