"""
plink: multilingual entity linking

Pointwise neural ranker with KB popularity, anchor-prior candidate triage,
adversarial language-invariance training and NIL-aware TAC-style scoring.

Modules:
  schemas      — Pydantic records and run configuration
  kbstore      — KB loading, popularity, anchor statistics, name index
  corpus       — Dataset loading, silver data, surface/name statistics
  encoder      — Subword encoders and the four pooled representations
  triage       — Prior-based candidates and two-stage retrieval
  ranker       — Ranker model, hinge training, checkpoints, cosine baseline
  adversarial  — Shared invariant layer + language classifier training
  evaluation   — NIL prediction and metrics
  pipeline     — LinkingPipeline composing the above
  synthetic    — Two-language synthetic world for transfer runs
  cli          — Stage driver (python -m python_code.plink.cli)
"""

from .corpus import Dataset, build_silver_dataset, dataset_stats, load_dataset
from .encoder import BundleBuilder, RepresentationBundle, StubEncoder, make_encoder
from .evaluation import evaluate, predict_with_nil
from .kbstore import KnowledgeBase, load_kb, popularity_score
from .pipeline import LinkingPipeline
from .ranker import RankerModel, init_model, load_checkpoint, save_checkpoint
from .schemas import NIL, RunConfig

__all__ = [
    "NIL",
    "BundleBuilder",
    "Dataset",
    "KnowledgeBase",
    "LinkingPipeline",
    "RankerModel",
    "RepresentationBundle",
    "RunConfig",
    "StubEncoder",
    "build_silver_dataset",
    "dataset_stats",
    "evaluate",
    "init_model",
    "load_checkpoint",
    "load_dataset",
    "load_kb",
    "make_encoder",
    "popularity_score",
    "predict_with_nil",
    "save_checkpoint",
]
