"""
Pydantic schemas for plink records and run configuration.
"""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

NIL = "NIL"

# ── Knowledge base and corpus records ─────────────────────────────────────────


class Entity(BaseModel):
    """One knowledge-base entry."""

    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1, description="Opaque identifier, unique within a KB.")
    language: str = Field(description="BCP-47-style language code of the KB.")
    name: str = Field(description="Canonical entity name (source of e_s).")
    description: str = Field(default="", description="Free text (source of e_c).")
    wiki_title: Optional[str] = Field(
        default=None, description="Wikipedia page title, if any."
    )
    outlinks: frozenset[str] = Field(
        default_factory=frozenset, description="Ids of entities this entity links to."
    )


class Document(BaseModel):
    """A pre-segmented document."""

    id: str
    language: str
    sentences: List[str]

    @field_validator("sentences")
    @classmethod
    def non_empty_sentences(cls, v: List[str]) -> List[str]:
        if not v:
            raise ValueError("document has no sentences")
        if any(not s for s in v):
            raise ValueError("document contains an empty sentence")
        return v


class AnchorLink(BaseModel):
    """A hyperlink anchor inside an anchored document."""

    sentence_index: int = Field(ge=0)
    start: int = Field(ge=0)
    end: int
    target: str


class AnchoredDocument(Document):
    """Document with anchor links to KB entities (silver-data source)."""

    anchors: List[AnchorLink] = Field(default_factory=list)


class Mention(BaseModel):
    """An annotated mention span with its gold link (entity id or NIL)."""

    id: str
    doc_id: str
    sentence_index: int = Field(ge=0)
    start: int = Field(ge=0)
    end: int
    surface: str
    gold: str = NIL
    mention_type: Optional[str] = None
    language: Optional[str] = None
    nil_source: Optional[str] = Field(
        default=None,
        description="Original anchor target of a silver mention relabelled NIL.",
    )

    @model_validator(mode="after")
    def check_span(self) -> "Mention":
        if self.end <= self.start:
            raise ValueError(
                f"mention {self.id}: empty or inverted span ({self.start}, {self.end})"
            )
        return self

    @property
    def is_nil(self) -> bool:
        return self.gold == NIL


# ── Triage, scoring and prediction records ────────────────────────────────────


class Candidate(BaseModel):
    entity_id: str
    prior: float = Field(ge=0.0, le=1.0)


class ScoredCandidate(BaseModel):
    entity_id: str
    score: float


class Prediction(BaseModel):
    mention_id: str
    predicted: str = NIL
    score: Optional[float] = Field(
        default=None, description="Best candidate score; absent iff no candidates."
    )
    best_entity: Optional[str] = Field(
        default=None,
        description="Best-scoring candidate, kept when thresholded to NIL.",
    )

    @property
    def is_nil(self) -> bool:
        return self.predicted == NIL


class EpochRecord(BaseModel):
    """One line of the training history."""

    epoch: int
    el_loss: float
    adv_loss: Optional[float] = None
    cls_loss: float = 0.0
    adv_accuracy: Optional[float] = None
    dev_f1: Optional[float] = None


# ── Evaluation ────────────────────────────────────────────────────────────────


class MetricSet(BaseModel):
    """NIL-aware link metrics for one group of mentions."""

    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    nn_precision: float = 0.0
    nn_recall: float = 0.0
    nn_f1: float = 0.0
    entity_avg_precision: float = 0.0
    mention_accuracy: float = 0.0
    n_mentions: int = 0
    n_gold_nil: int = 0
    n_predicted_nil: int = 0
    undefined: List[str] = Field(
        default_factory=list,
        description="Metrics whose denominator was zero (reported as 0).",
    )


class EvaluationReport(MetricSet):
    per_type: Dict[str, MetricSet] = Field(default_factory=dict)


# ── Configuration ─────────────────────────────────────────────────────────────


class EncoderConfig(BaseModel):
    kind: Literal["stub", "transformer"] = "stub"
    dimension: int = Field(default=768, ge=1)
    subword_limit: int = Field(default=512, ge=1)
    seed: int = 0
    piece_length: int = Field(
        default=4, ge=1, description="Stub: max characters per subword."
    )
    language_transforms: List[str] = Field(
        default_factory=list,
        description="Stub: languages whose vectors get a seeded orthogonal transform.",
    )
    register_scale: float = Field(
        default=0.0,
        ge=0.0,
        description="Stub: length of the offset each language transform rotates.",
    )
    model_name: str = "xlm-roberta-base"


class TriageConfig(BaseModel):
    k: int = Field(default=10, ge=1, description="Title candidates from anchor priors.")
    l: int = Field(  # noqa: E741
        default=200, ge=1, description="Entities after two-stage retrieval."
    )
    two_stage: bool = False

    @model_validator(mode="after")
    def check_sizes(self) -> "TriageConfig":
        if self.l < self.k:
            raise ValueError(f"l ({self.l}) must be >= k ({self.k})")
        return self


class RankerConfig(BaseModel):
    input_dim: int = Field(default=768, ge=1)
    string_layers: List[int] = Field(default_factory=lambda: [512])
    context_layers: List[int] = Field(default_factory=lambda: [512])
    final_layers: List[int] = Field(default_factory=lambda: [512, 256])
    dropout: float = Field(default=0.2, ge=0.0, lt=1.0)
    learning_rate: float = Field(default=1e-4, ge=0.0)
    optimizer: Literal["sgd", "adam"] = "sgd"
    margin: float = Field(default=0.1, gt=0.0)
    n_negatives: int = Field(default=4, ge=1)
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=50, ge=0)
    rng_seed: int = 13
    use_popularity: bool = False
    invariant_layer: bool = False
    classifier_width: int = Field(default=256, ge=1)
    hidden_activation: Literal["relu"] = "relu"
    output_activation: Literal["tanh"] = "tanh"
    eval_every: Optional[int] = Field(default=None, ge=1)

    @field_validator("string_layers", "context_layers", "final_layers")
    @classmethod
    def positive_widths(cls, v: List[int]) -> List[int]:
        if not v or any(w < 1 for w in v):
            raise ValueError(f"layer widths must be non-empty and >= 1, got {v}")
        return v


class AdversarialConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    adv_lambda: float = Field(default=0.25, ge=0.0, alias="lambda")
    y: int = Field(
        default=5, ge=1, description="Unlabeled items per language per classifier step."
    )
    adv_stop_epoch: Optional[int] = Field(default=None, ge=0)
    el_only_epochs: int = Field(default=0, ge=0)
    classifier_width: int = Field(default=256, ge=1)
    classifier_learning_rate: Optional[float] = Field(default=None, ge=0.0)
    languages: Tuple[str, str] = ("en", "xx")
    adv_text_kind: Literal["name", "description"] = "name"
    label_assignment: Literal["as_written", "classic"] = "as_written"

    @field_validator("languages")
    @classmethod
    def distinct_languages(cls, v: Tuple[str, str]) -> Tuple[str, str]:
        if v[0] == v[1]:
            raise ValueError("the adversary needs two distinct languages")
        return v


ADVERSARIAL_PRESETS: Dict[str, dict] = {
    "baseline": {"lambda": 0.0},
    "tac-adv": {"lambda": 0.25, "adv_stop_epoch": None, "adv_text_kind": "name"},
    "wiki-adv": {"lambda": 0.01, "adv_stop_epoch": 50},
}


class SilverConfig(BaseModel):
    nil_fraction: float = Field(default=0.2, ge=0.0, lt=1.0)
    seed_entities: Optional[str] = Field(
        default=None,
        description="One seed entity id per line; default: entities with wiki_title.",
    )


class PathsConfig(BaseModel):
    kb: List[str] = Field(default_factory=list)
    dataset: List[str] = Field(default_factory=list)
    anchors: List[str] = Field(
        default_factory=list, description="Anchor statistics files, paired with kb."
    )
    anchored_docs: Optional[str] = None
    pool: Optional[str] = None
    candidates: Optional[str] = None
    dev: Optional[str] = None
    checkpoint: Optional[str] = None
    cache_dir: Optional[str] = None
    gold: Optional[str] = None
    pred: List[str] = Field(default_factory=list)
    out: str = "plink_out"


class RunConfig(BaseModel):
    stage: Optional[str] = None
    seed: int = 13
    threshold: float = Field(default=-1.0, ge=-1.0, le=1.0)
    train_size: Optional[int] = Field(default=None, ge=1)
    baseline: Optional[Literal["nn"]] = None
    link_direction: Literal["out", "in", "both"] = "out"
    paths: PathsConfig = Field(default_factory=PathsConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    triage: TriageConfig = Field(default_factory=TriageConfig)
    ranker: RankerConfig = Field(default_factory=RankerConfig)
    adversarial: Optional[AdversarialConfig] = None
    silver: SilverConfig = Field(default_factory=SilverConfig)
