"""
Pointwise neural ranker
String and context MLPs feed a final MLP whose tanh output scores a mention-entity
pair in (-1, 1). Trained with a max-margin hinge loss over sampled negatives.

Checkpoint layout:
    manifest.json   {"format_version", "config", "tensors": [{name, shape, dtype}]}
    weights.bin     little-endian float32 tensors in manifest order
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from pydantic import ValidationError

from logger import app_logger

from .encoder import RepresentationBundle
from .errors import (
    CheckpointError,
    ConfigError,
    InputValidationError,
    TrainingDivergedError,
)
from .kbstore import KnowledgeBase
from .schemas import EpochRecord, RankerConfig

CHECKPOINT_FORMAT = 1
MANIFEST_FILE = "manifest.json"
WEIGHTS_FILE = "weights.bin"

# Random-search space for configuration sampling
LAYER_CHOICES = [[768], [512], [256], [512, 256]]
FINAL_LAYER_CHOICES = [[512, 256], [256, 128], [128, 64], [1024, 512], [512], [256]]
DROPOUT_CHOICES = [0.1, 0.2, 0.5]
LEARNING_RATE_CHOICES = [1e-5, 5e-4, 1e-4, 5e-3, 1e-3]


def _mlp_layers(in_dim: int, widths: Sequence[int], dropout: float) -> List[nn.Module]:
    layers: List[nn.Module] = []
    for width in widths:
        layers += [nn.Linear(in_dim, width), nn.ReLU(), nn.Dropout(dropout)]
        in_dim = width
    return layers


def open_unit_interval(score: torch.Tensor) -> torch.Tensor:
    """Clamp to one machine epsilon inside ±1; tanh itself rounds to ±1 in float32."""
    bound = 1.0 - torch.finfo(score.dtype).eps
    return score.clamp(-bound, bound)


class RankerModel(nn.Module):
    """
    Scores (m_s, e_s, m_c, e_c[, popularity]) bundles.

    With `invariant_layer` on, m_s and e_s pass through the shared layer h_s0
    first, and the language classifier h_adv is stored alongside the ranker.
    """

    def __init__(self, cfg: RankerConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.input_dim
        self.string_mlp = nn.Sequential(
            *_mlp_layers(2 * d, cfg.string_layers, cfg.dropout)
        )
        self.context_mlp = nn.Sequential(
            *_mlp_layers(2 * d, cfg.context_layers, cfg.dropout)
        )
        final_in = cfg.string_layers[-1] + cfg.context_layers[-1]
        if cfg.use_popularity:
            final_in += 1
        self.final_mlp = nn.Sequential(
            *_mlp_layers(final_in, cfg.final_layers, cfg.dropout),
            nn.Linear(cfg.final_layers[-1], 1),
        )
        if cfg.invariant_layer:
            self.h_s0 = nn.Sequential(nn.Linear(d, d), nn.ReLU())
            self.h_adv = nn.Sequential(
                nn.Linear(d, cfg.classifier_width),
                nn.ReLU(),
                nn.Linear(cfg.classifier_width, 2),
            )
        else:
            self.h_s0 = None
            self.h_adv = None

    def invariant(self, x: torch.Tensor) -> torch.Tensor:
        return self.h_s0(x) if self.h_s0 is not None else x

    def forward(
        self,
        m_s: torch.Tensor,
        e_s: torch.Tensor,
        m_c: torch.Tensor,
        e_c: torch.Tensor,
        popularity: Optional[torch.Tensor] = None,
        return_string_reps: bool = False,
    ):
        r_m = self.invariant(m_s)
        r_e = self.invariant(e_s)
        r_s = self.string_mlp(torch.cat([r_m, r_e], dim=-1))
        r_c = self.context_mlp(torch.cat([m_c, e_c], dim=-1))
        parts = [r_s, r_c]
        if self.cfg.use_popularity:
            parts.append(popularity.unsqueeze(-1))
        logit = self.final_mlp(torch.cat(parts, dim=-1)).squeeze(-1)
        score = open_unit_interval(torch.tanh(logit))
        if return_string_reps:
            return score, r_m, r_e
        return score

    def language_logits(self, x: torch.Tensor) -> torch.Tensor:
        if self.h_adv is None:
            raise ConfigError(
                "model has no language classifier (invariant_layer is off)"
            )
        return self.h_adv(self.invariant(x))


def init_model(cfg: RankerConfig, rng_seed: Optional[int] = None) -> RankerModel:
    """Build a model with weights and biases uniform in ±1/sqrt(fan_in)."""
    try:
        cfg = RankerConfig.model_validate(cfg.model_dump())
    except ValidationError as e:
        raise ConfigError(f"invalid ranker config: {e}") from e
    model = RankerModel(cfg)
    seed = cfg.rng_seed if rng_seed is None else rng_seed
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.uniform_(-bound, bound, generator=generator)
                module.bias.uniform_(-bound, bound, generator=generator)
    return model


def adversary_parameters(model: RankerModel) -> List[nn.Parameter]:
    return list(model.h_adv.parameters()) if model.h_adv is not None else []


def ranker_parameters(model: RankerModel) -> List[nn.Parameter]:
    """Every parameter except the language classifier."""
    excluded = {id(p) for p in adversary_parameters(model)}
    return [p for p in model.parameters() if id(p) not in excluded]


# ── scoring ───────────────────────────────────────────────────────────────────


def _model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def bundle_tensors(
    model: RankerModel, bundles: Sequence[RepresentationBundle]
) -> Dict[str, torch.Tensor]:
    d = model.cfg.input_dim
    for bundle in bundles:
        for name in ("m_s", "e_s", "m_c", "e_c"):
            shape = getattr(bundle, name).shape
            if shape != (d,):
                raise InputValidationError(
                    f"bundle {name} has shape {shape}, model expects ({d},)"
                )
    dtype = _model_dtype(model)
    tensors = {
        name: torch.as_tensor(
            np.stack([getattr(b, name) for b in bundles]), dtype=dtype
        )
        for name in ("m_s", "e_s", "m_c", "e_c")
    }
    tensors["popularity"] = torch.tensor([b.popularity for b in bundles], dtype=dtype)
    return tensors


def score_batch(
    model: RankerModel,
    bundles: Sequence[RepresentationBundle],
    train_mode: bool = False,
    return_string_reps: bool = False,
):
    """
    Scores for a list of bundles (autograd enabled; caller decides no_grad).
    The module mode is only touched when it differs from train_mode, so scoring
    a model in eval mode never mutates it.
    """
    if model.training != train_mode:
        model.train(train_mode)
    tensors = bundle_tensors(model, bundles)
    return model(**tensors, return_string_reps=return_string_reps)


def forward_score(
    model: RankerModel,
    cfg: RankerConfig,
    bundle: RepresentationBundle,
    train_mode: bool = False,
) -> float:
    if cfg.input_dim != model.cfg.input_dim:
        raise InputValidationError(
            f"config input_dim {cfg.input_dim} != model input_dim {model.cfg.input_dim}"
        )
    with torch.no_grad():
        return float(score_batch(model, [bundle], train_mode=train_mode)[0])


def hinge_loss(pos_score: float, neg_scores: Sequence[float], eps: float) -> float:
    """max(0, eps - (pos - max(negs)))."""
    if len(neg_scores) == 0:
        raise InputValidationError("hinge loss needs at least one negative score")
    return max(0.0, eps - (pos_score - max(neg_scores)))


def hinge_loss_tensor(
    pos_score: torch.Tensor, neg_scores: torch.Tensor, eps: float
) -> torch.Tensor:
    if neg_scores.numel() == 0:
        raise InputValidationError("hinge loss needs at least one negative score")
    return torch.clamp(eps - (pos_score - neg_scores.max()), min=0.0)


def nn_baseline_score(bundle: RepresentationBundle) -> float:
    """Cosine similarity of m_s and e_s."""
    a = np.asarray(bundle.m_s, dtype=np.float64)
    b = np.asarray(bundle.e_s, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InputValidationError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ── training ──────────────────────────────────────────────────────────────────


@dataclass
class TrainingExample:
    mention_id: str
    language: str
    positive: RepresentationBundle
    negatives: List[RepresentationBundle]


def sample_negatives(
    candidates: Sequence[str],
    gold_id: str,
    n: int,
    kb: KnowledgeBase,
    rng: np.random.Generator,
) -> List[str]:
    """
    n non-gold ids drawn without replacement from the candidates, topped up
    uniformly from the rest of the KB when there are too few.
    """
    if n < 1:
        raise InputValidationError(f"n must be >= 1, got {n}")
    pool = [c for c in dict.fromkeys(candidates) if c != gold_id]
    if len(pool) >= n:
        return [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]

    chosen = [pool[i] for i in rng.permutation(len(pool))]
    taken = set(chosen)
    rest = sorted(e for e in kb.entities if e != gold_id and e not in taken)
    if not chosen and not rest:
        raise InputValidationError(
            f"KB has no entity other than gold {gold_id!r} to sample as a negative"
        )
    extra = min(n - len(chosen), len(rest))
    chosen += [rest[i] for i in rng.choice(len(rest), size=extra, replace=False)]
    return chosen


def make_optimizer(
    params: Iterable[nn.Parameter], cfg: RankerConfig, lr: Optional[float] = None
):
    lr = cfg.learning_rate if lr is None else lr
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr)


def iter_batches(
    examples: Sequence[TrainingExample], batch_size: int, rng: np.random.Generator
) -> Iterator[List[TrainingExample]]:
    order = rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start : start + batch_size]]


def batch_el_loss(
    model: RankerModel,
    cfg: RankerConfig,
    batch: Sequence[TrainingExample],
    return_string_reps: bool = False,
):
    """
    Mean hinge loss over a batch. All positive and negative bundles are scored in one
    forward pass; with return_string_reps the invariant-layer outputs of each
    example's positive pair are also returned.
    """
    bundles: List[RepresentationBundle] = []
    offsets = []
    for example in batch:
        if not example.negatives:
            raise InputValidationError(f"mention {example.mention_id} has no negatives")
        offsets.append(len(bundles))
        bundles.append(example.positive)
        bundles.extend(example.negatives)

    out = score_batch(
        model, bundles, train_mode=True, return_string_reps=return_string_reps
    )
    scores = out[0] if return_string_reps else out
    losses = [
        hinge_loss_tensor(
            scores[o], scores[o + 1 : o + 1 + len(ex.negatives)], cfg.margin
        )
        for o, ex in zip(offsets, batch)
    ]
    loss = torch.stack(losses).mean()
    if return_string_reps:
        index = torch.tensor(offsets)
        return loss, out[1][index], out[2][index]
    return loss


def check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss ({loss.item()}) at {where}")


def train_epoch(
    model: RankerModel,
    cfg: RankerConfig,
    optimizer: torch.optim.Optimizer,
    batches: Iterable[Sequence[TrainingExample]],
    epoch: int = 0,
) -> float:
    """One pass over the batches; returns the mention-weighted mean hinge loss."""
    total, count = 0.0, 0
    for step, batch in enumerate(batches):
        loss = batch_el_loss(model, cfg, batch)
        check_finite(loss, f"epoch {epoch}, batch {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total += loss.item() * len(batch)
        count += len(batch)
    return total / count if count else 0.0


DevEvaluator = Callable[[RankerModel], float]


def track_best(
    model: RankerModel,
    record: EpochRecord,
    evaluate_dev: Optional[DevEvaluator],
    checkpoint_dir: Optional[Path],
    best_f1: float,
) -> float:
    """Evaluate on dev, store dev_f1 on the record, keep the best checkpoint."""
    if evaluate_dev is None:
        return best_f1
    record.dev_f1 = evaluate_dev(model)
    if record.dev_f1 > best_f1:
        best_f1 = record.dev_f1
        if checkpoint_dir is not None:
            save_checkpoint(model, model.cfg, Path(checkpoint_dir) / "checkpoint-best")
        app_logger.info(f"New best dev F1 {best_f1:.4f} at epoch {record.epoch}")
    return best_f1


def fit(
    model: RankerModel,
    cfg: RankerConfig,
    examples: Sequence[TrainingExample],
    evaluate_dev: Optional[DevEvaluator] = None,
    checkpoint_dir: Optional[Path] = None,
) -> List[EpochRecord]:
    """Plain ranker training for cfg.epochs epochs; deterministic per cfg.rng_seed."""
    torch.manual_seed(cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed)
    optimizer = make_optimizer(ranker_parameters(model), cfg)
    history: List[EpochRecord] = []
    best_f1 = -1.0
    for epoch in range(1, cfg.epochs + 1):
        batches = iter_batches(examples, cfg.batch_size, rng)
        loss = train_epoch(model, cfg, optimizer, batches, epoch)
        record = EpochRecord(epoch=epoch, el_loss=loss)
        if cfg.eval_every and epoch % cfg.eval_every == 0:
            best_f1 = track_best(model, record, evaluate_dev, checkpoint_dir, best_f1)
        history.append(record)
        app_logger.info(f"Epoch {epoch}/{cfg.epochs}: el_loss={loss:.5f}")
    model.eval()
    return history


# ── checkpoints ───────────────────────────────────────────────────────────────


def save_checkpoint(model: RankerModel, cfg: RankerConfig, path: Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    specs = []
    payload = bytearray()
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().numpy().astype("<f4")
        specs.append({"name": name, "shape": list(array.shape), "dtype": "float32"})
        payload += array.tobytes()
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "config": cfg.model_dump(mode="json"),
        "tensors": specs,
    }
    (path / WEIGHTS_FILE).write_bytes(bytes(payload))
    (path / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    app_logger.info(f"Saved checkpoint to {path} ({len(payload):,} bytes of weights)")


def load_checkpoint(path: Path, cfg: Optional[RankerConfig] = None) -> RankerModel:
    """
    Rebuild a model from a checkpoint directory. The stored config wins over `cfg`
    (a warning is logged when they differ); the returned model carries it as `.cfg`.
    """
    path = Path(path)
    manifest_path, weights_path = path / MANIFEST_FILE, path / WEIGHTS_FILE
    if not manifest_path.exists() or not weights_path.exists():
        raise CheckpointError(f"{path} is not a checkpoint directory")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(
            f"unreadable checkpoint manifest {manifest_path}: {e}"
        ) from e
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {version!r}")

    try:
        stored = RankerConfig.model_validate(manifest["config"])
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"checkpoint config is invalid: {e}") from e
    if cfg is not None and cfg != stored:
        app_logger.warning(
            f"Checkpoint config in {path} overrides the supplied ranker config"
        )

    model = RankerModel(stored)
    expected = {name: tuple(t.shape) for name, t in model.state_dict().items()}
    specs = manifest.get("tensors", [])
    if [s["name"] for s in specs] != list(expected):
        raise CheckpointError("checkpoint tensors do not match the model layout")

    data = weights_path.read_bytes()
    state: Dict[str, torch.Tensor] = {}
    offset = 0
    for spec in specs:
        name, shape = spec["name"], tuple(spec["shape"])
        if shape != expected[name]:
            raise CheckpointError(
                f"shape mismatch for {name}: {shape} vs {expected[name]}"
            )
        size = int(np.prod(shape)) * 4
        if offset + size > len(data):
            raise CheckpointError(f"truncated weights file {weights_path}")
        array = np.frombuffer(data, dtype="<f4", count=size // 4, offset=offset)
        state[name] = torch.from_numpy(array.reshape(shape).astype(np.float32))
        offset += size
    if offset != len(data):
        raise CheckpointError(
            f"weights file {weights_path} has {len(data) - offset} trailing bytes"
        )

    model.load_state_dict(state)
    model.eval()
    return model


# ── configuration sampling ────────────────────────────────────────────────────


def sample_ranker_configs(
    n: int = 10, seed: int = 0, base: Optional[RankerConfig] = None
) -> List[RankerConfig]:
    """Draw n configurations from the layer / dropout / learning-rate grid."""
    base = base or RankerConfig()
    rng = np.random.default_rng(seed)

    def pick(choices):
        return choices[int(rng.integers(len(choices)))]

    return [
        base.model_copy(
            update={
                "string_layers": list(pick(LAYER_CHOICES)),
                "context_layers": list(pick(LAYER_CHOICES)),
                "final_layers": list(pick(FINAL_LAYER_CHOICES)),
                "dropout": pick(DROPOUT_CHOICES),
                "learning_rate": pick(LEARNING_RATE_CHOICES),
            }
        )
        for _ in range(n)
    ]
