"""
Adversarial language-invariance training
Alternates a classifier pass on unlabeled text from two languages with the joint
ranker pass, following the label assignment chosen in AdversarialConfig.
"""

from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from cache import RepresentationCache
from logger import app_logger

from .encoder import EncoderAdapter, max_pool
from .errors import ConfigError, InputValidationError
from .jsonl import iter_jsonl, write_jsonl
from .kbstore import KnowledgeBase
from .ranker import (
    DevEvaluator,
    RankerModel,
    TrainingExample,
    adversary_parameters,
    batch_el_loss,
    check_finite,
    iter_batches,
    make_optimizer,
    ranker_parameters,
    track_best,
)
from .schemas import AdversarialConfig, EpochRecord, RankerConfig


def one_hot(index: int) -> Tuple[float, float]:
    return (1.0, 0.0) if index == 0 else (0.0, 1.0)


def reverse_label(label: Sequence[float]) -> Tuple[float, float]:
    """Swap the two components; applying it twice is the identity."""
    return (label[1], label[0])


def language_mse_loss(output: Sequence[float], label: Sequence[float]) -> float:
    """Mean squared error between a 2-way distribution and a one-hot label."""
    output = np.asarray(output, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if output.shape != (2,) or np.any(output < 0) or abs(output.sum() - 1.0) > 1e-6:
        raise InputValidationError(
            f"classifier output {output.tolist()} is not a 2-way distribution"
        )
    if label.shape != (2,) or sorted(label.tolist()) != [0.0, 1.0]:
        raise InputValidationError(f"label {label.tolist()} is not one-hot")
    return float(np.mean((output - label) ** 2))


def _mse_to_label(probs: torch.Tensor, label: Sequence[float]) -> torch.Tensor:
    target = torch.tensor(label, dtype=probs.dtype).expand_as(probs)
    return ((probs - target) ** 2).mean(dim=1).mean()


def joint_loss(el_loss, mse_mention, mse_entity, lam: float):
    """Ranker hinge loss plus the lambda-weighted classifier terms."""
    return el_loss + lam * (mse_mention + mse_entity)


# ── unlabeled text pool ───────────────────────────────────────────────────────


def pool_text_rep(enc: EncoderAdapter, text: str, language: str) -> np.ndarray:
    """Standalone max-pooled encoding of the first subword_limit subwords."""
    subwords = enc.tokenize(text, language)[: enc.subword_limit]
    return max_pool(enc.encode(subwords, language), enc.dimension)


class UnlabeledPool:
    """Per-language raw text (or precomputed vectors) for the adversarial pass."""

    def __init__(
        self,
        texts: Optional[Dict[str, List[str]]] = None,
        vectors: Optional[Dict[str, np.ndarray]] = None,
    ):
        self.texts: Dict[str, List[str]] = {
            k: list(v) for k, v in (texts or {}).items()
        }
        self._vectors: Dict[str, np.ndarray] = {
            k: np.asarray(v, dtype=np.float32) for k, v in (vectors or {}).items()
        }

    @classmethod
    def from_vectors(cls, vectors: Dict[str, np.ndarray]) -> "UnlabeledPool":
        return cls(vectors=vectors)

    @classmethod
    def from_kbs(
        cls, kbs: Iterable[KnowledgeBase], kind: str = "name"
    ) -> "UnlabeledPool":
        texts: Dict[str, List[str]] = {}
        for kb in kbs:
            for entity in sorted(kb.entities.values(), key=lambda e: e.id):
                text = entity.name if kind == "name" else entity.description
                if text:
                    texts.setdefault(entity.language, []).append(text)
        return cls(texts)

    @property
    def languages(self) -> List[str]:
        return sorted(set(self.texts) | set(self._vectors))

    def size(self, language: str) -> int:
        if language in self._vectors:
            return len(self._vectors[language])
        return len(self.texts.get(language, ()))

    def check(self, languages: Sequence[str]) -> None:
        empty = [lang for lang in languages if self.size(lang) == 0]
        if empty:
            raise InputValidationError(
                f"unlabeled pool has no items for language(s): {', '.join(empty)}"
            )

    def vectors(
        self,
        language: str,
        encoder: Optional[EncoderAdapter] = None,
        cache: Optional[RepresentationCache] = None,
    ) -> np.ndarray:
        if language not in self._vectors:
            if encoder is None:
                raise ConfigError("an encoder is required to represent pool text")
            texts = self.texts.get(language, [])
            if cache is None:
                rows = [pool_text_rep(encoder, t, language) for t in texts]
            else:
                rows = [
                    cache.get_or_compute(
                        "pool",
                        f"{language}|{t}",
                        lambda t=t: pool_text_rep(encoder, t, language),
                    )
                    for t in texts
                ]
            if rows:
                self._vectors[language] = np.stack(rows)
            else:
                self._vectors[language] = np.zeros((0, encoder.dimension), np.float32)
        return self._vectors[language]


def load_pool(path: Path) -> UnlabeledPool:
    texts: Dict[str, List[str]] = {}
    for line_no, obj in iter_jsonl(path):
        language, text = obj.get("language"), obj.get("text")
        if not isinstance(language, str) or not isinstance(text, str):
            raise InputValidationError(
                f"{path}:{line_no}: pool records need string language and text"
            )
        texts.setdefault(language, []).append(text)
    return UnlabeledPool(texts)


# ── training passes ───────────────────────────────────────────────────────────


def _labels(
    cfg: AdversarialConfig, index: int, adversarial_pass: bool
) -> Tuple[float, float]:
    """Reversed labels on the pass label_assignment picks, true ones on the other."""
    reversed_on_adv = cfg.label_assignment == "as_written"
    use_reversed = reversed_on_adv if adversarial_pass else not reversed_on_adv
    label = one_hot(index)
    return reverse_label(label) if use_reversed else label


def adversarial_step(
    model: RankerModel,
    cfg: AdversarialConfig,
    pool: UnlabeledPool,
    rng: np.random.Generator,
    optimizer: torch.optim.Optimizer,
    encoder: Optional[EncoderAdapter] = None,
    cache: Optional[RepresentationCache] = None,
) -> float:
    """
    Draw y items per language, score softmax(h_adv(h_s0(t))) against the pass label
    and update h_adv only. h_s0 runs without gradient here.
    """
    if model.h_adv is None:
        raise ConfigError(
            "adversarial training needs a model built with invariant_layer"
        )
    pool.check(cfg.languages)
    dtype = next(model.parameters()).dtype
    model.train()
    losses = []
    for index, language in enumerate(cfg.languages):
        vectors = pool.vectors(language, encoder, cache)
        picks = rng.choice(len(vectors), size=cfg.y, replace=len(vectors) < cfg.y)
        batch = torch.as_tensor(vectors[picks], dtype=dtype)
        with torch.no_grad():
            hidden = model.invariant(batch)
        probs = F.softmax(model.h_adv(hidden), dim=-1)
        label = _labels(cfg, index, adversarial_pass=True)
        losses.append(_mse_to_label(probs, label))
    loss = torch.stack(losses).mean()
    check_finite(loss, "adversarial step")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


def joint_batch_loss(
    model: RankerModel,
    ranker_cfg: RankerConfig,
    cfg: AdversarialConfig,
    batch: Sequence[TrainingExample],
    lam: float,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    (total, el, cls) for one batch, with cls the unweighted sum of both MSE terms
    against the main-pass labels. With lambda 0 the classifier is not evaluated.
    """
    if lam == 0:
        el = batch_el_loss(model, ranker_cfg, batch)
        return el, el, torch.zeros((), dtype=el.dtype)

    if model.h_adv is None:
        raise ConfigError("lambda > 0 needs a model built with invariant_layer")
    el, r_m, r_e = batch_el_loss(model, ranker_cfg, batch, return_string_reps=True)
    try:
        indices = [cfg.languages.index(ex.language) for ex in batch]
    except ValueError as e:
        raise ConfigError(
            f"training mention language is not one of {cfg.languages}"
        ) from e
    targets = torch.tensor(
        [_labels(cfg, i, adversarial_pass=False) for i in indices], dtype=el.dtype
    )
    p_m = F.softmax(model.h_adv(r_m), dim=-1)
    p_e = F.softmax(model.h_adv(r_e), dim=-1)
    mse_m = ((p_m - targets) ** 2).mean(dim=1).mean()
    mse_e = ((p_e - targets) ** 2).mean(dim=1).mean()
    return joint_loss(el, mse_m, mse_e, lam), el, mse_m + mse_e


def main_step(
    model: RankerModel,
    ranker_cfg: RankerConfig,
    cfg: AdversarialConfig,
    batch: Sequence[TrainingExample],
    optimizer: torch.optim.Optimizer,
    lam: Optional[float] = None,
) -> Tuple[float, float, float]:
    """Joint ranker + classifier update over every parameter except h_adv."""
    lam = cfg.adv_lambda if lam is None else lam
    total, el, cls = joint_batch_loss(model, ranker_cfg, cfg, batch, lam)
    check_finite(total, "main step")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return total.item(), el.item(), cls.item()


def language_accuracy(
    model: RankerModel,
    pool: UnlabeledPool,
    languages: Sequence[str],
    encoder: Optional[EncoderAdapter] = None,
    cache: Optional[RepresentationCache] = None,
) -> float:
    """Fraction of pool items h_adv assigns to their true language."""
    dtype = next(model.parameters()).dtype
    correct, total = 0, 0
    model.eval()
    with torch.no_grad():
        for index, language in enumerate(languages):
            vectors = pool.vectors(language, encoder, cache)
            if len(vectors) == 0:
                continue
            logits = model.language_logits(torch.as_tensor(vectors, dtype=dtype))
            correct += int((logits.argmax(dim=-1) == index).sum())
            total += len(vectors)
    return correct / total if total else 0.0


def prepare_ranker_config(
    ranker_cfg: RankerConfig, adv_cfg: AdversarialConfig
) -> RankerConfig:
    """Ranker config with the shared layer and classifier enabled."""
    return ranker_cfg.model_copy(
        update={"invariant_layer": True, "classifier_width": adv_cfg.classifier_width}
    )


def train_with_adversary(
    model: RankerModel,
    cfg: AdversarialConfig,
    ranker_cfg: RankerConfig,
    examples: Sequence[TrainingExample],
    pool: UnlabeledPool,
    encoder: Optional[EncoderAdapter] = None,
    cache: Optional[RepresentationCache] = None,
    evaluate_dev: Optional[DevEvaluator] = None,
    checkpoint_dir: Optional[Path] = None,
) -> List[EpochRecord]:
    """
    ranker_cfg.epochs joint epochs (adversarial pass first, skipped after
    adv_stop_epoch) followed by cfg.el_only_epochs linking-only epochs.
    """
    torch.manual_seed(ranker_cfg.rng_seed)
    rng = np.random.default_rng(ranker_cfg.rng_seed)
    pool_rng = np.random.default_rng([ranker_cfg.rng_seed, 1])
    main_opt = make_optimizer(ranker_parameters(model), ranker_cfg)
    adv_opt = None
    if model.h_adv is not None:
        adv_opt = make_optimizer(
            adversary_parameters(model), ranker_cfg, lr=cfg.classifier_learning_rate
        )

    total_epochs = ranker_cfg.epochs + cfg.el_only_epochs
    history: List[EpochRecord] = []
    best_f1 = -1.0
    for epoch in range(1, total_epochs + 1):
        el_only = epoch > ranker_cfg.epochs
        adv_loss = None
        adv_active = not el_only and (
            cfg.adv_stop_epoch is None or epoch <= cfg.adv_stop_epoch
        )
        if adv_active and adv_opt is not None:
            adv_loss = adversarial_step(
                model, cfg, pool, pool_rng, adv_opt, encoder, cache
            )

        lam = 0.0 if el_only else cfg.adv_lambda
        el_sum, cls_sum, count = 0.0, 0.0, 0
        for batch in iter_batches(examples, ranker_cfg.batch_size, rng):
            _, el, cls = main_step(model, ranker_cfg, cfg, batch, main_opt, lam)
            el_sum += el * len(batch)
            cls_sum += cls * len(batch)
            count += len(batch)

        record = EpochRecord(
            epoch=epoch,
            el_loss=el_sum / count if count else 0.0,
            adv_loss=adv_loss,
            cls_loss=lam * cls_sum / count if count else 0.0,
        )
        if model.h_adv is not None and adv_active:
            record.adv_accuracy = language_accuracy(
                model, pool, cfg.languages, encoder, cache
            )
        if ranker_cfg.eval_every and epoch % ranker_cfg.eval_every == 0:
            best_f1 = track_best(model, record, evaluate_dev, checkpoint_dir, best_f1)
        history.append(record)
        phase = " [EL]" if el_only else ""
        adv_part = f" adv_loss={adv_loss:.5f}" if adv_loss is not None else ""
        app_logger.info(
            f"Epoch {epoch}/{total_epochs}{phase}: el_loss={record.el_loss:.5f} "
            f"cls_loss={record.cls_loss:.5f}{adv_part}"
        )
    model.eval()
    return history


def write_history(path: Path, history: Sequence[EpochRecord]) -> int:
    return write_jsonl(path, history)
