"""
Command-line pipeline driver.
Run with: python -m python_code.plink.cli <stage> [flags]

Stages: build-kb, build-dataset, triage, train, train-adv, predict, evaluate, stats
Exit status: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

import argparse
import hashlib
import json
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv

load_dotenv()  # Must be before project imports so settings pick up .env

import numpy as np  # noqa: E402
from colorama import Fore, Style, init  # noqa: E402
from pydantic import ValidationError  # noqa: E402

init(autoreset=True)

from cache import RepresentationCache  # noqa: E402
from logger import add_run_log, app_logger  # noqa: E402

from .adversarial import (  # noqa: E402
    UnlabeledPool,
    load_pool,
    prepare_ranker_config,
    train_with_adversary,
    write_history,
)
from .corpus import (  # noqa: E402
    Dataset,
    build_silver_dataset,
    dataset_stats,
    load_anchored_docs,
    load_dataset,
    load_mentions,
    save_dataset,
)
from .encoder import make_encoder  # noqa: E402
from .errors import ConfigError, InputValidationError  # noqa: E402
from .evaluation import (  # noqa: E402
    average_reports,
    evaluate,
    format_table,
    load_predictions,
    write_predictions,
)
from .kbstore import KnowledgeBase, load_kb, save_anchor_stats  # noqa: E402
from .pipeline import LinkingPipeline  # noqa: E402
from .ranker import fit, init_model, load_checkpoint, save_checkpoint  # noqa: E402
from .schemas import (  # noqa: E402
    ADVERSARIAL_PRESETS,
    AdversarialConfig,
    RankerConfig,
    RunConfig,
)
from .triage import read_candidates, write_candidates  # noqa: E402

STAGES = [
    "build-kb",
    "build-dataset",
    "triage",
    "train",
    "train-adv",
    "predict",
    "evaluate",
    "stats",
]
TRAINING_STAGES = {"train", "train-adv"}


class UsageError(InputValidationError):
    """Unknown stage or flag."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plink", description="Multilingual entity linking pipeline")
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument(
        "--preset", choices=sorted(ADVERSARIAL_PRESETS), help="Named adversarial preset"
    )
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="Output directory")

    paths = parser.add_argument_group("inputs")
    paths.add_argument(
        "--kb", action="append", help="Entity JSONL (repeat for several languages)"
    )
    paths.add_argument(
        "--anchors", action="append", help="Anchor statistics JSONL, paired with --kb"
    )
    paths.add_argument("--anchored-docs", help="Anchored documents JSONL")
    paths.add_argument(
        "--dataset", action="append", help="Dataset directory (repeatable)"
    )
    paths.add_argument("--dev", help="Development dataset directory")
    paths.add_argument("--pool", help="Unlabeled text pool JSONL")
    paths.add_argument("--candidates", help="Candidate dump from the triage stage")
    paths.add_argument("--checkpoint", help="Checkpoint directory")
    paths.add_argument("--gold", help="Gold mentions JSONL or dataset directory")
    paths.add_argument(
        "--pred", action="append", help="Predictions JSONL (repeat to average runs)"
    )
    paths.add_argument("--seeds", help="Silver seed entity ids, one per line")

    knobs = parser.add_argument_group("overrides")
    knobs.add_argument("--threshold", type=float)
    knobs.add_argument("--lambda", dest="adv_lambda", type=float)
    knobs.add_argument("--adv-stop", type=int)
    knobs.add_argument("--el-epochs", type=int)
    knobs.add_argument("--k", type=int)
    knobs.add_argument("--l", type=int)
    knobs.add_argument("--two-stage", action="store_true", default=None)
    knobs.add_argument("--negatives", type=int)
    knobs.add_argument("--epochs", type=int)
    knobs.add_argument("--nil-fraction", type=float)
    knobs.add_argument("--train-size", type=int)
    knobs.add_argument("--baseline", choices=["nn"])
    knobs.add_argument("--link-direction", choices=["out", "in", "both"])
    return parser


# ── configuration ─────────────────────────────────────────────────────────────


def _set(tree: dict, dotted: str, value) -> None:
    if value is None:
        return
    *parents, leaf = dotted.split(".")
    for key in parents:
        if tree.get(key) is None:
            tree[key] = {}
        tree = tree[key]
        if not isinstance(tree, dict):
            raise ConfigError(f"config section {key!r} is not an object")
    tree[leaf] = value


def _merge_adversarial(raw: dict, updates: dict) -> None:
    section = dict(raw.get("adversarial") or {})
    if "lambda" in updates:
        section.pop("adv_lambda", None)
    section.update(updates)
    raw["adversarial"] = section


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """File values, then preset, then flags."""
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed JSON ({e.msg})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")

    raw["stage"] = args.stage
    if args.preset:
        _merge_adversarial(raw, ADVERSARIAL_PRESETS[args.preset])
    if args.stage == "train-adv" and raw.get("adversarial") is None:
        raw["adversarial"] = {}

    if args.seed is not None:
        _set(raw, "seed", args.seed)
        if args.stage in TRAINING_STAGES:
            _set(raw, "ranker.rng_seed", args.seed)
    for dotted, value in [
        ("paths.out", args.out),
        ("paths.kb", args.kb),
        ("paths.anchors", args.anchors),
        ("paths.anchored_docs", args.anchored_docs),
        ("paths.dataset", args.dataset),
        ("paths.dev", args.dev),
        ("paths.pool", args.pool),
        ("paths.candidates", args.candidates),
        ("paths.checkpoint", args.checkpoint),
        ("paths.gold", args.gold),
        ("paths.pred", args.pred),
        ("silver.seed_entities", args.seeds),
        ("silver.nil_fraction", args.nil_fraction),
        ("threshold", args.threshold),
        ("triage.k", args.k),
        ("triage.l", args.l),
        ("triage.two_stage", args.two_stage),
        ("ranker.n_negatives", args.negatives),
        ("ranker.epochs", args.epochs),
        ("train_size", args.train_size),
        ("baseline", args.baseline),
        ("link_direction", args.link_direction),
    ]:
        _set(raw, dotted, value)
    adversarial = {
        key: value
        for key, value in [
            ("lambda", args.adv_lambda),
            ("adv_stop_epoch", args.adv_stop),
            ("el_only_epochs", args.el_epochs),
        ]
        if value is not None
    }
    if adversarial:
        _merge_adversarial(raw, adversarial)
    return RunConfig.model_validate(raw)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json", by_alias=True), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _version(package: str) -> Optional[str]:
    try:
        return metadata.version(package)
    except metadata.PackageNotFoundError:
        return None


def write_run_files(cfg: RunConfig, out: Path, outputs: List[str]) -> None:
    """Effective config plus a manifest; no timestamps so reruns are byte-identical."""
    out.mkdir(parents=True, exist_ok=True)
    effective = cfg.model_dump(mode="json", by_alias=True)
    text = json.dumps(effective, indent=2, sort_keys=True)
    (out / "run_config.json").write_text(text)
    manifest = {
        "stage": cfg.stage,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "outputs": sorted(outputs),
        "versions": {
            "plink": _version("plink"),
            "python": platform.python_version(),
            "numpy": _version("numpy"),
            "torch": _version("torch"),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# ── shared loaders ────────────────────────────────────────────────────────────


def _require(value, flag: str):
    if not value:
        raise ConfigError(f"this stage needs {flag}")
    return value


def load_kbs(cfg: RunConfig) -> Dict[str, KnowledgeBase]:
    kb_paths = _require(cfg.paths.kb, "--kb")
    if cfg.paths.anchors and len(cfg.paths.anchors) != len(kb_paths):
        raise ConfigError("--anchors must be given once per --kb")
    kbs: Dict[str, KnowledgeBase] = {}
    for i, kb_path in enumerate(kb_paths):
        anchors = Path(cfg.paths.anchors[i]) if cfg.paths.anchors else None
        kb = load_kb(Path(kb_path), anchors, cfg.link_direction)
        if kb.language in kbs:
            raise ConfigError(f"two KBs given for language {kb.language!r}")
        kbs[kb.language] = kb
    return kbs


def load_datasets(cfg: RunConfig) -> List[Dataset]:
    return [load_dataset(Path(p)) for p in _require(cfg.paths.dataset, "--dataset")]


def make_pipeline(cfg: RunConfig, kbs: Dict[str, KnowledgeBase]) -> LinkingPipeline:
    encoder = make_encoder(cfg.encoder)
    if cfg.paths.cache_dir:
        cache = RepresentationCache(encoder.fingerprint, Path(cfg.paths.cache_dir))
    else:
        cache = RepresentationCache.from_settings(encoder.fingerprint)
    candidates = None
    if cfg.paths.candidates:
        candidates = read_candidates(Path(cfg.paths.candidates))
    return LinkingPipeline(kbs, encoder, cfg.triage, cache, candidates=candidates)


def downsample_train(dataset: Dataset, target_size: int, seed: int) -> Dataset:
    """Uniform random subset of mentions in original order; unused documents pruned."""
    if target_size > len(dataset.mentions):
        raise InputValidationError(
            f"cannot downsample {len(dataset.mentions)} mentions to {target_size}"
        )
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(dataset.mentions), size=target_size, replace=False)
    mentions = [dataset.mentions[i] for i in sorted(picks.tolist())]
    doc_ids = {m.doc_id for m in mentions}
    documents = {k: v for k, v in dataset.documents.items() if k in doc_ids}
    return Dataset(
        documents=documents,
        mentions=mentions,
        split=dataset.split,
        metadata={
            **dataset.metadata,
            "downsampled_from": len(dataset.mentions),
            "downsample_seed": seed,
        },
    )


def _status(message: str) -> None:
    print(f"{Fore.GREEN}✔ {message}{Style.RESET_ALL}")


# ── stages ────────────────────────────────────────────────────────────────────


def stage_build_kb(cfg: RunConfig, out: Path) -> List[str]:
    kbs = load_kbs(cfg)
    if len(kbs) != 1:
        raise ConfigError("build-kb takes exactly one --kb")
    kb = next(iter(kbs.values()))
    if cfg.paths.anchored_docs:
        kb.count_anchors(load_anchored_docs(Path(cfg.paths.anchored_docs)))
    save_anchor_stats(kb, out / "anchor_stats.jsonl")
    kb.name_index.save(out / "name_index.bin")
    summary = {
        "language": kb.language,
        "entities": len(kb),
        "median_links": kb.median_outlinks,
        "link_direction": kb.link_direction,
        "dangling_links_dropped": kb.dangling_links_dropped,
        "anchor_surfaces": len(kb.anchor_stats),
    }
    (out / "kb_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _status(
        f"KB {kb.language}: {len(kb)} entities, "
        f"{len(kb.anchor_stats)} anchor surfaces"
    )
    return ["anchor_stats.jsonl", "name_index.bin", "kb_summary.json"]


def stage_build_dataset(cfg: RunConfig, out: Path) -> List[str]:
    kbs = load_kbs(cfg)
    kb = next(iter(kbs.values()))
    docs_path = _require(cfg.paths.anchored_docs, "--anchored-docs")
    docs = load_anchored_docs(Path(docs_path))
    seeds = None
    if cfg.silver.seed_entities:
        seed_path = Path(cfg.silver.seed_entities)
        if not seed_path.exists():
            raise FileNotFoundError(f"Seed file not found: {seed_path}")
        lines = seed_path.read_text().splitlines()
        seeds = [line.strip() for line in lines if line.strip()]
    ds = build_silver_dataset(docs, kb, seeds, cfg.silver.nil_fraction, cfg.seed)
    save_dataset(ds, out / "dataset")
    _status(f"Silver dataset: {len(ds.documents)} docs, {len(ds.mentions)} mentions")
    return ["dataset"]


def stage_triage(cfg: RunConfig, out: Path) -> List[str]:
    pipeline = make_pipeline(cfg, load_kbs(cfg))
    sets = [pair for ds in load_datasets(cfg) for pair in pipeline.triage_dataset(ds)]
    write_candidates(out / "candidates.jsonl", sets)
    stats = json.dumps(pipeline.stats_dict(), indent=2, sort_keys=True)
    (out / "triage_stats.json").write_text(stats)
    recall = pipeline.stats.triage_recall
    _status(f"Candidates for {len(sets)} mentions (recall {recall})")
    return ["candidates.jsonl", "triage_stats.json"]


def _training_data(cfg: RunConfig):
    kbs = load_kbs(cfg)
    pipeline = make_pipeline(cfg, kbs)
    datasets = load_datasets(cfg)
    if cfg.train_size is not None:
        datasets = [downsample_train(ds, cfg.train_size, cfg.seed) for ds in datasets]
    examples = pipeline.build_examples(datasets, cfg.ranker.n_negatives, cfg.seed)
    if not examples:
        raise InputValidationError(
            "no training examples (all mentions NIL or unresolvable)"
        )
    evaluate_dev = None
    if cfg.paths.dev:
        dev = load_dataset(Path(cfg.paths.dev), split="dev")
        evaluate_dev = pipeline.dev_evaluator(dev, cfg.threshold)
    return kbs, pipeline, examples, evaluate_dev


def _ranker_config(cfg: RunConfig, dimension: int) -> RankerConfig:
    ranker = cfg.ranker
    if "input_dim" in ranker.model_fields_set and ranker.input_dim != dimension:
        raise ConfigError(
            f"ranker.input_dim {ranker.input_dim} != encoder dimension {dimension}"
        )
    return ranker.model_copy(update={"input_dim": dimension})


def stage_train(cfg: RunConfig, out: Path) -> List[str]:
    _, pipeline, examples, evaluate_dev = _training_data(cfg)
    ranker_cfg = _ranker_config(cfg, pipeline.encoder.dimension)
    model = init_model(ranker_cfg, ranker_cfg.rng_seed)
    history = fit(model, ranker_cfg, examples, evaluate_dev, out)
    save_checkpoint(model, ranker_cfg, out / "checkpoint")
    write_history(out / "history.jsonl", history)
    _status(f"Trained {ranker_cfg.epochs} epochs on {len(examples)} examples")
    return ["checkpoint", "history.jsonl"]


def stage_train_adv(cfg: RunConfig, out: Path) -> List[str]:
    kbs, pipeline, examples, evaluate_dev = _training_data(cfg)
    adv_cfg: AdversarialConfig = cfg.adversarial
    if "languages" not in adv_cfg.model_fields_set and len(kbs) == 2:
        adv_cfg = adv_cfg.model_copy(update={"languages": tuple(kbs)})
    if cfg.paths.pool:
        pool = load_pool(Path(cfg.paths.pool))
    else:
        pool = UnlabeledPool.from_kbs(kbs.values(), kind=adv_cfg.adv_text_kind)
    ranker_cfg = prepare_ranker_config(
        _ranker_config(cfg, pipeline.encoder.dimension), adv_cfg
    )
    model = init_model(ranker_cfg, ranker_cfg.rng_seed)
    history = train_with_adversary(
        model,
        adv_cfg,
        ranker_cfg,
        examples,
        pool,
        pipeline.encoder,
        pipeline.builder.cache,
        evaluate_dev,
        out,
    )
    save_checkpoint(model, ranker_cfg, out / "checkpoint")
    write_history(out / "history.jsonl", history)
    _status(
        f"Adversarially trained {len(history)} epochs (lambda={adv_cfg.adv_lambda})"
    )
    return ["checkpoint", "history.jsonl"]


def stage_predict(cfg: RunConfig, out: Path) -> List[str]:
    pipeline = make_pipeline(cfg, load_kbs(cfg))
    model = None
    if cfg.baseline != "nn":
        checkpoint = Path(_require(cfg.paths.checkpoint, "--checkpoint"))
        # only a ranker section the user gave is compared with the stored one
        supplied = None
        if "ranker" in cfg.model_fields_set:
            supplied = _ranker_config(cfg, pipeline.encoder.dimension)
        model = load_checkpoint(checkpoint, supplied)
    predictions = [
        p
        for ds in load_datasets(cfg)
        for p in pipeline.predict(ds, model, cfg.threshold)
    ]
    write_predictions(out / "predictions.jsonl", predictions)
    n_nil = sum(p.is_nil for p in predictions)
    _status(f"Predicted {len(predictions)} mentions ({n_nil} NIL)")
    return ["predictions.jsonl"]


def _load_gold(path: Path):
    if path.is_dir():
        return load_dataset(path).mentions
    return load_mentions(path)


def stage_evaluate(cfg: RunConfig, out: Path) -> List[str]:
    gold = _load_gold(Path(_require(cfg.paths.gold, "--gold")))
    reports = [
        evaluate(gold, load_predictions(Path(p)))
        for p in _require(cfg.paths.pred, "--pred")
    ]
    report = reports[0] if len(reports) == 1 else average_reports(reports)
    (out / "report.json").write_text(report.model_dump_json(indent=2))
    title = "all" if len(reports) == 1 else f"mean of {len(reports)}"
    table = format_table(report, title=title)
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return ["report.json", "report.txt"]


def stage_stats(cfg: RunConfig, out: Path) -> List[str]:
    kbs = load_kbs(cfg)
    results = {}
    for ds_path, ds in zip(cfg.paths.dataset, load_datasets(cfg)):
        languages = {m.language for m in ds.mentions} or {next(iter(kbs))}
        if len(languages) != 1 or next(iter(languages)) not in kbs:
            raise ConfigError(
                f"{ds_path}: needs exactly one language with a loaded KB, "
                f"got {sorted(languages)}"
            )
        kb = kbs[next(iter(languages))]
        results[ds_path] = dataset_stats(ds, kb).model_dump()
    payload = next(iter(results.values())) if len(results) == 1 else results
    (out / "stats.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(json.dumps(payload, indent=2, sort_keys=True))
    return ["stats.json"]


STAGE_HANDLERS = {
    "build-kb": stage_build_kb,
    "build-dataset": stage_build_dataset,
    "triage": stage_triage,
    "train": stage_train,
    "train-adv": stage_train_adv,
    "predict": stage_predict,
    "evaluate": stage_evaluate,
    "stats": stage_stats,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    run_log = None
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        out = Path(cfg.paths.out)
        out.mkdir(parents=True, exist_ok=True)
        run_log = add_run_log(out)
        app_logger.info(f"Stage {cfg.stage} → {out} (seed {cfg.seed})")
        outputs = STAGE_HANDLERS[cfg.stage](cfg, out)
        write_run_files(cfg, out, outputs)
        app_logger.info(f"Stage {cfg.stage} finished")
        return 0
    except (InputValidationError, ValidationError, FileNotFoundError) as e:
        app_logger.error(str(e))
        print(f"{Fore.RED}✘ {e}{Style.RESET_ALL}", file=sys.stderr)
        return 1
    except Exception as e:
        app_logger.exception(f"Stage failed: {e}")
        print(f"{Fore.RED}✘ {type(e).__name__}: {e}{Style.RESET_ALL}", file=sys.stderr)
        return 2
    finally:
        if run_log is not None:
            app_logger.remove(run_log)


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
