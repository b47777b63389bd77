"""Run orchestration: config resolution, the four experiment modes, artifacts.

Config precedence is flag > environment > file > default. Environment
overrides use the ``PRIVSEG_`` prefix with ``__`` separating nesting levels
(``PRIVSEG_META__BATCH_SIZE=4``); values are parsed as JSON when possible and
kept as strings otherwise.

Every command that owns an output directory takes an exclusive lock file
(``.lock``) there for the duration of the run and finishes by writing a
``run_record.json`` with the resolved config, timestamps, and artifact paths.
The one exception is ``gen-data``, whose output must be byte-identical for
identical specs, so it prints its summary instead of recording timestamps.
"""

from __future__ import annotations

import dataclasses
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (
    IMAGE_DTYPE,
    MASK_DTYPE,
    Dataset,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic_dataset,
    load_dataset,
    read_array,
    save_dataset,
    split_train,
    write_array,
)
from .diffusion import Translator, TranslatorConfig
from .errors import ConfigError, DataError
from .metrics import AggregateReport, MetricsConfig, evaluate_dataset
from .predictor import DiceConfig, Predictor, PredictorConfig, binarize
from .report import (
    format_table,
    save_loss_curves,
    save_overlay,
    save_report_figure,
    write_per_case_csv,
)
from .trainer import MetaConfig, MetaTrainer, STATE_NAME, derive_seed, stack_images, write_loss_csv

ENV_PREFIX = "PRIVSEG_"
MODES = ("metat2", "unet_both", "unet_source", "ddpm_unet")

TRANSLATOR_CKPT = "translator.ckpt"
PREDICTOR_CKPT = "predictor.ckpt"

# second-channel recipe per mode; inference refuses a predictor trained otherwise
MODE_PAIR_SOURCE = {
    "metat2": "synthetic",
    "ddpm_unet": "synthetic",
    "unet_both": "real_target",
    "unet_source": "duplicate",
}


@dataclass(frozen=True)
class RunConfig:
    mode: str = "metat2"
    train_manifest: str | None = None
    test_manifest: str | None = None
    out_dir: str | None = None
    seed: int = 0
    fraction_translator: float = 0.5
    meta: MetaConfig = MetaConfig()
    translator: TranslatorConfig = TranslatorConfig()
    predictor: PredictorConfig = PredictorConfig()
    metrics: MetricsConfig = MetricsConfig()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    def echo(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["version"] = __version__
        return doc


def _dataclass_from_dict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = set(cls.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from e


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(env) -> dict:
    """Collect PRIVSEG_* variables into a nested override mapping."""
    out: dict = {}
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX) :].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _parse_env_value(raw)
    return out


def _deep_update(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def load_run_config(
    config_path: Path | str | None = None,
    env=None,
    flag_overrides: dict | None = None,
) -> RunConfig:
    """Resolve a RunConfig from file, environment, and flag layers."""
    doc: dict = {}
    if config_path is not None:
        config_path = Path(config_path)
        if not config_path.is_file():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            doc = json.loads(config_path.read_text("utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    _deep_update(doc, env_overrides(env if env is not None else os.environ))
    _deep_update(doc, {k: v for k, v in (flag_overrides or {}).items() if v is not None})

    top_known = set(RunConfig.__dataclass_fields__)
    unknown = set(doc) - top_known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    meta_doc = dict(doc.get("meta", {}))
    if "seed" in meta_doc:
        raise ConfigError("set the seed at the top level, not under 'meta'")
    meta_doc["seed"] = seed
    meta = _dataclass_from_dict(MetaConfig, meta_doc, "meta")
    translator = _dataclass_from_dict(TranslatorConfig, doc.get("translator", {}), "translator")
    pred_doc = dict(doc.get("predictor", {}))
    if "dice" in pred_doc:
        pred_doc["dice"] = _dataclass_from_dict(DiceConfig, pred_doc["dice"], "predictor.dice")
    predictor = _dataclass_from_dict(PredictorConfig, pred_doc, "predictor")
    metrics = _dataclass_from_dict(MetricsConfig, doc.get("metrics", {}), "metrics")

    fraction = doc.get("fraction_translator", 0.5)
    try:
        return RunConfig(
            mode=doc.get("mode", "metat2"),
            train_manifest=doc.get("train_manifest"),
            test_manifest=doc.get("test_manifest"),
            out_dir=doc.get("out_dir"),
            seed=seed,
            fraction_translator=fraction,
            meta=meta,
            translator=translator,
            predictor=predictor,
            metrics=metrics,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------------------
# Output directory plumbing
# ---------------------------------------------------------------------------

@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"output directory {out_dir} is in use by another run "
            f"(remove {lock} if that run is dead)"
        ) from None
    try:
        os.write(fd, f"pid {os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_run_record(
    out_dir: Path,
    command: str,
    config_echo: dict,
    started: str,
    artifacts: dict[str, str],
    report: dict | None = None,
) -> None:
    record = {
        "command": command,
        "version": __version__,
        "config": config_echo,
        "started": started,
        "ended": _utcnow(),
        "artifacts": artifacts,
        "report": report,
    }
    path = out_dir / "run_record.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", "utf-8")
    os.replace(tmp, path)


def _require(value, name: str):
    if value is None:
        raise ConfigError(f"missing required setting: {name}")
    return value


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def run_gen_data(spec_path: Path | str, out_dir: Path | str, seed: int | None = None, log=print) -> Path:
    """Generate a synthetic dataset directory from a SyntheticSpec JSON file."""
    spec_path = Path(spec_path)
    if not spec_path.is_file():
        raise ConfigError(f"spec file not found: {spec_path}")
    try:
        doc = json.loads(spec_path.read_text("utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"spec file {spec_path} is not valid JSON: {e}") from e
    if seed is not None:
        doc["seed"] = seed
    try:
        spec = SyntheticSpec.from_dict(doc)
    except DataError as e:
        raise ConfigError(str(e)) from e
    dataset = generate_synthetic_dataset(spec)
    out_dir = Path(out_dir)
    with output_lock(out_dir):
        manifest = save_dataset(dataset, out_dir)
    if dataset:
        lesion_px = [int(s.mask.sum()) for s in dataset]
        log(
            f"wrote {len(dataset)} samples of size {spec.image_size[0]}x{spec.image_size[1]} "
            f"to {out_dir} (lesion pixels per sample: min {min(lesion_px)}, "
            f"mean {sum(lesion_px) / len(lesion_px):.1f}, max {max(lesion_px)})"
        )
    else:
        log(f"wrote an empty dataset to {out_dir}")
    return manifest


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _build_trainer(cfg: RunConfig, train_set: Dataset, out_dir: Path) -> MetaTrainer:
    predictor = Predictor(cfg.predictor)
    if cfg.mode in ("metat2", "ddpm_unet"):
        translator = Translator(cfg.translator)
        d_t, d_p = split_train(train_set, SplitSpec(cfg.seed, cfg.fraction_translator))
        meta_cfg = cfg.meta
        if cfg.mode == "ddpm_unet":
            meta_cfg = dataclasses.replace(meta_cfg, epochs_meta=0)
        return MetaTrainer(
            meta_cfg,
            predictor,
            translator=translator,
            train_translator=d_t,
            train_predictor=d_p,
            pair_source="synthetic",
            out_dir=out_dir,
        )
    # baseline modes: predictor only, trained on the full training set
    meta_cfg = dataclasses.replace(
        cfg.meta, epochs_translator_pretrain=0, epochs_meta=0
    )
    return MetaTrainer(
        meta_cfg,
        predictor,
        translator=None,
        train_predictor=train_set,
        pair_source=MODE_PAIR_SOURCE[cfg.mode],
        out_dir=out_dir,
    )


def run_train(cfg: RunConfig, log=print) -> dict[str, str]:
    """Train per mode; emits checkpoints, loss CSV, loss-curve figure, RunRecord."""
    started = _utcnow()
    train_manifest = _require(cfg.train_manifest, "train_manifest")
    out_dir = Path(_require(cfg.out_dir, "out_dir"))
    load_targets = cfg.mode != "unet_source"
    train_set = load_dataset(train_manifest, load_targets=load_targets)
    with output_lock(out_dir):
        # weight initialization draws from the global RNG, so seed before building
        torch.manual_seed(cfg.seed)
        trainer = _build_trainer(cfg, train_set, out_dir)
        state_path = out_dir / STATE_NAME
        if state_path.is_file():
            log(f"resuming from {state_path}")
            trainer.load_state(state_path)
        history = trainer.run(log=log)

        artifacts = {"state": STATE_NAME, "loss_csv": "loss.csv", "loss_curves": "loss_curves.png"}
        write_loss_csv(history, out_dir / "loss.csv")
        save_loss_curves(history, out_dir / "loss_curves.png")
        if trainer.translator is not None:
            trainer.translator.save(out_dir / TRANSLATOR_CKPT)
            artifacts["translator"] = TRANSLATOR_CKPT
        trainer.predictor.save(
            out_dir / PREDICTOR_CKPT, pair_source=trainer.pair_source
        )
        artifacts["predictor"] = PREDICTOR_CKPT
        write_run_record(out_dir, "train", cfg.echo(), started, artifacts)
    log(f"training finished; artifacts in {out_dir}")
    return artifacts


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _load_predictor_for_mode(ckpt_dir: Path, mode: str) -> Predictor:
    predictor, extra = Predictor.load(ckpt_dir / PREDICTOR_CKPT)
    expected = MODE_PAIR_SOURCE[mode]
    if extra["pair_source"] != expected:
        raise ConfigError(
            f"checkpoint in {ckpt_dir} was trained with pair_source="
            f"{extra['pair_source']!r} but mode {mode!r} needs {expected!r}"
        )
    return predictor


def _synthesize(
    translator: Translator,
    dataset: Dataset,
    sources: torch.Tensor,
    seed: int,
    batch_size: int,
    tag: str,
) -> torch.Tensor:
    chunks = []
    for i in range(0, len(dataset), batch_size):
        seeds = [derive_seed(seed, f"{tag}:{s.id}") for s in dataset[i : i + batch_size]]
        chunks.append(translator.sample(sources[i : i + batch_size], seeds))
    return torch.cat(chunks) if chunks else sources[:0]


def _companions_for_mode(
    cfg: RunConfig, ckpt_dir: Path, dataset: Dataset, sources: torch.Tensor
) -> torch.Tensor:
    if cfg.mode in ("metat2", "ddpm_unet"):
        translator = Translator.load(ckpt_dir / TRANSLATOR_CKPT)
        return _synthesize(
            translator, dataset, sources, cfg.seed, cfg.meta.batch_size, "infer"
        )
    if cfg.mode == "unet_both":
        return stack_images(dataset, "target")
    return sources


def run_infer(cfg: RunConfig, checkpoint_dir: Path | str, log=print) -> dict[str, str]:
    """Predict masks for a test manifest; source-only in metat2/ddpm_unet modes."""
    started = _utcnow()
    ckpt_dir = Path(checkpoint_dir)
    manifest = _require(cfg.test_manifest, "test_manifest")
    out_dir = Path(_require(cfg.out_dir, "out_dir"))
    # only the both-modality baseline may read target arrays at inference
    dataset = load_dataset(manifest, load_targets=(cfg.mode == "unet_both"))
    if not dataset:
        raise DataError(f"manifest {manifest} has no samples")
    predictor = _load_predictor_for_mode(ckpt_dir, cfg.mode)
    with output_lock(out_dir):
        sources = stack_images(dataset, "source")
        companions = _companions_for_mode(cfg, ckpt_dir, dataset, sources)
        preds = []
        bs = cfg.meta.batch_size
        with torch.no_grad():
            for i in range(0, len(dataset), bs):
                pair = torch.cat([sources[i : i + bs], companions[i : i + bs]], dim=1)
                probs = predictor(pair)
                preds.append(binarize(probs, predictor.config.dice.threshold))
        masks = torch.cat(preds).squeeze(1).numpy().astype(np.uint8)
        artifacts = {}
        for sample, mask in zip(dataset, masks):
            rel = f"arrays/{sample.id}.pred.u8"
            write_array(out_dir / rel, mask)
            artifacts[sample.id] = rel
        write_run_record(out_dir, "infer", cfg.echo(), started, {"predictions": "arrays/"})
    log(f"wrote {len(dataset)} predicted masks to {out_dir}")
    return artifacts


def load_predictions(pred_dir: Path | str, dataset: Dataset) -> list[np.ndarray]:
    """Read the predicted masks matching a dataset from an inference directory."""
    pred_dir = Path(pred_dir)
    preds = []
    for sample in dataset:
        path = pred_dir / "arrays" / f"{sample.id}.pred.u8"
        preds.append(read_array(path, MASK_DTYPE, sample.mask.shape))
    return preds


# ---------------------------------------------------------------------------
# translate
# ---------------------------------------------------------------------------

def run_translate(
    cfg: RunConfig,
    checkpoint_dir: Path | str,
    overlays: bool = False,
    log=print,
) -> dict:
    """Write synthetic target images (and optional overlays) for a manifest."""
    started = _utcnow()
    ckpt_dir = Path(checkpoint_dir)
    manifest = _require(cfg.test_manifest, "test_manifest")
    out_dir = Path(_require(cfg.out_dir, "out_dir"))
    dataset = load_dataset(manifest, load_targets=True)
    if not dataset:
        raise DataError(f"manifest {manifest} has no samples")
    translator = Translator.load(ckpt_dir / TRANSLATOR_CKPT)
    with output_lock(out_dir):
        sources = stack_images(dataset, "source")
        synth = _synthesize(
            translator, dataset, sources, cfg.seed, cfg.meta.batch_size, "translate"
        )
        synth_np = synth.squeeze(1).numpy()
        per_sample = []
        for i, sample in enumerate(dataset):
            write_array(out_dir / f"arrays/{sample.id}.synth.f32", synth_np[i])
            entry = {"id": sample.id, "mse_synth_vs_target": None, "mse_source_vs_target": None}
            if sample.target is not None:
                target = sample.target.astype(np.float64)
                entry["mse_synth_vs_target"] = float(
                    np.mean((synth_np[i].astype(np.float64) - target) ** 2)
                )
                entry["mse_source_vs_target"] = float(
                    np.mean((sample.source.astype(np.float64) - target) ** 2)
                )
            per_sample.append(entry)
            if overlays:
                (out_dir / "overlays").mkdir(exist_ok=True)
                save_overlay(
                    sample.source,
                    synth_np[i],
                    out_dir / "overlays" / f"{sample.id}.png",
                    real_target=sample.target,
                )
        with_targets = [e for e in per_sample if e["mse_synth_vs_target"] is not None]
        summary = {
            "per_sample": per_sample,
            "mse_synth_mean": (
                float(np.mean([e["mse_synth_vs_target"] for e in with_targets]))
                if with_targets
                else None
            ),
            "mse_source_mean": (
                float(np.mean([e["mse_source_vs_target"] for e in with_targets]))
                if with_targets
                else None
            ),
        }
        (out_dir / "translation_summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", "utf-8"
        )
        write_run_record(
            out_dir,
            "translate",
            cfg.echo(),
            started,
            {"synthetic": "arrays/", "summary": "translation_summary.json"},
        )
    if summary["mse_synth_mean"] is not None:
        log(
            f"mean MSE versus real target: synthetic {summary['mse_synth_mean']:.4f}, "
            f"raw source {summary['mse_source_mean']:.4f}"
        )
    log(f"wrote {len(dataset)} synthetic images to {out_dir}")
    return summary


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def run_evaluate(
    cfg: RunConfig, pred_dir: Path | str, log=print
) -> AggregateReport:
    """Score predictions against a manifest; writes report.json/csv/figure."""
    started = _utcnow()
    manifest = _require(cfg.test_manifest, "test_manifest")
    out_dir = Path(cfg.out_dir) if cfg.out_dir else Path(pred_dir)
    dataset = load_dataset(manifest, load_targets=False)
    if not dataset:
        raise DataError(f"manifest {manifest} has no samples")
    predictions = load_predictions(pred_dir, dataset)
    report = evaluate_dataset(predictions, dataset, cfg.metrics)
    with output_lock(out_dir):
        (out_dir / "report.json").write_text(report.to_json(), "utf-8")
        write_per_case_csv(report, out_dir / "per_case.csv")
        save_report_figure(report, out_dir / "report.png")
        write_run_record(
            out_dir,
            "evaluate",
            cfg.echo(),
            started,
            {"report": "report.json", "per_case": "per_case.csv", "figure": "report.png"},
            report=json.loads(report.to_json()),
        )
    log(format_table({cfg.mode: report}))
    return report
