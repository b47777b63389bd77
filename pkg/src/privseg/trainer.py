"""Bi-level training engine plus pretraining orchestration and exact resume.

Phases (any may be skipped via its epoch count):

1. Translator pretraining: noise-prediction MSE on the translator split.
2. Predictor pretraining: Dice loss on (source, companion) pairs, where the
   companion channel is a synthetic target sampled once from the pretrained
   translator (or a real target / duplicated source for the baseline modes).
3. Meta phase: alternate inner steps, which update the translator on
   mse_weight * L_MSE + (1 - mse_weight) * Q through the differentiable
   sampler, with outer steps, which update the predictor on freshly sampled
   synthetic pairs.

All stochastic choices (timesteps, noise, batch order, sampling seeds) flow
through the global torch RNG, and the RNG state is captured in the per-epoch
``state.ckpt``, so resuming reproduces the uninterrupted run bitwise. The one
exception is the pretraining companion images, which use seeds derived from
the run seed and sample ids so they are identical on resume without having to
be stored.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    arrays_to_state_dict,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)
from .data import Dataset
from .diffusion import Translator, TranslatorConfig
from .errors import ConfigError, DataError, NumericError
from .predictor import Predictor, PredictorConfig, DiceConfig, predictor_loss

STATE_KIND = "train_state"
STATE_NAME = "state.ckpt"
LOSS_CSV_COLUMNS = ("step", "phase", "L_T", "L_MSE", "Q", "L_P")

PHASE_TRANSLATOR = "translator_pretrain"
PHASE_PREDICTOR = "predictor_pretrain"
PHASE_INNER = "meta_inner"
PHASE_OUTER = "meta_outer"


@dataclass(frozen=True)
class MetaConfig:
    """Knobs of the three-phase schedule.

    ``mse_weight`` is the convex-combination weight of the reconstruction
    term in the inner loss; the remaining weight goes to the quality score
    (the predictor's Dice loss on the synthesized image).
    """

    mse_weight: float = 0.75
    lr: float = 1e-4
    epochs_translator_pretrain: int = 60
    epochs_predictor_pretrain: int = 180
    epochs_meta: int = 10
    n_inner: int = 1
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mse_weight <= 1.0:
            raise ConfigError("mse_weight must be in [0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        for name in ("epochs_translator_pretrain", "epochs_predictor_pretrain", "epochs_meta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_inner < 1:
            raise ConfigError("n_inner must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# Tensor plumbing
# ---------------------------------------------------------------------------

def stack_images(dataset: Dataset, attr: str) -> torch.Tensor:
    """Stack one image field of a dataset into a (N, 1, H, W) float tensor."""
    arrays = []
    for s in dataset:
        img = getattr(s, attr)
        if img is None:
            raise DataError(f"sample {s.id!r} has no {attr} image")
        arrays.append(np.asarray(img, dtype=np.float32))
    return torch.from_numpy(np.stack(arrays)).unsqueeze(1)


def stack_masks(dataset: Dataset) -> torch.Tensor:
    arrays = [np.asarray(s.mask, dtype=np.float32) for s in dataset]
    return torch.from_numpy(np.stack(arrays)).unsqueeze(1)


def _batch_indices(n: int, batch_size: int) -> list[torch.Tensor]:
    """Shuffled index batches (last one may be short); consumes the global RNG."""
    perm = torch.randperm(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def derive_seed(base_seed: int, tag: str) -> int:
    """Stable per-item sampling seed, independent of global RNG state."""
    return (base_seed * 1000003 + zlib.crc32(tag.encode())) % (2**62)


def _check_finite(value: torch.Tensor, what: str) -> float:
    value = value.detach()
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite {what} encountered")
    return float(value)


# ---------------------------------------------------------------------------
# Single-step operations
# ---------------------------------------------------------------------------

def translator_train_step(
    translator: Translator,
    optimizer: torch.optim.Optimizer,
    sources: torch.Tensor,
    targets: torch.Tensor,
) -> float:
    """One noise-prediction update; returns the scalar loss."""
    optimizer.zero_grad(set_to_none=True)
    loss = translator.noise_prediction_loss(sources, targets)
    value = _check_finite(loss, "translator loss")
    loss.backward()
    optimizer.step()
    return value


def predictor_train_step(
    predictor: Predictor,
    optimizer: torch.optim.Optimizer,
    pairs: torch.Tensor,
    masks: torch.Tensor,
) -> float:
    """One Dice-loss update on prebuilt 2-channel pairs; returns the loss."""
    optimizer.zero_grad(set_to_none=True)
    loss = predictor.loss(pairs, masks)
    value = _check_finite(loss, "predictor loss")
    loss.backward()
    optimizer.step()
    return value


def compute_quality_score(
    translator: Translator,
    predictor: Predictor,
    sources: torch.Tensor,
    masks: torch.Tensor,
    n_steps: int | None = None,
) -> torch.Tensor:
    """Predictor Dice loss on the differentiable translation of ``sources``.

    The predictor weights are frozen for the duration of the call, so the
    returned scalar carries gradient to the translator weights only.
    """
    params = list(predictor.net.parameters())
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        synth = translator.sample_differentiable(sources, n_steps)
        probs = predictor.net(torch.cat([sources, synth], dim=1))
        q = predictor_loss(probs, masks, predictor.config.dice.smooth_eps)
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)
    return q


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

class MetaTrainer:
    """Owns both models, their optimizers, the loss history, and resume state.

    ``pair_source`` selects the predictor's second input channel:
    ``"synthetic"`` (sampled from the translator), ``"real_target"``, or
    ``"duplicate"`` (the source again). ``translate_fn`` replaces the
    translator's stochastic sampler when given; it is used both for the
    pretraining companion images and inside outer steps (signature
    ``fn(sources, seeds) -> images``).
    """

    def __init__(
        self,
        cfg: MetaConfig,
        predictor: Predictor,
        translator: Translator | None = None,
        train_translator: Dataset | None = None,
        train_predictor: Dataset | None = None,
        pair_source: str = "synthetic",
        translate_fn=None,
        out_dir: Path | str | None = None,
    ):
        if pair_source not in ("synthetic", "real_target", "duplicate"):
            raise ConfigError(f"unknown pair_source {pair_source!r}")
        needs_translator = (
            cfg.epochs_translator_pretrain > 0
            or cfg.epochs_meta > 0
            or (pair_source == "synthetic" and translate_fn is None)
        )
        if needs_translator and translator is None:
            raise ConfigError("this configuration requires a translator")
        if cfg.epochs_meta > 0 and pair_source != "synthetic":
            raise ConfigError("the meta phase only makes sense with pair_source='synthetic'")
        self.cfg = cfg
        self.translator = translator
        self.predictor = predictor
        self.translate_fn = translate_fn
        self.out_dir = Path(out_dir) if out_dir is not None else None

        self.d_t = train_translator or []
        self.d_p = train_predictor or []
        if (cfg.epochs_translator_pretrain > 0 or cfg.epochs_meta > 0) and not self.d_t:
            raise DataError("translator phases need a non-empty translator split")
        if (cfg.epochs_predictor_pretrain > 0 or cfg.epochs_meta > 0) and not self.d_p:
            raise DataError("predictor phases need a non-empty predictor split")

        self.t_sources = stack_images(self.d_t, "source") if self.d_t else None
        self.t_targets = None
        if self.d_t and (cfg.epochs_translator_pretrain > 0 or cfg.epochs_meta > 0):
            self.t_targets = stack_images(self.d_t, "target")
        self.t_masks = stack_masks(self.d_t) if self.d_t else None
        self.p_sources = stack_images(self.d_p, "source") if self.d_p else None
        self.p_masks = stack_masks(self.d_p) if self.d_p else None
        self.pair_source = pair_source
        self._pretrain_pairs: torch.Tensor | None = None

        self.opt_translator = (
            torch.optim.Adam(self.translator.net.parameters(), lr=cfg.lr)
            if self.translator is not None
            else None
        )
        self.opt_predictor = torch.optim.Adam(self.predictor.net.parameters(), lr=cfg.lr)

        self.translator_epochs_done = 0
        self.predictor_epochs_done = 0
        self.meta_epochs_done = 0
        self.global_step = 0
        self.history: list[list] = []
        self._resumed = False

    # -- logging ---------------------------------------------------------

    def _log(self, phase: str, l_t=None, l_mse=None, q=None, l_p=None) -> None:
        self.history.append([self.global_step, phase, l_t, l_mse, q, l_p])
        self.global_step += 1

    # -- sampling helpers --------------------------------------------------

    def _translate(self, sources: torch.Tensor, seeds: list[int]) -> torch.Tensor:
        if self.translate_fn is not None:
            with torch.no_grad():
                return self.translate_fn(sources, seeds)
        return self.translator.sample(sources, seeds)

    def _companion_images(self, dataset: Dataset, sources: torch.Tensor) -> torch.Tensor:
        """Second input channel for predictor pretraining, per pair_source."""
        if self.pair_source == "duplicate":
            return sources
        if self.pair_source == "real_target":
            return stack_images(dataset, "target")
        chunks = []
        bs = self.cfg.batch_size
        for i in range(0, len(dataset), bs):
            batch = sources[i : i + bs]
            seeds = [
                derive_seed(self.cfg.seed, f"pretrain:{s.id}")
                for s in dataset[i : i + bs]
            ]
            chunks.append(self._translate(batch, seeds))
        return torch.cat(chunks)

    def _ensure_pretrain_pairs(self) -> torch.Tensor:
        if self._pretrain_pairs is None:
            companions = self._companion_images(self.d_p, self.p_sources)
            self._pretrain_pairs = torch.cat([self.p_sources, companions], dim=1)
        return self._pretrain_pairs

    # -- phase epochs ------------------------------------------------------

    def translator_pretrain_epoch(self) -> float:
        total = 0.0
        batches = _batch_indices(len(self.d_t), self.cfg.batch_size)
        for idx in batches:
            loss = translator_train_step(
                self.translator,
                self.opt_translator,
                self.t_sources[idx],
                self.t_targets[idx],
            )
            self._log(PHASE_TRANSLATOR, l_mse=loss)
            total += loss
        return total / len(batches)

    def predictor_pretrain_epoch(self) -> float:
        pairs = self._ensure_pretrain_pairs()
        total = 0.0
        batches = _batch_indices(len(self.d_p), self.cfg.batch_size)
        for idx in batches:
            loss = predictor_train_step(
                self.predictor, self.opt_predictor, pairs[idx], self.p_masks[idx]
            )
            self._log(PHASE_PREDICTOR, l_p=loss)
            total += loss
        return total / len(batches)

    def inner_step(
        self, sources: torch.Tensor, targets: torch.Tensor, masks: torch.Tensor
    ) -> tuple[float, float, float]:
        """One translator update on the combined inner loss.

        A single differentiable translation feeds both the reconstruction
        term and the quality score. At the endpoints of mse_weight only the
        active term enters the backward graph, so the gradient reduces to
        the pure single-term gradient exactly.
        """
        w = self.cfg.mse_weight
        synth = self.translator.sample_differentiable(sources)
        l_mse = torch.mean((synth - targets) ** 2)
        params = list(self.predictor.net.parameters())
        for p in params:
            p.requires_grad_(False)
        try:
            probs = self.predictor.net(torch.cat([sources, synth], dim=1))
            q = predictor_loss(probs, masks, self.predictor.config.dice.smooth_eps)
        finally:
            for p in params:
                p.requires_grad_(True)
        if w == 1.0:
            loss = l_mse
        elif w == 0.0:
            loss = q
        else:
            loss = w * l_mse + (1.0 - w) * q
        mse_val, q_val = float(l_mse.detach()), float(q.detach())
        l_t = w * mse_val + (1.0 - w) * q_val
        self.opt_translator.zero_grad(set_to_none=True)
        _check_finite(loss, "inner loss")
        loss.backward()
        self.opt_translator.step()
        return l_t, mse_val, q_val

    def outer_step(self, sources: torch.Tensor, masks: torch.Tensor) -> float:
        """One predictor update on freshly sampled synthetic pairs (translator frozen)."""
        seeds = torch.randint(0, 2**62, (sources.shape[0],)).tolist()
        with torch.no_grad():
            synth = self._translate(sources, seeds)
        pairs = torch.cat([sources, synth], dim=1)
        return predictor_train_step(self.predictor, self.opt_predictor, pairs, masks)

    def meta_epoch(self) -> tuple[float, float]:
        """Alternate n_inner inner steps with one outer step per predictor batch."""
        p_batches = _batch_indices(len(self.d_p), self.cfg.batch_size)
        t_batches: list[torch.Tensor] = []
        sum_t, sum_p, n_t = 0.0, 0.0, 0
        for p_idx in p_batches:
            for _ in range(self.cfg.n_inner):
                if not t_batches:
                    t_batches = _batch_indices(len(self.d_t), self.cfg.batch_size)
                t_idx = t_batches.pop(0)
                l_t, l_mse, q = self.inner_step(
                    self.t_sources[t_idx], self.t_targets[t_idx], self.t_masks[t_idx]
                )
                self._log(PHASE_INNER, l_t=l_t, l_mse=l_mse, q=q)
                sum_t += l_t
                n_t += 1
            l_p = self.outer_step(self.p_sources[p_idx], self.p_masks[p_idx])
            self._log(PHASE_OUTER, l_p=l_p)
            sum_p += l_p
        return sum_t / max(n_t, 1), sum_p / len(p_batches)

    # -- orchestration -----------------------------------------------------

    def run(self, log=None) -> list[list]:
        """Execute all remaining epochs of every phase; returns the loss history.

        On a fresh trainer this seeds the global RNG from the config; after
        ``load_state`` it continues from the captured RNG state instead.
        """
        if not self._resumed:
            torch.manual_seed(self.cfg.seed)

        def say(msg: str) -> None:
            if log is not None:
                log(msg)

        while self.translator_epochs_done < self.cfg.epochs_translator_pretrain:
            mean = self.translator_pretrain_epoch()
            self.translator_epochs_done += 1
            say(
                f"translator pretrain epoch {self.translator_epochs_done}/"
                f"{self.cfg.epochs_translator_pretrain} loss {mean:.4f}"
            )
            self._checkpoint()
        while self.predictor_epochs_done < self.cfg.epochs_predictor_pretrain:
            mean = self.predictor_pretrain_epoch()
            self.predictor_epochs_done += 1
            say(
                f"predictor pretrain epoch {self.predictor_epochs_done}/"
                f"{self.cfg.epochs_predictor_pretrain} loss {mean:.4f}"
            )
            self._checkpoint()
        while self.meta_epochs_done < self.cfg.epochs_meta:
            mean_t, mean_p = self.meta_epoch()
            self.meta_epochs_done += 1
            say(
                f"meta epoch {self.meta_epochs_done}/{self.cfg.epochs_meta} "
                f"inner {mean_t:.4f} outer {mean_p:.4f}"
            )
            self._checkpoint()
        return self.history

    def _checkpoint(self) -> None:
        if self.out_dir is not None:
            self.save_state(self.out_dir / STATE_NAME)

    # -- state serialization -------------------------------------------------

    def _config_echo(self) -> dict:
        return {
            "meta": asdict(self.cfg),
            "translator": asdict(self.translator.config) if self.translator else None,
            "predictor": asdict(self.predictor.config),
        }

    def save_state(self, path: Path | str) -> None:
        arrays: dict[str, np.ndarray] = {}
        if self.translator is not None:
            for k, v in state_dict_to_arrays(self.translator.net.state_dict()).items():
                arrays[f"translator.{k}"] = v
            arrays.update(_optimizer_arrays("opt_translator", self.opt_translator))
        for k, v in state_dict_to_arrays(self.predictor.net.state_dict()).items():
            arrays[f"predictor.{k}"] = v
        arrays.update(_optimizer_arrays("opt_predictor", self.opt_predictor))
        arrays["rng_state"] = torch.get_rng_state().numpy().astype(np.uint8)
        extra = {
            "counters": {
                "translator_epochs_done": self.translator_epochs_done,
                "predictor_epochs_done": self.predictor_epochs_done,
                "meta_epochs_done": self.meta_epochs_done,
                "global_step": self.global_step,
            },
            "history": self.history,
            "pair_source": self.pair_source,
        }
        save_checkpoint(path, STATE_KIND, arrays, config=self._config_echo(), extra=extra)

    def load_state(self, path: Path | str) -> None:
        meta, arrays = load_checkpoint(path, expect_kind=STATE_KIND)
        saved_cfg = meta.get("config", {}).get("meta", {})
        for key in ("seed", "batch_size", "lr", "mse_weight", "n_inner"):
            ours = asdict(self.cfg)[key]
            if key in saved_cfg and saved_cfg[key] != ours:
                raise ConfigError(
                    f"resume mismatch: saved {key}={saved_cfg[key]!r}, ours {ours!r}"
                )
        if meta.get("extra", {}).get("pair_source") != self.pair_source:
            raise ConfigError("resume mismatch: pair_source differs")
        if self.translator is not None:
            t_arrays = {
                k[len("translator.") :]: v
                for k, v in arrays.items()
                if k.startswith("translator.")
            }
            self.translator.net.load_state_dict(
                arrays_to_state_dict(t_arrays, self.translator.net.state_dict())
            )
            _load_optimizer("opt_translator", self.opt_translator, arrays)
        p_arrays = {
            k[len("predictor.") :]: v
            for k, v in arrays.items()
            if k.startswith("predictor.")
        }
        self.predictor.net.load_state_dict(
            arrays_to_state_dict(p_arrays, self.predictor.net.state_dict())
        )
        _load_optimizer("opt_predictor", self.opt_predictor, arrays)
        torch.set_rng_state(torch.from_numpy(arrays["rng_state"].copy()))
        counters = meta["extra"]["counters"]
        self.translator_epochs_done = counters["translator_epochs_done"]
        self.predictor_epochs_done = counters["predictor_epochs_done"]
        self.meta_epochs_done = counters["meta_epochs_done"]
        self.global_step = counters["global_step"]
        self.history = [list(row) for row in meta["extra"]["history"]]
        self._resumed = True


def _optimizer_arrays(prefix: str, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    sd = optimizer.state_dict()
    for idx, st in sd["state"].items():
        step = st["step"]
        step_val = float(step.item()) if torch.is_tensor(step) else float(step)
        arrays[f"{prefix}.{idx}.step"] = np.array([step_val], dtype=np.float32)
        for key in ("exp_avg", "exp_avg_sq"):
            arrays[f"{prefix}.{idx}.{key}"] = (
                st[key].detach().cpu().numpy().astype(np.float32)
            )
    return arrays


def _load_optimizer(
    prefix: str, optimizer: torch.optim.Optimizer, arrays: dict[str, np.ndarray]
) -> None:
    sd = optimizer.state_dict()
    n_params = sum(len(g["params"]) for g in sd["param_groups"])
    state = {}
    for idx in range(n_params):
        key = f"{prefix}.{idx}.exp_avg"
        if key not in arrays:
            continue
        state[idx] = {
            "step": torch.tensor(float(arrays[f"{prefix}.{idx}.step"][0])),
            "exp_avg": torch.from_numpy(arrays[key].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"{prefix}.{idx}.exp_avg_sq"].copy()),
        }
    optimizer.load_state_dict({"state": state, "param_groups": sd["param_groups"]})


def write_loss_csv(history: list[list], path: Path | str) -> None:
    """Export the loss history; empty cells where a phase lacks that loss."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_CSV_COLUMNS)
        for step, phase, l_t, l_mse, q, l_p in history:
            writer.writerow(
                [step, phase]
                + ["" if v is None else repr(float(v)) for v in (l_t, l_mse, q, l_p)]
            )
