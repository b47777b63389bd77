"""Conditional diffusion translator: source modality in, synthetic target out.

Training minimizes the usual noise-prediction MSE. Two samplers are provided:

* :meth:`Translator.sample` - stochastic ancestral sampling over a strided
  timestep subsequence, used at inference. Each sample in the batch draws its
  noise from its own seeded generator, so the noise stream is per-sample;
  repeating a call with the same batch and seeds is bit-identical.
* :meth:`Translator.sample_differentiable` - a deterministic sampler (the
  eta=0 update rule) that starts from a zero state and keeps the whole chain
  on the autodiff tape, used inside meta-training where gradients must reach
  the translator weights through the synthesized image.
"""

from __future__ import annotations

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
from .errors import DataError
from .nets import DenoiserUNet
from .schedule import (
    NoiseSchedule,
    build_cosine_schedule,
    forward_diffuse,
    timestep_subsequence,
)

CKPT_KIND = "translator"


@dataclass(frozen=True)
class TranslatorConfig:
    """Diffusion settings plus denoiser architecture.

    ``infer_steps`` is the reverse-step count for the stochastic sampler,
    ``meta_steps`` the (shorter) chain length of the differentiable sampler.
    """

    timesteps: int = 1000
    infer_steps: int = 50
    meta_steps: int = 8
    schedule_kind: str = "cosine"
    base_channels: int = 32
    depth: int = 3
    time_dim: int = 128

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if not 1 <= self.meta_steps <= self.infer_steps <= self.timesteps:
            raise ValueError(
                "need 1 <= meta_steps <= infer_steps <= timesteps, got "
                f"{self.meta_steps}/{self.infer_steps}/{self.timesteps}"
            )
        if self.schedule_kind != "cosine":
            raise ValueError(f"unknown schedule_kind {self.schedule_kind!r}")


class Translator:
    """Bundles the denoiser network with its noise schedule."""

    def __init__(self, config: TranslatorConfig | None = None):
        self.config = config or TranslatorConfig()
        self.schedule: NoiseSchedule = build_cosine_schedule(self.config.timesteps)
        self.net = DenoiserUNet(
            base_channels=self.config.base_channels,
            depth=self.config.depth,
            time_dim=self.config.time_dim,
        )

    # -- training objective -------------------------------------------------

    def noise_prediction_loss(
        self, source: torch.Tensor, target: torch.Tensor
    ) -> torch.Tensor:
        """MSE between injected and predicted noise at uniformly drawn timesteps.

        Consumes the global torch RNG for both the timesteps and the noise.
        """
        if source.shape != target.shape:
            raise ValueError("source and target batches must have the same shape")
        b = source.shape[0]
        t = torch.randint(0, self.schedule.timesteps, (b,))
        noise = torch.randn_like(target)
        noisy = forward_diffuse(self.schedule, target, t, noise)
        predicted = self.net(noisy, source, t)
        return torch.mean((predicted - noise) ** 2)

    # -- samplers ------------------------------------------------------------

    def _predict_x0(
        self, x: torch.Tensor, source: torch.Tensor, t_val: int
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Predict noise at timestep ``t_val`` and back out the clean estimate."""
        ab = float(self.schedule.alpha_bars[t_val])
        t = torch.full((x.shape[0],), t_val, dtype=torch.long)
        eps = self.net(x, source, t)
        x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        return eps, x0

    @torch.no_grad()
    def sample(
        self, source: torch.Tensor, seeds: list[int], n_steps: int | None = None
    ) -> torch.Tensor:
        """Ancestral sampling conditioned on ``source``, one seed per sample."""
        if n_steps is None:
            n_steps = self.config.infer_steps
        if source.ndim != 4 or source.shape[1] != 1:
            raise ValueError("source must be (B, 1, H, W)")
        if len(seeds) != source.shape[0]:
            raise ValueError(f"need {source.shape[0]} seeds, got {len(seeds)}")
        self.net.eval()
        gens = [torch.Generator().manual_seed(int(s)) for s in seeds]

        def draw(shape):
            return torch.stack(
                [torch.randn(shape, generator=g) for g in gens]
            )

        sample_shape = source.shape[1:]
        x = draw(sample_shape)
        seq = timestep_subsequence(self.schedule.timesteps, n_steps)
        for i, t_val in enumerate(seq):
            t_val = int(t_val)
            ab_t = float(self.schedule.alpha_bars[t_val])
            ab_prev = (
                float(self.schedule.alpha_bars[int(seq[i + 1])])
                if i + 1 < len(seq)
                else 1.0
            )
            _, x0 = self._predict_x0(x, source, t_val)
            x0 = torch.clamp(x0, -1.0, 1.0)
            beta_eff = 1.0 - ab_t / ab_prev
            alpha_eff = ab_t / ab_prev
            mean = (
                np.sqrt(ab_prev) * beta_eff / (1.0 - ab_t) * x0
                + np.sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_t) * x
            )
            if i + 1 < len(seq):
                var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_eff
                x = mean + np.sqrt(var) * draw(sample_shape)
            else:
                x = mean
        return torch.clamp(x, -1.0, 1.0)

    def sample_differentiable(
        self, source: torch.Tensor, n_steps: int | None = None
    ) -> torch.Tensor:
        """Deterministic short-chain sampling that keeps gradients to the weights.

        Starts from a zero state rather than noise so the output is a pure
        function of the source and the weights. Intermediate clean estimates
        are left unclipped to avoid flattening gradients mid-chain; only the
        final image is clamped to the image range. With ``n_steps=1`` this
        collapses to the one-shot clean estimate at the largest timestep.
        """
        if n_steps is None:
            n_steps = self.config.meta_steps
        if not 1 <= n_steps <= self.schedule.timesteps:
            raise ValueError(f"n_steps must be in [1, {self.schedule.timesteps}]")
        if source.ndim != 4 or source.shape[1] != 1:
            raise ValueError("source must be (B, 1, H, W)")
        x = torch.zeros_like(source)
        seq = timestep_subsequence(self.schedule.timesteps, n_steps)
        for i, t_val in enumerate(seq):
            t_val = int(t_val)
            ab_prev = (
                float(self.schedule.alpha_bars[int(seq[i + 1])])
                if i + 1 < len(seq)
                else 1.0
            )
            eps, x0 = self._predict_x0(x, source, t_val)
            x = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps
        return torch.clamp(x, -1.0, 1.0)

    # -- persistence ----------------------------------------------------------

    def save(self, path: Path | str, extra: dict | None = None) -> None:
        save_checkpoint(
            path,
            kind=CKPT_KIND,
            arrays=state_dict_to_arrays(self.net.state_dict()),
            config=asdict(self.config),
            extra=extra,
        )

    @classmethod
    def load(cls, path: Path | str) -> "Translator":
        meta, arrays = load_checkpoint(path, expect_kind=CKPT_KIND)
        try:
            config = TranslatorConfig(**meta["config"])
        except (TypeError, ValueError) as e:
            raise DataError(f"checkpoint {path}: bad translator config: {e}") from e
        translator = cls(config)
        translator.net.load_state_dict(
            arrays_to_state_dict(arrays, translator.net.state_dict())
        )
        return translator
