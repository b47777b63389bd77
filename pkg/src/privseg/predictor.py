"""Segmentation predictor: soft Dice training loss and thresholding.

The predictor consumes a 2-channel pair (source image plus a companion image,
synthetic or real depending on the pipeline) and emits a per-pixel lesion
probability. The training objective is the smoothed soft Dice loss.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import torch

from .checkpoint import (
    arrays_to_state_dict,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)
from .errors import DataError
from .nets import SegUNet

CKPT_KIND = "predictor"

# What the second input channel held during training; inference must match.
PAIR_SOURCES = ("synthetic", "real_target", "duplicate")


@dataclass(frozen=True)
class DiceConfig:
    smooth_eps: float = 1.0
    threshold: float = 0.5

    def __post_init__(self):
        if self.smooth_eps <= 0:
            raise ValueError("smooth_eps must be > 0")
        if not 0.0 <= self.threshold < 1.0:
            raise ValueError("threshold must be in [0, 1)")


def dice_loss(
    probs: torch.Tensor, mask: torch.Tensor, smooth_eps: float = 1.0
) -> torch.Tensor:
    """Soft Dice loss for a single prediction/mask pair of any matching shape."""
    if probs.shape != mask.shape:
        raise ValueError(f"probs {tuple(probs.shape)} != mask {tuple(mask.shape)}")
    mask = mask.to(probs.dtype)
    intersection = (probs * mask).sum()
    denom = probs.sum() + mask.sum()
    return 1.0 - (2.0 * intersection + smooth_eps) / (denom + smooth_eps)


def predictor_loss(
    probs: torch.Tensor, masks: torch.Tensor, smooth_eps: float = 1.0
) -> torch.Tensor:
    """Mean of per-sample Dice losses over a (B, 1, H, W) batch."""
    if probs.ndim != 4:
        raise ValueError("expected a (B, 1, H, W) batch")
    losses = [dice_loss(p, m, smooth_eps) for p, m in zip(probs, masks)]
    return torch.stack(losses).mean()


def binarize(probs: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Probabilities to a hard uint8 mask; a pixel exactly at threshold stays 0."""
    return (probs > threshold).to(torch.uint8)


@dataclass(frozen=True)
class PredictorConfig:
    base_channels: int = 16
    depth: int = 3
    in_channels: int = 2
    dice: DiceConfig = DiceConfig()


class Predictor:
    """Segmentation UNet plus its loss/threshold settings and persistence."""

    def __init__(self, config: PredictorConfig | None = None):
        self.config = config or PredictorConfig()
        self.net = SegUNet(
            base_channels=self.config.base_channels,
            depth=self.config.depth,
            in_channels=self.config.in_channels,
        )

    def __call__(self, pair: torch.Tensor) -> torch.Tensor:
        return self.net(pair)

    def loss(self, pair: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        return predictor_loss(self.net(pair), masks, self.config.dice.smooth_eps)

    def predict_mask(self, pair: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            self.net.eval()
            return binarize(self.net(pair), self.config.dice.threshold)

    def save(self, path: Path | str, pair_source: str, extra: dict | None = None) -> None:
        if pair_source not in PAIR_SOURCES:
            raise ValueError(f"pair_source must be one of {PAIR_SOURCES}")
        merged = {"pair_source": pair_source}
        merged.update(extra or {})
        cfg = asdict(self.config)
        save_checkpoint(
            path,
            kind=CKPT_KIND,
            arrays=state_dict_to_arrays(self.net.state_dict()),
            config=cfg,
            extra=merged,
        )

    @classmethod
    def load(cls, path: Path | str) -> tuple["Predictor", dict]:
        """Load a predictor; returns (predictor, extra metadata incl. pair_source)."""
        meta, arrays = load_checkpoint(path, expect_kind=CKPT_KIND)
        raw = dict(meta["config"])
        try:
            raw["dice"] = DiceConfig(**raw.get("dice", {}))
            config = PredictorConfig(**raw)
        except (TypeError, ValueError) as e:
            raise DataError(f"checkpoint {path}: bad predictor config: {e}") from e
        predictor = cls(config)
        predictor.net.load_state_dict(
            arrays_to_state_dict(arrays, predictor.net.state_dict())
        )
        extra = meta.get("extra", {})
        if extra.get("pair_source") not in PAIR_SOURCES:
            raise DataError(
                f"checkpoint {path}: missing or invalid pair_source in metadata"
            )
        return predictor, extra
