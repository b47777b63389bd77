"""Shared fixtures: synthetic datasets, a trained translator, CLI workspaces,
and the three-arm desk-scale experiment used by the efficacy criteria.

The expensive fixtures are session-scoped and lazy, so running a single test
module only pays for what it touches. A terminal-summary hook prints one
PASS/FAIL line per acceptance criterion at the end of the run.
"""

from __future__ import annotations

import json
import re
import time
from pathlib import Path

import pytest
import torch

from privseg.cli import main as cli_main
from privseg.data import (
    SplitSpec,
    SyntheticSpec,
    generate_synthetic_dataset,
    split_train,
)
from privseg.diffusion import Translator, TranslatorConfig
from privseg.metrics import dsc
from privseg.predictor import Predictor, PredictorConfig, binarize
from privseg.trainer import MetaConfig, MetaTrainer, derive_seed, stack_images, stack_masks

# ---------------------------------------------------------------------------
# small reusable helpers
# ---------------------------------------------------------------------------


def run_cli(argv: list[str]) -> int:
    """Invoke the CLI in-process and return its exit code."""
    try:
        rc = cli_main([str(a) for a in argv])
    except SystemExit as e:  # argparse errors
        return int(e.code or 0)
    return int(rc)


def tiny_spec(n: int, seed: int, size: int = 16) -> SyntheticSpec:
    return SyntheticSpec(
        n_samples=n,
        image_size=(size, size),
        lesion_radius_range=(2.0, 4.0),
        seed=seed,
    )


def predict_masks(predictor: Predictor, sources: torch.Tensor, companions: torch.Tensor):
    preds = []
    with torch.no_grad():
        for i in range(0, sources.shape[0], 8):
            pair = torch.cat([sources[i : i + 8], companions[i : i + 8]], dim=1)
            preds.append(binarize(predictor(pair)))
    return torch.cat(preds)


def mean_dsc(predictor: Predictor, dataset, companions: torch.Tensor) -> float:
    sources = stack_images(dataset, "source")
    masks = stack_masks(dataset)
    preds = predict_masks(predictor, sources, companions)
    scores = [
        dsc(preds[i, 0].numpy(), masks[i, 0].numpy().astype(bool))
        for i in range(len(dataset))
    ]
    return sum(scores) / len(scores)


def synthesize(translator: Translator, dataset, seed: int, batch: int = 8) -> torch.Tensor:
    sources = stack_images(dataset, "source")
    chunks = []
    for i in range(0, len(dataset), batch):
        seeds = [derive_seed(seed, f"infer:{s.id}") for s in dataset[i : i + batch]]
        chunks.append(translator.sample(sources[i : i + batch], seeds))
    return torch.cat(chunks)


# ---------------------------------------------------------------------------
# dataset fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def tiny16():
    """40 paired 16x16 samples; cheap enough for most module tests."""
    return generate_synthetic_dataset(tiny_spec(40, seed=6))


@pytest.fixture(scope="session")
def trained_translator(tiny16):
    """A small translator trained long enough that conditioning clearly works.

    Trained on the first 32 samples of ``tiny16``; the remaining 8 are held
    out. Returns (translator, train_slice, heldout_slice).
    """
    torch.manual_seed(5)
    train, heldout = tiny16[:32], tiny16[32:]
    translator = Translator(
        TranslatorConfig(
            timesteps=50,
            infer_steps=10,
            meta_steps=2,
            base_channels=16,
            depth=2,
            time_dim=32,
        )
    )
    opt = torch.optim.Adam(translator.net.parameters(), lr=1e-3)
    sources = stack_images(train, "source")
    targets = stack_images(train, "target")
    n = len(train)
    for _ in range(1200):
        perm = torch.randperm(n)
        for i in range(0, n, 8):
            idx = perm[i : i + 8]
            opt.zero_grad(set_to_none=True)
            loss = translator.noise_prediction_loss(sources[idx], targets[idx])
            loss.backward()
            opt.step()
    return translator, train, heldout


# ---------------------------------------------------------------------------
# CLI workspace: generated data plus one trained metat2 checkpoint directory
# ---------------------------------------------------------------------------

TRAIN_SPEC = {
    "n_samples": 20,
    "image_size": [16, 16],
    "lesion_radius_range": [2.0, 4.0],
    "seed": 60,
}
TEST_SPEC = dict(TRAIN_SPEC, n_samples=8, seed=61)

CLI_TRAIN_CONFIG = {
    "mode": "metat2",
    "seed": 0,
    "fraction_translator": 0.5,
    "meta": {
        "lr": 1e-3,
        "epochs_translator_pretrain": 2,
        "epochs_predictor_pretrain": 2,
        "epochs_meta": 2,
        "batch_size": 4,
    },
    "translator": {
        "timesteps": 16,
        "infer_steps": 4,
        "meta_steps": 2,
        "base_channels": 8,
        "depth": 2,
        "time_dim": 16,
    },
    "predictor": {"base_channels": 8, "depth": 2},
}


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory):
    """Generated train/test dataset dirs, a config file, and a finished
    metat2 training run. Shared by the CLI tests and two acceptance tests."""
    root = tmp_path_factory.mktemp("cli_ws")
    train_spec = root / "train_spec.json"
    test_spec = root / "test_spec.json"
    train_spec.write_text(json.dumps(TRAIN_SPEC))
    test_spec.write_text(json.dumps(TEST_SPEC))
    train_dir = root / "train_data"
    test_dir = root / "test_data"
    assert run_cli(["gen-data", "--config", train_spec, "--out", train_dir]) == 0
    assert run_cli(["gen-data", "--config", test_spec, "--out", test_dir]) == 0

    config = dict(CLI_TRAIN_CONFIG, train_manifest=str(train_dir / "manifest.json"))
    config_path = root / "train_config.json"
    config_path.write_text(json.dumps(config))
    run_dir = root / "run_metat2"
    assert run_cli(["train", "--config", config_path, "--out", run_dir]) == 0
    return {
        "root": root,
        "train_spec": train_spec,
        "test_spec": test_spec,
        "train_dir": train_dir,
        "test_dir": test_dir,
        "config_path": config_path,
        "run_dir": run_dir,
    }


# ---------------------------------------------------------------------------
# the three-arm desk-scale experiment (shared by two acceptance criteria)
# ---------------------------------------------------------------------------

DESK_SEEDS = (0, 1, 2)
DESK_EP_TRANSLATOR = 30
DESK_EP_PREDICTOR = 12
DESK_EP_META = 10
DESK_TRANSLATOR_CFG = dict(
    timesteps=200, infer_steps=15, meta_steps=4, base_channels=32, depth=3, time_dim=128
)

# Operating point: heavy per-modality noise plus small lesions. At the
# generator's gentle defaults a source-only UNet saturates and no method
# separation is measurable; here the faint small blobs sit near the source
# arm's detection limit while the target modality still renders them at
# high contrast.
_DESK_DATA_KW = dict(
    image_size=(64, 64),
    source_lesion_contrast=0.15,
    target_lesion_contrast=0.8,
    noise_sigma=0.15,
    lesion_radius_range=(2.0, 4.5),
)


def _desk_data(seed: int):
    train = generate_synthetic_dataset(
        SyntheticSpec(n_samples=200, seed=1000 + seed, **_DESK_DATA_KW)
    )
    test = generate_synthetic_dataset(
        SyntheticSpec(n_samples=96, seed=2000 + seed, **_DESK_DATA_KW)
    )
    return train, test


def _desk_one_seed(seed: int, out_dir: Path) -> dict[str, float]:
    train, test = _desk_data(seed)
    d_t, d_p = split_train(train, SplitSpec(seed=seed, fraction_translator=0.5))

    def meta_cfg(epochs_meta: int, **kw) -> MetaConfig:
        return MetaConfig(
            lr=1e-3,
            epochs_translator_pretrain=kw.pop("ep_t", DESK_EP_TRANSLATOR),
            epochs_predictor_pretrain=kw.pop("ep_p", DESK_EP_PREDICTOR),
            epochs_meta=epochs_meta,
            batch_size=8,
            seed=seed,
            **kw,
        )

    # stage A: pretraining only; this predictor is the plain diffusion+unet arm
    torch.manual_seed(seed)
    stage_a = MetaTrainer(
        meta_cfg(0),
        Predictor(PredictorConfig()),
        Translator(TranslatorConfig(**DESK_TRANSLATOR_CFG)),
        train_translator=d_t,
        train_predictor=d_p,
        out_dir=out_dir,
    )
    stage_a.run(log=lambda *a: None)
    synth_a = synthesize(stage_a.translator, test, seed)
    dsc_ddpm = mean_dsc(stage_a.predictor, test, synth_a)

    # stage B: resume the same run with the meta phase enabled (metat2 arm);
    # resume exactness makes this identical to one uninterrupted run
    torch.manual_seed(seed)
    stage_b = MetaTrainer(
        meta_cfg(DESK_EP_META),
        Predictor(PredictorConfig()),
        Translator(TranslatorConfig(**DESK_TRANSLATOR_CFG)),
        train_translator=d_t,
        train_predictor=d_p,
    )
    stage_b.load_state(out_dir / "state.ckpt")
    stage_b.run(log=lambda *a: None)
    synth_b = synthesize(stage_b.translator, test, seed)
    dsc_meta = mean_dsc(stage_b.predictor, test, synth_b)

    # source-only baseline: the identical config run in unet_source mode,
    # which trains on the whole (unsplit) train set for the same predictor
    # epoch count; on the full set that is more optimizer steps than the
    # metat2 predictor gets on its half split
    torch.manual_seed(seed)
    source_arm = MetaTrainer(
        meta_cfg(0, ep_t=0),
        Predictor(PredictorConfig()),
        translator=None,
        train_predictor=train,
        pair_source="duplicate",
    )
    source_arm.run(log=lambda *a: None)
    dsc_source = mean_dsc(source_arm.predictor, test, stack_images(test, "source"))

    return {"metat2": dsc_meta, "ddpm_unet": dsc_ddpm, "unet_source": dsc_source}


@pytest.fixture(scope="session")
def desk_experiment(tmp_path_factory):
    """Mean held-out DSC per arm over three seeds; takes tens of minutes."""
    root = tmp_path_factory.mktemp("desk")
    per_seed = []
    started = time.time()
    for seed in DESK_SEEDS:
        per_seed.append(_desk_one_seed(seed, root / f"seed{seed}"))
    means = {
        arm: sum(r[arm] for r in per_seed) / len(per_seed)
        for arm in ("metat2", "ddpm_unet", "unet_source")
    }
    return {"per_seed": per_seed, "means": means, "elapsed_s": time.time() - started}


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

CRITERIA = {
    1: "metric implementations match exhaustive brute-force oracles",
    2: "autograd gradients match central finite differences",
    3: "cosine schedule and forward-diffusion invariants",
    4: "bi-level training contract and exact resume",
    5: "privileged translation beats the source-only baseline by >= 0.05 DSC",
    6: "meta phase does not regress below pretrain-only (mean DSC)",
    7: "inference reads no target arrays; deleting targets changes nothing",
    8: "two identical runs produce identical metrics JSON",
}

_NODE_RE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes: dict[int, str] = {}
    rank = {"PASS": 0, "SKIP": 1, "FAIL": 2}
    for status, label in (("passed", "PASS"), ("skipped", "SKIP"),
                          ("failed", "FAIL"), ("error", "FAIL")):
        for report in terminalreporter.stats.get(status, []):
            m = _NODE_RE.search(getattr(report, "nodeid", ""))
            if not m:
                continue
            num = int(m.group(1))
            if rank[label] >= rank.get(outcomes.get(num, "PASS"), 0):
                outcomes[num] = label
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        label = outcomes.get(num, "NOT RUN")
        terminalreporter.write_line(f"criterion {num}: {label} - {CRITERIA[num]}")
