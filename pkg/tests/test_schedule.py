"""Noise schedule construction and the forward diffusion process."""

import numpy as np
import pytest
import torch

from privseg.schedule import (
    BETA_MAX,
    NoiseSchedule,
    build_cosine_schedule,
    forward_diffuse,
    timestep_subsequence,
)


def test_schedule_validation():
    with pytest.raises(ValueError):
        build_cosine_schedule(0)
    with pytest.raises(ValueError):
        NoiseSchedule(betas=np.array([0.1, 1.5]))
    with pytest.raises(ValueError):
        NoiseSchedule(betas=np.array([0.0, 0.1]))
    with pytest.raises(ValueError):
        NoiseSchedule(betas=np.zeros((2, 2)) + 0.1)


@pytest.mark.parametrize("timesteps", [1, 2, 10, 100, 1000])
def test_cosine_alpha_bar_monotone_and_bounded(timesteps):
    sched = build_cosine_schedule(timesteps)
    ab = sched.alpha_bars
    assert sched.timesteps == timesteps
    assert (np.diff(ab) < 0).all() or timesteps == 1
    assert ab[0] <= 1.0
    assert ab[-1] > 0.0
    assert (sched.betas > 0).all() and (sched.betas <= BETA_MAX).all()


def test_cosine_matches_closed_form_where_unclipped():
    timesteps, s = 100, 0.008
    sched = build_cosine_schedule(timesteps)
    u = np.arange(timesteps + 1, dtype=np.float64)
    f = np.cos(((u / timesteps + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    expected = f[1:] / f[0]
    raw_betas = 1.0 - expected[1:] / expected[:-1]
    unclipped = np.concatenate([[True], raw_betas <= BETA_MAX])
    assert np.allclose(sched.alpha_bars[unclipped], expected[unclipped], rtol=1e-12)


def test_cosine_endpoints_at_1000():
    sched = build_cosine_schedule(1000)
    assert sched.alpha_bars[0] > 0.99
    assert sched.alpha_bars[-1] < 0.01


def test_alpha_bar_is_cumprod_of_alphas():
    for timesteps in (7, 50, 1000):
        sched = build_cosine_schedule(timesteps)
        assert np.array_equal(sched.alpha_bars, np.cumprod(1.0 - sched.betas))


def test_forward_diffuse_coefficient_identities():
    sched = NoiseSchedule(betas=np.array([1e-12, 0.5, BETA_MAX]))
    x0 = torch.full((1, 1, 2, 2), 0.25, dtype=torch.float64)
    eps = torch.full_like(x0, -0.75)
    almost_clean = forward_diffuse(sched, x0, 0, eps)
    assert torch.allclose(almost_clean, x0, atol=1e-5)
    ab = sched.alpha_bars[2]
    expected = np.sqrt(ab) * 0.25 + np.sqrt(1 - ab) * -0.75
    assert torch.allclose(forward_diffuse(sched, x0, 2, eps), torch.full_like(x0, expected))


def test_forward_diffuse_per_sample_timesteps():
    sched = build_cosine_schedule(10)
    torch.manual_seed(0)
    x0 = torch.randn(3, 1, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.tensor([0, 5, 9])
    batched = forward_diffuse(sched, x0, t, eps)
    for i, ti in enumerate(t.tolist()):
        single = forward_diffuse(sched, x0[i : i + 1], ti, eps[i : i + 1])
        assert torch.equal(batched[i : i + 1], single)


def test_forward_diffuse_rejects_out_of_range_t():
    sched = build_cosine_schedule(10)
    x0 = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ValueError):
        forward_diffuse(sched, x0, 10, torch.zeros_like(x0))
    with pytest.raises(ValueError):
        forward_diffuse(sched, x0, torch.tensor([-1]), torch.zeros_like(x0))


def test_forward_diffuse_variance_preservation():
    sched = build_cosine_schedule(1000)
    torch.manual_seed(7)
    x0 = torch.randn(4, 1, 64, 64, dtype=torch.float64)
    for t in (0, 250, 500, 999):
        eps = torch.randn_like(x0)
        xt = forward_diffuse(sched, x0, t, eps)
        assert abs(float(xt.var()) - 1.0) < 0.05


def test_reconstruction_identity_all_timesteps():
    sched = build_cosine_schedule(1000)
    torch.manual_seed(8)
    x0 = torch.rand(1000, 1, 4, 4, dtype=torch.float64) * 2 - 1
    eps = torch.randn_like(x0)
    t = torch.arange(1000)
    xt = forward_diffuse(sched, x0, t, eps)
    ab = torch.from_numpy(sched.alpha_bars).reshape(-1, 1, 1, 1)
    recon = (xt - torch.sqrt(1.0 - ab) * eps) / torch.sqrt(ab)
    assert float((recon - x0).abs().max()) < 1e-5


def test_timestep_subsequence_shape_and_endpoints():
    seq = timestep_subsequence(1000, 50)
    assert seq[0] == 999 and seq[-1] == 0
    assert len(seq) == 50
    assert (np.diff(seq) < 0).all()

    assert timestep_subsequence(1000, 1).tolist() == [999]
    assert timestep_subsequence(5, 5).tolist() == [4, 3, 2, 1, 0]
    assert timestep_subsequence(5, 99).tolist() == [4, 3, 2, 1, 0]
    assert timestep_subsequence(1, 1).tolist() == [0]
    with pytest.raises(ValueError):
        timestep_subsequence(10, 0)


def test_timestep_subsequence_unique_even_when_rounding_collides():
    for timesteps in (7, 10, 13):
        for n in range(2, timesteps + 1):
            seq = timestep_subsequence(timesteps, n)
            assert len(set(seq.tolist())) == len(seq)
            assert seq[0] == timesteps - 1 and seq[-1] == 0
