import numpy as np
import pytest
import torch

from rladlab import conditioning as cond
from rladlab.denoiser import DenoiserModel, load_denoiser
from rladlab.diffusion import make_linear_schedule, q_sample
from rladlab.errors import ConfigError
from rladlab.training import (
    DiffusionTrainConfig,
    LatentCache,
    _draw_batch_inputs,
    batched_q_sample,
    build_latent_cache,
    fit,
    make_optimizer,
    training_step,
)

TINY = dict(batch=4, T=20, d_model=32, depth=1, n_heads=2, checkpoint_every=0, log_every=10)


@pytest.fixture(scope="module")
def cache(tiny_dataset, tiny_codec):
    return build_latent_cache(tiny_dataset, tiny_codec, "train")


def synthetic_cache(rng, n=16):
    return LatentCache(
        image_z=torch.from_numpy(rng.standard_normal((n, 4, 16, 16)).astype(np.float32)),
        comp_z=torch.from_numpy(rng.standard_normal((n, 3, 4, 16, 16)).astype(np.float32)),
        present=np.ones((n, 3), dtype=bool),
        black=torch.zeros(4, 16, 16),
    )


def test_config_validation():
    with pytest.raises(ConfigError):
        DiffusionTrainConfig(steps=-1)
    with pytest.raises(ConfigError):
        DiffusionTrainConfig(p_mask=(0.5, 0.5))
    with pytest.raises(ConfigError):
        DiffusionTrainConfig(p_mask=(0.5, 0.5, 1.5))


def test_batched_q_sample_matches_per_item(rng):
    sched = make_linear_schedule(50, 1e-3, 0.1)
    z0 = rng.standard_normal((5, 4, 16, 16)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    ts = np.array([1, 7, 23, 50, 11])
    batched = batched_q_sample(torch.from_numpy(z0), ts, torch.from_numpy(eps), sched).numpy()
    for i, t in enumerate(ts):
        per_item = q_sample(z0[i], int(t), eps[i], sched)
        assert np.array_equal(batched[i], per_item)


def test_loss_is_zero_for_oracle_and_unit_for_zero_prediction(rng):
    """mean||eps - eps_hat||^2 semantics: 0 for the oracle, ~1 for zero."""
    cache = synthetic_cache(rng)
    cfg = DiffusionTrainConfig(steps=1, **TINY)
    sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    gen = np.random.default_rng(1)
    ts, eps, _comp, _guided, _ = _draw_batch_inputs(np.arange(8), cache, cfg, sched, gen)
    assert torch.nn.functional.mse_loss(eps, eps).item() == 0.0
    zero_loss = torch.nn.functional.mse_loss(torch.zeros_like(eps), eps).item()
    n = eps.numel()
    assert abs(zero_loss - 1.0) < 3 * np.sqrt(2.0 / n)
    assert 1 <= ts.min() and ts.max() <= cfg.T


def test_uniform_timestep_coverage(rng):
    cache = synthetic_cache(rng)
    cfg = DiffusionTrainConfig(steps=1, T=1000, batch=12, d_model=32, depth=1, n_heads=2)
    sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    gen = np.random.default_rng(2)
    ts = []
    for _ in range(10_000 // cfg.batch + 1):
        t, *_ = _draw_batch_inputs(np.arange(cfg.batch) % 16, cache, cfg, sched, gen)
        ts.extend(t.tolist())
    ts = np.asarray(ts[:10_000])
    for d in range(10):
        frac = ((ts > d * 100) & (ts <= (d + 1) * 100)).mean()
        assert abs(frac - 0.1) <= 0.01


def test_masking_rate_binomial(rng):
    cache = synthetic_cache(rng, n=32)
    cfg = DiffusionTrainConfig(steps=1, p_mask=(0.5, 0.25, 0.75), **TINY)
    sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    gen = np.random.default_rng(3)
    masked = np.zeros(3)
    draws = 4000
    for _ in range(draws // 8):
        *_, m = _draw_batch_inputs(np.arange(8), cache, cfg, sched, gen)
        masked += m
    rates = masked / draws
    for rate, p in zip(rates, cfg.p_mask):
        se = np.sqrt(p * (1 - p) / draws)
        assert abs(rate - p) <= 4 * se


def test_optimizer_quadratic_sanity():
    """The shared optimizer drives a 1-D quadratic to its minimum within 1e-6."""
    x = torch.nn.Parameter(torch.tensor([3.0]))
    opt = make_optimizer([x], lr=0.05, weight_decay=0.0)
    for _ in range(3000):
        loss = (x - 1.234) ** 2
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert abs(x.item() - 1.234) < 1e-6


def test_training_step_runs_and_decreases_smoke(cache, tiny_codec):
    torch.manual_seed(0)
    cfg = DiffusionTrainConfig(steps=200, **TINY)
    sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    model = DenoiserModel(cfg.denoiser_config())
    opt = make_optimizer(model.parameters(), 3e-4)
    gen = np.random.default_rng(4)
    order = np.random.default_rng(5)
    losses = []
    for _ in range(200):
        idx = order.integers(0, len(cache.image_z), size=cfg.batch)
        losses.append(training_step(model, opt, sched, idx, cache, cfg, gen))
    windows = [float(np.mean(losses[i : i + 50])) for i in range(0, 200, 50)]
    assert all(b < a for a, b in zip(windows, windows[1:])), windows


class TestFit:
    def test_zero_steps_returns_initialized_checkpoint(self, tiny_dataset, tiny_codec, tmp_path):
        cfg = DiffusionTrainConfig(steps=0, seed=9, **TINY)
        model, meta = fit(tiny_dataset, cfg, tiny_codec, tmp_path / "run")
        torch.manual_seed(__import__("rladlab.utils", fromlist=["derive_int_seed"]).derive_int_seed(9, "diffusion", "init"))
        fresh = DenoiserModel(cfg.denoiser_config())
        for (k1, v1), (k2, v2) in zip(model.state_dict().items(), fresh.state_dict().items()):
            assert k1 == k2 and torch.equal(v1, v2)
        assert (tmp_path / "run" / "denoiser.pt").exists()
        assert (tmp_path / "run" / "train_log.csv").exists()

    def test_same_seed_identical_hash(self, tiny_dataset, tiny_codec, tmp_path):
        cfg = DiffusionTrainConfig(steps=5, seed=12, **TINY)
        _, meta_a = fit(tiny_dataset, cfg, tiny_codec, tmp_path / "a")
        _, meta_b = fit(tiny_dataset, cfg, tiny_codec, tmp_path / "b")
        assert meta_a["content_hash"] == meta_b["content_hash"]
        other = DiffusionTrainConfig(steps=5, seed=13, **TINY)
        _, meta_c = fit(tiny_dataset, other, tiny_codec, tmp_path / "c")
        assert meta_c["content_hash"] != meta_a["content_hash"]

    def test_resume_hash_mismatch_refused(self, tiny_dataset, tiny_codec, tmp_path):
        cfg = DiffusionTrainConfig(steps=3, seed=1, **TINY)
        fit(tiny_dataset, cfg, tiny_codec, tmp_path / "r")
        other = DiffusionTrainConfig(steps=3, seed=1, lr=5e-4, **TINY)
        with pytest.raises(ConfigError):
            fit(tiny_dataset, other, tiny_codec, tmp_path / "r2", resume=tmp_path / "r" / "denoiser.pt")

    def test_log_and_mask_rates(self, tiny_dataset, tiny_codec, tmp_path):
        cfg = DiffusionTrainConfig(steps=30, seed=2, **TINY)
        _, meta = fit(tiny_dataset, cfg, tiny_codec, tmp_path / "log")
        lines = (tmp_path / "log" / "train_log.csv").read_text().strip().splitlines()
        assert lines[0] == "step,loss,lr"
        assert len(lines) >= 3
        assert meta["mask_rates"] is not None and len(meta["mask_rates"]) == 3
        model, loaded_meta = load_denoiser(tmp_path / "log" / "denoiser.pt")
        assert loaded_meta["content_hash"] == meta["content_hash"]
