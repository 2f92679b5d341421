"""Diffusion training loop: noise-prediction MSE with component masking.

Per batch item: encode the image to z_0 (cached, the codec is frozen), draw
t uniform on [1, T] and eps ~ N(0, I), independently mask the present
layout components, assemble the token sequence over the noised latent, and
take one optimizer step on mean ||eps - eps_hat||^2.

All randomness flows from cfg.seed through named substreams ("order" for
batch order, "noise" for t/eps/masking, "init" for parameters), so fits
with equal seeds produce bit-identical checkpoints.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import conditioning as cond
from .codec import Codec
from .denoiser import DenoiserConfig, DenoiserModel, load_denoiser, save_denoiser
from .diffusion import NoiseSchedule, make_linear_schedule
from .errors import ConfigError, TrainingFailure
from .toydata import DatasetManifest, load_record_bundle, load_record_image
from .utils import derive_int_seed, hash_json, substream, write_json


@dataclass(frozen=True)
class DiffusionTrainConfig:
    """Defaults follow the toy scale (20k steps); 84k steps with T=1000 is
    the full-scale setting."""

    steps: int = 20_000
    lr: float = 1e-4
    batch: int = 12
    p_mask: tuple = (0.5, 0.5, 0.5)
    weight_decay: float = 0.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    d_model: int = 128
    depth: int = 4
    n_heads: int = 4
    seed: int = 0
    checkpoint_every: int = 5000
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ConfigError("steps must be >= 0, batch >= 1, lr > 0")
        if len(self.p_mask) != 3 or any(not 0.0 <= p <= 1.0 for p in self.p_mask):
            raise ConfigError(f"p_mask must be three probabilities, got {self.p_mask}")

    def to_json(self) -> dict:
        data = asdict(self)
        data["p_mask"] = list(self.p_mask)
        return data

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            d_model=self.d_model,
            depth=self.depth,
            n_heads=self.n_heads,
            T=self.T,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            p_mask=self.p_mask,
        )


@dataclass
class LatentCache:
    """Frozen-codec latents for a training split (encode is deterministic,
    so caching is exact)."""

    image_z: torch.Tensor  # (N, 4, 16, 16)
    comp_z: torch.Tensor  # (N, 3, 4, 16, 16)
    present: np.ndarray  # (N, 3) bool
    black: torch.Tensor  # (4, 16, 16)


def build_latent_cache(manifest: DatasetManifest, codec: Codec, split: str = "train") -> LatentCache:
    records = manifest.split(split)
    if not records:
        raise ConfigError(f"manifest has no records in split {split!r}")
    image_z, comp_z, present = [], [], []
    for rec in records:
        img = load_record_image(manifest, rec)
        bundle = load_record_bundle(manifest, rec)
        image_z.append(codec.encode(img))
        comps = cond.encode_bundle(bundle, codec)
        comp_z.append(comps.latents)
        present.append(comps.present)
    return LatentCache(
        image_z=torch.from_numpy(np.stack(image_z)),
        comp_z=torch.from_numpy(np.stack(comp_z)),
        present=np.asarray(present, dtype=bool),
        black=torch.from_numpy(codec.black_latent().copy()),
    )


def make_optimizer(params, lr: float, weight_decay: float = 0.0) -> torch.optim.Optimizer:
    """Decoupled-weight-decay adaptive optimizer used by every training loop."""
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def batched_q_sample(z0: torch.Tensor, ts: np.ndarray, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Vectorized q_sample over a batch with per-item timesteps; double
    precision schedule math, rounded once to the input dtype."""
    ab = sched.alpha_bar[ts - 1]  # float64
    c1 = torch.from_numpy(np.sqrt(ab)).view(-1, 1, 1, 1)
    c2 = torch.from_numpy(np.sqrt(1.0 - ab)).view(-1, 1, 1, 1)
    return (c1 * z0.double() + c2 * eps.double()).to(z0.dtype)


def _draw_batch_inputs(idx: np.ndarray, cache: LatentCache, cfg: DiffusionTrainConfig, sched: NoiseSchedule, rng: np.random.Generator):
    """Timesteps, noise, masked component latents and UI flags for a batch."""
    b = len(idx)
    ts = rng.integers(1, cfg.T + 1, size=b)
    eps = torch.from_numpy(rng.standard_normal((b, 4, cond.LATENT_HW, cond.LATENT_HW)).astype(np.float32))
    comp = cache.comp_z[idx].clone()
    guided = np.zeros((b, 3), dtype=bool)
    masked = np.zeros(3, dtype=np.int64)
    for i in range(b):
        for k in range(3):
            if not cache.present[idx[i], k]:
                continue
            if rng.random() < cfg.p_mask[k]:
                comp[i, k] = cache.black
                masked[k] += 1
            else:
                guided[i, k] = True
    return ts, eps, comp, guided, masked


def training_step(
    model: DenoiserModel,
    opt: torch.optim.Optimizer,
    sched: NoiseSchedule,
    idx: np.ndarray,
    cache: LatentCache,
    cfg: DiffusionTrainConfig,
    rng: np.random.Generator,
    lr_sched=None,
    stats: dict | None = None,
) -> float:
    """One optimizer update; returns the scalar loss."""
    ts, eps, comp, guided, masked = _draw_batch_inputs(idx, cache, cfg, sched, rng)
    if stats is not None:
        stats["masked"] = stats.get("masked", np.zeros(3, dtype=np.int64)) + masked
        stats["present"] = stats.get("present", np.zeros(3, dtype=np.int64)) + cache.present[idx].sum(axis=0)
        stats.setdefault("timesteps", []).extend(ts.tolist())
    z0 = cache.image_z[idx]
    z_t = batched_q_sample(z0, ts, eps, sched)

    c = cond.sum_conditions(
        model.heads.embed_component_batch("AV", comp[:, 0]),
        model.heads.embed_component_batch("CD", comp[:, 1]),
        model.heads.embed_component_batch("L", comp[:, 2]),
    )
    vectors = cond.assemble_batch(torch.from_numpy(guided), c, z_t, model.heads)
    eps_hat = model(vectors, torch.from_numpy(ts.astype(np.float32)))
    loss = torch.nn.functional.mse_loss(eps_hat, eps)

    opt.zero_grad()
    loss.backward()
    opt.step()
    if lr_sched is not None:
        lr_sched.step()
    value = float(loss.detach())
    if not np.isfinite(value):
        raise TrainingFailure(f"non-finite diffusion loss {value}")
    return value


def fit(
    manifest: DatasetManifest,
    cfg: DiffusionTrainConfig,
    codec: Codec,
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> tuple[DenoiserModel, dict]:
    """Full training run: periodic checkpoints, CSV log, final checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    cache = build_latent_cache(manifest, codec, "train")
    n = len(cache.image_z)

    cfg_hash = hash_json(cfg.to_json())
    write_json(out_dir / "train_config.json", {"config": cfg.to_json(), "config_hash": cfg_hash, "codec_hash": codec.content_hash})

    start_step = 0
    if resume is not None:
        model, meta = load_denoiser(resume)
        if meta.get("config_hash") != cfg_hash:
            raise ConfigError("resume refused: checkpoint was trained with a different config")
        start_step = int(meta["step"])
        torch.manual_seed(derive_int_seed(cfg.seed, "diffusion", "resume", start_step))
    else:
        torch.manual_seed(derive_int_seed(cfg.seed, "diffusion", "init"))
        model = DenoiserModel(cfg.denoiser_config())

    opt = make_optimizer(model.parameters(), cfg.lr, cfg.weight_decay)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.steps, 1))
    order_rng = substream(cfg.seed, "diffusion", "order")
    noise_rng = substream(cfg.seed, "diffusion", "noise")

    log_path = out_dir / "train_log.csv"
    losses = []
    stats: dict = {}
    t0 = time.time()
    order = np.empty(0, dtype=np.int64)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
        for step in range(start_step, cfg.steps):
            if len(order) < cfg.batch:
                order = order_rng.permutation(n)
            idx, order = order[: cfg.batch], order[cfg.batch :]
            try:
                loss = training_step(model, opt, sched, idx, cache, cfg, noise_rng, lr_sched, stats)
            except TrainingFailure:
                dump = {
                    "step": step,
                    "recent_losses": losses[-20:],
                    "config": cfg.to_json(),
                }
                write_json(out_dir / "failure_dump.json", dump)
                raise
            losses.append(loss)
            if (step + 1) % cfg.log_every == 0 or step == cfg.steps - 1:
                writer.writerow([step + 1, f"{loss:.6f}", f"{opt.param_groups[0]['lr']:.3e}"])
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
                save_denoiser(model, out_dir / f"denoiser_step{step + 1:07d}.pt", {"step": step + 1, "config_hash": cfg_hash})

    mask_rates = None
    if stats.get("present") is not None:
        with np.errstate(invalid="ignore"):
            mask_rates = (stats["masked"] / np.maximum(stats["present"], 1)).tolist()
    meta = {
        "step": cfg.steps,
        "config_hash": cfg_hash,
        "codec_hash": codec.content_hash,
        "final_loss": losses[-1] if losses else None,
        "mean_loss_last_200": float(np.mean(losses[-200:])) if losses else None,
        "mask_rates": mask_rates,
        "train_seconds": time.time() - t0,
        "train_images": n,
    }
    content_hash = save_denoiser(model, out_dir / "denoiser.pt", meta)
    meta["content_hash"] = content_hash
    write_json(out_dir / "train_meta.json", meta)
    return model, meta
