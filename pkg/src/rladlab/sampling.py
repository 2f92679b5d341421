"""Reverse-process generation with classifier-free guidance and paired
synthetic-dataset production.

Each sample owns an rng stream derived from (seed, stream id), so batch
composition and parallel order never change outputs.  The unconditional
branch is the canonical all-neutral conditioning (every component set to
the black latent, every UI vector NEUTRAL); sampling with bundle=None is
therefore bit-identical to sampling with a fully masked bundle.
"""

from __future__ import annotations

import shutil
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import conditioning as cond
from .codec import Codec
from .denoiser import DenoiserModel
from .diffusion import make_linear_schedule, reverse_step
from .errors import ConfigError, ShapeError
from .toydata import DatasetManifest, load_bundle_pngs, save_image_png
from .utils import read_json, seed_sequence, write_json


@dataclass(frozen=True)
class SamplerConfig:
    guidance: float = 2.0  # w
    seed: int = 0
    batch: int = 64

    def __post_init__(self):
        if self.guidance < 0.0:
            raise ConfigError(f"guidance scale must be >= 0, got {self.guidance}")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """Guided prediction eps_uncond + w * (eps_cond - eps_uncond)."""
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"prediction shapes differ: {eps_cond.shape} vs {eps_uncond.shape}")
    return eps_uncond + w * (eps_cond - eps_uncond)


def _neutral_latents(codec: Codec) -> cond.ComponentLatents:
    black = codec.black_latent()
    return cond.ComponentLatents(
        latents=np.stack([black, black, black]).astype(np.float32),
        present=(False, False, False),
    )


def _bundle_latents(bundle, codec: Codec, neutral: set) -> tuple[cond.ComponentLatents, np.ndarray]:
    """Component latents plus guided flags; components in `neutral` are
    treated as masked."""
    comp = cond.encode_bundle(bundle, codec)
    latents = comp.latents.copy()
    black = codec.black_latent()
    guided = np.zeros(3, dtype=bool)
    for k, kind in enumerate(cond.COMPONENT_KINDS):
        if comp.present[k] and kind not in neutral:
            guided[k] = True
        else:
            latents[k] = black
    return cond.ComponentLatents(latents=latents, present=comp.present), guided


@torch.no_grad()
def sample_batch(
    bundles: list,
    model: DenoiserModel,
    codec: Codec,
    cfg: SamplerConfig,
    stream_ids: list | None = None,
    neutral: set | frozenset = frozenset(),
) -> np.ndarray:
    """Generate one image per bundle (None = unconditional); returns (B, H, W, 3)."""
    model.eval()
    b = len(bundles)
    if stream_ids is None:
        stream_ids = list(range(b))
    if len(stream_ids) != b:
        raise ConfigError("need one stream id per bundle")
    sched = make_linear_schedule(model.cfg.T, model.cfg.beta_start, model.cfg.beta_end)

    black = codec.black_latent()
    guided = np.zeros((b, 3), dtype=bool)
    comp_latents = np.empty((b, 3) + black.shape, dtype=np.float32)
    for i, bundle in enumerate(bundles):
        if bundle is None:
            comp_latents[i] = np.stack([black, black, black])
        else:
            comp, g = _bundle_latents(bundle, codec, set(neutral))
            comp_latents[i] = comp.latents
            guided[i] = g

    comp_t = torch.from_numpy(comp_latents)
    c_cond = cond.sum_conditions(
        model.heads.embed_component_batch("AV", comp_t[:, 0]),
        model.heads.embed_component_batch("CD", comp_t[:, 1]),
        model.heads.embed_component_batch("L", comp_t[:, 2]),
    )
    any_guided = bool(guided.any())
    if any_guided:
        neutral_grid = cond.sum_conditions(
            model.heads.neutral_tokens("AV", black),
            model.heads.neutral_tokens("CD", black),
            model.heads.neutral_tokens("L", black),
        )
        c_uncond = neutral_grid[None].expand(b, -1, -1)
        guided_t = torch.from_numpy(guided)
        all_neutral = torch.zeros_like(guided_t)

    rngs = [np.random.default_rng(seed_sequence(cfg.seed, "sample", sid)) for sid in stream_ids]
    z = np.stack([rng.standard_normal((4, cond.LATENT_HW, cond.LATENT_HW)) for rng in rngs]).astype(np.float32)

    for t in range(sched.T, 0, -1):
        ts = torch.full((b,), float(t))
        z_t = torch.from_numpy(z)
        eps_c = model(cond.assemble_batch(torch.from_numpy(guided), c_cond, z_t, model.heads), ts).numpy()
        if any_guided:
            eps_u = model(cond.assemble_batch(all_neutral, c_uncond, z_t, model.heads), ts).numpy()
            eps = cfg_combine(eps_c, eps_u, cfg.guidance)
        else:
            # conditional and unconditional branches coincide; Eq. collapse
            eps = eps_c
        if t > 1:
            noise = np.stack([rng.standard_normal(z.shape[1:]) for rng in rngs]).astype(np.float32)
        else:
            noise = None
        z = reverse_step(z, eps, t, sched, noise).astype(np.float32)

    return codec.decode_batch(z)


def sample(bundle, model: DenoiserModel, codec: Codec, cfg: SamplerConfig, neutral: set | frozenset = frozenset()) -> np.ndarray:
    """Single-image generation (bundle may be None for unconditional)."""
    return sample_batch([bundle], model, codec, cfg, stream_ids=[0], neutral=set(neutral))[0]


def generate_paired_dataset(
    real_manifest: DatasetManifest,
    model: DenoiserModel,
    codec: Codec,
    out: str | Path,
    n_per_image: int = 15,
    vary: tuple = ("CD", "L"),
    cfg: SamplerConfig | None = None,
    records: list | None = None,
) -> dict:
    """Per real image, emit n_per_image synthetics conditioned on its AV map
    (components in `vary` left neutral) and pair-link them to the source.

    The synthetic label is a bit-exact copy of the source AV map.  Returns a
    report {"generated": n, "skipped": n, "out": path}.
    """
    cfg = cfg or SamplerConfig()
    if n_per_image < 1:
        raise ConfigError("n_per_image must be >= 1")
    bad = set(vary) - {"CD", "L"}
    if bad:
        raise ConfigError(f"vary must be a subset of {{CD, L}}, got extras {sorted(bad)}")
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)

    records = list(records if records is not None else real_manifest.records)
    skipped = 0
    jobs = []  # (bundle, stream_id, synthetic_id, source_record)
    for rec in records:
        stem = real_manifest.root / rec.layout
        if not Path(f"{stem}_av.png").exists():
            warnings.warn(f"record {rec.id} has no layout; skipped", stacklevel=2)
            skipped += 1
            continue
        bundle = load_bundle_pngs(stem)
        for k in range(n_per_image):
            jobs.append((bundle, f"{rec.id}/{k}", f"{rec.id}-s{k:02d}", rec))

    entries = []
    pairs = {}
    for start in range(0, len(jobs), cfg.batch):
        chunk = jobs[start : start + cfg.batch]
        images = sample_batch(
            [j[0] for j in chunk],
            model,
            codec,
            cfg,
            stream_ids=[j[1] for j in chunk],
            neutral=set(vary),
        )
        for (bundle, _sid, syn_id, rec), img in zip(chunk, images):
            save_image_png(out / "images" / f"{syn_id}.png", img)
            label_path = out / "labels" / f"{syn_id}_av.png"
            shutil.copyfile(f"{real_manifest.root / rec.layout}_av.png", label_path)
            entries.append(
                {
                    "id": syn_id,
                    "image": f"images/{syn_id}.png",
                    "av": f"labels/{syn_id}_av.png",
                    "origin": "synthetic",
                    "pair_id": rec.id,
                }
            )
            pairs[syn_id] = rec.id

    write_json(
        out / "manifest.json",
        {
            "version": 1,
            "origin": "synthetic",
            "guidance": cfg.guidance,
            "seed": cfg.seed,
            "n_per_image": n_per_image,
            "vary": sorted(vary),
            "source": str(real_manifest.root),
            "records": entries,
        },
    )
    write_json(out / "pairs.json", pairs)
    return {"generated": len(entries), "skipped": skipped, "out": str(out)}


def load_synthetic_manifest(root: str | Path) -> dict:
    root = Path(root)
    data = read_json(root / "manifest.json")
    data["root"] = root
    return data
