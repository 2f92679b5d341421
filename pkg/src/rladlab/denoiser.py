"""Tiny diffusion transformer over the conditioning token sequence.

Timesteps modulate every block through adaptive layer norm with
zero-initialized modulation (adaLN-Zero), so the model is the identity at
initialization and the zero-initialized output projection makes the noise
prediction exactly zero before training.  All tokens (sentinels, UI,
condition and image) get the same timestep modulation; only the image-role
output tokens are un-patched into the predicted noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .conditioning import (
    IMG_SLICE,
    LATENT_CHANNELS,
    LATENT_HW,
    N_COND,
    N_IMG,
    PATCH_DIM,
    SEQ_LEN,
    ProjectionHeads,
    TokenSequence,
    unpatchify,
)
from .diffusion import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T
from .errors import ConfigError, StructureError
from .utils import hash_state_dict

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 128
    depth: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0
    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    p_mask: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    def to_json(self) -> dict:
        cfg = asdict(self)
        cfg["p_mask"] = list(self.p_mask)
        return cfg

    @staticmethod
    def from_json(data: dict) -> "DenoiserConfig":
        data = dict(data)
        data["p_mask"] = tuple(data["p_mask"])
        return DenoiserConfig(**data)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    def __init__(self, d_model: int, freq_dim: int = 128):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, d_model),
            nn.SiLU(),
            nn.Linear(d_model, d_model),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(timestep_embedding(t, self.freq_dim))


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        out = torch.nn.functional.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale[:, None, :]) + shift[:, None, :]


class DiTBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        hidden = int(d_model * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(d_model, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, d_model))
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(d_model, 6 * d_model))
        nn.init.zeros_(self.adaln[1].weight)
        nn.init.zeros_(self.adaln[1].bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        sh_a, sc_a, g_a, sh_m, sc_m, g_m = self.adaln(c).chunk(6, dim=1)
        x = x + g_a[:, None, :] * self.attn(modulate(self.norm1(x), sh_a, sc_a))
        x = x + g_m[:, None, :] * self.mlp(modulate(self.norm2(x), sh_m, sc_m))
        return x


class FinalLayer(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(d_model, 2 * d_model))
        self.out = nn.Linear(d_model, PATCH_DIM)
        nn.init.zeros_(self.adaln[1].weight)
        nn.init.zeros_(self.adaln[1].bias)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaln(c).chunk(2, dim=1)
        return self.out(modulate(self.norm(x), shift, scale))


class DenoiserCore(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.pos_embed = nn.Parameter(torch.empty(1, SEQ_LEN, cfg.d_model))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.t_embed = TimestepEmbedder(cfg.d_model)
        self.blocks = nn.ModuleList(
            [DiTBlock(cfg.d_model, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )
        self.final = FinalLayer(cfg.d_model)

    def forward(self, vectors: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """(B, SEQ_LEN, d) tokens + (B,) timesteps -> (B, 4, 16, 16) noise."""
        if vectors.ndim != 3 or vectors.shape[1] != SEQ_LEN:
            raise StructureError(f"expected (B, {SEQ_LEN}, d) vectors, got {tuple(vectors.shape)}")
        x = vectors + self.pos_embed
        c = self.t_embed(t.to(vectors.dtype))
        for block in self.blocks:
            x = block(x, c)
        img_tokens = self.final(x[:, IMG_SLICE], c)
        return unpatchify(img_tokens)


class DenoiserModel(nn.Module):
    """Projection heads + transformer core, trained jointly."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.heads = ProjectionHeads(cfg.d_model)
        self.core = DenoiserCore(cfg)

    def forward(self, vectors: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.core(vectors, t)

    @torch.no_grad()
    def predict_eps(self, seq: TokenSequence, t: int) -> np.ndarray:
        """Noise prediction for a single assembled sequence at timestep t."""
        seq.validate()
        if not 1 <= int(t) <= self.cfg.T:
            raise StructureError(f"timestep {t} outside [1, {self.cfg.T}]")
        was_training = self.training
        self.eval()
        out = self.core(seq.vectors[None], torch.tensor([float(t)]))
        if was_training:
            self.train()
        return out[0].numpy()


def token_layout_constants() -> dict:
    return {
        "seq_len": SEQ_LEN,
        "n_cond": N_COND,
        "n_img": N_IMG,
        "latent_channels": LATENT_CHANNELS,
        "latent_hw": LATENT_HW,
    }


def save_denoiser(model: DenoiserModel, path: str | Path, extra_meta: dict | None = None) -> str:
    """Atomic checkpoint write; returns the content hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.cpu() for k, v in model.state_dict().items()}
    content_hash = hash_state_dict(state)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_json(),
        "token_layout": token_layout_constants(),
        "state_dict": state,
        "content_hash": content_hash,
        "meta": dict(extra_meta or {}),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return content_hash


def load_denoiser(path: str | Path) -> tuple[DenoiserModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if "version" not in payload:
        raise StructureError("checkpoint missing mandatory version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise StructureError(f"unsupported checkpoint version {payload['version']}")
    if payload["token_layout"] != token_layout_constants():
        raise StructureError("checkpoint token layout does not match this build")
    model = DenoiserModel(DenoiserConfig.from_json(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    if hash_state_dict(payload["state_dict"]) != payload["content_hash"]:
        raise StructureError("checkpoint content hash mismatch")
    meta = dict(payload["meta"])
    meta["content_hash"] = payload["content_hash"]
    return model, meta
