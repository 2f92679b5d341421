"""Small convolutional autoencoder: trained once on toy images, then frozen.

The frozen codec maps 64x64x3 images to 4x16x16 latents (downsample factor
4).  Latents are normalized per channel with statistics measured on the
training set and stored in the checkpoint, so the diffusion model sees
roughly unit-scale inputs; decode() inverts the normalization and clamps
to [0, 1].

encode(all-zeros image) defines the "black latent" used by conditioning to
neutralize masked or absent components; it is computed once per checkpoint
and cached (optionally on disk under RLADLAB_CACHE).
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .conditioning import component_to_rgb
from .errors import ConfigError, ShapeError, StructureError, TrainingFailure
from .toydata import DatasetManifest, load_record_bundle, load_record_image
from .utils import cache_dir, derive_int_seed, hash_arrays, substream, write_json

CHECKPOINT_VERSION = 1
LATENT_CHANNELS = 4
DOWNSAMPLE = 4


class _ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


class ConvAutoencoder(nn.Module):
    """3 -> 4 channel encoder with two stride-2 stages and a mirrored decoder."""

    def __init__(self, base: int = 32, latent_channels: int = LATENT_CHANNELS):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(3, base, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, base, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, base * 2, 3, stride=2, padding=1),
            _ResBlock(base * 2),
            _ResBlock(base * 2),
            nn.GroupNorm(8, base * 2),
            nn.SiLU(),
            nn.Conv2d(base * 2, latent_channels, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, base * 2, 1),
            _ResBlock(base * 2),
            _ResBlock(base * 2),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(base * 2, base, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(base, base, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, 3, 3, padding=1),
        )

    def forward(self, x):
        return self.decoder(self.encoder(x))


@dataclass(frozen=True)
class CodecTrainConfig:
    epochs: int = 12
    batch: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.0
    base_channels: int = 32
    latent_channels: int = LATENT_CHANNELS
    seed: int = 0
    min_psnr: float = 28.0
    include_layout_renders: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.lr <= 0:
            raise ConfigError("invalid codec training config")


class Codec:
    """Frozen encode/decode pair with per-channel latent normalization."""

    def __init__(self, model: ConvAutoencoder, latent_mean, latent_std, meta: dict):
        if not meta.get("frozen", False):
            raise StructureError("codec checkpoints must be frozen before use")
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.latent_mean = torch.as_tensor(latent_mean, dtype=torch.float32).view(1, -1, 1, 1)
        self.latent_std = torch.as_tensor(latent_std, dtype=torch.float32).view(1, -1, 1, 1)
        self.meta = meta
        self._black = None

    @property
    def content_hash(self) -> str:
        return self.meta["content_hash"]

    def _check_image(self, image: np.ndarray) -> None:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected H x W x 3 image, got {image.shape}")

    @torch.no_grad()
    def encode_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[3] != 3:
            raise ShapeError(f"expected N x H x W x 3 images, got {images.shape}")
        x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
        z = self.model.encoder(x)
        z = (z - self.latent_mean) / self.latent_std
        return z.numpy()

    def encode(self, image: np.ndarray) -> np.ndarray:
        self._check_image(np.asarray(image))
        return self.encode_batch(np.asarray(image)[None])[0]

    @torch.no_grad()
    def decode_batch(self, latents: np.ndarray) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float32)
        if latents.ndim != 4 or latents.shape[1] != self.latent_mean.shape[1]:
            raise ShapeError(f"expected N x C x h x w latents, got {latents.shape}")
        z = torch.from_numpy(np.ascontiguousarray(latents))
        z = z * self.latent_std + self.latent_mean
        x = self.model.decoder(z)
        return x.clamp(0.0, 1.0).numpy().transpose(0, 2, 3, 1)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return self.decode_batch(np.asarray(latent)[None])[0]

    def black_latent(self) -> np.ndarray:
        """encode(all-zimages) for the training canvas; cached per checkpoint."""
        if self._black is None:
            canvas = self.meta["canvas"]
            cache = cache_dir()
            cache_file = None
            if cache is not None:
                cache_file = cache / f"black-latent-{self.content_hash[:16]}.npy"
                if cache_file.exists():
                    self._black = np.load(cache_file)
                    return self._black
            self._black = self.encode(np.zeros((canvas, canvas, 3), np.float32))
            if cache_file is not None:
                np.save(cache_file, self._black)
        return self._black

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": CHECKPOINT_VERSION,
            "state_dict": {k: v.cpu() for k, v in self.model.state_dict().items()},
            "latent_mean": self.latent_mean.view(-1).numpy(),
            "latent_std": self.latent_std.view(-1).numpy(),
            "meta": self.meta,
        }
        tmp = path.with_name(path.name + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)


def codec_content_hash(model: nn.Module, latent_mean, latent_std) -> str:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["latent_mean"] = np.asarray(latent_mean)
    arrays["latent_std"] = np.asarray(latent_std)
    return hash_arrays(arrays)


def load_codec(path: str | Path) -> Codec:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise StructureError(f"unsupported codec checkpoint version {payload.get('version')}")
    meta = payload["meta"]
    model = ConvAutoencoder(base=meta["config"]["base_channels"], latent_channels=meta["config"]["latent_channels"])
    model.load_state_dict(payload["state_dict"])
    expected = codec_content_hash(model, payload["latent_mean"], payload["latent_std"])
    if expected != meta["content_hash"]:
        raise StructureError("codec checkpoint content hash mismatch")
    return Codec(model, payload["latent_mean"], payload["latent_std"], meta)


def _psnr_from_mse(mse: float) -> float:
    return float(-10.0 * np.log10(max(mse, 1e-12)))


def _load_training_arrays(manifest: DatasetManifest, include_layout_renders: bool):
    """uint8 image stacks for the train and val splits."""
    train, val = [], []
    for rec in manifest.records:
        img = load_record_image(manifest, rec)
        target = train if rec.split == "train" else val if rec.split == "val" else None
        if target is None:
            continue
        target.append(np.rint(img * 255.0).astype(np.uint8))
        if target is train and include_layout_renders:
            bundle = load_record_bundle(manifest, rec)
            for kind in ("AV", "CD", "L"):
                rgb = component_to_rgb(kind, bundle.component(kind))
                target.append(np.rint(rgb * 255.0).astype(np.uint8))
    if not val:  # fall back to a held-out slice of train
        k = max(len(train) // 10, 1)
        val = train[-k:]
        train = train[:-k]
    return np.stack(train), np.stack(val)


def train_codec(manifest: DatasetManifest, cfg: CodecTrainConfig | None = None, out: str | Path | None = None) -> Codec:
    """Train, normalize, freeze, and optionally persist the codec.

    Raises TrainingFailure when the held-out PSNR lands below cfg.min_psnr.
    """
    cfg = cfg or CodecTrainConfig()
    n_train_imgs = len([r for r in manifest.records if r.split == "train"])
    if n_train_imgs < 100:
        raise ConfigError(f"need at least 100 training images, got {n_train_imgs}")

    train_u8, val_u8 = _load_training_arrays(manifest, cfg.include_layout_renders)
    torch.manual_seed(derive_int_seed(cfg.seed, "codec", "init"))
    model = ConvAutoencoder(base=cfg.base_channels, latent_channels=cfg.latent_channels)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(len(train_u8) // cfg.batch, 1)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
    order_rng = substream(cfg.seed, "codec", "order")

    t_start = time.time()
    model.train()
    for _epoch in range(cfg.epochs):
        order = order_rng.permutation(len(train_u8))
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch : (s + 1) * cfg.batch]
            x = torch.from_numpy(train_u8[idx].astype(np.float32) / 255.0).permute(0, 3, 1, 2)
            recon = model(x)
            loss = torch.nn.functional.mse_loss(recon, x)
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_sched.step()
    model.eval()

    with torch.no_grad():
        # latent normalization statistics over the training images
        zs = []
        for s in range(0, len(train_u8), 256):
            x = torch.from_numpy(train_u8[s : s + 256].astype(np.float32) / 255.0).permute(0, 3, 1, 2)
            zs.append(model.encoder(x))
        z = torch.cat(zs)
        latent_mean = z.mean(dim=(0, 2, 3)).numpy()
        latent_std = (z.std(dim=(0, 2, 3)) + 1e-6).numpy()

        mses = []
        for s in range(0, len(val_u8), 256):
            x = torch.from_numpy(val_u8[s : s + 256].astype(np.float32) / 255.0).permute(0, 3, 1, 2)
            recon = model(x).clamp(0.0, 1.0)
            mses.append(((recon - x) ** 2).mean(dim=(1, 2, 3)).numpy())
        mse = float(np.concatenate(mses).mean())
    psnr = _psnr_from_mse(mse)

    if psnr < cfg.min_psnr:
        raise TrainingFailure(
            f"codec reconstruction PSNR {psnr:.2f} dB below the {cfg.min_psnr:.1f} dB floor "
            f"(epochs={cfg.epochs}, train_images={len(train_u8)}, val_mse={mse:.3e})"
        )

    meta = {
        "frozen": True,
        "canvas": manifest.canvas,
        "downsample": DOWNSAMPLE,
        "latent_channels": cfg.latent_channels,
        "config": asdict(cfg),
        "val_psnr": psnr,
        "train_seconds": time.time() - t_start,
        "content_hash": codec_content_hash(model, latent_mean, latent_std),
    }
    codec = Codec(model, latent_mean, latent_std, meta)
    if out is not None:
        codec.save(out)
        write_json(Path(out).with_suffix(".json"), {"val_psnr": psnr, "config": asdict(cfg)})
    return codec
