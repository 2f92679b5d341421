"""Toy artery/vein segmentation: model, loss stack, augmentation training.

The per-image loss is 0.5 * (Dice + BCE) per vessel class summed over the
artery and vein channels (Dice smoothing 1, BCE on probabilities clamped at
1e-7).  Synthetic samples enter through a consistency term: a synthetic
image is always scored against its *source* image's ground truth, weighted
by lambda.

A lambda=0 run performs bit-identical computation to a run without any
synthetic data: the synthetic branch (including its partner-sampling rng
stream) is skipped entirely, so the checkpoints hash equal.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .errors import ConfigError, DomainError, ShapeError, StructureError
from .metrics import av_scores, dice
from .toydata import (
    DatasetManifest,
    LayoutBundle,
    Presence,
    load_bundle_pngs,
    load_image_png,
    oracle_extract,
)
from .training import make_optimizer
from .utils import derive_int_seed, hash_state_dict, read_json, substream

CHECKPOINT_VERSION = 1
ENCODERS = ("unet", "dilated")


# ---------------------------------------------------------------------------
# models


class DoubleConv(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        groups = 8 if cout % 8 == 0 else 4
        self.block = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.GroupNorm(groups, cout),
            nn.SiLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.GroupNorm(groups, cout),
            nn.SiLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class SegUNet(nn.Module):
    """4-level U-shaped encoder-decoder, 2 sigmoid output channels."""

    def __init__(self, base: int = 16):
        super().__init__()
        self.enc1 = DoubleConv(3, base)
        self.enc2 = DoubleConv(base, base * 2)
        self.enc3 = DoubleConv(base * 2, base * 4)
        self.bottleneck = DoubleConv(base * 4, base * 8)
        self.pool = nn.MaxPool2d(2)
        self.up3 = nn.ConvTranspose2d(base * 8, base * 4, 2, stride=2)
        self.dec3 = DoubleConv(base * 8, base * 4)
        self.up2 = nn.ConvTranspose2d(base * 4, base * 2, 2, stride=2)
        self.dec2 = DoubleConv(base * 4, base * 2)
        self.up1 = nn.ConvTranspose2d(base * 2, base, 2, stride=2)
        self.dec1 = DoubleConv(base * 2, base)
        self.head = nn.Conv2d(base, 2, 1)

    def encoder_modules(self) -> dict:
        return {"enc1": self.enc1, "enc2": self.enc2, "enc3": self.enc3, "bottleneck": self.bottleneck}

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        b = self.bottleneck(self.pool(e3))
        d3 = self.dec3(torch.cat([self.up3(b), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up2(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return torch.sigmoid(self.head(d1))


class SegDilated(nn.Module):
    """Dilated plain-conv variant (no skip connections); same contract."""

    def __init__(self, width: int = 48):
        super().__init__()
        layers = []
        cin = 3
        for dilation in (1, 2, 4, 8, 4, 2):
            layers += [
                nn.Conv2d(cin, width, 3, padding=dilation, dilation=dilation, bias=False),
                nn.GroupNorm(8, width),
                nn.SiLU(inplace=True),
            ]
            cin = width
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Conv2d(width, 2, 1)

    def encoder_modules(self) -> dict:
        return {"trunk": self.trunk}

    def forward(self, x):
        return torch.sigmoid(self.head(self.trunk(x)))


def build_segmenter(encoder: str) -> nn.Module:
    if encoder == "unet":
        return SegUNet()
    if encoder == "dilated":
        return SegDilated()
    raise ConfigError(f"unknown encoder {encoder!r}; expected one of {ENCODERS}")


# ---------------------------------------------------------------------------
# losses


def _check_probs(pred: torch.Tensor) -> None:
    if pred.min() < 0.0 or pred.max() > 1.0:
        raise DomainError("predictions must lie in [0, 1] (sigmoid output)")


def seg_loss_torch(pred: torch.Tensor, gt: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """0.5 * (Dice + BCE) per vessel class; per-sample, then batch mean.

    pred and gt are (B, 2, H, W); pred holds probabilities.
    """
    if pred.shape != gt.shape or pred.ndim != 4 or pred.shape[1] != 2:
        raise ShapeError(f"expected matching (B, 2, H, W), got {tuple(pred.shape)} vs {tuple(gt.shape)}")
    _check_probs(pred.detach())
    p = pred.clamp(1e-7, 1.0 - 1e-7)
    g = gt.to(pred.dtype)
    inter = (p * g).sum(dim=(2, 3))
    sums = p.sum(dim=(2, 3)) + g.sum(dim=(2, 3))
    dice_l = 1.0 - (2.0 * inter + smooth) / (sums + smooth)  # (B, 2)
    bce = -(g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p)).mean(dim=(2, 3))  # (B, 2)
    per_sample = 0.5 * (dice_l + bce).sum(dim=1)
    return per_sample.mean()


def seg_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Single-sample convenience wrapper over (H, W, 2) arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[2] != 2:
        raise ShapeError(f"expected matching (H, W, 2), got {pred.shape} vs {gt.shape}")
    pt = torch.from_numpy(pred.transpose(2, 0, 1))[None]
    gtt = torch.from_numpy(gt.astype(np.float64).transpose(2, 0, 1))[None]
    return float(seg_loss_torch(pt, gtt))


def total_loss_torch(model: nn.Module, x_orig: torch.Tensor, x_gen: torch.Tensor, y: torch.Tensor, lam: float) -> torch.Tensor:
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    if x_gen is None:
        raise StructureError("synthetic batch missing (pair link required)")
    if x_gen.shape != x_orig.shape:
        raise StructureError("synthetic batch does not pair with the real batch")
    return seg_loss_torch(model(x_orig), y) + lam * seg_loss_torch(model(x_gen), y)


def total_loss(model: nn.Module, x_orig: np.ndarray, x_gen: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Supervised + consistency loss over numpy batches (B, H, W, C)."""
    xo = torch.from_numpy(np.asarray(x_orig, np.float32).transpose(0, 3, 1, 2))
    xg = None if x_gen is None else torch.from_numpy(np.asarray(x_gen, np.float32).transpose(0, 3, 1, 2))
    yt = torch.from_numpy(np.asarray(y, np.float32).transpose(0, 3, 1, 2))
    with torch.no_grad():
        return float(total_loss_torch(model, xo, xg, yt, lam))


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class SegData:
    """In-memory segmentation samples (uint8 images, boolean AV labels)."""

    ids: list
    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N, H, W, 2) bool
    origin: str = "real"
    pair_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def image_batch(self, idx) -> torch.Tensor:
        return torch.from_numpy(self.images[idx].astype(np.float32) / 255.0).permute(0, 3, 1, 2)

    def label_batch(self, idx) -> torch.Tensor:
        return torch.from_numpy(self.labels[idx].astype(np.float32)).permute(0, 3, 1, 2)


def seg_data_from_manifest(manifest: DatasetManifest, split: str, limit: int | None = None) -> SegData:
    records = manifest.split(split)
    if limit is not None:
        records = records[:limit]
    if not records:
        raise ConfigError(f"no records in split {split!r}")
    ids, images, labels = [], [], []
    for rec in records:
        img = load_image_png(manifest.root / rec.image)
        bundle = load_bundle_pngs(manifest.root / rec.layout)
        ids.append(rec.id)
        images.append(np.rint(img * 255.0).astype(np.uint8))
        labels.append(bundle.av)
    return SegData(ids=ids, images=np.stack(images), labels=np.stack(labels), origin="real", pair_ids=list(ids))


def seg_data_from_synthetic(root: str | Path, limit_per_source: int | None = None) -> SegData:
    root = Path(root)
    data = read_json(root / "manifest.json")
    ids, images, labels, pair_ids = [], [], [], []
    per_source: dict = {}
    for entry in data["records"]:
        src = entry["pair_id"]
        per_source.setdefault(src, 0)
        if limit_per_source is not None and per_source[src] >= limit_per_source:
            continue
        per_source[src] += 1
        img = load_image_png(root / entry["image"])
        av_img = np.asarray(Image.open(root / entry["av"])) > 127
        ids.append(entry["id"])
        images.append(np.rint(img * 255.0).astype(np.uint8))
        labels.append(np.stack([av_img[..., 0], av_img[..., 2]], axis=-1))
        pair_ids.append(src)
    if not ids:
        raise ConfigError(f"synthetic dataset {root} is empty")
    return SegData(ids=ids, images=np.stack(images), labels=np.stack(labels), origin="synthetic", pair_ids=pair_ids)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SegTrainConfig:
    epochs: int = 200
    lr: float = 4e-4
    batch: int = 12
    lam: float = 0.1
    seed: int = 0
    encoder: str = "unet"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.epochs < 0 or self.batch < 1 or self.lr <= 0:
            raise ConfigError("invalid segmentation training config")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SegCheckpoint:
    state_dict: dict
    encoder: str
    config: dict
    content_hash: str
    best_val_dice: float
    val_history: list
    audit: list  # (synthetic_id, label_source_id) pairs actually used

    def build(self) -> nn.Module:
        model = build_segmenter(self.encoder)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": CHECKPOINT_VERSION,
            "encoder": self.encoder,
            "state_dict": self.state_dict,
            "config": self.config,
            "content_hash": self.content_hash,
            "best_val_dice": self.best_val_dice,
            "val_history": self.val_history,
            "audit": self.audit,
        }
        tmp = path.with_name(path.name + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)


def load_seg_checkpoint(path: str | Path) -> SegCheckpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise StructureError("unsupported segmentation checkpoint version")
    ckpt = SegCheckpoint(
        state_dict=payload["state_dict"],
        encoder=payload["encoder"],
        config=payload["config"],
        content_hash=payload["content_hash"],
        best_val_dice=payload["best_val_dice"],
        val_history=payload["val_history"],
        audit=payload["audit"],
    )
    if hash_state_dict(ckpt.state_dict) != ckpt.content_hash:
        raise StructureError("segmentation checkpoint content hash mismatch")
    return ckpt


@torch.no_grad()
def predict_probs(model: nn.Module, images: np.ndarray, batch: int = 64) -> np.ndarray:
    """(N, H, W, 3) float or uint8 images -> (N, H, W, 2) probabilities."""
    model.eval()
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    out = []
    for s in range(0, len(images), batch):
        x = torch.from_numpy(images[s : s + batch].astype(np.float32)).permute(0, 3, 1, 2)
        out.append(model(x).numpy().transpose(0, 2, 3, 1))
    return np.concatenate(out)


def evaluate_segmenter(model: nn.Module, data: SegData) -> dict:
    probs = predict_probs(model, data.images)
    preds = [p >= 0.5 for p in probs]
    return av_scores(preds, list(data.labels))


def quick_val_dice(model: nn.Module, data: SegData) -> float:
    """Dice average only; used for per-epoch best-model selection (the
    skeleton-based metrics are too slow to run every epoch)."""
    probs = predict_probs(model, data.images)
    dices = []
    for ch in (0, 1):
        dices.append(float(np.mean([dice(p[..., ch] >= 0.5, g[..., ch]) for p, g in zip(probs, data.labels)])))
    return (dices[0] + dices[1]) / 2.0


def train_segmenter(
    real: SegData,
    val: SegData,
    synthetic: SegData | None,
    cfg: SegTrainConfig,
    pretrained_encoder: dict | None = None,
) -> SegCheckpoint:
    """Consistency-regularized training; checkpoints the best-validation model."""
    use_syn = synthetic is not None and cfg.lam > 0.0
    partners: dict = {}
    if use_syn:
        for i, src in enumerate(synthetic.pair_ids):
            partners.setdefault(src, []).append(i)
        if not any(rid in partners for rid in real.ids):
            raise StructureError("synthetic dataset does not pair-link into the real dataset")

    torch.manual_seed(derive_int_seed(cfg.seed, "seg", "init"))
    model = build_segmenter(cfg.encoder)
    if pretrained_encoder is not None:
        load_encoder_state(model, pretrained_encoder)
    opt = make_optimizer(model.parameters(), cfg.lr, cfg.weight_decay)
    steps_per_epoch = max(len(real) // cfg.batch, 1)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs * steps_per_epoch, 1))
    order_rng = substream(cfg.seed, "seg", "order")
    partner_rng = substream(cfg.seed, "seg", "partner") if use_syn else None

    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    best_val = -1.0
    val_history = []
    audit = []

    for _epoch in range(cfg.epochs):
        model.train()
        order = order_rng.permutation(len(real))
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch : (s + 1) * cfg.batch]
            x = real.image_batch(idx)
            y = real.label_batch(idx)
            loss = seg_loss_torch(model(x), y)
            if use_syn:
                syn_idx = []
                keep = []
                for j, i in enumerate(idx):
                    plist = partners.get(real.ids[i])
                    if plist:
                        pick = plist[int(partner_rng.integers(0, len(plist)))]
                        syn_idx.append(pick)
                        keep.append(j)
                        audit.append((synthetic.ids[pick], real.ids[i]))
                if syn_idx:
                    xs = synthetic.image_batch(np.asarray(syn_idx))
                    ys = y[keep]
                    loss = loss + cfg.lam * seg_loss_torch(model(xs), ys)
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_sched.step()
            if not np.isfinite(float(loss.detach())):
                raise StructureError("non-finite segmentation loss")
        val_dice = quick_val_dice(model, val)
        val_history.append(val_dice)
        if val_dice > best_val:
            best_val = val_dice
            best_state = {k: v.clone() for k, v in model.state_dict().items()}

    state = {k: v.cpu() for k, v in best_state.items()}
    return SegCheckpoint(
        state_dict=state,
        encoder=cfg.encoder,
        config=cfg.to_json(),
        content_hash=hash_state_dict(state),
        best_val_dice=best_val,
        val_history=val_history,
        audit=audit,
    )


# ---------------------------------------------------------------------------
# layout extraction


def extract_layout(image: np.ndarray, seg: SegCheckpoint | nn.Module | None = None, mode: str = "oracle") -> LayoutBundle:
    """AV via the segmenter at threshold 0.5 ("learned") or the renderer
    oracle ("oracle"); disc/cup and lesions always via the oracle extractor."""
    if mode not in ("oracle", "learned"):
        raise ConfigError(f"mode must be 'oracle' or 'learned', got {mode!r}")
    oracle = oracle_extract(image)
    if mode == "oracle":
        return oracle
    if seg is None:
        raise ConfigError("learned extraction needs a segmentation checkpoint")
    model = seg.build() if isinstance(seg, SegCheckpoint) else seg
    probs = predict_probs(model, np.asarray(image)[None])[0]
    av = probs >= 0.5
    return LayoutBundle(
        av=av,
        cd=oracle.cd,
        lesions=oracle.lesions,
        present=Presence(bool(av.any()), oracle.present.cd, oracle.present.lesions),
    )


# ---------------------------------------------------------------------------
# masked-reconstruction pretraining


@dataclass(frozen=True)
class MAETrainConfig:
    steps: int = 500
    lr: float = 1.5e-4
    batch: int = 32
    mask_ratio: float = 0.75
    patch: int = 8
    seed: int = 0
    encoder: str = "unet"

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in [0, 1)")
        if self.patch < 1 or self.steps < 0:
            raise ConfigError("invalid pretraining config")


class _MAEHead(nn.Module):
    """Reconstruction decoder on top of a segmenter encoder."""

    def __init__(self, seg: nn.Module):
        super().__init__()
        self.seg = seg
        if isinstance(seg, SegUNet):
            base = seg.head.in_channels
            self.decode = nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(base * 8, base * 4, 3, padding=1),
                nn.SiLU(inplace=True),
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(base * 4, base * 2, 3, padding=1),
                nn.SiLU(inplace=True),
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(base * 2, 3, 3, padding=1),
            )
        else:
            width = seg.head.in_channels
            self.decode = nn.Conv2d(width, 3, 3, padding=1)

    def forward(self, x):
        if isinstance(self.seg, SegUNet):
            h = self.seg.enc1(x)
            h = self.seg.enc2(self.seg.pool(h))
            h = self.seg.enc3(self.seg.pool(h))
            h = self.seg.bottleneck(self.seg.pool(h))
        else:
            h = self.seg.trunk(x)
        return self.decode(h)


def mask_patches(images: torch.Tensor, ratio: float, patch: int, rng: np.random.Generator):
    """Zero a random patch subset; returns (masked images, pixel mask)."""
    b, _, h, w = images.shape
    gh, gw = h // patch, w // patch
    n_mask = int(round(ratio * gh * gw))
    pix_mask = torch.zeros(b, 1, h, w, dtype=torch.bool)
    for i in range(b):
        if n_mask == 0:
            continue
        chosen = rng.choice(gh * gw, size=n_mask, replace=False)
        for c in chosen:
            gy, gx = divmod(int(c), gw)
            pix_mask[i, :, gy * patch : (gy + 1) * patch, gx * patch : (gx + 1) * patch] = True
    return images * (~pix_mask), pix_mask


def mae_pretrain(data: SegData, cfg: MAETrainConfig) -> tuple[dict, list]:
    """Masked-patch reconstruction; loss on masked patches only.

    Returns (encoder state dict loadable by train_segmenter, loss history).
    A mask ratio of 0 leaves nothing masked; the loss is defined as 0 then.
    """
    torch.manual_seed(derive_int_seed(cfg.seed, "mae", "init"))
    seg = build_segmenter(cfg.encoder)
    model = _MAEHead(seg)
    opt = make_optimizer(model.parameters(), cfg.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.steps, 1))
    order_rng = substream(cfg.seed, "mae", "order")
    mask_rng = substream(cfg.seed, "mae", "mask")

    losses = []
    step = 0
    while step < cfg.steps:
        order = order_rng.permutation(len(data))
        for s in range(max(len(data) // cfg.batch, 1)):
            if step >= cfg.steps:
                break
            idx = order[s * cfg.batch : (s + 1) * cfg.batch]
            x = data.image_batch(idx)
            masked, pix_mask = mask_patches(x, cfg.mask_ratio, cfg.patch, mask_rng)
            recon = model(masked)
            if pix_mask.any():
                loss = (((recon - x) ** 2) * pix_mask).sum() / (pix_mask.sum() * 3)
            else:
                loss = recon.sum() * 0.0
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_sched.step()
            losses.append(float(loss.detach()))
            step += 1

    encoder_state = {
        f"{name}.{k}": v.detach().cpu().clone()
        for name, module in seg.encoder_modules().items()
        for k, v in module.state_dict().items()
    }
    return encoder_state, losses


def load_encoder_state(model: nn.Module, encoder_state: dict) -> None:
    for name, module in model.encoder_modules().items():
        prefix = f"{name}."
        sub = {k[len(prefix) :]: v for k, v in encoder_state.items() if k.startswith(prefix)}
        module.load_state_dict(sub)
