"""Procedural toy fundus data: layouts, deterministic rendering, oracle recovery.

Layout bundles hold three spatial components as binary maps:

  * av      (H, W, 2): channel 0 artery, channel 1 vein (crossings may overlap)
  * cd      (H, W, 2): channel 0 optic disc (includes the cup), channel 1 cup
  * lesions (H, W, 3): three lesion classes, mutually disjoint and disjoint
    from disc and vessels

Rendering adds documented constant offsets to a smooth background so that a
style-free oracle can recover every component by thresholding against a
morphological-opening background estimate:

  * artery: +artery_offset on red, vein: +vein_offset on blue
    (both >= 0.34; the documented minimum vessel contrast is 0.2)
  * disc rim: +0.30 on green, cup: +0.52 on green
  * lesion classes: (+0.16,+0.16,+0.16), (+0.16,0,+0.16), (+0.16,0,0)

then blurs with a style Gaussian and adds bounded uniform noise.  At zero
blur the oracle recovers the layout exactly; at the default blur the AV
round-trip Dice stays >= 0.95.

On disk a dataset is `<root>/images/<id>.png`, `<root>/layouts/<id>_{av,cd,
lesions}.png` (8-bit RGB; av: R=artery/B=vein, cd: R=disc/G=cup, lesions:
R/G/B = class 1/2/3) plus `<root>/manifest.json`.  Dataset writing is the
only stateful step and must stay single-writer per output directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ShapeError
from .utils import derive_int_seed, read_json, write_json

DEFAULT_CANVAS = 64
MIN_CANVAS = 32

# renderer offsets (documented contract used by the oracle extractor)
MIN_VESSEL_CONTRAST = 0.2
DISC_OFFSET_G = 0.30
CUP_OFFSET_G = 0.52
LESION_OFFSETS = ((0.16, 0.16, 0.16), (0.16, 0.0, 0.16), (0.16, 0.0, 0.0))

# oracle thresholds (against the opening-based background estimate)
VESSEL_THRESHOLD = 0.20
DISC_THRESHOLD = 0.23
CUP_THRESHOLD = 0.41
LESION_THRESHOLD = 0.08
OPENING_RADIUS = 12  # at canvas 64, scaled linearly

PALETTES = (
    (0.42, 0.30, 0.28),
    (0.44, 0.34, 0.30),
    (0.40, 0.32, 0.34),
    (0.46, 0.36, 0.28),
    (0.30, 0.40, 0.44),
    (0.28, 0.38, 0.46),
    (0.32, 0.44, 0.40),
    (0.30, 0.46, 0.42),
)

# per-domain closed parameter ranges; deliberately disjoint pairwise
STYLE_RANGES = {
    "source": {
        "palette_id": (0, 3),
        "grad_strength": (0.05, 0.15),
        "blur_sigma": (0.30, 0.60),
        "noise_amp": (0.004, 0.010),
        "vessel_offset": (0.34, 0.42),
    },
    "shifted": {
        "palette_id": (4, 7),
        "grad_strength": (0.18, 0.28),
        "blur_sigma": (0.70, 1.00),
        "noise_amp": (0.012, 0.020),
        "vessel_offset": (0.44, 0.50),
    },
}
DEFAULT_BLUR = 0.45
DOMAINS = tuple(STYLE_RANGES)


@dataclass(frozen=True)
class RenderStyle:
    """Rendering parameters; fully determined by (style_seed, domain_tag)."""

    palette_id: int
    grad_strength: float
    grad_origin: int  # corner index: 0 NW, 1 NE, 2 SW, 3 SE
    blur_sigma: float
    noise_amp: float
    artery_offset: float
    vein_offset: float
    noise_seed: int

    def __post_init__(self):
        if not 0 <= self.palette_id < len(PALETTES):
            raise ConfigError(f"palette_id {self.palette_id} out of range")
        if not 0 <= self.grad_origin <= 3:
            raise ConfigError(f"grad_origin {self.grad_origin} out of range")
        bounds = {
            "grad_strength": (0.0, 0.30),
            "blur_sigma": (0.0, 1.2),
            "noise_amp": (0.0, 0.025),
            "artery_offset": (MIN_VESSEL_CONTRAST, 0.55),
            "vein_offset": (MIN_VESSEL_CONTRAST, 0.55),
        }
        for name, (lo, hi) in bounds.items():
            value = getattr(self, name)
            if not lo <= value <= hi:
                raise ConfigError(f"{name}={value} outside closed range [{lo}, {hi}]")


def style_from_seed(style_seed: int, domain: str = "source") -> RenderStyle:
    """Deterministic style draw from the domain's parameter ranges."""
    if domain not in STYLE_RANGES:
        raise ConfigError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    rng = np.random.default_rng([0x57E1E, hash_domain(domain), int(style_seed)])
    ranges = STYLE_RANGES[domain]
    lo, hi = ranges["palette_id"]
    return RenderStyle(
        palette_id=int(rng.integers(lo, hi + 1)),
        grad_strength=float(rng.uniform(*ranges["grad_strength"])),
        grad_origin=int(rng.integers(0, 4)),
        blur_sigma=float(rng.uniform(*ranges["blur_sigma"])),
        noise_amp=float(rng.uniform(*ranges["noise_amp"])),
        artery_offset=float(rng.uniform(*ranges["vessel_offset"])),
        vein_offset=float(rng.uniform(*ranges["vessel_offset"])),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
    )


def hash_domain(domain: str) -> int:
    return sum(ord(c) * 131**i for i, c in enumerate(domain)) % (2**31)


@dataclass(frozen=True)
class Presence:
    av: bool
    cd: bool
    lesions: bool

    def astuple(self):
        return (self.av, self.cd, self.lesions)


@dataclass
class LayoutBundle:
    """Per-image spatial condition maps plus per-component presence flags."""

    av: np.ndarray  # (H, W, 2) bool
    cd: np.ndarray  # (H, W, 2) bool
    lesions: np.ndarray  # (H, W, 3) bool
    present: Presence

    def validate(self) -> None:
        shapes = {self.av.shape[:2], self.cd.shape[:2], self.lesions.shape[:2]}
        if len(shapes) != 1:
            raise ShapeError("component maps disagree on spatial shape")
        if self.av.shape[2] != 2 or self.cd.shape[2] != 2 or self.lesions.shape[2] != 3:
            raise ShapeError("component maps have wrong channel counts")
        for arr in (self.av, self.cd, self.lesions):
            if arr.dtype != bool:
                raise ShapeError("component maps must be boolean")
        if (self.cd[..., 1] & ~self.cd[..., 0]).any():
            raise ConfigError("cup extends outside the disc")
        for flag, arr in zip(self.present.astuple(), (self.av, self.cd, self.lesions)):
            if not flag and arr.any():
                raise ConfigError("absent component has nonzero map")

    @property
    def shape(self):
        return self.av.shape[:2]

    def component(self, kind: str) -> np.ndarray:
        return {"AV": self.av, "CD": self.cd, "L": self.lesions}[kind]

    def is_present(self, kind: str) -> bool:
        return {"AV": self.present.av, "CD": self.present.cd, "L": self.present.lesions}[kind]


def empty_bundle(canvas: int) -> LayoutBundle:
    return LayoutBundle(
        av=np.zeros((canvas, canvas, 2), bool),
        cd=np.zeros((canvas, canvas, 2), bool),
        lesions=np.zeros((canvas, canvas, 3), bool),
        present=Presence(False, False, False),
    )


@dataclass(frozen=True)
class BranchingConfig:
    """Vessel tree generator parameters (defaults tuned for canvas 64)."""

    branch_depth: int = 4
    root_width: float = 4.0
    width_decay: float = 0.75
    seg_len: float = 13.0
    seg_len_decay: float = 0.82
    branch_angle_deg: float = 28.0
    angle_jitter_deg: float = 9.0
    curvature_deg: float = 2.2
    lesion_count: int = 3

    def __post_init__(self):
        if not 0 <= self.branch_depth <= 6:
            raise ConfigError("branch_depth must be in [0, 6]")
        if self.root_width <= 0 or self.seg_len <= 0:
            raise ConfigError("root_width and seg_len must be positive")
        if not 0.3 <= self.width_decay <= 1.0 or not 0.5 <= self.seg_len_decay <= 1.0:
            raise ConfigError("decay factors out of range")
        if self.lesion_count < 0 or self.lesion_count > 9:
            raise ConfigError("lesion_count must be in [0, 9]")


def _ellipse_mask(canvas: int, center, radii, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / radii[1]) ** 2 + (v / radii[0]) ** 2 <= 1.0


def _stamp_disk(mask: np.ndarray, y: float, x: float, radius: float) -> None:
    h, w = mask.shape
    r = max(radius, 0.5)
    y0, y1 = int(max(0, np.floor(y - r))), int(min(h, np.ceil(y + r) + 1))
    x0, x1 = int(max(0, np.floor(x - r))), int(min(w, np.ceil(x + r) + 1))
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask[y0:y1, x0:x1] |= (yy - y) ** 2 + (xx - x) ** 2 <= r * r


def _grow_tree(mask: np.ndarray, rng: np.random.Generator, start, angle: float, cfg: BranchingConfig, scale: float) -> None:
    stack = [(start[0], start[1], angle, 0)]
    while stack:
        y, x, ang, level = stack.pop()
        length = cfg.seg_len * (cfg.seg_len_decay**level) * scale * rng.uniform(0.85, 1.15)
        width = cfg.root_width * (cfg.width_decay**level) * scale
        steps = max(int(round(length)), 2)
        cy, cx, cang = y, x, ang
        for _ in range(steps):
            cang += np.deg2rad(rng.normal(0.0, cfg.curvature_deg))
            cy += np.sin(cang)
            cx += np.cos(cang)
            _stamp_disk(mask, cy, cx, width / 2.0)
        if level < cfg.branch_depth:
            spread = np.deg2rad(cfg.branch_angle_deg + rng.normal(0.0, cfg.angle_jitter_deg))
            stack.append((cy, cx, cang - spread, level + 1))
            stack.append((cy, cx, cang + spread, level + 1))


def make_layout(seed: int, canvas: int = DEFAULT_CANVAS, params: BranchingConfig | None = None) -> LayoutBundle:
    """Deterministic layout bundle: vessel trees rooted in the disc, nested
    disc/cup ellipses, lesion blobs disjoint from disc and vessels."""
    if canvas < MIN_CANVAS:
        raise ConfigError(f"canvas must be >= {MIN_CANVAS}, got {canvas}")
    cfg = params if params is not None else BranchingConfig()
    if not isinstance(cfg, BranchingConfig):
        raise ConfigError("params must be a BranchingConfig")
    rng = np.random.default_rng([0x1A9007, int(seed)])
    scale = canvas / DEFAULT_CANVAS

    center = rng.uniform(0.38 * canvas, 0.62 * canvas, size=2)
    disc_r = rng.uniform(0.10 * canvas, 0.14 * canvas, size=2)
    tilt = rng.uniform(0.0, np.pi)
    disc = _ellipse_mask(canvas, center, disc_r, tilt)
    cup = _ellipse_mask(canvas, center, disc_r * rng.uniform(0.45, 0.60), tilt)
    cd = np.stack([disc, cup & disc], axis=-1)

    artery = np.zeros((canvas, canvas), bool)
    vein = np.zeros((canvas, canvas), bool)
    base_angle = rng.uniform(0.0, 2.0 * np.pi)
    for mask, ang in ((artery, base_angle), (vein, base_angle + np.pi + rng.uniform(-0.6, 0.6))):
        frac = rng.uniform(0.0, 0.35)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        root = (
            center[0] + frac * disc_r[0] * np.sin(theta),
            center[1] + frac * disc_r[1] * np.cos(theta),
        )
        _grow_tree(mask, rng, root, ang, cfg, scale)
    av = np.stack([artery, vein], axis=-1)

    lesions = np.zeros((canvas, canvas, 3), bool)
    placed: list[tuple[float, float, float]] = []
    for k in range(cfg.lesion_count):
        cls = k % 3
        for _attempt in range(25):
            ly, lx = rng.uniform(5, canvas - 5, size=2)
            lr = rng.uniform(2.0, 4.5) * scale
            d_disc = np.hypot(ly - center[0], lx - center[1])
            if d_disc < max(disc_r) + lr + 3:
                continue
            if any(np.hypot(ly - py, lx - px) < lr + pr + 2 for py, px, pr in placed):
                continue
            blob = _ellipse_mask(canvas, (ly, lx), (lr, lr * rng.uniform(0.7, 1.0)), rng.uniform(0, np.pi))
            lesions[..., cls] |= blob
            placed.append((ly, lx, lr))
            break
    vessels_or_disc = artery | vein | disc
    lesions &= ~vessels_or_disc[..., None]

    bundle = LayoutBundle(
        av=av,
        cd=cd,
        lesions=lesions,
        present=Presence(bool(av.any()), bool(cd.any()), bool(lesions.any())),
    )
    bundle.validate()
    return bundle


def _background(canvas: int, style: RenderStyle) -> np.ndarray:
    palette = np.asarray(PALETTES[style.palette_id], dtype=np.float64)
    corners = ((0, 0), (0, canvas - 1), (canvas - 1, 0), (canvas - 1, canvas - 1))
    oy, ox = corners[style.grad_origin]
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    dist = np.hypot(yy - oy, xx - ox) / (np.sqrt(2.0) * (canvas - 1))
    return palette[None, None, :] * (1.0 - style.grad_strength * dist[..., None])


def render(bundle: LayoutBundle, style: RenderStyle) -> np.ndarray:
    """Deterministic image in [0, 1]^3 from a bundle and a style."""
    bundle.validate()
    canvas = bundle.shape[0]
    img = _background(canvas, style)

    disc, cup = bundle.cd[..., 0], bundle.cd[..., 1]
    img[..., 1] += DISC_OFFSET_G * (disc & ~cup)
    img[..., 1] += CUP_OFFSET_G * cup
    for cls in range(3):
        for ch in range(3):
            img[..., ch] += LESION_OFFSETS[cls][ch] * bundle.lesions[..., cls]
    img[..., 0] += style.artery_offset * bundle.av[..., 0]
    img[..., 2] += style.vein_offset * bundle.av[..., 1]

    if style.blur_sigma > 0.0:
        img = ndimage.gaussian_filter(img, sigma=(style.blur_sigma, style.blur_sigma, 0.0))
    if style.noise_amp > 0.0:
        noise_rng = np.random.default_rng([0x0153, style.noise_seed])
        img = img + noise_rng.uniform(-style.noise_amp, style.noise_amp, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _disk_footprint(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return yy * yy + xx * xx <= radius * radius


def estimate_background(image: np.ndarray) -> np.ndarray:
    """Style-free background estimate: per-channel grey opening with a disk
    large enough to swallow every rendered structure."""
    radius = max(int(round(OPENING_RADIUS * image.shape[0] / DEFAULT_CANVAS)), 3)
    foot = _disk_footprint(radius)
    out = np.empty_like(image, dtype=np.float64)
    for ch in range(image.shape[2]):
        out[..., ch] = ndimage.grey_opening(image[..., ch].astype(np.float64), footprint=foot, mode="nearest")
    return out


def oracle_extract(image: np.ndarray) -> LayoutBundle:
    """Recover a layout bundle from a rendered image by thresholding the
    documented offsets against the opening background estimate."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got {image.shape}")
    diff = image - estimate_background(image)
    dr, dg, db = diff[..., 0], diff[..., 1], diff[..., 2]

    artery = dr >= VESSEL_THRESHOLD
    vein = db >= VESSEL_THRESHOLD
    cup = dg >= CUP_THRESHOLD
    disc = (dg >= DISC_THRESHOLD) | cup
    cand = (dr >= LESION_THRESHOLD) & ~(artery | vein | disc)
    l1 = cand & (dg >= LESION_THRESHOLD) & (db >= LESION_THRESHOLD)
    l2 = cand & (dg < LESION_THRESHOLD) & (db >= LESION_THRESHOLD)
    l3 = cand & (dg < LESION_THRESHOLD) & (db < LESION_THRESHOLD)

    av = np.stack([artery, vein], axis=-1)
    cd = np.stack([disc, cup & disc], axis=-1)
    lesions = np.stack([l1, l2, l3], axis=-1)
    return LayoutBundle(
        av=av,
        cd=cd,
        lesions=lesions,
        present=Presence(bool(av.any()), bool(cd.any()), bool(lesions.any())),
    )


# ---------------------------------------------------------------------------
# dataset persistence


@dataclass(frozen=True)
class Record:
    id: str
    image: str
    layout: str  # path stem; component files are <stem>_{av,cd,lesions}.png
    split: str
    domain: str
    seed: int

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "image": self.image,
            "layout": self.layout,
            "split": self.split,
            "domain": self.domain,
            "seed": self.seed,
        }


@dataclass
class DatasetManifest:
    root: Path
    canvas: int
    domain: str
    seed: int
    records: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def to_json(self) -> dict:
        return {
            "version": 1,
            "canvas": self.canvas,
            "domain": self.domain,
            "seed": self.seed,
            "records": [r.to_json() for r in self.records],
        }


def split_counts(n: int, fractions) -> list[int]:
    """Floor counts per split, remainder distributed in order."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    counts = [int(np.floor(n * f)) for f in fractions]
    i = 0
    while sum(counts) < n:
        counts[i % len(counts)] += 1
        i += 1
    return counts


def save_image_png(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_bundle_pngs(stem: str | Path, bundle: LayoutBundle) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    h, w = bundle.shape
    av = np.zeros((h, w, 3), np.uint8)
    av[..., 0] = bundle.av[..., 0] * 255
    av[..., 2] = bundle.av[..., 1] * 255
    Image.fromarray(av).save(f"{stem}_av.png")
    cd = np.zeros((h, w, 3), np.uint8)
    cd[..., 0] = bundle.cd[..., 0] * 255
    cd[..., 1] = bundle.cd[..., 1] * 255
    Image.fromarray(cd).save(f"{stem}_cd.png")
    Image.fromarray((bundle.lesions * 255).astype(np.uint8)).save(f"{stem}_lesions.png")


def load_bundle_pngs(stem: str | Path) -> LayoutBundle:
    stem = Path(stem)
    av_img = np.asarray(Image.open(f"{stem}_av.png")) > 127
    cd_img = np.asarray(Image.open(f"{stem}_cd.png")) > 127
    les_img = np.asarray(Image.open(f"{stem}_lesions.png")) > 127
    av = np.stack([av_img[..., 0], av_img[..., 2]], axis=-1)
    cd = np.stack([cd_img[..., 0], cd_img[..., 1]], axis=-1)
    return LayoutBundle(
        av=av,
        cd=cd,
        lesions=les_img[..., :3],
        present=Presence(bool(av.any()), bool(cd.any()), bool(les_img.any())),
    )


SPLIT_NAMES = ("train", "val", "test")


def make_dataset(
    n: int,
    splits=(0.8, 0.1, 0.1),
    domain: str = "source",
    out: str | Path = "toyset",
    seed: int = 0,
    canvas: int = DEFAULT_CANVAS,
    params: BranchingConfig | None = None,
) -> DatasetManifest:
    """Generate, render and persist a dataset; byte-identical for a fixed seed."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if domain not in DOMAINS:
        raise ConfigError(f"unknown domain {domain!r}")
    if len(splits) != len(SPLIT_NAMES):
        raise ConfigError(f"expected {len(SPLIT_NAMES)} split fractions")
    counts = split_counts(n, splits)
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)

    base = derive_int_seed(seed, "toydata", domain)
    manifest = DatasetManifest(root=root, canvas=canvas, domain=domain, seed=seed)
    split_of = []
    for name, count in zip(SPLIT_NAMES, counts):
        split_of.extend([name] * count)
    for i in range(n):
        rec_seed = base + i
        rid = f"{domain}-{i:05d}"
        bundle = make_layout(rec_seed, canvas=canvas, params=params)
        style = style_from_seed(rec_seed, domain)
        image = render(bundle, style)
        save_image_png(root / "images" / f"{rid}.png", image)
        save_bundle_pngs(root / "layouts" / rid, bundle)
        manifest.records.append(
            Record(
                id=rid,
                image=f"images/{rid}.png",
                layout=f"layouts/{rid}",
                split=split_of[i],
                domain=domain,
                seed=rec_seed,
            )
        )
    write_json(root / "manifest.json", manifest.to_json())
    return manifest


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    data = read_json(root / "manifest.json")
    manifest = DatasetManifest(root=root, canvas=data["canvas"], domain=data["domain"], seed=data["seed"])
    manifest.records = [Record(**r) for r in data["records"]]
    return manifest


def load_record_image(manifest: DatasetManifest, record: Record) -> np.ndarray:
    return load_image_png(manifest.root / record.image)


def load_record_bundle(manifest: DatasetManifest, record: Record) -> LayoutBundle:
    return load_bundle_pngs(manifest.root / record.layout)
