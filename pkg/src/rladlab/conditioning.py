"""Layout conditioning: component embeddings, UI tokens, masking, sequences.

Each layout component is rendered to RGB (artery red / vein blue, disc
green / cup yellow, lesions white / pink / orange), encoded with the frozen
codec, and patch-projected (2x2 patches over the 16x16 latent -> 64 tokens)
through its dedicated head.  The three component token grids are summed
elementwise into a single conditioning grid c.

The transformer input is the fixed sequence

    [BOC, UI_AV, UI_CD, UI_L, c (64 tokens), EOC, image tokens (64)]

for 133 tokens at the default configuration.  A masked or absent component
is represented by the codec's black latent and a NEUTRAL UI vector, so an
AV-only bundle and a fully present bundle with CD/L masked produce exactly
the same sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError, StructureError
from .toydata import LayoutBundle

LATENT_CHANNELS = 4
LATENT_HW = 16
PATCH = 2
TOKENS_PER_SIDE = LATENT_HW // PATCH
N_COND = TOKENS_PER_SIDE * TOKENS_PER_SIDE
N_IMG = N_COND
N_UI = 3
SEQ_LEN = 1 + N_UI + N_COND + 1 + N_IMG
PATCH_DIM = LATENT_CHANNELS * PATCH * PATCH

COMPONENT_KINDS = ("AV", "CD", "L")
ROLES = ("BOC",) + ("UI",) * N_UI + ("COND",) * N_COND + ("EOC",) + ("IMG",) * N_IMG

BOC_INDEX = 0
UI_SLICE = slice(1, 1 + N_UI)
COND_SLICE = slice(1 + N_UI, 1 + N_UI + N_COND)
EOC_INDEX = 1 + N_UI + N_COND
IMG_SLICE = slice(EOC_INDEX + 1, SEQ_LEN)

# component map -> RGB colors fed to the codec
_CD_RIM = (0.0, 0.7, 0.0)
_CUP = (1.0, 1.0, 0.0)
_LESION_RGB = ((1.0, 1.0, 1.0), (1.0, 0.45, 0.7), (1.0, 0.55, 0.0))


def component_to_rgb(kind: str, comp_map: np.ndarray) -> np.ndarray:
    """Render a binary component map to the RGB image the codec consumes.

    An all-zero map renders to the all-zeros image exactly, so absent
    components encode to the codec's black latent.
    """
    comp_map = np.asarray(comp_map)
    h, w = comp_map.shape[:2]
    out = np.zeros((h, w, 3), np.float32)
    if kind == "AV":
        out[..., 0] = comp_map[..., 0]
        out[..., 2] = comp_map[..., 1]
    elif kind == "CD":
        rim = comp_map[..., 0] & ~comp_map[..., 1]
        for ch in range(3):
            out[..., ch] += _CD_RIM[ch] * rim
            out[..., ch] += _CUP[ch] * comp_map[..., 1]
    elif kind == "L":
        for cls in range(3):
            for ch in range(3):
                out[..., ch] += _LESION_RGB[cls][ch] * comp_map[..., cls]
        out = np.clip(out, 0.0, 1.0)
    else:
        raise ConfigError(f"unknown component kind {kind!r}")
    return out


class UIFlag(Enum):
    GUIDED = "GUIDED"
    NEUTRAL = "NEUTRAL"


@dataclass(frozen=True)
class UIState:
    av: UIFlag
    cd: UIFlag
    lesions: UIFlag

    def flags(self) -> tuple[UIFlag, UIFlag, UIFlag]:
        return (self.av, self.cd, self.lesions)


ALL_NEUTRAL = UIState(UIFlag.NEUTRAL, UIFlag.NEUTRAL, UIFlag.NEUTRAL)


@dataclass
class ComponentLatents:
    """Per-component codec latents plus presence flags (order AV, CD, L)."""

    latents: np.ndarray  # (3, 4, 16, 16) float32
    present: tuple  # (bool, bool, bool)


def encode_bundle(bundle: LayoutBundle, codec) -> ComponentLatents:
    """Encode each component's RGB rendering; absent ones get the black latent."""
    bundle.validate()
    black = codec.black_latent()
    latents = []
    present = []
    for kind in COMPONENT_KINDS:
        if bundle.is_present(kind):
            latents.append(codec.encode(component_to_rgb(kind, bundle.component(kind))))
            present.append(True)
        else:
            latents.append(black.copy())
            present.append(False)
    return ComponentLatents(latents=np.stack(latents).astype(np.float32), present=tuple(present))


def mask_components(
    comp: ComponentLatents,
    p_mask,
    rng: np.random.Generator,
    black_latent: np.ndarray,
) -> tuple[ComponentLatents, UIState]:
    """Independently replace present components by the black latent with
    their masking probability; absent components are neutral already and
    consume no randomness."""
    p_mask = tuple(float(p) for p in p_mask)
    if len(p_mask) != 3 or any(not 0.0 <= p <= 1.0 for p in p_mask):
        raise ConfigError(f"p_mask must be three probabilities in [0, 1], got {p_mask}")
    latents = comp.latents.copy()
    flags = []
    for i in range(3):
        if not comp.present[i]:
            flags.append(UIFlag.NEUTRAL)
            continue
        if rng.random() < p_mask[i]:
            latents[i] = black_latent
            flags.append(UIFlag.NEUTRAL)
        else:
            flags.append(UIFlag.GUIDED)
    return (
        ComponentLatents(latents=latents, present=comp.present),
        UIState(*flags),
    )


def patchify(latents: torch.Tensor) -> torch.Tensor:
    """(B, 4, 16, 16) -> (B, 64, 16) row-major patch grid, (c, py, px) order."""
    b, c, h, w = latents.shape
    if c != LATENT_CHANNELS or h != LATENT_HW or w != LATENT_HW:
        raise ShapeError(f"expected (B, {LATENT_CHANNELS}, {LATENT_HW}, {LATENT_HW}) latents, got {tuple(latents.shape)}")
    x = latents.reshape(b, c, TOKENS_PER_SIDE, PATCH, TOKENS_PER_SIDE, PATCH)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, N_COND, PATCH_DIM)


def unpatchify(tokens: torch.Tensor) -> torch.Tensor:
    """(B, 64, 16) -> (B, 4, 16, 16); exact inverse of patchify."""
    b = tokens.shape[0]
    if tokens.shape[1:] != (N_IMG, PATCH_DIM):
        raise ShapeError(f"expected (B, {N_IMG}, {PATCH_DIM}) tokens, got {tuple(tokens.shape)}")
    x = tokens.reshape(b, TOKENS_PER_SIDE, TOKENS_PER_SIDE, LATENT_CHANNELS, PATCH, PATCH)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, LATENT_CHANNELS, LATENT_HW, LATENT_HW)


class ProjectionHeads(nn.Module):
    """Dedicated linear patch projections per component, plus the image patch
    projection and the learned BOC / EOC / UI vectors (trained jointly with
    the denoiser)."""

    def __init__(self, d_model: int = 128):
        super().__init__()
        self.d_model = d_model
        self.v_emb = nn.Linear(PATCH_DIM, d_model)
        self.d_emb = nn.Linear(PATCH_DIM, d_model)
        self.l_emb = nn.Linear(PATCH_DIM, d_model)
        self.img_emb = nn.Linear(PATCH_DIM, d_model)
        self.boc = nn.Parameter(torch.empty(d_model))
        self.eoc = nn.Parameter(torch.empty(d_model))
        # per component: row 0 GUIDED, row 1 NEUTRAL
        self.ui = nn.Parameter(torch.empty(N_UI, 2, d_model))
        nn.init.normal_(self.boc, std=0.02)
        nn.init.normal_(self.eoc, std=0.02)
        nn.init.normal_(self.ui, std=0.02)

    def _head(self, kind: str) -> nn.Linear:
        try:
            return {"AV": self.v_emb, "CD": self.d_emb, "L": self.l_emb}[kind]
        except KeyError:
            raise ConfigError(f"unknown component kind {kind!r}") from None

    def embed_component_batch(self, kind: str, latents: torch.Tensor) -> torch.Tensor:
        return self._head(kind)(patchify(latents))

    def embed_component(self, kind: str, latent) -> torch.Tensor:
        """(4, 16, 16) component latent -> (64, d) token grid."""
        latent = torch.as_tensor(np.asarray(latent), dtype=self.boc.dtype)
        if latent.shape != (LATENT_CHANNELS, LATENT_HW, LATENT_HW):
            raise ShapeError(f"expected a ({LATENT_CHANNELS}, {LATENT_HW}, {LATENT_HW}) latent, got {tuple(latent.shape)}")
        return self.embed_component_batch(kind, latent[None])[0]

    def image_tokens(self, z: torch.Tensor) -> torch.Tensor:
        return self.img_emb(patchify(z))

    def ui_vector(self, kind: str, guided: bool) -> torch.Tensor:
        idx = COMPONENT_KINDS.index(kind)
        return self.ui[idx, 0 if guided else 1]

    def neutral_tokens(self, kind: str, black_latent) -> torch.Tensor:
        """Token grid for a neutralized component (cached by callers)."""
        return self.embed_component(kind, black_latent)


def sum_conditions(c_av: torch.Tensor, c_cd: torch.Tensor, c_l: torch.Tensor) -> torch.Tensor:
    """Elementwise sum of the three component token grids.

    The sum runs in float64 and rounds once: three float32 terms of similar
    magnitude add exactly in double precision, so any permutation of the
    summands produces a bit-identical result.
    """
    if not c_av.shape == c_cd.shape == c_l.shape:
        raise ShapeError(
            f"condition grids disagree: {tuple(c_av.shape)}, {tuple(c_cd.shape)}, {tuple(c_l.shape)}"
        )
    return (c_av.double() + c_cd.double() + c_l.double()).to(c_av.dtype)


@dataclass
class TokenSequence:
    """Ordered transformer input with per-token role labels."""

    vectors: torch.Tensor  # (SEQ_LEN, d)
    roles: tuple = ROLES

    def validate(self) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[0] != SEQ_LEN:
            raise StructureError(f"expected ({SEQ_LEN}, d) vectors, got {tuple(self.vectors.shape)}")
        if tuple(self.roles) != ROLES:
            raise StructureError("token roles out of order")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def assemble_batch(
    guided: torch.Tensor,  # (B, 3) bool
    c: torch.Tensor,  # (B, 64, d)
    z_t: torch.Tensor,  # (B, 4, 16, 16)
    heads: ProjectionHeads,
) -> torch.Tensor:
    b = c.shape[0]
    if c.shape[1] != N_COND or c.shape[2] != heads.d_model:
        raise ShapeError(f"expected (B, {N_COND}, {heads.d_model}) condition grid, got {tuple(c.shape)}")
    kind_idx = torch.arange(N_UI, device=c.device).expand(b, N_UI)
    ui = heads.ui[kind_idx, (~guided).long()]  # (B, 3, d)
    img = heads.image_tokens(z_t)
    boc = heads.boc.expand(b, 1, -1)
    eoc = heads.eoc.expand(b, 1, -1)
    return torch.cat([boc, ui, c, eoc, img], dim=1)


def assemble_sequence(ui: UIState, c: torch.Tensor, z_t, heads: ProjectionHeads) -> TokenSequence:
    """Emit [BOC, UI_AV, UI_CD, UI_L, c, EOC, image tokens] with role labels."""
    z = torch.as_tensor(np.asarray(z_t), dtype=c.dtype)
    guided = torch.tensor([[f is UIFlag.GUIDED for f in ui.flags()]])
    vectors = assemble_batch(guided, c[None], z[None], heads)[0]
    seq = TokenSequence(vectors=vectors)
    seq.validate()
    return seq
