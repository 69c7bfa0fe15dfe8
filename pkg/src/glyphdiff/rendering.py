"""Two-stage rendering with background re-noising, and the patch-based
small-text pipeline: latent upscaling, shifted cropping, per-patch guided
denoising, partition-of-unity fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import NoiseSchedule, ddim_step, inference_timesteps, renoise
from .guidance import GuidanceParams, GuidanceSession
from .model import GlyphDenoiser
from .raster import ConditionImage

X0_CLIP = (-1.0, 1.0)  # image latents live in [-1,1]; stabilizes strong guidance


@dataclass
class BlendSchedule:
    alpha1: float = 3.0
    T: int = 200

    def __post_init__(self):
        if self.alpha1 <= 0:
            raise ValueError("alpha1 must be > 0")


def blend_coeff(t: float, sched: BlendSchedule) -> float:
    """Half-cosine easing to the alpha1 power: 1 at t=T decaying to 0 at t=0."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T}]")
    return ((1.0 + math.cos(math.pi * (sched.T - t) / sched.T)) / 2.0) ** sched.alpha1


def blend_latents(z_bg_t, z_t, c1: float):
    """Convex combination c1 * background + (1 - c1) * current."""
    if z_bg_t.shape != z_t.shape:
        raise ValueError(f"shape mismatch {z_bg_t.shape} vs {z_t.shape}")
    if not 0.0 <= c1 <= 1.0:
        raise ValueError(f"c1={c1} outside [0,1]")
    return c1 * z_bg_t + (1.0 - c1) * z_t


def upscale_latent(z: torch.Tensor, factor: int, method: str = "bicubic") -> torch.Tensor:
    """Spatial interpolation of the trailing dims by 2x or 4x."""
    if factor not in (2, 4):
        raise ValueError(f"unsupported factor {factor}")
    if method not in ("bicubic", "bilinear"):
        raise ValueError(f"unsupported method {method!r}")
    x = z if z.ndim == 4 else z[None]
    out = torch.nn.functional.interpolate(
        x, scale_factor=factor, mode=method, align_corners=True
    )
    return out if z.ndim == 4 else out[0]


# ---------------------------------------------------------------------------
# Shifted cropping and fusion
# ---------------------------------------------------------------------------


def axis_positions(canvas: int, patch: int, stride: int) -> list[int]:
    """Crop offsets along one axis: stride multiples, last clamped to the border."""
    if patch > canvas:
        raise ValueError(f"patch {patch} exceeds canvas {canvas}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    last = canvas - patch
    pos = [k * stride for k in range(math.ceil(last / stride))] if last > 0 else []
    pos.append(last)
    return pos


def _cosine_window(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * (i + 0.5) / n)  # strictly positive


@dataclass
class PatchLayout:
    patch_h: int
    patch_w: int
    stride_h: int
    stride_w: int
    positions: list[tuple[int, int]]
    canvas_hw: tuple[int, int]
    window: np.ndarray = field(repr=False)  # (patch_h, patch_w) float64
    norm: np.ndarray = field(repr=False)    # (H, W) sum of windows, float64
    norm_windows: list = field(repr=False, default_factory=list)  # per-patch window/norm

    @property
    def n_patches(self) -> int:
        return len(self.positions)

    def weight_masks(self) -> np.ndarray:
        """(N, H, W) normalized fusion weights; sums to 1 at every pixel."""
        H, W = self.canvas_hw
        out = np.zeros((self.n_patches, H, W))
        for n, (y, x) in enumerate(self.positions):
            out[n, y:y + self.patch_h, x:x + self.patch_w] = self.norm_windows[n]
        return out


def shifted_crop(Z: torch.Tensor, patch, stride, window: str = "cosine"):
    """Crop overlapping patches at stride multiples (last position clamped to
    the border). Returns (PatchLayout, list of patch tensors)."""
    ph, pw = (patch, patch) if isinstance(patch, int) else patch
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    H, W = Z.shape[-2:]
    ys = axis_positions(H, ph, sh)
    xs = axis_positions(W, pw, sw)
    positions = [(y, x) for y in ys for x in xs]
    if window == "cosine":
        win = np.outer(_cosine_window(ph), _cosine_window(pw))
    elif window == "uniform":
        win = np.ones((ph, pw))
    else:
        raise ValueError(f"unknown window {window!r}")
    norm = np.zeros((H, W))
    for y, x in positions:
        norm[y:y + ph, x:x + pw] += win
    if np.any(norm == 0.0):
        raise ValueError("patch positions leave uncovered pixels")
    norm_windows = [win / norm[y:y + ph, x:x + pw] for y, x in positions]
    layout = PatchLayout(ph, pw, sh, sw, positions, (H, W), win, norm, norm_windows)
    patches = [Z[..., y:y + ph, x:x + pw] for y, x in positions]
    return layout, patches


def fuse_patches(patches: list, layout: PatchLayout):
    """Partition-of-unity weighted blend; accumulation is row-major by patch
    index for exact reproducibility. A single full-canvas patch passes through
    bit-exactly (its normalized window is exactly 1)."""
    if len(patches) != layout.n_patches:
        raise ValueError(f"got {len(patches)} patches for {layout.n_patches} positions")
    H, W = layout.canvas_hw
    ref = patches[0]
    acc = ref.new_zeros(ref.shape[:-2] + (H, W))
    for p, (y, x), nw in zip(patches, layout.positions, layout.norm_windows):
        if p.shape[-2:] != (layout.patch_h, layout.patch_w):
            raise ValueError(f"patch shape {p.shape[-2:]} does not match layout")
        acc[..., y:y + layout.patch_h, x:x + layout.patch_w] += p * torch.as_tensor(nw, dtype=ref.dtype)
    return acc


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


def _as_list(x):
    return x if isinstance(x, list) else [x]


def _row_generators(seed, n: int) -> list[torch.Generator]:
    """One generator per batch row, so a row's noise sequence depends only on
    its own seed, never on batch composition."""
    seeds = seed if isinstance(seed, (list, tuple)) else [int(seed) + i for i in range(n)]
    if len(seeds) != n:
        raise ValueError(f"need {n} seeds, got {len(seeds)}")
    return [torch.Generator().manual_seed(int(s)) for s in seeds]


def _randn_rows(gens: list[torch.Generator], row_shape: tuple) -> torch.Tensor:
    return torch.stack([torch.randn(row_shape, generator=g) for g in gens])


def _ddim_loop(z: torch.Tensor, session: GuidanceSession, sched: NoiseSchedule,
               steps: int, trace: list | None = None) -> torch.Tensor:
    ts = inference_timesteps(sched.T, steps, sched)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = session.eps(z, t)
        if trace is not None:
            trace.append((t, session.omega_ndg_at(float(t)) if session.ndg else 0.0))
        z = ddim_step(z, eps, t, t_prev, sched, x0_clip=X0_CLIP)
    return z


def generate(captions, conds, model: GlyphDenoiser, gparams: GuidanceParams,
             sched: NoiseSchedule, steps: int, seed: int, latent_hw: tuple[int, int],
             mode: str = "ndcfg", codec=None, experts_active=(),
             trace: list | None = None) -> torch.Tensor:
    """Single-stage sampling. mode 'cfg' is two-call image-conditioned CFG;
    'ndcfg' the three-call disentangled form with constant glyph weight."""
    captions = _as_list(captions)
    gens = _row_generators(seed, len(captions))
    c = model.cfg.channels
    z = _randn_rows(gens, (c, *latent_hw))
    session = GuidanceSession(model, gparams, captions, conds, latent_hw=latent_hw,
                              ndg=(mode == "ndcfg"), use_dynamic=False,
                              experts_active=experts_active)
    z0 = _ddim_loop(z, session, sched, steps, trace)
    return codec.decode(z0) if codec is not None else z0


def two_stage_generate(captions, conds, model: GlyphDenoiser, gparams: GuidanceParams,
                       bsched: BlendSchedule, sched: NoiseSchedule, steps: int, seed: int,
                       latent_hw: tuple[int, int], codec=None, experts_active=(),
                       fresh_noise: bool = False, use_dynamic: bool = True,
                       trace: list | None = None) -> torch.Tensor:
    """Background-first rendering: a prompt-only stage yields z'_0; the second
    stage blends re-noised background latents into the trajectory (one fixed
    noise draw per run) and denoises with dynamically weighted glyph guidance."""
    captions = _as_list(captions)
    gens = _row_generators(seed, len(captions))
    c = model.cfg.channels
    row_shape = (c, *latent_hw)

    # stage 1: prompt-only CFG, no image condition
    z = _randn_rows(gens, row_shape)
    s1 = GuidanceSession(model, gparams, captions, None, latent_hw=latent_hw, ndg=False)
    z0_bg = _ddim_loop(z, s1, sched, steps)

    # stage 2: fresh trajectory with per-step background blending
    z = _randn_rows(gens, row_shape)
    eps_fixed = _randn_rows(gens, row_shape)
    s2 = GuidanceSession(model, gparams, captions, conds, latent_hw=latent_hw,
                         ndg=True, use_dynamic=use_dynamic, experts_active=experts_active)
    ts = inference_timesteps(sched.T, steps, sched)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        if fresh_noise:
            eps_fixed = _randn_rows(gens, row_shape)
        z_bg = renoise(z0_bg, t, eps_fixed, sched)
        z = blend_latents(z_bg, z, blend_coeff(t, bsched))
        eps = s2.eps(z, t)
        if trace is not None:
            trace.append((t, s2.omega_ndg_at(float(t))))
        z = ddim_step(z, eps, t, t_prev, sched, x0_clip=X0_CLIP)
    return codec.decode(z) if codec is not None else z


def small_text_generate(captions, conds_hi, model: GlyphDenoiser, gparams: GuidanceParams,
                        bsched: BlendSchedule, sched: NoiseSchedule, patch, stride,
                        steps: int, seed: int, base_hw: tuple[int, int], codec=None,
                        experts_active=(), upscale_method: str = "bicubic",
                        trace: list | None = None) -> torch.Tensor:
    """High-resolution patch-based rendering: stage 1 at base resolution, its
    latent upscaled as the background; each step crops overlapping patches of
    the trajectory, the re-noised background and the condition features,
    blends, denoises each patch with disentangled guidance and fuses."""
    captions = _as_list(captions)
    conds_list = _as_list(conds_hi)
    hi_hw = conds_list[0].pixels.shape[-2:]
    if hi_hw[0] < base_hw[0] or hi_hw[1] < base_hw[1]:
        raise ValueError(f"condition {hi_hw} below base resolution {base_hw}")
    if hi_hw[0] % base_hw[0] or hi_hw[0] // base_hw[0] != hi_hw[1] // base_hw[1]:
        raise ValueError(f"condition {hi_hw} is not an integer multiple of base {base_hw}")
    factor = hi_hw[0] // base_hw[0]
    gens = _row_generators(seed, len(captions))
    c = model.cfg.channels
    B = len(captions)

    # stage 1 at base resolution, prompt only
    z = _randn_rows(gens, (c, *base_hw))
    s1 = GuidanceSession(model, gparams, captions, None, latent_hw=base_hw, ndg=False)
    z0_bg = _ddim_loop(z, s1, sched, steps)
    Z0_bg = upscale_latent(z0_bg, factor, upscale_method) if factor > 1 else z0_bg

    Z = _randn_rows(gens, (c, *hi_hw))
    eps_fixed = _randn_rows(gens, (c, *hi_hw))

    cond_pixels = torch.stack([
        torch.as_tensor(cd.pixels, dtype=torch.float32) for cd in conds_list
    ])
    if cond_pixels.shape[0] == 1 and B > 1:
        cond_pixels = cond_pixels.expand(B, -1, -1, -1)
    layout, cond_patches = shifted_crop(cond_pixels, patch, stride)
    sessions = [
        GuidanceSession(model, gparams, captions, cp, ndg=True, use_dynamic=True,
                        experts_active=experts_active)
        for cp in cond_patches
    ]

    ts = inference_timesteps(sched.T, steps, sched)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        Z_bg = renoise(Z0_bg, t, eps_fixed, sched)
        c1 = blend_coeff(t, bsched)
        _, z_patches = shifted_crop(Z, patch, stride)
        _, bg_patches = shifted_crop(Z_bg, patch, stride)
        if trace is not None:
            trace.append((t, sessions[0].omega_ndg_at(float(t))))
        stepped = []
        for zp, bp, ses in zip(z_patches, bg_patches, sessions):
            zp = blend_latents(bp, zp, c1)
            eps = ses.eps(zp, t)
            stepped.append(ddim_step(zp, eps, t, t_prev, sched, x0_clip=X0_CLIP))
        Z = fuse_patches(stepped, layout)
    return codec.decode(Z) if codec is not None else Z
