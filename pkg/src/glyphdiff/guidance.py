"""Guidance combinators: prompt CFG, image-conditioned CFG, the three-term
noise-disentangled variant, and the dynamic glyph-guidance weight schedule.

A GuidanceSession pre-encodes the prompt, the null prompt, the condition
features and the glyph-free features once, then serves per-step combined
noise predictions; the glyph-free features are never re-encoded across steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .model import GlyphDenoiser, GuidanceFeature
from .raster import ConditionImage


@dataclass
class GuidanceParams:
    omega_cfg: float = 7.5
    omega_ndg: float = 5.0
    A: float = 3.0
    alpha2: float = 3.0
    T: int = 200

    def __post_init__(self):
        if self.omega_cfg < 0 or self.omega_ndg < 0 or self.A < 0:
            raise ValueError("guidance weights must be >= 0")
        if self.alpha2 <= 0:
            raise ValueError("alpha2 must be > 0")


def cfg_combine(eps_uncond, eps_cond, omega_cfg: float):
    """eps_uncond + omega_cfg * (eps_cond - eps_uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch {eps_uncond.shape} vs {eps_cond.shape}")
    return eps_uncond + omega_cfg * (eps_cond - eps_uncond)


def dynamic_ndg(t: float, params: GuidanceParams) -> float:
    """Glyph weight ramping from omega_ndg at t=T to omega_ndg + A at t=0 along
    a half-cosine easing with exponent alpha2."""
    if not 0 <= t <= params.T:
        raise ValueError(f"t={t} outside [0, {params.T}]")
    ease = ((1.0 + math.cos(math.pi * (params.T - t) / params.T)) / 2.0) ** params.alpha2
    return params.omega_ndg + params.A * (1.0 - ease)


def ndcfg_combine(eps_np_img, eps_np_noimg, eps_p_img, omega_cfg: float, omega_ndg_t: float):
    """Three-term guidance: the glyph direction (image vs no-image under the
    null prompt) is amplified on top of prompt CFG around the image-conditioned
    baseline."""
    if not (eps_np_img.shape == eps_np_noimg.shape == eps_p_img.shape):
        raise ValueError(
            f"shape mismatch {eps_np_img.shape} / {eps_np_noimg.shape} / {eps_p_img.shape}"
        )
    return (
        eps_np_img
        + omega_ndg_t * (eps_np_img - eps_np_noimg)
        + omega_cfg * (eps_p_img - eps_np_img)
    )


class GuidanceSession:
    """Per-generation cache of prompt/condition encodings.

    captions: str or list[str]; cond: None (glyph-free), a ConditionImage, a
    list of them, or a pre-encoded GuidanceFeature. ndg=False gives the
    two-call image-conditioned CFG; ndg=True the three-call disentangled form.
    """

    def __init__(self, model: GlyphDenoiser, params: GuidanceParams, captions,
                 cond=None, latent_hw: tuple[int, int] | None = None,
                 use_dynamic: bool = False, ndg: bool = True, experts_active=()):
        self.model = model
        self.params = params
        self.use_dynamic = use_dynamic
        self.ndg = ndg
        if isinstance(captions, str):
            captions = [captions]
        self.batch = len(captions)
        with torch.no_grad():
            self.c_text = model.text.encode_batch(captions)
            self.c_null = model.text.null_embedding[None].expand(self.batch, -1)
            if cond is None:
                if latent_hw is None:
                    raise ValueError("latent_hw required when cond is None")
                pixels = torch.zeros(1, 3, *latent_hw)
                self.z_null = model.encode_condition(pixels, experts_active).repeat(self.batch)
                self.z_img = self.z_null
            else:
                if isinstance(cond, GuidanceFeature):
                    self.z_img = cond
                else:
                    if torch.is_tensor(cond) and cond.ndim == 4:
                        pixels = cond.to(torch.float32)
                    else:
                        conds = cond if isinstance(cond, list) else [cond]
                        pixels = torch.stack([
                            torch.as_tensor(c.pixels if isinstance(c, ConditionImage) else c,
                                            dtype=torch.float32)
                            for c in conds
                        ])
                    self.z_img = model.encode_condition(pixels, experts_active)
                    if self.z_img.batch == 1 and self.batch > 1:
                        self.z_img = self.z_img.repeat(self.batch)
                h, w = self.z_img.maps[0].shape[-2:]  # stage-0 maps are input-resolution
                zero = torch.zeros(1, 3, h, w)
                self.z_null = model.encode_condition(zero, experts_active).repeat(self.batch)

    def omega_ndg_at(self, t: float) -> float:
        return dynamic_ndg(t, self.params) if self.use_dynamic else self.params.omega_ndg

    def eps(self, z_t: torch.Tensor, t) -> torch.Tensor:
        """Combined noise prediction at step t (2 or 3 model calls)."""
        with torch.no_grad():
            eps_np_img = self.model.predict_eps(z_t, t, self.c_null, self.z_img)
            eps_p_img = self.model.predict_eps(z_t, t, self.c_text, self.z_img)
            if not self.ndg:
                return cfg_combine(eps_np_img, eps_p_img, self.params.omega_cfg)
            eps_np_noimg = self.model.predict_eps(z_t, t, self.c_null, self.z_null)
        return ndcfg_combine(eps_np_img, eps_np_noimg, eps_p_img,
                             self.params.omega_cfg, self.omega_ndg_at(float(t)))


def guided_eps(z_t: torch.Tensor, t, caption, cond, model: GlyphDenoiser,
               params: GuidanceParams, use_dynamic: bool = False,
               session: GuidanceSession | None = None) -> torch.Tensor:
    """One disentangled-guidance evaluation; pass a session to reuse cached
    encodings across steps."""
    if session is None:
        session = GuidanceSession(model, params, caption, cond,
                                  latent_hw=tuple(z_t.shape[-2:]), use_dynamic=use_dynamic)
    return session.eps(z_t, t)
