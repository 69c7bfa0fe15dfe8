"""Discrete noise schedules, forward noising, x0 reconstruction and DDIM steps.

All array ops are duck-typed: they work on numpy arrays and torch tensors
alike, so the analytic oracle (numpy) and the model pipelines (torch) share
one implementation. Timesteps are 1-indexed, t in [1, T]; t=0 is the clean
extension with alpha_bar = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DDPM_LINEAR = "ddpm_linear"
FLOW_SIGMA = "flow_sigma"

# DDPM convention at T=1000; scaled linearly for other T.
BETA_START_1000 = 1e-4
BETA_END_1000 = 0.02


@dataclass
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray | None = None  # flow variant only

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "beta": self.beta.tolist(),
            "sigma": None if self.sigma is None else self.sigma.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        beta = np.asarray(d["beta"], dtype=np.float64)
        sigma = None if d.get("sigma") is None else np.asarray(d["sigma"], dtype=np.float64)
        return cls(
            kind=d["kind"],
            T=int(d["T"]),
            beta=beta,
            alpha_bar=np.cumprod(1.0 - beta),
            sigma=sigma,
        )


def make_schedule(kind: str, T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear-beta schedule with alpha_bar_t = prod_{s<=t}(1 - beta_s)."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    if kind not in (DDPM_LINEAR, FLOW_SIGMA):
        raise ValueError(f"unknown schedule kind {kind!r}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    sigma = None
    if kind == FLOW_SIGMA:
        # noise level rises linearly to 1 at the terminal step
        sigma = np.linspace(1.0 / T, 1.0, T, dtype=np.float64)
    return NoiseSchedule(kind=kind, T=T, beta=beta, alpha_bar=alpha_bar, sigma=sigma)


def default_schedule(T: int = 200) -> NoiseSchedule:
    """DDPM beta range scaled linearly to T so the terminal marginal stays near-Gaussian."""
    scale = 1000.0 / T
    return make_schedule(DDPM_LINEAR, T, BETA_START_1000 * scale, BETA_END_1000 * scale)


def _check_t(sched: NoiseSchedule, t, lo: int = 0) -> None:
    tt = np.asarray(t)
    if tt.min() < lo or tt.max() > sched.T:
        raise ValueError(f"timestep {t} out of range [{lo}, {sched.T}]")


def alpha_bar_at(sched: NoiseSchedule, t):
    """alpha_bar_t as float64; t may be an int or an integer array (t=0 -> 1.0)."""
    _check_t(sched, t)
    padded = np.concatenate([[1.0], sched.alpha_bar])
    if np.isscalar(t) or getattr(t, "ndim", 0) == 0:
        return float(padded[int(t)])
    return padded[np.asarray(t, dtype=np.int64)]


def _coeff_like(value, t, z):
    """Broadcast a scalar-or-per-sample coefficient against z (numpy or torch)."""
    if np.isscalar(value):
        return value
    arr = np.asarray(value).reshape((-1,) + (1,) * (z.ndim - 1))
    if hasattr(z, "new_tensor"):  # torch tensor
        return z.new_tensor(arr)
    return arr.astype(z.dtype, copy=False)


def add_noise(z0, t, eps, sched: NoiseSchedule):
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps."""
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {eps.shape}")
    ab = alpha_bar_at(sched, t)
    a = _coeff_like(np.sqrt(ab), t, z0)
    b = _coeff_like(np.sqrt(1.0 - ab), t, z0)
    return a * z0 + b * eps


def renoise(z0_prime, t, noise, sched: NoiseSchedule):
    """Re-apply forward noising to a finished latent (same formula as add_noise)."""
    return add_noise(z0_prime, t, noise, sched)


def predict_x0(z_t, eps_hat, t, sched: NoiseSchedule):
    """Invert add_noise: x0 = (z_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)."""
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {z_t.shape} vs {eps_hat.shape}")
    ab = alpha_bar_at(sched, t)
    if np.min(ab) <= 0.0:
        raise ValueError("alpha_bar must be positive to reconstruct x0")
    a = _coeff_like(np.sqrt(ab), t, z_t)
    b = _coeff_like(np.sqrt(1.0 - ab), t, z_t)
    return (z_t - b * eps_hat) / a


def ddim_step(z_t, eps_hat, t, t_prev, sched: NoiseSchedule, eta: float = 0.0,
              noise=None, x0_clip: tuple[float, float] | None = None):
    """One DDIM update from t to t_prev (< t). eta=0 is fully deterministic."""
    if not t_prev < t:
        raise ValueError(f"t_prev must be < t, got t_prev={t_prev}, t={t}")
    _check_t(sched, t, lo=1)
    _check_t(sched, t_prev, lo=0)
    ab_t = alpha_bar_at(sched, t)
    ab_p = alpha_bar_at(sched, t_prev)
    x0 = predict_x0(z_t, eps_hat, t, sched)
    if x0_clip is not None:
        lo, hi = x0_clip
        x0 = x0.clip(lo, hi) if isinstance(x0, np.ndarray) else x0.clamp(lo, hi)
    var = 0.0
    if eta > 0.0:
        var = (eta ** 2) * (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)
    dir_coeff = np.sqrt(np.maximum(1.0 - ab_p - var, 0.0))
    a_p = _coeff_like(np.sqrt(ab_p), t_prev, z_t)
    d = _coeff_like(dir_coeff, t_prev, z_t)
    out = a_p * x0 + d * eps_hat
    if eta > 0.0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise draw")
        out = out + _coeff_like(np.sqrt(var), t_prev, z_t) * noise
    return out


def phi_weight(t, sched: NoiseSchedule, kind: str = "ddpm") -> float:
    """Timestep weight for the glyph loss: alpha_bar_t (ddpm) or (1 - sigma_t)^2 (flow)."""
    _check_t(sched, t)
    if kind == "ddpm":
        ab = alpha_bar_at(sched, t)
        return float(ab) if np.isscalar(ab) or getattr(ab, "ndim", 0) == 0 else ab
    if kind == "flow":
        if sched.sigma is None:
            raise ValueError("schedule has no sigma array; build it with kind=flow_sigma")
        padded = np.concatenate([[0.0], sched.sigma])
        if np.isscalar(t) or getattr(t, "ndim", 0) == 0:
            return float((1.0 - padded[int(t)]) ** 2)
        return (1.0 - padded[np.asarray(t, dtype=np.int64)]) ** 2
    raise ValueError(f"unknown phi kind {kind!r}")


def inference_timesteps(T: int, steps: int, sched: NoiseSchedule | None = None) -> list[int]:
    """Descending DDIM grid in [1, T-1]; the loop's final target is t=0.

    Steps are spaced uniformly in the noise angle arctan(sqrt(1-ab)/sqrt(ab)),
    which equalizes the per-step transport rotation and keeps the covariance
    bias of coarse deterministic sampling small.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    beta = sched.beta if sched is not None else default_schedule(T).beta
    alpha_bar = np.cumprod(1.0 - beta)
    theta = np.arctan2(np.sqrt(1.0 - alpha_bar), np.sqrt(alpha_bar))  # index t-1
    targets = np.linspace(theta[T - 2], theta[0], steps)
    ts = np.unique([int(np.argmin(np.abs(theta[: T - 1] - th))) + 1 for th in targets])[::-1]
    return [int(t) for t in ts]


# ---------------------------------------------------------------------------
# Latent codecs: pixel [0,1] images <-> latent arrays. The identity codec runs
# diffusion directly in (rescaled) pixel space; space-to-depth gives a f=4
# latent without any learned VAE.
# ---------------------------------------------------------------------------


class IdentityCodec:
    """Latents are images rescaled to [-1, 1]; downsample factor 1."""

    factor = 1
    channels = 3

    def encode(self, image):
        return image * 2.0 - 1.0

    def decode(self, z):
        return (z + 1.0) / 2.0

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        return (3, h, w)


class SpaceToDepthCodec:
    """Fixed invertible f=4 codec: 3xHxW -> 48x(H/4)x(W/4) block rearrangement."""

    factor = 4
    channels = 48

    def encode(self, image):
        x = image * 2.0 - 1.0
        c, h, w = x.shape[-3:]
        f = self.factor
        if h % f or w % f:
            raise ValueError(f"dims ({h},{w}) not divisible by {f}")
        lead = x.shape[:-3]
        x = x.reshape(lead + (c, h // f, f, w // f, f))
        if hasattr(x, "permute"):
            x = x.permute(*range(len(lead)), -5, -3, -1, -4, -2)
        else:
            x = np.moveaxis(x, (-4, -2), (-2, -1))
        return x.reshape(lead + (c * f * f, h // f, w // f))

    def decode(self, z):
        cf, hh, ww = z.shape[-3:]
        f = self.factor
        c = cf // (f * f)
        lead = z.shape[:-3]
        x = z.reshape(lead + (c, f, f, hh, ww))
        if hasattr(x, "permute"):
            x = x.permute(*range(len(lead)), -5, -2, -4, -1, -3).contiguous()
        else:
            x = np.moveaxis(x, (-2, -1), (-4, -2))
        x = x.reshape(lead + (c, hh * f, ww * f))
        return (x + 1.0) / 2.0

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        return (48, h // 4, w // 4)


def get_codec(name: str):
    if name == "identity":
        return IdentityCodec()
    if name == "space_to_depth":
        return SpaceToDepthCodec()
    raise ValueError(f"unknown codec {name!r}")
