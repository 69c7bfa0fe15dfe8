"""Edge extraction and the glyph-edge perceptual loss.

Two edge paths on purpose: a classical hard Canny (non-differentiable, used
for condition creation and evaluation) and a smooth surrogate (Gaussian blur
+ central-difference gradient magnitude squashed by tanh) that the training
loss backpropagates through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage as ndi

from .diffusion import NoiseSchedule, phi_weight
from .raster import GlyphLayout

SOFT_EDGE_SCALE = 0.25  # gradient magnitude giving tanh(1) response


@dataclass
class EdgeParams:
    gaussian_sigma: float = 1.0
    low_thresh: float = 0.1
    high_thresh: float = 0.3

    def __post_init__(self):
        if self.gaussian_sigma <= 0.0:
            raise ValueError("sigma must be > 0")
        if not (0.0 < self.low_thresh < self.high_thresh):
            raise ValueError(
                f"need 0 < low < high, got ({self.low_thresh}, {self.high_thresh})"
            )


def canny(image: np.ndarray, params: EdgeParams | None = None) -> np.ndarray:
    """Classical Canny: blur, Sobel, 4-direction NMS, double threshold, hysteresis.

    Returns a binary float32 (h, w) map. Thresholds apply to the unnormalized
    Sobel magnitude of the blurred image, the ndimage convention.
    """
    p = params or EdgeParams()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a grayscale (h, w) image, got shape {img.shape}")
    smoothed = ndi.gaussian_filter(img, p.gaussian_sigma, mode="nearest")
    gx = ndi.sobel(smoothed, axis=1, mode="reflect")
    gy = ndi.sobel(smoothed, axis=0, mode="reflect")
    mag = np.hypot(gx, gy)

    h, w = mag.shape
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    padded = np.pad(mag, 1, mode="constant")

    def nb(dy: int, dx: int) -> np.ndarray:
        return padded[1 + dy:h + 1 + dy, 1 + dx:w + 1 + dx]

    keep = np.zeros_like(mag, dtype=bool)
    d0 = (angle < 22.5) | (angle >= 157.5)
    d45 = (angle >= 22.5) & (angle < 67.5)
    d90 = (angle >= 67.5) & (angle < 112.5)
    d135 = (angle >= 112.5) & (angle < 157.5)
    keep |= d0 & (mag >= nb(0, 1)) & (mag >= nb(0, -1))
    keep |= d45 & (mag >= nb(1, 1)) & (mag >= nb(-1, -1))
    keep |= d90 & (mag >= nb(1, 0)) & (mag >= nb(-1, 0))
    keep |= d135 & (mag >= nb(1, -1)) & (mag >= nb(-1, 1))
    nms = np.where(keep, mag, 0.0)

    strong = nms >= p.high_thresh
    weak = (nms >= p.low_thresh) & ~strong
    labels, n = ndi.label(strong | weak, structure=np.ones((3, 3)))
    out = np.zeros_like(strong)
    if n:
        has_strong = ndi.maximum(strong, labels, index=np.arange(1, n + 1)).astype(bool)
        out = np.isin(labels, np.arange(1, n + 1)[has_strong])
    return out.astype(np.float32)


def _gauss_kernel1d(sigma: float, dtype, device) -> torch.Tensor:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def soft_edge(image, sigma: float = 1.0):
    """Differentiable edge response in [0,1]: Gaussian blur (kernel radius
    ceil(3*sigma), replicate borders), central-difference gradients, then
    tanh((sqrt(gx^2+gy^2+1e-12) - 1e-6) / SOFT_EDGE_SCALE).

    Accepts torch (keeps autograd) or numpy (h, w) images."""
    if sigma <= 0.0:
        raise ValueError("sigma must be > 0")
    is_np = isinstance(image, np.ndarray)
    x = torch.as_tensor(image, dtype=torch.float64) if is_np else image
    if x.ndim != 2:
        raise ValueError(f"expected a grayscale (h, w) image, got shape {tuple(x.shape)}")
    k = _gauss_kernel1d(sigma, x.dtype, x.device)
    r = (len(k) - 1) // 2
    b = x[None, None]
    b = F.pad(b, (r, r, 0, 0), mode="replicate")
    b = F.conv2d(b, k.view(1, 1, 1, -1))
    b = F.pad(b, (0, 0, r, r), mode="replicate")
    b = F.conv2d(b, k.view(1, 1, -1, 1))[0, 0]
    padded = F.pad(b[None, None], (1, 1, 1, 1), mode="replicate")[0, 0]
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    # smooth |grad| with an exact zero on constant inputs
    mag = torch.sqrt(gx * gx + gy * gy + 1e-12) - 1e-6
    out = torch.tanh(mag / SOFT_EDGE_SCALE)
    return out.numpy().astype(np.float32) if is_np else out


def crop_regions(image, layout: GlyphLayout) -> list:
    """Box-exact crops of the trailing (h, w) dims, one per layout line."""
    h, w = image.shape[-2:]
    crops = []
    for i, ln in enumerate(layout.lines):
        x, y, bw, bh = ln.box
        if x < 0 or y < 0 or x + bw > w or y + bh > h:
            raise ValueError(f"line {i}: box {ln.box} out of bounds for {w}x{h}")
        crops.append(image[..., y:y + bh, x:x + bw])
    return crops


def to_gray(image):
    """Luma grayscale over a leading/second channel dim; (h, w) passes through."""
    if image.ndim == 2:
        return image
    if image.ndim == 3:  # (3, h, w)
        return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    if image.ndim == 4:  # (b, 3, h, w)
        return 0.299 * image[:, 0] + 0.587 * image[:, 1] + 0.114 * image[:, 2]
    raise ValueError(f"cannot grayscale shape {tuple(image.shape)}")


def glyph_loss(x0_hat, x0, layout: GlyphLayout, t: int, sched: NoiseSchedule,
               phi_kind: str = "ddpm", sigma: float = 1.0, norm: str = "region"):
    """Glyph-edge perceptual loss: phi(t) times the squared soft-edge mismatch
    over the layout's text regions.

    norm="region" averages per-region MSEs (small boxes keep their weight);
    norm="image" normalizes the total squared error by the full image area.
    Returns (loss, no_text_flag); differentiable w.r.t. x0_hat.
    """
    if x0_hat.shape != x0.shape:
        raise ValueError(f"shape mismatch {tuple(x0_hat.shape)} vs {tuple(x0.shape)}")
    if norm not in ("region", "image"):
        raise ValueError(f"unknown norm {norm!r}")
    if layout.empty:
        zero = x0_hat.sum() * 0.0 if torch.is_tensor(x0_hat) else 0.0
        return zero, True
    phi = phi_weight(t, sched, phi_kind)
    gh = to_gray(x0_hat)
    gt = to_gray(x0)
    total = None
    area = 0
    for ch, cg in zip(crop_regions(gh, layout), crop_regions(gt, layout)):
        diff = soft_edge(ch, sigma) - soft_edge(cg, sigma)
        sq = (diff * diff).sum()
        term = sq / diff.numel() if norm == "region" else sq
        total = term if total is None else total + term
        area += diff.numel()
    if norm == "region":
        total = total / len(layout.lines)
    else:
        total = total / (gh.shape[-2] * gh.shape[-1])
    return phi * total, False
