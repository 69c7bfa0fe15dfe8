"""Toy OCR by template matching plus text/edge fidelity metrics.

The OCR exploits that generation is layout-conditioned: boxes and font sizes
are known, so recognition is a per-cell normalized cross-correlation against
rendered glyph templates, no detection stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .edges import EdgeParams, canny, to_gray
from .glyphs import ScriptDef, render_glyph_bitmap
from .raster import ConditionImage, GlyphLayout

OCR_NCC_THRESHOLD = 0.4

# edge-IoU defaults tuned so glyph edges (contrast >= 0.4 by dataset
# construction) always fire while smooth-background gradients do not
IOU_EDGE_PARAMS = EdgeParams(gaussian_sigma=0.7, low_thresh=0.2, high_thresh=0.6)


def otsu_threshold(values: np.ndarray) -> float:
    """Otsu's threshold on values in [0,1]; 0.5 if the region is flat."""
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0.0, 1.0)
    hist, edges = np.histogram(v, bins=256, range=(0.0, 1.0))
    if hist.max() == hist.sum():
        return 0.5
    p = hist.astype(np.float64) / hist.sum()
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_t = mu[-1]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros_like(w0)
    between[valid] = (mu_t * w0[valid] - mu[valid]) ** 2 / (w0[valid] * w1[valid])
    best = np.flatnonzero(between == between.max())
    return float(centers[best].mean())  # midpoint of tied maxima


@dataclass
class OcrLine:
    predicted: str
    scores: list[float]
    match: bool


@dataclass
class OcrResult:
    lines: list[OcrLine] = field(default_factory=list)

    @property
    def predicted_texts(self) -> list[str]:
        return [ln.predicted for ln in self.lines]


_template_cache: dict = {}


def _templates(script: ScriptDef, px: int) -> tuple[np.ndarray, list[int]]:
    """Standardized, binarized glyph templates flattened for batched NCC."""
    key = (script.content_hash(), px)
    if key in _template_cache:
        return _template_cache[key]
    codes = [g.code for g in script.glyphs]
    mats = []
    for g in script.glyphs:
        t = (render_glyph_bitmap(g, px, cache_key=script.content_hash()) > 0.5).astype(np.float64)
        t = t.ravel() - t.mean()
        n = np.linalg.norm(t)
        mats.append(t / n if n > 0 else t)
    out = (np.stack(mats), codes)
    _template_cache[key] = out
    return out


def template_ocr(image: np.ndarray, layout: GlyphLayout, script: ScriptDef,
                 threshold: float = OCR_NCC_THRESHOLD) -> OcrResult:
    """Read each layout line from the image by per-cell template correlation.

    Cells below the correlation threshold read as blank and are dropped, so a
    line's prediction never exceeds its box capacity.
    """
    gray = to_gray(np.asarray(image))
    h, w = gray.shape
    templates, codes = None, None
    result = OcrResult()
    for ln in layout.lines:
        x, y, bw, bh = ln.box
        if x < 0 or y < 0 or x + bw > w or y + bh > h:
            raise ValueError(f"box {ln.box} out of bounds for {w}x{h}")
        px = ln.font_px
        templates, codes = _templates(script, px)
        y0 = y + (bh - px) // 2
        region = gray[y:y + bh, x:x + bw]
        thr = otsu_threshold(region)
        capacity = bw // px
        chars: list[str] = []
        scores: list[float] = []
        for i in range(capacity):
            cell = gray[y0:y0 + px, x + i * px:x + (i + 1) * px]
            b = (cell > thr).astype(np.float64).ravel()
            b = b - b.mean()
            n = np.linalg.norm(b)
            if n == 0.0:
                scores.append(0.0)
                continue
            corr = templates @ (b / n)
            k = int(corr.argmax())
            scores.append(float(corr[k]))
            if corr[k] >= threshold:
                chars.append(chr(codes[k]))
        pred = "".join(chars)
        result.lines.append(OcrLine(predicted=pred, scores=scores, match=pred == ln.text))
    return result


def levenshtein(a: str, b: str) -> int:
    """Iterative two-row edit distance."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def accuracy(pred: str, gt: str) -> float:
    """Positional character accuracy against gt; extra characters earn nothing."""
    if not gt:
        raise ValueError("ground truth must be non-empty")
    hits = sum(p == g for p, g in zip(pred, gt))
    return hits / len(gt)


def ned(pred: str, gt: str) -> float:
    """Normalized edit-distance similarity, 1 - lev/max(len). Both empty -> 1.0."""
    if not pred and not gt:
        return 1.0
    return 1.0 - levenshtein(pred, gt) / max(len(pred), len(gt))


def _boxes_mask(layout: GlyphLayout, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    for ln in layout.lines:
        x, y, bw, bh = ln.box
        mask[y:y + bh, x:x + bw] = True
    return mask


def _normalize_crop(crop: np.ndarray) -> np.ndarray:
    """Stretch a box crop to full range so edge detectability measures glyph
    structure rather than rendering contrast; near-flat crops pass through."""
    lo, hi = np.quantile(crop, [0.005, 0.995])
    if hi - lo < 0.08:
        return crop
    return np.clip((crop - lo) / (hi - lo), 0.0, 1.0)


def edge_iou(gen_image: np.ndarray, cond: ConditionImage,
             params: EdgeParams | None = None, tol_px: int = 1) -> float:
    """IoU between Canny edges of the generated image inside the layout boxes
    and Canny edges of the condition image, with a small dilation tolerance.

    Crops are contrast-normalized per box before edge extraction. Returns nan
    when the layout is empty (undefined). Symmetric in the two edge sets; 1.0
    when both are empty but the layout is not.
    """
    if cond.layout.empty:
        return float("nan")
    g = to_gray(np.asarray(gen_image))
    c = to_gray(cond.pixels)
    if g.shape != c.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {c.shape}")
    p = params or IOU_EDGE_PARAMS
    st = np.ones((2 * tol_px + 1, 2 * tol_px + 1), dtype=bool)
    inter = union = 0
    for ln in cond.layout.lines:
        x, y, bw, bh = ln.box
        a = canny(_normalize_crop(g[y:y + bh, x:x + bw]), p).astype(bool)
        b = canny(_normalize_crop(c[y:y + bh, x:x + bw]), p).astype(bool)
        union += (a | b).sum()
        if tol_px > 0:
            da = ndi.binary_dilation(a, st)
            db = ndi.binary_dilation(b, st)
            inter += ((a & db) | (b & da)).sum()
        else:
            inter += (a & b).sum()
    if union == 0:
        return 1.0
    return float(inter / union)


def bootstrap_ci(values: np.ndarray, n_boot: int = 10_000, alpha: float = 0.05,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap CI for the mean of values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to bootstrap")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(n_boot, v.size))
    means = v[idx].mean(axis=1)
    lo, hi = np.quantile(means, [alpha / 2, 1.0 - alpha / 2])
    return float(lo), float(hi)
