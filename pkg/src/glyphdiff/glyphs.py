"""Synthetic glyph alphabets: procedural stroke-based shapes standing in for fonts.

Glyphs are polyline stroke sets in the unit square, rasterized with a
distance-based anti-aliased renderer so the same shape looks consistent
across font sizes. Alphabet generation retries shapes that would be
confusable under template correlation, so every script is OCR-separable by
construction.
"""

from __future__ import annotations

import json
import hashlib
import string
from dataclasses import dataclass, field

import numpy as np

SCRIPT_FORMAT_VERSION = 1

# printable codepoints handed out to scripts in order; overflow continues in
# the Unicode private use area
_CODE_POOL = [ord(c) for c in string.ascii_lowercase + string.ascii_uppercase + string.digits]
_CODE_POOL += list(range(0xE000, 0xE400))

SEPARABILITY_PX = 16
SEPARABILITY_NCC_MAX = 0.82
MAX_RESAMPLES = 60


@dataclass
class GlyphShape:
    code: int
    strokes: list[np.ndarray]  # each (k, 2), points in [0,1]^2
    stroke_width: float  # fraction of glyph height, in (0, 0.25]

    def __post_init__(self):
        self.strokes = [np.asarray(s, dtype=np.float64) for s in self.strokes]
        if not self.strokes:
            raise ValueError("glyph needs at least one stroke")
        if not (0.0 < self.stroke_width <= 0.25):
            raise ValueError(f"stroke_width {self.stroke_width} outside (0, 0.25]")
        for s in self.strokes:
            if s.ndim != 2 or s.shape[1] != 2 or np.any(s < 0.0) or np.any(s > 1.0):
                raise ValueError("stroke points must be (k,2) in the unit square")

    @property
    def char(self) -> str:
        return chr(self.code)


@dataclass
class ScriptDef:
    script_id: str
    glyphs: list[GlyphShape]
    _by_code: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.glyphs) < 2:
            raise ValueError("a script needs at least 2 glyphs")
        codes = [g.code for g in self.glyphs]
        if len(set(codes)) != len(codes):
            raise ValueError("glyph codes must be unique")
        self._by_code = {g.code: g for g in self.glyphs}

    @property
    def complexity(self) -> float:
        return float(np.mean([len(g.strokes) for g in self.glyphs]))

    @property
    def alphabet(self) -> str:
        return "".join(g.char for g in self.glyphs)

    def glyph(self, code: int) -> GlyphShape:
        if code not in self._by_code:
            raise KeyError(f"unknown glyph code {code} ({chr(code)!r}) in script {self.script_id}")
        return self._by_code[code]

    def content_hash(self) -> str:
        return hashlib.sha1(serialize_script(self).encode()).hexdigest()[:16]


def serialize_script(script: ScriptDef) -> str:
    d = {
        "version": SCRIPT_FORMAT_VERSION,
        "script_id": script.script_id,
        "glyphs": [
            {
                "code": g.code,
                "stroke_width": float(g.stroke_width),
                "strokes": [[[float(x), float(y)] for x, y in s] for s in g.strokes],
            }
            for g in script.glyphs
        ],
    }
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def deserialize_script(text: str) -> ScriptDef:
    d = json.loads(text)
    if d.get("version") != SCRIPT_FORMAT_VERSION:
        raise ValueError(f"unsupported script format version {d.get('version')}")
    glyphs = [
        GlyphShape(code=g["code"], strokes=[np.array(s) for s in g["strokes"]],
                   stroke_width=g["stroke_width"])
        for g in d["glyphs"]
    ]
    return ScriptDef(script_id=d["script_id"], glyphs=glyphs)


def save_script(script: ScriptDef, path) -> None:
    with open(path, "w") as f:
        f.write(serialize_script(script))


def load_script(path) -> ScriptDef:
    with open(path) as f:
        return deserialize_script(f.read())


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_render_cache: dict = {}


def render_glyph_bitmap(glyph: GlyphShape, px: int, cache_key: str | None = None) -> np.ndarray:
    """Rasterize one glyph into a px-by-px float bitmap in [0,1], anti-aliased.

    Coverage is computed from the distance of each pixel center to the stroke
    polylines, giving renders that are consistent across sizes.
    """
    if px < 1:
        raise ValueError("px must be >= 1")
    key = (cache_key, glyph.code, px) if cache_key else None
    if key is not None and key in _render_cache:
        return _render_cache[key]

    coords = (np.arange(px, dtype=np.float64) + 0.5) / px
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)  # (px*px, 2) in glyph coords

    half_w = 0.5 * glyph.stroke_width * px  # pixels
    ramp = 1.0  # 1-pixel anti-aliasing ramp
    dist = np.full(pts.shape[0], np.inf)
    for stroke in glyph.strokes:
        for a, b in zip(stroke[:-1], stroke[1:]):
            dist = np.minimum(dist, _seg_dist(pts, a, b) * px)
        if len(stroke) == 1:  # degenerate single-point stroke: a dot
            dist = np.minimum(dist, np.linalg.norm(pts - stroke[0], axis=1) * px)
    cov = np.clip(0.5 + (half_w - dist) / ramp, 0.0, 1.0)
    bmp = cov.reshape(px, px).astype(np.float32)
    if key is not None:
        _render_cache[key] = bmp
    return bmp


def _seg_dist(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(pts - a, axis=1)
    u = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
    proj = a + u[:, None] * ab
    return np.linalg.norm(pts - proj, axis=1)


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized cross-correlation of two equal-shape arrays; 0 if either is flat."""
    av = a.ravel().astype(np.float64) - a.mean()
    bv = b.ravel().astype(np.float64) - b.mean()
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(av @ bv / (na * nb))


# ---------------------------------------------------------------------------
# Alphabet synthesis
# ---------------------------------------------------------------------------


def _sample_glyph(rng: np.random.Generator, code: int, n_strokes: int) -> GlyphShape:
    # anchor lattice with jitter keeps strokes legible yet varied
    anchors = np.array([0.18, 0.5, 0.82])
    strokes = []
    for _ in range(n_strokes):
        n_pts = int(rng.integers(2, 4))
        idx = rng.choice(9, size=n_pts, replace=False)
        pts = np.stack([anchors[idx % 3], anchors[idx // 3]], axis=1)
        pts = pts + rng.uniform(-0.08, 0.08, size=pts.shape)
        strokes.append(np.clip(pts, 0.04, 0.96))
    width = float(rng.uniform(0.08, 0.13))
    return GlyphShape(code=code, strokes=strokes, stroke_width=width)


def synth_script(seed: int, n_glyphs: int, stroke_range: tuple[int, int] = (1, 4),
                 script_id: str = "S0", code_start: int = 0) -> ScriptDef:
    """Generate a deterministic, OCR-separable alphabet of procedural glyphs.

    code_start offsets into a shared printable codepoint pool so several
    scripts can coexist with disjoint characters.
    """
    if n_glyphs < 2:
        raise ValueError(f"n_glyphs must be >= 2, got {n_glyphs}")
    lo, hi = stroke_range
    if not (1 <= lo <= hi):
        raise ValueError(f"invalid stroke_range {stroke_range}")
    if code_start + n_glyphs > len(_CODE_POOL):
        raise ValueError("code pool exhausted")

    rng = np.random.default_rng(seed)
    glyphs: list[GlyphShape] = []
    templates: list[np.ndarray] = []
    for i in range(n_glyphs):
        code = _CODE_POOL[code_start + i]
        for attempt in range(MAX_RESAMPLES + 1):
            n_strokes = int(rng.integers(lo, hi + 1))
            g = _sample_glyph(rng, code, n_strokes)
            bmp = render_glyph_bitmap(g, SEPARABILITY_PX)
            if all(ncc(bmp, t) < SEPARABILITY_NCC_MAX for t in templates):
                glyphs.append(g)
                templates.append(bmp)
                break
        else:
            raise RuntimeError(
                f"degenerate alphabet: could not find a distinguishable shape for "
                f"glyph {i} of script {script_id} after {MAX_RESAMPLES} resamples"
            )
    return ScriptDef(script_id=script_id, glyphs=glyphs)


def make_scripts(n_scripts: int, n_glyphs: int, seed: int,
                 stroke_ranges: list[tuple[int, int]] | None = None) -> list[ScriptDef]:
    """Build disjoint-alphabet scripts; later scripts default to more complex strokes."""
    if stroke_ranges is None:
        stroke_ranges = [(1 + i, 3 + i) for i in range(n_scripts)]
    return [
        synth_script(seed + 1000 * i, n_glyphs, stroke_ranges[i],
                     script_id=f"S{i}", code_start=i * n_glyphs)
        for i in range(n_scripts)
    ]
