"""Text layouts and their rasterization into glyph condition images.

Condition images are white-on-black: glyph pixels at 1.0, everything outside
the layout boxes exactly 0. Each character occupies a square font_px cell;
cells advance left to right inside the line's box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .glyphs import GlyphShape, ScriptDef, render_glyph_bitmap

MIN_FONT_PX = 6


@dataclass
class TextLine:
    text: str
    box: tuple[int, int, int, int]  # x, y, w, h in pixels
    font_px: int


@dataclass
class GlyphLayout:
    lines: list[TextLine] = field(default_factory=list)

    def __post_init__(self):
        self.lines = [
            TextLine(*ln) if not isinstance(ln, TextLine) else ln for ln in self.lines
        ]

    @property
    def empty(self) -> bool:
        return len(self.lines) == 0

    def to_dict(self) -> dict:
        return {
            "lines": [
                {"text": ln.text, "box": list(ln.box), "font_px": ln.font_px}
                for ln in self.lines
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GlyphLayout":
        return cls(lines=[
            TextLine(ln["text"], tuple(ln["box"]), ln["font_px"]) for ln in d["lines"]
        ])


@dataclass
class ConditionImage:
    pixels: np.ndarray  # (3, h, w) float32 in [0,1]
    layout: GlyphLayout

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape


def _boxes_overlap(a, b) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def validate_layout(layout: GlyphLayout, h: int, w: int) -> None:
    for i, ln in enumerate(layout.lines):
        x, y, bw, bh = ln.box
        if ln.font_px < MIN_FONT_PX:
            raise ValueError(f"line {i}: font_px {ln.font_px} below minimum {MIN_FONT_PX}")
        if x < 0 or y < 0 or x + bw > w or y + bh > h:
            raise ValueError(f"line {i}: box {ln.box} overflows {w}x{h} canvas")
        if len(ln.text) * ln.font_px > bw or ln.font_px > bh:
            raise ValueError(f"line {i}: text {ln.text!r} at {ln.font_px}px overflows box {ln.box}")
    for i in range(len(layout.lines)):
        for j in range(i + 1, len(layout.lines)):
            if _boxes_overlap(layout.lines[i].box, layout.lines[j].box):
                raise ValueError(f"lines {i} and {j} have overlapping boxes")


def render_layout_gray(layout: GlyphLayout, script: ScriptDef, h: int, w: int) -> np.ndarray:
    """Single-channel render of the layout; 0 outside boxes, anti-aliased strokes."""
    validate_layout(layout, h, w)
    canvas = np.zeros((h, w), dtype=np.float32)
    key = script.content_hash()
    for ln in layout.lines:
        x, y, bw, bh = ln.box
        y0 = y + (bh - ln.font_px) // 2
        for i, ch in enumerate(ln.text):
            glyph = script.glyph(ord(ch))
            bmp = render_glyph_bitmap(glyph, ln.font_px, cache_key=key)
            x0 = x + i * ln.font_px
            region = canvas[y0:y0 + ln.font_px, x0:x0 + ln.font_px]
            np.maximum(region, bmp, out=region)
    return canvas


def rasterize(layout: GlyphLayout, script: ScriptDef, h: int, w: int) -> ConditionImage:
    """Rasterize a layout into a 3-channel white-on-black condition image."""
    gray = render_layout_gray(layout, script, h, w)
    return ConditionImage(pixels=np.repeat(gray[None], 3, axis=0), layout=layout)


def empty_condition(h: int, w: int) -> ConditionImage:
    if h < 1 or w < 1:
        raise ValueError(f"invalid dims ({h}, {w})")
    return ConditionImage(pixels=np.zeros((3, h, w), dtype=np.float32),
                          layout=GlyphLayout(lines=[]))


def downscale_area(img: np.ndarray, factor: int) -> np.ndarray:
    """Area-average downscale of the two trailing dims by an integer factor."""
    h, w = img.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"dims ({h},{w}) not divisible by {factor}")
    shaped = img.reshape(img.shape[:-2] + (h // factor, factor, w // factor, factor))
    return shaped.mean(axis=(-3, -1))
