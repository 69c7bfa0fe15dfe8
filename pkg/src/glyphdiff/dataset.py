"""Synthetic scene+text datasets and their on-disk layout.

Backgrounds are seeded procedural scenes (gradient plus soft shapes) kept
below 0.6 intensity so white composited text always contrasts. Every sample
is a pure function of (seed, index), so generation shards deterministically.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage as ndi

from .edges import EdgeParams, canny, to_gray
from .glyphs import ScriptDef, load_script, save_script
from .raster import ConditionImage, GlyphLayout, TextLine, rasterize

DATASET_FORMAT_VERSION = 1
BG_MAX_INTENSITY = 0.6


@dataclass
class DatasetSample:
    image: np.ndarray  # (3, h, w) float32 in [0,1]
    caption: str
    layout: GlyphLayout
    script_ids: list[str]
    condition: np.ndarray  # (3, h, w) float32, the rasterized glyph map
    small_text: bool = False


def caption_for(texts: list[str]) -> str:
    if not texts:
        return "a scene"
    parts = [f'the text "{t}"' for t in texts]
    return "a scene with " + " and ".join(parts)


def procedural_background(h: int, w: int, rng: np.random.Generator,
                          n_shapes: tuple[int, int] = (2, 4),
                          feather: float = 0.8, blur: float = 0.9) -> np.ndarray:
    """Seeded gradient + soft shapes, clipped to [0.02, 0.6].

    The defaults feather and blur the scene so text edges dominate the in-box
    Canny response; the edge-pretraining path uses crisp shapes instead.
    """
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    c0 = rng.uniform(0.05, 0.55, size=3)
    c1 = rng.uniform(0.05, 0.55, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy + 1.0) / 2.0
    img = c0[:, None, None] + ramp[None] * (c1 - c0)[:, None, None]
    for _ in range(int(rng.integers(n_shapes[0], n_shapes[1] + 1))):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        ry, rx = rng.uniform(0.14, 0.38, size=2)
        d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        alpha = np.clip(feather * (1.0 - d), 0.0, 1.0) * rng.uniform(0.3, 0.8)
        color = rng.uniform(0.05, 0.55, size=3)
        img = img * (1 - alpha[None]) + color[:, None, None] * alpha[None]
    if blur > 0:
        img = ndi.gaussian_filter(img, (0, blur, blur))
    return np.clip(img, 0.02, BG_MAX_INTENSITY).astype(np.float32)


def composite_text(background: np.ndarray, condition: np.ndarray) -> np.ndarray:
    """White text composited by the condition's anti-aliased coverage."""
    alpha = condition[:1]
    return (background * (1.0 - alpha) + alpha).astype(np.float32)


def _sample_layout(rng: np.random.Generator, h: int, w: int, alphabet: str,
                   small: bool, lines_range: tuple[int, int],
                   text_len: tuple[int, int], font_range: tuple[int, int],
                   small_font: tuple[int, int]) -> GlyphLayout:
    fonts = small_font if small else font_range
    n_lines = int(rng.integers(lines_range[0], lines_range[1] + 1))
    lines: list[TextLine] = []
    for _ in range(n_lines):
        font = int(rng.integers(fonts[0], fonts[1] + 1))
        max_chars = max(1, min(text_len[1], (w - 2) // font))
        k = int(rng.integers(min(text_len[0], max_chars), max_chars + 1))
        text = "".join(rng.choice(list(alphabet), size=k))
        bw, bh = k * font, font
        for _attempt in range(20):
            x = int(rng.integers(0, w - bw + 1))
            y = int(rng.integers(0, h - bh + 1))
            box = (x, y, bw, bh)
            if all(not _overlap(box, ln.box) for ln in lines):
                lines.append(TextLine(text, box, font))
                break
        # placement failure just drops the line; at least one line is retried
    if not lines:
        font = fonts[0]
        text = "".join(rng.choice(list(alphabet), size=2))
        lines.append(TextLine(text, (0, 0, 2 * font, font), font))
    return GlyphLayout(lines=lines)


def _overlap(a, b) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def synth_dataset(scripts: list[ScriptDef], n: int, h: int, w: int,
                  small_text_fraction: float, seed: int,
                  script_weights: list[float] | None = None,
                  lines_range: tuple[int, int] = (1, 2),
                  text_len: tuple[int, int] = (2, 4),
                  font_range: tuple[int, int] = (14, 24),
                  small_font: tuple[int, int] = (6, 12)) -> list[DatasetSample]:
    """Generate n annotated scene+text samples.

    Exactly round(n * small_text_fraction) samples use small fonts, chosen by
    a seeded permutation. script_weights biases the per-sample script draw
    (the long-tail frequency axis).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not (0.0 <= small_text_fraction <= 1.0):
        raise ValueError(f"small_text_fraction {small_text_fraction} outside [0,1]")
    weights = np.asarray(script_weights if script_weights is not None
                         else [1.0] * len(scripts), dtype=np.float64)
    if len(weights) != len(scripts) or np.any(weights < 0) or weights.sum() == 0:
        raise ValueError("bad script_weights")
    weights = weights / weights.sum()

    n_small = int(round(n * small_text_fraction))
    small_idx = set(np.random.default_rng(seed).permutation(n)[:n_small].tolist())

    samples = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        script = scripts[int(rng.choice(len(scripts), p=weights))]
        small = i in small_idx
        layout = _sample_layout(rng, h, w, script.alphabet, small,
                                lines_range, text_len, font_range, small_font)
        cond = rasterize(layout, script, h, w)
        bg = procedural_background(h, w, rng)
        img = composite_text(bg, cond.pixels)
        caption = caption_for([ln.text for ln in layout.lines])
        samples.append(DatasetSample(
            image=img, caption=caption, layout=layout,
            script_ids=[script.script_id] * len(layout.lines),
            condition=cond.pixels, small_text=small,
        ))
    return samples


def synth_shape_dataset(n: int, h: int, w: int, seed: int,
                        edge_params: EdgeParams | None = None) -> list[DatasetSample]:
    """Text-free scenes conditioned on their own Canny edges, for the
    edge-conditioning pretraining phase."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = []
    for i in range(n):
        # low-contrast scenes can have no edges at all; retry a few draws
        for retry in range(5):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(i, 1, retry)))
            img = procedural_background(h, w, rng, n_shapes=(3, 6), feather=3.0, blur=0.0)
            edges = canny(to_gray(img), edge_params)
            if edges.sum() > 0:
                break
        cond = np.repeat(edges[None], 3, axis=0).astype(np.float32)
        samples.append(DatasetSample(
            image=img, caption="a scene with shapes", layout=GlyphLayout(lines=[]),
            script_ids=[], condition=cond, small_text=False,
        ))
    return samples


# ---------------------------------------------------------------------------
# Persistence: images/NNNN.png, conditions/NNNN.png, meta.jsonl, scripts/*.json
# ---------------------------------------------------------------------------


def _to_png(arr: np.ndarray, path: Path) -> None:
    u8 = np.clip(np.rint(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)


def _from_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def dataset_hash(meta_lines: list[str]) -> str:
    return hashlib.sha256("\n".join(meta_lines).encode()).hexdigest()[:16]


def save_dataset(samples: list[DatasetSample], scripts: list[ScriptDef], out_dir) -> str:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "conditions").mkdir(exist_ok=True)
    (out / "scripts").mkdir(exist_ok=True)
    meta_lines = []
    for i, s in enumerate(samples):
        _to_png(s.image, out / "images" / f"{i:04d}.png")
        _to_png(s.condition, out / "conditions" / f"{i:04d}.png")
        rec = {
            "index": i,
            "caption": s.caption,
            "layout": s.layout.to_dict(),
            "script_ids": s.script_ids,
            "small_text": s.small_text,
        }
        meta_lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    (out / "meta.jsonl").write_text("\n".join(meta_lines) + "\n")
    for sc in scripts:
        save_script(sc, out / "scripts" / f"{sc.script_id}.json")
    dhash = dataset_hash(meta_lines)
    header = {
        "version": DATASET_FORMAT_VERSION,
        "n": len(samples),
        "shape": list(samples[0].image.shape),
        "scripts": [sc.script_id for sc in scripts],
        "dataset_hash": dhash,
    }
    (out / "dataset.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return dhash


def load_dataset(in_dir) -> tuple[list[DatasetSample], list[ScriptDef], str]:
    src = Path(in_dir)
    header = json.loads((src / "dataset.json").read_text())
    if header.get("version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {header.get('version')}")
    scripts = [load_script(src / "scripts" / f"{sid}.json") for sid in header["scripts"]]
    samples = []
    for line in (src / "meta.jsonl").read_text().splitlines():
        rec = json.loads(line)
        i = rec["index"]
        samples.append(DatasetSample(
            image=_from_png(src / "images" / f"{i:04d}.png"),
            caption=rec["caption"],
            layout=GlyphLayout.from_dict(rec["layout"]),
            script_ids=rec["script_ids"],
            condition=_from_png(src / "conditions" / f"{i:04d}.png"),
            small_text=rec["small_text"],
        ))
    return samples, scripts, header["dataset_hash"]
