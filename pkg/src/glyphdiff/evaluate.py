"""Benchmark construction and multi-mode evaluation runs.

A benchmark prompt carries its base-resolution layout/condition and a scaled
copy for the high-resolution patch pipeline. Script assignment alternates
deterministically and layout draws are keyed per prompt pair, so different
scripts are compared at identical fonts, lengths and boxes.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .dataset import caption_for
from .glyphs import ScriptDef
from .guidance import GuidanceParams
from .metrics import accuracy, edge_iou, ned, template_ocr
from .model import GlyphDenoiser
from .raster import ConditionImage, GlyphLayout, TextLine, rasterize
from .rendering import BlendSchedule, generate, small_text_generate, two_stage_generate

EVAL_MODES = ("cfg", "ndcfg", "ldtsr", "ld")
SEED_PROMPT_STRIDE = 7919


@dataclass
class BenchPrompt:
    index: int
    caption: str
    script_id: str
    small_text: bool
    font_px: int
    layout: GlyphLayout
    cond: ConditionImage
    layout_hi: GlyphLayout
    cond_hi: ConditionImage


def scale_layout(layout: GlyphLayout, factor: int) -> GlyphLayout:
    return GlyphLayout(lines=[
        TextLine(ln.text, tuple(v * factor for v in ln.box), ln.font_px * factor)
        for ln in layout.lines
    ])


def build_bench(scripts: list[ScriptDef], n_prompts: int, h: int, w: int, seed: int,
                small_fraction: float = 0.25, upscale: int = 2,
                text_len: tuple[int, int] = (2, 4),
                font_range: tuple[int, int] = (14, 24),
                small_font: tuple[int, int] = (6, 12)) -> list[BenchPrompt]:
    """Single-line prompts; scripts alternate and share per-pair layout draws."""
    n_small = int(round(n_prompts * small_fraction))
    small_set = set(np.random.default_rng(seed).permutation(n_prompts)[:n_small].tolist())
    prompts = []
    for i in range(n_prompts):
        script = scripts[i % len(scripts)]
        pair_key = i // len(scripts)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(pair_key, 7)))
        small = i in small_set
        fonts = small_font if small else font_range
        font = int(rng.integers(fonts[0], fonts[1] + 1))
        max_chars = max(1, min(text_len[1], (w - 2) // font))
        k = int(rng.integers(min(text_len[0], max_chars), max_chars + 1))
        # the text draw must differ per script (different alphabets)
        rng_text = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i, 13)))
        text = "".join(rng_text.choice(list(script.alphabet), size=k))
        bw, bh = k * font, font
        x = int(rng.integers(0, w - bw + 1))
        y = int(rng.integers(0, h - bh + 1))
        layout = GlyphLayout(lines=[TextLine(text, (x, y, bw, bh), font)])
        layout_hi = scale_layout(layout, upscale)
        prompts.append(BenchPrompt(
            index=i,
            caption=caption_for([text]),
            script_id=script.script_id,
            small_text=small,
            font_px=font,
            layout=layout,
            cond=rasterize(layout, script, h, w),
            layout_hi=layout_hi,
            cond_hi=rasterize(layout_hi, script, h * upscale, w * upscale),
        ))
    return prompts


@dataclass
class EvalRecord:
    mode: str
    prompt: int
    gen: int
    script: str
    small_text: bool
    font_px: int
    acc: float
    line_acc: float
    ned: float
    edge_iou: float


@dataclass
class EvalReport:
    records: list[EvalRecord] = field(default_factory=list)
    seconds_per_image: dict = field(default_factory=dict)

    def subset(self, mode: str | None = None, script: str | None = None,
               small: bool | None = None) -> list[EvalRecord]:
        out = self.records
        if mode is not None:
            out = [r for r in out if r.mode == mode]
        if script is not None:
            out = [r for r in out if r.script == script]
        if small is not None:
            out = [r for r in out if r.small_text == small]
        return out

    def aggregate(self, mode: str, script: str | None = None) -> dict:
        rs = self.subset(mode, script)
        if not rs:
            return {}
        ious = [r.edge_iou for r in rs if not np.isnan(r.edge_iou)]
        return {
            "mode": mode,
            "script": script or "all",
            "acc": float(np.mean([r.acc for r in rs])),
            "ned": float(np.mean([r.ned for r in rs])),
            "edge_iou": float(np.mean(ious)) if ious else float("nan"),
            "line_acc": float(np.mean([r.line_acc for r in rs])),
            "n_images": len(rs),
            "seconds_per_image": self.seconds_per_image.get(mode, 0.0),
        }

    def rows(self) -> list[dict]:
        modes = sorted({r.mode for r in self.records})
        scripts = sorted({r.script for r in self.records})
        out = []
        for m in modes:
            for s in scripts:
                agg = self.aggregate(m, s)
                if agg:
                    out.append(agg)
            out.append(self.aggregate(m))
        return out

    def to_csv(self, include_timing: bool = True) -> str:
        cols = ["mode", "script", "acc", "ned", "edge_iou", "line_acc", "n_images"]
        if include_timing:
            cols.append("seconds_per_image")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.rows():
            w.writerow([row["mode"], row["script"]] + [
                f"{row[c]:.4f}" if isinstance(row[c], float) else row[c] for c in cols[2:]
            ])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'mode':8s} {'script':7s} {'acc':>6s} {'ned':>6s} {'e-iou':>6s} "
                 f"{'l-acc':>6s} {'n':>5s}"]
        for row in self.rows():
            lines.append(
                f"{row['mode']:8s} {row['script']:7s} {row['acc']:6.3f} {row['ned']:6.3f} "
                f"{row['edge_iou']:6.3f} {row['line_acc']:6.3f} {row['n_images']:5d}"
            )
        return "\n".join(lines)


def _image_metrics(img: np.ndarray, layout: GlyphLayout, cond: ConditionImage,
                   script: ScriptDef) -> tuple[float, float, float, float]:
    ocr = template_ocr(img, layout, script)
    hits = total = 0
    lines_ok = 0
    neds = []
    for ln, gt in zip(ocr.lines, [l.text for l in layout.lines]):
        hits += sum(p == g for p, g in zip(ln.predicted, gt))
        total += len(gt)
        lines_ok += int(ln.match)
        neds.append(ned(ln.predicted, gt))
    acc = hits / total if total else 0.0
    line_acc = lines_ok / len(layout.lines) if layout.lines else 0.0
    return acc, line_acc, float(np.mean(neds)) if neds else 0.0, edge_iou(img, cond)


def row_seed(base_seed: int, prompt_index: int, gen: int) -> int:
    return base_seed + SEED_PROMPT_STRIDE * prompt_index + gen


def eval_run(model: GlyphDenoiser, bench: list[BenchPrompt], scripts: list[ScriptDef],
             modes, gparams: GuidanceParams, bsched: BlendSchedule, sched, codec,
             steps: int, seed: int, base_hw: tuple[int, int],
             gens_per_prompt: int = 4, chunk_prompts: int = 8,
             patch: int | None = None, stride: int | None = None,
             experts_active=(), save_images_to=None) -> EvalReport:
    """Generate gens_per_prompt images per prompt per mode and score them.

    Modes: cfg, ndcfg, ldtsr, ld (ld runs on the small-text subset at the
    upscaled resolution), plus 'raster' which scores the clean condition
    renders without any model (pipeline sanity oracle).
    """
    by_id = {s.script_id: s for s in scripts}
    report = EvalReport()
    for mode in modes:
        subset = [p for p in bench if p.small_text] if mode == "ld" else list(bench)
        if not subset:
            continue
        t0 = time.time()
        n_images = 0
        for c0 in range(0, len(subset), chunk_prompts):
            chunk = subset[c0:c0 + chunk_prompts]
            if mode == "raster":
                for p in chunk:
                    m = _image_metrics(p.cond.pixels, p.layout, p.cond, by_id[p.script_id])
                    report.records.append(EvalRecord(mode, p.index, 0, p.script_id,
                                                     p.small_text, p.font_px, *m))
                    n_images += 1
                continue
            captions = [p.caption for p in chunk for _ in range(gens_per_prompt)]
            seeds = [row_seed(seed, p.index, g) for p in chunk for g in range(gens_per_prompt)]
            if mode == "ld":
                conds = [p.cond_hi for p in chunk for _ in range(gens_per_prompt)]
                imgs = small_text_generate(captions, conds, model, gparams, bsched, sched,
                                           patch=patch or base_hw[0],
                                           stride=stride or base_hw[0] // 2,
                                           steps=steps, seed=seeds, base_hw=base_hw,
                                           codec=codec, experts_active=experts_active)
            else:
                conds = [p.cond for p in chunk for _ in range(gens_per_prompt)]
                if mode in ("cfg", "ndcfg"):
                    imgs = generate(captions, conds, model, gparams, sched, steps, seeds,
                                    latent_hw=base_hw, mode=mode, codec=codec,
                                    experts_active=experts_active)
                elif mode == "ldtsr":
                    imgs = two_stage_generate(captions, conds, model, gparams, bsched,
                                              sched, steps, seeds, latent_hw=base_hw,
                                              codec=codec, experts_active=experts_active)
                else:
                    raise ValueError(f"unknown mode {mode!r}")
            imgs = imgs.clamp(0.0, 1.0).numpy()
            for r, (p, g) in enumerate((p, g) for p in chunk for g in range(gens_per_prompt)):
                layout = p.layout_hi if mode == "ld" else p.layout
                cond = p.cond_hi if mode == "ld" else p.cond
                m = _image_metrics(imgs[r], layout, cond, by_id[p.script_id])
                report.records.append(EvalRecord(mode, p.index, g, p.script_id,
                                                 p.small_text, p.font_px, *m))
                n_images += 1
                if save_images_to is not None:
                    from pathlib import Path
                    d = Path(save_images_to) / mode
                    d.mkdir(parents=True, exist_ok=True)
                    u8 = np.clip(np.rint(imgs[r].transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
                    Image.fromarray(u8).save(d / f"{p.index:04d}_{g}.png")
        report.seconds_per_image[mode] = (time.time() - t0) / max(n_images, 1)
    return report


def contact_sheet(report_dir, bench: list[BenchPrompt], mode: str, k: int = 16,
                  out_path=None):
    """Assemble a PNG grid from saved eval images."""
    from pathlib import Path
    d = Path(report_dir) / mode
    files = sorted(d.glob("*.png"))[:k]
    if not files:
        raise FileNotFoundError(f"no images under {d}")
    imgs = [Image.open(f) for f in files]
    w, h = imgs[0].size
    cols = int(np.ceil(np.sqrt(len(imgs))))
    rows = int(np.ceil(len(imgs) / cols))
    sheet = Image.new("RGB", (cols * w, rows * h))
    for i, im in enumerate(imgs):
        sheet.paste(im, ((i % cols) * w, (i // cols) * h))
    out = out_path or (Path(report_dir) / f"grid_{mode}.png")
    sheet.save(out)
    return out
