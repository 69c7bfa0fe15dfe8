"""Shared heavy fixture: the trained acceptance preset with its eval records,
cached under .cache/acceptance keyed by configuration hash."""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from glyphdiff.config import RunConfig
from glyphdiff.dataset import load_dataset, save_dataset, synth_dataset
from glyphdiff.diffusion import IdentityCodec, default_schedule
from glyphdiff.evaluate import EvalRecord, EvalReport, build_bench, eval_run
from glyphdiff.glyphs import make_scripts
from glyphdiff.model import GlyphDenoiser, init_control_from_base, load_checkpoint
from glyphdiff.rendering import BlendSchedule
from glyphdiff.training import train

CACHE = Path(__file__).resolve().parent.parent / ".cache" / "acceptance"

ACCEPT_STEPS = int(os.environ.get("GLYPHDIFF_ACCEPT_STEPS", "9000"))
ACCEPT_PROMPTS = int(os.environ.get("GLYPHDIFF_ACCEPT_PROMPTS", "200"))
ACCEPT_SAMPLES = int(os.environ.get("GLYPHDIFF_ACCEPT_SAMPLES", "5000"))
ACCEPT_GENS = 4


def accept_cfg() -> RunConfig:
    cfg = RunConfig()
    cfg.seed = 0
    cfg.data.n_samples = ACCEPT_SAMPLES
    cfg.train.max_steps = ACCEPT_STEPS
    cfg.train.batch_size = 16
    cfg.train.learning_rate = 2e-4
    cfg.train.eval_every = 500
    cfg.train.checkpoint_every = 10 ** 9
    cfg.eval.n_prompts = ACCEPT_PROMPTS
    cfg.eval.gens_per_prompt = ACCEPT_GENS
    return cfg


def build_trained_run(cfg: RunConfig) -> Path:
    """Train the preset and evaluate all modes; everything cached on disk."""
    key = cfg.config_hash()
    root = CACHE / key
    root.mkdir(parents=True, exist_ok=True)
    records_path = root / "records.jsonl"
    if records_path.exists():
        return root
    torch.manual_seed(cfg.seed)
    sched = default_schedule(cfg.schedule.T)
    codec = IdentityCodec()
    ds_dir = root / "dataset"
    if not (ds_dir / "dataset.json").exists():
        scripts = make_scripts(cfg.data.n_scripts, cfg.data.n_glyphs, cfg.data.seed)
        samples = synth_dataset(scripts, cfg.data.n_samples, cfg.data.h, cfg.data.w,
                                cfg.data.small_fraction, cfg.data.seed,
                                script_weights=list(cfg.data.script_weights))
        save_dataset(samples, scripts, ds_dir)
    samples, scripts, dhash = load_dataset(ds_dir)
    ckpt_path = root / "train_final.pt"
    timing = {}
    if not ckpt_path.exists():
        model = GlyphDenoiser(cfg.model)
        init_control_from_base(model)
        t0 = time.time()
        train(samples, model, cfg.train, sched, codec, root,
              config_hash=key, dataset_hash=dhash)
        timing["train_seconds"] = time.time() - t0
    model, _ = load_checkpoint(ckpt_path)
    bench = build_bench(scripts, cfg.eval.n_prompts, cfg.data.h, cfg.data.w,
                        cfg.eval.seed, small_fraction=cfg.eval.small_fraction,
                        upscale=cfg.render.upscale_factor)
    bsched = BlendSchedule(alpha1=cfg.render.alpha1, T=cfg.schedule.T)
    t0 = time.time()
    rep = eval_run(model, bench, scripts, ["cfg", "ndcfg", "ldtsr", "ld"],
                   cfg.guidance, bsched, sched, codec, cfg.render.steps,
                   cfg.eval.seed, (cfg.data.h, cfg.data.w),
                   gens_per_prompt=cfg.eval.gens_per_prompt,
                   chunk_prompts=cfg.eval.chunk_prompts)
    timing["eval_seconds"] = time.time() - t0
    timing["seconds_per_image"] = rep.seconds_per_image
    with open(records_path, "w") as f:
        for r in rep.records:
            f.write(json.dumps(r.__dict__, sort_keys=True) + "\n")
    (root / "timing.json").write_text(json.dumps(timing, indent=2))
    return root


@pytest.fixture(scope="session")
def trained_run():
    cfg = accept_cfg()
    root = build_trained_run(cfg)
    rep = EvalReport()
    for line in (root / "records.jsonl").read_text().splitlines():
        rep.records.append(EvalRecord(**json.loads(line)))
    return rep, cfg, root
