"""Command-line entry points: dataset, pretrain, train, generate, eval, sweep,
oracle. Flags override config-file values; every error exits nonzero with a
single machine-parseable line."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from .config import RunConfig, load_config, save_config
from .diffusion import default_schedule, get_codec, make_schedule, NoiseSchedule
from .evaluate import build_bench, contact_sheet, eval_run
from .glyphs import make_scripts, load_script
from .guidance import GuidanceParams
from .metrics import bootstrap_ci
from .model import GlyphDenoiser, init_control_from_base, load_checkpoint
from .oracle import GaussianMixture, verify_sampler
from .raster import GlyphLayout, TextLine, rasterize
from .rendering import (BlendSchedule, axis_positions, generate, small_text_generate,
                        two_stage_generate)
from .training import TrainConfig, pretrain_edges, train


class CliError(Exception):
    def __init__(self, code: str, msg: str):
        super().__init__(msg)
        self.code = code


def _schedule_from(cfg: RunConfig) -> NoiseSchedule:
    sc = cfg.schedule
    if sc.beta_start is None or sc.beta_end is None:
        return default_schedule(sc.T)
    return make_schedule(sc.kind, sc.T, sc.beta_start, sc.beta_end)


def _scripts_from(cfg: RunConfig):
    ranges = cfg.data.stroke_ranges
    if ranges is not None:
        ranges = [tuple(r) for r in ranges]
    return make_scripts(cfg.data.n_scripts, cfg.data.n_glyphs, cfg.data.seed, ranges)


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for flag, path in (
        ("seed", ("seed",)), ("n", ("data", "n_samples")),
        ("scripts", ("data", "n_scripts")), ("glyphs", ("data", "n_glyphs")),
        ("small_frac", ("data", "small_fraction")), ("height", ("data", "h")),
        ("width", ("data", "w")), ("steps", ("render", "steps")),
        ("train_steps", ("train", "max_steps")),
        ("pretrain_steps", ("pretrain", "max_steps")),
        ("omega_cfg", ("guidance", "omega_cfg")), ("omega_ndg", ("guidance", "omega_ndg")),
        ("A", ("guidance", "A")), ("alpha2", ("guidance", "alpha2")),
        ("alpha1", ("render", "alpha1")), ("patch", ("render", "patch")),
        ("stride", ("render", "stride")), ("upscale_factor", ("render", "upscale_factor")),
        ("n_prompts", ("eval", "n_prompts")), ("gens", ("eval", "gens_per_prompt")),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            obj = cfg
            for p in path[:-1]:
                obj = getattr(obj, p)
            setattr(obj, path[-1], v)
    if getattr(args, "dynamic", None) is not None:
        cfg.render.use_dynamic = args.dynamic
    cfg.guidance.T = cfg.schedule.T
    return cfg


def cmd_dataset(args) -> int:
    cfg = _load_cfg(args)
    d = cfg.data
    if not (0.0 <= d.small_fraction <= 1.0):
        raise CliError("invalid-argument", f"small fraction {d.small_fraction} outside [0,1]")
    scripts = _scripts_from(cfg)
    samples = ds.synth_dataset(
        scripts, d.n_samples, d.h, d.w, d.small_fraction, d.seed,
        script_weights=list(d.script_weights), lines_range=tuple(d.lines_range),
        text_len=tuple(d.text_len), font_range=tuple(d.font_range),
        small_font=tuple(d.small_font))
    out = Path(args.out)
    dhash = ds.save_dataset(samples, scripts, out)
    save_config(cfg, out / "config.yaml")
    print(f"wrote {len(samples)} samples to {out} (hash {dhash}, "
          f"{sum(s.small_text for s in samples)} small-text)")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    torch.manual_seed(cfg.seed)
    shapes = ds.synth_shape_dataset(args.n or 2000, cfg.data.h, cfg.data.w, cfg.data.seed + 77)
    model = GlyphDenoiser(cfg.model)
    sched = _schedule_from(cfg)
    codec = get_codec(cfg.codec)
    out = Path(args.out)
    path = pretrain_edges(shapes, model, cfg.pretrain, sched, codec, out,
                          config_hash=cfg.config_hash())
    save_config(cfg, out / "config.yaml")
    print(f"pretrain checkpoint: {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    torch.manual_seed(cfg.seed)
    samples, scripts, dhash = ds.load_dataset(args.dataset)
    model = GlyphDenoiser(cfg.model)
    if args.from_pretrain:
        _, ckpt = load_checkpoint(args.from_pretrain)
        init_control_from_base(model, ckpt)
    else:
        init_control_from_base(model)
    tcfg = cfg.train
    if args.expert:
        if args.expert not in {s.script_id for s in scripts}:
            raise CliError("invalid-argument",
                           f"no script {args.expert!r} in dataset (have "
                           f"{sorted(s.script_id for s in scripts)})")
        if args.resume:
            model, _ = load_checkpoint(args.resume)
        model.add_expert(args.expert)
        tcfg.expert_only = args.expert
        samples = [s for s in samples if args.expert in s.script_ids]
    elif args.resume:
        model, _ = load_checkpoint(args.resume)
    sched = _schedule_from(cfg)
    codec = get_codec(cfg.codec)
    out = Path(args.out)
    path = train(samples, model, tcfg, sched, codec, out,
                 config_hash=cfg.config_hash(), dataset_hash=dhash)
    save_config(cfg, out / "config.yaml")
    print(f"final checkpoint: {path}")
    return 0


def _parse_box(text: str) -> tuple[int, int, int, int]:
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 4:
        raise CliError("invalid-argument", f"box must be x,y,w,h, got {text!r}")
    return tuple(parts)


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    model, ckpt = load_checkpoint(args.checkpoint)
    sched = NoiseSchedule.from_dict(ckpt["schedule"])
    cfg.guidance.T = sched.T
    gparams = cfg.guidance
    bsched = BlendSchedule(alpha1=cfg.render.alpha1, T=sched.T)
    codec = get_codec(cfg.codec)
    h, w = cfg.data.h, cfg.data.w
    mode = args.mode
    if args.ldtsr:
        mode = "ldtsr"
    if args.ld:
        mode = "ld"

    scripts = {}
    sdir = Path(args.scripts_dir) if args.scripts_dir else None
    if sdir is None:
        raise CliError("invalid-argument", "--scripts-dir is required (dataset dir /scripts)")
    for f in sorted(sdir.glob("*.json")):
        sc = load_script(f)
        scripts[sc.script_id] = sc
    if args.script not in scripts:
        raise CliError("invalid-argument",
                       f"unknown script {args.script!r} (have {sorted(scripts)})")
    script = scripts[args.script]

    experts_active = ()
    if args.use_expert:
        if args.script not in model.experts:
            raise CliError("missing-expert",
                           f"no expert for script {args.script!r}; available experts: "
                           f"{sorted(model.experts)}")
        experts_active = (args.script,)

    font = args.font
    text = args.text
    for ch in text:
        if ord(ch) not in {g.code for g in script.glyphs}:
            raise CliError("invalid-argument",
                           f"character {ch!r} not in script {args.script!r} "
                           f"(alphabet {script.alphabet!r})")
    if args.box:
        box = _parse_box(args.box)
    else:
        bw, bh = len(text) * font, font
        box = ((w - bw) // 2, (h - bh) // 2, bw, bh)
    layout = GlyphLayout(lines=[TextLine(text, box, font)])
    hi = cfg.render.upscale_factor
    caption = ds.caption_for([text])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for j in range(args.n):
        seed = cfg.seed + j
        trace: list = []
        if mode == "ld":
            lay_hi = GlyphLayout(lines=[TextLine(text, tuple(v * hi for v in box), font * hi)])
            cond = rasterize(lay_hi, script, h * hi, w * hi)
            img = small_text_generate([caption], [cond], model, gparams, bsched, sched,
                                      patch=cfg.render.patch or h,
                                      stride=cfg.render.stride or h // 2,
                                      steps=cfg.render.steps, seed=[seed], base_hw=(h, w),
                                      codec=codec, experts_active=experts_active,
                                      upscale_method=cfg.render.upscale_method, trace=trace)
        else:
            cond = rasterize(layout, script, h, w)
            if mode == "ldtsr":
                img = two_stage_generate([caption], [cond], model, gparams, bsched, sched,
                                         cfg.render.steps, [seed], latent_hw=(h, w),
                                         codec=codec, experts_active=experts_active,
                                         fresh_noise=cfg.render.fresh_noise,
                                         use_dynamic=cfg.render.use_dynamic, trace=trace)
            else:
                img = generate([caption], [cond], model, gparams, sched, cfg.render.steps,
                               [seed], latent_hw=(h, w), mode=mode, codec=codec,
                               experts_active=experts_active, trace=trace)
        arr = img[0].clamp(0, 1).numpy()
        png = out / f"gen_{j:03d}.png"
        ds._to_png(arr, png)
        if j == 0:
            ds._to_png(cond.pixels, out / "condition.png")
        rec = {
            "file": png.name, "seed": seed, "mode": mode,
            "config_hash": cfg.config_hash(), "caption": caption,
            "text": text, "script": args.script, "box": list(box), "font_px": font,
            "omega_trace": [[int(t), float(o)] for t, o in trace],
        }
        if mode == "ld":
            ph = cfg.render.patch or h
            st = cfg.render.stride or h // 2
            rec["n_patches"] = (len(axis_positions(h * hi, ph, st))
                                * len(axis_positions(w * hi, ph, st)))
        records.append(rec)
    with open(out / "metadata.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    print(f"wrote {args.n} image(s) to {out} (mode {mode})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    model, ckpt = load_checkpoint(args.checkpoint)
    samples, scripts, dhash = ds.load_dataset(args.dataset)
    if ckpt.get("dataset_hash") and ckpt["dataset_hash"] != dhash and not args.force:
        raise CliError("hash-mismatch",
                       f"checkpoint was trained on dataset {ckpt['dataset_hash']}, "
                       f"given {dhash}; pass --force to evaluate anyway")
    sched = NoiseSchedule.from_dict(ckpt["schedule"])
    cfg.guidance.T = sched.T
    bsched = BlendSchedule(alpha1=cfg.render.alpha1, T=sched.T)
    codec = get_codec(cfg.codec)
    h, w = cfg.data.h, cfg.data.w
    modes = args.modes.split(",") if args.modes else list(cfg.eval.modes)
    bench = build_bench(scripts, cfg.eval.n_prompts, h, w, cfg.eval.seed,
                        small_fraction=cfg.eval.small_fraction,
                        upscale=cfg.render.upscale_factor,
                        font_range=tuple(cfg.data.font_range),
                        small_font=tuple(cfg.data.small_font))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = eval_run(model, bench, scripts, modes, cfg.guidance, bsched, sched, codec,
                      cfg.render.steps, cfg.eval.seed, (h, w),
                      gens_per_prompt=cfg.eval.gens_per_prompt,
                      chunk_prompts=cfg.eval.chunk_prompts,
                      patch=cfg.render.patch, stride=cfg.render.stride,
                      save_images_to=out / "images" if args.grid else None)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.table() + "\n")
    with open(out / "records.jsonl", "w") as f:
        for r in report.records:
            f.write(json.dumps(r.__dict__, sort_keys=True) + "\n")
    if args.grid:
        for m in modes:
            if m != "raster":
                contact_sheet(out / "images", bench, m)
    print(report.table())
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    model, ckpt = load_checkpoint(args.checkpoint)
    _, scripts, _ = ds.load_dataset(args.dataset)
    sched = NoiseSchedule.from_dict(ckpt["schedule"])
    cfg.guidance.T = sched.T
    bsched = BlendSchedule(alpha1=cfg.render.alpha1, T=sched.T)
    codec = get_codec(cfg.codec)
    h, w = cfg.data.h, cfg.data.w
    fonts = [int(v) for v in args.fonts.split(",")]
    modes = args.modes.split(",") if args.modes else ["ndcfg"]
    rows = ["mode,script,font_px,acc,ned,edge_iou,n_images"]
    for font in fonts:
        for script in scripts:
            bench = build_bench([script], args.n_per_cell, h, w,
                                cfg.eval.seed + font, small_fraction=0.0,
                                upscale=cfg.render.upscale_factor,
                                font_range=(font, font), small_font=(font, font))
            rep = eval_run(model, bench, [script], [m for m in modes if m != "ld"],
                           cfg.guidance, bsched, sched, codec, cfg.render.steps,
                           cfg.eval.seed, (h, w),
                           gens_per_prompt=cfg.eval.gens_per_prompt,
                           chunk_prompts=cfg.eval.chunk_prompts)
            for m in modes:
                agg = rep.aggregate(m)
                if agg:
                    rows.append(f"{m},{script.script_id},{font},{agg['acc']:.4f},"
                                f"{agg['ned']:.4f},{agg['edge_iou']:.4f},{agg['n_images']}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(rows) + "\n")
    print("\n".join(rows))
    return 0


def cmd_oracle(args) -> int:
    if args.oracle_cmd != "verify":
        raise CliError("invalid-argument", f"unknown oracle subcommand {args.oracle_cmd!r}")
    gm = GaussianMixture(
        weights=[float(v) for v in args.weights.split(",")],
        means=[[float(v) for v in m.split(",")] for m in args.means.split(";")],
        variances=[float(v) for v in args.variances.split(",")],
    )
    sched = default_schedule(args.T)
    rep = verify_sampler(gm, sched, args.n_samples, args.steps, args.seed)
    csv_text = rep.to_csv()
    if args.out:
        Path(args.out).write_text(csv_text)
    print(csv_text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glyphdiff",
                                description="glyph-conditioned toy diffusion toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run config; flags override file values")
        sp.add_argument("--seed", type=int)

    q = sub.add_parser("dataset", help="generate a synthetic scene+text dataset")
    common(q)
    q.add_argument("--out", required=True)
    q.add_argument("--scripts", type=int, help="number of scripts")
    q.add_argument("--glyphs", type=int, help="glyphs per script")
    q.add_argument("--n", type=int, help="number of samples")
    q.add_argument("--small-frac", dest="small_frac", type=float)
    q.add_argument("--h", dest="height", type=int)
    q.add_argument("--w", dest="width", type=int)
    q.set_defaults(fn=cmd_dataset)

    q = sub.add_parser("pretrain", help="edge-conditioning pretraining on shape scenes")
    common(q)
    q.add_argument("--out", required=True)
    q.add_argument("--n", type=int, help="number of shape samples")
    q.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    q.set_defaults(fn=cmd_pretrain)

    q = sub.add_parser("train", help="train the glyph-conditioned denoiser")
    common(q)
    q.add_argument("--dataset", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--train-steps", dest="train_steps", type=int)
    q.add_argument("--from-pretrain", help="checkpoint from the pretrain command")
    q.add_argument("--resume", help="checkpoint to continue from")
    q.add_argument("--expert", help="fine-tune a per-script expert (freezes base)")
    q.set_defaults(fn=cmd_train)

    q = sub.add_parser("generate", help="render text images from a checkpoint")
    common(q)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--scripts-dir", help="directory of script json files (dataset/scripts)")
    q.add_argument("--out", required=True)
    q.add_argument("--text", required=True)
    q.add_argument("--script", default="S0")
    q.add_argument("--font", type=int, default=16)
    q.add_argument("--box", help="x,y,w,h (default: centered)")
    q.add_argument("--mode", choices=["cfg", "ndcfg", "ldtsr", "ld"], default="ndcfg")
    q.add_argument("--ldtsr", action="store_true", help="two-stage rendering (mode alias)")
    q.add_argument("--ld", action="store_true", help="small-text patch pipeline (mode alias)")
    q.add_argument("--n", type=int, default=1, help="images to generate (seeds seed..seed+n-1)")
    q.add_argument("--use-expert", action="store_true")
    q.add_argument("--omega-cfg", dest="omega_cfg", type=float)
    q.add_argument("--omega-ndg", dest="omega_ndg", type=float)
    q.add_argument("--A", dest="A", type=float)
    q.add_argument("--alpha1", type=float)
    q.add_argument("--alpha2", type=float)
    q.add_argument("--patch", type=int)
    q.add_argument("--stride", type=int)
    q.add_argument("--upscale-factor", dest="upscale_factor", type=int)
    q.add_argument("--steps", type=int)
    q.add_argument("--h", dest="height", type=int)
    q.add_argument("--w", dest="width", type=int)
    dyn = q.add_mutually_exclusive_group()
    dyn.add_argument("--dynamic", dest="dynamic", action="store_true", default=None)
    dyn.add_argument("--no-dynamic", dest="dynamic", action="store_false")
    q.set_defaults(fn=cmd_generate)

    q = sub.add_parser("eval", help="benchmark a checkpoint across guidance modes")
    common(q)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--dataset", required=True, help="dataset dir (scripts + hash check)")
    q.add_argument("--out", required=True)
    q.add_argument("--modes", help="comma list: cfg,ndcfg,ldtsr,ld,raster")
    q.add_argument("--n-prompts", dest="n_prompts", type=int)
    q.add_argument("--gens", type=int)
    q.add_argument("--grid", action="store_true", help="save images + contact sheets")
    q.add_argument("--force", action="store_true", help="ignore dataset hash mismatch")
    q.add_argument("--steps", type=int)
    q.set_defaults(fn=cmd_eval)

    q = sub.add_parser("sweep", help="metric grid over font sizes and scripts")
    common(q)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--dataset", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--fonts", default="8,12,16,24")
    q.add_argument("--modes")
    q.add_argument("--n-per-cell", dest="n_per_cell", type=int, default=8)
    q.set_defaults(fn=cmd_sweep)

    q = sub.add_parser("oracle", help="closed-form mixture checks of the sampler")
    q.add_argument("oracle_cmd", choices=["verify"])
    q.add_argument("--weights", default="0.35,0.65")
    q.add_argument("--means", default="-1.5,0;1.5,0.5")
    q.add_argument("--variances", default="0.05,0.08")
    q.add_argument("--T", type=int, default=200)
    q.add_argument("--n-samples", dest="n_samples", type=int, default=10000)
    q.add_argument("--steps", type=int, default=30)
    q.add_argument("--seed", type=int, default=7)
    q.add_argument("--out")
    q.set_defaults(fn=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: missing-file: {e}", file=sys.stderr)
        return 2
    except KeyError as e:
        print(f"error: missing-resource: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as e:
        print(f"error: invalid-argument: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
