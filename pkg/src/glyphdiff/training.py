"""Training: denoising objective, glyph-edge term, condition dropout, the
optimizer loop with checkpointing, and the edge-conditioning pretraining phase
that stands in for an off-the-shelf edge-control initialization.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import DatasetSample
from .diffusion import NoiseSchedule, add_noise, predict_x0
from .edges import glyph_loss
from .model import GlyphDenoiser, GuidanceFeature, save_checkpoint
from .raster import GlyphLayout

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    max_steps: int = 4000
    prompt_drop_p: float = 0.5
    image_drop_p: float = 0.1
    phi_kind: str = "ddpm"
    loss_glyph_enabled: bool = True
    glyph_warmup: int = 0
    glyph_norm: str = "region"
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 2000
    expert_only: str | None = None  # script_id: freeze everything but that expert

    def __post_init__(self):
        if not (0.0 <= self.prompt_drop_p <= 1.0 and 0.0 <= self.image_drop_p <= 1.0):
            raise ValueError("dropout probabilities must be in [0,1]")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainBatch:
    z0: torch.Tensor            # (b, c, h, w) encoded latents
    images: torch.Tensor        # (b, 3, h, w) pixel targets in [0,1]
    captions: list[str]
    cond_pixels: torch.Tensor   # (b, 3, h, w)
    layouts: list[GlyphLayout]


@dataclass
class LossInternals:
    t: torch.Tensor
    eps: torch.Tensor
    eps_hat: torch.Tensor
    z_t: torch.Tensor


def make_batch(samples: list[DatasetSample], idx, codec) -> TrainBatch:
    images = torch.stack([torch.as_tensor(samples[i].image, dtype=torch.float32) for i in idx])
    conds = torch.stack([torch.as_tensor(samples[i].condition, dtype=torch.float32) for i in idx])
    return TrainBatch(
        z0=codec.encode(images),
        images=images,
        captions=[samples[i].caption for i in idx],
        cond_pixels=conds,
        layouts=[samples[i].layout for i in idx],
    )


def dropout_conditions(c_emb: torch.Tensor, z_I: GuidanceFeature, cfg: TrainConfig,
                       rng: torch.Generator, null_emb: torch.Tensor,
                       z_null: GuidanceFeature) -> tuple[torch.Tensor, GuidanceFeature]:
    """Independently replace prompts with the null embedding and condition
    features with the glyph-free features, per sample."""
    b = c_emb.shape[0]
    drop_p = torch.rand(b, generator=rng) < cfg.prompt_drop_p
    drop_i = torch.rand(b, generator=rng) < cfg.image_drop_p
    c_out = torch.where(drop_p[:, None], null_emb[None].expand(b, -1), c_emb)
    maps = tuple(
        torch.where(drop_i[:, None, None, None], zn, zi)
        for zn, zi in zip(z_null.maps, z_I.maps)
    )
    return c_out, GuidanceFeature(maps=maps, cond_hash=z_I.cond_hash)


def ldm_loss(batch: TrainBatch, model: GlyphDenoiser, sched: NoiseSchedule,
             rng: torch.Generator, c_emb: torch.Tensor | None = None,
             z_I: GuidanceFeature | None = None) -> tuple[torch.Tensor, LossInternals]:
    """Denoising score-matching objective: mean squared error between the drawn
    noise and the prediction at a uniformly sampled timestep."""
    b = batch.z0.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    if c_emb is None:
        c_emb = model.text.encode_batch(batch.captions)
    if z_I is None and hasattr(model, "encode_condition"):
        z_I = model.encode_condition(batch.cond_pixels)
    t = torch.randint(1, sched.T + 1, (b,), generator=rng)
    eps = torch.randn(batch.z0.shape, generator=rng)
    z_t = add_noise(batch.z0, t, eps, sched)
    eps_hat = model.predict_eps(z_t, t, c_emb, z_I)
    loss = F.mse_loss(eps_hat, eps)
    return loss, LossInternals(t=t, eps=eps, eps_hat=eps_hat, z_t=z_t)


def glyph_term(internals: LossInternals, batch: TrainBatch, sched: NoiseSchedule,
               codec, phi_kind: str = "ddpm", norm: str = "region") -> torch.Tensor:
    """Edge-alignment term on the reconstructed image, weighted per sample by
    phi(t); text-free samples contribute zero."""
    x0_hat = predict_x0(internals.z_t, internals.eps_hat, internals.t, sched)
    imgs_hat = codec.decode(x0_hat)
    total = internals.eps_hat.sum() * 0.0
    for i, layout in enumerate(batch.layouts):
        term, no_text = glyph_loss(imgs_hat[i], batch.images[i], layout,
                                   int(internals.t[i]), sched, phi_kind, norm=norm)
        if not no_text:
            total = total + term
    return total / len(batch.layouts)


def _trainable_params(model: GlyphDenoiser, cfg: TrainConfig) -> list:
    if cfg.expert_only is not None:
        if cfg.expert_only not in model.experts:
            raise KeyError(f"no expert {cfg.expert_only!r}; add_expert first")
        return list(model.experts[cfg.expert_only].parameters())
    return [p for n, p in model.named_parameters() if not n.startswith("experts.")]


def train(samples: list[DatasetSample], model: GlyphDenoiser, cfg: TrainConfig,
          sched: NoiseSchedule, codec, out_dir, label: str = "train",
          config_hash: str = "", dataset_hash: str = "") -> Path:
    """Run the optimization loop; returns the final checkpoint path.

    Appends (step, l_ldm, l_glyph, lr, grad_norm) to metrics.csv; aborts with a
    diagnostic dump if the loss goes non-finite.
    """
    if not samples:
        raise ValueError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = _trainable_params(model, cfg)
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng_data = torch.Generator().manual_seed(cfg.seed)
    rng_noise = torch.Generator().manual_seed(cfg.seed + 1)
    rng_drop = torch.Generator().manual_seed(cfg.seed + 2)
    experts_active = (cfg.expert_only,) if cfg.expert_only else ()

    metrics_path = out / f"{label}_metrics.csv"
    new_file = not metrics_path.exists()
    mf = open(metrics_path, "a", newline="")
    writer = csv.writer(mf)
    if new_file:
        writer.writerow(["step", "l_ldm", "l_glyph", "lr", "grad_norm"])

    model.train()
    t_start = time.time()
    zero_cond = torch.zeros(1, 3, *samples[0].image.shape[-2:])
    try:
        for step in range(1, cfg.max_steps + 1):
            idx = torch.randint(0, len(samples), (cfg.batch_size,), generator=rng_data).tolist()
            batch = make_batch(samples, idx, codec)
            c_emb = model.text.encode_batch(batch.captions)
            z_I = model.encode_condition(batch.cond_pixels, experts_active)
            z_null = model.encode_condition(zero_cond, experts_active).repeat(cfg.batch_size)
            c_emb, z_I = dropout_conditions(c_emb, z_I, cfg, rng_drop,
                                            model.text.null_embedding, z_null)
            l_ldm, internals = ldm_loss(batch, model, sched, rng_noise, c_emb, z_I)
            if cfg.loss_glyph_enabled and step > cfg.glyph_warmup:
                l_glyph = glyph_term(internals, batch, sched, codec,
                                     cfg.phi_kind, cfg.glyph_norm)
            else:
                l_glyph = l_ldm.new_zeros(())
            loss = l_ldm + l_glyph
            if not torch.isfinite(loss):
                dump = out / f"{label}_diagnostic_step{step}.pt"
                torch.save({"batch_indices": idx, "z0": batch.z0, "t": internals.t,
                            "captions": batch.captions}, dump)
                raise RuntimeError(f"non-finite loss at step {step}; batch dumped to {dump}")
            opt.zero_grad()
            loss.backward()
            gnorm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            writer.writerow([step, f"{l_ldm.item():.6f}", f"{l_glyph.item():.6f}",
                             f"{cfg.learning_rate:.2e}", f"{float(gnorm):.4f}"])
            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                mf.flush()
                logger.info("%s step %d/%d l_ldm=%.4f l_glyph=%.4f (%.0fs)", label, step,
                            cfg.max_steps, l_ldm.item(), l_glyph.item(), time.time() - t_start)
            if step % cfg.checkpoint_every == 0 and step < cfg.max_steps:
                save_checkpoint(out / f"{label}_step{step}.pt", model, sched.to_dict(),
                                step, config_hash, dataset_hash)
    finally:
        mf.close()
    model.eval()
    final = out / f"{label}_final.pt"
    save_checkpoint(final, model, sched.to_dict(), cfg.max_steps, config_hash, dataset_hash)
    return final


def pretrain_edges(shape_samples: list[DatasetSample], model: GlyphDenoiser,
                   cfg: TrainConfig, sched: NoiseSchedule, codec, out_dir,
                   config_hash: str = "") -> Path:
    """Same loop on text-free scenes conditioned on their own edge maps; the
    resulting control tower seeds glyph training."""
    return train(shape_samples, model, cfg, sched, codec, out_dir,
                 label="pretrain", config_hash=config_hash)
