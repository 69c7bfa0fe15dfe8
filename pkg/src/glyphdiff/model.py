"""Conditional toy denoiser: encoder/decoder U-Net with timestep + prompt FiLM
conditioning, a condition-image control branch with zero-initialized output
projections, and per-script low-rank adapter experts on the control branch.

The control branch sees only the condition image (no timestep, no prompt), so
its features can be encoded once per generation and reused at every step.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .raster import ConditionImage

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

_ASCII_LO, _ASCII_HI = 32, 126
_PUA_BASE, _PUA_SLOTS = 0xE000, 0x400


@dataclass
class ModelConfig:
    channels: int = 3          # latent channels (identity codec: pixel channels)
    widths: tuple[int, int, int] = (32, 64, 128)
    d_text: int = 64
    d_time: int = 64
    d_cond: int = 128
    groups: int = 8
    lora_rank: int = 4
    lora_scale: float = 1.0
    max_caption_len: int = 64

    def __post_init__(self):
        self.widths = tuple(self.widths)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class PromptEmbedding:
    values: torch.Tensor  # (d,) or (b, d)
    is_null: bool = False


@dataclass
class GuidanceFeature:
    maps: tuple  # per-stage feature maps, (b, w_k, h_k, w_k) each
    cond_hash: str = ""
    experts_key: frozenset = frozenset()

    @property
    def batch(self) -> int:
        return self.maps[0].shape[0]

    @staticmethod
    def cat(features: list["GuidanceFeature"]) -> "GuidanceFeature":
        maps = tuple(torch.cat([f.maps[k] for f in features]) for k in range(len(features[0].maps)))
        return GuidanceFeature(maps=maps, cond_hash="|".join(f.cond_hash for f in features))

    def repeat(self, n: int) -> "GuidanceFeature":
        return GuidanceFeature(
            maps=tuple(m.repeat(n, *([1] * (m.ndim - 1))) for m in self.maps),
            cond_hash=self.cond_hash, experts_key=self.experts_key,
        )


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TextEncoder(nn.Module):
    """Character-level caption encoder: mean of per-character embeddings with a
    fixed sinusoidal positional mix; empty captions map to a learned null vector."""

    def __init__(self, d_text: int, max_len: int):
        super().__init__()
        vocab = (_ASCII_HI - _ASCII_LO + 1) + _PUA_SLOTS + 1  # + UNK
        self.unk_index = vocab - 1
        self.embed = nn.Embedding(vocab, d_text)
        self.null_embedding = nn.Parameter(torch.randn(d_text) * 0.02)
        pos = torch.zeros(max_len, d_text)
        idx = torch.arange(max_len, dtype=torch.float32)[:, None]
        div = torch.exp(-math.log(100.0) * torch.arange(0, d_text, 2, dtype=torch.float32) / d_text)
        pos[:, 0::2] = torch.sin(idx * div)
        pos[:, 1::2] = torch.cos(idx * div)
        self.register_buffer("pos", 0.5 * pos)
        self.max_len = max_len

    def _index(self, ch: str) -> int:
        cp = ord(ch)
        if _ASCII_LO <= cp <= _ASCII_HI:
            return cp - _ASCII_LO
        if _PUA_BASE <= cp < _PUA_BASE + _PUA_SLOTS:
            return (_ASCII_HI - _ASCII_LO + 1) + (cp - _PUA_BASE)
        return self.unk_index

    def forward(self, caption: str) -> torch.Tensor:
        if caption == "":
            return self.null_embedding
        ids = torch.tensor([self._index(c) for c in caption[: self.max_len]],
                           dtype=torch.long, device=self.embed.weight.device)
        e = self.embed(ids)
        e = e * (1.0 + self.pos[: len(ids)])
        return e.mean(dim=0)

    def encode_batch(self, captions: list[str]) -> torch.Tensor:
        return torch.stack([self.forward(c) for c in captions])


def encode_prompt(caption: str, encoder: TextEncoder) -> PromptEmbedding:
    return PromptEmbedding(values=encoder(caption), is_null=caption == "")


class LoraConv2d(nn.Conv2d):
    """Conv2d whose effective weight is the base weight plus the low-rank (or
    dense merged) deltas of the currently attached adapters."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._adapters: list = []  # ("lr", down, up, scale) or ("dense", delta)

    def forward(self, x):
        w = self.weight
        if self._adapters:
            for entry in self._adapters:
                if entry[0] == "lr":
                    _, down, up, scale = entry
                    w = w + scale * (up @ down).view_as(self.weight)
                else:
                    w = w + entry[1].view_as(self.weight)
        return self._conv_forward(x, w, self.bias)


def _sanitize(key: str) -> str:
    return key.replace(".", "__")


class LoraExpert(nn.Module):
    """Per-script low-rank adapter over the control branch's conv layers.
    Up factors start at zero, so a fresh expert is a no-op."""

    def __init__(self, script_id: str, layer_shapes: dict[str, tuple[int, int]],
                 rank: int = 4, scale: float = 1.0):
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.script_id = script_id
        self.rank = rank
        self.scale = scale
        self.layer_keys = sorted(layer_shapes)
        self.down = nn.ParameterDict()
        self.up = nn.ParameterDict()
        for key, (cout, cin_kk) in layer_shapes.items():
            s = _sanitize(key)
            self.down[s] = nn.Parameter(torch.randn(rank, cin_kk) / math.sqrt(cin_kk))
            self.up[s] = nn.Parameter(torch.zeros(cout, rank))

    def entry_for(self, key: str):
        s = _sanitize(key)
        return ("lr", self.down[s], self.up[s], self.scale)

    def delta_for(self, key: str) -> torch.Tensor:
        s = _sanitize(key)
        return self.scale * (self.up[s] @ self.down[s])


class MergedExpert:
    """Weighted sum of experts' per-layer deltas, applied like a single expert."""

    def __init__(self, script_id: str, layer_keys: list[str], deltas: dict[str, torch.Tensor]):
        self.script_id = script_id
        self.layer_keys = layer_keys
        self.deltas = deltas

    def entry_for(self, key: str):
        return ("dense", self.deltas[_sanitize(key)])


def merge_experts(experts: list, weights: list[float]):
    """Per-layer delta = sum_i weights_i * scale_i * up_i @ down_i."""
    if len(experts) != len(weights):
        raise ValueError("weights must match experts")
    if not experts:
        raise ValueError("no experts to merge")
    keys = experts[0].layer_keys
    for e in experts[1:]:
        if e.layer_keys != keys:
            raise ValueError(f"expert {e.script_id} adapts a different layer set")
    deltas: dict[str, torch.Tensor] = {}
    for key in keys:
        s = _sanitize(key)
        total = None
        for e, w in zip(experts, weights):
            d = w * e.delta_for(key)
            total = d if total is None else total + d
        deltas[s] = total.detach()
    sid = "+".join(e.script_id for e in experts)
    return MergedExpert(sid, keys, deltas)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, d_cond: int, groups: int = 8,
                 conv_cls=nn.Conv2d):
        super().__init__()
        g1 = math.gcd(groups, cin)
        g2 = math.gcd(groups, cout)
        self.norm1 = nn.GroupNorm(g1, cin)
        self.conv1 = conv_cls(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(g2, cout)
        self.conv2 = conv_cls(cout, cout, 3, padding=1)
        self.film = nn.Linear(d_cond, 2 * cout)
        self.skip = conv_cls(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, cond):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(cond)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    def __init__(self, ch: int, groups: int = 8):
        super().__init__()
        self.norm = nn.GroupNorm(math.gcd(groups, ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class EncoderTower(nn.Module):
    """Three-stage encoder; the control branch instantiates the same shape."""

    def __init__(self, cfg: ModelConfig, in_ch: int, conv_cls=nn.Conv2d):
        super().__init__()
        w0, w1, w2 = cfg.widths
        self.stem = conv_cls(in_ch, w0, 3, padding=1)
        self.block1 = ResBlock(w0, w0, cfg.d_cond, cfg.groups, conv_cls)
        self.down1 = conv_cls(w0, w1, 3, stride=2, padding=1)
        self.block2 = ResBlock(w1, w1, cfg.d_cond, cfg.groups, conv_cls)
        self.down2 = conv_cls(w1, w2, 3, stride=2, padding=1)
        self.block3 = ResBlock(w2, w2, cfg.d_cond, cfg.groups, conv_cls)

    def forward(self, x, cond):
        h0 = self.block1(self.stem(x), cond)
        h1 = self.block2(self.down1(h0), cond)
        h2 = self.block3(self.down2(h1), cond)
        return h0, h1, h2


class ControlBranch(nn.Module):
    """Copy-shaped encoder over the condition image with zero-initialized
    per-stage output projections; contributes exactly nothing at init."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w0, w1, w2 = cfg.widths
        self.tower = EncoderTower(cfg, in_ch=3, conv_cls=LoraConv2d)
        self.proj0 = nn.Conv2d(w0, w0, 1)
        self.proj1 = nn.Conv2d(w1, w1, 1)
        self.proj2 = nn.Conv2d(w2, w2, 1)
        self.register_buffer("null_cond_vec", torch.zeros(1, cfg.d_cond))
        self.zero_projections()

    def zero_projections(self):
        for p in (self.proj0, self.proj1, self.proj2):
            nn.init.zeros_(p.weight)
            nn.init.zeros_(p.bias)

    def lora_layer_shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {}
        for name, mod in self.tower.named_modules():
            if isinstance(mod, LoraConv2d):
                cout, cin, kh, kw = mod.weight.shape
                shapes[name] = (cout, cin * kh * kw)
        return shapes

    def set_adapters(self, experts: list) -> None:
        for name, mod in self.tower.named_modules():
            if isinstance(mod, LoraConv2d):
                mod._adapters = [e.entry_for(name) for e in experts]

    def forward(self, cond_pixels: torch.Tensor):
        cond_vec = self.null_cond_vec.expand(cond_pixels.shape[0], -1)
        h0, h1, h2 = self.tower(cond_pixels, cond_vec)
        return self.proj0(h0), self.proj1(h1), self.proj2(h2)


class GlyphDenoiser(nn.Module):
    """eps_theta(z_t, t, c_t, z_I) with additive control-feature injection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w0, w1, w2 = cfg.widths
        self.text = TextEncoder(cfg.d_text, cfg.max_caption_len)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.d_time, cfg.d_cond), nn.SiLU(), nn.Linear(cfg.d_cond, cfg.d_cond)
        )
        self.prompt_proj = nn.Linear(cfg.d_text, cfg.d_cond)
        self.encoder = EncoderTower(cfg, in_ch=cfg.channels)
        self.mid_attn = SelfAttention2d(w2, cfg.groups)
        self.mid_block = ResBlock(w2, w2, cfg.d_cond, cfg.groups)
        self.up2 = nn.ConvTranspose2d(w2, w1, 4, stride=2, padding=1)
        self.dec2 = ResBlock(2 * w1, w1, cfg.d_cond, cfg.groups)
        self.up1 = nn.ConvTranspose2d(w1, w0, 4, stride=2, padding=1)
        self.dec1 = ResBlock(2 * w0, w0, cfg.d_cond, cfg.groups)
        self.out_norm = nn.GroupNorm(math.gcd(cfg.groups, w0), w0)
        self.out_conv = nn.Conv2d(w0, cfg.channels, 3, padding=1)
        self.control = ControlBranch(cfg)
        self.experts = nn.ModuleDict()
        self.eps_calls = 0
        logger.info("denoiser params: %d", sum(p.numel() for p in self.parameters()))

    # -- experts ------------------------------------------------------------

    def add_expert(self, script_id: str) -> LoraExpert:
        expert = LoraExpert(script_id, self.control.lora_layer_shapes(),
                            rank=self.cfg.lora_rank, scale=self.cfg.lora_scale)
        self.experts[script_id] = expert
        return expert

    def _resolve_experts(self, experts_active) -> list:
        out = []
        for e in experts_active or ():
            if isinstance(e, (LoraExpert, MergedExpert)):
                out.append(e)
            elif e in self.experts:
                out.append(self.experts[e])
            else:
                raise KeyError(f"unknown expert {e!r}; available: {sorted(self.experts)}")
        return out

    # -- encoders -----------------------------------------------------------

    def encode_prompt(self, caption: str) -> PromptEmbedding:
        return encode_prompt(caption, self.text)

    def encode_condition(self, cond, experts_active=()) -> GuidanceFeature:
        """Run the control branch over a condition image (or a (b,3,h,w) batch)."""
        if isinstance(cond, ConditionImage):
            pixels = torch.as_tensor(cond.pixels, dtype=torch.float32)[None]
        else:
            pixels = torch.as_tensor(cond, dtype=torch.float32)
            if pixels.ndim == 3:
                pixels = pixels[None]
        h, w = pixels.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"condition dims ({h},{w}) must be divisible by 4")
        experts = self._resolve_experts(experts_active)
        self.control.set_adapters(experts)
        try:
            maps = self.control(pixels)
        finally:
            self.control.set_adapters([])
        chash = hashlib.sha1(np.ascontiguousarray(pixels.detach().numpy()).tobytes()).hexdigest()[:12]
        key = frozenset(getattr(e, "script_id", str(i)) for i, e in enumerate(experts))
        return GuidanceFeature(maps=maps, cond_hash=chash, experts_key=key)

    # -- prediction ---------------------------------------------------------

    def predict_eps(self, z_t: torch.Tensor, t, c_emb: torch.Tensor,
                    z_I: GuidanceFeature | None = None) -> torch.Tensor:
        """Noise prediction; z_t is (b, c, h, w), t an int or (b,) tensor,
        c_emb a (d,) or (b, d) prompt embedding, z_I pre-encoded features."""
        self.eps_calls += 1
        b = z_t.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), dtype=torch.long, device=z_t.device)
        if c_emb.ndim == 1:
            c_emb = c_emb[None].expand(b, -1)
        cond_vec = self.time_mlp(timestep_embedding(t, self.cfg.d_time)) + self.prompt_proj(c_emb)
        h0, h1, h2 = self.encoder(z_t, cond_vec)
        if z_I is not None:
            f0, f1, f2 = z_I.maps
            h0 = h0 + f0
            h1 = h1 + f1
            h2 = h2 + f2
        m = self.mid_attn(h2)
        m = self.mid_block(m, cond_vec)
        d = self.dec2(torch.cat([self.up2(m), h1], dim=1), cond_vec)
        d = self.dec1(torch.cat([self.up1(d), h0], dim=1), cond_vec)
        return self.out_conv(F.silu(self.out_norm(d)))


def init_control_from_base(model: GlyphDenoiser, pretrain_ckpt: dict | None = None) -> ControlBranch:
    """Initialize the control tower from the base encoder (or from a pretrained
    checkpoint's control tower) and re-zero the output projections."""
    if pretrain_ckpt is not None:
        src_cfg = ModelConfig.from_dict(pretrain_ckpt["model_cfg"])
        if src_cfg.widths != model.cfg.widths or src_cfg.channels != model.cfg.channels:
            raise ValueError(
                f"architecture mismatch: checkpoint widths {src_cfg.widths} vs model {model.cfg.widths}"
            )
        tower_state = {
            k[len("control.tower."):]: v
            for k, v in pretrain_ckpt["state"].items()
            if k.startswith("control.tower.")
        }
        model.control.tower.load_state_dict(tower_state)
    else:
        src = model.encoder.state_dict()
        dst = model.control.tower.state_dict()
        compat = {k: v for k, v in src.items() if k in dst and dst[k].shape == v.shape}
        model.control.tower.load_state_dict(compat, strict=False)
    model.control.zero_projections()
    return model.control


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: GlyphDenoiser, sched_dict: dict, step: int = 0,
                    config_hash: str = "", dataset_hash: str = "",
                    optimizer_state: dict | None = None) -> None:
    torch.save({
        "version": CHECKPOINT_VERSION,
        "model_cfg": model.cfg.to_dict(),
        "schedule": sched_dict,
        "state": model.state_dict(),
        "expert_ids": sorted(model.experts.keys()),
        "step": step,
        "config_hash": config_hash,
        "dataset_hash": dataset_hash,
        "optimizer_state": optimizer_state,
    }, path)


def load_checkpoint(path) -> tuple[GlyphDenoiser, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('version')}")
    model = GlyphDenoiser(ModelConfig.from_dict(ckpt["model_cfg"]))
    for sid in ckpt["expert_ids"]:
        model.add_expert(sid)
    model.load_state_dict(ckpt["state"])
    model.eval()
    return model, ckpt
