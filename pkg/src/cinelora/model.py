"""Miniature pixel-space image-to-video denoiser.

Layout of one forward pass::

    window (F, C, H, W) --patchify--> (F, P, C·p·p) --embed--> (F, P, D)
      + spatial position embedding + timestep embedding
    encoder blocks: per-frame self-attention over patches,
                    cross-attention to [caption tokens ; clean first-frame patches]
    decoder blocks: per-patch temporal self-attention across frames
                    (banded, with a learned relative-offset bias),
                    cross-attention to caption tokens
    linear -> unpatchify -> eps_hat (F, C, H, W)

There is no norm before the output projection: at high noise the target is
close to the input itself, and the un-normalized residual stream keeps that
linear path open at every input scale.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .captions import NULL_ID, VOCAB_SIZE
from .rng import make_stream
from .tensor import Tensor

# fields that do not change the parameter layout, excluded from the config digest
_NON_ARCH_FIELDS = ("lora_encoder_range", "lora_decoder_range", "dtype", "init_seed")


@dataclass(frozen=True)
class ModelConfig:
    frame_size: tuple[int, int] = (16, 16)
    patch_size: int = 4
    channels: int = 3
    d_model: int = 64
    n_heads: int = 4
    encoder_blocks: int = 4
    decoder_blocks: int = 4
    vocab_size: int = VOCAB_SIZE
    max_caption_len: int = 24
    mlp_ratio: int = 4
    temporal_radius: int = 3
    lora_encoder_range: tuple[int, int] = (1, 2)
    lora_decoder_range: tuple[int, int] = (1, 2)
    dtype: str = "float32"
    init_seed: int = 0

    def __post_init__(self):
        h, w = self.frame_size
        object.__setattr__(self, "frame_size", (int(h), int(w)))
        object.__setattr__(self, "lora_encoder_range", tuple(int(v) for v in self.lora_encoder_range))
        object.__setattr__(self, "lora_decoder_range", tuple(int(v) for v in self.lora_decoder_range))
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"frame size {self.frame_size} not divisible by patch size {self.patch_size}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.temporal_radius < 0:
            raise ValueError("temporal_radius must be >= 0")
        for rng, n, label in ((self.lora_encoder_range, self.encoder_blocks, "encoder"),
                              (self.lora_decoder_range, self.decoder_blocks, "decoder")):
            check_block_range(rng, n, label)
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def num_patches(self) -> int:
        h, w = self.frame_size
        return (h // self.patch_size) * (w // self.patch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("frame_size", "lora_encoder_range", "lora_decoder_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def digest(self) -> str:
        arch = {k: v for k, v in self.to_dict().items() if k not in _NON_ARCH_FIELDS}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


def check_block_range(rng: tuple[int, int], n_blocks: int, label: str = "block") -> None:
    lo, hi = rng
    if not (0 <= lo <= hi <= n_blocks - 1):
        raise ValueError(f"{label} range {list(rng)} outside [0, {n_blocks - 1}]")


# -- module plumbing ----------------------------------------------------------
class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, t: Tensor) -> Tensor:
        t.requires_grad = True
        self._params[name] = t
        return t

    def add_child(self, name: str, m: "Module") -> "Module":
        self._children[name] = m
        return m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for n, m in self._children.items():
            yield from m.named_parameters(f"{prefix}{n}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        for n, m in self._children.items():
            yield prefix + n, m
            yield from m.named_modules(f"{prefix}{n}.")


class _Init:
    """Truncated-normal (±2σ) initializer drawing from one named stream."""

    def __init__(self, seed: int, dtype):
        self.rng = make_stream(seed, "init")
        self.dtype = dtype

    def normal(self, shape, std: float = 0.02) -> Tensor:
        z = self.rng.standard_normal(shape)
        bad = np.abs(z) > 2.0
        while bad.any():
            z[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(z) > 2.0
        return Tensor((z * std).astype(self.dtype))

    def zeros(self, shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=self.dtype))

    def ones(self, shape) -> Tensor:
        return Tensor(np.ones(shape, dtype=self.dtype))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, init: _Init):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = self.add_param("weight", init.normal((d_out, d_in)))
        self.bias = self.add_param("bias", init.zeros((d_out,)))
        self.adapter = None  # set by lora.inject

    def __call__(self, x: Tensor) -> Tensor:
        y = T.linear(x, self.weight, self.bias)
        if self.adapter is not None:
            y = y + self.adapter(x)
        return y


class LayerNorm(Module):
    def __init__(self, d: int, init: _Init):
        super().__init__()
        self.weight = self.add_param("weight", init.ones((d,)))
        self.bias = self.add_param("bias", init.zeros((d,)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


class MLP(Module):
    def __init__(self, d: int, hidden: int, init: _Init):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(d, hidden, init))
        self.fc2 = self.add_child("fc2", Linear(hidden, d, init))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head attention.  ``x_q``: (..., Lq, D); ``x_kv``: (..., Lk, D), broadcastable batch."""

    def __init__(self, d: int, n_heads: int, init: _Init):
        super().__init__()
        self.n_heads = n_heads
        self.q = self.add_child("q", Linear(d, d, init))
        self.k = self.add_child("k", Linear(d, d, init))
        self.v = self.add_child("v", Linear(d, d, init))
        self.o = self.add_child("o", Linear(d, d, init))

    def _heads(self, x: Tensor) -> Tensor:
        *lead, L, D = x.shape
        h = self.n_heads
        x = x.reshape(*lead, L, h, D // h)
        n = len(lead)
        return x.transpose(*range(n), n + 1, n, n + 2)

    def __call__(self, x_q: Tensor, x_kv: Tensor, bias: Tensor | None = None) -> Tensor:
        q, k, v = self._heads(self.q(x_q)), self._heads(self.k(x_kv)), self._heads(self.v(x_kv))
        dh = q.shape[-1]
        n = k.ndim
        kt = k.transpose(*range(n - 2), n - 1, n - 2)
        scores = T.matmul(q, kt) * (1.0 / math.sqrt(dh))
        if bias is not None:
            scores = scores + bias
        out = T.matmul(T.softmax(scores, axis=-1), v)
        *lead, h, L, dh = out.shape
        nl = len(lead)
        out = out.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, L, h * dh)
        return self.o(out)


class EncoderBlock(Module):
    """Per-frame spatial block."""

    def __init__(self, cfg: ModelConfig, init: _Init):
        super().__init__()
        d = cfg.d_model
        self.norm1 = self.add_child("norm1", LayerNorm(d, init))
        self.self_attn = self.add_child("self", Attention(d, cfg.n_heads, init))
        self.norm2 = self.add_child("norm2", LayerNorm(d, init))
        self.cross = self.add_child("cross", Attention(d, cfg.n_heads, init))
        self.norm3 = self.add_child("norm3", LayerNorm(d, init))
        self.mlp = self.add_child("mlp", MLP(d, d * cfg.mlp_ratio, init))

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross(self.norm2(x), context)
        return x + self.mlp(self.norm3(x))


class DecoderBlock(Module):
    """Per-patch temporal block; ``x`` is laid out (P, F, D)."""

    def __init__(self, cfg: ModelConfig, init: _Init):
        super().__init__()
        d = cfg.d_model
        self.radius = cfg.temporal_radius
        self.norm1 = self.add_child("norm1", LayerNorm(d, init))
        self.temporal = self.add_child("temporal", Attention(d, cfg.n_heads, init))
        self.rel_bias = self.add_param("rel_bias", init.zeros((2 * cfg.temporal_radius + 1, cfg.n_heads)))
        self.norm2 = self.add_child("norm2", LayerNorm(d, init))
        self.cross = self.add_child("cross", Attention(d, cfg.n_heads, init))
        self.norm3 = self.add_child("norm3", LayerNorm(d, init))
        self.mlp = self.add_child("mlp", MLP(d, d * cfg.mlp_ratio, init))

    def temporal_bias(self, n_frames: int) -> Tensor:
        idx, mask = _band(n_frames, self.radius)
        bias = T.take(self.rel_bias, idx).transpose(2, 0, 1)  # (H, F, F)
        return bias + Tensor(mask.astype(self.rel_bias.dtype))

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.temporal(h, h, bias=self.temporal_bias(x.shape[1]))
        x = x + self.cross(self.norm2(x), context)
        return x + self.mlp(self.norm3(x))


_BAND_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _band(n: int, radius: int) -> tuple[np.ndarray, np.ndarray]:
    key = (n, radius)
    if key not in _BAND_CACHE:
        off = np.arange(n)[None, :] - np.arange(n)[:, None]
        idx = np.clip(off + radius, 0, 2 * radius)
        mask = np.where(np.abs(off) <= radius, 0.0, -1e9)
        _BAND_CACHE[key] = (idx, mask)
    return _BAND_CACHE[key]


@dataclass
class CaptionEncoding:
    token_ids: tuple[int, ...]
    embedding: Tensor
    is_null: bool = False


@dataclass
class DenoiserOutput:
    eps_hat: Tensor


def timestep_embedding(t: int, dim: int, dtype=np.float32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(dtype)


class VideoDiT(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        init = _Init(cfg.init_seed, np.dtype(cfg.dtype))
        d = cfg.d_model
        self.patch_embed = self.add_child("patch_embed", Linear(cfg.patch_dim, d, init))
        self.pos_embed = self.add_param("pos_embed", init.normal((cfg.num_patches, d)))
        self.time_proj = self.add_child("time_proj", Linear(d, d, init))
        self.caption_table = self.add_param("caption_table", init.normal((cfg.vocab_size, d)))
        self.enc = self.add_child("enc", _Stack([EncoderBlock(cfg, init) for _ in range(cfg.encoder_blocks)]))
        self.dec = self.add_child("dec", _Stack([DecoderBlock(cfg, init) for _ in range(cfg.decoder_blocks)]))
        self.out_proj = self.add_child("out_proj", Linear(d, cfg.patch_dim, init))

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    # -- captions -----------------------------------------------------------
    def encode_caption(self, token_ids) -> CaptionEncoding:
        ids = tuple(int(i) for i in token_ids)
        if len(ids) > self.cfg.max_caption_len:
            raise ValueError(f"caption has {len(ids)} tokens, max is {self.cfg.max_caption_len}")
        for i in ids:
            if not 0 <= i < self.cfg.vocab_size:
                raise ValueError(f"token id {i} outside vocabulary of size {self.cfg.vocab_size}")
        is_null = len(ids) == 0 or ids == (NULL_ID,)
        if is_null:
            ids = (NULL_ID,)
        return CaptionEncoding(ids, T.take(self.caption_table, np.array(ids)), is_null)

    def null_caption(self) -> CaptionEncoding:
        return self.encode_caption(())

    # -- patch layout ---------------------------------------------------------
    def patchify(self, x: Tensor) -> Tensor:
        F, C, H, W = x.shape
        p = self.cfg.patch_size
        x = x.reshape(F, C, H // p, p, W // p, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(F, (H // p) * (W // p), C * p * p)

    def unpatchify(self, x: Tensor) -> Tensor:
        F = x.shape[0]
        C, p = self.cfg.channels, self.cfg.patch_size
        H, W = self.cfg.frame_size
        x = x.reshape(F, H // p, W // p, C, p, p).transpose(0, 3, 1, 4, 2, 5)
        return x.reshape(F, C, H, W)

    # -- forward ---------------------------------------------------------------
    def denoise(self, window, t: int, caption: CaptionEncoding, first_frame) -> DenoiserOutput:
        cfg = self.cfg
        window = window if isinstance(window, Tensor) else Tensor(np.asarray(window, dtype=self.dtype))
        first_frame = first_frame if isinstance(first_frame, Tensor) else Tensor(
            np.asarray(first_frame, dtype=self.dtype))
        expect = (cfg.channels, *cfg.frame_size)
        if window.ndim != 4 or tuple(window.shape[1:]) != expect:
            raise ValueError(f"window shape {window.shape} does not match (F, {expect})")
        if tuple(first_frame.shape) != expect:
            raise ValueError(f"first frame shape {first_frame.shape} does not match {expect}")

        temb = T.linear(Tensor(timestep_embedding(t, cfg.d_model, self.dtype)), self.time_proj.weight,
                        self.time_proj.bias)
        x = self.patch_embed(self.patchify(window)) + self.pos_embed + temb  # (F, P, D)
        ff = self.patch_embed(self.patchify(first_frame.reshape(1, *expect))).reshape(
            cfg.num_patches, cfg.d_model) + self.pos_embed
        enc_context = T.concat([caption.embedding, ff], axis=0)
        for blk in self.enc:
            x = blk(x, enc_context)
        x = x.transpose(1, 0, 2)  # (P, F, D)
        for blk in self.dec:
            x = blk(x, caption.embedding)
        x = self.out_proj(x).transpose(1, 0, 2)
        return DenoiserOutput(self.unpatchify(x))

    def __call__(self, window, t, caption, first_frame) -> Tensor:
        return self.denoise(window, t, caption, first_frame).eps_hat

    # -- parameter views -----------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for n, p in own.items():
            if state[n].shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {state[n].shape} vs {p.shape}")
            p.data = np.array(state[n], dtype=self.dtype)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class _Stack(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = list(blocks)
        for i, b in enumerate(self.blocks):
            self.add_child(str(i), b)

    def __iter__(self):
        return iter(self.blocks)

    def __getitem__(self, i):
        return self.blocks[i]

    def __len__(self):
        return len(self.blocks)


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count from the layer dimensions."""
    d, hid = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    lin = lambda i, o: i * o + o  # noqa: E731
    attn = 4 * lin(d, d)
    norm = 2 * d
    mlp = lin(d, hid) + lin(hid, d)
    enc = 3 * norm + 2 * attn + mlp
    dec = enc + (2 * cfg.temporal_radius + 1) * cfg.n_heads
    return (lin(cfg.patch_dim, d) + cfg.num_patches * d + lin(d, d) + cfg.vocab_size * d
            + cfg.encoder_blocks * enc + cfg.decoder_blocks * dec + lin(d, cfg.patch_dim))


# -- projection naming -------------------------------------------------------------
_STACKS = {"enc": "encoder", "dec": "decoder"}
_ROLES = ("q", "k", "v")


def format_projection_name(stack: str, block: int, attn: str, role: str) -> str:
    if stack not in _STACKS or role not in _ROLES or attn not in ("cross", "self", "temporal"):
        raise ValueError(f"bad projection name parts {(stack, block, attn, role)}")
    return f"{stack}.{int(block)}.{attn}.{role}"


def parse_projection_name(name: str) -> tuple[str, int, str, str]:
    parts = name.split(".")
    if len(parts) != 4 or not parts[1].isdigit():
        raise ValueError(f"malformed projection name {name!r}")
    stack, block, attn, role = parts[0], int(parts[1]), parts[2], parts[3]
    if format_projection_name(stack, block, attn, role) != name:
        raise ValueError(f"malformed projection name {name!r}")
    return stack, block, attn, role


def named_projections(model: VideoDiT, attn: str = "cross") -> list[tuple[str, Linear]]:
    """Every q/k/v projection of the given attention kind, encoder first, then decoder."""
    out = []
    for stack_name in ("enc", "dec"):
        stack = getattr(model, stack_name)
        for i, blk in enumerate(stack):
            mod = blk._children.get("self" if attn == "self" else attn)
            if mod is None:
                continue
            for role in _ROLES:
                out.append((format_projection_name(stack_name, i, attn, role), getattr(mod, role)))
    return out
