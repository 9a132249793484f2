"""Low-rank adapters on the cross-attention q/k/v projections.

An adapter bound to a projection ``W`` (d_out x d_in) holds ``A`` (d_out x r)
and ``B`` (d_in x r) and changes the projection to
``x -> W x + (alpha / r) * A (B^T x)``.  ``B`` starts at zero, so injection
does not change the model's output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .model import Linear, VideoDiT, check_block_range, named_projections, parse_projection_name
from .rng import make_stream
from .tensor import Tensor


class AdapterError(ValueError):
    pass


class UnresolvedTargetError(AdapterError):
    def __init__(self, name: str):
        super().__init__(f"adapter target {name!r} does not resolve to a projection")
        self.name = name


@dataclass
class LoraAdapter:
    target_name: str
    A: Tensor
    B: Tensor
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def d_out(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.B.shape[0]

    def delta(self) -> np.ndarray:
        """ΔW = scaling · A Bᵀ, computed in double precision."""
        return self.scaling * (self.A.data.astype(np.float64) @ self.B.data.astype(np.float64).T)

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        h = T.matmul(x.reshape(-1, self.d_in), self.B)
        y = T.linear(h, self.A) * self.scaling
        return y.reshape(*lead, self.d_out)


@dataclass
class AdapterSet:
    adapters: dict[str, LoraAdapter]
    base_config_hash: str
    rank: int
    alpha: float
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.adapters)

    @property
    def target_names(self) -> list[str]:
        return list(self.adapters)


def resolve_projection(model: VideoDiT, name: str) -> Linear:
    try:
        stack, block, attn, role = parse_projection_name(name)
    except ValueError:
        raise UnresolvedTargetError(name) from None
    blocks = getattr(model, stack)
    if block >= len(blocks):
        raise UnresolvedTargetError(name)
    mod = blocks[block]._children.get(attn)
    if mod is None:
        raise UnresolvedTargetError(name)
    return getattr(mod, role)


def _targets_in_range(model: VideoDiT, enc_range, dec_range) -> list[str]:
    names = []
    for name, _ in named_projections(model, "cross"):
        stack, block, _, _ = parse_projection_name(name)
        lo, hi = enc_range if stack == "enc" else dec_range
        if lo <= block <= hi:
            names.append(name)
    return names


def inject(model: VideoDiT, ranges=None, r: int = 8, alpha: float = 16.0, seed: int = 0) -> AdapterSet:
    """Attach fresh adapters to every cross-attention q/k/v projection in the block ranges.

    Freezes every base parameter and returns the new adapter set.
    """
    cfg = model.cfg
    enc_range, dec_range = ranges if ranges is not None else (cfg.lora_encoder_range, cfg.lora_decoder_range)
    check_block_range(tuple(enc_range), cfg.encoder_blocks, "encoder")
    check_block_range(tuple(dec_range), cfg.decoder_blocks, "decoder")
    if r < 1:
        raise AdapterError(f"rank must be >= 1, got {r}")
    if alpha <= 0:
        raise AdapterError(f"alpha must be positive, got {alpha}")

    rng = make_stream(seed, "lora_init")
    adapters = {}
    for name in _targets_in_range(model, enc_range, dec_range):
        proj = resolve_projection(model, name)
        if proj.adapter is not None:
            raise AdapterError(f"projection {name!r} already carries an adapter")
        if r > min(proj.d_out, proj.d_in):
            raise AdapterError(f"rank {r} exceeds min(d_out, d_in) for {name!r}")
        z = rng.standard_normal((proj.d_out, r))
        while (bad := np.abs(z) > 2.0).any():
            z[bad] = rng.standard_normal(int(bad.sum()))
        A = Tensor((0.02 * z).astype(model.dtype), requires_grad=True, name=f"{name}.lora_A")
        B = Tensor(np.zeros((proj.d_in, r), dtype=model.dtype), requires_grad=True, name=f"{name}.lora_B")
        adapters[name] = LoraAdapter(name, A, B, r, float(alpha))

    aset = AdapterSet(adapters, cfg.digest(), r, float(alpha))
    attach(model, aset)
    return aset


def attach(model: VideoDiT, aset: AdapterSet) -> None:
    if aset.base_config_hash != model.cfg.digest():
        raise checkpoint.ConfigMismatchError(model.cfg.digest(), aset.base_config_hash, "model config")
    projs = {name: resolve_projection(model, name) for name in aset.adapters}
    for name, proj in projs.items():
        if proj.adapter is not None:
            raise AdapterError(f"projection {name!r} already carries an adapter")
        ad = aset.adapters[name]
        if ad.A.shape[0] != proj.d_out or ad.B.shape[0] != proj.d_in:
            raise AdapterError(f"adapter {name!r} does not fit a {proj.d_out}x{proj.d_in} projection")
    model.set_trainable(False)
    for name, proj in projs.items():
        proj.adapter = aset.adapters[name]


def detach(model: VideoDiT) -> None:
    for _, m in model.named_modules():
        if isinstance(m, Linear):
            m.adapter = None


def trainable_parameters(aset: AdapterSet) -> list[Tensor]:
    out = []
    for ad in aset.adapters.values():
        out += [ad.A, ad.B]
    return out


def trainable_count(aset: AdapterSet) -> int:
    return sum(p.size for p in trainable_parameters(aset))


def closed_form_trainable_count(aset: AdapterSet) -> int:
    return sum(ad.rank * (ad.d_out + ad.d_in) for ad in aset.adapters.values())


def merge(model: VideoDiT, aset: AdapterSet) -> VideoDiT:
    """Return a new adapter-free model with every target weight replaced by W + scaling·A Bᵀ."""
    if aset.base_config_hash != model.cfg.digest():
        raise checkpoint.ConfigMismatchError(model.cfg.digest(), aset.base_config_hash, "model config")
    for name in aset.adapters:
        resolve_projection(model, name)
    merged = VideoDiT(model.cfg)
    merged.load_state_dict(model.state_dict())
    for name, ad in aset.adapters.items():
        proj = resolve_projection(merged, name)
        w = proj.weight.data.astype(np.float64) + ad.delta()
        proj.weight.data = w.astype(merged.dtype)
    return merged


# -- serialization ---------------------------------------------------------------
def save_adapters(aset: AdapterSet, path) -> str:
    arrays = {}
    for name, ad in aset.adapters.items():
        arrays[f"{name}.A"] = ad.A.data
        arrays[f"{name}.B"] = ad.B.data
    meta = {"r": aset.rank, "alpha": aset.alpha, "base_config_hash": aset.base_config_hash,
            "target_names": aset.target_names, **({"extra": aset.meta} if aset.meta else {})}
    return checkpoint.write(path, arrays, "adapters", meta)


def load_adapters(path, model: VideoDiT, attach_to_model: bool = True) -> AdapterSet:
    """Read an adapter file, check it against ``model``, and (by default) attach it."""
    arrays, meta = checkpoint.read(path, "adapters")
    if meta["base_config_hash"] != model.cfg.digest():
        raise checkpoint.ConfigMismatchError(model.cfg.digest(), meta["base_config_hash"], "model config")
    adapters = {}
    r, alpha = int(meta["r"]), float(meta["alpha"])
    for name in meta["target_names"]:
        resolve_projection(model, name)
        try:
            A, B = arrays[f"{name}.A"], arrays[f"{name}.B"]
        except KeyError:
            raise checkpoint.CorruptFileError(f"missing factors for {name!r}") from None
        adapters[name] = LoraAdapter(name, Tensor(A.astype(model.dtype), requires_grad=True),
                                     Tensor(B.astype(model.dtype), requires_grad=True), r, alpha)
    aset = AdapterSet(adapters, meta["base_config_hash"], r, alpha, meta.get("extra", {}))
    if attach_to_model:
        attach(model, aset)
    return aset


# -- paper-scale reference -------------------------------------------------------
# Approximate full-scale geometry: 14e9 parameters, model width 5120, adapters on
# cross-attention q/k/v of 5 encoder + 5 decoder blocks (blocks 4-8 and 9-13).
REFERENCE_TOTAL_PARAMS = 14_000_000_000
REFERENCE_WIDTH = 5120
REFERENCE_BLOCKS = 5 + 5
REFERENCE_RANK = 8


def reference_trainable_fraction(total_params: int = REFERENCE_TOTAL_PARAMS, width: int = REFERENCE_WIDTH,
                                 blocks: int = REFERENCE_BLOCKS, rank: int = REFERENCE_RANK) -> tuple[int, float]:
    adapters = blocks * 3
    trainable = adapters * rank * (width + width)
    return trainable, trainable / total_params
