"""Guided sampling of full clips in temporal shards, stitched with flow-assisted cross-fades.

Sampling noise is keyed by absolute frame index and reverse-step index, so a
frame receives the same draws whichever shard generates it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import FPS
from .diffusion import NoiseSchedule, cfg_combine, ddpm_reverse_step, forward_noise_closed
from .metrics import perceptual_proxy
from .model import VideoDiT
from .rng import make_stream


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ShardPlan:
    total_frames: int
    shards: tuple[tuple[int, int], ...]
    overlap: int
    # incoming-shard weight at each overlap position; the outgoing shard gets 1 - w
    weights: tuple[float, ...]

    @property
    def lengths(self) -> list[int]:
        return [e - s for s, e in self.shards]


def blend_weights(overlap: int) -> tuple[float, ...]:
    return tuple((i + 1) / (overlap + 1) for i in range(overlap))


def plan_shards(total_frames: int, k: int, overlap: int) -> ShardPlan:
    """Split [0, total_frames) into k intervals where neighbours share ``overlap`` frames.

    Shard length is (total + (k-1)·overlap) / k; any remainder goes one frame
    each to the leading shards.
    """
    if total_frames < 1:
        raise PlanError("total_frames must be >= 1")
    if k < 1:
        raise PlanError("shard count must be >= 1")
    if overlap < 0:
        raise PlanError("overlap must be >= 0")
    if k == 1:
        return ShardPlan(total_frames, ((0, total_frames),), overlap, blend_weights(overlap))
    n = total_frames + (k - 1) * overlap
    base, extra = divmod(n, k)
    lengths = [base + (1 if j < extra else 0) for j in range(k)]
    if overlap >= min(lengths):
        raise PlanError(f"overlap {overlap} must be shorter than the shard length {min(lengths)}")
    if k > 2 and min(lengths[1:-1]) < 2 * overlap:
        raise PlanError(f"interior shards of length {min(lengths[1:-1])} cannot hold two {overlap}-frame overlaps")
    shards, start = [], 0
    for L in lengths:
        shards.append((start, start + L))
        start += L - overlap
    assert shards[-1][1] == total_frames
    return ShardPlan(total_frames, tuple(shards), overlap, blend_weights(overlap))


def is_feasible(total_frames: int, k: int, overlap: int) -> bool:
    try:
        plan_shards(total_frames, k, overlap)
    except PlanError:
        return False
    return True


# -- flow and blending -------------------------------------------------------------------
def _as_chw(frame) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    return f[None] if f.ndim == 2 else f


def estimate_flow(frame_a, frame_b, block: int = 4, radius: int = 3) -> np.ndarray:
    """Block-matching displacement from ``frame_a`` into ``frame_b``.

    Returns an int array (H/block, W/block, 2) of (dy, dx) such that block
    content at p in a best matches b at p + (dy, dx) by summed absolute
    difference.  Candidates leaving the frame are skipped; ties prefer the
    smaller displacement, then the lexicographically smaller (dy, dx).
    """
    a, b = _as_chw(frame_a), _as_chw(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    _, H, W = a.shape
    if H % block or W % block:
        raise ValueError(f"block size {block} does not divide {H}x{W}")
    cands = sorted(((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
                   key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    flow = np.zeros((H // block, W // block, 2), dtype=np.int64)
    for by in range(H // block):
        for bx in range(W // block):
            y0, x0 = by * block, bx * block
            ref = a[:, y0:y0 + block, x0:x0 + block]
            best, best_d = np.inf, (0, 0)
            for dy, dx in cands:
                y, x = y0 + dy, x0 + dx
                if y < 0 or x < 0 or y + block > H or x + block > W:
                    continue
                sad = np.abs(ref - b[:, y:y + block, x:x + block]).sum()
                if sad < best:
                    best, best_d = sad, (dy, dx)
            flow[by, bx] = best_d
    return flow


def warp(frame, flow: np.ndarray, scale: float, block: int = 4) -> np.ndarray:
    """Nearest-pixel backward warp: out(p) = frame(p + round(scale · flow(block of p))), clamped."""
    f = np.asarray(frame)
    H, W = f.shape[-2:]
    dense = np.repeat(np.repeat(flow, block, axis=0), block, axis=1)[:H, :W]
    dy = np.round(scale * dense[..., 0]).astype(np.int64)
    dx = np.round(scale * dense[..., 1]).astype(np.int64)
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    sy = np.clip(yy + dy, 0, H - 1)
    sx = np.clip(xx + dx, 0, W - 1)
    return f[..., sy, sx]


def blend_overlap(outgoing, incoming, weights, flows=None, block: int = 4) -> np.ndarray:
    """Cross-fade two overlapping frame runs; ``flows[i]`` maps outgoing[i] into incoming[i]."""
    outgoing, incoming = np.asarray(outgoing), np.asarray(incoming)
    if outgoing.shape != incoming.shape:
        raise ValueError(f"overlap runs differ: {outgoing.shape} vs {incoming.shape}")
    if len(weights) != len(outgoing):
        raise ValueError(f"{len(weights)} weights for {len(outgoing)} overlap frames")
    if flows is not None and len(flows) != len(outgoing):
        raise ValueError("one flow field is needed per overlap frame")
    out = np.empty(outgoing.shape, dtype=np.result_type(outgoing, incoming, np.float32))
    for i, w in enumerate(weights):
        inc = incoming[i]
        if flows is not None:
            inc = warp(inc, flows[i], 1.0 - w, block)
        out[i] = (1.0 - w) * outgoing[i] + w * inc
    return out


def assemble(plan: ShardPlan, shard_frames: list[np.ndarray], flow_block: int = 4,
             flow_radius: int = 3) -> np.ndarray:
    if len(shard_frames) != len(plan.shards):
        raise ValueError("one frame run is needed per shard")
    for (s, e), fr in zip(plan.shards, shard_frames):
        if len(fr) != e - s:
            raise ValueError(f"shard [{s},{e}) has {len(fr)} frames")
    o = plan.overlap
    out = np.empty((plan.total_frames, *shard_frames[0].shape[1:]), dtype=shard_frames[0].dtype)
    out[: plan.shards[0][1]] = shard_frames[0]
    for j in range(1, len(plan.shards)):
        s, e = plan.shards[j]
        inc = shard_frames[j]
        if o:
            outgoing = out[s:s + o]
            flows = [estimate_flow(outgoing[i], inc[i], flow_block, flow_radius) for i in range(o)]
            out[s:s + o] = blend_overlap(outgoing, inc[:o], plan.weights, flows, flow_block)
        out[s + o:e] = inc[o:]
    return out


# -- sampling --------------------------------------------------------------------------------
@dataclass
class GenRequest:
    first_frame: np.ndarray
    tokens: list[int]
    num_frames: int = 96
    cfg_scale: float = 3.8
    steps: int = 30
    seed: int = 0
    shards: int = 1
    overlap: int = 4
    fps: int = FPS
    T_diff: int = 100
    flow_block: int = 4
    flow_radius: int = 3

    def __post_init__(self):
        self.first_frame = np.asarray(self.first_frame, dtype=np.float32)
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.steps > self.T_diff:
            raise ValueError(f"steps must be <= {self.T_diff}")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if self.shards < 1:
            raise ValueError("shards must be >= 1")
        if self.overlap < 0:
            raise ValueError("overlap must be >= 0")


def _frame_noise(seed: int, name: str, frames: range, step: int | None, shape) -> np.ndarray:
    idx = () if step is None else (step,)
    return np.stack([make_stream(seed, name, f, *idx).standard_normal(shape) for f in frames]).astype(np.float32)


def initial_noise(request: GenRequest, interval: tuple[int, int], shape) -> np.ndarray:
    return _frame_noise(request.seed, "init", range(*interval), None, shape)


def generate_shard(model: VideoDiT, request: GenRequest, interval: tuple[int, int], init_noise=None,
                   prev_tail=None) -> np.ndarray:
    """Run the respaced guided reverse chain over the frames in ``interval``.

    With ``prev_tail`` the leading frames are replaced at every step by the
    forward-noised tail of the previous shard.
    """
    s, e = interval
    if not 0 <= s < e <= request.num_frames:
        raise PlanError(f"interval [{s},{e}) outside [0, {request.num_frames})")
    shape = tuple(request.first_frame.shape)
    if init_noise is None:
        init_noise = initial_noise(request, interval, shape)
    x = np.array(init_noise, dtype=np.float32)
    if x.shape != (e - s, *shape):
        raise ValueError(f"init noise shape {x.shape} does not match interval [{s},{e})")
    tail = None if prev_tail is None else np.asarray(prev_tail, dtype=np.float32)
    if tail is not None and len(tail) >= e - s:
        raise ValueError("tail must be shorter than the shard")

    sched = NoiseSchedule.linear(request.T_diff).respace(request.steps)
    cond = model.encode_caption(request.tokens)
    null = model.null_caption()
    ff = request.first_frame
    with T.no_grad():
        for i in reversed(range(sched.T_diff)):
            if tail is not None:
                anchor = _frame_noise(request.seed, "anchor", range(s, s + len(tail)), i, shape)
                x[: len(tail)] = forward_noise_closed(tail, i, anchor, sched)
            t = int(sched.timesteps[i])
            eps_c = model(x, t, cond, ff).data
            eps_u = model(x, t, null, ff).data
            eps = cfg_combine(eps_c, eps_u, request.cfg_scale)
            noise = _frame_noise(request.seed, "step", range(s, e), i, shape) if i > 0 else None
            x = ddpm_reverse_step(x, eps, i, sched, noise).astype(np.float32)
    return np.clip(x, -1.0, 1.0)


def generate_unsharded(model: VideoDiT, request: GenRequest) -> np.ndarray:
    """Reference path: the whole clip in one reverse chain, no planning or blending."""
    return generate_shard(model, request, (0, request.num_frames))


@dataclass
class GenReport:
    plan: ShardPlan
    seed: int
    shard_seconds: list[float] = field(default_factory=list)
    proxy_divergence: float | None = None
    mean_abs_divergence: float | None = None

    def to_json(self) -> dict:
        return {"num_frames": self.plan.total_frames, "shards": [list(iv) for iv in self.plan.shards],
                "overlap": self.plan.overlap, "blend_weights": list(self.plan.weights), "seed": self.seed,
                "noise_streams": ["init/frame", "step/frame/step", "anchor/frame/step"],
                "shard_seconds": self.shard_seconds, "proxy_divergence": self.proxy_divergence,
                "mean_abs_divergence": self.mean_abs_divergence}


def generate_full(model: VideoDiT, request: GenRequest, compare_single: bool = False) -> tuple[np.ndarray, GenReport]:
    """Plan, generate each shard in order (tail anchored on its predecessor), blend and assemble."""
    plan = plan_shards(request.num_frames, request.shards, request.overlap)
    report = GenReport(plan, request.seed)
    runs = []
    for j, interval in enumerate(plan.shards):
        t0 = time.perf_counter()
        tail = None
        if j > 0 and plan.overlap:
            prev_s, _ = plan.shards[j - 1]
            tail = runs[-1][interval[0] - prev_s: interval[0] - prev_s + plan.overlap]
        runs.append(generate_shard(model, request, interval, prev_tail=tail))
        report.shard_seconds.append(time.perf_counter() - t0)
    clip = runs[0] if len(runs) == 1 else assemble(plan, runs, request.flow_block, request.flow_radius)
    if compare_single:
        ref = generate_unsharded(model, request)
        report.proxy_divergence = perceptual_proxy(clip, ref)
        report.mean_abs_divergence = float(np.abs(clip.astype(np.float64) - ref).mean())
    return clip, report
