"""Adapter training: loss assembly, gradient accumulation, validation, early stopping, resume.

A "step" is one optimizer update, made after ``grad_accum`` micro-batches of a
single 33-frame window each.  Every ``eval_interval`` steps (and at step 0)
the validation metric is computed on frozen windows, timesteps and noise.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import FRAME_BUCKET, ClipRecord, DataError, Manifest, sample_window
from .diffusion import NoiseSchedule, forward_noise_closed, predict_x0
from .lora import AdapterSet, trainable_parameters
from .metrics import perceptual_proxy
from .model import VideoDiT
from .optim import AdamWState, LrSchedule, adamw_step, lr_at
from .rng import RngStreams, make_stream
from .tensor import Tensor


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, batch_ids: list[str]):
        super().__init__(f"{message}; offending batch: {batch_ids}")
        self.batch_ids = batch_ids


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 4000
    lr_peak: float = 3e-5
    warmup_fraction: float = 0.05
    grad_accum: int = 4
    lambda_temporal: float = 0.1
    eval_interval: int = 200
    patience: int = 3
    seed: int = 0
    r: int = 8
    alpha: float = 16.0
    caption_dropout: float = 0.1
    weight_decay: float = 0.01
    T_diff: int = 100
    window: int = FRAME_BUCKET
    val_windows: int = 8
    # validation timesteps are drawn from the lower part of the schedule where x0 estimates are informative
    val_t_fraction: float = 0.5

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 1 <= self.eval_interval <= self.total_steps:
            raise ValueError("eval_interval must lie in [1, total_steps]")
        if self.lambda_temporal < 0:
            raise ValueError("lambda_temporal must be >= 0")
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")
        if not 0.0 <= self.caption_dropout < 1.0:
            raise ValueError("caption_dropout must lie in [0, 1)")
        if self.val_windows < 1:
            raise ValueError("val_windows must be >= 1")
        if not 0.0 < self.val_t_fraction <= 1.0:
            raise ValueError("val_t_fraction must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown training keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    step: int = 0
    best_val_metric: float = math.inf
    evals_since_improve: int = 0
    optimizer: list[AdamWState] = field(default_factory=list)
    rng: RngStreams | None = None
    log_lines: int = 0


# -- losses --------------------------------------------------------------------------------
def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def diffusion_loss(eps, eps_hat) -> Tensor:
    eps, eps_hat = _as_tensor(eps), _as_tensor(eps_hat)
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {eps.shape} vs {eps_hat.shape}")
    return T.mse(eps_hat, eps)


def temporal_loss(eps_hat) -> Tensor:
    """Mean over adjacent frame pairs of the element-averaged squared difference."""
    eps_hat = _as_tensor(eps_hat)
    if eps_hat.ndim < 1 or eps_hat.shape[0] < 2:
        raise ValueError("temporal_loss needs at least 2 frames")
    d = eps_hat[1:] - eps_hat[:-1]
    return T.mean(T.square(d))


def total_loss(l_diff, l_temp, lam: float):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0:
        return l_diff
    return l_diff + l_temp * lam


# -- early stopping ------------------------------------------------------------------------
class EarlyStopping:
    """Tracks the best metric; ``update`` returns True once ``patience`` evals in a row fail to improve."""

    def __init__(self, patience: int, best: float = math.inf, since: int = 0):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = best
        self.since = since

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.since = 0
        else:
            self.since += 1
        return self.since >= self.patience


# -- validation ----------------------------------------------------------------------------
@dataclass
class ValidationItem:
    video_id: str
    x0: np.ndarray
    t: int
    noise: np.ndarray
    tokens: list[int]


class ValidationSet:
    """Frozen validation windows, timesteps and noise, derived only from the seed."""

    def __init__(self, records: list[ClipRecord], config: TrainConfig, dtype=np.float32):
        if not records:
            raise DataError("validation split is empty")
        rng = make_stream(config.seed, "validation")
        t_max = max(1, int(round(config.T_diff * config.val_t_fraction)))
        self.items = []
        for i in range(config.val_windows):
            rec = records[i % len(records)]
            x0 = sample_window(rec, rng, config.window).astype(dtype)
            t = int(rng.integers(0, t_max))
            noise = rng.standard_normal(x0.shape).astype(dtype)
            self.items.append(ValidationItem(rec.video_id, x0, t, noise, list(rec.tokens)))
        self.schedule = NoiseSchedule.linear(config.T_diff)

    def evaluate(self, model: VideoDiT) -> float:
        with T.no_grad():
            scores = []
            for it in self.items:
                x_t = forward_noise_closed(it.x0, it.t, it.noise, self.schedule)
                eps_hat = model(x_t, it.t, model.encode_caption(it.tokens), it.x0[0]).data
                x0_hat = np.clip(predict_x0(x_t, eps_hat, it.t, self.schedule), -1.0, 1.0)
                scores.append(perceptual_proxy(x0_hat, it.x0))
        return float(np.mean(scores))


# -- one micro-batch -------------------------------------------------------------------------
@dataclass
class MicroBatch:
    video_id: str
    offset: int
    t: int
    dropped: bool
    x0: np.ndarray
    noise: np.ndarray
    tokens: list[int]


def draw_micro_batch(records: list[ClipRecord], rng: RngStreams, config: TrainConfig,
                     schedule: NoiseSchedule, dtype=np.float32) -> MicroBatch:
    rec = records[int(rng("clip").integers(len(records)))]
    x0, offset = sample_window(rec, rng("window"), config.window, return_offset=True)
    dropped = bool(rng("caption_dropout").random() < config.caption_dropout)
    t = int(rng("timestep").integers(schedule.T_diff))
    noise = rng("noise").standard_normal(x0.shape).astype(dtype)
    return MicroBatch(rec.video_id, offset, t, dropped, x0.astype(dtype), noise, list(rec.tokens))


def micro_batch_loss(model: VideoDiT, mb: MicroBatch, schedule: NoiseSchedule, lam: float):
    """Return (l_total, l_diff, l_temp) tensors for one window."""
    x_t = forward_noise_closed(mb.x0, mb.t, mb.noise, schedule)
    cap = model.null_caption() if mb.dropped else model.encode_caption(mb.tokens)
    eps_hat = model(x_t, mb.t, cap, mb.x0[0])
    l_diff = diffusion_loss(Tensor(mb.noise), eps_hat)
    l_temp = temporal_loss(eps_hat)
    return total_loss(l_diff, l_temp, lam), l_diff, l_temp


def accumulate(model: VideoDiT, batches: list[MicroBatch], schedule: NoiseSchedule, lam: float):
    """Backpropagate the mean loss over ``batches`` one micro-batch at a time.

    Returns per-batch (l_diff, l_temp, l_total) floats.
    """
    out = []
    w = 1.0 / len(batches)
    for mb in batches:
        l_tot, l_diff, l_temp = micro_batch_loss(model, mb, schedule, lam)
        (l_tot * w).backward()
        out.append((l_diff.item(), l_temp.item(), l_tot.item()))
    return out


# -- the loop --------------------------------------------------------------------------------
@dataclass
class TrainResult:
    log: list[dict]
    state: TrainState
    stopped_early: bool
    val_history: list[tuple[int, float]]


def param_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def base_digest(model: VideoDiT) -> str:
    return param_digest(model.parameters())


def _json_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


class _Log:
    def __init__(self, path: Path | None, keep_lines: int | None):
        self.records: list[dict] = []
        self.path = path
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            if keep_lines is None:
                path.write_text("")
            else:
                lines = path.read_text().splitlines(keepends=True)[:keep_lines]
                path.write_text("".join(lines))
                self.records = [json.loads(s) for s in lines]
            self._fh = path.open("a")

    def emit(self, rec: dict) -> None:
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(_json_line(rec) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _save_state(ckpt_dir: Path, params: list[Tensor], state: TrainState, stopper: EarlyStopping) -> None:
    arrays = {}
    for i, (p, s) in enumerate(zip(params, state.optimizer)):
        arrays[f"param.{i}"] = p.data
        arrays[f"m.{i}"] = s.first_moment
        arrays[f"v.{i}"] = s.second_moment
    meta = {"step": state.step, "best_val_metric": stopper.best if math.isfinite(stopper.best) else None,
            "evals_since_improve": stopper.since, "opt_steps": [s.step_count for s in state.optimizer],
            "rng": state.rng.state(), "log_lines": state.log_lines}
    checkpoint.write(ckpt_dir / "train_state.ckpt", arrays, "train_state", meta)


def _load_state(ckpt_dir: Path, params: list[Tensor], config: TrainConfig) -> TrainState:
    arrays, meta = checkpoint.read(ckpt_dir / "train_state.ckpt", "train_state")
    if len(meta["opt_steps"]) != len(params):
        raise checkpoint.CheckpointError("checkpoint does not match the trainable parameter set")
    opt = []
    for i, p in enumerate(params):
        if arrays[f"param.{i}"].shape != p.shape:
            raise checkpoint.CheckpointError(f"parameter {i} shape mismatch on resume")
        p.data = arrays[f"param.{i}"].astype(p.data.dtype)
        opt.append(AdamWState(arrays[f"m.{i}"].copy(), arrays[f"v.{i}"].copy(), meta["opt_steps"][i],
                              weight_decay=config.weight_decay))
    best = meta["best_val_metric"]
    return TrainState(meta["step"], math.inf if best is None else best, meta["evals_since_improve"], opt,
                      RngStreams.from_state(meta["rng"]), meta["log_lines"])


def run_training(model: VideoDiT, params: list[Tensor], manifest: Manifest, config: TrainConfig,
                 log_path=None, checkpoint_dir=None, resume: bool = False,
                 validate: Callable[[VideoDiT, int], float] | None = None,
                 stop_after: int | None = None) -> TrainResult:
    """Optimize ``params`` (leaf tensors of ``model``) with the diffusion + temporal objective.

    ``validate`` overrides the built-in validation metric (useful for scripted tests).
    ``stop_after`` halts after that many optimizer steps without finishing the
    schedule, simulating an interruption.
    """
    train_recs, val_recs = manifest.train, manifest.validation
    if not train_recs:
        raise DataError("training split is empty")
    if not val_recs and validate is None:
        raise DataError("validation split is empty")
    if not params:
        raise ValueError("no trainable parameters")
    schedule = NoiseSchedule.linear(config.T_diff)
    lrs = LrSchedule(config.lr_peak, config.total_steps, config.warmup_fraction)
    if validate is None:
        vset = ValidationSet(val_recs, config, model.dtype)

        def validate(m, _step):
            return vset.evaluate(m)

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if resume:
        if ckpt_dir is None:
            raise ValueError("resume needs a checkpoint directory")
        state = _load_state(ckpt_dir, params, config)
        log = _Log(Path(log_path) if log_path else None, state.log_lines)
    else:
        state = TrainState(optimizer=[AdamWState.for_param(p, weight_decay=config.weight_decay) for p in params],
                           rng=RngStreams(config.seed))
        log = _Log(Path(log_path) if log_path else None, None)
    stopper = EarlyStopping(config.patience, state.best_val_metric, state.evals_since_improve)
    history = [(r["step"], r["val_metric"]) for r in log.records if r.get("kind") == "eval"]

    def do_eval(step: int) -> bool:
        value = float(validate(model, step))
        stop = stopper.update(value)
        history.append((step, value))
        log.emit({"kind": "eval", "step": step, "val_metric": value, "best": stopper.best,
                  "evals_since_improve": stopper.since})
        return stop

    stopped = False
    try:
        if state.step == 0 and not resume:
            # the step-0 baseline is the reference, not a patience-counted evaluation
            value = float(validate(model, 0))
            stopper.best = value
            history.append((0, value))
            log.emit({"kind": "eval", "step": 0, "val_metric": value, "best": value, "evals_since_improve": 0})
            state.log_lines = len(log.records)
            if ckpt_dir is not None:
                _save_state(ckpt_dir, params, state, stopper)
        done = 0
        while state.step < config.total_steps and not stopped:
            if stop_after is not None and done >= stop_after:
                break
            step = state.step + 1
            for p in params:
                p.grad = None
            batches = [draw_micro_batch(train_recs, state.rng, config, schedule, model.dtype)
                       for _ in range(config.grad_accum)]
            losses = accumulate(model, batches, schedule, config.lambda_temporal)
            ids = [f"{b.video_id}@{b.offset}:t{b.t}" for b in batches]
            if not all(math.isfinite(v) for trip in losses for v in trip) or not all(
                    np.isfinite(p.grad).all() for p in params if p.grad is not None):
                if ckpt_dir is not None:
                    (ckpt_dir / "aborted_batch.json").write_text(json.dumps({"step": step, "batch": ids}) + "\n")
                raise TrainingAborted(f"non-finite loss at step {step}", ids)
            lr = lr_at(lrs, step)
            for p, s in zip(params, state.optimizer):
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                adamw_step(p, s, lr)
                p.grad = None
            mean = np.mean(np.array(losses), axis=0)
            log.emit({"kind": "step", "step": step, "lr": lr, "l_diff": float(mean[0]),
                      "l_temp": float(mean[1]), "l_total": float(mean[2])})
            state.step = step
            done += 1
            if step % config.eval_interval == 0 or step == config.total_steps:
                stopped = do_eval(step)
                state.log_lines = len(log.records)
                state.best_val_metric, state.evals_since_improve = stopper.best, stopper.since
                if ckpt_dir is not None:
                    _save_state(ckpt_dir, params, state, stopper)
    finally:
        log.close()
    state.best_val_metric, state.evals_since_improve = stopper.best, stopper.since
    return TrainResult(log.records, state, stopped, history)


def train(model: VideoDiT, adapters: AdapterSet, manifest: Manifest, config: TrainConfig, **kw) -> TrainResult:
    """Train only the adapter factors; base weights stay frozen."""
    return run_training(model, trainable_parameters(adapters), manifest, config, **kw)


def pretrain_base(model: VideoDiT, manifest: Manifest, config: TrainConfig, **kw) -> TrainResult:
    """Full-parameter training used to produce a small base model before adaptation."""
    model.set_trainable(True)
    try:
        return run_training(model, model.parameters(), manifest, config, **kw)
    finally:
        model.set_trainable(False)
