"""Styled-clip corpus: procedural rendering, ingestion, letterboxing, manifests, window sampling.

On-disk layout of a prepared dataset::

    <root>/clips/<video_id>/frame_00000.png ...   letterboxed 8-bit RGB frames
    <root>/clips/<video_id>/meta.json             caption, lighting_tag, scene_id, fps, aspect_ratio
    <root>/manifest.json
    <root>/rejections.tsv                          "clip_id<TAB>reason" per rejected clip
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .captions import LIGHTING_TAGS, UnknownTokenError, make_caption, tokenize
from .rng import make_stream

FRAME_BUCKET = 33
FPS = 24
MIN_AR, MAX_AR = 0.5, 2.0
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DataError(ValueError):
    pass


# -- styles -----------------------------------------------------------------------
@dataclass(frozen=True)
class StyleSpec:
    """Per-channel (gain, gamma) tone curve, vignette, film grain and fog."""

    tone_curve: tuple[tuple[float, float], ...] = ((1.0, 1.0), (1.0, 1.0), (1.0, 1.0))
    vignette_strength: float = 0.0
    grain_std: float = 0.0
    fog_density: float = 0.0

    def __post_init__(self):
        if len(self.tone_curve) != 3:
            raise ValueError("tone_curve needs one (gain, gamma) pair per channel")
        if not 0.0 <= self.vignette_strength <= 1.0:
            raise ValueError("vignette_strength must lie in [0, 1]")
        if self.grain_std < 0:
            raise ValueError("grain_std must be >= 0")
        if not 0.0 <= self.fog_density <= 1.0:
            raise ValueError("fog_density must lie in [0, 1]")


FOG_HAZE = 0.85

STYLE_LIBRARY: dict[str, StyleSpec] = {
    "neutral": StyleSpec(),
    "torch": StyleSpec(((1.25, 1.0), (0.85, 1.15), (0.5, 1.4)), vignette_strength=0.7, grain_std=0.03),
    "day": StyleSpec(((1.3, 0.6), (1.2, 0.65), (0.95, 0.8)), vignette_strength=0.1, grain_std=0.01),
    "fog": StyleSpec(((0.95, 1.0), (1.0, 1.0), (1.05, 1.0)), vignette_strength=0.2, grain_std=0.02,
                     fog_density=0.6),
    "night": StyleSpec(((0.35, 1.3), (0.5, 1.25), (0.95, 1.05)), vignette_strength=0.5, grain_std=0.04),
}


@functools.lru_cache(maxsize=16)
def _vignette_mask(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r2 = ((yy - cy) / max(cy, 0.5)) ** 2 + ((xx - cx) / max(cx, 0.5)) ** 2
    return r2 / r2.max() if r2.max() > 0 else r2


def apply_style(frame: np.ndarray, style: StyleSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Style one float RGB frame (H, W, 3) in [0, 1]; grain draws from ``rng``."""
    out = np.empty_like(frame)
    for c, (gain, gamma) in enumerate(style.tone_curve):
        out[..., c] = gain * np.power(frame[..., c], gamma)
    if style.fog_density > 0:
        out = (1.0 - style.fog_density) * out + style.fog_density * FOG_HAZE
    if style.vignette_strength > 0:
        out = out * (1.0 - style.vignette_strength * _vignette_mask(*frame.shape[:2]))[..., None]
    if style.grain_std > 0:
        if rng is None:
            raise ValueError("grain needs a random stream")
        out = out + style.grain_std * rng.standard_normal(frame.shape[:2])[..., None]
    return np.clip(out, 0.0, 1.0)


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(frame, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


# -- procedural scenes --------------------------------------------------------------
def render_scene(seed: int, frames: int, size: tuple[int, int] = (16, 16), supersample: int = 4) -> np.ndarray:
    """Float frames (F, H, W, 3) in [0, 1]: gradient sky/ground, a ridge line, 1-3 moving actors, camera pan."""
    rng = make_stream(seed, "scene")
    H, W = size
    s = supersample
    hs, ws = H * s, W * s
    sky_top, sky_bot = rng.uniform(0.45, 0.95, 3), rng.uniform(0.3, 0.8, 3)
    ground = rng.uniform(0.15, 0.55, 3)
    horizon = rng.uniform(0.45, 0.7) * H
    ridge_amp = rng.uniform(0.5, 2.0)
    ridge_len = rng.uniform(6.0, 14.0)
    pan = rng.uniform(-0.4, 0.4)  # pixels per frame
    n_actors = int(rng.integers(1, 4))
    actors = []
    for _ in range(n_actors):
        actors.append(dict(
            color=rng.uniform(0.0, 1.0, 3),
            radius=rng.uniform(1.5, 3.5),
            pos=np.array([rng.uniform(0.3, 0.9) * H, rng.uniform(0.1, 0.9) * W]),
            vel=np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.35, 0.35)]),
            square=bool(rng.integers(2)),
        ))

    yy, xx = np.mgrid[0:hs, 0:ws]
    y = (yy + 0.5) / s
    x = (xx + 0.5) / s
    frac = (y / H)[..., None]
    sky = sky_top * (1 - frac) + sky_bot * frac

    out = np.empty((frames, H, W, 3))
    for f in range(frames):
        cam = pan * f
        ridge = horizon + ridge_amp * np.sin(2 * np.pi * (x + cam) / ridge_len)
        img = np.where((y > ridge)[..., None], ground * (0.8 + 0.2 * (y / H))[..., None], sky)
        for a in actors:
            cy, cx = a["pos"] + a["vel"] * f - np.array([0.0, cam])
            cx = cx % (W + 2 * a["radius"]) - a["radius"]
            if a["square"]:
                inside = (np.abs(y - cy) <= a["radius"]) & (np.abs(x - cx) <= a["radius"])
            else:
                inside = (y - cy) ** 2 + (x - cx) ** 2 <= a["radius"] ** 2
            img = np.where(inside[..., None], a["color"], img)
        out[f] = img.reshape(H, s, W, s, 3).mean(axis=(1, 3))
    return out


def render_styled(seed: int, frames: int, style: StyleSpec, size=(16, 16)) -> np.ndarray:
    """Rendered and styled uint8 frames (F, H, W, 3)."""
    raw = render_scene(seed, frames, size)
    grain = make_stream(seed, "grain")
    return np.stack([to_uint8(apply_style(fr, style, grain)) for fr in raw])


# -- letterbox -----------------------------------------------------------------------
def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def letterbox_geometry(src: tuple[int, int], target: tuple[int, int]) -> dict:
    """Content size and padding for fitting (h, w) into (H, W) without cropping."""
    h, w = src
    H, W = target
    if min(h, w, H, W) <= 0:
        raise ValueError("dimensions must be positive")
    scale = min(W / w, H / h)
    ch = min(H, max(1, _round_half_up(h * scale)))
    cw = min(W, max(1, _round_half_up(w * scale)))
    top, left = (H - ch) // 2, (W - cw) // 2
    return {"scale": scale, "content": (ch, cw), "top": top, "bottom": H - ch - top,
            "left": left, "right": W - cw - left}


def letterbox(frame: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize into ``target`` (H, W) with centred black bars; odd padding goes bottom/right."""
    frame = np.asarray(frame)
    g = letterbox_geometry(frame.shape[:2], target)
    ch, cw = g["content"]
    H, W = target
    if frame.dtype == np.uint8:
        content = np.asarray(Image.fromarray(frame).resize((cw, ch), Image.BILINEAR))
    else:
        chans = frame[..., None] if frame.ndim == 2 else frame
        content = np.stack([np.asarray(Image.fromarray(chans[..., c].astype(np.float32), mode="F")
                                       .resize((cw, ch), Image.BILINEAR))
                            for c in range(chans.shape[-1])], axis=-1).astype(frame.dtype)
        if frame.ndim == 2:
            content = content[..., 0]
    out = np.zeros((H, W, *frame.shape[2:]), dtype=frame.dtype)
    out[g["top"]:g["top"] + ch, g["left"]:g["left"] + cw] = content
    return out


# -- records & manifest ------------------------------------------------------------------
@dataclass
class ClipRecord:
    video_id: str
    frame_paths: list[Path]
    caption: str
    tokens: list[int]
    lighting_tag: str
    scene_id: str
    fps: int = FPS
    aspect_ratio: float = 1.0
    split: str = "train"

    @property
    def frame_count(self) -> int:
        return len(self.frame_paths)


@dataclass
class Manifest:
    records: list[ClipRecord]
    generator_seed: int
    frame_bucket: int = FRAME_BUCKET
    path: Path | None = None
    rejections: list[tuple[str, str]] = field(default_factory=list)

    def split(self, name: str) -> list[ClipRecord]:
        return [r for r in self.records if r.split == name]

    @property
    def train(self) -> list[ClipRecord]:
        return self.split("train")

    @property
    def validation(self) -> list[ClipRecord]:
        return self.split("validation")


def _write_clip(clip_dir: Path, frames_u8: np.ndarray, meta: dict) -> None:
    clip_dir.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames_u8):
        Image.fromarray(fr).save(clip_dir / f"frame_{i:05d}.png")
    (clip_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def _list_frames(clip_dir: Path) -> list[Path]:
    return sorted(p for p in clip_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def generate_synthetic_clip(out_dir, video_id: str, seed: int, style: StyleSpec, frames: int,
                            lighting_tag: str = "torch", scene_id: str | None = None,
                            size: tuple[int, int] = (16, 16)) -> ClipRecord:
    """Render, style and write one clip under ``out_dir/video_id``."""
    if frames < FRAME_BUCKET:
        raise DataError(f"clip needs at least {FRAME_BUCKET} frames, got {frames}")
    if lighting_tag not in LIGHTING_TAGS:
        raise DataError(f"unknown lighting tag {lighting_tag!r}")
    caption = make_caption(lighting_tag, make_stream(seed, "caption"))
    frames_u8 = render_styled(seed, frames, style, size)
    scene_id = scene_id or f"scene_{seed % 1000:03d}"
    meta = {"video_id": video_id, "caption": caption, "lighting_tag": lighting_tag, "scene_id": scene_id,
            "fps": FPS, "aspect_ratio": size[1] / size[0]}
    clip_dir = Path(out_dir) / video_id
    _write_clip(clip_dir, frames_u8, meta)
    return ClipRecord(video_id, _list_frames(clip_dir), caption, tokenize(caption), lighting_tag, scene_id,
                      FPS, meta["aspect_ratio"])


def generate_corpus(out_dir, n_clips: int = 40, seed: int = 0, styled: bool = True,
                    min_frames: int = 40, max_frames: int = 120, size=(16, 16)) -> list[ClipRecord]:
    """A corpus of clips cycling through the lighting tags; style per tag, or neutral."""
    rng = make_stream(seed, "corpus")
    recs = []
    for i in range(n_clips):
        tag = LIGHTING_TAGS[i % len(LIGHTING_TAGS)]
        frames = int(rng.integers(min_frames, max_frames + 1))
        clip_seed = int(rng.integers(2**31))
        style = STYLE_LIBRARY[tag] if styled else STYLE_LIBRARY["neutral"]
        recs.append(generate_synthetic_clip(out_dir, f"clip_{i:03d}", clip_seed, style, frames, tag,
                                            scene_id=f"scene_{i // 2:03d}", size=size))
    return recs


def ingest_clips(src_root, out_dir, frame_size=(16, 16)) -> list[str]:
    """Letterbox user-supplied frame directories (one sub-directory per clip) into ``out_dir``.

    Optional per-clip ``meta.json`` supplies caption/lighting_tag/scene_id.  Every
    clip is copied; validation happens in :func:`build_manifest`.  Returns the ids.
    """
    src_root = Path(src_root)
    ids = []
    for clip in sorted(p for p in src_root.iterdir() if p.is_dir()):
        paths = _list_frames(clip)
        if not paths:
            continue
        meta = {"caption": "a scene", "lighting_tag": "day", "scene_id": clip.name}
        if (clip / "meta.json").exists():
            meta.update(json.loads((clip / "meta.json").read_text()))
        frames = [np.asarray(Image.open(p).convert("RGB")) for p in paths]
        h, w = frames[0].shape[:2]
        meta.update(video_id=clip.name, fps=FPS, aspect_ratio=w / h,
                    source_size=[h, w] if all(f.shape[:2] == (h, w) for f in frames) else None)
        boxed = np.stack([letterbox(f, tuple(frame_size)) for f in frames])
        _write_clip(Path(out_dir) / clip.name, boxed, meta)
        ids.append(clip.name)
    return ids


def _validate_clip(clip_dir: Path, frame_bucket: int) -> tuple[ClipRecord | None, str | None]:
    meta_path = clip_dir / "meta.json"
    if not meta_path.exists():
        return None, "missing meta.json"
    meta = json.loads(meta_path.read_text())
    frames = _list_frames(clip_dir)
    if len(frames) < frame_bucket:
        return None, f"undersized clip: {len(frames)} frames < {frame_bucket}"
    if "source_size" in meta and meta["source_size"] is None:
        return None, "inconsistent frame sizes"
    ar = float(meta.get("aspect_ratio", 1.0))
    if not MIN_AR <= ar <= MAX_AR:
        return None, "aspect out of bucket range"
    if meta.get("lighting_tag") not in LIGHTING_TAGS:
        return None, f"unknown lighting tag {meta.get('lighting_tag')!r}"
    try:
        tokens = tokenize(meta["caption"])
    except UnknownTokenError as exc:
        return None, f"caption rejected: {exc}"
    return ClipRecord(meta.get("video_id", clip_dir.name), frames, meta["caption"], tokens,
                      meta["lighting_tag"], str(meta["scene_id"]), int(meta.get("fps", FPS)), ar), None


def validation_count(n: int, val_fraction: float) -> int:
    """floor(n * fraction + 0.5), clamped to [1, n - 1] when the fraction is positive."""
    if val_fraction <= 0:
        return 0
    return min(max(1, int(math.floor(n * val_fraction + 0.5))), n - 1)


def build_manifest(clip_dir, val_fraction: float = 0.1, seed: int = 0, out_path=None,
                   frame_bucket: int = FRAME_BUCKET) -> Manifest:
    """Validate every clip directory, split train/validation, write manifest + rejection report."""
    clip_dir = Path(clip_dir)
    subdirs = sorted(p for p in clip_dir.iterdir() if p.is_dir()) if clip_dir.is_dir() else []
    if not subdirs:
        raise DataError(f"no clips found in {clip_dir}")
    out_path = Path(out_path) if out_path else clip_dir.parent / "manifest.json"
    accepted, rejections = [], []
    for d in subdirs:
        rec, reason = _validate_clip(d, frame_bucket)
        if rec is None:
            rejections.append((d.name, reason))
        else:
            accepted.append(rec)
    if len(accepted) < 2:
        raise DataError(f"need at least 2 usable clips, found {len(accepted)}")
    accepted.sort(key=lambda r: r.video_id)
    n_val = validation_count(len(accepted), val_fraction)
    order = make_stream(seed, "split").permutation(len(accepted))
    val_ids = {accepted[i].video_id for i in order[:n_val]}
    for r in accepted:
        r.split = "validation" if r.video_id in val_ids else "train"

    manifest = Manifest(accepted, int(seed), frame_bucket, out_path, rejections)
    write_manifest(manifest, out_path)
    report = out_path.parent / "rejections.tsv"
    report.write_text("".join(f"{cid}\t{reason}\n" for cid, reason in rejections))
    return manifest


def _record_json(rec: ClipRecord, root: Path) -> dict:
    return {"video_id": rec.video_id,
            "frame_path": Path(rec.frame_paths[0].parent).resolve().relative_to(root).as_posix(),
            "caption": rec.caption, "lighting_tag": rec.lighting_tag, "scene_id": rec.scene_id,
            "fps": rec.fps, "frame_count": rec.frame_count, "aspect_ratio": rec.aspect_ratio,
            "split": rec.split}


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    root = path.parent.resolve()
    doc = {"frame_bucket": manifest.frame_bucket, "generator_seed": manifest.generator_seed,
           "records": [_record_json(r, root) for r in manifest.records]}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    recs = []
    for r in doc["records"]:
        frames = _list_frames(path.parent / r["frame_path"])
        if len(frames) != r["frame_count"]:
            raise DataError(f"{r['video_id']}: manifest lists {r['frame_count']} frames, found {len(frames)}")
        recs.append(ClipRecord(r["video_id"], frames, r["caption"], tokenize(r["caption"]), r["lighting_tag"],
                               r["scene_id"], r["fps"], r["aspect_ratio"], r["split"]))
    return Manifest(recs, doc["generator_seed"], doc["frame_bucket"], path)


# -- windows -------------------------------------------------------------------------
@functools.lru_cache(maxsize=256)
def _load_frames_cached(paths: tuple[str, ...]) -> np.ndarray:
    arr = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in paths])
    arr.setflags(write=False)
    return arr


def load_clip(record: ClipRecord) -> np.ndarray:
    """All frames as float32 (F, C, H, W) in [-1, 1]."""
    u8 = _load_frames_cached(tuple(str(p) for p in record.frame_paths))
    return to_model_space(u8)


def to_model_space(frames_u8: np.ndarray) -> np.ndarray:
    return (frames_u8.astype(np.float32) / 127.5 - 1.0).transpose(0, 3, 1, 2)


def from_model_space(frames: np.ndarray) -> np.ndarray:
    """(F, C, H, W) in [-1, 1] -> uint8 (F, H, W, C)."""
    x = (np.clip(frames, -1.0, 1.0) + 1.0) * 127.5
    return np.floor(x + 0.5).astype(np.uint8).transpose(0, 2, 3, 1)


def sample_window(record: ClipRecord, rng: np.random.Generator, length: int = FRAME_BUCKET,
                  return_offset: bool = False):
    """Uniformly placed contiguous window (length, C, H, W) scaled to [-1, 1]."""
    n = record.frame_count
    if n < length:
        raise DataError(f"{record.video_id}: {n} frames is shorter than the {length}-frame window")
    offset = int(rng.integers(0, n - length + 1))
    clip = _load_frames_cached(tuple(str(p) for p in record.frame_paths[offset:offset + length]))
    win = to_model_space(clip)
    return (win, offset) if return_offset else win
