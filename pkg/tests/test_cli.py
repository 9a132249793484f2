import json

import numpy as np
import pytest
from PIL import Image

from cinelora import checkpoint, lora
from cinelora.cli import main
from cinelora.config import ConfigError, RunConfig
from cinelora.model import VideoDiT

from conftest import tiny_config

TINY_TOML = """
d_model = 16
n_heads = 2
encoder_blocks = 2
decoder_blocks = 2
mlp_ratio = 2
lora_encoder_range = [0, 1]
lora_decoder_range = [0, 1]
n_clips = 6
min_frames = 33
max_frames = 36
val_windows = 2
grad_accum = 1
total_steps = 4
eval_interval = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.toml").write_text(TINY_TOML)
    assert main(["prepare", "--config", str(root / "tiny.toml"), "--out", str(root / "data")]) == 0
    return root


def _cfg(ws):
    return ["--config", str(ws / "tiny.toml")]


# -- config -------------------------------------------------------------------------------
def test_config_defaults_and_validation(tmp_path):
    cfg = RunConfig()
    assert (cfg["cfg_scale"], cfg["steps"], cfg["fps"], cfg["total_steps"], cfg["lr_peak"]) == (3.8, 30, 24, 4000,
                                                                                                 3e-5)
    with pytest.raises(ConfigError):
        RunConfig({"no_such_key": 1})
    with pytest.raises(ConfigError):
        RunConfig({"grad_accum": 0})
    with pytest.raises(ConfigError):
        RunConfig({"d_model": 30})
    (tmp_path / "nested.toml").write_text("[train]\nseed = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "nested.toml")


def test_override_wins_over_file(tmp_path):
    (tmp_path / "c.toml").write_text("total_steps = 50\nseed = 3\neval_interval = 10\n")
    cfg = RunConfig.load(tmp_path / "c.toml", {"total_steps": "20"})
    assert cfg["total_steps"] == 20 and cfg["seed"] == 3


def test_unknown_key_fails_before_writing(tmp_path):
    out = tmp_path / "never"
    assert main(["prepare", "--out", str(out), "--set", "bogus=1"]) == 1
    assert not out.exists()


# -- prepare ------------------------------------------------------------------------------
def test_default_prepare_split_and_repeatability(tmp_path):
    args = ["--set", "min_frames=33", "--set", "max_frames=34"]
    assert main(["prepare", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["prepare", "--out", str(tmp_path / "b"), *args]) == 0
    doc = json.loads((tmp_path / "a" / "manifest.json").read_text())
    splits = [r["split"] for r in doc["records"]]
    assert (splits.count("train"), splits.count("validation")) == (36, 4)
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_strict_prepare_flags_rejections(tmp_path):
    src = tmp_path / "src"
    for name, frames in (("a", 40), ("b", 40), ("short", 10)):
        d = src / name
        d.mkdir(parents=True)
        for i in range(frames):
            Image.fromarray(np.full((16, 16, 3), i, np.uint8)).save(d / f"{i:03d}.png")
    assert main(["prepare", "--ingest", str(src), "--out", str(tmp_path / "o1")]) == 0
    assert main(["prepare", "--ingest", str(src), "--out", str(tmp_path / "o2"), "--strict"]) == 2
    assert "short\tundersized clip: 10 frames < 33" in (tmp_path / "o2" / "rejections.tsv").read_text()


def test_unwritable_output_is_an_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["prepare", "--out", str(blocker / "sub")]) == 1


# -- train / merge / generate / eval ------------------------------------------------------------
def test_train_resume_and_fraction_report(workspace, capsys):
    ws = workspace
    man = str(ws / "data" / "manifest.json")
    assert main(["train", *_cfg(ws), "--manifest", man, "--out", str(ws / "run")]) == 0
    out = capsys.readouterr().out
    report = json.loads(out.splitlines()[0])["trainable_parameters"]
    assert report["trainable"] == report["closed_form"] and report["reference_fraction"] < 0.01
    log = (ws / "run" / "train_log.ndjson").read_text().splitlines()
    assert sum('"kind":"step"' in l for l in log) == 4

    assert main(["train", *_cfg(ws), "--manifest", man, "--out", str(ws / "run2"), "--steps", "4",
                 "--set", "eval_interval=2"]) == 0
    assert main(["train", *_cfg(ws), "--manifest", man, "--out", str(ws / "run2"), "--resume"]) == 0
    assert (ws / "run" / "train_log.ndjson").read_bytes() == (ws / "run2" / "train_log.ndjson").read_bytes()


def test_lambda_zero_flag(workspace):
    ws = workspace
    assert main(["train", *_cfg(ws), "--manifest", str(ws / "data" / "manifest.json"), "--out",
                 str(ws / "run_l0"), "--lambda", "0", "--steps", "2", "--eval-interval", "2"]) == 0
    steps = [json.loads(l) for l in (ws / "run_l0" / "train_log.ndjson").read_text().splitlines()]
    steps = [s for s in steps if s["kind"] == "step"]
    assert all(s["l_temp"] > 0 and s["l_total"] == s["l_diff"] for s in steps)


def test_merge_of_fresh_adapters_is_byte_identical(tmp_path):
    m = VideoDiT(tiny_config())
    checkpoint.save_model(m, tmp_path / "base.ckpt")
    lora.save_adapters(lora.inject(m), tmp_path / "zero.lora")
    assert main(["merge", "--base", str(tmp_path / "base.ckpt"), "--lora", str(tmp_path / "zero.lora"),
                 "--output", str(tmp_path / "merged.ckpt")]) == 0
    assert (tmp_path / "merged.ckpt").read_bytes() == (tmp_path / "base.ckpt").read_bytes()


def test_merge_rejects_foreign_adapters(tmp_path, capsys):
    checkpoint.save_model(VideoDiT(tiny_config()), tmp_path / "base.ckpt")
    other = VideoDiT(tiny_config(d_model=32))
    lora.save_adapters(lora.inject(other), tmp_path / "other.lora")
    assert main(["merge", "--base", str(tmp_path / "base.ckpt"), "--lora", str(tmp_path / "other.lora"),
                 "--output", str(tmp_path / "m.ckpt")]) == 1
    err = capsys.readouterr().err
    assert tiny_config().digest() in err and tiny_config(d_model=32).digest() in err


def _first_frame(path):
    Image.fromarray(np.random.default_rng(0).integers(0, 255, (16, 16, 3), dtype=np.uint8)).save(path)
    return str(path)


def test_generate_plan_report_and_merge_equivalence(workspace):
    ws = workspace
    base = VideoDiT(tiny_config())
    checkpoint.save_model(base, ws / "g_base.ckpt")
    aset = lora.inject(base, r=2)
    rng = np.random.default_rng(1)
    for ad in aset.adapters.values():
        ad.A.data = (0.1 * rng.standard_normal(ad.A.shape)).astype(np.float32)
        ad.B.data = (0.1 * rng.standard_normal(ad.B.shape)).astype(np.float32)
    lora.save_adapters(aset, ws / "g.lora")
    assert main(["merge", "--base", str(ws / "g_base.ckpt"), "--lora", str(ws / "g.lora"),
                 "--output", str(ws / "g_merged.ckpt")]) == 0
    img = _first_frame(ws / "first.png")
    common = ["--image", img, "--caption", "cold moonlight", "--steps", "2", "--num_frames", "12", "--seed", "3"]
    assert main(["generate", *_cfg(ws), "--ckpt", str(ws / "g_merged.ckpt"), "--outdir", str(ws / "gm"),
                 *common]) == 0
    assert main(["generate", *_cfg(ws), "--ckpt", str(ws / "g_base.ckpt"), "--lora", str(ws / "g.lora"),
                 "--outdir", str(ws / "ga"), *common]) == 0
    a = np.stack([np.asarray(Image.open(p)) for p in sorted((ws / "gm").glob("frame_*.png"))]).astype(int)
    b = np.stack([np.asarray(Image.open(p)) for p in sorted((ws / "ga").glob("frame_*.png"))]).astype(int)
    assert a.shape == (12, 16, 16, 3) and np.abs(a - b).max() <= 1

    assert main(["generate", *_cfg(ws), "--ckpt", str(ws / "g_base.ckpt"), "--outdir", str(ws / "g96"),
                 "--image", img, "--caption", "pale fog", "--steps", "1", "--num_frames", "96", "--shards", "2",
                 "--overlap", "4"]) == 0
    rep = json.loads((ws / "g96" / "report.json").read_text())
    assert rep["shards"] == [[0, 50], [46, 96]]
    assert (rep["cfg_scale"], rep["fps"]) == (3.8, 24)
    assert len(list((ws / "g96").glob("frame_*.png"))) == 96


def test_generate_needs_conditioning_image(workspace):
    ws = workspace
    assert main(["generate", *_cfg(ws), "--outdir", str(ws / "none"), "--image", str(ws / "missing.png"),
                 "--caption", "pale fog"]) == 1


def test_eval_self_mismatch_and_style(workspace, tmp_path):
    clip = workspace / "data" / "clips" / "clip_000"
    assert main(["eval", "--a", str(clip), "--b", str(clip), "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["perceptual_proxy"] == 0.0 and rep["frames"] > 0

    short = tmp_path / "short"
    short.mkdir()
    for p in sorted(clip.glob("frame_*.png"))[:5]:
        (short / p.name).write_bytes(p.read_bytes())
    assert main(["eval", "--a", str(clip), "--b", str(short), "--out", str(tmp_path / "x.json")]) == 1

    meta = json.loads((clip / "meta.json").read_text())
    assert main(["eval", "--a", str(clip), "--style", meta["lighting_tag"], "--out", str(tmp_path / "s.json")]) == 0
    rep = json.loads((tmp_path / "s.json").read_text())
    assert rep["style_distance"] == rep["style_ranking"][meta["lighting_tag"]]
