from __future__ import annotations

import csv
import json
import os
import shutil

import numpy as np
import pytest

from clipchain import cli
from clipchain.denoiser import DenoiserSpec, TemporalLayerSpec, TinyVideoDenoiser, load_denoiser
from clipchain.frames import read_clip_frames, write_clip_frames
from clipchain.longvideo import LongVideoConfig, generate_long_video
from clipchain.manifest import build_manifest, load_manifest, write_manifest
from clipchain.sampler import SamplerConfig
from clipchain.schedule import build_schedule

TRAIN_CFG = {
    "seed": 3,
    "init_seed": 7,
    "schedule": {"profile": "cosine", "num_steps": 60},
    "model": {
        "latent_shape": [4, 1, 8, 8],
        "channels": 8,
        "cond_dim": 8,
        "vocab_size": 4,
    },
    "data": {"gaussian_world": {"mu": 0.3, "s": 0.2, "count": 32}},
    "train": {"steps": 25, "batch_size": 4},
}


def _write_json(path, doc) -> str:
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return str(path)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cliwork")


@pytest.fixture(scope="module")
def trained_dir(work) -> str:
    cfg = _write_json(work / "train.json", TRAIN_CFG)
    out = str(work / "trained")
    assert cli.main(["train", "--config", cfg, "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(work, trained_dir) -> str:
    out = str(work / "run")
    rc = cli.main(
        [
            "generate",
            "--checkpoint", os.path.join(trained_dir, "model.npz"),
            "--out", out,
            "--clips", "2",
            "--frames", "4",
            "--prompt-frames", "2",
            "--alpha", "4",
            "--beta", "0.5",
            "--guidance", "2.0",
            "--steps", "10",
            "--seed", "5",
        ]
    )
    assert rc == 0
    return out


def _gen_data_cfg(count: int = 10, latent: bool = False, seed: int = 3) -> dict:
    return {
        "mode": "moving_shapes",
        "count": count,
        "seed": seed,
        "latent": latent,
        "moving_shapes": {"canvas": 16, "frames": 4, "radius": 3, "speed_range": [1.0, 2.0]},
    }


def test_gen_data_manifest_lists_per_clip_seeds(tmp_path, capsys) -> None:
    cfg = _write_json(tmp_path / "gd.json", _gen_data_cfg())
    out = str(tmp_path / "ds")
    assert cli.main(["gen-data", "--config", cfg, "--out", out]) == 0
    manifest = load_manifest(out)
    assert len(manifest["extra"]["clip_seeds"]) == 10
    assert manifest["extra"]["count"] == 10
    assert manifest["extra"]["space"] == "pixel"
    assert cli.main(["verify", "--run", out]) == 0
    assert "ok" in capsys.readouterr().out


def test_gen_data_reruns_are_byte_identical(tmp_path) -> None:
    cfg = _write_json(tmp_path / "gd.json", _gen_data_cfg(count=4))
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.main(["gen-data", "--config", cfg, "--out", out_a]) == 0
    assert cli.main(["gen-data", "--config", cfg, "--out", out_b]) == 0
    for name in ("dataset.npz", "run_manifest.json"):
        a = open(os.path.join(out_a, name), "rb").read()
        b = open(os.path.join(out_b, name), "rb").read()
        assert a == b, name


def test_train_zero_steps_equals_fresh_init(tmp_path) -> None:
    doc = json.loads(json.dumps(TRAIN_CFG))
    doc["train"]["steps"] = 0
    cfg = _write_json(tmp_path / "t0.json", doc)
    out = str(tmp_path / "t0")
    assert cli.main(["train", "--config", cfg, "--out", out]) == 0
    loaded, meta = load_denoiser(os.path.join(out, "model.npz"))
    spec = DenoiserSpec(
        latent_shape=(4, 1, 8, 8),
        channels=8,
        cond_dim=8,
        vocab_size=4,
        temporal_layers=(
            TemporalLayerSpec("temp_conv", 1),
            TemporalLayerSpec("temp_attn", 2),
        ),
    )
    fresh = TinyVideoDenoiser(spec, 60, init_seed=7)
    z = np.random.default_rng(0).standard_normal((4, 1, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(
        loaded.predict_noise(z, 30, None), fresh.predict_noise(z, 30, None)
    )
    assert meta["schedule"]["profile"] == "cosine"


def test_train_runs_are_deterministic(tmp_path) -> None:
    doc = json.loads(json.dumps(TRAIN_CFG))
    doc["train"]["steps"] = 8
    cfg = _write_json(tmp_path / "t.json", doc)
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.main(["train", "--config", cfg, "--out", out_a]) == 0
    assert cli.main(["train", "--config", cfg, "--out", out_b]) == 0
    for name in ("model.npz", "loss_curve.csv"):
        a = open(os.path.join(out_a, name), "rb").read()
        b = open(os.path.join(out_b, name), "rb").read()
        assert a == b, name


def test_train_manifest_records_losses(trained_dir) -> None:
    manifest = load_manifest(trained_dir)
    assert isinstance(manifest["extra"]["final_loss"], float)
    assert 0.0 < manifest["extra"]["analytic_expected_loss"] < 1.0
    png = open(os.path.join(trained_dir, "loss_curve.png"), "rb").read()
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    assert cli.main(["verify", "--run", trained_dir]) == 0


def test_train_rejects_pixel_dataset(tmp_path, capsys) -> None:
    gd = _write_json(tmp_path / "gd.json", _gen_data_cfg(count=3))
    ds_out = str(tmp_path / "ds")
    assert cli.main(["gen-data", "--config", gd, "--out", ds_out]) == 0
    doc = json.loads(json.dumps(TRAIN_CFG))
    doc["data"] = {"path": os.path.join(ds_out, "dataset.npz")}
    cfg = _write_json(tmp_path / "t.json", doc)
    rc = cli.main(["train", "--config", cfg, "--out", str(tmp_path / "t")])
    assert rc == 3
    assert "latent" in capsys.readouterr().err


def test_generate_single_clip_matches_library_path(tmp_path, trained_dir) -> None:
    ckpt = os.path.join(trained_dir, "model.npz")
    out = str(tmp_path / "one")
    rc = cli.main(
        [
            "generate",
            "--checkpoint", ckpt,
            "--out", out,
            "--clips", "1",
            "--steps", "10",
            "--guidance", "2.0",
            "--seed", "9",
        ]
    )
    assert rc == 0
    model, meta = load_denoiser(ckpt)
    schedule = build_schedule(
        meta["schedule"]["profile"], int(meta["schedule"]["num_steps"]), meta["schedule"]["params"]
    )
    cfg = LongVideoConfig(
        frames=4,
        prompt_frames=4,
        alpha=4.0,
        beta=0.4,
        num_clips=1,
        sampler=SamplerConfig(num_inference_steps=10, guidance_scale=2.0),
        seed=9,
    )
    result = generate_long_video(model, schedule, model.conditioning_for_label(0), cfg)
    with np.load(os.path.join(out, "latents.npz")) as data:
        np.testing.assert_array_equal(data["latents"][0], result.clips[0].latents)
        np.testing.assert_array_equal(data["initial_noises"][0], result.initial_noises[0])


def test_generate_deterministic_across_runs_and_workers(work, run_dir, trained_dir) -> None:
    out_b = str(work / "run_w3")
    rc = cli.main(
        [
            "generate",
            "--checkpoint", os.path.join(trained_dir, "model.npz"),
            "--out", out_b,
            "--clips", "2",
            "--frames", "4",
            "--prompt-frames", "2",
            "--alpha", "4",
            "--beta", "0.5",
            "--guidance", "2.0",
            "--steps", "10",
            "--seed", "5",
            "--workers", "3",
        ]
    )
    assert rc == 0
    man_a, man_b = load_manifest(run_dir), load_manifest(out_b)
    assert man_a["outputs"] == man_b["outputs"]
    for name in man_a["outputs"]:
        a = open(os.path.join(run_dir, name), "rb").read()
        b = open(os.path.join(out_b, name), "rb").read()
        assert a == b, name


def test_generate_run_verifies_and_loads(run_dir) -> None:
    assert cli.main(["verify", "--run", run_dir]) == 0
    clips = read_clip_frames(run_dir)
    assert len(clips) == 2
    assert clips[0].shape == (4, 3, 8, 8)
    with np.load(os.path.join(run_dir, "latents.npz")) as data:
        assert data["latents"].shape == (2, 4, 1, 8, 8)
        assert data["initial_noises"].shape == (2, 4, 1, 8, 8)


def test_generate_can_save_trajectory(tmp_path, trained_dir) -> None:
    out = str(tmp_path / "traj")
    rc = cli.main(
        [
            "generate",
            "--checkpoint", os.path.join(trained_dir, "model.npz"),
            "--out", out,
            "--clips", "2",
            "--frames", "4",
            "--prompt-frames", "2",
            "--steps", "6",
            "--save-trajectory",
        ]
    )
    assert rc == 0
    manifest = load_manifest(out)
    assert "trajectory.npz" in manifest["outputs"]
    assert cli.main(["verify", "--run", out]) == 0


def test_generate_signal_range_bounds_latents(tmp_path, run_dir, trained_dir) -> None:
    out = str(tmp_path / "clamped")
    rc = cli.main(
        [
            "generate",
            "--checkpoint", os.path.join(trained_dir, "model.npz"),
            "--out", out,
            "--clips", "2",
            "--frames", "4",
            "--prompt-frames", "2",
            "--alpha", "4",
            "--beta", "0.5",
            "--guidance", "2.0",
            "--steps", "10",
            "--seed", "5",
            "--signal-range", "1.0",
        ]
    )
    assert rc == 0
    with np.load(os.path.join(out, "latents.npz")) as data:
        assert np.all(np.abs(data["latents"]) <= 1.0)
    manifest = load_manifest(out)
    assert manifest["config"]["signal_range"] == 1.0
    assert load_manifest(run_dir)["config"]["signal_range"] is None


def test_metrics_report_flags_reversed_clip(tmp_path) -> None:
    rng = np.random.default_rng(17)
    clip0 = rng.random((4, 3, 8, 8), dtype=np.float32)
    run = tmp_path / "crafted"
    run.mkdir()
    index = write_clip_frames(run, [clip0, clip0[::-1].copy()])
    outputs = {entry["path"]: entry["sha256"] for entry in index["files"]}
    manifest = build_manifest("generate", {}, 0, {}, outputs, {})
    write_manifest(run, manifest)
    out = str(tmp_path / "report")
    assert cli.main(["metrics", "--run", str(run), "--out", out]) == 0
    with open(os.path.join(out, "metrics.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    cycling = [r for r in rows if r["metric"] == "cycling_score"]
    assert len(cycling) == 1
    assert abs(float(cycling[0]["value"]) - 1.0) < 1e-8
    text = open(os.path.join(out, "report.txt")).read()
    assert f"run_manifest_digest: {manifest['manifest_digest']}" in text
    assert "not computed" in text
    for name in ("smoothness.png", "boundary_consistency.png", "cycling_score.png"):
        assert os.path.exists(os.path.join(out, name))
    assert cli.main(["verify", "--run", out]) == 0


def test_metrics_latent_space_uses_saved_latents(tmp_path, run_dir) -> None:
    out = str(tmp_path / "latrep")
    assert cli.main(["metrics", "--run", run_dir, "--space", "latent", "--out", out]) == 0
    text = open(os.path.join(out, "report.txt")).read()
    assert "space: latent" in text


def test_verify_detects_tampered_frame(tmp_path, run_dir, capsys) -> None:
    damaged = str(tmp_path / "damaged")
    shutil.copytree(run_dir, damaged)
    victim = os.path.join(damaged, "clip000_frame001.ppm")
    data = bytearray(open(victim, "rb").read())
    data[-1] ^= 0xFF
    open(victim, "wb").write(bytes(data))
    assert cli.main(["verify", "--run", damaged]) == 3
    err = capsys.readouterr().err
    assert "digest mismatch" in err and "clip000_frame001.ppm" in err


def test_bad_invocations_use_config_exit_code(tmp_path, trained_dir, capsys) -> None:
    rc = cli.main(
        [
            "generate",
            "--checkpoint", os.path.join(trained_dir, "model.npz"),
            "--out", str(tmp_path / "x"),
            "--steps", "500",
        ]
    )
    assert rc == 2
    assert "exceeds" in capsys.readouterr().err
    cfg = _write_json(tmp_path / "bad.json", {**_gen_data_cfg(), "mode": "nope"})
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "y")]) == 2
    assert cli.main(["metrics", "--run", str(tmp_path / "missing")]) == 3


def test_env_root_resolves_cli_paths(tmp_path, monkeypatch) -> None:
    monkeypatch.setenv("CLIPCHAIN_ROOT", str(tmp_path))
    _write_json(tmp_path / "gd.json", _gen_data_cfg(count=2))
    assert cli.main(["gen-data", "--config", "gd.json", "--out", "ds"]) == 0
    assert os.path.exists(tmp_path / "ds" / "dataset.npz")


def test_ae_pipeline_via_cli(tmp_path, capsys) -> None:
    gd = _write_json(tmp_path / "gd.json", _gen_data_cfg(count=8, seed=6))
    ds_out = str(tmp_path / "ds")
    assert cli.main(["gen-data", "--config", gd, "--out", ds_out]) == 0
    ds_path = os.path.join(ds_out, "dataset.npz")

    ae_cfg = _write_json(
        tmp_path / "ae.json",
        {
            "seed": 1,
            "init_seed": 2,
            "spec": {
                "latent_channels": 4,
                "base_channels": 8,
                "temporal_layers": [{"position": 1, "zero_init": True}],
            },
            "data": {"path": ds_path},
            "train": {"steps": 20, "batch_size": 8},
        },
    )
    ae_out = str(tmp_path / "ae")
    assert cli.main(["train-ae", "--config", ae_cfg, "--out", ae_out]) == 0
    assert cli.main(["verify", "--run", ae_out]) == 0

    ft_cfg = _write_json(
        tmp_path / "ft.json",
        {
            "seed": 4,
            "disc_seed": 5,
            "checkpoint": os.path.join(ae_out, "ae.npz"),
            "data": {"path": ds_path},
            "train": {"steps": 4, "batch_size": 2},
        },
    )
    ft_out = str(tmp_path / "ft")
    assert cli.main(["finetune-ae", "--config", ft_cfg, "--out", ft_out]) == 0
    manifest = load_manifest(ft_out)
    assert manifest["extra"]["frozen_groups_unchanged"] == {
        "encoder": True,
        "decoder_spatial": True,
    }
    with open(os.path.join(ft_out, "loss_curve.csv"), newline="") as fh:
        header = next(csv.reader(fh))
    assert set(header) >= {"step", "total", "rec", "disc_g", "disc_d"}

    # The fine-tuned decoder can back a generate run end to end.
    train_doc = {
        "seed": 3,
        "init_seed": 7,
        "schedule": {"profile": "cosine", "num_steps": 40},
        "model": {"latent_shape": [4, 4, 4, 4], "channels": 8, "cond_dim": 8, "vocab_size": 4},
        "data": {"gaussian_world": {"mu": 0.0, "s": 1.0, "count": 8}},
        "train": {"steps": 0, "batch_size": 2},
    }
    t_cfg = _write_json(tmp_path / "t.json", train_doc)
    t_out = str(tmp_path / "t")
    assert cli.main(["train", "--config", t_cfg, "--out", t_out]) == 0
    g_out = str(tmp_path / "g")
    rc = cli.main(
        [
            "generate",
            "--checkpoint", os.path.join(t_out, "model.npz"),
            "--ae", os.path.join(ft_out, "ae_finetuned.npz"),
            "--out", g_out,
            "--clips", "1",
            "--steps", "5",
        ]
    )
    assert rc == 0
    capsys.readouterr()
    clips = read_clip_frames(g_out)
    assert clips[0].shape == (4, 3, 16, 16)
