"""Command-line surface: data generation, training, generation, reporting.

Commands write their outputs plus a ``run_manifest.json`` into a target
directory; ``clipchain verify`` recomputes the recorded digests.  Exit
codes: 0 success, 2 bad configuration or flags, 3 missing/malformed data,
4 numeric breakdown, 5 file-transport failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Any

import numpy as np
import torch

from . import config as cfgmod
from . import frames as framesmod
from . import report as reportmod
from .autoencoder import (
    AETrainConfig,
    AutoencoderSpec,
    FinetuneLossWeights,
    PatchDiscriminator,
    TemporalDecoderLayer,
    TinyAutoencoder,
    autoencoder_group_digests,
    finetune_decoder,
    load_autoencoder,
    pretrain_autoencoder,
    save_autoencoder,
)
from .datakit import (
    ClipDataset,
    GaussianWorld,
    MovingShapesSpec,
    ZoomPanSpec,
    clip_seeds,
    gaussian_world_clips,
    gray_latents_to_clip,
    load_dataset,
    make_pseudo_video,
    make_test_image,
    moving_shapes_dataset,
    moving_shapes_latent_dataset,
    save_dataset,
)
from .denoiser import (
    DenoiserSpec,
    TemporalLayerSpec,
    TinyVideoDenoiser,
    TrainConfig,
    bayes_expected_loss,
    load_denoiser,
    train,
)
from .errors import ClipchainError, ConfigError, DataError
from .longvideo import LongVideoConfig, generate_long_video
from .manifest import (
    build_manifest,
    digest_file,
    digest_json,
    load_manifest,
    verify_run,
    write_manifest,
)
from .sampler import SamplerConfig, save_trajectory
from .schedule import build_schedule
from .seeding import stream

LATENTS_NAME = "latents.npz"
METRICS_NAME = "metrics.csv"


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _out_dir(args: argparse.Namespace) -> str:
    return _ensure_dir(cfgmod.resolve_path(args.out))


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = cfgmod.load_config(args.config, "gen-data")
    out = _out_dir(args)
    mode = cfg["mode"]
    seed = int(cfg["seed"])
    count = int(cfg["count"])
    if mode == "moving_shapes":
        ms = cfg["moving_shapes"]
        spec = MovingShapesSpec(
            canvas=int(ms["canvas"]),
            frames=int(ms["frames"]),
            radius=int(ms["radius"]),
            speed_range=tuple(float(v) for v in ms["speed_range"]),
        )
        if cfg["latent"]:
            dataset = moving_shapes_latent_dataset(spec, count, seed)
        else:
            dataset = moving_shapes_dataset(spec, count, seed)
    elif mode == "gaussian_world":
        gw = cfg["gaussian_world"]
        dataset = gaussian_world_clips(
            GaussianWorld(mu=float(gw["mu"]), s=float(gw["s"])),
            tuple(int(v) for v in gw["shape"]),
            count,
            seed,
        )
    elif mode == "pseudo_video":
        pv = cfg["pseudo_video"]
        if pv["image"] == "builtin":
            source = make_test_image(int(pv["image_size"]))
        else:
            source = framesmod.read_ppm(cfgmod.resolve_path(pv["image"]))
        clips = []
        for i in range(count):
            rng = stream(seed, "zoompan", i)
            src_h, src_w = source.shape[1], source.shape[2]
            scale0 = float(rng.uniform(0.6, 1.0))
            scale1 = float(rng.uniform(0.4, scale0))
            rects = []
            for scale in (scale0, scale1):
                rh, rw = src_h * scale, src_w * scale
                top = float(rng.uniform(0.0, src_h - rh))
                left = float(rng.uniform(0.0, src_w - rw))
                rects.append((top, left, rh, rw))
            spec = ZoomPanSpec(
                source=source,
                start_rect=rects[0],
                end_rect=rects[1],
                frames=int(pv["frames"]),
                out_size=tuple(int(v) for v in pv["out_size"]),
            )
            clips.append(make_pseudo_video(spec))
        dataset = ClipDataset(
            clips=np.stack(clips),
            labels=np.zeros(count, dtype=np.int64),
            vocabulary=("pseudo",),
            space="pixel",
        )
    else:
        raise ConfigError(f"unknown gen-data mode {mode!r}")
    ds_path = os.path.join(out, "dataset.npz")
    save_dataset(ds_path, dataset)
    extra = {
        "count": len(dataset),
        "clip_shape": list(dataset.clips.shape[1:]),
        "space": dataset.space,
        "vocabulary": list(dataset.vocabulary),
    }
    if mode == "moving_shapes":
        extra["clip_seeds"] = clip_seeds(seed, count)
    manifest = build_manifest(
        command="gen-data",
        config=cfg,
        seed=seed,
        inputs={},
        outputs={"dataset.npz": digest_file(ds_path)},
        extra=extra,
    )
    write_manifest(out, manifest)
    print(f"gen-data: wrote {len(dataset)} {dataset.space} clips to {ds_path}")
    return 0


def _schedule_from_config(doc: dict[str, Any]):
    return build_schedule(
        profile=doc["profile"], num_steps=int(doc["num_steps"]), params=doc.get("params") or {}
    )


def cmd_train(args: argparse.Namespace) -> int:
    cfg = cfgmod.load_config(args.config, "train")
    out = _out_dir(args)
    schedule = _schedule_from_config(cfg["schedule"])
    mdoc = cfg["model"]
    spec = DenoiserSpec(
        latent_shape=tuple(int(v) for v in mdoc["latent_shape"]),
        channels=int(mdoc["channels"]),
        cond_dim=int(mdoc["cond_dim"]),
        vocab_size=int(mdoc["vocab_size"]),
        temporal_layers=tuple(
            TemporalLayerSpec(str(d["kind"]), int(d["position"]))
            for d in mdoc["temporal_layers"]
        ),
    )
    inputs: dict[str, str] = {}
    ddoc = cfg["data"]
    world = None
    if ddoc.get("path"):
        ds_path = cfgmod.resolve_path(ddoc["path"])
        dataset = load_dataset(ds_path)
        inputs["dataset"] = digest_file(ds_path)
        if dataset.space != "latent":
            raise DataError(
                "denoiser training needs latent-space clips; regenerate with latent=true "
                "or encode through an autoencoder first"
            )
        if tuple(dataset.clips.shape[1:]) != spec.latent_shape:
            raise DataError(
                f"dataset clips {dataset.clips.shape[1:]} do not match model "
                f"latent_shape {spec.latent_shape}"
            )
        if int(dataset.labels.max(initial=0)) >= spec.vocab_size:
            raise DataError("dataset labels exceed the model vocabulary")
    elif ddoc.get("gaussian_world"):
        gw = ddoc["gaussian_world"]
        world = GaussianWorld(mu=float(gw["mu"]), s=float(gw["s"]))
        dataset = gaussian_world_clips(
            world, spec.latent_shape, int(gw.get("count", 64)), int(cfg["seed"])
        )
    else:
        raise ConfigError("train config needs data.path or data.gaussian_world")
    model = TinyVideoDenoiser(spec, schedule.num_steps, init_seed=int(cfg["init_seed"]))
    tdoc = cfg["train"]
    ckpt_path = os.path.join(out, "model.npz")
    train_cfg = TrainConfig(
        steps=int(tdoc["steps"]),
        batch_size=int(tdoc["batch_size"]),
        lr=float(tdoc["lr"]),
        p_uncond=float(tdoc["p_uncond"]),
        freeze=tuple(tdoc["freeze"]),
        checkpoint_path=ckpt_path,
    )
    result = train(model, dataset, schedule, train_cfg, stream(int(cfg["seed"]), "train"))
    curves = {"train": result.loss_curve}
    curve_csv = os.path.join(out, "loss_curve.csv")
    curve_png = os.path.join(out, "loss_curve.png")
    reportmod.write_loss_csv(curve_csv, curves)
    reportmod.save_loss_curves(curve_png, curves, "denoiser training loss")
    extra: dict[str, Any] = {
        "final_loss": result.loss_curve[-1] if result.loss_curve else None,
        "param_count": model.spec.param_count,
    }
    if world is not None:
        extra["analytic_expected_loss"] = bayes_expected_loss(world, schedule)
    manifest = build_manifest(
        command="train",
        config=cfg,
        seed=int(cfg["seed"]),
        inputs=inputs,
        outputs={
            "model.npz": digest_file(ckpt_path),
            "loss_curve.csv": digest_file(curve_csv),
            "loss_curve.png": digest_file(curve_png),
        },
        extra=extra,
    )
    write_manifest(out, manifest)
    final = extra["final_loss"]
    print(
        f"train: {len(result.loss_curve)} steps, final loss "
        f"{final if final is None else format(final, '.5f')}, checkpoint {ckpt_path}"
    )
    return 0


def cmd_train_ae(args: argparse.Namespace) -> int:
    cfg = cfgmod.load_config(args.config, "train-ae")
    out = _out_dir(args)
    sdoc = cfg["spec"]
    spec = AutoencoderSpec(
        latent_channels=int(sdoc["latent_channels"]),
        base_channels=int(sdoc["base_channels"]),
        temporal_layers=tuple(
            TemporalDecoderLayer(int(d["position"]), bool(d["zero_init"]))
            for d in sdoc["temporal_layers"]
        ),
    )
    if not cfg["data"].get("path"):
        raise ConfigError("train-ae config needs data.path")
    ds_path = cfgmod.resolve_path(cfg["data"]["path"])
    dataset = load_dataset(ds_path)
    ae = TinyAutoencoder(spec, init_seed=int(cfg["init_seed"]))
    tdoc = cfg["train"]
    train_cfg = AETrainConfig(
        steps=int(tdoc["steps"]),
        batch_size=int(tdoc["batch_size"]),
        lr=float(tdoc["lr"]),
        a_reg=float(tdoc["a_reg"]),
    )
    curve = pretrain_autoencoder(ae, dataset, train_cfg, stream(int(cfg["seed"]), "train_ae"))
    ckpt_path = os.path.join(out, "ae.npz")
    save_autoencoder(ckpt_path, ae, extra_meta={"phase": "pretrained"})
    curves = {"reconstruction": curve}
    curve_csv = os.path.join(out, "loss_curve.csv")
    curve_png = os.path.join(out, "loss_curve.png")
    reportmod.write_loss_csv(curve_csv, curves)
    reportmod.save_loss_curves(curve_png, curves, "autoencoder pretraining loss")
    manifest = build_manifest(
        command="train-ae",
        config=cfg,
        seed=int(cfg["seed"]),
        inputs={"dataset": digest_file(ds_path)},
        outputs={
            "ae.npz": digest_file(ckpt_path),
            "loss_curve.csv": digest_file(curve_csv),
            "loss_curve.png": digest_file(curve_png),
        },
        extra={"final_loss": curve[-1] if curve else None},
    )
    write_manifest(out, manifest)
    print(f"train-ae: {len(curve)} steps, checkpoint {ckpt_path}")
    return 0


def cmd_finetune_ae(args: argparse.Namespace) -> int:
    cfg = cfgmod.load_config(args.config, "finetune-ae")
    out = _out_dir(args)
    if not cfg.get("checkpoint"):
        raise ConfigError("finetune-ae config needs checkpoint")
    ae_path = cfgmod.resolve_path(cfg["checkpoint"])
    ae, _ = load_autoencoder(ae_path)
    if not cfg["data"].get("path"):
        raise ConfigError("finetune-ae config needs data.path")
    ds_path = cfgmod.resolve_path(cfg["data"]["path"])
    dataset = load_dataset(ds_path)
    wdoc = cfg["weights"]
    weights = FinetuneLossWeights(
        a_rec=float(wdoc["a_rec"]), a_reg=float(wdoc["a_reg"]), a_disc=float(wdoc["a_disc"])
    )
    tdoc = cfg["train"]
    train_cfg = AETrainConfig(
        steps=int(tdoc["steps"]),
        batch_size=int(tdoc["batch_size"]),
        lr=float(tdoc["lr"]),
        disc_lr=float(tdoc["disc_lr"]),
        latent_noise_std=float(tdoc["latent_noise_std"]),
    )
    disc = PatchDiscriminator(ae.spec.base_channels, init_seed=int(cfg["disc_seed"]))
    before = autoencoder_group_digests(ae)
    curves = finetune_decoder(
        ae, dataset, weights, disc, train_cfg, stream(int(cfg["seed"]), "finetune_ae")
    )
    after = autoencoder_group_digests(ae)
    ckpt_path = os.path.join(out, "ae_finetuned.npz")
    save_autoencoder(
        ckpt_path,
        ae,
        extra_meta={
            "phase": "finetuned",
            "digests_before": before,
            "digests_after": after,
            "weights": weights.describe(),
        },
    )
    curve_csv = os.path.join(out, "loss_curve.csv")
    curve_png = os.path.join(out, "loss_curve.png")
    reportmod.write_loss_csv(curve_csv, curves)
    reportmod.save_loss_curves(curve_png, curves, "decoder fine-tuning losses")
    manifest = build_manifest(
        command="finetune-ae",
        config=cfg,
        seed=int(cfg["seed"]),
        inputs={"ae_checkpoint": digest_file(ae_path), "dataset": digest_file(ds_path)},
        outputs={
            "ae_finetuned.npz": digest_file(ckpt_path),
            "loss_curve.csv": digest_file(curve_csv),
            "loss_curve.png": digest_file(curve_png),
        },
        extra={"frozen_groups_unchanged": {
            "encoder": before["encoder"] == after["encoder"],
            "decoder_spatial": before["decoder_spatial"] == after["decoder_spatial"],
        }},
    )
    write_manifest(out, manifest)
    print(f"finetune-ae: {len(curves['total'])} steps, checkpoint {ckpt_path}")
    return 0


def _decode_latent_clips(latent_arrays: list[np.ndarray], ae_path: str | None) -> list[np.ndarray]:
    if ae_path is not None:
        ae, _ = load_autoencoder(cfgmod.resolve_path(ae_path))
        return [ae.decode(lat) for lat in latent_arrays]
    channels = latent_arrays[0].shape[1]
    if channels == 1:
        return [gray_latents_to_clip(lat) for lat in latent_arrays]
    if channels == 3:
        return [np.clip((lat + 1.0) / 2.0, 0.0, 1.0).astype(np.float32) for lat in latent_arrays]
    raise ConfigError(
        f"cannot render {channels}-channel latents directly; pass --ae with a matching decoder"
    )


def cmd_generate(args: argparse.Namespace) -> int:
    ckpt_path = cfgmod.resolve_path(args.checkpoint)
    model, meta = load_denoiser(ckpt_path)
    schedule = _schedule_from_config(meta["schedule"])
    frames = args.frames if args.frames is not None else model.latent_shape[0]
    if args.steps > schedule.num_steps:
        raise ConfigError(
            f"--steps {args.steps} exceeds the checkpoint schedule length {schedule.num_steps}"
        )
    sampler_cfg = SamplerConfig(
        num_inference_steps=args.steps,
        guidance_scale=args.guidance,
        record_trajectory=args.save_trajectory,
        signal_range=args.signal_range,
    )
    lv_cfg = LongVideoConfig(
        frames=frames,
        prompt_frames=args.prompt_frames,
        alpha=args.alpha,
        beta=args.beta,
        num_clips=args.clips,
        sampler=sampler_cfg,
        seed=args.seed,
    )
    cond = model.conditioning_for_label(args.label)
    result = generate_long_video(model, schedule, cond, lv_cfg)
    out = _out_dir(args)

    latent_arrays = [clip.latents for clip in result.clips]
    latents_path = os.path.join(out, LATENTS_NAME)
    np.savez(
        latents_path,
        latents=np.stack(latent_arrays),
        initial_noises=np.stack(result.initial_noises),
    )
    pixel_clips = _decode_latent_clips(latent_arrays, args.ae)
    index = framesmod.write_clip_frames(out, pixel_clips, workers=args.workers)
    rows = reportmod.compute_run_metrics(pixel_clips)
    metrics_path = os.path.join(out, METRICS_NAME)
    reportmod.write_metrics_csv(metrics_path, rows)
    outputs = {
        LATENTS_NAME: digest_file(latents_path),
        METRICS_NAME: digest_file(metrics_path),
        framesmod.INDEX_NAME: digest_file(os.path.join(out, framesmod.INDEX_NAME)),
    }
    for entry in index["files"]:
        outputs[entry["path"]] = entry["sha256"]
    if args.save_trajectory and result.trajectories:
        traj_path = os.path.join(out, "trajectory.npz")
        save_trajectory(traj_path, result.trajectories[-1])
        outputs["trajectory.npz"] = digest_file(traj_path)
    inputs = {"checkpoint": digest_file(ckpt_path)}
    if args.ae is not None:
        inputs["ae_checkpoint"] = digest_file(cfgmod.resolve_path(args.ae))
    flags = {
        "clips": args.clips,
        "frames": frames,
        "prompt_frames": args.prompt_frames,
        "alpha": args.alpha,
        "beta": args.beta,
        "guidance": args.guidance,
        "steps": args.steps,
        "signal_range": args.signal_range,
        "label": args.label,
        "workers": args.workers,
        "save_trajectory": args.save_trajectory,
    }
    manifest = build_manifest(
        command="generate",
        config=flags,
        seed=args.seed,
        inputs=inputs,
        outputs=outputs,
        extra={
            "metrics_digest": digest_json(
                [{**row, "value": float(row["value"])} for row in rows]
            ),
            "latent_shape": list(model.latent_shape),
        },
    )
    write_manifest(out, manifest)
    print(
        f"generate: {len(pixel_clips)} clips x {frames} frames "
        f"({index['height']}x{index['width']}) in {out}"
    )
    return 0


def cmd_metrics(args: argparse.Namespace) -> int:
    run_dir = cfgmod.resolve_path(args.run)
    manifest = load_manifest(run_dir)
    if args.space == "pixel":
        clips = framesmod.read_clip_frames(run_dir)
    else:
        latents_path = os.path.join(run_dir, LATENTS_NAME)
        if not os.path.exists(latents_path):
            raise DataError(f"run has no {LATENTS_NAME} for latent-space metrics")
        with np.load(latents_path) as data:
            clips = [lat for lat in data["latents"]]
    rows = reportmod.compute_run_metrics(clips)
    out = _ensure_dir(
        cfgmod.resolve_path(args.out) if args.out else os.path.join(run_dir, "report")
    )
    csv_path = os.path.join(out, METRICS_NAME)
    reportmod.write_metrics_csv(csv_path, rows)
    figures = reportmod.save_metric_figures(out, rows)
    report_path = os.path.join(out, "report.txt")
    reportmod.write_report_text(
        report_path,
        run_digest=manifest.get("manifest_digest", ""),
        space=args.space,
        clip_count=len(clips),
        frames_per_clip=int(clips[0].shape[0]),
        rows=rows,
    )
    outputs = {
        METRICS_NAME: digest_file(csv_path),
        "report.txt": digest_file(report_path),
    }
    for fig in figures:
        outputs[fig] = digest_file(os.path.join(out, fig))
    report_manifest = build_manifest(
        command="metrics",
        config={"space": args.space, "run": os.path.basename(os.path.abspath(run_dir))},
        seed=None,
        inputs={"run_manifest": manifest.get("manifest_digest", "")},
        outputs=outputs,
        extra={},
    )
    write_manifest(out, report_manifest)
    print(f"metrics: wrote report for {len(clips)} clips to {out}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    run_dir = cfgmod.resolve_path(args.run)
    problems = verify_run(run_dir)
    if problems:
        for problem in problems:
            print(f"verify: {problem}", file=sys.stderr)
        raise DataError(f"{len(problems)} digest problem(s) in {run_dir}")
    print(f"verify: {run_dir} ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clipchain",
        description="Clip-by-clip latent video generation with noise reuse.",
        epilog=f"Relative paths resolve against ${cfgmod.ENV_ROOT} when it is set.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="gen-data config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the denoiser")
    p.add_argument("--config", required=True, help="train config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-ae", help="pretrain the autoencoder per-frame")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("finetune-ae", help="fine-tune the decoder's temporal blocks")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune_ae)

    g = cfgmod.GENERATE_DEFAULTS
    p = sub.add_parser("generate", help="sample a multi-clip video")
    p.add_argument("--checkpoint", required=True, help="denoiser checkpoint (model.npz)")
    p.add_argument("--ae", default=None, help="optional autoencoder checkpoint for decoding")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--label", type=int, default=0, help="conditioning label index")
    p.add_argument("--clips", type=int, default=g["clips"], help="number of clips")
    p.add_argument("--frames", type=int, default=None, help="frames per clip (default: model's)")
    p.add_argument("--prompt-frames", dest="prompt_frames", type=int, default=g["prompt_frames"])
    p.add_argument("--alpha", type=float, default=g["alpha"], help="reused-noise ratio, >= 0")
    p.add_argument("--beta", type=float, default=g["beta"], help="guided-denoising extent in [0,1]")
    p.add_argument("--guidance", type=float, default=g["guidance"], help="guidance scale w")
    p.add_argument("--steps", type=int, default=g["steps"], help="inference steps")
    p.add_argument(
        "--signal-range",
        dest="signal_range",
        type=float,
        default=None,
        help="clamp the per-step clean estimate to [-R, R] (off by default)",
    )
    p.add_argument("--seed", type=int, default=g["seed"])
    p.add_argument("--workers", type=int, default=1, help="frame-encoding worker threads")
    p.add_argument("--save-trajectory", action="store_true", dest="save_trajectory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("metrics", help="compute consistency metrics for a run")
    p.add_argument("--run", required=True, help="generate output directory")
    p.add_argument("--out", default=None, help="report directory (default: RUN/report)")
    p.add_argument("--space", choices=("pixel", "latent"), default="pixel")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("verify", help="recompute a run directory's digests")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ClipchainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
