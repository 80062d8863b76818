"""Command-line entry point.

One subcommand per workflow step; every command is deterministic given its
flags and input files. Data goes to files, progress and errors go to stderr.
Exit codes: 0 success, 2 bad flags, 3 missing path, 4 corrupt/unreadable file.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import bitstream, data, metrics, train
from .coder import CodecError


class UsageError(ValueError):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="p4dgs",
        description="compact dynamic Gaussian scenes: synthesize, train, "
                    "compress, render, evaluate")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic toy scene directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=20, help="time steps")
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--blobs", type=int, default=3)

    s = sub.add_parser("train", help="run the four-stage training loop")
    s.add_argument("--scene", required=True)
    s.add_argument("--config", default=None, help="key=value config file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=None,
                   help="override the config seed")

    s = sub.add_parser("compress", help="encode a checkpoint to a .p4ds file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("decompress", help="decode a .p4ds file to a model file")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("render", help="render one view at any time in [0,1]")
    s.add_argument("--model", required=True)
    s.add_argument("--view-index", type=int, default=0)
    s.add_argument("--time", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.add_argument("--scene", default=None,
                   help="scene dir for cameras/background (needed when the "
                        "model file carries no cameras)")
    s.add_argument("--background", default=None,
                   help="black | white | r,g,b")

    s = sub.add_parser("eval", help="score a model over a manifest split")
    s.add_argument("--model", required=True,
                   help=".p4ds file or checkpoint (checkpoints are "
                        "compressed in memory first)")
    s.add_argument("--scene", required=True)
    s.add_argument("--split", choices=("test", "train"), default="test")
    s.add_argument("--report", required=True, help="JSON path; a CSV with "
                                                   "the same stem is written too")

    s = sub.add_parser("rd-sweep", help="train per lambda and tabulate "
                                        "rate vs distortion")
    s.add_argument("--scene", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--lambdas", default="1e-4,5e-4,2e-3")
    s.add_argument("--report", required=True)
    s.add_argument("--out-dir", default=None,
                   help="keep per-lambda checkpoints and .p4ds files here")
    s.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("dump-header", help="print .p4ds header fields as JSON")
    s.add_argument("--in", dest="input", required=True)
    return p


# -- command bodies -----------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = data.ToyConfig(size=args.size, n_times=args.frames,
                         n_views=args.views, n_blobs=args.blobs)
    man, blobs = data.generate_toy(seed=args.seed, config=cfg)
    data.save_scene(man, args.out)
    desc = [{"center": b.center.tolist(), "velocity": b.velocity.tolist(),
             "axis": b.axis.tolist(), "rate": b.rate,
             "scale": b.scale.tolist(), "color": b.color.tolist(),
             "opacity": b.opacity} for b in blobs]
    with open(os.path.join(args.out, "blobs.json"), "w") as f:
        json.dump(desc, f, indent=1)
    _log(f"synth: wrote {len(man.train)} train / {len(man.test)} test frames "
         f"to {args.out}")
    return 0


def _load_train_config(path) -> train.TrainConfig:
    return train.TrainConfig.load(path) if path else train.TrainConfig()


def _load_scene_dir(path, cfg: train.TrainConfig):
    man = data.load_dnerf(path, downsample=cfg.image_downsample)
    if cfg.scene_scale != 1.0:
        man = data.scale_manifest(man, cfg.scene_scale)
    return man


def _progress(row) -> None:
    if row["iteration"] % 25 == 0 or "grown" in row:
        extra = (f" anchors={row['anchors']}"
                 + (f" (+{row['grown']}/-{row['pruned']})" if "grown" in row else ""))
        _log(f"iter {row['iteration']:5d} stage {row['stage']} "
             f"L_render={row['render_loss']:.4f} "
             f"R={row['anchor_bits'] + row['hash_bits']:.0f}b{extra}")


def cmd_train(args) -> int:
    cfg = _load_train_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    man = _load_scene_dir(args.scene, cfg)
    os.makedirs(args.out, exist_ok=True)
    trainer = train.train(man, cfg,
                          log_path=os.path.join(args.out, "log.csv"),
                          checkpoint_path=os.path.join(args.out, "checkpoint.ckpt"),
                          progress=_progress)
    _log(f"train: finished {trainer.iteration} iterations, "
         f"{trainer.scene.field.n} anchors -> {args.out}")
    return 0


def cmd_compress(args) -> int:
    scene, _ = train.load_model(args.checkpoint)
    blob = bitstream.compress(scene)
    with open(args.out, "wb") as f:
        f.write(blob)
    _log(f"compress: {len(blob)} bytes -> {args.out}")
    return 0


def cmd_decompress(args) -> int:
    with open(args.input, "rb") as f:
        blob = f.read()
    scene = bitstream.decompress(blob)
    train.save_model(args.out, scene)
    _log(f"decompress: {scene.field.n} anchors -> {args.out}")
    return 0


def _parse_background(spec, default):
    if spec is None:
        return default
    named = {"black": (0.0, 0.0, 0.0), "white": (1.0, 1.0, 1.0)}
    if spec in named:
        return np.array(named[spec])
    parts = spec.split(",")
    if len(parts) != 3:
        raise UsageError(f"background must be black, white or r,g,b: {spec!r}")
    return np.array([float(x) for x in parts])


def cmd_render(args) -> int:
    from . import render as render_mod

    scene, cams = train.load_model(args.model)
    background = np.zeros(3)
    if args.scene is not None:
        man = data.load_dnerf(args.scene)
        cams = train.distinct_cameras(list(man.train) + list(man.test))
        background = man.background
    if not cams:
        raise UsageError("model file carries no cameras; pass --scene")
    if not 0 <= args.view_index < len(cams):
        raise UsageError(f"view index {args.view_index} out of range "
                         f"(0..{len(cams) - 1})")
    if not 0.0 <= args.time <= 1.0:
        raise UsageError(f"time {args.time} outside [0,1]")
    background = _parse_background(args.background, background)
    batch = scene.primitives_at(cams[args.view_index], args.time)
    img = render_mod.render(batch, cams[args.view_index], background).image.numpy()
    data.save_png(args.out, img)
    _log(f"render: view {args.view_index} t={args.time} -> {args.out}")
    return 0


def _scene_and_size(model_path):
    """Return (decoded scene, compressed bytes, rate gap %) for either a
    .p4ds file or a checkpoint (compressed on the fly)."""
    with open(model_path, "rb") as f:
        raw = f.read()
    if raw[:4] == bitstream.MAGIC:
        scene = bitstream.decompress(raw)
        blob = raw
    else:
        trained, _ = train.load_model(model_path)
        blob = bitstream.compress(trained)
        scene = bitstream.decompress(blob)
    rows = bitstream.stream_report(scene)
    est = sum(r["estimated_bits"] for r in rows)
    act = sum(r["actual_bits"] for r in rows)
    gap = 100.0 * (act - est) / est if est else 0.0
    return scene, len(blob), gap


def cmd_eval(args) -> int:
    man = data.load_dnerf(args.scene)
    frames = man.test if args.split == "test" else man.train
    if not frames:
        raise UsageError(f"split {args.split!r} has no frames")
    scene, size, gap = _scene_and_size(args.model)
    rep = metrics.evaluate_scene(scene, frames, man.background)
    rep.compressed_bytes = size
    rep.rate_gap_percent = gap
    rep.write_json(args.report)
    rep.write_csv(os.path.splitext(args.report)[0] + ".csv")
    _log(f"eval: {len(frames)} frames, mean PSNR {rep.mean_psnr:.2f} dB, "
         f"mean SSIM {rep.mean_ssim:.4f}, {size} bytes")
    return 0


def cmd_rd_sweep(args) -> int:
    cfg = _load_train_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    try:
        lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --lambdas list: {args.lambdas!r}")
    if not lambdas:
        raise UsageError("empty --lambdas list")
    man = _load_scene_dir(args.scene, cfg)
    rows = []
    for lam in lambdas:
        run_cfg = replace(cfg, lambda_rate=lam, lr=dict(cfg.lr))
        _log(f"rd-sweep: training lambda_rate={lam:g}")
        trainer = train.train(man, run_cfg, progress=_progress)
        blob = bitstream.compress(trainer.scene)
        decoded = bitstream.decompress(blob)
        rep = metrics.evaluate_scene(decoded, man.test, man.background)
        rows.append({
            "lambda_rate": lam,
            "bytes": len(blob),
            "mb": len(blob) / (1024 * 1024),
            "psnr_db": rep.mean_psnr,
            "ssim": rep.mean_ssim,
        })
        if args.out_dir:
            os.makedirs(args.out_dir, exist_ok=True)
            stem = os.path.join(args.out_dir, f"lambda_{lam:g}")
            trainer.save_checkpoint(stem + ".ckpt")
            with open(stem + ".p4ds", "wb") as f:
                f.write(blob)
    with open(args.report, "w") as f:
        json.dump(rows, f, indent=2)
        f.write("\n")
    csv_path = os.path.splitext(args.report)[0] + ".csv"
    with open(csv_path, "w") as f:
        f.write("lambda_rate,bytes,mb,psnr_db,ssim\n")
        for r in rows:
            f.write(f"{r['lambda_rate']:g},{r['bytes']},{r['mb']:.6f},"
                    f"{r['psnr_db']:.4f},{r['ssim']:.6f}\n")
    _log(f"rd-sweep: {len(rows)} points -> {args.report}")
    return 0


def cmd_dump_header(args) -> int:
    with open(args.input, "rb") as f:
        blob = f.read()
    print(json.dumps(bitstream.dump_header(blob), indent=2))
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "render": cmd_render,
    "eval": cmd_eval,
    "rd-sweep": cmd_rd_sweep,
    "dump-header": cmd_dump_header,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed the reason
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        _log(f"error code=2 message={str(e)!r}")
        return 2
    except FileNotFoundError as e:
        _log(f"error code=3 message={str(e)!r}")
        return 3
    except (bitstream.CorruptStreamError, CodecError, ValueError) as e:
        _log(f"error code=4 message={str(e)!r}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
