"""Fit a small dynamic scene end to end and look at the renders.

Generates the seeded toy scene (moving Gaussian blobs), runs a shortened
four-stage training schedule, and writes ground-truth vs rendered frames for
the held-out camera at a few timestamps. Takes a couple of minutes on one
core; bump --size/--iters for higher quality.
"""

import argparse
import os

import numpy as np

from p4dgs import data, metrics, render, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo_out/fit_toy")
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--iters", type=int, default=600)
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    manifest, blobs = data.generate_toy(
        seed=0, config=data.ToyConfig(size=args.size))
    print(f"toy scene: {len(manifest.train)} training frames, "
          f"{len(manifest.test)} held out, {len(blobs)} blobs, "
          f"{args.size}x{args.size}")

    # stage boundaries scale with the shortened budget
    n = args.iters
    cfg = train.TrainConfig(
        stage_end=(round(0.075 * n), round(0.125 * n), round(0.25 * n), n))
    print(f"training {n} iterations, stages end at {cfg.stage_end}")

    def progress(row):
        if row["iteration"] % 100 == 0:
            print(f"  iter {row['iteration']:4d} stage {row['stage']} "
                  f"render_loss {row['render_loss']:.4f} "
                  f"anchors {row['anchors']}")

    tr = train.train(manifest, cfg, progress=progress)

    report = metrics.evaluate_scene(tr.scene, manifest.test,
                                    manifest.background)
    print(f"held-out view: PSNR {report.mean_psnr:.2f} dB, "
          f"SSIM {report.mean_ssim:.4f}")

    for frame_idx in (0, len(manifest.test) // 2, len(manifest.test) - 1):
        fr = manifest.test[frame_idx]
        batch = tr.scene.primitives_at(fr.camera, fr.t)
        img = np.clip(render.render(batch, fr.camera,
                                    manifest.background).image.numpy(), 0, 1)
        data.save_png(os.path.join(args.out, f"pred_t{fr.t:.2f}.png"), img)
        data.save_png(os.path.join(args.out, f"gt_t{fr.t:.2f}.png"), fr.image)
    print(f"wrote prediction/ground-truth pairs to {args.out}/")


if __name__ == "__main__":
    main()
