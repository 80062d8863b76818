"""Image-quality metrics and evaluation reports."""

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import render

PSNR_SENTINEL = 99.0  # stands in for +inf on identical images


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10*log10(1/MSE) on [0,1] images, capped at the 99 dB sentinel."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(10.0 * np.log10(1.0 / mse), PSNR_SENTINEL)


def ssim(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(render.ssim(ad.tensor(a), ad.tensor(b)).numpy())


@dataclass
class EvalReport:
    """Per-frame quality plus size/rate facts for one compressed model."""

    frames: list = field(default_factory=list)  # rows of per-frame dicts
    compressed_bytes: int = 0
    rate_gap_percent: float = 0.0
    lpips: str = "n/a (requires pretrained network)"

    def add_frame(self, name: str, t: float, psnr_db: float, ssim_val: float,
                  render_ms: float) -> None:
        self.frames.append({
            "frame": name, "time": t, "psnr_db": psnr_db,
            "ssim": ssim_val, "render_ms": render_ms,
        })

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([f["psnr_db"] for f in self.frames])) if self.frames else 0.0

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([f["ssim"] for f in self.frames])) if self.frames else 0.0

    def summary(self) -> dict:
        return {
            "mean_psnr_db": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "compressed_bytes": self.compressed_bytes,
            "compressed_mb": self.compressed_bytes / (1024 * 1024),
            "rate_gap_percent": self.rate_gap_percent,
            "lpips": self.lpips,
            "n_frames": len(self.frames),
        }

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"summary": self.summary(), "frames": self.frames}, f, indent=2)
            f.write("\n")

    def write_csv(self, path) -> None:
        cols = ["frame", "time", "psnr_db", "ssim", "render_ms"]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            for row in self.frames:
                w.writerow({c: row[c] for c in cols})


def evaluate_scene(scene, frames, background) -> EvalReport:
    """Render every frame at its own (view, t) and score against the stored
    image. Size/rate fields are left for the caller to fill in."""
    rep = EvalReport()
    bg = np.asarray(background, dtype=np.float64)
    for i, fr in enumerate(frames):
        t0 = time.perf_counter()
        batch = scene.primitives_at(fr.camera, fr.t)
        img = np.clip(render.render(batch, fr.camera, bg).image.numpy(), 0.0, 1.0)
        ms = (time.perf_counter() - t0) * 1e3
        rep.add_frame(f"frame_{i:03d}", fr.t, psnr(img, fr.image),
                      ssim(img, fr.image), ms)
    return rep
