"""Scene ingestion and synthesis.

Two sources of (image, camera, t) tuples: directories in the NeRF-synthetic
transforms-JSON layout with a per-frame `time` field, and a procedural toy
generator that renders rigid-motion Gaussian blobs with our own renderer so
ground truth is exact by construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import render
from .scene import Camera, PrimitiveBatch

# background conventions: transforms-JSON scenes composite onto white unless
# the file says otherwise, generated scenes default to black
WHITE = np.ones(3)
BLACK = np.zeros(3)

_GL_FLIP = np.diag([1.0, -1.0, -1.0])  # OpenGL camera axes -> x right, y down, z forward


@dataclass(frozen=True)
class Frame:
    image: np.ndarray  # (H,W,3) in [0,1]
    camera: Camera
    t: float

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"frame image must be (H,W,3), got {img.shape}")
        if not (0.0 <= self.t <= 1.0):
            raise ValueError(f"frame time {self.t} outside [0,1]")
        if (img.shape[0], img.shape[1]) != (self.camera.height, self.camera.width):
            raise ValueError(
                f"image {img.shape[:2]} does not match camera "
                f"{(self.camera.height, self.camera.width)}")
        object.__setattr__(self, "image", img)


@dataclass(frozen=True)
class SceneManifest:
    train: tuple  # Frame tuples; immutable so snapshots are safe to share
    test: tuple
    aabb: np.ndarray  # (2,3) scene bounds, contains the camera look-at targets
    background: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "aabb", np.asarray(self.aabb, dtype=np.float64))
        object.__setattr__(self, "background", np.asarray(self.background, dtype=np.float64))
        if self.aabb.shape != (2, 3) or np.any(self.aabb[0] > self.aabb[1]):
            raise ValueError("aabb must be (2,3) with min <= max")


def c2w_gl_to_w2c(m: np.ndarray) -> np.ndarray:
    """OpenGL camera-to-world (camera looks down -z) to our 3x4 w2c."""
    m = np.asarray(m, dtype=np.float64)
    r = (m[:3, :3] @ _GL_FLIP).T
    return np.hstack([r, (-r @ m[:3, 3])[:, None]])


def w2c_to_c2w_gl(w2c: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = w2c[:, :3].T @ _GL_FLIP
    m[:3, 3] = -w2c[:, :3].T @ w2c[:, 3]
    return m


def _box_downsample(img: np.ndarray, f: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img.reshape(h // f, f, w // f, f, img.shape[2]).mean(axis=(1, 3))


def _load_image(path: str, background: np.ndarray) -> np.ndarray:
    raw = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    if raw.ndim == 2:
        raw = raw[:, :, None].repeat(3, axis=2)
    if raw.shape[2] == 4:
        a = raw[:, :, 3:4]
        return raw[:, :, :3] * a + background * (1.0 - a)
    return raw[:, :, :3]


def _read_meta(root, split):
    jpath = os.path.join(root, f"transforms_{split}.json")
    if not os.path.isfile(jpath):
        raise FileNotFoundError(f"missing transforms file: {jpath}")
    try:
        with open(jpath) as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed JSON in {jpath}: {e}") from e
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise ValueError(f"{jpath} lacks camera_angle_x/frames fields")
    return meta, jpath


def _frames_from_meta(root, meta, jpath, background, downsample):
    angle = float(meta["camera_angle_x"])
    frames, shape = [], None
    for fr in meta["frames"]:
        rel = fr["file_path"]
        ipath = os.path.join(root, rel)
        if not os.path.splitext(ipath)[1]:
            ipath += ".png"
        if not os.path.isfile(ipath):
            raise FileNotFoundError(f"missing image: {ipath}")
        img = _load_image(ipath, background)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ValueError(
                f"image size mismatch at {ipath}: {img.shape[:2]} vs {shape[:2]}")

        h, w = img.shape[:2]
        fx = w / (2.0 * np.tan(angle / 2.0))
        cx, cy = w / 2.0, h / 2.0
        if downsample > 1:
            if h % downsample or w % downsample:
                raise ValueError(
                    f"downsample {downsample} does not divide {w}x{h} ({ipath})")
            img = _box_downsample(img, downsample)
            h, w = img.shape[:2]
            fx, cx, cy = fx / downsample, cx / downsample, cy / downsample

        m = np.asarray(fr["transform_matrix"], dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"transform_matrix must be 4x4 in {jpath}")
        cam = Camera(w2c=c2w_gl_to_w2c(m), fx=fx, fy=fx, cx=cx, cy=cy,
                     width=w, height=h)
        t = float(np.clip(float(fr.get("time", 0.0)), 0.0, 1.0))
        frames.append(Frame(image=img, camera=cam, t=t))
    return frames


def _lookat_aabb(frames) -> np.ndarray:
    """Scene box from where the cameras converge.

    Least-squares point nearest all optical axes, each camera's target is the
    closest point on its own axis, box of targets padded by half the median
    camera distance (orbit captures keep the subject well inside that)."""
    origins = np.stack([f.camera.position for f in frames])
    dirs = np.stack([f.camera.w2c[2, :3] for f in frames])
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for o, d in zip(origins, dirs):
        p = np.eye(3) - np.outer(d, d)
        a += p
        b += p @ o
    point = np.linalg.lstsq(a, b, rcond=None)[0]
    targets = origins + np.sum((point - origins) * dirs, axis=1, keepdims=True) * dirs
    pad = 0.5 * float(np.median(np.linalg.norm(origins - point, axis=1)))
    pad = max(pad, 1e-3)
    return np.stack([targets.min(axis=0) - pad, targets.max(axis=0) + pad])


def load_dnerf(root, downsample: int = 1, background=None) -> SceneManifest:
    """Read transforms_train/test.json + images under `root`.

    background=None takes the file's own `background` key when present and
    white otherwise. Accepts the optional `aabb` key written by save_scene;
    without it the box is estimated from camera convergence.
    """
    if not os.path.isdir(root):
        raise FileNotFoundError(f"scene directory not found: {root}")
    meta, jpath = _read_meta(root, "train")
    tmeta, tjpath = _read_meta(root, "test")
    if background is not None:
        bg = np.asarray(background, dtype=np.float64)
    elif "background" in meta:
        bg = np.asarray(meta["background"], dtype=np.float64)
    else:
        bg = WHITE
    train = _frames_from_meta(root, meta, jpath, bg, downsample)
    test = _frames_from_meta(root, tmeta, tjpath, bg, downsample)
    if not train:
        raise ValueError(f"no training frames in {root}")
    aabb = (np.asarray(meta["aabb"], dtype=np.float64) if "aabb" in meta
            else _lookat_aabb(train + test))
    return SceneManifest(train=tuple(train), test=tuple(test), aabb=aabb, background=bg)


def scale_manifest(man: SceneManifest, s: float) -> SceneManifest:
    """Uniformly rescale world units (projection is scale-invariant, so the
    images stay valid; only geometry numbers change)."""
    if s <= 0:
        raise ValueError("scene scale must be positive")

    def scale_frame(f: Frame) -> Frame:
        c = f.camera
        w2c = c.w2c.copy()
        w2c[:, 3] *= s
        cam = Camera(w2c=w2c, fx=c.fx, fy=c.fy, cx=c.cx, cy=c.cy,
                     width=c.width, height=c.height)
        return Frame(image=f.image, camera=cam, t=f.t)

    return SceneManifest(train=tuple(scale_frame(f) for f in man.train),
                         test=tuple(scale_frame(f) for f in man.test),
                         aabb=man.aabb * s, background=man.background)


def look_at_camera(position, target, fov_x: float, width: int, height: int,
                   up=(0.0, 0.0, 1.0)) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ValueError("camera forward is parallel to up")
    right = right / nr
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    fx = width / (2.0 * np.tan(fov_x / 2.0))
    return Camera(w2c=np.hstack([r, (-r @ position)[:, None]]), fx=fx, fy=fx,
                  cx=width / 2.0, cy=height / 2.0, width=width, height=height)


@dataclass(frozen=True)
class Blob:
    """One rigid-motion Gaussian: center drifts linearly, orientation spins
    about a fixed axis. Everything needed to predict any frame analytically."""

    center: np.ndarray  # (3,) at t=0
    velocity: np.ndarray  # (3,) per unit t
    axis: np.ndarray  # (3,) unit rotation axis
    rate: float  # radians per unit t
    scale: np.ndarray  # (3,)
    color: np.ndarray  # (3,)
    opacity: float

    def position_at(self, t: float) -> np.ndarray:
        return self.center + self.velocity * t

    def quaternion_at(self, t: float) -> np.ndarray:
        half = 0.5 * self.rate * t
        return np.concatenate([[np.cos(half)], np.sin(half) * self.axis])


@dataclass
class ToyConfig:
    size: int = 64
    n_times: int = 20
    n_views: int = 8
    n_blobs: int = 3
    cam_radius: float = 4.0
    cam_elevation: float = 0.35  # radians
    fov_x: float = 0.8
    background: tuple = (0.0, 0.0, 0.0)
    extras: dict = field(default_factory=dict)


_PALETTE = np.array([
    [0.92, 0.28, 0.22], [0.22, 0.62, 0.92], [0.95, 0.83, 0.25],
    [0.35, 0.85, 0.42], [0.80, 0.40, 0.88], [0.95, 0.55, 0.20],
])


def _sample_blobs(rng, n: int) -> list:
    blobs = []
    for i in range(n):
        d = rng.normal(size=3)
        center = 0.55 * d / np.linalg.norm(d)
        v = rng.normal(size=3)
        v = v / np.linalg.norm(v) * rng.uniform(0.45, 0.7)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        scale = np.array([0.34, 0.17, 0.11]) * rng.uniform(0.85, 1.15)
        color = np.clip(_PALETTE[i % len(_PALETTE)] + rng.uniform(-0.05, 0.05, 3), 0, 1)
        blobs.append(Blob(center=center, velocity=v, axis=axis,
                          rate=float(rng.uniform(2.0, 4.0)),
                          scale=scale, color=color,
                          opacity=float(rng.uniform(0.82, 0.95))))
    return blobs


def _blob_batch(blobs, t: float) -> PrimitiveBatch:
    n = len(blobs)
    return PrimitiveBatch(
        position=ad.tensor(np.stack([b.position_at(t) for b in blobs])),
        opacity=ad.tensor(np.array([b.opacity for b in blobs])),
        color=ad.tensor(np.stack([b.color for b in blobs])),
        scale=ad.tensor(np.stack([b.scale for b in blobs])),
        rotation=ad.tensor(np.stack([b.quaternion_at(t) for b in blobs])),
        anchor_index=np.arange(n), offset_index=np.zeros(n, np.intp),
    )


def render_blobs(blobs, camera: Camera, t: float, background) -> np.ndarray:
    """Exact ground truth: cutoffs disabled so compositing has no kinks."""
    if not blobs:
        h, w = camera.height, camera.width
        return np.broadcast_to(np.asarray(background, np.float64), (h, w, 3)).copy()
    res = render.render(_blob_batch(blobs, t), camera, np.asarray(background),
                        cutoffs=False)
    return np.clip(res.image.numpy(), 0.0, 1.0)


def generate_toy(seed: int = 0, config: ToyConfig | None = None):
    """Deterministic synthetic dynamic scene.

    Returns (manifest, blobs); the blob list is the analytic ground truth.
    Last view is held out for test, the rest train.
    """
    cfg = config or ToyConfig()
    rng = np.random.default_rng(seed)
    blobs = _sample_blobs(rng, cfg.n_blobs)
    bg = np.asarray(cfg.background, dtype=np.float64)

    cams = []
    for i in range(cfg.n_views):
        az = 2.0 * np.pi * i / cfg.n_views
        pos = cfg.cam_radius * np.array([
            np.cos(az) * np.cos(cfg.cam_elevation),
            np.sin(az) * np.cos(cfg.cam_elevation),
            np.sin(cfg.cam_elevation),
        ])
        cams.append(look_at_camera(pos, (0.0, 0.0, 0.0), cfg.fov_x,
                                   cfg.size, cfg.size))

    times = (np.linspace(0.0, 1.0, cfg.n_times) if cfg.n_times > 1
             else np.array([0.0]))
    train, test = [], []
    for ti, t in enumerate(times):
        for vi, cam in enumerate(cams):
            img = render_blobs(blobs, cam, float(t), bg)
            fr = Frame(image=img, camera=cam, t=float(t))
            (test if vi == cfg.n_views - 1 else train).append(fr)

    if blobs:
        lo = np.min([np.minimum(b.center, b.position_at(1.0)) - 3 * b.scale.max()
                     for b in blobs], axis=0)
        hi = np.max([np.maximum(b.center, b.position_at(1.0)) + 3 * b.scale.max()
                     for b in blobs], axis=0)
        aabb = np.stack([lo, hi])
    else:
        aabb = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    manifest = SceneManifest(train=tuple(train), test=tuple(test),
                             aabb=aabb, background=bg)
    return manifest, blobs


def save_png(path, image: np.ndarray) -> None:
    """Linear [0,1] floats to 8-bit PNG, x255 rounded."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def save_scene(manifest: SceneManifest, root) -> None:
    """Write a manifest as a transforms-JSON directory load_dnerf reads back.

    The standard layout plus two root keys (`background`, `aabb`) so a reload
    reproduces the manifest instead of re-deriving conventions."""
    os.makedirs(root, exist_ok=True)
    for split, frames in (("train", manifest.train), ("test", manifest.test)):
        os.makedirs(os.path.join(root, split), exist_ok=True)
        if frames:
            angles = {2.0 * np.arctan(f.camera.width / (2.0 * f.camera.fx))
                      for f in frames}
            angle = angles.pop()
        else:
            angle = 0.8
        entries = []
        for i, f in enumerate(frames):
            rel = f"./{split}/r_{i:03d}"
            save_png(os.path.join(root, rel + ".png"), f.image)
            entries.append({
                "file_path": rel,
                "time": f.t,
                "transform_matrix": w2c_to_c2w_gl(f.camera.w2c).tolist(),
            })
        meta = {
            "camera_angle_x": angle,
            "background": manifest.background.tolist(),
            "aabb": manifest.aabb.tolist(),
            "frames": entries,
        }
        with open(os.path.join(root, f"transforms_{split}.json"), "w") as f:
            json.dump(meta, f, indent=1)
