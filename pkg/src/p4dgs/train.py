"""Four-stage rate-distortion training loop.

Stage 1 fits the static canonical space on all frames, stage 2 adds the
uniform-noise quantization surrogate, stage 3 turns on temporal deformation,
stage 4 adds the bit-rate term. Anchor growing/pruning runs on a fixed
interval during stages 1-3 and the anchor set freezes when stage 4 starts so
the coded support is stable.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import rate, render, temporal
from .model import DynamicScene, SceneConfig
from .scene import AnchorField, Camera


class TrainingDiverged(RuntimeError):
    pass


# appendix-default learning rates per parameter group; keys are matched by
# the leading component of the flattened parameter name
DEFAULT_LR = {
    "field.feature": 0.0075,
    "field.offsets": 0.01,
    "field.offset_scaling": 0.007,
    "field.scale": 0.007,
    "opacity_head": 0.002,
    "color_head": 0.008,
    "rotation_head": 0.004,
    "scale_head": 0.004,
    "deform": 0.0032,  # zero-init delta heads need a hot lr to catch motion
    "grid": 0.0016,
    "quant_head": 0.005,
    "prior_head": 0.005,
}


@dataclass
class TrainConfig:
    stage_end: tuple = (150, 250, 500, 2000)  # cumulative iteration bounds
    # rate weight against raw total bits; at a few hundred anchors the render
    # gradient per coordinate is tiny, so the useful range sits well below
    # the 1e-4..2e-3 band a full-scale capture would use
    lambda_rate: float = 1e-6
    lambda_ssim: float = 0.2
    seed: int = 0
    # anchor geometry
    voxel_eps: float = 0.05
    n_init_points: int = 400
    k: int = 10
    d: int = 32
    tau_alpha: float = 0.01
    # densification
    densify_interval: int = 100
    tau_grad: float = 0.01
    grow_window: int = 16  # iterations of gradient accumulation before managing
    update_factor: int = 16  # growing voxel = update_factor * voxel_eps
    scale_floor: float = 0.004  # keeps anchor scales codable (> q/2)
    # desk-scale knobs
    image_downsample: int = 1
    scene_scale: float = 1.0
    freeze_deform: bool = False
    checkpoint_interval: int = 500
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))

    def __post_init__(self):
        self.stage_end = tuple(int(x) for x in self.stage_end)
        if len(self.stage_end) != 4 or any(
                a >= b for a, b in zip(self.stage_end, self.stage_end[1:])):
            raise ValueError("stage_end must be 4 strictly increasing iteration counts")
        if self.lambda_rate < 0:
            raise ValueError("lambda_rate must be >= 0")
        if self.voxel_eps <= 0:
            raise ValueError("voxel_eps must be positive")
        missing = set(DEFAULT_LR) - set(self.lr)
        if missing:
            raise ValueError(f"lr table missing groups: {sorted(missing)}")

    @property
    def total_iterations(self) -> int:
        return self.stage_end[3]

    def stage(self, iteration: int) -> int:
        for s, end in enumerate(self.stage_end, start=1):
            if iteration < end:
                return s
        return 4

    def scene_config(self) -> SceneConfig:
        return SceneConfig(d=self.d, k=self.k, tau_alpha=self.tau_alpha)

    # -- key=value text round trip ----------------------------------------

    def save(self, path) -> None:
        with open(path, "w") as f:
            for fld in fields(self):
                v = getattr(self, fld.name)
                if isinstance(v, dict):
                    for k in sorted(v):
                        f.write(f"{fld.name}.{k} = {v[k]!r}\n")
                elif isinstance(v, tuple):
                    f.write(f"{fld.name} = {', '.join(str(x) for x in v)}\n")
                else:
                    f.write(f"{fld.name} = {v!r}\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        base = {f.name: f for f in fields(cls)}
        kw: dict = {}
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'name = value'")
                name, value = (s.strip() for s in line.split("=", 1))
                if "." in name:
                    head, sub = name.split(".", 1)
                    if head not in base or base[head].type not in (dict, "dict"):
                        raise ValueError(f"{path}:{lineno}: unknown table {head!r}")
                    kw.setdefault(head, dict(DEFAULT_LR))[sub] = float(value)
                    continue
                if name not in base:
                    raise ValueError(f"{path}:{lineno}: unknown field {name!r}")
                kw[name] = _parse_value(value)
        return cls(**kw)


def _parse_value(s: str):
    if s in ("True", "False"):
        return s == "True"
    if "," in s:
        return tuple(_parse_value(p.strip()) for p in s.split(","))
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s.strip("'\"")


def total_loss(render_loss, anchor_bits, hash_bits, lambda_rate: float):
    """L = lambda_rate * (R_anchor + R_hash) + L_render.

    Any non-finite component aborts immediately, naming the offender; bit
    terms may be None when the rate stage is not active yet.
    """
    if lambda_rate < 0:
        raise ValueError("lambda_rate must be >= 0")
    for name, part in (("render_loss", render_loss),
                       ("anchor_bits", anchor_bits), ("hash_bits", hash_bits)):
        if part is None:
            continue
        v = part.numpy() if isinstance(part, ad.Tensor) else np.asarray(part)
        if not np.all(np.isfinite(v)):
            raise TrainingDiverged(f"non-finite {name} in total loss")
    out = render_loss
    if lambda_rate > 0:
        for part in (anchor_bits, hash_bits):
            if part is not None:
                out = out + lambda_rate * part
    return out


# -- anchor initialization and management ----------------------------------

def voxel_keys(points: np.ndarray, eps: float) -> np.ndarray:
    """Integer voxel coordinates (N,3) of each point at grid pitch eps."""
    return np.floor(np.asarray(points, dtype=np.float64) / eps).astype(np.int64)


def init_anchors(points_or_box, eps: float, d: int, k: int,
                 rng: np.random.Generator | None = None,
                 n_samples: int = 400) -> AnchorField:
    """Anchors at the unique voxel centers of a point set.

    A (2,3) box input is first filled with `n_samples` uniform points (the
    cold-start path when only the scene bounds are known). Features start at
    zero, offsets small uniform, anchor scales at the voxel size.
    """
    if eps <= 0:
        raise ValueError("voxel size must be positive")
    pts = np.asarray(points_or_box, dtype=np.float64)
    if pts.shape == (2, 3) and np.all(pts[0] <= pts[1]):
        if rng is None:
            raise ValueError("box initialization needs an rng")
        pts = rng.uniform(pts[0], pts[1], size=(n_samples, 3))
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise ValueError("anchor init needs a non-empty (N,3) point set")
    keys = np.unique(voxel_keys(pts, eps), axis=0)
    centers = (keys + 0.5) * eps
    n = centers.shape[0]
    rng = rng if rng is not None else np.random.default_rng(0)
    return AnchorField(
        positions=centers,
        feature=np.zeros((n, d)),
        offsets=rng.uniform(-0.5, 0.5, size=(n, k, 3)),
        offset_scaling=np.full((n, 3), eps),
        scale=np.full((n, 3), eps),
    )


@dataclass
class AnchorStats:
    """Per-interval evidence for growing and pruning."""

    opac_sum: np.ndarray  # (n,) summed mean-over-primitives opacity
    opac_cnt: np.ndarray  # (n,) iterations the anchor was in frustum
    grad_sum: np.ndarray  # (n,k) position-gradient magnitude over the window

    @classmethod
    def zeros(cls, n: int, k: int) -> "AnchorStats":
        return cls(np.zeros(n), np.zeros(n), np.zeros((n, k)))


class Adam:
    """Per-parameter moments keyed by name so the set can be edited when
    anchors grow or get pruned."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, params: dict, grads, lr_for, lr_scale: float) -> None:
        for name, p in params.items():
            try:
                g = grads.of(p)
            except KeyError:
                continue  # parameter not touched by this stage's graph
            m = self.m.setdefault(name, np.zeros(p.shape))
            v = self.v.setdefault(name, np.zeros(p.shape))
            t = self.t.get(name, 0) + 1
            self.t[name] = t
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data[...] -= lr_for(name) * lr_scale * mhat / (np.sqrt(vhat) + self.eps)

    def edit_rows(self, name: str, keep: np.ndarray, n_new: int) -> None:
        """Apply an anchor prune/grow to one field parameter's moments:
        surviving rows keep their state, grown rows start at zero."""
        for table in (self.m, self.v):
            if name not in table:
                continue
            old = table[name][keep]
            pad = np.zeros((n_new, *old.shape[1:]))
            table[name] = np.concatenate([old, pad], axis=0)


def group_of(name: str) -> str:
    if name.startswith("field.") or name.startswith("grid."):
        return name if name.startswith("field.") else "grid"
    return name.split(".", 1)[0]


class Trainer:
    def __init__(self, manifest, config: TrainConfig,
                 scene: DynamicScene | None = None):
        if not manifest.train:
            raise ValueError("manifest has no training frames")
        self.manifest = manifest
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.background = manifest.background
        if scene is None:
            anchors = init_anchors(manifest.aabb, config.voxel_eps, config.d,
                                   config.k, self.rng, config.n_init_points)
            scene = DynamicScene.from_field(config.scene_config(), anchors,
                                            rng=np.random.default_rng(config.seed + 1))
        self.scene = scene
        self.opt = Adam()
        self.iteration = 0
        self.stats = AnchorStats.zeros(scene.field.n, config.k)
        self.log_rows: list = []

    # -- parameter plumbing -------------------------------------------------

    def named_params(self) -> dict:
        out = {f"field.{n}": t for n, t in self.scene.field.parameters().items()}
        out.update(self.scene.mlp_parameters())
        out.update({f"grid.{n}": t for n, t in
                    self.scene.rate_model.grid.parameters().items()})
        return out

    def lr_for(self, name: str) -> float:
        return self.config.lr[group_of(name)]

    def lr_scale(self) -> float:
        return 0.01 ** (self.iteration / self.config.total_iterations)

    @property
    def stage(self) -> int:
        return self.config.stage(self.iteration)

    # -- one optimization step ----------------------------------------------

    def _grid_st_values(self) -> ad.Tensor:
        parts = [ad.reshape(rate.binarize(t), (int(t.size),))
                 for t in self.scene.rate_model.grid.parameters().values()]
        return ad.concat(parts, axis=0)

    def training_step(self, frame) -> dict:
        cfg, scene = self.config, self.scene
        stage = self.stage
        aux: dict = {}
        with ad.Tape():
            mu = sigma = None
            attrs = None
            if stage >= 2:
                h = scene.rate_model.context(scene.field.positions)
                q = scene.rate_model.quant_steps(h)
                attrs = scene.quantized_attrs("noisy", rng=self.rng, q=q)
                if stage >= 4:
                    mu, sigma = scene.rate_model.priors(h)
            cbatch = scene.canonical(frame.camera, attrs=attrs, aux_out=aux)
            batch = cbatch
            if stage >= 3 and not cfg.freeze_deform and len(cbatch):
                dx, ds, dr = scene.deform.deform(cbatch.position, frame.t)
                batch = temporal.apply_deformation(cbatch, dx, ds, dr,
                                                   training=True)
            res = render.render(batch, frame.camera, self.background)
            l_render = render.render_loss(res.image, ad.tensor(frame.image),
                                          cfg.lambda_ssim)
            r_anchor = r_hash = None
            if stage >= 4:
                r_anchor = rate.anchor_bits(attrs, mu, sigma, q)
                r_hash = rate.hash_bits(scene.rate_model.grid,
                                        values=self._grid_st_values())
            loss = total_loss(l_render, r_anchor, r_hash,
                              cfg.lambda_rate if stage >= 4 else 0.0)
            grads = ad.backward(loss)

        self._accumulate_stats(aux, cbatch, grads)
        self.opt.step(self.named_params(), grads, self.lr_for, self.lr_scale())
        # projections: anchor scales must stay strictly codable
        s = self.scene.field.scale.data
        np.maximum(s, cfg.scale_floor, out=s)
        return {
            "iteration": self.iteration,
            "stage": stage,
            "render_loss": float(l_render.numpy()),
            "anchor_bits": float(r_anchor.numpy()) if r_anchor is not None else 0.0,
            "hash_bits": float(r_hash.numpy()) if r_hash is not None else 0.0,
            "anchors": self.scene.field.n,
        }

    def _accumulate_stats(self, aux, cbatch, grads) -> None:
        cfg = self.config
        if "vis" in aux and aux["vis"].size:
            vis = aux["vis"]
            self.stats.opac_sum[vis] += aux["alpha_all"].mean(axis=1)
            self.stats.opac_cnt[vis] += 1.0
        upcoming = cfg.densify_interval - 1 - (self.iteration % cfg.densify_interval)
        if upcoming < cfg.grow_window and len(cbatch):
            try:
                g = grads.of(cbatch.position)
            except KeyError:
                return
            np.add.at(self.stats.grad_sum,
                      (cbatch.anchor_index, cbatch.offset_index),
                      np.linalg.norm(g, axis=1))

    # -- anchor management ----------------------------------------------------

    def manage_anchors(self) -> dict:
        """Prune opacity-dead anchors, grow into high-gradient empty voxels.

        Pruning needs the anchor visible in at least half the interval so a
        couple of off-screen iterations are not a death sentence; the set is
        never emptied entirely. Growing places one anchor per coarse voxel
        (update_factor * eps), skipping voxels already holding an anchor.
        """
        cfg, field_ = self.config, self.scene.field
        st = self.stats
        n = field_.n
        seen = st.opac_cnt >= cfg.densify_interval / 2
        mean_op = st.opac_sum / np.maximum(st.opac_cnt, 1.0)
        keep = ~(seen & (mean_op < cfg.tau_alpha))
        if not keep.any():
            keep[int(np.argmax(mean_op))] = True

        coarse = cfg.update_factor * cfg.voxel_eps
        occupied = {tuple(kk) for kk in voxel_keys(field_.positions[keep], coarse)}
        prim_pos = (field_.positions[:, None, :]
                    + field_.offset_scaling.data[:, None, :] * field_.offsets.data)
        hot = (st.grad_sum > cfg.tau_grad) & keep[:, None]
        new_centers = []
        for p in prim_pos[hot]:
            key = tuple(voxel_keys(p[None], coarse)[0])
            if key not in occupied:
                occupied.add(key)
                new_centers.append((np.array(key) + 0.5) * coarse)
        n_new = len(new_centers)

        kept_idx = np.flatnonzero(keep)
        new_pos = (np.concatenate([field_.positions[kept_idx],
                                   np.stack(new_centers)], axis=0)
                   if n_new else field_.positions[kept_idx])
        grown = {
            "feature": np.zeros((n_new, cfg.d)),
            "offsets": self.rng.uniform(-0.5, 0.5, size=(n_new, cfg.k, 3)),
            "offset_scaling": np.full((n_new, 3), cfg.voxel_eps),
            "scale": np.full((n_new, 3), cfg.voxel_eps),
        }
        parts = {}
        for name, t in field_.parameters().items():
            parts[name] = np.concatenate([t.data[kept_idx], grown[name]], axis=0) \
                if n_new else t.data[kept_idx]
            self.opt.edit_rows(f"field.{name}", kept_idx, n_new)
        self.scene.field = AnchorField(positions=new_pos, **parts)
        self.stats = AnchorStats.zeros(self.scene.field.n, cfg.k)
        return {"pruned": int(n - kept_idx.size), "grown": n_new,
                "anchors": self.scene.field.n}

    # -- the loop -------------------------------------------------------------

    def run(self, iterations: int | None = None, log_path=None,
            checkpoint_path=None, progress=None) -> None:
        cfg = self.config
        end = cfg.total_iterations if iterations is None else \
            min(self.iteration + iterations, cfg.total_iterations)
        frames = self.manifest.train
        while self.iteration < end:
            frame = frames[int(self.rng.integers(len(frames)))]
            row = self.training_step(frame)
            self.iteration += 1
            if (self.iteration % cfg.densify_interval == 0
                    and self.config.stage(self.iteration) < 4):
                row.update(self.manage_anchors())
            self.log_rows.append(row)
            if progress is not None:
                progress(row)
            if checkpoint_path is not None and (
                    self.iteration % cfg.checkpoint_interval == 0
                    or self.iteration == end):
                self.save_checkpoint(checkpoint_path)
        if log_path is not None:
            self.write_log(log_path)

    def write_log(self, path) -> None:
        cols = ["iteration", "stage", "render_loss", "anchor_bits",
                "hash_bits", "anchors"]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for row in self.log_rows:
                w.writerow([row.get(c, "") for c in cols])

    # -- checkpointing ----------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        arrays = {f"model.{k}": v for k, v in self.scene.state_dict().items()}
        arrays["model.grid_domain"] = self.scene.grid_domain.copy()
        arrays.update(_camera_arrays(distinct_cameras(
            list(self.manifest.train) + list(self.manifest.test))))
        for name, a in self.opt.m.items():
            arrays[f"opt.m.{name}"] = a
        for name, a in self.opt.v.items():
            arrays[f"opt.v.{name}"] = a
        arrays["stats.opac_sum"] = self.stats.opac_sum
        arrays["stats.opac_cnt"] = self.stats.opac_cnt
        arrays["stats.grad_sum"] = self.stats.grad_sum
        meta = {
            "iteration": self.iteration,
            "opt_t": self.opt.t,
            "rng": _rng_state_to_json(self.rng),
            "config": _config_to_dict(self.config),
        }
        save_arrays(path, arrays, meta)

    @classmethod
    def load_checkpoint(cls, path, manifest) -> "Trainer":
        arrays, meta = load_arrays(path)
        config = _config_from_dict(meta["config"])
        self = cls.__new__(cls)
        self.manifest = manifest
        self.config = config
        self.background = manifest.background
        if not manifest.train:
            raise ValueError("manifest has no training frames")
        self.scene = _scene_from_arrays(arrays, config.scene_config())
        self.opt = Adam()
        self.opt.m = {k[len("opt.m."):]: v for k, v in arrays.items()
                      if k.startswith("opt.m.")}
        self.opt.v = {k[len("opt.v."):]: v for k, v in arrays.items()
                      if k.startswith("opt.v.")}
        self.opt.t = {k: int(v) for k, v in meta["opt_t"].items()}
        self.stats = AnchorStats(arrays["stats.opac_sum"],
                                 arrays["stats.opac_cnt"],
                                 arrays["stats.grad_sum"])
        self.iteration = int(meta["iteration"])
        self.rng = _rng_state_from_json(meta["rng"])
        self.log_rows = []
        return self


def train(manifest, config: TrainConfig, log_path=None, checkpoint_path=None,
          progress=None) -> Trainer:
    """Run the full schedule; on divergence the last saved checkpoint file is
    left in place and the error re-raised."""
    trainer = Trainer(manifest, config)
    trainer.run(log_path=log_path, checkpoint_path=checkpoint_path,
                progress=progress)
    return trainer


# -- flat deterministic array container --------------------------------------
# (fixed byte layout: no timestamps, so identical states give identical files)

_CKPT_MAGIC = b"P4CK"


def save_arrays(path, arrays: dict, meta: dict) -> None:
    index = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])  # tobytes() serializes in C order
        if a.dtype not in (np.float64, np.int64):
            a = a.astype(np.float64)
        index[name] = {"dtype": a.dtype.str, "shape": list(a.shape),
                       "offset": offset}
        blobs.append(a.tobytes())
        offset += len(blobs[-1])
    header = json.dumps({"meta": meta, "arrays": index},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_arrays(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    head = json.loads(blob[8:8 + hlen].decode())
    base = 8 + hlen
    arrays = {}
    for name, spec in head["arrays"].items():
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"], dtype=np.int64)) if spec["shape"] else 1
        start = base + spec["offset"]
        arrays[name] = np.frombuffer(
            blob, dtype=dt, count=n, offset=start).reshape(spec["shape"]).copy()
    return arrays, head["meta"]


def _rng_state_to_json(rng: np.random.Generator) -> str:
    def enc(o):
        if isinstance(o, dict):
            return {k: enc(v) for k, v in o.items()}
        if isinstance(o, (np.integer, int)):
            return str(int(o))
        return o
    return json.dumps(enc(rng.bit_generator.state))


def _rng_state_from_json(s: str) -> np.random.Generator:
    def dec(o):
        if isinstance(o, dict):
            return {k: dec(v) for k, v in o.items()}
        if isinstance(o, str) and (o.isdigit() or (o[:1] == "-" and o[1:].isdigit())):
            return int(o)
        return o
    raw = json.loads(s)
    state = dec(raw)
    state["bit_generator"] = raw["bit_generator"]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _config_to_dict(cfg: TrainConfig) -> dict:
    out = {}
    for fld in fields(cfg):
        v = getattr(cfg, fld.name)
        out[fld.name] = list(v) if isinstance(v, tuple) else v
    return out


def _config_from_dict(d: dict) -> TrainConfig:
    kw = dict(d)
    if "stage_end" in kw:
        kw["stage_end"] = tuple(kw["stage_end"])
    return TrainConfig(**kw)


# -- model-only files (trained or decoded scenes, plus their cameras) ---------

def distinct_cameras(frames) -> list:
    """Unique cameras in first-appearance order."""
    seen: dict = {}
    for f in frames:
        c = f.camera
        key = (c.w2c.tobytes(), c.fx, c.fy, c.cx, c.cy, c.width, c.height)
        if key not in seen:
            seen[key] = c
    return list(seen.values())


def _camera_arrays(cameras) -> dict:
    if not cameras:
        return {}
    return {
        "cameras.w2c": np.stack([c.w2c for c in cameras]),
        "cameras.intr": np.array([[c.fx, c.fy, c.cx, c.cy] for c in cameras]),
        "cameras.size": np.array([[c.width, c.height] for c in cameras],
                                 dtype=np.int64),
    }


def _cameras_from_arrays(arrays) -> list:
    if "cameras.w2c" not in arrays:
        return []
    out = []
    for w2c, intr, size in zip(arrays["cameras.w2c"], arrays["cameras.intr"],
                               arrays["cameras.size"]):
        out.append(Camera(w2c=w2c, fx=float(intr[0]), fy=float(intr[1]),
                          cx=float(intr[2]), cy=float(intr[3]),
                          width=int(size[0]), height=int(size[1])))
    return out


def _scene_from_arrays(arrays, scfg: SceneConfig) -> DynamicScene:
    sd = {k[len("model."):]: v for k, v in arrays.items()
          if k.startswith("model.")}
    field_ = AnchorField(positions=sd["positions"],
                         feature=sd["field.feature"],
                         offsets=sd["field.offsets"],
                         offset_scaling=sd["field.offset_scaling"],
                         scale=sd["field.scale"])
    scene = DynamicScene.from_field(scfg, field_, grid_domain=sd["grid_domain"])
    scene.load_state_dict(sd)
    return scene


def _scene_config_to_dict(cfg: SceneConfig) -> dict:
    out = {}
    for fld in fields(cfg):
        v = getattr(cfg, fld.name)
        out[fld.name] = list(v) if isinstance(v, tuple) else v
    return out


def save_model(path, scene: DynamicScene, cameras=None) -> None:
    """Scene weights + optional camera list, no optimizer state."""
    arrays = {f"model.{k}": v for k, v in scene.state_dict().items()}
    arrays["model.grid_domain"] = scene.grid_domain.copy()
    arrays.update(_camera_arrays(cameras or []))
    save_arrays(path, arrays, {"scene_config": _scene_config_to_dict(scene.config)})


def load_model(path):
    """Read a checkpoint or model file -> (scene, cameras)."""
    arrays, meta = load_arrays(path)
    if "scene_config" in meta:
        kw = {k: tuple(v) if isinstance(v, list) else v
              for k, v in meta["scene_config"].items()}
        scfg = SceneConfig(**kw)
    else:
        scfg = _config_from_dict(meta["config"]).scene_config()
    return _scene_from_arrays(arrays, scfg), _cameras_from_arrays(arrays)
