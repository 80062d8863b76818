"""Container format for compressed dynamic scenes (.p4ds).

Layout, little-endian throughout:

    header    magic "P4DG", version, architecture, quantization bases,
              thresholds, position box, grid domain, counts, section sizes
    grid      hash-grid signs packed 8 per byte, parameter order
    params    every MLP parameter as float16, storage order of
              DynamicScene.mlp_modules (per layer: weight then bias)
    positions per anchor, 3 x uint16 lattice coordinates over the position
              box (decode: lo*(1-n/65535) + hi*(n/65535), endpoint-exact)
    streams   four range-coded attribute streams in KINDS order

The encoder mirrors the decoder's view before coding anything: MLPs are cast
to fp16, positions snapped to their lattice and anchors sorted by lattice
coordinate (x, then y, then z), and the entropy contexts are evaluated on
that snapped state. Attribute indices outside the coder windows clamp. A
decompressed scene therefore recompresses to the identical byte string, and
rendering the decoder's scene matches rendering the encoder's quantized view
pixel for pixel.

Total size identity:
    len = header + ceil(grid_values/8) + 2*param_count + 6*n_anchors
          + sum(stream sizes)
"""

import struct

import numpy as np

from . import coder, nn, rate
from .model import DynamicScene, SceneConfig
from .scene import AnchorField

MAGIC = b"P4DG"
VERSION = 1
POS_LATTICE = 65535  # uint16 position lattice


class CorruptStreamError(ValueError):
    pass


def _snap_positions(positions: np.ndarray, aabb: np.ndarray) -> np.ndarray:
    lo, hi = aabb
    extent = np.where(hi - lo > 0, hi - lo, 1.0)
    u = np.clip((positions - lo) / extent, 0.0, 1.0)
    return np.round(u * POS_LATTICE).astype(np.uint16)


def _unsnap_positions(n: np.ndarray, aabb: np.ndarray) -> np.ndarray:
    lo, hi = aabb
    u = n.astype(np.float64) / POS_LATTICE
    return lo * (1.0 - u) + hi * u


def quantized_view(scene: DynamicScene):
    """The exact model a decoder will reconstruct, plus the coded payload.

    Returns (view, payload) where payload carries the position lattice, the
    per-kind lattice indices, CDF tables and spec ids, and the position box.
    """
    view = scene.clone()
    nn.cast_f16(view.mlp_parameters())
    for t in view.rate_model.grid.parameters().values():
        t.data[...] = np.where(t.data >= 0.0, 1.0, -1.0)

    if view.coding_aabb is not None:
        aabb = view.coding_aabb
        slack = 1e-9 * np.maximum(aabb[1] - aabb[0], 1.0)
        if view.field.n and (np.any(view.field.positions < aabb[0] - slack)
                             or np.any(view.field.positions > aabb[1] + slack)):
            raise ValueError("anchor position outside the coding box")
    elif view.field.n:
        aabb = view.field.aabb()
    else:
        aabb = np.zeros((2, 3))
    n_pos = _snap_positions(view.field.positions, aabb)
    order = np.lexsort((n_pos[:, 2], n_pos[:, 1], n_pos[:, 0]))
    n_pos = n_pos[order]
    positions = _unsnap_positions(n_pos, aabb)

    h = view.rate_model.context(positions)
    mu_t, sigma_t = view.rate_model.priors(h)
    mu, sigma = mu_t.numpy(), sigma_t.numpy()
    steps = view.rate_model.quant_steps(h).numpy()

    n = positions.shape[0]
    cfg = view.config
    widths = {"feature": cfg.d, "offsets": 3 * cfg.k, "offset_scaling": 3, "scale": 3}
    tables, indices, spec_ids, hard = {}, {}, {}, {}
    for j, kind in enumerate(rate.KINDS):
        ch = widths[kind]
        v = view.field.parameters()[kind].numpy()[order].reshape(n, ch)
        t = coder.build_tables(mu[:, j], sigma[:, j], steps[:, j])
        ids = np.repeat(np.arange(n, dtype=np.int64), ch)
        idx = rate.quantize_index(v, steps[:, j : j + 1]).astype(np.int64)
        idx = coder.clamp_indices(idx.reshape(-1), t, ids)
        tables[kind], indices[kind], spec_ids[kind] = t, idx, ids
        hard[kind] = (idx.astype(np.float64) * np.repeat(steps[:, j], ch)).reshape(n, ch)

    if np.any(hard["scale"] <= 0):
        raise ValueError(
            "anchor scale quantizes to zero; keep scales above twice the "
            "scale quantization step before compressing")

    k = view.config.k
    view.field = AnchorField(
        positions=positions,
        feature=hard["feature"],
        offsets=hard["offsets"].reshape(n, k, 3),
        offset_scaling=hard["offset_scaling"],
        scale=hard["scale"],
    )
    view.coding_aabb = np.asarray(aabb, dtype=np.float64).copy()
    payload = {"n_pos": n_pos, "tables": tables, "indices": indices,
               "spec_ids": spec_ids, "aabb": view.coding_aabb}
    return view, payload


def _pack_header(cfg: SceneConfig, aabb, domain, n_anchors, n_grid_pos,
                 n_grid_total, param_count, section_bytes):
    hidden = cfg.deform_hidden
    head = struct.pack("<4sH", MAGIC, VERSION)
    shorts = struct.pack(
        "<8H", cfg.d, cfg.k, cfg.L_x, cfg.L_t, cfg.grid_res3, cfg.grid_res2,
        cfg.grid_channels, len(hidden))
    shorts += struct.pack(f"<{len(hidden)}H", *hidden)
    floats = struct.pack(
        "<19d", cfg.q0_feature, cfg.q0_offsets, cfg.q0_offset_scaling,
        cfg.q0_scale, cfg.tau_alpha, cfg.near, cfg.pad,
        *np.asarray(aabb, dtype=np.float64).reshape(6),
        *np.asarray(domain, dtype=np.float64).reshape(6))
    counts = struct.pack(
        "<11I", n_anchors, n_grid_pos, n_grid_total, param_count,
        *section_bytes)
    header_len = len(head) + 4 + len(shorts) + len(floats) + len(counts)
    return head + struct.pack("<I", header_len) + shorts + floats + counts


def _parse_header(blob: bytes) -> dict:
    if len(blob) < 10:
        raise CorruptStreamError("header: file shorter than the fixed prefix")
    magic, version = struct.unpack_from("<4sH", blob, 0)
    if magic != MAGIC:
        raise CorruptStreamError(f"header: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptStreamError(f"header: unsupported version {version}")
    (header_len,) = struct.unpack_from("<I", blob, 6)
    if header_len > len(blob):
        raise CorruptStreamError("header: declared length exceeds file size")
    off = 10
    d, k, L_x, L_t, res3, res2, channels, n_hidden = struct.unpack_from("<8H", blob, off)
    off += 16
    if off + 2 * n_hidden > header_len:
        raise CorruptStreamError("header: hidden widths overrun the header")
    hidden = struct.unpack_from(f"<{n_hidden}H", blob, off)
    off += 2 * n_hidden
    floats = struct.unpack_from("<19d", blob, off)
    off += 19 * 8
    counts = struct.unpack_from("<11I", blob, off)
    off += 11 * 4
    if off != header_len:
        raise CorruptStreamError("header: length does not match field layout")
    cfg = SceneConfig(
        d=d, k=k, L_x=L_x, L_t=L_t, deform_hidden=tuple(hidden),
        grid_res3=res3, grid_res2=res2, grid_channels=channels,
        q0_feature=floats[0], q0_offsets=floats[1],
        q0_offset_scaling=floats[2], q0_scale=floats[3],
        tau_alpha=floats[4], near=floats[5], pad=floats[6])
    return {
        "config": cfg,
        "header_bytes": header_len,
        "aabb": np.array(floats[7:13]).reshape(2, 3),
        "domain": np.array(floats[13:19]).reshape(2, 3),
        "n_anchors": counts[0],
        "n_grid_pos": counts[1],
        "n_grid_total": counts[2],
        "param_count": counts[3],
        "grid_bytes": counts[4],
        "param_bytes": counts[5],
        "position_bytes": counts[6],
        "stream_bytes": list(counts[7:11]),
    }


def compress(scene: DynamicScene) -> bytes:
    view, payload = quantized_view(scene)

    signs = view.rate_model.grid.coded_values()
    grid_section = np.packbits(signs > 0).tobytes()
    param_section = b"".join(
        t.numpy().astype("<f2").tobytes() for t in view.mlp_parameters().values())
    pos_section = payload["n_pos"].astype("<u2").tobytes()
    streams = [
        coder.encode(payload["indices"][kind], payload["tables"][kind],
                     payload["spec_ids"][kind])
        for kind in rate.KINDS
    ]

    section_bytes = [len(grid_section), len(param_section), len(pos_section),
                     *(len(s) for s in streams)]
    header = _pack_header(
        view.config, payload["aabb"], view.grid_domain, view.field.n,
        int(np.sum(signs > 0)), signs.size, view.param_count(), section_bytes)
    return header + grid_section + param_section + pos_section + b"".join(streams)


def decompress(blob: bytes) -> DynamicScene:
    meta = _parse_header(blob)
    cfg: SceneConfig = meta["config"]
    n = meta["n_anchors"]

    expected = (meta["header_bytes"] + meta["grid_bytes"] + meta["param_bytes"]
                + meta["position_bytes"] + sum(meta["stream_bytes"]))
    if expected != len(blob):
        raise CorruptStreamError(
            f"sections: sizes sum to {expected} bytes but file has {len(blob)}")

    placeholder = AnchorField(
        positions=np.zeros((n, 3)), feature=np.zeros((n, cfg.d)),
        offsets=np.zeros((n, cfg.k, 3)), offset_scaling=np.ones((n, 3)),
        scale=np.ones((n, 3)))
    scene = DynamicScene.from_field(cfg, placeholder,
                                    rng=np.random.default_rng(0),
                                    grid_domain=meta["domain"])

    off = meta["header_bytes"]
    grid = scene.rate_model.grid
    if meta["n_grid_total"] != grid.value_count():
        raise CorruptStreamError("grid: value count does not match architecture")
    if meta["grid_bytes"] != (grid.value_count() + 7) // 8:
        raise CorruptStreamError("grid: section size does not match value count")
    bits = np.unpackbits(
        np.frombuffer(blob, dtype=np.uint8, count=meta["grid_bytes"], offset=off),
        count=grid.value_count())
    if int(bits.sum()) != meta["n_grid_pos"]:
        raise CorruptStreamError("grid: positive-value count mismatch")
    signs = np.where(bits > 0, 1.0, -1.0)
    pos = 0
    for t in grid.parameters().values():
        t.data[...] = signs[pos : pos + t.size].reshape(t.shape)
        pos += t.size
    off += meta["grid_bytes"]

    params = scene.mlp_parameters()
    if meta["param_count"] != sum(t.size for t in params.values()):
        raise CorruptStreamError("params: parameter count does not match architecture")
    if meta["param_bytes"] != 2 * meta["param_count"]:
        raise CorruptStreamError("params: section size is not 2 bytes per parameter")
    raw = np.frombuffer(blob, dtype="<f2", count=meta["param_count"], offset=off)
    pos = 0
    for t in params.values():
        t.data[...] = raw[pos : pos + t.size].astype(np.float64).reshape(t.shape)
        pos += t.size
    off += meta["param_bytes"]

    if meta["position_bytes"] != 6 * n:
        raise CorruptStreamError("positions: section size is not 6 bytes per anchor")
    n_pos = np.frombuffer(blob, dtype="<u2", count=3 * n, offset=off).reshape(n, 3)
    positions = _unsnap_positions(n_pos, meta["aabb"])
    off += meta["position_bytes"]

    h = scene.rate_model.context(positions)
    mu_t, sigma_t = scene.rate_model.priors(h)
    mu, sigma = mu_t.numpy(), sigma_t.numpy()
    steps = scene.rate_model.quant_steps(h).numpy()

    channels = {"feature": cfg.d, "offsets": 3 * cfg.k,
                "offset_scaling": 3, "scale": 3}
    decoded = {}
    for j, kind in enumerate(rate.KINDS):
        size = meta["stream_bytes"][j]
        stream = blob[off : off + size]
        off += size
        tables = coder.build_tables(mu[:, j], sigma[:, j], steps[:, j])
        ids = np.repeat(np.arange(n, dtype=np.int64), channels[kind])
        try:
            idx = coder.decode(stream, tables, ids)
        except coder.CodecError as e:
            raise CorruptStreamError(f"{kind} stream: {e}") from e
        decoded[kind] = (idx.astype(np.float64)
                         * np.repeat(steps[:, j], channels[kind])).reshape(n, channels[kind])

    if np.any(decoded["scale"] <= 0):
        raise CorruptStreamError("scale stream: decoded anchor scale not positive")
    scene.field = AnchorField(
        positions=positions,
        feature=decoded["feature"],
        offsets=decoded["offsets"].reshape(n, cfg.k, 3),
        offset_scaling=decoded["offset_scaling"],
        scale=decoded["scale"])
    scene.coding_aabb = meta["aabb"].copy()
    return scene


def _param_layout(cfg: SceneConfig) -> list:
    """Byte spans of each MLP module inside the params section."""
    probe = AnchorField(
        positions=np.zeros((1, 3)), feature=np.zeros((1, cfg.d)),
        offsets=np.zeros((1, cfg.k, 3)), offset_scaling=np.ones((1, 3)),
        scale=np.ones((1, 3)))
    scene = DynamicScene.from_field(cfg, probe, rng=np.random.default_rng(0))
    spans, off = [], 0
    for mod_name, mod in scene.mlp_modules().items():
        size = 2 * sum(int(t.size) for t in mod.parameters().values())
        spans.append({"name": mod_name, "offset": off, "bytes": size})
        off += size
    return spans


def dump_header(blob: bytes) -> dict:
    """Header fields plus a section table (name, offset, bytes)."""
    meta = _parse_header(blob)
    cfg: SceneConfig = meta["config"]
    sections = []
    off = 0
    for name, size in [
        ("header", meta["header_bytes"]),
        ("grid", meta["grid_bytes"]),
        ("params", meta["param_bytes"]),
        ("positions", meta["position_bytes"]),
        *zip((f"{kind}_stream" for kind in rate.KINDS), meta["stream_bytes"]),
    ]:
        sections.append({"name": name, "offset": off, "bytes": size})
        off += size
    return {
        "magic": MAGIC.decode(),
        "version": VERSION,
        "d": cfg.d, "k": cfg.k, "L_x": cfg.L_x, "L_t": cfg.L_t,
        "deform_hidden": list(cfg.deform_hidden),
        "grid_res3": cfg.grid_res3, "grid_res2": cfg.grid_res2,
        "grid_channels": cfg.grid_channels,
        "q0": [cfg.q0_feature, cfg.q0_offsets, cfg.q0_offset_scaling, cfg.q0_scale],
        "tau_alpha": cfg.tau_alpha, "near": cfg.near, "pad": cfg.pad,
        "position_aabb": meta["aabb"].tolist(),
        "grid_domain": meta["domain"].tolist(),
        "n_anchors": meta["n_anchors"],
        "n_grid_pos": meta["n_grid_pos"],
        "n_grid_total": meta["n_grid_total"],
        "param_count": meta["param_count"],
        "sections": sections,
        "param_layout": _param_layout(cfg),
        "total_bytes": off,
        "size_identity_ok": off == len(blob),
    }


def stream_report(scene: DynamicScene) -> list:
    """Per-stream estimated vs actual bits (estimate from the 16-bit CDFs)."""
    _, payload = quantized_view(scene)
    rows = []
    for kind in rate.KINDS:
        est = coder.estimated_bits(payload["indices"][kind],
                                   payload["tables"][kind],
                                   payload["spec_ids"][kind])
        blob = coder.encode(payload["indices"][kind], payload["tables"][kind],
                            payload["spec_ids"][kind])
        actual = 8 * (len(blob) - coder.STREAM_OVERHEAD)
        rows.append({
            "stream": kind,
            "symbols": int(payload["indices"][kind].size),
            "estimated_bits": est,
            "actual_bits": actual,
            "gap_bits": actual - est,
            "gap_percent": 100.0 * (actual - est) / est if est else 0.0,
        })
    return rows
