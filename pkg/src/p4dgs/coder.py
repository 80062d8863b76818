"""Lossless range coding of quantized lattice indices against Gaussian priors.

Each symbol is an integer index n (the coded value is n*q) with its own prior
(mu, sigma, q). Symbols are coded against a 16-bit integer CDF built from the
same probability model the rate estimate uses, so estimated and actual bits
agree up to staircase rounding plus a short (usually one-byte) flush.

The coder itself is the classic carry-less byte-oriented range coder: 32-bit
low/range, renormalization emits the top byte once it is settled, and the
range is trimmed at 2^16-boundary straddles instead of propagating carries.
"""

import zlib
import struct

import numpy as np
import numba

from . import rate

TOTAL = 1 << 16      # CDF precision; also the minimum coder range
TOP = 1 << 24
BOT = 1 << 16
MASK32 = 0xFFFFFFFF
WINDOW_SIGMAS = 16.0
MAX_WINDOW = 32768   # lattice points per symbol window
STREAM_OVERHEAD = 12  # count u32 + spec digest u32 + trailing checksum u32


class CodecError(ValueError):
    pass


def windows_for(mu, sigma, q, cap=MAX_WINDOW):
    """Lattice window [n_min, n_max] covering mu +- 16 sigma, rounded outward.

    Windows wider than `cap` are re-centred on round(mu/q) and truncated; the
    decoder recomputes the identical window from the same priors.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n_min = np.floor((mu - WINDOW_SIGMAS * sigma) / q).astype(np.int64)
    n_max = np.ceil((mu + WINDOW_SIGMAS * sigma) / q).astype(np.int64)
    wide = (n_max - n_min + 1) > cap
    if np.any(wide):
        center = np.round(mu / q).astype(np.int64)
        n_min = np.where(wide, center - cap // 2, n_min)
        n_max = np.where(wide, n_min + cap - 1, n_max)
    return n_min, n_max


class CdfTables:
    """Per-symbol staircase CDFs over the lattice windows, plus a digest of
    the priors they were built from (folded into the stream checksum)."""

    def __init__(self, n_min, n_max, offsets, cdf, digest):
        self.n_min = n_min
        self.n_max = n_max
        self.offsets = offsets
        self.cdf = cdf
        self.digest = digest

    @property
    def n_specs(self):
        return self.n_min.shape[0]


def build_tables(mu, sigma, q, n_min=None, n_max=None, cap=MAX_WINDOW):
    """Integer CDF tables: every window symbol gets mass >= 1, the total is
    exactly 2^16. C(i) = floor((2^16 - W) * cumP(i)) + i, last entry pinned.
    """
    mu = np.ascontiguousarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.ascontiguousarray(sigma, dtype=np.float64).reshape(-1)
    q = np.ascontiguousarray(q, dtype=np.float64).reshape(-1)
    if not (mu.shape == sigma.shape == q.shape):
        raise CodecError("prior arrays must have matching length")
    if np.any(sigma <= 0) or np.any(q <= 0):
        raise CodecError("priors require sigma > 0 and q > 0")
    if n_min is None:
        n_min, n_max = windows_for(mu, sigma, q, cap)
    else:
        n_min = np.asarray(n_min, dtype=np.int64).reshape(-1)
        n_max = np.asarray(n_max, dtype=np.int64).reshape(-1)
    widths = n_max - n_min + 1
    if np.any(widths < 1):
        raise CodecError("empty lattice window")
    if np.any(widths > MAX_WINDOW):
        raise CodecError(f"lattice window wider than {MAX_WINDOW}")

    n = mu.shape[0]
    starts = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(widths, out=starts[1:])
    total_lattice = int(starts[-1])
    seg = np.repeat(np.arange(n, dtype=np.int64), widths)
    local = np.arange(total_lattice, dtype=np.int64) - starts[seg]
    lattice = (n_min[seg] + local).astype(np.float64) * q[seg]

    p = rate.prob_mass(lattice, mu[seg], sigma[seg], q[seg])
    if n:
        sums = np.add.reduceat(p, starts[:-1])
    else:
        sums = np.zeros(0)
    p = p / sums[seg]
    cum = np.cumsum(p)
    base = cum[starts[:-1]] - p[starts[:-1]]
    cum_local = np.clip(cum - base[seg], 0.0, 1.0)

    scale = (TOTAL - widths).astype(np.float64)
    upper = np.floor(scale[seg] * cum_local).astype(np.int64) + local + 1
    upper[starts[1:] - 1] = TOTAL  # pin the last entry against float drift

    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(widths + 1, out=offsets[1:])
    cdf = np.zeros(int(offsets[-1]), dtype=np.int64)
    cdf[offsets[seg] + local + 1] = upper

    digest = zlib.crc32(mu.tobytes())
    for arr in (sigma, q, n_min, n_max):
        digest = zlib.crc32(np.ascontiguousarray(arr).tobytes(), digest)
    return CdfTables(n_min, n_max, offsets, cdf, digest)


def _spec_ids(tables, indices, spec_ids):
    if spec_ids is None:
        if indices.shape[0] != tables.n_specs:
            raise CodecError("symbol count does not match spec count")
        return np.arange(tables.n_specs, dtype=np.int64)
    spec_ids = np.ascontiguousarray(spec_ids, dtype=np.int64).reshape(-1)
    if spec_ids.shape[0] != indices.shape[0]:
        raise CodecError("spec_ids length does not match symbol count")
    if spec_ids.size and (spec_ids.min() < 0 or spec_ids.max() >= tables.n_specs):
        raise CodecError("spec id out of range")
    return spec_ids


def clamp_indices(indices, tables, spec_ids=None):
    """The lattice index the decoder will reproduce for each input index."""
    indices = np.ascontiguousarray(indices, dtype=np.int64).reshape(-1)
    ids = _spec_ids(tables, indices, spec_ids)
    return np.clip(indices, tables.n_min[ids], tables.n_max[ids])


@numba.njit(cache=True)
def _encode_kernel(local, seg, offsets, cdf, out):
    low = 0
    rng = MASK32
    n = 0
    for s in range(local.shape[0]):
        base = offsets[seg[s]]
        i = local[s]
        clo = cdf[base + i]
        freq = cdf[base + i + 1] - clo
        r = rng >> 16
        low = (low + r * clo) & MASK32
        rng = r * freq
        while True:
            if ((low ^ (low + rng)) & MASK32) < TOP:
                pass
            elif rng < BOT:
                rng = (-low) & (BOT - 1)
            else:
                break
            out[n] = (low >> 24) & 0xFF
            n += 1
            low = (low << 8) & MASK32
            rng = (rng << 8) & MASK32
    # minimal flush: renorm leaves rng >= 2^16, so some multiple of
    # 2^(32-8k) lands in [low, low+rng) for k <= 2; the decoder zero-extends
    # short payloads, so emitting the top k bytes of that multiple suffices
    for k in range(5):
        shift = 32 - 8 * k
        step = 1 << shift
        v = ((low + step - 1) >> shift) << shift
        if ((v - low) & MASK32) < rng:
            for j in range(1, k + 1):
                out[n] = (v >> (32 - 8 * j)) & 0xFF
                n += 1
            break
    return n


@numba.njit(cache=True)
def _decode_kernel(payload, seg, offsets, cdf, out):
    low = 0
    rng = MASK32
    code = 0
    pos = 0
    for _ in range(4):
        code = ((code << 8) | payload[pos]) & MASK32
        pos += 1
    for s in range(out.shape[0]):
        base = offsets[seg[s]]
        width = offsets[seg[s] + 1] - base - 1
        r = rng >> 16
        dv = ((code - low) & MASK32) // r
        if dv >= TOTAL:
            dv = TOTAL - 1
        lo_i = base
        hi_i = base + width - 1
        while lo_i < hi_i:  # rightmost i with cdf[i] <= dv (cdf strictly increasing)
            mid = (lo_i + hi_i + 1) >> 1
            if cdf[mid] <= dv:
                lo_i = mid
            else:
                hi_i = mid - 1
        i = lo_i - base
        clo = cdf[base + i]
        freq = cdf[base + i + 1] - clo
        low = (low + r * clo) & MASK32
        rng = r * freq
        while True:
            if ((low ^ (low + rng)) & MASK32) < TOP:
                pass
            elif rng < BOT:
                rng = (-low) & (BOT - 1)
            else:
                break
            code = ((code << 8) | payload[pos]) & MASK32
            pos += 1
            low = (low << 8) & MASK32
            rng = (rng << 8) & MASK32
        out[s] = i
    return pos


def _stream_digest(tables, spec_ids):
    return zlib.crc32(spec_ids.tobytes(), tables.digest) & 0xFFFFFFFF


def encode(indices, tables, spec_ids=None):
    """Range-code lattice indices; out-of-window indices are clamped first
    (see clamp_indices for the values the decoder will see)."""
    indices = np.ascontiguousarray(indices, dtype=np.int64).reshape(-1)
    ids = _spec_ids(tables, indices, spec_ids)
    count = indices.shape[0]
    digest = _stream_digest(tables, ids)
    header = struct.pack("<II", count, digest)
    if count == 0:
        payload = b""
    else:
        local = np.clip(indices, tables.n_min[ids], tables.n_max[ids]) - tables.n_min[ids]
        out = np.empty(5 * count + 64, dtype=np.uint8)
        n = _encode_kernel(local, ids, tables.offsets, tables.cdf, out)
        payload = out[:n].tobytes()
    checksum = zlib.crc32(header) & 0xFFFFFFFF
    return header + payload + struct.pack("<I", checksum)


def decode(blob, tables, spec_ids=None):
    if len(blob) < STREAM_OVERHEAD:
        raise CodecError("truncated stream")
    count, digest = struct.unpack("<II", blob[:8])
    (checksum,) = struct.unpack("<I", blob[-4:])
    if checksum != (zlib.crc32(blob[:8]) & 0xFFFFFFFF):
        raise CodecError("checksum mismatch")
    if spec_ids is None:
        if count != tables.n_specs:
            raise CodecError(f"stream has {count} symbols, expected {tables.n_specs}")
        ids = np.arange(count, dtype=np.int64)
    else:
        ids = np.ascontiguousarray(spec_ids, dtype=np.int64).reshape(-1)
        if ids.shape[0] != count:
            raise CodecError(f"stream has {count} symbols, expected {ids.shape[0]}")
    if digest != _stream_digest(tables, ids):
        raise CodecError("spec digest mismatch: stream was coded against different priors")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    payload = np.frombuffer(blob[8:-4], dtype=np.uint8)
    payload = np.concatenate([payload, np.zeros(8, dtype=np.uint8)])  # renorm slack
    local = np.empty(count, dtype=np.int64)
    _decode_kernel(payload, ids, tables.offsets, tables.cdf, local)
    return local + tables.n_min[ids]


def estimated_bits(indices, tables, spec_ids=None):
    """Sum of -log2 p over symbols, with p read off the 16-bit integer CDF
    (what the coder actually uses, not the continuous Gaussian)."""
    indices = np.ascontiguousarray(indices, dtype=np.int64).reshape(-1)
    ids = _spec_ids(tables, indices, spec_ids)
    if indices.size == 0:
        return 0.0
    local = np.clip(indices, tables.n_min[ids], tables.n_max[ids]) - tables.n_min[ids]
    base = tables.offsets[ids]
    freq = tables.cdf[base + local + 1] - tables.cdf[base + local]
    return float(np.sum(np.log2(TOTAL / freq.astype(np.float64))))
