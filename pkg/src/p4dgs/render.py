"""Differentiable Gaussian splatting: EWA-style covariance projection,
front-to-back alpha compositing, and the L1/D-SSIM rendering loss.

Projection runs in generic tensor ops; compositing is one fused tape node
with a handwritten backward (per-pixel work is recomputed chunk by chunk in
the backward pass, so the tape never holds pixel-by-splat intermediates).
Pixel (row i, col j) has center (j+0.5, i+0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOWPASS = 0.3  # screen-space covariance floor, keeps footprints >= ~1px
ALPHA_CEIL = 1.0 - 1e-12
ALPHA_CUT = 1.0 / 255.0
TRANSMIT_CUT = 1e-4
# radius where alpha 1 decays below ALPHA_CUT; bbox culling at this radius
# never removes anything the alpha cutoff would keep
R_CUT = float(np.sqrt(2.0 * np.log(255.0)))


@dataclass(frozen=True)
class Splat2D:
    mean: np.ndarray  # (2,) pixels
    cov: np.ndarray  # (2,2) pixels^2, includes the low-pass floor
    color: np.ndarray
    opacity: float
    depth: float


@dataclass(frozen=True)
class RenderedImage:
    image: np.ndarray  # (H,W,3) in [0,1]
    alpha: np.ndarray | None = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
            raise ValueError("rendered image must be finite and within [0,1]")
        object.__setattr__(self, "image", img)


def quat_to_rotmat(q: ad.Tensor) -> ad.Tensor:
    """Unit quaternions (N,4) wxyz to rotation matrices (N,3,3)."""
    n = q.shape[0]
    w, x, y, z = (q[:, i] for i in range(4))
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    flat = ad.concat([ad.reshape(e, (n, 1)) for e in rows], axis=1)
    return ad.reshape(flat, (n, 3, 3))


class Projected:
    """Depth-sorted screen-space splats plus provenance indices."""

    def __init__(self, means2d, cov2d, color, opacity, depths, anchor_index, offset_index):
        self.means2d = means2d  # (M,2) tensor
        self.cov2d = cov2d  # (M,3) tensor, packed (xx, xy, yy)
        self.color = color
        self.opacity = opacity
        self.depths = depths  # (M,) ndarray
        self.anchor_index = anchor_index
        self.offset_index = offset_index

    def __len__(self):
        return self.means2d.shape[0]


def project_batch(batch, camera, near: float = 0.01) -> Projected:
    """Project a PrimitiveBatch; culls behind the near plane, sorts by depth
    (stable, so equal depths keep input order)."""
    R, t = camera.w2c[:, :3], camera.w2c[:, 3]
    cam = ad.matmul(batch.position, ad.tensor(R.T)) + ad.tensor(t)
    z_all = cam.numpy()[:, 2]
    keep = np.flatnonzero(z_all > near)
    order = keep[np.argsort(z_all[keep], kind="stable")]

    cam = ad.take(cam, order)
    color = ad.take(batch.color, order)
    opacity = ad.take(batch.opacity.reshape(len(batch), 1), order)[:, 0]
    scale = ad.take(batch.scale, order)
    rot = ad.take(batch.rotation, order)
    m = order.size

    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    inv_z = 1.0 / z
    u = camera.fx * x * inv_z + camera.cx
    v = camera.fy * y * inv_z + camera.cy
    means2d = ad.concat([ad.reshape(u, (m, 1)), ad.reshape(v, (m, 1))], axis=1)

    rotm = quat_to_rotmat(rot)
    cov3 = ad.matmul(rotm * ad.reshape(scale * scale, (m, 1, 3)),
                     ad.transpose(rotm, (0, 2, 1)))

    # perspective Jacobian rows stacked as (M,2,3)
    zero = ad.tensor(np.zeros(m))
    j_entries = [
        camera.fx * inv_z, zero, -camera.fx * x * inv_z * inv_z,
        zero, camera.fy * inv_z, -camera.fy * y * inv_z * inv_z,
    ]
    jac = ad.reshape(ad.concat([ad.reshape(e, (m, 1)) for e in j_entries], axis=1), (m, 2, 3))
    a = ad.matmul(jac, ad.tensor(R))
    cov2 = ad.matmul(ad.matmul(a, cov3), ad.transpose(a, (0, 2, 1)))
    packed = ad.concat(
        [
            ad.reshape(cov2[:, 0, 0] + LOWPASS, (m, 1)),
            ad.reshape(cov2[:, 0, 1], (m, 1)),
            ad.reshape(cov2[:, 1, 1] + LOWPASS, (m, 1)),
        ],
        axis=1,
    )
    return Projected(
        means2d, packed, color, opacity, z_all[order],
        batch.anchor_index[order], batch.offset_index[order],
    )


def project(primitive, camera, near: float = 0.01) -> Splat2D | None:
    """Single-primitive projection; None when culled by the near plane."""
    from .scene import PrimitiveBatch

    batch = PrimitiveBatch(
        position=ad.tensor(primitive.position[None]),
        opacity=ad.tensor(np.array([primitive.opacity])),
        color=ad.tensor(primitive.color[None]),
        scale=ad.tensor(primitive.scale[None]),
        rotation=ad.tensor(primitive.rotation[None]),
    )
    proj = project_batch(batch, camera, near)
    if len(proj) == 0:
        return None
    c = proj.cov2d.numpy()[0]
    return Splat2D(
        mean=proj.means2d.numpy()[0],
        cov=np.array([[c[0], c[1]], [c[1], c[2]]]),
        color=proj.color.numpy()[0],
        opacity=float(proj.opacity.numpy()[0]),
        depth=float(proj.depths[0]),
    )


def _alpha_terms(mu, cov, op, px, py, cutoffs):
    """Per (pixel, splat) effective alpha and the quantities backward needs.

    mu (M,2), cov (M,3), op (M,) against pixel centers px/py (P,). Returns
    dict of (P,M) arrays plus per-splat inverse covariance entries.
    """
    det = cov[:, 0] * cov[:, 2] - cov[:, 1] ** 2
    ia = cov[:, 2] / det
    ib = -cov[:, 1] / det
    ic = cov[:, 0] / det
    dx = px[:, None] - mu[None, :, 0]
    dy = py[:, None] - mu[None, :, 1]
    power = -0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
    live = power < 0.0  # guards fp noise; the true maximum is power == 0
    g = np.exp(np.minimum(power, 0.0))
    a_raw = op[None, :] * g
    a = np.minimum(a_raw, ALPHA_CEIL)
    if cutoffs:
        a = np.where(a_raw < ALPHA_CUT, 0.0, a)
    return {"a": a, "a_raw": a_raw, "g": g, "dx": dx, "dy": dy,
            "ia": ia, "ib": ib, "ic": ic, "live": live}


def _transmittance(a, cutoffs):
    """Exclusive front-to-back transmittance; applies the early-stop cutoff
    by zeroing alphas once T drops below threshold. Returns (a, T, T_final)."""
    om = 1.0 - a
    t_incl = np.cumprod(om, axis=1)
    t_excl = np.concatenate([np.ones((a.shape[0], 1)), t_incl[:, :-1]], axis=1)
    if cutoffs:
        stopped = t_excl <= TRANSMIT_CUT
        if stopped.any():
            a = np.where(stopped, 0.0, a)
            om = 1.0 - a
            t_incl = np.cumprod(om, axis=1)
            t_excl = np.concatenate([np.ones((a.shape[0], 1)), t_incl[:, :-1]], axis=1)
    return a, t_excl, t_incl[:, -1] if a.shape[1] else np.ones(a.shape[0])


def composite(proj: Projected, height: int, width: int, background,
              cutoffs: bool = True, chunk_rows: int = 16) -> ad.Tensor:
    """Front-to-back composite onto the background. One fused tape node.

    Splats must already be depth-sorted. `cutoffs=False` disables the alpha
    cutoff, the transmittance early stop, and bounding-box restriction (the
    oracle-comparison configuration).
    """
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    mu = proj.means2d.numpy()
    cov = proj.cov2d.numpy()
    col = np.clip(proj.color.numpy(), 0.0, 1.0)
    op = proj.opacity.numpy()
    m = mu.shape[0]

    if cutoffs and m:
        r = R_CUT * np.sqrt(np.maximum(np.maximum(cov[:, 0], cov[:, 2]), 0.0))
        inside = (
            (mu[:, 0] + r >= 0.0) & (mu[:, 0] - r <= width)
            & (mu[:, 1] + r >= 0.0) & (mu[:, 1] - r <= height)
        )
        active = np.flatnonzero(inside)
    else:
        active = np.arange(m)

    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5

    def band_splats(y0, y1):
        if not cutoffs:
            return active
        r = R_CUT * np.sqrt(np.maximum(cov[active, 2], 0.0))
        v = mu[active, 1]
        return active[(v + r >= y0) & (v - r <= y1)]

    def forward():
        img = np.empty((height, width, 3))
        for y0 in range(0, height, chunk_rows):
            y1 = min(y0 + chunk_rows, height)
            rows = band_splats(y0, y1)
            px = np.repeat(xs[None, :], y1 - y0, axis=0).ravel()
            py = np.repeat(ys[y0:y1, None], width, axis=1).ravel()
            if rows.size == 0:
                img[y0:y1] = bg
                continue
            terms = _alpha_terms(mu[rows], cov[rows], op[rows], px, py, cutoffs)
            a, t, t_fin = _transmittance(terms["a"], cutoffs)
            w = a * t
            out = w @ col[rows] + t_fin[:, None] * bg[None, :]
            img[y0:y1] = out.reshape(y1 - y0, width, 3)
        return img

    image = forward()

    def backward(g_img):
        g_img = g_img.reshape(height * width, 3)
        g_mu = np.zeros_like(mu)
        g_cov = np.zeros_like(cov)
        g_col = np.zeros_like(col)
        g_op = np.zeros_like(op)
        for y0 in range(0, height, chunk_rows):
            y1 = min(y0 + chunk_rows, height)
            rows = band_splats(y0, y1)
            if rows.size == 0:
                continue
            px = np.repeat(xs[None, :], y1 - y0, axis=0).ravel()
            py = np.repeat(ys[y0:y1, None], width, axis=1).ravel()
            gc = g_img[y0 * width : y1 * width]  # (P,3)
            terms = _alpha_terms(mu[rows], cov[rows], op[rows], px, py, cutoffs)
            a, t, t_fin = _transmittance(terms["a"], cutoffs)
            w = a * t  # (P,M)
            om = 1.0 - a
            g_a = np.zeros_like(a)
            for ch in range(3):
                wc = w * col[rows, ch][None, :]
                # suffix sum of downstream contributions incl. background
                suf = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1]
                suf = np.concatenate([suf[:, 1:], np.zeros((suf.shape[0], 1))], axis=1)
                suf += (t_fin * bg[ch])[:, None]
                g_col[rows, ch] += w.T @ gc[:, ch]
                g_a += gc[:, ch][:, None] * (col[rows, ch][None, :] * t - suf / om)
            # through the ceiling/cutoff gates
            gate = (terms["a_raw"] < ALPHA_CEIL) & (a > 0.0)
            g_a = np.where(gate, g_a, 0.0)
            g_op[rows] += np.sum(g_a * terms["g"], axis=0)
            g_pow = g_a * terms["a_raw"] * terms["live"]  # d a_raw/d power = a_raw
            dx, dy = terms["dx"], terms["dy"]
            ia, ib, ic = terms["ia"], terms["ib"], terms["ic"]
            g_mu[rows, 0] += np.sum(g_pow * (ia * dx + ib * dy), axis=0)
            g_mu[rows, 1] += np.sum(g_pow * (ib * dx + ic * dy), axis=0)
            g_ia = np.sum(g_pow * (-0.5 * dx * dx), axis=0)
            g_ib = np.sum(g_pow * (-dx * dy), axis=0)
            g_ic = np.sum(g_pow * (-0.5 * dy * dy), axis=0)
            # grad w.r.t. Sigma = -inv(Sigma) G inv(Sigma), G from packed grads
            m00, m01, m11 = ia[:], ib[:], ic[:]
            h00 = g_ia
            h01 = 0.5 * g_ib
            h11 = g_ic
            # inv(Sigma) @ G
            p00 = m00 * h00 + m01 * h01
            p01 = m00 * h01 + m01 * h11
            p10 = m01 * h00 + m11 * h01
            p11 = m01 * h01 + m11 * h11
            # @ inv(Sigma), negated
            f00 = -(p00 * m00 + p01 * m01)
            f01 = -(p00 * m01 + p01 * m11)
            f10 = -(p10 * m00 + p11 * m01)
            f11 = -(p10 * m01 + p11 * m11)
            g_cov[rows, 0] += f00
            g_cov[rows, 1] += f01 + f10
            g_cov[rows, 2] += f11
        return g_mu, g_cov, g_col, g_op

    # the tape calls one vjp per input with the same upstream grad; run the
    # chunked backward once and serve all four from the cached result
    cache: dict = {}

    def cached_backward(g):
        key = id(g)
        if cache.get("key") != key:
            cache["key"] = key
            cache["val"] = backward(np.asarray(g))
        return cache["val"]

    # color was clipped for compositing; gradient passes only inside [0,1]
    col_gate = (proj.color.numpy() >= 0.0) & (proj.color.numpy() <= 1.0)
    vjps = (
        lambda g: cached_backward(g)[0],
        lambda g: cached_backward(g)[1],
        lambda g: cached_backward(g)[2] * col_gate,
        lambda g: cached_backward(g)[3],
    )
    return ad.apply_custom(
        image, (proj.means2d, proj.cov2d, proj.color, proj.opacity), vjps
    )


class RenderResult:
    """Rendered image tensor plus the projected splats (the trainer reads
    screen-space gradient statistics off proj.means2d)."""

    def __init__(self, image: ad.Tensor, proj: Projected):
        self.image = image
        self.proj = proj


def render(batch, camera, background, cutoffs: bool = True, near: float = 0.01,
           chunk_rows: int = 16) -> RenderResult:
    proj = project_batch(batch, camera, near)
    img = composite(proj, camera.height, camera.width, background, cutoffs, chunk_rows)
    return RenderResult(img, proj)


def render_image(batch, camera, background, **kw) -> RenderedImage:
    """Inference wrapper returning the validated value object."""
    res = render(batch, camera, background, **kw)
    return RenderedImage(image=np.clip(res.image.numpy(), 0.0, 1.0))


def gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _band_matrix(n: int, kernel: np.ndarray) -> np.ndarray:
    """Correlation along one axis as an (n,n) matrix; borders truncate the
    kernel without renormalizing (zero padding)."""
    half = (kernel.size - 1) // 2
    b = np.zeros((n, n))
    for off in range(-half, half + 1):
        idx = np.arange(max(0, -off), min(n, n - off))
        b[idx, idx + off] = kernel[off + half]
    return b


def _blur(img: ad.Tensor, kh: np.ndarray, kw: np.ndarray) -> ad.Tensor:
    h, w, c = img.shape
    x = ad.matmul(ad.tensor(kh), ad.reshape(img, (h, w * c)))
    x = ad.transpose(ad.reshape(x, (h, w, c)), (1, 0, 2))
    x = ad.matmul(ad.tensor(kw), ad.reshape(x, (w, h * c)))
    return ad.transpose(ad.reshape(x, (w, h, c)), (1, 0, 2))


SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def ssim(a, b, size: int = 11, sigma: float = 1.5):
    """Mean SSIM over pixels and channels; 11x11 Gaussian window, zero
    padding, constants for [0,1]-ranged images. Tensor-friendly."""
    ta = a if isinstance(a, ad.Tensor) else ad.tensor(a)
    tb = b if isinstance(b, ad.Tensor) else ad.tensor(b)
    if ta.shape != tb.shape:
        raise ValueError(f"image shapes differ: {ta.shape} vs {tb.shape}")
    k = gaussian_kernel(size, sigma)
    h, w = ta.shape[0], ta.shape[1]
    kh, kw = _band_matrix(h, k), _band_matrix(w, k)
    mu_a = _blur(ta, kh, kw)
    mu_b = _blur(tb, kh, kw)
    var_a = _blur(ta * ta, kh, kw) - mu_a * mu_a
    var_b = _blur(tb * tb, kh, kw) - mu_b * mu_b
    cov = _blur(ta * tb, kh, kw) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return ad.mean_(num / den)


def render_loss(rendered, ground_truth, lambda_ssim: float = 0.2):
    """(1-w)*L1 + w*(1-SSIM)/2 between a rendered tensor and a target."""
    r = rendered if isinstance(rendered, ad.Tensor) else ad.tensor(rendered)
    gt = ground_truth if isinstance(ground_truth, ad.Tensor) else ad.tensor(ground_truth)
    if r.shape != gt.shape:
        raise ValueError(f"image shapes differ: {r.shape} vs {gt.shape}")
    l1 = ad.mean_(ad.abs_(r - gt))
    dssim = (1.0 - ssim(r, gt)) * 0.5
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * dssim
