"""Shared test oracles: finite differences and error norms."""

import numpy as np


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at x, same shape as x.

    Mutates a private copy one coordinate at a time; f must treat its
    argument as read-only.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.ravel(), g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(got, want):
    """Max abs deviation normalized by the oracle's largest magnitude."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(np.max(np.abs(want)), 1e-6)
    return np.max(np.abs(got - want)) / scale


def brute_force_composite(means, covs, colors, opacities, height, width, bg):
    """Per-pixel, per-splat reference compositing (no cutoffs).

    covs are full (M,2,2); inverse via np.linalg.inv so the math path is
    independent of the renderer's adjugate formula.
    """
    means = np.asarray(means, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    bg = np.asarray(bg, dtype=np.float64)
    img = np.zeros((height, width, 3))
    for i in range(height):
        for j in range(width):
            t = 1.0
            acc = np.zeros(3)
            for s in range(len(opacities)):
                d = np.array([j + 0.5 - means[s, 0], i + 0.5 - means[s, 1]])
                inv = np.linalg.inv(covs[s])
                power = -0.5 * d @ inv @ d
                alpha = min(opacities[s] * np.exp(min(power, 0.0)), 1.0 - 1e-12)
                acc += colors[s] * alpha * t
                t *= 1.0 - alpha
            img[i, j] = acc + t * bg
    return img


def reference_ssim(a, b, size=11, sigma=1.5):
    """Independent SSIM: explicit 2D kernel + scipy convolve2d, zero pad."""
    from scipy.signal import convolve2d

    x = np.arange(size) - (size - 1) / 2.0
    k1 = np.exp(-0.5 * (x / sigma) ** 2)
    k1 /= k1.sum()
    k2 = np.outer(k1, k1)

    def blur(img):
        return np.stack(
            [convolve2d(img[..., c], k2, mode="same", boundary="fill") for c in range(img.shape[-1])],
            axis=-1,
        )

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = blur(a), blur(b)
    va = blur(a * a) - mu_a ** 2
    vb = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)
    return np.mean(num / den)
