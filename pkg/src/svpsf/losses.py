"""Training objective for PSF fitting, with analytic gradients w.r.t. the kernel.

``total = recon + alpha * smooth + beta * radial``. The two L1-type terms use
the Charbonnier form ``sqrt(x**2 + eps**2)``; ``eps = 0`` gives plain
absolute values with ``sign(0) = 0``.
"""

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .core import DimensionError, ParameterError, convolve_valid, kernel_radius
from .psf_model import rotate_kernel, rotate_kernel_backprop


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 10.0
    charbonnier_eps: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("loss weights must be nonnegative")
        if not self.charbonnier_eps > 0:
            raise ParameterError("charbonnier_eps must be positive")


def charbonnier(x, eps):
    """Value and derivative of ``sqrt(x**2 + eps**2)``."""
    if eps == 0:
        return np.abs(x), np.sign(x)
    v = np.sqrt(x * x + eps * eps)
    return v, x / v


def recon_loss(b, s, p, theta, eps=1e-6):
    """Mean Charbonnier-L1 between ``b`` and ``s`` convolved with ``p`` rotated by ``theta``.

    ``s`` must be larger than ``b`` by ``2K`` in both dimensions. Returns the
    loss and its gradient w.r.t. the unrotated kernel ``p``.
    """
    b = np.asarray(b, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    K = kernel_radius(p)
    if s.shape != (b.shape[0] + 2 * K, b.shape[1] + 2 * K):
        raise DimensionError(f"sharp patch {s.shape} must exceed blurred patch {b.shape} by 2K={2 * K}")
    rotated = rotate_kernel(p, theta)
    residual = b - convolve_valid(s, rotated)
    value, dvalue = charbonnier(residual, eps)
    loss = value.mean()
    g_pred = -dvalue / residual.size
    # d pred[y, x] / d r[v, u] = s[y + 2K - v, x + 2K - u]
    g_rot = signal.correlate(s, g_pred, mode="valid")[::-1, ::-1]
    return float(loss), rotate_kernel_backprop(p, theta, g_rot)


def _forward_diffs(p):
    dx = np.zeros_like(p)
    dy = np.zeros_like(p)
    dx[:, :-1] = p[:, 1:] - p[:, :-1]
    dy[:-1, :] = p[1:, :] - p[:-1, :]
    return dx, dy


def smooth_loss(p, eps=1e-6):
    """Mean absolute forward difference along x plus along y."""
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    dx, dy = _forward_diffs(p)
    vx, gx = charbonnier(dx, eps)
    vy, gy = charbonnier(dy, eps)
    # the trailing row/column differences are fixed at zero, not p-dependent
    gx[:, -1] = 0.0
    gy[-1, :] = 0.0
    loss = (vx.sum() + vy.sum()) / n
    grad = np.zeros_like(p)
    grad[:, 1:] += gx[:, :-1]
    grad[:, :-1] -= gx[:, :-1]
    grad[1:, :] += gy[:-1, :]
    grad[:-1, :] -= gy[:-1, :]
    return float(loss), grad / n


def patch_means(p):
    """Means of the centered ``(2j+1)**2`` windows for ``j = 0..K``."""
    p = np.asarray(p, dtype=np.float64)
    K = kernel_radius(p)
    return np.array([p[K - j : K + j + 1, K - j : K + j + 1].mean() for j in range(K + 1)])


def radial_loss(p):
    """Average positive increase of centered window means from one radius to the next."""
    p = np.asarray(p, dtype=np.float64)
    K = kernel_radius(p)
    if K == 0:
        return 0.0, np.zeros_like(p)
    m = patch_means(p)
    inc = np.diff(m)
    active = inc > 0
    loss = inc[active].sum() / K
    grad = np.zeros_like(p)
    for j in np.nonzero(active)[0]:
        outer, inner = j + 1, j
        grad[K - outer : K + outer + 1, K - outer : K + outer + 1] += 1.0 / (2 * outer + 1) ** 2
        grad[K - inner : K + inner + 1, K - inner : K + inner + 1] -= 1.0 / (2 * inner + 1) ** 2
    return float(loss), grad / K


def regularizers(p, weights):
    """``alpha * smooth + beta * radial`` with its gradient."""
    ls, gs = smooth_loss(p, weights.charbonnier_eps)
    lr, gr = radial_loss(p)
    return weights.alpha * ls + weights.beta * lr, weights.alpha * gs + weights.beta * gr, (ls, lr)


def total_loss(b, s, p, theta, weights=LossWeights()):
    """Full objective and its gradient w.r.t. the unrotated kernel ``p``."""
    lrec, grec = recon_loss(b, s, p, theta, weights.charbonnier_eps)
    _, greg, (ls, lr) = regularizers(p, weights)
    return lrec + weights.alpha * ls + weights.beta * lr, grec + greg


# -- batched variants used by the fitting loop --------------------------------


def fft_patches(s, size=None):
    """Real FFTs of a stack of sharp patches (reusable across kernels)."""
    s = np.asarray(s, dtype=np.float64)
    return np.fft.rfft2(s, s=size)


def recon_loss_batch(b, s, r, eps=1e-6, s_fft=None):
    """Per-sample :func:`recon_loss` for already-oriented kernels, via FFT.

    ``b``: (B, P, P), ``s``: (B, P+2K, P+2K), ``r``: (B, 2K+1, 2K+1).
    Returns losses (B,) and gradients w.r.t. ``r`` (B, 2K+1, 2K+1).
    """
    b = np.asarray(b, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    side = r.shape[-1]
    n = b.shape[-1] + side - 1
    m = b.shape[-2] + side - 1
    if s_fft is None:
        s_fft = np.fft.rfft2(np.asarray(s, dtype=np.float64))
    # circular convolution on an (m, n) torus equals the valid part past index 2K
    pred = np.fft.irfft2(s_fft * np.fft.rfft2(r, s=(m, n)), s=(m, n))[:, side - 1 :, side - 1 :]
    residual = b - pred
    value, dvalue = charbonnier(residual, eps)
    npix = residual.shape[-1] * residual.shape[-2]
    losses = value.reshape(len(b), -1).mean(axis=1)
    g = np.zeros((len(b), m, n))
    g[:, side - 1 :, side - 1 :] = -dvalue / npix
    grad = np.fft.irfft2(np.fft.rfft2(g) * np.conj(s_fft), s=(m, n))[:, :side, :side]
    return losses, grad


def smooth_loss_batch(p, eps=1e-6):
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[-1] * p.shape[-2]
    dx = p[:, :, 1:] - p[:, :, :-1]
    dy = p[:, 1:, :] - p[:, :-1, :]
    vx, gx = charbonnier(dx, eps)
    vy, gy = charbonnier(dy, eps)
    # trailing zero differences still contribute eps each
    const = (p.shape[-2] + p.shape[-1]) * (eps if eps else 0.0)
    losses = (vx.sum(axis=(1, 2)) + vy.sum(axis=(1, 2)) + const) / n
    grad = np.zeros_like(p)
    grad[:, :, 1:] += gx
    grad[:, :, :-1] -= gx
    grad[:, 1:, :] += gy
    grad[:, :-1, :] -= gy
    return losses, grad / n


def _ring_index(side):
    K = (side - 1) // 2
    ax = np.abs(np.arange(side) - K)
    return np.maximum(ax[:, None], ax[None, :])


def radial_loss_batch(p):
    p = np.asarray(p, dtype=np.float64)
    side = p.shape[-1]
    K = (side - 1) // 2
    if K == 0:
        return np.zeros(len(p)), np.zeros_like(p)
    ring = _ring_index(side)
    ring_sums = np.stack([(p * (ring == j)).sum(axis=(1, 2)) for j in range(K + 1)], axis=1)
    counts = (2 * np.arange(K + 1) + 1) ** 2
    means = np.cumsum(ring_sums, axis=1) / counts
    inc = np.diff(means, axis=1)
    active = inc > 0
    losses = np.where(active, inc, 0.0).sum(axis=1) / K
    # pixel on ring q belongs to every window j >= q
    outer = np.zeros((len(p), K + 1))
    outer[:, 1:] = active / counts[1:]
    inner = np.zeros((len(p), K + 1))
    inner[:, :K] = active / counts[:K]
    coef = np.cumsum((outer - inner)[:, ::-1], axis=1)[:, ::-1]
    return losses, coef[:, ring] / K
