"""Shared toy problems and independent oracle implementations.

Everything here is deliberately written from the mathematical definitions
(plain loops, shift-adds, dense linear algebra) rather than reusing the
package's FFT/sparse code paths, so tests compare two separate routes.
"""
import numpy as np

import specdiff as sd


def grid_n(n, lo=450.0, hi=650.0):
    return sd.SpectralGrid(np.linspace(lo, hi, n))


def random_cube(h, w, grid, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return sd.HsiCube(grid=grid, data=rng.random((h, w, grid.count)).astype(dtype))


def random_psf(grid, kernel=4, seed=0):
    rng = np.random.default_rng(seed)
    kern = rng.random((kernel, kernel, grid.count))
    kern /= kern.sum()
    return sd.SpectralPsf(grid=grid, kernels=kern.astype(np.float32))


def pan_operator(grid, kernel=4, seed=0):
    return sd.ConvolutionOperator(random_psf(grid, kernel, seed),
                                  sd.SensorResponse.panchromatic(grid))


def shift_add_render(cube, kernels, weights):
    """Spatial-domain oracle for the PSF camera.

    y(u, v, s) = sum_c w[s, c] * sum_{a, b} f(a, b, c) x(u - (a - K//2),
    v - (b - K//2), c) with zero padding outside the scene. Implemented as
    one shifted copy per kernel tap; no FFTs anywhere.
    """
    cube = np.asarray(cube, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    h, w, c = cube.shape
    k = kernels.shape[0]
    half = k // 2
    padded = np.zeros((h + 2 * k, w + 2 * k, c))
    padded[k : k + h, k : k + w] = cube
    conv = np.zeros((h, w, c))
    for a in range(k):
        for b in range(k):
            du = a - half
            dv = b - half
            conv += kernels[a, b] * padded[k - du : k - du + h, k - dv : k - dv + w]
    return np.einsum("uvc,sc->uvs", conv, weights)


def loop_cassi(cube, mask, shears):
    """Direct per-band loop oracle for the coded-aperture shear camera."""
    cube = np.asarray(cube, dtype=np.float64)
    h, w, c = cube.shape
    out = np.zeros((h, w + int(max(shears))))
    for band in range(c):
        d = int(shears[band])
        for i in range(h):
            for j in range(w):
                out[i, j + d] += mask[i, j] * cube[i, j, band]
    return out[:, :, None]


def quadrature_fresnel(field, pitch_m, wavelength_m, distance_m, n_fft):
    """Direct Riemann-sum evaluation of the Fresnel integral.

    U(u, v) = (e^{ikd} / (i lambda d)) sum_{x, y} field(x, y)
              exp(ik ((x-u)^2 + (y-v)^2) / 2d) * pitch^2
    evaluated on the same centered output lattice the FFT route uses. Slow
    and exact; the independent oracle for the single-FFT transform.
    """
    field = np.asarray(field, dtype=np.complex128)
    n_ap = field.shape[0]
    k = 2.0 * np.pi / wavelength_m
    coords = (np.arange(n_ap) - (n_ap - 1) / 2.0) * pitch_m
    out_pitch = wavelength_m * distance_m / (n_fft * pitch_m)
    u = (np.arange(n_fft) - n_fft // 2) * out_pitch
    # separable: exp(ik((x-u)^2+(y-v)^2)/2d) = g(x,u) g(y,v)
    g = np.exp(1j * (k / (2.0 * distance_m)) * (coords[:, None] - u[None, :]) ** 2)
    amp = np.exp(1j * k * distance_m) / (1j * wavelength_m * distance_m)
    return amp * (g.T @ field @ g) * pitch_m**2, out_pitch


def dense_scale_solve(patch_stack, layout, y, forward):
    """Dense normal-equations oracle for the per-patch scale problem.

    Renders each patch's keep-region content alone through the full
    forward model, assembles the dense Gram matrix, and solves with
    numpy's generic least-squares routine. Patches rendering to zero get
    scale 1.
    """
    y_flat = np.asarray(y, dtype=np.float64).ravel()
    columns = []
    for i in range(layout.n_patches):
        r, c = layout.origin(i)
        r0, r1, c0, c1 = layout.keep_box(i)
        r1 = min(r1, layout.height)
        c1 = min(c1, layout.width)
        scene = np.zeros((layout.height, layout.width, patch_stack.shape[3]))
        if r0 < r1 and c0 < c1:
            scene[r0:r1, c0:c1] = patch_stack[i, r0 - r : r1 - r, c0 - c : c1 - c]
        columns.append(forward(scene).ravel().astype(np.float64))
    m = np.stack(columns, axis=1)
    active = np.linalg.norm(m, axis=0) > 0
    c_out = np.ones(layout.n_patches)
    if np.any(active):
        sub = m[:, active]
        sol = np.linalg.solve(sub.T @ sub, sub.T @ y_flat)
        c_out[active] = sol
    return c_out


def gaussian_posterior_mean(mu, sigma, m, y, obs_var):
    """Closed-form posterior mean of x ~ N(mu, sigma) given y = Mx + noise."""
    gram = m @ sigma @ m.T + obs_var * np.eye(m.shape[0])
    gain = sigma @ m.T @ np.linalg.inv(gram)
    return mu + gain @ (y - m @ mu)


def loop_psnr(x, est):
    """Per-band 10 log10(shared peak / MSE), averaged; written as loops."""
    x = np.asarray(x, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    peak = max(x.max(), est.max())
    vals = []
    for band in range(x.shape[2]):
        diff = x[:, :, band] - est[:, :, band]
        mse = float((diff * diff).sum()) / diff.size
        vals.append(10.0 * np.log10(peak / mse))
    return float(np.mean(vals))


def loop_sam(x, est):
    """Mean per-pixel spectral angle via an explicit pixel loop."""
    x = np.asarray(x, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    angles = []
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            a = x[i, j]
            b = est[i, j]
            na = np.sqrt((a * a).sum())
            nb = np.sqrt((b * b).sum())
            if na == 0 or nb == 0:
                continue
            cos = (a * b).sum() / (na * nb)
            angles.append(np.arccos(min(1.0, max(-1.0, cos))))
    return float(np.mean(angles))


def finite_difference_grad(fn, x, step=1e-6):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        hi = fn(x)
        xf[i] = orig - step
        lo = fn(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * step)
    return grad
