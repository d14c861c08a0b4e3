"""Independent reference implementations used to cross-check results.

These are deliberately written the slow, obvious way, sharing no code with
the package: a cyclic Jacobi eigensolver, a triple-loop bounding-box scan,
a rotation-angle extractor built on the SVD polar factor, and pointwise
linear interpolation.
"""

import numpy as np


def jacobi_eigh(matrix, tol=1e-12, max_sweeps=100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvalues descending and
    eigenvectors in the columns.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-10):
        raise ValueError("jacobi_eigh expects a symmetric square matrix")
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * max(1.0, np.abs(np.diag(a)).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                if theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    order = np.argsort(np.diag(a))[::-1]
    return np.diag(a)[order].copy(), v[:, order].copy()


def brute_force_box(data, threshold):
    """Triple-loop scan for the (row_min, row_max, col_min, col_max) extent
    of voxels at or above threshold, pooled across all slices. None when no
    voxel qualifies."""
    n_slices, height, width = data.shape
    row_min = col_min = None
    row_max = col_max = None
    for k in range(n_slices):
        for i in range(height):
            for j in range(width):
                if data[k, i, j] >= threshold:
                    if row_min is None or i < row_min:
                        row_min = i
                    if row_max is None or i > row_max:
                        row_max = i
                    if col_min is None or j < col_min:
                        col_min = j
                    if col_max is None or j > col_max:
                        col_max = j
    if row_min is None:
        return None
    return row_min, row_max, col_min, col_max


def rotation_angle_deg(linear):
    """Rotation angle of the polar factor of a 3x3 linear map, degrees."""
    u, _, vt = np.linalg.svd(np.asarray(linear, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1.0
        r = u @ vt
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def interp_linear(xs, ys, xq):
    """One query point of piecewise-linear interpolation, no numpy tricks."""
    xs = list(xs)
    ys = list(ys)
    if xq <= xs[0]:
        return ys[0]
    if xq >= xs[-1]:
        return ys[-1]
    for i in range(len(xs) - 1):
        if xs[i] <= xq <= xs[i + 1]:
            w = (xq - xs[i]) / (xs[i + 1] - xs[i])
            return (1.0 - w) * ys[i] + w * ys[i + 1]
    raise AssertionError("unreachable")


def gmm_bic(points, weights, means, covariances, log_likelihood=None):
    """BIC of a fitted mixture, recomputed from first principles."""
    pts = np.asarray(points, dtype=float)
    n, d = pts.shape
    k = len(weights)
    if log_likelihood is None:
        dens = np.zeros(n)
        for w, mu, cov in zip(weights, means, covariances):
            diff = pts - mu
            inv = np.linalg.inv(cov)
            maha = np.einsum("ni,ij,nj->n", diff, inv, diff)
            norm = np.sqrt(((2 * np.pi) ** d) * np.linalg.det(cov))
            dens += w * np.exp(-0.5 * maha) / norm
        log_likelihood = float(np.sum(np.log(dens)))
    n_params = (k - 1) + k * d + k * d * (d + 1) // 2
    return -2.0 * log_likelihood + n_params * np.log(n)
