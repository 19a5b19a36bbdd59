"""Independent oracles shared between unit and acceptance tests."""

import numpy as np

from metarobust.intrinsic_dim import components_for_target


def jacobi_eigenvalues(a, sweeps=100, tol=1e-12):
    """Eigenvalues of a symmetric matrix by brute-force cyclic Jacobi rotations."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = 0.5 * np.arctan2(2 * a[p, q], a[q, q] - a[p, p])
                c, s = np.cos(theta), np.sin(theta)
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))[::-1]


def jacobi_id(x, target):
    """Intrinsic dimension via the naive Jacobi eigendecomposition route."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    lam = np.clip(jacobi_eigenvalues(cov), 0.0, None)
    return components_for_target(lam, target)
