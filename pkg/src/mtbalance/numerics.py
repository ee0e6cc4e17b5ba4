"""Dense vector/matrix primitives, deterministic RNG streams, and the two
small convex solvers (min-norm point in a convex hull, positive fixed point
of M a = 1/a) that every gradient combiner builds on.

Everything works on plain float64 numpy arrays. Systems are tiny (a handful
of tasks), so the solvers favour explicit, auditable loops over BLAS-grade
generality.
"""

from __future__ import annotations

import numpy as np

from .errors import SingularMatrixError, ZeroGradientError

SIMPLEX_TOL = 1e-9


def rng_stream(seed, stream=0):
    """Deterministic counter-based generator for (seed, stream).

    Philox is counter-based, so equal seeds give identical sequences on any
    platform and independent streams never overlap regardless of how trials
    are scheduled across workers.
    """
    bitgen = np.random.Philox(key=np.uint64(seed))
    if stream:
        bitgen = bitgen.jumped(int(stream))
    return np.random.Generator(bitgen)


def check_finite(arr, name="array"):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def validate_simplex(w, tol=SIMPLEX_TOL):
    """Assert w is a valid probability vector (nonnegative, sums to one)."""
    w = check_finite(w, "weights")
    if np.any(w < -tol):
        raise ValueError(f"negative simplex weight: {w.min()}")
    if abs(w.sum() - 1.0) > tol:
        raise ValueError(f"simplex weights sum to {w.sum()}, not 1")
    return w


def gram(G):
    """Pairwise dot products of the rows of G, exactly symmetric."""
    G = check_finite(G, "G")
    K = G @ G.T
    return (K + K.T) / 2.0


def project_to_simplex(v):
    """Euclidean projection onto {w : w >= 0, sum w = 1} (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def min_norm_in_hull(G, max_iter=250, tol=1e-7):
    """Smallest-norm convex combination of the rows of G via Frank-Wolfe.

    Each iteration does an exact line search between the current point and
    the most promising vertex, so the two-row case solves in one step and
    matches the analytic clamp formula. A final line search toward the
    uniform combination guarantees the result never beats worse than the
    plain average.

    Returns (weights, info) where info carries iterations, the duality gap,
    the achieved norm and a ``degenerate`` flag (all-zero input).
    """
    G = check_finite(G, "G")
    G = np.atleast_2d(G)
    n = G.shape[0]
    if n == 1:
        return np.array([1.0]), {"iterations": 0, "gap": 0.0,
                                 "norm": float(np.linalg.norm(G[0])),
                                 "degenerate": False}
    K = gram(G)
    diag = np.diag(K)
    if np.all(diag <= 1e-24):
        w = np.full(n, 1.0 / n)
        return w, {"iterations": 0, "gap": 0.0, "norm": 0.0, "degenerate": True}

    w = np.zeros(n)
    w[int(np.argmin(diag))] = 1.0
    gap = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        s = K @ w
        pp = float(w @ s)
        t = int(np.argmin(s))
        gap = pp - float(s[t])
        if gap <= tol * max(1.0, pp):
            break
        # exact step toward vertex t: minimize ||(1-g) p + g G[t]||^2
        denom = pp - 2.0 * s[t] + K[t, t]
        if denom <= 1e-24:
            break
        step = min(1.0, max(0.0, (pp - s[t]) / denom))
        w *= 1.0 - step
        w[t] += step

    # polish toward the uniform point; never increases the norm
    u = np.full(n, 1.0 / n)
    Kw, Ku = K @ w, K @ u
    pp, pu, uu = float(w @ Kw), float(w @ Ku), float(u @ Ku)
    denom = pp - 2.0 * pu + uu
    if denom > 1e-24:
        step = min(1.0, max(0.0, (pp - pu) / denom))
        w = (1.0 - step) * w + step * u

    w = np.maximum(w, 0.0)
    w /= w.sum()
    norm = float(np.sqrt(max(w @ K @ w, 0.0)))
    return w, {"iterations": it, "gap": float(gap), "norm": norm,
               "degenerate": False}


def min_norm_two_task(g1, g2):
    """Analytic weight on g1 for the two-row min-norm problem:
    clamp(((g2 - g1) . g2) / ||g1 - g2||^2, 0, 1)."""
    g1 = np.asarray(g1, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    diff = g1 - g2
    denom = float(diff @ diff)
    if denom <= 1e-24:
        return 0.5
    return float(min(1.0, max(0.0, (g2 - g1) @ g2 / denom)))


def solve_linear(A, b, pivot_tol=1e-12):
    """Gaussian elimination with partial pivoting for small dense systems.

    Raises SingularMatrixError when a pivot falls below pivot_tol relative
    to the matrix scale.
    """
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    n = b.size
    if A.shape != (n, n):
        raise ValueError(f"A has shape {A.shape}, expected ({n}, {n})")
    check_finite(A, "A")
    check_finite(b, "b")
    scale = max(1.0, float(np.abs(A).max()))
    for k in range(n):
        piv = k + int(np.argmax(np.abs(A[k:, k])))
        if abs(A[piv, k]) <= pivot_tol * scale:
            raise SingularMatrixError(f"pivot {A[piv, k]:.3e} at column {k}")
        if piv != k:
            A[[k, piv]] = A[[piv, k]]
            b[[k, piv]] = b[[piv, k]]
        factors = A[k + 1:, k] / A[k, k]
        A[k + 1:, k:] -= np.outer(factors, A[k, k:])
        b[k + 1:] -= factors * b[k]
    x = np.empty(n)
    for k in range(n - 1, -1, -1):
        x[k] = (b[k] - A[k, k + 1:] @ x[k + 1:]) / A[k, k]
    return x


def positive_fixed_point(M, iters=20, damping=0.7):
    """Positive solution of M a = 1/a by damped Newton.

    M must be symmetric PSD with strictly positive diagonal. The iterate
    starts at a_i = M_ii^{-1/2} (exact for diagonal M); each step solves the
    Newton system with Jacobian M + diag(1/a^2) (positive definite on the
    positive orthant), damps the step, and backs off multiplicatively when
    it would leave the orthant.

    Returns (alpha, residual) with residual = ||M a - 1/a||_2; the caller
    decides whether the residual is acceptable.
    """
    M = check_finite(M, "M")
    M = np.atleast_2d(M)
    d = np.diag(M).copy()
    bad = np.nonzero(d <= 0.0)[0]
    if bad.size:
        raise ZeroGradientError(int(bad[0]),
                                f"task {int(bad[0])}: Gram diagonal {d[bad[0]]!r} is not positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    a = 1.0 / np.sqrt(d)
    for _ in range(iters):
        f = M @ a - 1.0 / a
        jacobian = M + np.diag(1.0 / (a * a))
        delta = solve_linear(jacobian, -f)
        a = np.maximum(a + damping * delta, 0.05 * a)
    residual = float(np.linalg.norm(M @ a - 1.0 / a))
    return a, residual
