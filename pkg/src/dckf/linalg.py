"""Dense linear algebra used by the cubature filters.

Only what the filter consumes: a checked Cholesky factorization, the
derivative of the Cholesky factor, and the vectorized solve for the
desensitized gain.

Every routine accepts stacks of matrices: leading axes are batch axes and the
last two axes hold the matrix.  Failures inside a stack report which members
failed through the exception's ``batch_index`` attribute.
"""

from functools import lru_cache

import numpy as np

from .errors import DimensionMismatch, NotPositiveDefinite, SingularFactor, SingularSystem

# pivot rejection threshold relative to the pivot's own diagonal entry of P
PIVOT_RTOL = 1e-13
SYMMETRY_RTOL = 1e-12
GAIN_MAX_COND = 1.0 / (10 * np.finfo(float).eps)


def _as_square(name, A):
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2] or A.shape[-1] < 1:
        raise DimensionMismatch(f"{name} must be a non-empty square matrix, got shape {A.shape}")
    return A


def _failed(mask):
    """Batch indices (as tuples) where ``mask`` is true."""
    return [tuple(int(i) for i in idx) for idx in np.argwhere(mask)]


def transpose(A):
    return np.swapaxes(A, -1, -2)


def symmetrize(P):
    return 0.5 * (P + transpose(P))


def is_symmetric(P, rtol=SYMMETRY_RTOL):
    """Elementwise over the batch: ``max|P - P^T| <= rtol * max(1, ||P||_F)``."""
    P = np.asarray(P, dtype=float)
    scale = np.maximum(1.0, np.sqrt(np.sum(P * P, axis=(-2, -1))))
    return np.abs(P - transpose(P)).max(axis=(-2, -1)) <= rtol * scale


def cholesky(P):
    """Lower-triangular Cholesky factor ``L`` with ``L @ L.T == P``.

    Raises:
        NotPositiveDefinite: if ``P`` is not symmetric, has non-finite entries,
            or a pivot falls below ``PIVOT_RTOL`` times its diagonal entry of
            ``P``.  The per-entry threshold is invariant to diagonal rescaling
            of the state, so badly scaled but well-conditioned covariances pass.
    """
    P = _as_square("P", P)
    batch = P.shape[:-2]
    finite = np.isfinite(P).all(axis=(-2, -1))
    if not finite.all():
        raise NotPositiveDefinite("matrix has non-finite entries", batch_index=_failed(~finite))
    sym = is_symmetric(P)
    if not np.all(sym):
        raise NotPositiveDefinite("matrix is not symmetric", batch_index=_failed(~sym))
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        bad = np.zeros(batch, dtype=bool)
        for idx in np.ndindex(*batch):
            try:
                np.linalg.cholesky(P[idx])
            except np.linalg.LinAlgError:
                bad[idx] = True
        raise NotPositiveDefinite("matrix is not positive definite", batch_index=_failed(bad)) from None
    diag_P = np.diagonal(P, axis1=-2, axis2=-1)
    ratio = np.diagonal(L, axis1=-2, axis2=-1) ** 2 / diag_P
    ok = (ratio > PIVOT_RTOL).all(axis=-1)
    if not np.all(ok):
        raise NotPositiveDefinite(
            f"pivot ratio {ratio.min():.3e} below tolerance {PIVOT_RTOL:.1e}", batch_index=_failed(~ok)
        )
    return L


def solve_lower(L, B):
    """Forward substitution ``L X = B`` for lower-triangular ``L`` (batched)."""
    L, B = np.broadcast_arrays(L, B)
    X = np.empty(B.shape)
    for i in range(L.shape[-1]):
        acc = B[..., i, :] - np.einsum("...k,...kj->...j", L[..., i, :i], X[..., :i, :])
        X[..., i, :] = acc / L[..., i, i, None]
    return X


@lru_cache(maxsize=None)
def _phi_mask(n):
    mask = np.tril(np.ones((n, n)), -1) + 0.5 * np.eye(n)
    mask.flags.writeable = False
    return mask


def _phi(A):
    """Strict lower triangle of ``A`` plus half its diagonal."""
    return A * _phi_mask(A.shape[-1])


def sqrt_sensitivity(L, dP):
    """Derivative of the Cholesky factor along a symmetric direction ``dP``.

    Returns the unique lower-triangular ``dL`` solving
    ``dL @ L.T + L @ dL.T == dP``, i.e. ``dL = L @ phi(L^-1 dP L^-T)``.
    ``L`` and ``dP`` broadcast against each other.
    """
    L = _as_square("L", L)
    dP = _as_square("dP", dP)
    if dP.shape[-1] != L.shape[-1]:
        raise DimensionMismatch(f"dP shape {dP.shape} does not match factor shape {L.shape}")
    d = np.abs(np.diagonal(L, axis1=-2, axis2=-1))
    tiny = d.min(axis=-1) <= np.finfo(float).eps * d.max(axis=-1)
    if np.any(tiny):
        raise SingularFactor("Cholesky factor has a near-zero diagonal entry", batch_index=_failed(tiny))
    # L^-1 dP L^-T via two forward substitutions
    Y = solve_lower(L, dP)
    X = transpose(solve_lower(L, transpose(Y)))
    return L @ _phi(X)


def kron(A, B):
    """Kronecker product over the last two axes, batched over the leading ones.

    ``(A kron B) @ vec(X) == vec(B @ X @ A.T)`` for column-major ``vec``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim < 2:
        A = np.atleast_2d(A)
    if B.ndim < 2:
        B = np.atleast_2d(B)
    (ap, aq), (bp, bq) = A.shape[-2:], B.shape[-2:]
    out = A[..., :, None, :, None] * B[..., None, :, None, :]
    return out.reshape(out.shape[:-4] + (ap * bp, aq * bq))


def vec(X):
    """Column-stacking vectorization of the last two axes."""
    X = np.asarray(X)
    return transpose(X).reshape(X.shape[:-2] + (-1,))


def unvec(v, rows, cols):
    v = np.asarray(v)
    return transpose(v.reshape(v.shape[:-1] + (cols, rows)))


def kalman_gain(Pzz, Pxz):
    """``Pxz Pzz^-1`` for symmetric ``Pzz``."""
    Pzz = _as_square("Pzz", Pzz)
    cond = np.linalg.cond(Pzz, 1)
    bad = ~(cond < GAIN_MAX_COND)
    if np.any(bad):
        raise SingularSystem("innovation covariance is numerically singular", batch_index=_failed(bad))
    return transpose(np.linalg.solve(Pzz, transpose(Pxz)))


def solve_desensitized_gain(Pzz, Pxz, weights, s_minus, gamma):
    """Gain minimizing trace(P+) plus the weighted posterior sensitivity norms.

    Solves ``K Pzz + sum_i W_i K g_i g_i^T = Pxz + sum_i W_i s_i g_i^T`` for
    ``K`` by vectorization:
    ``(Pzz^T kron I + sum_i (g_i g_i^T) kron W_i) vec(K) = vec(rhs)``.

    Args:
        Pzz: innovation covariance, ``(..., m, m)``.
        Pxz: state/measurement cross covariance, ``(..., n, m)``.
        weights: ``l`` weight matrices, each n x n.
        s_minus: prior sensitivities, ``(..., l, n)``.
        gamma: predicted-measurement sensitivities, ``(..., l, m)``.

    Returns:
        The gain, ``(..., n, m)``.
    """
    Pzz = _as_square("Pzz", Pzz)
    Pxz = np.asarray(Pxz, dtype=float)
    if Pxz.ndim < 2:
        Pxz = np.atleast_2d(Pxz)
    n, m = Pxz.shape[-2:]
    if Pzz.shape[-1] != m:
        raise DimensionMismatch(f"Pxz is {n}x{m} but Pzz is {Pzz.shape[-1]}x{Pzz.shape[-1]}")
    weights = [np.asarray(W, dtype=float) for W in weights]
    ell = len(weights)
    s_minus = np.asarray(s_minus, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if ell == 0:
        if s_minus.size or gamma.size:
            raise DimensionMismatch("weights, s_minus and gamma must have equal length")
    elif s_minus.shape[-2:] != (ell, n) or gamma.shape[-2:] != (ell, m):
        raise DimensionMismatch(
            f"expected sensitivities (..., {ell}, {n}) and gamma (..., {ell}, {m}), "
            f"got {s_minus.shape} and {gamma.shape}"
        )

    for i, W in enumerate(weights):
        if W.shape != (n, n):
            raise DimensionMismatch(f"weight {i} has shape {W.shape}, expected ({n}, {n})")
    # a zero weight adds exactly nothing to either side of the equation
    active = [i for i, W in enumerate(weights) if np.any(W)]
    if not active:
        return kalman_gain(Pzz, Pxz)

    op = kron(transpose(Pzz), np.eye(n))
    rhs = Pxz.copy()
    for i in active:
        W = weights[i]
        g = gamma[..., i, :]
        s = s_minus[..., i, :]
        op = op + kron(g[..., :, None] * g[..., None, :], W)
        rhs = rhs + W @ (s[..., :, None] * g[..., None, :])

    finite = np.isfinite(op).all(axis=(-2, -1))
    if not finite.all():
        raise SingularSystem("gain operator has non-finite entries", batch_index=_failed(~finite))
    cond = np.linalg.cond(op, 1)
    bad = ~(cond < GAIN_MAX_COND)
    if np.any(bad):
        raise SingularSystem("gain operator is numerically singular", batch_index=_failed(bad))
    k = np.linalg.solve(op, vec(rhs)[..., None])[..., 0]
    return unvec(k, n, m)


def gain_equation_residual(K, Pzz, Pxz, weights, s_minus, gamma):
    """Relative Frobenius residual of the desensitized gain equation at ``K`` (single instance)."""
    lhs = K @ Pzz
    rhs = np.array(Pxz, dtype=float)
    for W, s, g in zip(weights, s_minus, gamma):
        lhs = lhs + W @ K @ np.outer(g, g)
        rhs = rhs + W @ np.outer(s, g)
    scale = max(np.linalg.norm(rhs), np.linalg.norm(K @ Pzz))
    return np.linalg.norm(lhs - rhs) / max(scale, np.finfo(float).tiny)
