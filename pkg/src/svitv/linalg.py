"""Conjugate gradients in a weighted inner product.

The operators in this package are self-adjoint with respect to the
quadrature inner product ``(u, v) = sum(w * u * v)``, not the Euclidean one,
so CG is run directly in that inner product.
"""

import numpy as np


class SolverError(RuntimeError):
    """Linear solve did not reach its tolerance."""

    def __init__(self, message, residual, iterations):
        super().__init__(f"{message} (relative residual {residual:.3e} "
                         f"after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


def cg(apply_op, rhs, weights, x0=None, tol=1e-12, maxiter=None,
       diag=None, preserve_mean=False):
    """Solve ``apply_op(x) = rhs`` for a W-self-adjoint positive operator.

    Parameters
    ----------
    apply_op : callable
        Maps a flat array to a flat array.
    rhs, weights : ndarray
        Flat arrays of equal length.
    x0 : ndarray, optional
        Initial guess (copied).
    tol : float
        Stop when ``||r||_W <= tol * ||rhs||_W``.
    maxiter : int, optional
        Defaults to ``10 * n``.
    diag : ndarray, optional
        Operator diagonal, used as a Jacobi preconditioner.
    preserve_mean : bool
        Assume ``apply_op`` maps constants to themselves.  The weighted mean of
        the residual is then removed exactly up front and every search
        direction is kept mean-free, so the mean of the iterate is exact.

    Returns
    -------
    x : ndarray
    iterations : int
    """
    n = rhs.size
    maxiter = 10 * n if maxiter is None else maxiter
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    total = weights.sum()

    def dot(a, b):
        return float(np.dot(weights, a * b))

    r = rhs - apply_op(x)
    if preserve_mean:
        m = dot(r, np.ones(n)) / total
        x += m
        r -= m
    bnorm = np.sqrt(dot(rhs, rhs))
    if bnorm == 0.0:
        bnorm = 1.0
    target = tol * bnorm
    inv_diag = None if diag is None else 1.0 / diag

    def precondition(res):
        if inv_diag is None:
            return res.copy()
        z = inv_diag * res
        if preserve_mean:
            z -= dot(z, np.ones(n)) / total
        return z

    rnorm = np.sqrt(dot(r, r))
    if rnorm <= target:
        return x, 0
    z = precondition(r)
    p = z.copy()
    rz = dot(r, z)
    for it in range(1, maxiter + 1):
        q = apply_op(p)
        pq = dot(p, q)
        if pq <= 0.0:
            raise SolverError("operator is not positive definite",
                              rnorm / bnorm, it)
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        rnorm = np.sqrt(dot(r, r))
        if rnorm <= target:
            return x, it
        z = precondition(r)
        rz_new = dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError("conjugate gradients did not converge", rnorm / bnorm,
                      maxiter)
