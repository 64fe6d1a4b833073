"""Dense linear algebra: counted linear maps, conjugate gradients, norm estimation."""

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class NumericalError(RuntimeError):
    """Raised when an iterative routine meets non-finite values or exhausts its budget."""


class LinearMap:
    """Dense linear operator with forward/adjoint application counters.

    The matrix is frozen at construction; only the counters mutate. Counters
    measure algorithmic work (exactly one increment per application), which is
    the cost metric the benchmark harness compares. Instrumentation such as
    objective evaluation should go through the ``*_uncounted`` variants so it
    does not distort that comparison.
    """

    def __init__(self, matrix, name=""):
        mat = np.array(matrix, dtype=float)
        if mat.ndim != 2:
            raise ValueError(f"LinearMap needs a 2-d matrix, got shape {mat.shape}")
        mat.setflags(write=False)
        self._mat = mat
        self.name = name
        self.forward_count = 0
        self.adjoint_count = 0

    @classmethod
    def identity(cls, n, name="I"):
        return cls(np.eye(n), name=name)

    @classmethod
    def zeros(cls, rows, cols, name="0"):
        return cls(np.zeros((rows, cols)), name=name)

    @classmethod
    def vstack(cls, maps, name=""):
        """Stack maps vertically: forward concatenates the blocks' outputs."""
        return cls(np.vstack([m.as_matrix() for m in maps]), name=name)

    @property
    def rows(self):
        return self._mat.shape[0]

    @property
    def cols(self):
        return self._mat.shape[1]

    @property
    def shape(self):
        return self._mat.shape

    @property
    def total_count(self):
        return self.forward_count + self.adjoint_count

    def as_matrix(self):
        """Read-only view of the underlying dense matrix."""
        return self._mat

    def fresh(self):
        """New map sharing the same matrix with zeroed counters."""
        clone = LinearMap.__new__(LinearMap)
        clone._mat = self._mat
        clone.name = self.name
        clone.forward_count = 0
        clone.adjoint_count = 0
        return clone

    def reset_counts(self):
        self.forward_count = 0
        self.adjoint_count = 0

    def _check_dim(self, x, expected, kind):
        x = np.asarray(x, dtype=float)
        if x.shape != (expected,):
            raise ValueError(f"{kind} application of {self.shape} map needs a "
                             f"vector of length {expected}, got shape {x.shape}")
        return x

    def apply(self, x):
        x = self._check_dim(x, self.cols, "forward")
        self.forward_count += 1
        return self._mat @ x

    def apply_adjoint(self, y):
        y = self._check_dim(y, self.rows, "adjoint")
        self.adjoint_count += 1
        return self._mat.T @ y

    def apply_uncounted(self, x):
        return self._mat @ self._check_dim(x, self.cols, "forward")

    def apply_adjoint_uncounted(self, y):
        return self._mat.T @ self._check_dim(y, self.rows, "adjoint")


@dataclass(frozen=True)
class StoppingRule:
    """Stopping control for inner iterations; any configured criterion firing stops.

    ``tol`` is a relative residual threshold ||b - A x|| / ||b|| (absolute when
    ||b|| = 0).  ``predicate`` is called as ``predicate(x, residual, k)`` after
    every step and stops when it returns True.  ``cap`` bounds the step count.
    """

    tol: Optional[float] = None
    predicate: Optional[Callable[[np.ndarray, np.ndarray, int], bool]] = None
    cap: Optional[int] = None

    def __post_init__(self):
        if self.tol is None and self.predicate is None and self.cap is None:
            raise ValueError("StoppingRule needs at least one criterion")
        if self.tol is not None and not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.cap is not None and self.cap < 1:
            raise ValueError(f"cap must be >= 1, got {self.cap}")

    @classmethod
    def relative_residual(cls, tol, cap=None):
        return cls(tol=tol, cap=cap)

    @classmethod
    def from_predicate(cls, fn, cap=None):
        return cls(predicate=fn, cap=cap)

    @classmethod
    def iteration_cap(cls, cap):
        return cls(cap=cap)


def cg_solve(apply, b, x0=None, stop=None):
    """Conjugate gradients for a symmetric positive semidefinite system.

    Parameters
    ----------
    apply : callable
        Matrix-free application ``v -> A v`` of the (SPD, or PSD with ``b`` in
        range) system operator.
    b : ndarray
        Right-hand side.
    x0 : ndarray, optional
        Warm start; zeros when omitted.
    stop : StoppingRule
        Residual tolerance, external predicate (checked after every step), or
        iteration cap; whichever fires first stops.

    Returns
    -------
    (x, iterations) : the iterate at stop time and the number of CG steps taken.
    """
    b = np.asarray(b, dtype=float)
    if stop is None:
        stop = StoppingRule.relative_residual(1e-10, cap=10 * b.size)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if x.shape != b.shape:
        raise ValueError(f"x0 shape {x.shape} does not match b shape {b.shape}")

    b_norm = float(np.linalg.norm(b))
    threshold = None
    if stop.tol is not None:
        threshold = stop.tol * b_norm if b_norm > 0 else stop.tol

    r = b - apply(x)
    if r.shape != b.shape:
        raise ValueError("apply(x) shape does not match b")
    rs = float(r @ r)
    if not np.isfinite(rs):
        raise NumericalError("non-finite residual at CG start")
    if threshold is not None and np.sqrt(rs) <= threshold:
        return x, 0

    p = r.copy()
    k = 0
    while True:
        if stop.cap is not None and k >= stop.cap:
            break
        if rs == 0.0:
            break
        ap = apply(p)
        pap = float(p @ ap)
        if not np.isfinite(pap):
            raise NumericalError(f"non-finite curvature at CG step {k}")
        if pap <= 0.0:
            # PSD operator with b in range: zero curvature means convergence
            # in exact arithmetic; stop rather than divide by ~0.
            break
        alpha = rs / pap
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise NumericalError(f"non-finite residual at CG step {k}")
        k += 1
        if threshold is not None and np.sqrt(rs_new) <= threshold:
            return x, k
        if stop.predicate is not None and stop.predicate(x, r, k):
            return x, k
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, k


def estimate_spectral_norm(op, tol=1e-6, max_iter=1000, seed=0):
    """Estimate ||op|| by power iteration on op^T op from a seeded Gaussian start.

    Uses uncounted applications so that setup work does not pollute the
    benchmark counters. Warns and returns the best estimate if ``max_iter`` is
    exhausted before two consecutive estimates agree to relative ``tol``.
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.cols)
    nv = np.linalg.norm(v)
    if nv == 0:
        return 0.0
    v /= nv
    est = 0.0
    for _ in range(max_iter):
        w = op.apply_adjoint_uncounted(op.apply_uncounted(v))
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        new_est = np.sqrt(nw)
        v = w / nw
        if abs(new_est - est) <= tol * new_est:
            return float(new_est)
        est = new_est
    warnings.warn(f"spectral norm estimate did not converge to tol={tol} "
                  f"in {max_iter} iterations; returning best estimate")
    return float(est)
