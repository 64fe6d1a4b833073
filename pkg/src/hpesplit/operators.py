"""Proximal building blocks and the refinable resolvent of the least-squares term.

Resolvents come in three flavors here: closed-form maps (`soft_threshold`,
`clip`), a one-shot linear solve (`lsq_resolvent_exact`), and the stateful
`LsqResolvent`, which exposes the same solve as a sequence of CG improvements
so an outer loop can stop it early once a relative-error check passes.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import NumericalError, StoppingRule, cg_solve


def soft_threshold(x, eta):
    """Componentwise sign(x) * max(|x| - eta, 0); the prox of eta * ||.||_1."""
    if eta < 0:
        raise ValueError(f"threshold must be nonnegative, got {eta}")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - eta, 0.0)


def clip(x, lam):
    """Componentwise projection onto [-lam, lam]."""
    if lam < 0:
        raise ValueError(f"clip level must be nonnegative, got {lam}")
    return np.minimum(np.maximum(np.asarray(x, dtype=float), -lam), lam)


def resolvent_dual_l1(y, lam, theta=1.0):
    """Resolvent of theta * (lam * ||.||_1)^{-1}: clipping, independent of theta > 0."""
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    return clip(y, lam)


def huber_value(y, delta):
    """Sum of componentwise Huber penalties: quadratic inside [-delta, delta], linear outside."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    y = np.asarray(y, dtype=float)
    a = np.abs(y)
    return float(np.sum(np.where(a <= delta, 0.5 * y * y, delta * (a - 0.5 * delta))))


def huber_gradient(y, delta):
    """Gradient of `huber_value`; 1-Lipschitz, equal to y inside the quadratic region."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    y = np.asarray(y, dtype=float)
    return np.where(np.abs(y) <= delta, y, delta * np.sign(y))


@dataclass(frozen=True)
class HuberParams:
    """Smoothing width and weight of the smoothed total-variation penalty."""

    delta: float
    lam2: float

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.lam2 <= 0:
            raise ValueError(f"lam2 must be positive, got {self.lam2}")

    @property
    def beta(self):
        """Lipschitz bound 4 * lam2 of the forward term lam2 * Dt grad(D x) for ||D|| <= 2."""
        return 4.0 * self.lam2

    def value(self, y):
        return self.lam2 * huber_value(y, self.delta)

    def gradient(self, y):
        return self.lam2 * huber_gradient(y, self.delta)


def lsq_resolvent_exact(H, f, tau, rhs, cg_tol=1e-10, x0=None, cap=None):
    """Resolvent of tau * Ht(H . - f) at `rhs`: solve (I + tau HtH) x = rhs + tau Ht f.

    Warm-started CG at relative tolerance `cg_tol`; raises NumericalError when
    the iteration cap (default 10 * n) runs out before the tolerance is met.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.size
    if cap is None:
        cap = 10 * n
    b = rhs + tau * H.apply_adjoint(f)

    def apply(v):
        return v + tau * H.apply_adjoint(H.apply(v))

    x, _ = cg_solve(apply, b, x0=x0, stop=StoppingRule(tol=cg_tol, cap=cap))
    # verification only, so uncounted
    res = b - (x + tau * H.apply_adjoint_uncounted(H.apply_uncounted(x)))
    b_norm = np.linalg.norm(b)
    rel = np.linalg.norm(res) / b_norm if b_norm > 0 else np.linalg.norm(res)
    if rel > cg_tol:
        raise NumericalError(f"CG cap {cap} exhausted at relative residual {rel:.3e} "
                             f"(requested {cg_tol:.3e})")
    return x


class LsqResolvent:
    """Refinable inexact resolvent of the least-squares operator x -> Ht(H x - f).

    For a target equation (I + tau HtH) x = rhs + tau Ht f this object runs CG
    one step at a time. After every step the witness a = Ht(H x - f) is
    recomputed from scratch, so the pair (candidate, witness) always satisfies
    the operator inclusion exactly, and the CG residual is rebuilt from the
    recomputed witness via rhs - x - tau a (the two agree up to rounding).

    The candidate carries over between targets, which is the warm start used by
    the outer splitting loops.
    """

    def __init__(self, H, f, tau, x0=None):
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.H = H
        self.f = np.asarray(f, dtype=float)
        self.tau = float(tau)
        self._x = np.zeros(H.cols) if x0 is None else np.array(x0, dtype=float)
        self._a = None
        self._rhs = None
        self._res = None
        self._p = None
        self._rs = 0.0
        self.steps_on_target = 0

    @property
    def candidate(self):
        return self._x

    @property
    def witness(self):
        return self._a

    @property
    def residual_norm(self):
        """||tau a + x - rhs||, the quantity the outer relative-error check consumes."""
        return float(np.linalg.norm(self._res))

    @property
    def stalled(self):
        """True once the residual sits at the rounding floor; refining is a no-op then."""
        scale = 1.0 + np.linalg.norm(self._rhs) + np.linalg.norm(self._x)
        return np.sqrt(self._rs) <= 1e-15 * scale

    def _recompute_witness(self):
        self._a = self.H.apply_adjoint(self.H.apply(self._x) - self.f)

    def set_target(self, rhs, warm_start=None):
        """Point the oracle at a new resolvent argument, keeping the previous candidate."""
        self._rhs = np.asarray(rhs, dtype=float)
        if warm_start is not None:
            self._x = np.array(warm_start, dtype=float)
        self._recompute_witness()
        self._res = self._rhs - self._x - self.tau * self._a
        self._p = self._res.copy()
        self._rs = float(self._res @ self._res)
        self.steps_on_target = 0
        return self._x, self._a

    def refine(self, steps=1):
        """Advance CG by `steps` iterations; returns the updated (candidate, witness)."""
        if self._rhs is None:
            raise RuntimeError("set_target must be called before refine")
        for _ in range(steps):
            if self.stalled:
                break
            ap = self._p + self.tau * self.H.apply_adjoint(self.H.apply(self._p))
            pap = float(self._p @ ap)
            if not np.isfinite(pap):
                raise NumericalError("non-finite curvature in resolvent refinement")
            if pap <= 0.0:
                break
            alpha = self._rs / pap
            self._x = self._x + alpha * self._p
            self._recompute_witness()
            self._res = self._rhs - self._x - self.tau * self._a
            rs_new = float(self._res @ self._res)
            self._p = self._res + (rs_new / self._rs) * self._p
            self._rs = rs_new
            self.steps_on_target += 1
        return self._x, self._a


def lsq_refine(oracle, steps=1):
    """Improve the oracle's (candidate, witness) pair by `steps` CG iterations."""
    return oracle.refine(steps)
