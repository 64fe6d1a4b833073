"""Extragradient proximal core with a degenerate (PSD) preconditioner.

The driver accepts an inexact resolvent output (u_tilde, witness) whenever the
relative-error check

    ||lam * v + u_tilde - u||_M  <=  sigma * ||u_tilde - u||_M

holds in the seminorm of the preconditioner M, then takes the extragradient
step u <- u - lam * v.  With an onto factorization M = C C* the whole loop can
be driven in the smaller space of w = C* u, which is the `reduced_hpe_run`
entry point the concrete splitting methods build on.
"""

import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


class CertificationError(RuntimeError):
    """Inner refinement ran out of budget without passing the relative-error check."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class Preconditioner:
    """Self-adjoint positive semidefinite map, optionally with a factor M = C C*.

    When the factor is available the seminorm is evaluated as ||C* u||, which
    avoids the small negative inner products PSD rounding can produce;
    otherwise negative values of <u, M u> are clamped to zero before the root.
    """

    def __init__(self, m_apply, dim, cstar_apply=None, c_apply=None, factor_dim=None):
        self.m_apply = m_apply
        self.dim = dim
        self.cstar_apply = cstar_apply
        self.c_apply = c_apply
        self.factor_dim = factor_dim

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(lambda u: M @ u, M.shape[0])

    @classmethod
    def from_factor(cls, C):
        """Build M = C C* from a LinearMap factor C (columns index the reduced space)."""
        return cls(
            lambda u: C.apply_uncounted(C.apply_adjoint_uncounted(u)),
            dim=C.rows,
            cstar_apply=C.apply_adjoint_uncounted,
            c_apply=C.apply_uncounted,
            factor_dim=C.cols,
        )

    @property
    def has_factor(self):
        return self.cstar_apply is not None

    def apply(self, u):
        return self.m_apply(np.asarray(u, dtype=float))

    def seminorm(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}, got shape {u.shape}")
        if self.has_factor:
            return float(np.linalg.norm(self.cstar_apply(u)))
        quad = float(u @ self.m_apply(u))
        return float(np.sqrt(max(quad, 0.0)))

    def self_check(self, seed=0, trials=100, tol=1e-12):
        """Verify PSD-ness and, if present, the factorization, on random vectors."""
        rng = np.random.default_rng(seed)
        for _ in range(trials):
            u = rng.standard_normal(self.dim)
            quad = float(u @ self.m_apply(u))
            if quad < -tol * float(u @ u):
                raise ValueError(f"preconditioner is not PSD: <u, Mu> = {quad:.3e}")
            if self.has_factor:
                gap = np.linalg.norm(self.m_apply(u) - self.c_apply(self.cstar_apply(u)))
                if gap > tol * max(1.0, np.linalg.norm(u)):
                    raise ValueError(f"factorization inconsistent: ||Mu - C C* u|| = {gap:.3e}")


def m_seminorm(P, u):
    """Seminorm sqrt(<u, M u>) of the preconditioner; uses ||C* u|| when a factor exists."""
    return P.seminorm(u)


def hpe_error_check(P, lam, v, u_tilde, u, sigma):
    """Evaluate the relative-error acceptance test in the M-seminorm.

    Returns (accepted, lhs, rhs) with lhs = ||lam v + u_tilde - u||_M and
    rhs = ||u_tilde - u||_M; accepted means lhs <= sigma * rhs.
    """
    if lam <= 0:
        raise ValueError(f"stepsize must be positive, got {lam}")
    if not 0 <= sigma < 1:
        raise ValueError(f"sigma must be in [0, 1), got {sigma}")
    lhs = P.seminorm(lam * np.asarray(v, float) + np.asarray(u_tilde, float) - np.asarray(u, float))
    rhs = P.seminorm(np.asarray(u_tilde, float) - np.asarray(u, float))
    return lhs <= sigma * rhs, lhs, rhs


def hpe_update(u, lam, v):
    """Extragradient step u - lam * v."""
    if lam <= 0:
        raise ValueError(f"stepsize must be positive, got {lam}")
    return np.asarray(u, dtype=float) - lam * np.asarray(v, dtype=float)


@dataclass
class HpeConfig:
    """Loop parameters shared by the inexact splitting runs.

    ``lam`` may be a constant, a sequence, or a callable k -> lam_k; every
    value must be positive. ``accept_atol`` adds a rounding floor to the
    acceptance test (scaled by 1 + ||w||) so that runs sitting at the exact
    fixed point do not spin in the inner loop; set it to 0 for the strict
    textbook criterion.
    """

    sigma: float = 0.0
    lam: object = 1.0
    inner_cap: int = 200
    record_invariants: bool = False
    accept_atol: float = 1e-14

    def __post_init__(self):
        if not 0 <= self.sigma < 1:
            raise ValueError(f"sigma must be in [0, 1), got {self.sigma}")
        if self.inner_cap < 1:
            raise ValueError(f"inner_cap must be >= 1, got {self.inner_cap}")
        if self.accept_atol < 0:
            raise ValueError("accept_atol must be nonnegative")

    def stepsize(self, k):
        if callable(self.lam):
            lam = float(self.lam(k))
        elif np.isscalar(self.lam):
            lam = float(self.lam)
        else:
            lam = float(self.lam[k])
        if lam <= 0:
            raise ValueError(f"stepsize lam_{k} = {lam} must be positive")
        return lam


@dataclass
class CertifiedPair:
    """Accepted inexact resolvent output together with its error-check numbers."""

    u_tilde: object
    witness: np.ndarray
    lhs: float
    rhs: float
    inner_iterations: int


class RunTrace:
    """Per-iteration records of one splitting run.

    ``rhs`` doubles as the seminorm of the step ||u_tilde - u||_M, and
    ``seminorm_residual`` is ||lam v||_M.  ``iterates`` (when recorded) holds
    u^0 .. u^K in whatever coordinates the method iterates in, so it has one
    more entry than the row lists.
    """

    def __init__(self, method="", sigma=None):
        self.method = method
        self.sigma = sigma
        self.k: List[int] = []
        self.objective: List[float] = []
        self.lhs: List[float] = []
        self.rhs: List[float] = []
        self.inner_iterations: List[int] = []
        self.h_applications: List[int] = []
        self.seminorm_residual: List[float] = []
        self.accept_tol: List[float] = []
        self.wall_ms: List[float] = []
        self.iterates: Optional[List[np.ndarray]] = None
        self.reference_objective: Optional[float] = None

    def append(self, k, objective, lhs, rhs, inner, h_apps, residual, wall_ms, accept_tol=0.0):
        if self.h_applications and h_apps < self.h_applications[-1]:
            raise ValueError("cumulative operator counts must be non-decreasing")
        self.k.append(int(k))
        self.objective.append(float(objective))
        self.lhs.append(float(lhs))
        self.rhs.append(float(rhs))
        self.inner_iterations.append(int(inner))
        self.h_applications.append(int(h_apps))
        self.seminorm_residual.append(float(residual))
        self.accept_tol.append(float(accept_tol))
        self.wall_ms.append(float(wall_ms))

    def __len__(self):
        return len(self.k)

    @property
    def seminorm_step(self):
        return self.rhs

    def objective_gap(self):
        ref = self.reference_objective if self.reference_objective is not None else 0.0
        return [obj - ref for obj in self.objective]


def reduced_hpe_run(produce, refine, w0, cfg, max_outer, objective=None,
                    h_counter=None, method="reduced-hpe", on_accept=None):
    """Run the reduced inexact proximal loop in the factor space w = C* u.

    Parameters
    ----------
    produce : callable
        ``produce(k, w) -> (u_tilde, z, s)`` proposing a pair with
        C z in A(u_tilde); ``z`` is the reduced witness and ``s = C* u_tilde``.
    refine : callable
        ``refine(k, w, pair) -> (u_tilde, z, s)`` improving the proposal so
        that ||lam z + s - w|| shrinks; called until the check passes.
    w0 : ndarray
        Initial reduced iterate.
    cfg : HpeConfig
    max_outer : int
        Number of outer iterations to run.
    objective : callable, optional
        ``objective(u_tilde) -> float`` recorded per iteration (NaN when absent).
    h_counter : callable, optional
        Returns the cumulative count of the dominant operator applications.
    method : str
        Label stored in the trace.
    on_accept : callable, optional
        ``on_accept(k, w_before, pair: CertifiedPair, w_after)`` called once per
        accepted iteration, after the extragradient update.

    Returns
    -------
    RunTrace

    Raises
    ------
    CertificationError
        When ``cfg.inner_cap`` refinements do not produce an acceptable pair.
    """
    w = np.array(w0, dtype=float)
    trace = RunTrace(method=method, sigma=cfg.sigma)
    if cfg.record_invariants:
        trace.iterates = [w.copy()]
    count = h_counter if h_counter is not None else (lambda: 0)

    for k in range(max_outer):
        t0 = time.perf_counter()
        lam = cfg.stepsize(k)
        u_tilde, z, s = produce(k, w)
        atol = cfg.accept_atol * (1.0 + float(np.linalg.norm(w)))
        inner = 0
        while True:
            lhs = float(np.linalg.norm(lam * z + s - w))
            rhs = float(np.linalg.norm(s - w))
            if lhs <= cfg.sigma * rhs + atol:
                break
            if inner >= cfg.inner_cap:
                raise CertificationError(
                    f"{method}: iteration {k} not certified after {inner} refinements "
                    f"(lhs={lhs:.6e}, sigma*rhs={cfg.sigma * rhs:.6e})",
                    iteration=k)
            u_tilde, z, s = refine(k, w, (u_tilde, z, s))
            inner += 1
        w_before = w
        w = w - lam * z
        if on_accept is not None:
            on_accept(k, w_before, CertifiedPair(u_tilde, z, lhs, rhs, inner), w)
        obj = float(objective(u_tilde)) if objective is not None else float("nan")
        trace.append(k, obj, lhs, rhs, inner, count(),
                     residual=lam * float(np.linalg.norm(z)),
                     wall_ms=(time.perf_counter() - t0) * 1e3,
                     accept_tol=atol)
        if cfg.record_invariants:
            trace.iterates.append(w.copy())
    return trace


@dataclass
class AuditReport:
    """Outcome of the per-iteration invariant audit of a trace."""

    method: str
    iterations: int
    fejer_checked: bool
    failures: List[str] = field(default_factory=list)

    @property
    def ok(self):
        return not self.failures

    def raise_if_failed(self):
        if self.failures:
            raise RuntimeError(f"invariant audit failed for {self.method}:\n"
                               + "\n".join(self.failures))


def audit_invariants(trace, sigma, u_star_seminorms=None, rtol=1e-9, step_floor=None):
    """Check the fundamental estimates of the extragradient loop on a trace.

    Per accepted iteration: the acceptance inequality itself, the two-sided
    bound (1 - sigma) * step <= ||lam v||_M <= (1 + sigma) * step, and - when
    ``u_star_seminorms`` supplies d_k = ||u^k - u*||_M for k = 0..K - the
    quasi-Fejer inequality d_{k+1}^2 + (1 - sigma^2) step_k^2 <= d_k^2 and its
    summed form.  ``step_floor``, when given, requires the final step seminorm
    to sit below it. Tolerances scale with the run (rtol relative).
    """
    n = len(trace)
    failures = []
    fejer = u_star_seminorms is not None

    steps = np.asarray(trace.rhs, dtype=float)
    resid = np.asarray(trace.seminorm_residual, dtype=float)
    lhs = np.asarray(trace.lhs, dtype=float)
    accept_tol = np.asarray(trace.accept_tol, dtype=float) if trace.accept_tol else np.zeros(n)

    for k in range(n):
        scale = max(steps[k], resid[k], 1e-300)
        # the runners accept lhs <= sigma*rhs + accept_tol, so every derived
        # estimate carries that extra slack
        tol = rtol * scale + accept_tol[k]
        if lhs[k] > sigma * steps[k] + tol:
            failures.append(f"k={k}: acceptance violated: lhs={lhs[k]:.12e} > "
                            f"sigma*rhs={sigma * steps[k]:.12e}")
        if resid[k] < (1 - sigma) * steps[k] - tol or resid[k] > (1 + sigma) * steps[k] + tol:
            failures.append(f"k={k}: two-sided estimate violated: ||lam v||_M={resid[k]:.12e} "
                            f"vs [{(1 - sigma) * steps[k]:.12e}, {(1 + sigma) * steps[k]:.12e}]")

    if fejer:
        d = np.asarray(u_star_seminorms, dtype=float)
        if d.size != n + 1:
            raise ValueError(f"need {n + 1} distances ||u^k - u*||_M, got {d.size}")
        scale2 = max(float(d[0] ** 2), 1e-300)
        slack_sum = 0.0
        for k in range(n):
            slack = 2 * sigma * steps[k] * accept_tol[k] + accept_tol[k] ** 2 + rtol * scale2
            slack_sum += slack
            left = d[k + 1] ** 2 + (1 - sigma ** 2) * steps[k] ** 2
            if left > d[k] ** 2 + slack:
                failures.append(f"k={k}: Fejer inequality violated: {left:.12e} > "
                                f"{d[k] ** 2:.12e}")
        total = d[n] ** 2 + (1 - sigma ** 2) * float(np.sum(steps ** 2))
        if total > d[0] ** 2 + slack_sum:
            failures.append(f"summability violated: {total:.12e} > {d[0] ** 2:.12e}")

    if n >= 2 and steps[0] > 0 and steps[-1] >= steps[0]:
        failures.append(f"step seminorm did not decrease: first={steps[0]:.6e}, "
                        f"last={steps[-1]:.6e}")
    if step_floor is not None and n >= 1 and steps[-1] > step_floor:
        failures.append(f"final step seminorm {steps[-1]:.6e} above floor {step_floor:.6e}")

    return AuditReport(method=trace.method, iterations=n, fejer_checked=fejer,
                       failures=failures)
