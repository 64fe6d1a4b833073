"""Splitting methods: three certified inexact schemes and their baselines.

The inexact methods (`eckstein_yao_run`, `inexact_cp_run`, `inexact_dy_run`)
drive a refinable resolvent oracle for the hard term and stop its inner CG as
soon as the relative-error check passes.  An oracle is anything with the
`LsqResolvent` protocol: ``set_target(rhs) -> (candidate, witness)`` carrying
the previous candidate as warm start, and ``refine(steps) -> (candidate,
witness)``.

Baselines: the same primal-dual iteration with a fixed-tolerance inner solve
(`implicit_cp_run`, `implicit_dy_run`), the fully dualized explicit variant
(`explicit_cp_run`), a forward-step primal-dual method (`condat_vu_run`), and
plain forward-backward (`fb_run`).
"""

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .hpe import CertificationError, HpeConfig, RunTrace, reduced_hpe_run
from .linalg import NumericalError, StoppingRule, cg_solve, estimate_spectral_norm
from .operators import clip, huber_gradient, soft_threshold


@dataclass
class CpParams:
    """Stepsizes for the primal-dual iterations; needs tau * theta * ||K||^2 <= 1."""

    tau: float
    theta: float
    sigma: float = 0.0
    kappa: Optional[float] = None

    def __post_init__(self):
        if self.tau <= 0 or self.theta <= 0:
            raise ValueError(f"stepsizes must be positive, got tau={self.tau}, theta={self.theta}")
        if not 0 <= self.sigma < 1:
            raise ValueError(f"sigma must be in [0, 1), got {self.sigma}")

    @classmethod
    def from_kappa(cls, kappa, sigma=0.0):
        """tau = 1/(2 kappa), theta = kappa/2: valid whenever ||K|| <= 2."""
        if kappa <= 0:
            raise ValueError(f"kappa must be positive, got {kappa}")
        return cls(tau=1.0 / (2.0 * kappa), theta=kappa / 2.0, sigma=sigma, kappa=kappa)

    def validate_norm(self, norm_K, slack=1e-9):
        if self.tau * self.theta * norm_K ** 2 > 1.0 + slack:
            raise ValueError(
                f"tau*theta*||K||^2 = {self.tau * self.theta * norm_K ** 2:.6f} exceeds 1")


@dataclass
class DyParams:
    """Stepsize gamma in (0, 2/beta) for a 1/beta-cocoercive forward term.

    ``alpha`` is the induced averaging weight gamma*beta / (4 - gamma*beta);
    it is derived, not chosen.
    """

    gamma: float
    beta: float
    sigma: float = 0.0
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        # beta = 0 means no forward term: gamma is unconstrained and alpha = 0
        gamma_max = 2.0 / self.beta if self.beta > 0 else np.inf
        if not 0 < self.gamma < gamma_max:
            raise ValueError(f"gamma must lie in (0, 2/beta) = (0, {gamma_max}), "
                             f"got {self.gamma}")
        if not 0 <= self.sigma < 1:
            raise ValueError(f"sigma must be in [0, 1), got {self.sigma}")
        derived = self.gamma * self.beta / (4.0 - self.gamma * self.beta)
        if self.alpha is None:
            self.alpha = derived
        elif abs(self.alpha - derived) > 1e-9 * max(1.0, derived):
            raise ValueError(f"alpha = {self.alpha} inconsistent with "
                             f"gamma*beta/(4-gamma*beta) = {derived}")

    @classmethod
    def from_beta(cls, beta, sigma=0.0, gamma=None):
        if gamma is None:
            gamma = 1.0 / max(beta, 1e-12)  # floor keeps the default defined at beta = 0
        return cls(gamma=gamma, beta=beta, sigma=sigma)


@dataclass
class MethodResult:
    """Trace plus the final primal iterate and any auxiliary final variables."""

    trace: RunTrace
    final_x: np.ndarray
    aux: dict = field(default_factory=dict)


def _counter(h_counter, oracle):
    if h_counter is not None:
        return h_counter
    if hasattr(oracle, "H"):
        return lambda: oracle.H.total_count
    return lambda: 0


# ---------------------------------------------------------------------------
# certified inexact methods
# ---------------------------------------------------------------------------

def eckstein_yao_run(a1_oracle, j_a2, tau, sigma, w0, iters, inner_cap=200,
                     accept_atol=1e-14, record_invariants=False, objective=None,
                     h_counter=None, method="hpe-dr"):
    """Inexact Douglas-Rachford with a per-step relative-error certificate.

    Each outer step proposes (x1, a1) with a1 in A1(x1) and tau*a1 + x1 close
    to w, computes x2 = J_{tau A2}(x1 - tau*a1) with the induced witness
    tau*a2 = x1 - tau*a1 - x2, refines while

        ||x1 + tau*a1 - w|| > sigma * ||x2 + tau*a1 - w||,

    then updates w <- w + x2 - x1.  The equivalent update w - tau*(a1 + a2) is
    computed as well and cross-checked; the maximal discrepancy is reported in
    ``aux['update_crosscheck']``.

    Parameters mirror `reduced_hpe_run`; `objective`, when given, is evaluated
    at x2.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    cfg = HpeConfig(sigma=sigma, inner_cap=inner_cap, accept_atol=accept_atol,
                    record_invariants=record_invariants)
    state = {"crosscheck": 0.0, "x1": None, "x2": None, "w": np.array(w0, dtype=float)}

    def assemble(x1, a1):
        x2 = j_a2(x1 - tau * a1)
        ta2 = x1 - tau * a1 - x2
        z = x1 - x2
        s = tau * a1 + x2
        return (x1, x2, a1, ta2), z, s

    def produce(k, w):
        x1, a1 = a1_oracle.set_target(w)
        return assemble(x1, a1)

    def refine(k, w, pair):
        x1, a1 = a1_oracle.refine(1)
        return assemble(x1, a1)

    def on_accept(k, w_before, pair, w_after):
        x1, x2, a1, ta2 = pair.u_tilde
        w_alt = w_before - (tau * a1 + ta2)
        gap = float(np.linalg.norm(w_alt - w_after))
        state["crosscheck"] = max(state["crosscheck"], gap)
        if gap > 1e-10 * (1.0 + np.linalg.norm(w_after)):
            raise NumericalError(f"step-9 update forms disagree at iteration {k}: {gap:.3e}")
        state["x1"], state["x2"] = x1, x2
        state["w"] = w_after

    obj = None if objective is None else (lambda ut: objective(ut[1]))
    trace = reduced_hpe_run(produce, refine, w0, cfg, iters, objective=obj,
                            h_counter=_counter(h_counter, a1_oracle),
                            method=method, on_accept=on_accept)
    final_x = state["x2"] if state["x2"] is not None else np.array(w0, dtype=float)
    return MethodResult(trace, final_x,
                        aux={"w": state["w"], "x1": state["x1"],
                             "update_crosscheck": state["crosscheck"]})


def inexact_cp_run(a1_oracle, K, j_a2_inv, p, x0, y0, iters, inner_cap=200,
                   accept_atol=1e-14, record_invariants=False, objective=None,
                   h_counter=None, norm_K=None, method="hpe-cp"):
    """Primal-dual iteration with a certified inexact primal resolvent.

    One outer step at (x, y): propose (x1, a) with tau*a + x1 close to
    rhs = x - tau*K*y, set ytilde = J_{theta A2^{-1}}(y + theta*K*(x1 - tau*(a + K*y))),
    and refine while the squared check

        ||tau*a + x1 - rhs||^2 / tau  >  sigma^2 * ||(x1 - x, ytilde - y)||_M^2

    fails, where ||(dx, dy)||_M^2 = ||dx||^2/tau - 2<K dx, dy> + ||dy||^2/theta.
    Then x <- rhs - tau*a and y <- ytilde.

    `objective`, when given, is evaluated at the updated primal iterate.
    """
    tau, theta, sigma = p.tau, p.theta, p.sigma
    if norm_K is None:
        norm_K = estimate_spectral_norm(K)
    p.validate_norm(norm_K)

    x = np.array(x0, dtype=float)
    y = np.array(y0, dtype=float)
    trace = RunTrace(method=method, sigma=sigma)
    if record_invariants:
        trace.iterates = [np.concatenate([x, y])]
    count = _counter(h_counter, a1_oracle)

    def m_norm_sq(dx, dy):
        quad = float(dx @ dx) / tau - 2.0 * float(K.apply(dx) @ dy) + float(dy @ dy) / theta
        return max(quad, 0.0)

    for k in range(iters):
        t0 = time.perf_counter()
        ky = K.apply_adjoint(y)
        rhs = x - tau * ky
        x1, a = a1_oracle.set_target(rhs)
        atol = accept_atol * (1.0 + np.linalg.norm(rhs) + np.linalg.norm(y))
        inner = 0
        while True:
            yt = j_a2_inv(y + theta * K.apply(x1 - tau * (a + ky)))
            r = tau * a + x1 - rhs
            lhs = float(np.linalg.norm(r)) / np.sqrt(tau)
            rhs_norm = np.sqrt(m_norm_sq(x1 - x, yt - y))
            if lhs <= sigma * rhs_norm + atol:
                break
            if inner >= inner_cap:
                raise CertificationError(
                    f"{method}: iteration {k} not certified after {inner} refinements "
                    f"(lhs={lhs:.6e}, sigma*rhs={sigma * rhs_norm:.6e})", iteration=k)
            x1, a = a1_oracle.refine(1)
            inner += 1
        x_new = rhs - tau * a
        y_new = yt
        residual = np.sqrt(m_norm_sq(x_new - x, y_new - y))
        x, y = x_new, y_new
        obj = float(objective(x)) if objective is not None else float("nan")
        trace.append(k, obj, lhs, rhs_norm, inner, count(), residual,
                     wall_ms=(time.perf_counter() - t0) * 1e3, accept_tol=atol)
        if record_invariants:
            trace.iterates.append(np.concatenate([x, y]))
    return MethodResult(trace, x, aux={"y": y})


def inexact_dy_run(a1_oracle, j_a2, b_apply, p, w0, iters, inner_cap=200,
                   accept_atol=1e-14, record_invariants=False, objective=None,
                   h_counter=None, method="hpe-dy"):
    """Three-operator splitting with a certified inexact resolvent of the smooth-data term.

    One outer step at w: propose (x1, a1) with gamma*a1 + x1 close to w, set
    x2 = J_{gamma A2}(x1 - gamma*a1 - gamma*B(x1)), refine while

        ||x1 + gamma*a1 - w|| > sigma * ||(alpha*x1 + x2)/(1+alpha) + gamma*a1 - w||,

    then update w <- w + (x2 - x1)/(1 + alpha).  Setting B = 0 (beta = 0, so
    alpha = 0) recovers `eckstein_yao_run` with tau = gamma exactly.

    `objective`, when given, is evaluated at x2.
    """
    gamma, alpha, sigma = p.gamma, p.alpha, p.sigma
    cfg = HpeConfig(sigma=sigma, inner_cap=inner_cap, accept_atol=accept_atol,
                    record_invariants=record_invariants)
    state = {"x1": None, "x2": None, "w": np.array(w0, dtype=float)}

    def assemble(x1, a1):
        x2 = j_a2(x1 - gamma * a1 - gamma * b_apply(x1))
        z = (x1 - x2) / (1.0 + alpha)
        s = (alpha * x1 + x2) / (1.0 + alpha) + gamma * a1
        return (x1, x2), z, s

    def produce(k, w):
        x1, a1 = a1_oracle.set_target(w)
        return assemble(x1, a1)

    def refine(k, w, pair):
        x1, a1 = a1_oracle.refine(1)
        return assemble(x1, a1)

    def on_accept(k, w_before, pair, w_after):
        state["x1"], state["x2"] = pair.u_tilde
        state["w"] = w_after

    obj = None if objective is None else (lambda ut: objective(ut[1]))
    trace = reduced_hpe_run(produce, refine, w0, cfg, iters, objective=obj,
                            h_counter=_counter(h_counter, a1_oracle),
                            method=method, on_accept=on_accept)
    final_x = state["x2"] if state["x2"] is not None else np.array(w0, dtype=float)
    return MethodResult(trace, final_x, aux={"x1": state["x1"], "w": state["w"]})


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def _lsq_cg_step(H, htf, tau, b, x_warm, cg_tol, cap):
    """One fixed-tolerance inner solve of (I + tau HtH) x = b, warm-started."""

    def apply(v):
        return v + tau * H.apply_adjoint(H.apply(v))

    x, it = cg_solve(apply, b, x0=x_warm, stop=StoppingRule(tol=cg_tol, cap=cap))
    if it >= cap:
        res = b - (x + tau * H.apply_adjoint_uncounted(H.apply_uncounted(x)))
        rel = np.linalg.norm(res) / max(np.linalg.norm(b), 1e-300)
        if rel > cg_tol:
            raise NumericalError(f"inner CG cap {cap} exhausted at relative "
                                 f"residual {rel:.3e}")
    return x, it


def implicit_cp_run(H, f, D, lam, p, x0, y0, iters, cg_tol=1e-8, cg_cap=None,
                    record_invariants=False, objective=None, method="implicit-cp"):
    """Primal-dual iteration with the primal resolvent solved to a fixed CG tolerance.

        x <- (I + tau HtH)^{-1} (x - tau*(Dt y - Ht f))      [CG, warm start x]
        y <- clip(y + theta*D(2 x_new - x), lam)
    """
    tau, theta = p.tau, p.theta
    f = np.asarray(f, dtype=float)
    x = np.array(x0, dtype=float)
    y = np.array(y0, dtype=float)
    cap = cg_cap if cg_cap is not None else 10 * x.size
    htf = H.apply_adjoint(f)
    trace = RunTrace(method=method, sigma=None)
    if record_invariants:
        trace.iterates = [np.concatenate([x, y])]

    for k in range(iters):
        t0 = time.perf_counter()
        b = x - tau * (D.apply_adjoint(y) - htf)
        x_new, it = _lsq_cg_step(H, htf, tau, b, x, cg_tol, cap)
        y_new = clip(y + theta * D.apply(2.0 * x_new - x), lam)
        x, y = x_new, y_new
        obj = float(objective(x)) if objective is not None else float("nan")
        trace.append(k, obj, 0.0, 0.0, it, H.total_count, 0.0,
                     wall_ms=(time.perf_counter() - t0) * 1e3)
        if record_invariants:
            trace.iterates.append(np.concatenate([x, y]))
    return MethodResult(trace, x, aux={"y": y})


def explicit_cp_run(H, f, D, lam, kappa, x0, u0, v0, iters, norm_K=None,
                    record_invariants=False, objective=None, method="explicit-cp"):
    """Fully dualized primal-dual iteration: forward applications of H and D only.

        x <- x - tau*(Ht u + Dt v)
        u <- (u + theta*(H(2 x_new - x) - f)) / (1 + theta)
        v <- clip(v + theta*D(2 x_new - x), lam)

    with tau = 1/(||K|| kappa), theta = kappa/||K||, ||K||^2 <= ||H||^2 + ||D||^2.
    """
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if norm_K is None:
        norm_K = float(np.sqrt(estimate_spectral_norm(H) ** 2 +
                               estimate_spectral_norm(D) ** 2))
    tau = 1.0 / (norm_K * kappa)
    theta = kappa / norm_K
    f = np.asarray(f, dtype=float)
    x = np.array(x0, dtype=float)
    u = np.array(u0, dtype=float)
    v = np.array(v0, dtype=float)
    trace = RunTrace(method=method, sigma=None)
    if record_invariants:
        trace.iterates = [x.copy()]

    for k in range(iters):
        t0 = time.perf_counter()
        x_new = x - tau * (H.apply_adjoint(u) + D.apply_adjoint(v))
        xbar = 2.0 * x_new - x
        u = (u + theta * (H.apply(xbar) - f)) / (1.0 + theta)
        v = clip(v + theta * D.apply(xbar), lam)
        x = x_new
        obj = float(objective(x)) if objective is not None else float("nan")
        trace.append(k, obj, 0.0, 0.0, 0, H.total_count, 0.0,
                     wall_ms=(time.perf_counter() - t0) * 1e3)
        if record_invariants:
            trace.iterates.append(x.copy())
    return MethodResult(trace, x, aux={"u": u, "v": v, "tau": tau, "theta": theta})


def condat_vu_run(H, f, D, lam, tau, theta, x0, y0, iters, norm_H=None, norm_D=None,
                  record_invariants=False, objective=None, flipped_dual_sign=False,
                  method="condat-vu"):
    """Forward-step primal-dual iteration on the data term.

        x <- x - tau*(Ht(H x - f) + Dt y)
        y <- clip(y + theta*D(2 x_new - x), lam)

    requiring 0 < tau < 2/||H||^2 and 0 < theta < (1/tau - ||H||^2/2)/||D||^2.
    ``flipped_dual_sign=True`` flips the dual transfer to
    x - tau*(Ht(H x - f) - Dt y); the default is the standard convergent form.
    """
    if norm_H is None:
        norm_H = estimate_spectral_norm(H)
    if norm_D is None:
        norm_D = estimate_spectral_norm(D)
    if not 0 < tau < 2.0 / norm_H ** 2:
        raise ValueError(f"tau must lie in (0, 2/||H||^2) = (0, {2.0 / norm_H ** 2:.6g}), "
                         f"got {tau}")
    theta_max = (1.0 / tau - norm_H ** 2 / 2.0) / max(norm_D ** 2, 1e-300)
    if not 0 < theta < theta_max:
        raise ValueError(f"theta must lie in (0, {theta_max:.6g}), got {theta}")

    f = np.asarray(f, dtype=float)
    x = np.array(x0, dtype=float)
    y = np.array(y0, dtype=float)
    dual_sign = -1.0 if flipped_dual_sign else 1.0
    trace = RunTrace(method=method, sigma=None)
    if record_invariants:
        trace.iterates = [x.copy()]

    for k in range(iters):
        t0 = time.perf_counter()
        grad = H.apply_adjoint(H.apply(x) - f)
        x_new = x - tau * (grad + dual_sign * D.apply_adjoint(y))
        y = clip(y + theta * D.apply(2.0 * x_new - x), lam)
        x = x_new
        obj = float(objective(x)) if objective is not None else float("nan")
        trace.append(k, obj, 0.0, 0.0, 0, H.total_count, 0.0,
                     wall_ms=(time.perf_counter() - t0) * 1e3)
        if record_invariants:
            trace.iterates.append(x.copy())
    return MethodResult(trace, x, aux={"y": y})


def _huber_forward(D, lam2, delta, x):
    if lam2 == 0.0:
        return np.zeros_like(x)
    return lam2 * D.apply_adjoint(huber_gradient(D.apply(x), delta))


def implicit_dy_run(H, f, D, lam1, lam2, delta, w0, iters, gamma=None, beta=None,
                    cg_tol=1e-8, cg_cap=None, record_invariants=False,
                    objective=None, method="implicit-dy"):
    """Three-operator splitting with the data resolvent solved to a fixed CG tolerance.

        x1 <- (I + gamma HtH)^{-1} (w + gamma Ht f)          [CG, warm start x1]
        x2 <- soft(2 x1 - w - gamma*lam2*Dt grad_huber(D x1), gamma*lam1)
        w  <- w + (x2 - x1)/(1 + alpha)

    with beta = 4*lam2 by default (floored when lam2 = 0), gamma = 1/beta, and
    alpha = gamma*beta/(4 - gamma*beta).
    """
    if beta is None:
        beta = max(4.0 * lam2, 1e-12)
    if gamma is None:
        gamma = 1.0 / beta
    params = DyParams(gamma=gamma, beta=beta)  # validates gamma in (0, 2/beta)
    alpha = params.alpha
    f = np.asarray(f, dtype=float)
    w = np.array(w0, dtype=float)
    cap = cg_cap if cg_cap is not None else 10 * w.size
    htf = H.apply_adjoint(f)
    x1 = w.copy()
    trace = RunTrace(method=method, sigma=None)
    if record_invariants:
        trace.iterates = [w.copy()]

    for k in range(iters):
        t0 = time.perf_counter()
        b = w + gamma * htf
        x1, it = _lsq_cg_step(H, htf, gamma, b, x1, cg_tol, cap)
        x2 = soft_threshold(2.0 * x1 - w - gamma * _huber_forward(D, lam2, delta, x1),
                            gamma * lam1)
        w = w + (x2 - x1) / (1.0 + alpha)
        obj = float(objective(x2)) if objective is not None else float("nan")
        trace.append(k, obj, 0.0, 0.0, it, H.total_count, 0.0,
                     wall_ms=(time.perf_counter() - t0) * 1e3)
        if record_invariants:
            trace.iterates.append(w.copy())
    return MethodResult(trace, x2 if iters else w, aux={"w": w, "x1": x1,
                                                        "gamma": gamma, "alpha": alpha})


def fb_run(H, f, D, lam1, lam2, delta, x0, iters, gamma=None, norm_H=None,
           record_invariants=False, objective=None, method="fb"):
    """Forward-backward iteration: full forward step, one soft threshold.

        x <- soft(x - gamma*(Ht(H x - f) + lam2*Dt grad_huber(D x)), gamma*lam1)

    with gamma = 1/(||H||^2 + 4*lam2) by default.
    """
    if gamma is None:
        if norm_H is None:
            norm_H = estimate_spectral_norm(H)
        gamma = 1.0 / (norm_H ** 2 + 4.0 * lam2)
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    f = np.asarray(f, dtype=float)
    x = np.array(x0, dtype=float)
    trace = RunTrace(method=method, sigma=None)
    if record_invariants:
        trace.iterates = [x.copy()]

    for k in range(iters):
        t0 = time.perf_counter()
        grad = H.apply_adjoint(H.apply(x) - f) + _huber_forward(D, lam2, delta, x)
        x = soft_threshold(x - gamma * grad, gamma * lam1)
        obj = float(objective(x)) if objective is not None else float("nan")
        trace.append(k, obj, 0.0, 0.0, 0, H.total_count, 0.0,
                     wall_ms=(time.perf_counter() - t0) * 1e3)
        if record_invariants:
            trace.iterates.append(x.copy())
    return MethodResult(trace, x, aux={"gamma": gamma})
