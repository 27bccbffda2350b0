"""Riemannian conjugate gradient on the complex circle manifold.

The feasible set is the product of unit circles: every entry of the
analog matrix has modulus one.  The optimizer maximizes quadratic
objectives of the form

    f(W) = 2 Re Tr(A^H W) - Tr(W^H B W Q) + constant

which covers both the FP analog sub-problem and the least-squares
decomposition ``-||T - W V||_F^2``.  An optional boolean ``mask`` restricts
the unit-modulus constraint to a support pattern (entries off the support
are held at zero), as needed by partially connected architectures.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


def _inner(X, Y) -> float:
    """Real Frobenius inner product Re Tr(X^H Y)."""
    return float(np.real(np.vdot(X, Y)))


def _hermitian_psd(M) -> np.ndarray:
    M = np.asarray(M, dtype=complex)
    M = 0.5 * (M + M.conj().T)
    w, V = np.linalg.eigh(M)
    if w.min() >= 0:
        return M
    return (V * np.maximum(w, 0)) @ V.conj().T


@dataclass
class QuadraticObjective:
    """``2 Re Tr(A^H W) - Tr(W^H B W Q) + constant`` over unit-modulus ``W``.

    ``B`` and ``Q`` are symmetrized and floored to PSD on construction.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    constant: float = 0.0
    mode: str = "trace"

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=complex)
        self.B = _hermitian_psd(self.B)
        self.Q = _hermitian_psd(self.Q)
        if self.mode not in ("trace", "ls"):
            raise ValueError(f"unknown objective mode {self.mode!r}")

    @classmethod
    def least_squares(cls, target, W_BB) -> "QuadraticObjective":
        """Objective ``-||target - W @ W_BB||_F^2`` (maximizing it minimizes the residual)."""
        target = np.asarray(target, dtype=complex)
        W_BB = np.asarray(W_BB, dtype=complex)
        return cls(A=target @ W_BB.conj().T, B=np.eye(target.shape[0]),
                   Q=W_BB @ W_BB.conj().T, constant=-float(np.linalg.norm(target) ** 2),
                   mode="ls")

    def value(self, W) -> float:
        W = np.asarray(W)
        quad = np.real(np.vdot(W, self.B @ W @ self.Q))
        return float(2 * _inner(self.A, W) - quad + self.constant)

    def euclid_grad(self, W) -> np.ndarray:
        """Conjugate Wirtinger derivative ``A - B W Q``.

        The gradient with respect to (Re W, Im W) packed as a complex
        matrix is twice this; directions are unaffected.
        """
        return self.A - self.B @ np.asarray(W) @ self.Q


@dataclass
class RcgConfig:
    max_iters: int = 200
    grad_norm_tol: float = 1e-6
    armijo_contraction: float = 0.5
    armijo_slope_coeff: float = 1e-4
    initial_step: float = 1.0
    max_backtracks: int = 30

    def __post_init__(self):
        if self.max_iters < 0 or self.grad_norm_tol <= 0 or self.initial_step <= 0:
            raise ValueError("RcgConfig needs max_iters >= 0 and positive tolerances")
        if not 0 < self.armijo_contraction < 1:
            raise ValueError("armijo_contraction must lie in (0, 1)")
        if not 0 < self.armijo_slope_coeff < 1:
            raise ValueError("armijo_slope_coeff must lie in (0, 1)")


@dataclass
class RcgResult:
    W: np.ndarray
    value: float
    iterations: int
    grad_norm: float
    converged: bool
    history: list = field(default_factory=list)
    line_search_failures: int = 0


def on_manifold(W, mask=None, tol: float = 1e-12) -> bool:
    W = np.asarray(W)
    mag = np.abs(W)
    if mask is None:
        return bool(np.all(np.abs(mag - 1) <= tol))
    mask = np.asarray(mask, dtype=bool)
    return bool(np.all(np.abs(mag[mask] - 1) <= tol) and np.all(W[~mask] == 0))


def tangency_residual(Z, W) -> float:
    return float(np.max(np.abs(np.real(Z * np.conj(W))), initial=0.0))


def project_tangent(G, W, mask=None) -> np.ndarray:
    """Project ``G`` onto the tangent space at ``W``: ``G - Re{G * conj(W)} * W``."""
    G = np.asarray(G)
    W = np.asarray(W)
    Z = G - np.real(G * np.conj(W)) * W
    if mask is not None:
        Z = np.where(mask, Z, 0)
    return Z


def transport(D_prev, W_new, mask=None) -> np.ndarray:
    """Vector transport by re-projection onto the tangent space at ``W_new``."""
    return project_tangent(D_prev, W_new, mask)


def retract(W, step: float, D, mask=None) -> np.ndarray:
    """``exp(j arg(W + step * D))`` entrywise; exact zeros keep the phase of ``W``."""
    if step < 0:
        raise ValueError("retraction step must be non-negative")
    W = np.asarray(W, dtype=complex)
    Y = W + step * np.asarray(D)
    mag = np.abs(Y)
    out = np.where(mag > 0, Y / np.where(mag > 0, mag, 1), W)
    # renormalize the fallback entries too, then restore an exact unit modulus
    out = np.exp(1j * np.angle(out))
    if mask is not None:
        out = np.where(mask, out, 0)
    return out


def phase_project(X, mask=None) -> np.ndarray:
    """Entrywise projection onto the unit circle (zero maps to phase 0)."""
    out = np.exp(1j * np.angle(np.asarray(X, dtype=complex)))
    if mask is not None:
        out = np.where(mask, out, 0)
    return out


def _regularized_inverse(M, ridge: float) -> np.ndarray:
    n = M.shape[0]
    scale = max(float(np.real(np.trace(M))) / n, np.finfo(float).tiny)
    return np.linalg.inv(M + ridge * scale * np.eye(n))


def init_projected_stationary(obj: QuadraticObjective, rng=None, ridge: float = 1e-10,
                              mask=None) -> np.ndarray:
    """Project the unconstrained stationary point ``B^-1 A Q^-1`` onto the manifold.

    Singular ``B`` or ``Q`` get a Tikhonov ridge (relative to their mean
    eigenvalue).  If that still fails, random phases are drawn from ``rng``.
    """
    try:
        S = _regularized_inverse(obj.B, ridge) @ obj.A @ _regularized_inverse(obj.Q, ridge)
        if not np.all(np.isfinite(S)):
            raise np.linalg.LinAlgError("non-finite stationary point")
    except np.linalg.LinAlgError:
        rng = np.random.default_rng(rng)
        log.warning("stationary initialization failed; using random phases")
        S = np.exp(2j * np.pi * rng.random(obj.A.shape))
    return phase_project(S, mask)


def rcg_maximize(obj: QuadraticObjective, W0, cfg: RcgConfig | None = None,
                 mask=None) -> RcgResult:
    """Maximize ``obj`` over unit-modulus matrices by Riemannian conjugate gradient.

    Armijo backtracking guarantees a non-decreasing objective; the
    Polak-Ribiere coefficient is floored at zero, which restarts with the
    gradient direction whenever conjugacy is lost.
    """
    cfg = cfg or RcgConfig()
    W = phase_project(W0, mask)
    f = obj.value(W)
    g = project_tangent(obj.euclid_grad(W), W, mask)
    D = g.copy()
    history = [f]
    step_guess = cfg.initial_step
    failures = 0
    converged = False
    it = 0
    for it in range(cfg.max_iters):
        gnorm2 = _inner(g, g)
        if np.sqrt(gnorm2) <= cfg.grad_norm_tol:
            converged = True
            break
        slope = 2 * _inner(g, D)
        if slope <= 0:
            D = g.copy()
            slope = 2 * gnorm2
        t = step_guess
        accepted = False
        for _ in range(cfg.max_backtracks):
            W_new = retract(W, t, D, mask)
            f_new = obj.value(W_new)
            if f_new >= f + cfg.armijo_slope_coeff * t * slope:
                accepted = True
                break
            t *= cfg.armijo_contraction
        if not accepted:
            failures += 1
            W_new = retract(W, t, g, mask)
            f_new = obj.value(W_new)
            if not f_new > f:
                log.debug("line search stalled at iteration %d", it)
                break
        g_new = project_tangent(obj.euclid_grad(W_new), W_new, mask)
        rho = max(0.0, _inner(g_new, g_new - transport(g, W_new, mask)) / gnorm2)
        D = g_new + rho * transport(D, W_new, mask)
        W, f, g = W_new, f_new, g_new
        history.append(f)
        step_guess = 2 * t
    else:
        it = cfg.max_iters
    return RcgResult(W=W, value=f, iterations=it, grad_norm=float(np.sqrt(_inner(g, g))),
                     converged=converged, history=history, line_search_failures=failures)
