"""Fractional-programming alternating optimization of the tri-hybrid beamformer.

The power constraint is absorbed into the SINR (the noise term becomes
``sigma_k^2 / P * ||W_RF W_BB||_F^2``), which makes the objective
invariant to the scale of ``W_BB``.  Two auxiliary vectors then decouple
the sum-of-log-ratios: ``xi`` (SINR-valued, Lagrangian dual transform) and
``mu`` (quadratic transform).  Each block (digital, analog, PA positions)
is updated to increase the resulting surrogate ``f_t``; at the end the
digital beamformer is rescaled to meet the power budget exactly.

Most functions here take the *effective* channel ``G = W_PB^H H`` (one
column per user) instead of a layout: the digital and analog updates only
see the channel through it.  The same code therefore serves the
sub-connected and conventional hybrid MIMO baselines, where ``G`` is
simply a different matrix.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .manifold import (QuadraticObjective, RcgConfig, init_projected_stationary, phase_project,
                       rcg_maximize)
from .model import (BeamformerSet, SystemConfig, effective_channel, effective_gains,
                    pinching_beamformer, sinr, wsr)
from .shade import FeasibleBox, ShadeConfig, random_layouts, shade_maximize

log = logging.getLogger(__name__)


@dataclass
class AuxiliaryVars:
    xi: np.ndarray
    mu: np.ndarray


def ratio_weights(xi, beta) -> np.ndarray:
    """Diagonal of ``C``: ``sqrt(beta_k (1 + xi_k))``."""
    return np.sqrt(np.asarray(beta) * (1 + np.asarray(xi)))


def _link_gains(G, V):
    """``T[k, i] = g_k^H v_i``: user k's gain for stream i."""
    return G.conj().T @ V


def _noise_terms(V, cfg: SystemConfig) -> np.ndarray:
    return cfg.sigma2 / cfg.transmit_power * float(np.linalg.norm(V) ** 2)


def relaxed_sinr(G, V, cfg: SystemConfig) -> np.ndarray:
    """SINR with the power budget folded into the noise term; zero for ``V = 0``."""
    power = float(np.linalg.norm(V) ** 2)
    if power == 0:
        return np.zeros(cfg.K)
    T2 = np.abs(_link_gains(G, V)) ** 2
    signal = np.diag(T2)
    return signal / (T2.sum(axis=1) - signal + _noise_terms(V, cfg))


def p2_objective(G, W_RF, W_BB, cfg: SystemConfig) -> float:
    """Scale-invariant weighted sum rate of ``(W_RF, W_BB)`` on effective channel ``G``."""
    gamma = relaxed_sinr(G, W_RF @ W_BB, cfg)
    return float(np.sum(cfg.beta * np.log2(1 + gamma)))


def update_xi(G, W_RF, W_BB, cfg: SystemConfig) -> np.ndarray:
    return relaxed_sinr(G, W_RF @ W_BB, cfg)


def update_mu(G, W_RF, W_BB, xi, cfg: SystemConfig) -> np.ndarray:
    V = W_RF @ W_BB
    T = _link_gains(G, V)
    denom = np.sum(np.abs(T) ** 2, axis=1) + _noise_terms(V, cfg)
    return ratio_weights(xi, cfg.beta) * np.diag(T) / denom


def update_aux(G, W_RF, W_BB, cfg: SystemConfig) -> AuxiliaryVars:
    xi = update_xi(G, W_RF, W_BB, cfg)
    return AuxiliaryVars(xi=xi, mu=update_mu(G, W_RF, W_BB, xi, cfg))


def dual_constant(xi, beta) -> float:
    xi = np.asarray(xi)
    return float(np.sum(np.asarray(beta) * (np.log2(1 + xi) - xi)))


def dual_surrogate(G, V, xi, cfg: SystemConfig) -> float:
    """Lagrangian-dual form of the objective at auxiliary ``xi``."""
    T2 = np.abs(_link_gains(G, V)) ** 2
    ratio = np.diag(T2) / (T2.sum(axis=1) + _noise_terms(V, cfg))
    return dual_constant(xi, cfg.beta) + float(np.sum(cfg.beta * (1 + xi) * ratio))


def ft_value(G, V, aux: AuxiliaryVars, cfg: SystemConfig) -> float:
    """Quadratic-transform surrogate ``f_t`` at transmit matrix ``V = W_RF W_BB``."""
    T = _link_gains(G, V)
    c = ratio_weights(aux.xi, cfg.beta)
    linear = 2 * np.sum(c * np.real(np.conj(aux.mu) * np.diag(T)))
    quad = np.sum(np.abs(aux.mu) ** 2 * (np.sum(np.abs(T) ** 2, axis=1) + _noise_terms(V, cfg)))
    return dual_constant(aux.xi, cfg.beta) + float(linear - quad)


def _weighted_channel(G, aux, cfg):
    """``W_PB^H H~``: columns ``mu_k g_k``, plus the scalar noise load and ``C``."""
    Gt = G * aux.mu[None, :]
    load = float(np.sum(np.abs(aux.mu) ** 2 * cfg.sigma2) / cfg.transmit_power)
    return Gt, load, ratio_weights(aux.xi, cfg.beta)


def digital_system(G, W_RF, aux: AuxiliaryVars, cfg: SystemConfig):
    """``(A_BB, B_BB)`` of the concave quadratic digital sub-problem."""
    Gt, load, c = _weighted_channel(G, aux, cfg)
    A = W_RF.conj().T @ Gt * c[None, :]
    inner = Gt @ Gt.conj().T + load * np.eye(G.shape[0])
    B = W_RF.conj().T @ inner @ W_RF
    return A, 0.5 * (B + B.conj().T)


def digital_objective(W_BB, A, B) -> float:
    return float(2 * np.real(np.vdot(A, W_BB)) - np.real(np.vdot(W_BB, B @ W_BB)))


def digital_update(G, W_RF, aux: AuxiliaryVars, cfg: SystemConfig, W_BB_prev=None,
                   ridge: float = 1e-12) -> np.ndarray:
    """Closed-form maximizer ``B_BB^-1 A_BB`` of the digital sub-problem."""
    A, B = digital_system(G, W_RF, aux, cfg)
    n = B.shape[0]
    try:
        if np.linalg.cond(B) > 1 / np.finfo(float).eps:
            scale = max(float(np.real(np.trace(B))) / n, np.finfo(float).tiny)
            B = B + ridge * scale * np.eye(n)
        W = np.linalg.solve(B, A)
        if not np.all(np.isfinite(W)):
            raise np.linalg.LinAlgError("non-finite digital solution")
    except np.linalg.LinAlgError:
        if W_BB_prev is None:
            raise
        log.warning("singular digital system; keeping previous W_BB")
        return np.array(W_BB_prev, copy=True)
    return W


def analog_objective(G, W_BB, aux: AuxiliaryVars, cfg: SystemConfig) -> QuadraticObjective:
    """Analog sub-problem; its value equals ``f_t`` including the constant."""
    Gt, load, c = _weighted_channel(G, aux, cfg)
    A = Gt * c[None, :] @ W_BB.conj().T
    B = Gt @ Gt.conj().T + load * np.eye(G.shape[0])
    return QuadraticObjective(A=A, B=B, Q=W_BB @ W_BB.conj().T,
                              constant=dual_constant(aux.xi, cfg.beta))


def analog_update(G, W_RF, W_BB, aux: AuxiliaryVars, cfg: SystemConfig,
                  rcg_cfg: RcgConfig | None = None, mask=None, rng=None) -> np.ndarray:
    """Riemannian CG on the analog sub-problem; never returns a worse point than ``W_RF``.

    The search starts from the projected unconstrained stationary point,
    or from the incumbent when that is already better.
    """
    obj = analog_objective(G, W_BB, aux, cfg)
    start = init_projected_stationary(obj, rng=rng, mask=mask)
    incumbent = phase_project(W_RF, mask)
    f_in = obj.value(incumbent)
    if obj.value(start) < f_in:
        start = incumbent
    res = rcg_maximize(obj, start, rcg_cfg, mask=mask)
    if res.value < f_in:
        return incumbent
    return res.W


def pinching_objective(X, users, cfg: SystemConfig, V, aux: AuxiliaryVars) -> np.ndarray:
    """Position-dependent part of ``f_t``.

    ``X`` may be a single ``(N, M)`` layout (returns a float) or a stack
    ``(B, N, M)`` (returns ``B`` values).
    """
    gbar = effective_gains(X, users, cfg)                     # (..., K, M)
    T = (np.conj(aux.mu)[:, None] * gbar) @ V                 # (..., K, K)
    c = ratio_weights(aux.xi, cfg.beta)
    diag = np.diagonal(T, axis1=-2, axis2=-1)
    val = 2 * np.sum(c * np.real(diag), axis=-1) - np.sum(np.abs(T) ** 2, axis=(-2, -1))
    return float(val) if np.ndim(val) == 0 else val


def pinching_update(X, users, cfg: SystemConfig, V, aux: AuxiliaryVars,
                    shade_cfg: ShadeConfig | None = None, workers: int | None = None):
    """SHADE over layouts with the incumbent injected; returns ``(layout, f_X)``."""
    shade_cfg = shade_cfg or ShadeConfig.for_layout(cfg.M * cfg.N)
    box = FeasibleBox.from_config(cfg)

    def fitness(layouts):
        return pinching_objective(layouts, users, cfg, V, aux)

    res = shade_maximize(fitness, shade_cfg, box, initial=X, vectorized=True, workers=workers)
    f_in = pinching_objective(X, users, cfg, V, aux)
    if res.fitness < f_in:
        return np.array(X, copy=True), f_in
    return res.layout, res.fitness


# ---- the alternating loop -----------------------------------------------------------

class NonFiniteObjectiveError(FloatingPointError):
    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass
class AoResult:
    W_RF: np.ndarray
    W_BB: np.ndarray
    layout: np.ndarray | None
    trace: list
    iterations: int
    converged: bool
    wsr: float
    elapsed_ms: list = field(default_factory=list)
    block_values: list = field(default_factory=list)
    zero_power: bool = False

    def beamformers(self, cfg: SystemConfig | None = None) -> BeamformerSet:
        W_PB = None
        if cfg is not None and self.layout is not None:
            W_PB = pinching_beamformer(self.layout, cfg)
        return BeamformerSet(W_BB=self.W_BB, W_RF=self.W_RF, W_PB=W_PB)


def scale_to_power(W_RF, W_BB, P: float):
    """Rescale ``W_BB`` so that ``||W_RF W_BB||_F^2 = P``; zero stays zero."""
    norm = np.linalg.norm(W_RF @ W_BB)
    if norm == 0:
        return W_BB, True
    return W_BB * (np.sqrt(P) / norm), False


def alternating_optimize(cfg: SystemConfig, channel: Callable, W_RF, W_BB, layout=None, *,
                         position_update: Callable | None = None, analog: str = "rcg",
                         rcg_cfg: RcgConfig | None = None, mask=None, max_outer: int = 20,
                         rel_tol: float = 1e-4, rng=None) -> AoResult:
    """Generic FP block-ascent loop.

    Parameters
    ----------
    channel : callable
        ``channel(layout) -> G`` (effective channel, one column per user).
    position_update : callable, optional
        ``position_update(layout, V, aux, rng) -> layout``; skipped when None.
    analog : {"rcg", "fixed"}
        Whether the analog matrix is optimized or held fixed.
    """
    rng = np.random.default_rng(rng)
    W_RF = np.array(W_RF, dtype=complex)
    W_BB = np.array(W_BB, dtype=complex)
    G = channel(layout)
    trace = [p2_objective(G, W_RF, W_BB, cfg)]
    elapsed = [0.0]
    blocks = []
    converged = False
    t0 = time.perf_counter()
    it = 0
    for it in range(1, max_outer + 1):
        aux = update_aux(G, W_RF, W_BB, cfg)
        vals = {"aux": ft_value(G, W_RF @ W_BB, aux, cfg)}
        W_BB = digital_update(G, W_RF, aux, cfg, W_BB_prev=W_BB)
        vals["digital"] = ft_value(G, W_RF @ W_BB, aux, cfg)
        if analog == "rcg":
            W_RF = analog_update(G, W_RF, W_BB, aux, cfg, rcg_cfg, mask=mask, rng=rng)
            vals["analog"] = ft_value(G, W_RF @ W_BB, aux, cfg)
        if position_update is not None:
            layout = position_update(layout, W_RF @ W_BB, aux, rng)
            G = channel(layout)
            vals["position"] = ft_value(G, W_RF @ W_BB, aux, cfg)
        blocks.append(vals)
        value = p2_objective(G, W_RF, W_BB, cfg)
        if not np.isfinite(value):
            raise NonFiniteObjectiveError(
                f"non-finite objective at outer iteration {it}",
                {"W_RF": W_RF, "W_BB": W_BB, "layout": layout, "aux": aux, "trace": trace})
        trace.append(value)
        elapsed.append((time.perf_counter() - t0) * 1e3)
        prev = trace[-2]
        if abs(value - prev) <= rel_tol * max(abs(prev), np.finfo(float).tiny):
            converged = True
            break
    W_BB, zero = scale_to_power(W_RF, W_BB, cfg.transmit_power)
    rate = wsr(sinr(G, W_RF @ W_BB, cfg.sigma2), cfg.beta)
    return AoResult(W_RF=W_RF, W_BB=W_BB, layout=layout, trace=trace, iterations=it,
                    converged=converged, wsr=rate, elapsed_ms=elapsed, block_values=blocks,
                    zero_power=zero)


def random_init(cfg: SystemConfig, rng, n_rf: int | None = None):
    """Random feasible layout, Gaussian digital and random-phase analog beamformers."""
    rng = np.random.default_rng(rng)
    n_rf = cfg.n_rf if n_rf is None else n_rf
    layout = random_layouts(FeasibleBox.from_config(cfg), 1, rng)[0]
    W_BB = (rng.standard_normal((n_rf, cfg.K)) + 1j * rng.standard_normal((n_rf, cfg.K))) / np.sqrt(2)
    W_RF = np.exp(2j * np.pi * rng.random((cfg.M, n_rf)))
    return layout, W_RF, W_BB


def shade_position_update(users, cfg: SystemConfig, shade_cfg: ShadeConfig | None = None,
                          workers: int | None = None) -> Callable:
    """Position block backed by SHADE; each call draws a fresh seed from the loop's rng."""
    base = shade_cfg or ShadeConfig.for_layout(cfg.M * cfg.N)

    def update(layout, V, aux, rng):
        local = ShadeConfig(**{**base.__dict__, "seed": int(rng.integers(2 ** 32))})
        new_layout, _ = pinching_update(layout, users, cfg, V, aux, local, workers=workers)
        return new_layout

    return update


def fp_optimize(cfg: SystemConfig, users, shade_cfg: ShadeConfig | None = None,
                rcg_cfg: RcgConfig | None = None, max_outer: int = 20, rel_tol: float = 1e-4,
                seed=0, init=None, position_update: Callable | None = None,
                workers: int | None = None) -> AoResult:
    """Joint digital / analog / position optimization of the FC tri-hybrid system.

    ``init`` is an optional ``(layout, W_RF, W_BB)`` triple; by default a
    random start is drawn from ``seed``.  ``position_update`` replaces the
    SHADE position block (e.g. with PA-wise grid search).
    """
    rng = np.random.default_rng(seed)
    if init is None:
        init = random_init(cfg, rng)
    layout, W_RF, W_BB = init
    users = np.asarray(users, dtype=float)
    if position_update is None:
        position_update = shade_position_update(users, cfg, shade_cfg, workers)

    def channel(X):
        return effective_channel(X, users, cfg)

    return alternating_optimize(cfg, channel, W_RF, W_BB, layout,
                                position_update=position_update, analog="rcg",
                                rcg_cfg=rcg_cfg, max_outer=max_outer, rel_tol=rel_tol, rng=rng)
