"""Low-complexity zero-forcing pipeline.

Pinching and channel are lumped into the effective channel ``G`` (M x K).
For a fixed layout the ZF precoder with water-filled powers gives a closed
form weighted sum rate, so the layout can be searched on that closed form
alone.  The resulting fully digital precoder is afterwards factorized into
unit-modulus analog and digital parts by alternating least squares.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .manifold import QuadraticObjective, RcgConfig, phase_project, rcg_maximize
from .model import BeamformerSet, ConfigError, SystemConfig, effective_channel, effective_gains
from .model import pinching_beamformer, sinr, wsr
from .shade import FeasibleBox, ShadeConfig, shade_maximize

log = logging.getLogger(__name__)

MAX_CONDITION = 1e12


class RankDeficientChannelError(ValueError):
    """The effective channel cannot be zero-forced (rank deficient or too ill-conditioned)."""


@dataclass
class ZfSolution:
    G: np.ndarray
    W: np.ndarray
    qualities: np.ndarray
    powers: np.ndarray
    active: np.ndarray
    water_level: float
    rate: float


def zf_beamformer(G, P: float) -> np.ndarray:
    """Pseudo-inverse precoder ``G (G^H G)^-1`` scaled to total power ``P``."""
    W0 = _zf_direction(np.asarray(G, dtype=complex))
    return W0 * np.sqrt(P) / np.linalg.norm(W0)


def _zf_direction(G) -> np.ndarray:
    M, K = G.shape
    if K > M:
        raise RankDeficientChannelError(f"cannot zero-force {K} users with {M} streams")
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise RankDeficientChannelError(f"effective channel condition number {cond:.3g}")
    return G @ np.linalg.inv(G.conj().T @ G)


def channel_qualities(G) -> np.ndarray:
    """Per-user post-ZF gains ``1 / [(G^H G)^-1]_kk``; works on stacks ``(..., M, K)``."""
    G = np.asarray(G, dtype=complex)
    gram = np.swapaxes(G.conj(), -1, -2) @ G
    inv = np.linalg.inv(gram)
    return 1.0 / np.real(np.diagonal(inv, axis1=-2, axis2=-1))


def water_filling(qualities, beta, sigma2, P: float):
    """Weighted water-filling ``p_k = (beta_k nu - sigma_k^2 / q_k)^+`` with sum ``P``.

    Active-set iteration: compute the water level over the active users,
    drop those whose power comes out non-positive and repeat until stable.
    Accepts a stack of quality vectors ``(..., K)``.

    Returns
    -------
    powers, active, nu
    """
    q = np.asarray(qualities, dtype=float)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), q.shape)
    floor = np.asarray(sigma2, dtype=float) / q
    active = np.ones(q.shape, dtype=bool)
    for _ in range(q.shape[-1]):
        nu = (P + np.sum(floor, axis=-1, where=active)) / np.sum(beta, axis=-1, where=active)
        p = beta * nu[..., None] - floor
        drop = active & (p <= 0)
        # the strongest user never drops, so the active set cannot empty
        if not np.any(drop):
            break
        active &= ~drop
    nu = (P + np.sum(floor, axis=-1, where=active)) / np.sum(beta, axis=-1, where=active)
    powers = np.where(active, beta * nu[..., None] - floor, 0.0)
    if np.ndim(nu) == 0:
        nu = float(nu)
    return powers, active, nu


def zf_rate(qualities, active, nu, beta, sigma2) -> np.ndarray:
    """Weighted sum rate ``sum_{active} beta_k log2(beta_k q_k nu / sigma_k^2)``."""
    q = np.asarray(qualities, dtype=float)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), q.shape)
    arg = beta * q * np.asarray(nu, dtype=float)[..., None] / np.asarray(sigma2, dtype=float)
    terms = np.where(active, beta * np.log2(np.where(active, arg, 1.0)), 0.0)
    return terms.sum(axis=-1)


def zf_solution(G, cfg: SystemConfig, power_loaded: bool = True) -> ZfSolution:
    """ZF precoder with water-filled powers for one effective channel.

    With ``power_loaded`` column k carries exactly ``p_k``; otherwise the
    raw pseudo-inverse is normalized globally to ``P``.
    """
    G = np.asarray(G, dtype=complex)
    W0 = _zf_direction(G)
    q = channel_qualities(G)
    p, active, nu = water_filling(q, cfg.beta, cfg.sigma2, cfg.transmit_power)
    if power_loaded:
        W = W0 * np.sqrt(p / np.sum(np.abs(W0) ** 2, axis=0))
    else:
        W = W0 * np.sqrt(cfg.transmit_power) / np.linalg.norm(W0)
    rate = float(zf_rate(q, active, nu, cfg.beta, cfg.sigma2))
    return ZfSolution(G=G, W=W, qualities=q, powers=p, active=active, water_level=nu, rate=rate)


def zf_wsr(layout, users, cfg: SystemConfig):
    """Closed-form ZF weighted sum rate of one layout ``(N, M)`` or a stack ``(B, N, M)``.

    Rank-deficient or badly conditioned layouts score ``-inf``.
    """
    X = np.asarray(layout, dtype=float)
    if cfg.K > cfg.M:
        raise ConfigError(f"zero forcing needs K <= M (K={cfg.K}, M={cfg.M})")
    gains = effective_gains(X, users, cfg)  # (..., K, M)
    G = np.swapaxes(gains.conj(), -1, -2)
    gram = gains @ G  # G^H G
    ev = np.linalg.eigvalsh(gram)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.sqrt(ev[..., -1] / ev[..., 0])
    cond = np.where(ev[..., 0] > 0, cond, np.inf)
    ok = np.isfinite(cond) & (cond <= MAX_CONDITION)
    safe = np.where(ok[..., None, None], gram, np.eye(cfg.K))
    q = 1.0 / np.real(np.diagonal(np.linalg.inv(safe), axis1=-2, axis2=-1))
    p, active, nu = water_filling(q, cfg.beta, cfg.sigma2, cfg.transmit_power)
    rate = np.where(ok, zf_rate(q, active, nu, cfg.beta, cfg.sigma2), -np.inf)
    return float(rate) if rate.ndim == 0 else rate


def zf_position_search(cfg: SystemConfig, users, shade_cfg: ShadeConfig | None = None,
                       initial=None, workers: int | None = None):
    """SHADE over layouts with the closed-form ZF rate as fitness."""
    shade_cfg = shade_cfg or ShadeConfig.for_layout(cfg.M * cfg.N)
    users = np.asarray(users, dtype=float)
    box = FeasibleBox.from_config(cfg)
    return shade_maximize(lambda X: zf_wsr(X, users, cfg), shade_cfg, box, initial=initial,
                          vectorized=True)


@dataclass
class Decomposition:
    W_RF: np.ndarray
    W_BB: np.ndarray
    residual: float
    rounds: int
    residual_history: list = field(default_factory=list)
    zero_power: bool = False


def _initial_analog(target, n_rf, rng):
    M, K = target.shape
    W = np.exp(2j * np.pi * rng.random((M, n_rf)))
    cols = min(n_rf, K)
    nz = target[:, :cols] != 0
    W[:, :cols] = np.where(nz, phase_project(target[:, :cols]), W[:, :cols])
    return W


def decompose(target, n_rf: int, rcg_cfg: RcgConfig | None = None, rel_tol: float = 1e-4,
              max_rounds: int = 50, power: float | None = None, rng=None) -> Decomposition:
    """Factor ``target`` (M x K) as ``W_RF @ W_BB`` with unit-modulus ``W_RF``.

    Alternates the least-squares digital factor ``pinv(W_RF) @ target`` and
    a Riemannian CG pass on the analog factor until the residual
    ``||target - W_RF W_BB||_F`` changes by less than ``rel_tol``
    (relative) or ``max_rounds`` is hit.  With ``power`` the digital factor
    is finally rescaled so that ``||W_RF W_BB||_F^2 = power``.
    """
    target = np.asarray(target, dtype=complex)
    M, K = target.shape
    if n_rf < K:
        warnings.warn(f"{n_rf} RF chains for {K} streams: the factorization is rank limited",
                      stacklevel=2)
    rng = np.random.default_rng(rng)
    W_RF = _initial_analog(target, n_rf, rng)
    if not np.any(target):
        return Decomposition(W_RF=W_RF, W_BB=np.zeros((n_rf, K), dtype=complex), residual=0.0,
                             rounds=0, residual_history=[0.0], zero_power=True)

    def resid(W_RF, W_BB):
        return float(np.linalg.norm(target - W_RF @ W_BB))

    history = []
    prev = np.inf
    rounds = 0
    W_BB = np.zeros((n_rf, K), dtype=complex)
    for rounds in range(1, max_rounds + 1):
        try:
            W_BB = np.linalg.pinv(W_RF) @ target
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"pseudo-inverse of the analog factor failed: {exc}")
        history.append(resid(W_RF, W_BB))
        obj = QuadraticObjective.least_squares(target, W_BB)
        res = rcg_maximize(obj, W_RF, rcg_cfg)
        if res.value >= obj.value(W_RF):
            W_RF = res.W
        r = resid(W_RF, W_BB)
        history.append(r)
        if r == 0 or abs(prev - r) <= rel_tol * prev:
            break
        prev = r
    W_BB = np.linalg.pinv(W_RF) @ target
    r = resid(W_RF, W_BB)
    if r <= history[-1]:
        history.append(r)
    zero = False
    if power is not None:
        norm = np.linalg.norm(W_RF @ W_BB)
        if norm > 0:
            W_BB = W_BB * (np.sqrt(power) / norm)
        else:
            zero = True
    return Decomposition(W_RF=W_RF, W_BB=W_BB, residual=history[-1], rounds=rounds,
                         residual_history=history, zero_power=zero)


@dataclass
class ZfResult:
    beamformers: BeamformerSet
    layout: np.ndarray
    ideal_wsr: float
    wsr: float
    residual: float
    solution: ZfSolution


def zf_pipeline(cfg: SystemConfig, users, shade_cfg: ShadeConfig | None = None,
                rcg_cfg: RcgConfig | None = None, power_loaded: bool = True, seed=0,
                workers: int | None = None) -> ZfResult:
    """Position search on the ZF rate, ZF precoding, then hybrid factorization.

    ``ideal_wsr`` is the closed-form rate of the fully digital ZF precoder;
    ``wsr`` is what the factorized analog/digital pair actually achieves.
    """
    if cfg.K > min(cfg.M, cfg.n_rf):
        raise ConfigError(f"ZF pipeline needs K <= min(M, N_RF); got K={cfg.K}, M={cfg.M}, "
                          f"N_RF={cfg.n_rf}")
    rng = np.random.default_rng(seed)
    shade_cfg = shade_cfg or ShadeConfig.for_layout(cfg.M * cfg.N)
    shade_cfg = ShadeConfig(**{**shade_cfg.__dict__, "seed": int(rng.integers(2 ** 32))})
    users = np.asarray(users, dtype=float)
    search = zf_position_search(cfg, users, shade_cfg, workers=workers)
    layout = search.layout
    G = effective_channel(layout, users, cfg)
    sol = zf_solution(G, cfg, power_loaded=power_loaded)
    dec = decompose(sol.W, cfg.n_rf, rcg_cfg, power=cfg.transmit_power, rng=rng)
    rate = wsr(sinr(G, dec.W_RF @ dec.W_BB, cfg.sigma2), cfg.beta)
    bf = BeamformerSet(W_BB=dec.W_BB, W_RF=dec.W_RF, W_PB=pinching_beamformer(layout, cfg),
                       meta={"zero_power": dec.zero_power, "rounds": dec.rounds})
    return ZfResult(beamformers=bf, layout=layout, ideal_wsr=sol.rate, wsr=rate,
                    residual=dec.residual, solution=sol)
