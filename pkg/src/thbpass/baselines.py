"""Reference schemes: sub-connected PASS, partially connected hybrid MIMO, grid search.

The two beamforming baselines reuse the FP block-ascent loop from
:mod:`thbpass.fp`.  Sub-connected PASS is that loop with the analog matrix
pinned to the identity; the MIMO baseline drops the position block and
restricts the analog matrix to a block-diagonal support.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .fp import AoResult, alternating_optimize, pinching_objective, shade_position_update
from .manifold import RcgConfig
from .model import SystemConfig, check_layout, effective_channel
from .shade import FeasibleBox, ShadeConfig, random_layouts

log = logging.getLogger(__name__)


def _gaussian(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def sc_pass_optimize(cfg: SystemConfig, users, shade_cfg: ShadeConfig | None = None,
                     max_outer: int = 20, rel_tol: float = 1e-4, seed=0, init_layout=None,
                     position_update: Callable | None = None) -> AoResult:
    """Sub-connected PASS: one RF chain per waveguide, fully digital ``M x K`` precoder.

    The analog factor stays the identity; digital and position blocks
    alternate as in the fully-connected optimizer.
    """
    rng = np.random.default_rng(seed)
    users = np.asarray(users, dtype=float)
    box = FeasibleBox.from_config(cfg)
    layout = random_layouts(box, 1, rng)[0] if init_layout is None else check_layout(init_layout, cfg)
    W_BB = _gaussian(rng, (cfg.M, cfg.K))
    if position_update is None:
        position_update = shade_position_update(users, cfg, shade_cfg)
    return alternating_optimize(cfg, lambda X: effective_channel(X, users, cfg),
                                np.eye(cfg.M, dtype=complex), W_BB, layout,
                                position_update=position_update, analog="fixed",
                                max_outer=max_outer, rel_tol=rel_tol, rng=rng)


# ---- partially connected massive MIMO ---------------------------------------------

@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array in the y-z plane (element spacing defaults to half a wavelength)."""

    center: tuple = (0.0, 5.0, 5.0)
    spacing: float | None = None


def array_positions(cfg: SystemConfig, geometry: ArrayGeometry = ArrayGeometry()) -> np.ndarray:
    """Antenna coordinates ``(M*N, 3)``; chain m drives antennas ``m*N ... m*N + N - 1``.

    Chain m occupies column m of the grid (offset along y); its N antennas
    are stacked along z.
    """
    M, N = cfg.M, cfg.N
    d = cfg.wavelength / 2 if geometry.spacing is None else geometry.spacing
    cx, cy, cz = geometry.center
    m, n = np.meshgrid(np.arange(M), np.arange(N), indexing="ij")
    y = cy + (m - (M - 1) / 2) * d
    z = cz + (n - (N - 1) / 2) * d
    return np.stack([np.full(M * N, cx), y.ravel(), z.ravel()], axis=1)


def mimo_channel(cfg: SystemConfig, users, geometry: ArrayGeometry = ArrayGeometry()) -> np.ndarray:
    """Free-space channel ``(M*N, K)`` from the planar array to the users."""
    pos = array_positions(cfg, geometry)
    users = np.asarray(users, dtype=float)
    D = np.linalg.norm(pos[:, None, :] - users[None, :, :], axis=-1)
    return cfg.eta * np.exp(2j * np.pi * D / cfg.wavelength) / D


def block_support(num_chains: int, per_chain: int) -> np.ndarray:
    """Boolean ``(num_chains*per_chain, num_chains)`` mask of a partially connected analog matrix."""
    return np.kron(np.eye(num_chains, dtype=bool), np.ones((per_chain, 1), dtype=bool))


def mimo_optimize(cfg: SystemConfig, users, rcg_cfg: RcgConfig | None = None,
                  max_outer: int = 20, rel_tol: float = 1e-4, seed=0,
                  geometry: ArrayGeometry = ArrayGeometry()) -> AoResult:
    """FP block ascent for a fixed ``MN``-element array fed by ``M`` RF chains."""
    rng = np.random.default_rng(seed)
    H = mimo_channel(cfg, users, geometry)
    mask = block_support(cfg.M, cfg.N)
    W_RF = np.where(mask, np.exp(2j * np.pi * rng.random(mask.shape)), 0)
    W_BB = _gaussian(rng, (cfg.M, cfg.K))
    return alternating_optimize(cfg, lambda X: H, W_RF, W_BB, None, position_update=None,
                                analog="rcg", rcg_cfg=rcg_cfg, mask=mask, max_outer=max_outer,
                                rel_tol=rel_tol, rng=rng)


# ---- PA-wise grid search ----------------------------------------------------------

@dataclass
class GridSearchResult:
    layout: np.ndarray
    value: float
    sweeps: int
    history: list


def grid_search_positions(cfg: SystemConfig, objective: Callable, grid_step: float = 5e-3,
                          initial=None, rng=None, max_sweeps: int = 100) -> GridSearchResult:
    """Cyclic coordinate ascent over PA positions on a uniform grid.

    Each PA in turn is moved to the best grid point of its feasible
    interval (the box, shrunk by the spacing to its neighbours on the same
    waveguide), others held fixed; sweeps repeat until no PA moves.
    ``objective`` maps a stack ``(B, N, M)`` of layouts to ``B`` values.
    """
    if not grid_step > 0:
        raise ValueError("grid_step must be positive")
    box = FeasibleBox.from_config(cfg)
    X = random_layouts(box, 1, rng)[0] if initial is None else check_layout(initial, cfg).copy()
    N, M = X.shape
    L, dd = cfg.waveguide_length, cfg.min_pa_spacing
    grid = np.arange(0.0, L + grid_step / 2, grid_step)
    value = float(np.asarray(objective(X[None]))[0])
    history = [value]
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        moved = False
        for m in range(M):
            for n in range(N):
                lo = X[n - 1, m] + dd if n > 0 else 0.0
                hi = X[n + 1, m] - dd if n < N - 1 else L
                cand = grid[(grid >= lo) & (grid <= hi)]
                if cand.size == 0:
                    continue
                stack = np.repeat(X[None], cand.size, axis=0)
                stack[:, n, m] = cand
                vals = np.asarray(objective(stack), dtype=float)
                vals = np.where(np.isfinite(vals), vals, -np.inf)
                best = int(np.argmax(vals))
                if vals[best] > value:
                    X[n, m] = cand[best]
                    value = float(vals[best])
                    moved = True
                    history.append(value)
        if not moved:
            break
    return GridSearchResult(layout=X, value=value, sweeps=sweeps, history=history)


def grid_position_update(users, cfg: SystemConfig, grid_step: float = 5e-3) -> Callable:
    """Position block for the FP loop backed by grid search on the pinching objective."""
    def update(layout, V, aux, rng):
        res = grid_search_positions(cfg, lambda X: pinching_objective(X, users, cfg, V, aux),
                                    grid_step, initial=layout)
        return res.layout

    return update
