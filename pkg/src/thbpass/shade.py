"""Success-history based adaptive differential evolution over PA layouts.

A candidate is an ``(N, M)`` layout: column ``m`` lists the PA positions
on waveguide ``m``.  Feasibility means ``0 <= x <= L`` and consecutive
positions in a column at least ``spacing`` apart.  Populations are kept as
``(P, N, M)`` arrays so one generation is a handful of vectorized numpy
operations; the per-generation bookkeeping (selection, archive, memory)
runs in fixed candidate order, which keeps runs seed-deterministic.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ShadeConfig:
    population_size: int = 80
    pbest_fraction: float = 0.2
    max_generations: int = 100
    memory_size: int = 10
    seed: int | None = 0
    f_scale: float = 0.1
    cr_scale: float = 0.1
    use_jrand: bool = False

    def __post_init__(self):
        if self.population_size < 4:
            raise ValueError("population_size must be at least 4")
        if not 0 < self.pbest_fraction <= 1:
            raise ValueError("pbest_fraction must lie in (0, 1]")
        if self.memory_size < 1 or self.max_generations < 0:
            raise ValueError("memory_size must be >= 1 and max_generations >= 0")

    @classmethod
    def for_layout(cls, num_pas: int, **overrides) -> "ShadeConfig":
        """Evaluation-setup defaults: population of five per PA."""
        overrides.setdefault("population_size", max(4, 5 * num_pas))
        return cls(**overrides)


@dataclass(frozen=True)
class FeasibleBox:
    """Box ``[0, length]`` per coordinate plus a minimum spacing within each column."""

    length: float
    spacing: float
    shape: tuple

    def __post_init__(self):
        N = self.shape[0]
        if not (self.length > 0 and 0 < self.spacing and N * self.spacing <= self.length):
            raise ValueError(
                f"empty feasible set: {N} PAs with spacing {self.spacing} on length {self.length}")

    @classmethod
    def from_config(cls, cfg) -> "FeasibleBox":
        return cls(cfg.waveguide_length, cfg.min_pa_spacing, (cfg.N, cfg.M))

    def upper_bounds(self) -> np.ndarray:
        """Largest feasible value of each PA index, built so that forward passes stay below it."""
        N = self.shape[0]
        u = np.empty(N)
        u[-1] = self.length
        for n in range(N - 2, -1, -1):
            u[n] = u[n + 1] - self.spacing
            while u[n] + self.spacing > u[n + 1]:
                u[n] = np.nextafter(u[n], -np.inf)
        return u

    def contains(self, X) -> bool:
        X = np.asarray(X, dtype=float)
        if X.shape[-2:] != tuple(self.shape) or not np.all(np.isfinite(X)):
            return False
        if np.any(X < 0) or np.any(X > self.length):
            return False
        return bool(np.all(X[..., 1:, :] >= X[..., :-1, :] + self.spacing))


@dataclass
class ShadeState:
    population: np.ndarray
    fitness: np.ndarray
    memory_f: np.ndarray
    memory_cr: np.ndarray
    archive: np.ndarray
    write_index: int = 0
    generation: int = 0


@dataclass
class ShadeResult:
    layout: np.ndarray
    fitness: float
    state: ShadeState
    best_history: list = field(default_factory=list)
    evaluations: int = 0


def _forward_pass(X, spacing):
    for n in range(1, X.shape[-2]):
        X[..., n, :] = np.maximum(X[..., n, :], X[..., n - 1, :] + spacing)


def repair(candidate, box: FeasibleBox) -> np.ndarray:
    """Map any real ``(..., N, M)`` array onto the feasible set.

    Per column: sort, push forward to enforce spacing, pull back from the
    upper end if needed, clamp the first PA at zero and push forward
    again.  Feasible inputs come back unchanged.
    """
    X = np.nan_to_num(np.asarray(candidate, dtype=float), nan=0.0, posinf=box.length,
                      neginf=0.0)
    X = np.sort(X, axis=-2)
    _forward_pass(X, box.spacing)
    upper = box.upper_bounds()[:, None]
    if np.any(X > upper):
        X = np.minimum(X, upper)
    if np.any(X[..., 0, :] < 0):
        X[..., 0, :] = np.maximum(X[..., 0, :], 0.0)
        _forward_pass(X, box.spacing)
    return X


def random_layouts(box: FeasibleBox, count: int, rng) -> np.ndarray:
    """``count`` feasible layouts: sorted uniform draws, then spacing repair."""
    rng = np.random.default_rng(rng)
    raw = rng.uniform(0.0, box.length, size=(count, *box.shape))
    return repair(raw, box)


def init_population(cfg: ShadeConfig, box: FeasibleBox, rng, initial=None) -> ShadeState:
    """Random feasible population, memories at 0.5, empty archive.

    ``initial`` (an incumbent layout) replaces the first member when given.
    """
    pop = random_layouts(box, cfg.population_size, rng)
    if initial is not None:
        pop[0] = repair(initial, box)
    H = cfg.memory_size
    return ShadeState(population=pop, fitness=np.full(cfg.population_size, -np.inf),
                      memory_f=np.full(H, 0.5), memory_cr=np.full(H, 0.5),
                      archive=np.empty((0, *box.shape)))


def sample_parameters(mu_f, mu_cr, rng, f_scale: float = 0.1, cr_scale: float = 0.1):
    """Draw scale factors F ~ Cauchy(mu_f, f_scale) and rates CR ~ Normal(mu_cr, cr_scale).

    Non-positive F are redrawn and F is capped at 1; CR is clipped to [0, 1].
    Scalars in give scalars out; arrays are sampled elementwise.
    """
    mu_f = np.asarray(mu_f, dtype=float)
    mu_cr = np.asarray(mu_cr, dtype=float)
    shape = np.broadcast(mu_f, mu_cr).shape
    mu_f = np.broadcast_to(mu_f, shape)
    F = mu_f + f_scale * rng.standard_cauchy(shape)
    bad = F <= 0
    while np.any(bad):
        F = np.where(bad, mu_f + f_scale * rng.standard_cauchy(shape), F)
        bad = F <= 0
    F = np.minimum(F, 1.0)
    CR = np.clip(mu_cr + cr_scale * rng.standard_normal(shape), 0.0, 1.0)
    if shape == ():
        return float(F), float(CR)
    return F, CR


def mutate(X_i, X_pbest, X_r1, X_r2, F):
    """current-to-pbest/1 mutant ``X_i + F (X_pbest - X_i) + F (X_r1 - X_r2)``."""
    return X_i + F * (X_pbest - X_i) + F * (X_r1 - X_r2)


def crossover(V, X, CR, rng, use_jrand: bool = False):
    """Binomial crossover: take the mutant coordinate when ``U(0,1) < CR``.

    With ``use_jrand`` one random coordinate per candidate always comes
    from the mutant (classical DE); off by default.
    """
    V = np.asarray(V, dtype=float)
    X = np.asarray(X, dtype=float)
    take = rng.random(V.shape) < CR
    if use_jrand:
        flat = take.reshape(take.shape[:-2] + (-1,))
        idx = rng.integers(flat.shape[-1], size=flat.shape[:-1])
        np.put_along_axis(flat, np.asarray(idx)[..., None], True, axis=-1)
        take = flat.reshape(V.shape)
    return np.where(take, V, X)


def update_memory(state: ShadeState, F, CR, improvement) -> ShadeState:
    """Write the improvement-weighted Lehmer mean of F and mean of CR into the next slot."""
    F = np.asarray(F, dtype=float)
    CR = np.asarray(CR, dtype=float)
    df = np.asarray(improvement, dtype=float)
    if F.size == 0:
        return state
    if np.any(np.isinf(df)):
        w = np.isinf(df).astype(float)
    else:
        w = df
    if not w.sum() > 0:
        w = np.ones_like(F)
    w = w / w.sum()
    slot = state.generation % len(state.memory_f)
    state.memory_f[slot] = np.sum(w * F ** 2) / np.sum(w * F)
    state.memory_cr[slot] = np.sum(w * CR)
    state.write_index = slot
    return state


def _evaluate(fitness, layouts, vectorized, workers):
    if vectorized:
        values = np.asarray(fitness(layouts), dtype=float).reshape(len(layouts))
    elif workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = np.array(list(pool.map(fitness, layouts)), dtype=float)
    else:
        values = np.array([fitness(x) for x in layouts], dtype=float)
    return np.where(np.isfinite(values), values, -np.inf)


def shade_maximize(fitness: Callable, cfg: ShadeConfig, box: FeasibleBox, initial=None,
                   vectorized: bool = False, workers: int | None = None,
                   callback: Callable | None = None) -> ShadeResult:
    """Maximize ``fitness`` over feasible layouts.

    Parameters
    ----------
    fitness : callable
        Maps one ``(N, M)`` layout to a real, or with ``vectorized=True`` a
        ``(B, N, M)`` stack to ``B`` reals.  Non-finite values lose every
        comparison.
    initial : array, optional
        Incumbent layout injected into the initial population.
    workers : int, optional
        Thread count for scalar fitness evaluation.  Results are gathered
        in candidate order, so the trajectory does not depend on it.
    callback : callable, optional
        Called as ``callback(generation, trials, state)`` after each
        generation's selection.
    """
    rng = np.random.default_rng(cfg.seed)
    state = init_population(cfg, box, rng, initial=initial)
    state.fitness = _evaluate(fitness, state.population, vectorized, workers)
    evaluations = len(state.population)
    P = cfg.population_size
    n_top = max(1, int(round(cfg.pbest_fraction * P)))
    best_history = [float(state.fitness.max())]
    idx = np.arange(P)

    for g in range(1, cfg.max_generations + 1):
        pop, fit = state.population, state.fitness
        slots = rng.integers(cfg.memory_size, size=P)
        F, CR = sample_parameters(state.memory_f[slots], state.memory_cr[slots], rng,
                                  cfg.f_scale, cfg.cr_scale)
        order = np.argsort(-fit, kind="stable")
        pbest = order[rng.integers(n_top, size=P)]
        r1 = rng.integers(P - 1, size=P)
        r1 += r1 >= idx
        union = np.concatenate([pop, state.archive]) if len(state.archive) else pop
        lo, hi = np.minimum(idx, r1), np.maximum(idx, r1)
        r2 = rng.integers(len(union) - 2, size=P)
        r2 += r2 >= lo
        r2 += r2 >= hi

        Fb = F[:, None, None]
        V = mutate(pop, pop[pbest], pop[r1], union[r2], Fb)
        U = repair(crossover(V, pop, CR[:, None, None], rng, cfg.use_jrand), box)
        f_trial = _evaluate(fitness, U, vectorized, workers)
        evaluations += P

        win = f_trial > fit
        if np.any(win):
            replaced = pop[win].copy()
            improvement = f_trial[win] - fit[win]
            new_pop = pop.copy()
            new_pop[win] = U[win]
            new_fit = fit.copy()
            new_fit[win] = f_trial[win]
            state.population, state.fitness = new_pop, new_fit
            state.archive = np.concatenate([state.archive, replaced])
            state.generation = g
            update_memory(state, F[win], CR[win], improvement)
        if len(state.archive) > P:
            keep = np.sort(rng.choice(len(state.archive), size=P, replace=False))
            state.archive = state.archive[keep]
        state.generation = g
        best_history.append(float(state.fitness.max()))
        if callback is not None:
            callback(g, U, state)

    best = int(np.argmax(state.fitness))
    return ShadeResult(layout=state.population[best].copy(), fitness=float(state.fitness[best]),
                       state=state, best_history=best_history, evaluations=evaluations)
