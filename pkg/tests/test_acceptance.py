"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale trend checks share one set of paired runs (20 seeds,
M = N = 4, K = 2) computed once per module.  Run with ``-s`` to see the
lines inline; they are also collected in the terminal summary.
"""
import itertools
import json

import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import crandn, random_scenario
from thbpass.baselines import mimo_optimize, sc_pass_optimize
from thbpass.cli import main
from thbpass.fp import (AuxiliaryVars, digital_objective, digital_system, digital_update,
                        dual_surrogate, fp_optimize, ft_value, p2_objective, random_init,
                        scale_to_power, update_mu, update_xi)
from thbpass.harness import (grid_vs_shade, landscape_objective, landscape_scan, sample_users,
                             toy_config)
from thbpass.manifold import (QuadraticObjective, project_tangent, rcg_maximize, retract,
                              tangency_residual, transport)
from thbpass.model import (SystemConfig, config_energy_efficiency, effective_channel,
                           energy_efficiency, is_feasible, sinr, wsr)
from thbpass.shade import FeasibleBox, ShadeConfig, shade_maximize
from thbpass.zf import water_filling, zf_beamformer, zf_pipeline

SEEDS = range(20)
DESK = SystemConfig()


def algo_seed(seed):
    return [seed, 1]


@pytest.fixture(scope="module")
def desk_runs():
    """Paired runs per seed: FP at N_RF = 1..4, SC-PASS, massive MIMO and the ZF pipeline."""
    out = {"fp": {n: [] for n in (1, 2, 3, 4)}, "sc": [], "mimo": [], "zf": []}
    for seed in SEEDS:
        users = sample_users(DESK, seed)
        for n in out["fp"]:
            out["fp"][n].append(fp_optimize(DESK.with_(num_rf_chains=n), users,
                                            max_outer=20, rel_tol=1e-4, seed=algo_seed(seed)))
        out["sc"].append(sc_pass_optimize(DESK, users, seed=algo_seed(seed)))
        out["mimo"].append(mimo_optimize(DESK, users, seed=algo_seed(seed)))
        out["zf"].append(zf_pipeline(DESK, users, seed=algo_seed(seed)))
    return out


def random_state(rng, cfg=DESK):
    users, _ = random_scenario(cfg, rng)
    layout, W_RF, W_BB = random_init(cfg, rng)
    return effective_channel(layout, users, cfg), W_RF, W_BB


# ---- 1, 2: FP convergence behaviour --------------------------------------------------

@pytest.mark.slow
def test_criterion_01_monotone_and_fast_convergence(desk_runs, acceptance):
    runs = desk_runs["fp"][2]
    smallest_step = min(float(np.min(np.diff(r.trace))) for r in runs)
    iters = [r.iterations if r.converged else np.inf for r in runs]
    monotone = smallest_step >= -1e-8
    fast = all(i <= 10 for i in iters)
    ok = acceptance(1, monotone and fast,
                    f"smallest per-iteration change {smallest_step:+.2e} (>= -1e-8: {monotone}); "
                    f"iterations to rel_tol 1e-4 = {sorted(iters)} (all <= 10: {fast})")
    assert ok


@pytest.mark.slow
def test_criterion_02_first_iteration_gain(desk_runs, acceptance):
    ratios = [r.trace[1] / r.trace[-1] for r in desk_runs["fp"][2]]
    med = float(np.median(ratios))
    assert acceptance(2, med >= 0.90, f"median first-iteration / final ratio {med:.3f} (>= 0.90)")


# ---- 3, 4: FP identities -------------------------------------------------------------

def test_criterion_03_scaled_rate_equivalence(acceptance):
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(100):
        G, W_RF, W_BB = random_state(rng)
        W_s, _ = scale_to_power(W_RF, W_BB, DESK.transmit_power)
        direct = wsr(sinr(G, W_RF @ W_s, DESK.sigma2), DESK.beta)
        worst = max(worst, abs(p2_objective(G, W_RF, W_BB, DESK) - direct) / abs(direct))
    assert acceptance(3, worst <= 1e-9, f"max relative gap over 100 states {worst:.2e} (<= 1e-9)")


def test_criterion_04_fp_identities(acceptance):
    rng = np.random.default_rng(404)
    gap_xi = gap_mu = 0.0
    for _ in range(20):
        G, W_RF, W_BB = random_state(rng)
        V = W_RF @ W_BB
        rate = p2_objective(G, W_RF, W_BB, DESK)
        xi = update_xi(G, W_RF, W_BB, DESK)
        surrogate = dual_surrogate(G, V, xi, DESK)
        gap_xi = max(gap_xi, abs(surrogate - rate) / abs(rate))
        aux = AuxiliaryVars(xi=xi, mu=update_mu(G, W_RF, W_BB, xi, DESK))
        gap_mu = max(gap_mu, abs(ft_value(G, V, aux, DESK) - surrogate) / abs(surrogate))
    ok = gap_xi <= 1e-9 and gap_mu <= 1e-9
    assert acceptance(4, ok, f"dual surrogate vs rate {gap_xi:.2e}; f_t vs surrogate {gap_mu:.2e}"
                             " (both <= 1e-9)")


# ---- 5, 6: manifold suite and digital closed form ------------------------------------

def test_criterion_05_manifold_suite(acceptance):
    rng = np.random.default_rng(505)
    modulus = tangency = fd_gap = 0.0
    monotone = True
    for _ in range(20):
        M, R = 5, 3
        A = crandn(rng, M, R)
        Bh, Qh = crandn(rng, M, M), crandn(rng, R, R)
        obj = QuadraticObjective(A=A, B=Bh @ Bh.conj().T, Q=Qh @ Qh.conj().T)
        W = np.exp(2j * np.pi * rng.random((M, R)))
        Z = project_tangent(crandn(rng, M, R), W)
        tangency = max(tangency, tangency_residual(Z, W))
        W2 = retract(W, float(rng.uniform(0, 5)), Z)
        modulus = max(modulus, float(np.max(np.abs(np.abs(W2) - 1))))
        tangency = max(tangency, tangency_residual(transport(Z, W2), W2))
        res = rcg_maximize(obj, W)
        modulus = max(modulus, float(np.max(np.abs(np.abs(res.W) - 1))))
        monotone &= bool(np.all(np.diff(res.history) >= -1e-12 * abs(res.history[0])))
        # central differences on the real and imaginary parts
        P = crandn(rng, M, R)
        h = 1e-6
        fd = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            E = np.zeros_like(P)
            E[idx] = h
            fd[idx] = ((obj.value(P + E) - obj.value(P - E))
                       + 1j * (obj.value(P + 1j * E) - obj.value(P - 1j * E))) / (2 * h)
        g = 2 * obj.euclid_grad(P)
        fd_gap = max(fd_gap, float(np.linalg.norm(fd - g) / np.linalg.norm(g)))
    ok = modulus <= 1e-12 and tangency <= 1e-10 and monotone and fd_gap <= 1e-5
    assert acceptance(5, ok, f"modulus dev {modulus:.1e}, tangency {tangency:.1e}, "
                             f"RCG monotone {monotone}, gradient vs FD {fd_gap:.1e}")


def test_criterion_06_digital_closed_form(acceptance):
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(10):
        G, W_RF, W_BB = random_state(rng)
        xi = update_xi(G, W_RF, W_BB, DESK)
        aux = AuxiliaryVars(xi=xi, mu=update_mu(G, W_RF, W_BB, xi, DESK))
        A, B = digital_system(G, W_RF, aux, DESK)
        W = digital_update(G, W_RF, aux, DESK)
        n = W.size

        def neg(z):
            Wz = (z[:n] + 1j * z[n:]).reshape(W.shape)
            return -digital_objective(Wz, A, B)

        res = minimize(neg, np.zeros(2 * n), method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 200000,
                                "maxfev": 200000, "adaptive": True})
        res = minimize(neg, res.x, method="BFGS", options={"gtol": 1e-12})
        worst = max(worst, abs(-res.fun - digital_objective(W, A, B)))
    assert acceptance(6, worst <= 1e-6,
                      f"objective gap to the numerical optimum, worst over 10 instances {worst:.2e}")


# ---- 7: ZF suite ---------------------------------------------------------------------

def test_criterion_07_zf_suite(acceptance):
    rng = np.random.default_rng(707)
    leak = 0.0
    for _ in range(50):
        G = crandn(rng, 4, 3)
        if np.linalg.cond(G) > 1e3:
            continue
        T = np.abs(G.conj().T @ zf_beamformer(G, 1.0)) ** 2
        leak = max(leak, float(np.max((T - np.diag(np.diag(T))) / np.diag(T)[None, :])))
    kkt = True
    sum_gap = 0.0
    for _ in range(200):
        K = int(rng.integers(1, 6))
        q, beta, s2 = 10 ** rng.uniform(-2, 2, K), rng.dirichlet(np.ones(K)), np.ones(K)
        p, active, nu = water_filling(q, beta, s2, 1.0)
        sum_gap = max(sum_gap, abs(p.sum() - 1.0))
        level = beta * nu - s2 / q
        kkt &= bool(np.all(p >= 0) and np.allclose(p[active], level[active])
                    and np.all(level[~active] <= 1e-12))
    brute_gap = 0.0
    for K in (1, 2, 3):
        steps = 1000
        combos = np.zeros((1, 0), dtype=int)
        if K > 1:
            combos = np.array([c for c in itertools.product(range(steps + 1), repeat=K - 1)
                               if sum(c) <= steps])
        frac = np.column_stack([combos, steps - combos.sum(axis=1)]) / steps
        for _ in range(5):
            q, beta = 10 ** rng.uniform(-1, 1, K), rng.dirichlet(np.ones(K))
            p, _, _ = water_filling(q, beta, np.ones(K), 2.0)
            rates = np.sum(beta * np.log2(1 + 2.0 * frac * q), axis=1)
            ours = np.sum(beta * np.log2(1 + p * q))
            brute_gap = max(brute_gap, abs(ours - rates.max()))
    ok = leak <= 1e-10 and sum_gap <= 1e-12 and kkt and brute_gap <= 1e-3
    assert acceptance(7, ok, f"interference {leak:.1e}, power sum {sum_gap:.1e}, KKT {kkt}, "
                             f"brute force gap {brute_gap:.1e}")


# ---- 8: SHADE suite ------------------------------------------------------------------

def test_criterion_08_shade_suite(acceptance):
    cfg = DESK
    box = FeasibleBox.from_config(cfg)
    target = np.random.default_rng(808).uniform(0, cfg.waveguide_length, box.shape)
    feasible = True

    def check(g, trials, state):
        nonlocal feasible
        feasible &= all(is_feasible(x, cfg) for x in trials)
        feasible &= all(is_feasible(x, cfg) for x in state.population)

    res = shade_maximize(lambda X: -np.sum((X - target) ** 2), ShadeConfig(seed=8), box,
                         callback=check)
    monotone = bool(np.all(np.diff(res.best_history) >= 0))

    line = FeasibleBox(length=10.0, spacing=1.0, shape=(1, 1))
    concave = shade_maximize(lambda X: -(X[0, 0] - 3.0) ** 2,
                             ShadeConfig(population_size=20, max_generations=50, seed=0), line)
    err = abs(concave.layout[0, 0] - 3.0)

    toy = toy_config()
    toy_ok = []
    for seed in range(5):
        users = sample_users(toy, seed)
        fn = landscape_objective(toy, users, "pinching", seed=seed)
        best_grid = float(landscape_scan(toy, users, 5e-3, objective=fn).values.max())
        found = shade_maximize(fn, ShadeConfig(population_size=100, max_generations=300,
                                               seed=seed), FeasibleBox.from_config(toy),
                               vectorized=True).fitness
        toy_ok.append(found >= best_grid - 0.01 * abs(best_grid))
    ok = feasible and monotone and err <= 0.01 and all(toy_ok)
    assert acceptance(8, ok, f"feasible {feasible}, monotone {monotone}, 1-D error {err:.1e} m, "
                             f"toy within 1% of grid {sum(toy_ok)}/5")


# ---- 9, 10, 11: trend checks ---------------------------------------------------------

@pytest.mark.slow
def test_criterion_09_method_ordering(desk_runs, acceptance):
    fp = {n: float(np.mean([r.wsr for r in runs])) for n, runs in desk_runs["fp"].items()}
    zf = float(np.mean([r.wsr for r in desk_runs["zf"]]))
    ordered = fp[2] >= zf
    nondecreasing = all(fp[a] <= fp[b] for a, b in zip((1, 2, 3), (2, 3, 4)))
    detail = (f"FP {fp[2]:.3f} vs realized ZF {zf:.3f}; FP by N_RF "
              + ", ".join(f"{n}: {v:.3f}" for n, v in fp.items()))
    assert acceptance(9, ordered and nondecreasing, detail)


@pytest.mark.slow
def test_criterion_10_baseline_ordering(desk_runs, acceptance):
    sc = float(np.mean([r.wsr for r in desk_runs["sc"]]))
    mimo = float(np.mean([r.wsr for r in desk_runs["mimo"]]))
    assert acceptance(10, sc > mimo, f"SC-PASS {sc:.3f} > massive MIMO {mimo:.3f}")


@pytest.mark.slow
def test_criterion_11_energy_efficiency(desk_runs, acceptance):
    worked = energy_efficiency(10.0, 0.1, n_rf=3, n_ps=18, n_pa=36)
    six = SystemConfig(num_waveguides=6, pas_per_waveguide=6, num_rf_chains=3)
    exact = worked == 10 / 5.08 and config_energy_efficiency(10.0, six, "fc") == 10 / 5.08
    n_rf = DESK.M // 2
    fc = float(np.mean([config_energy_efficiency(r.wsr, DESK, "fc", n_rf)
                        for r in desk_runs["fp"][n_rf]]))
    sc = float(np.mean([config_energy_efficiency(r.wsr, DESK, "sc") for r in desk_runs["sc"]]))
    assert acceptance(11, exact and fc > sc,
                      f"worked example exact {exact}; EE FC {fc:.3f} > SC {sc:.3f}")


# ---- 12: multimodality ---------------------------------------------------------------

@pytest.mark.slow
def test_criterion_12_multimodality(acceptance):
    toy = toy_config()
    scan = landscape_scan(toy, sample_users(toy, 0), 5e-3)
    worse = 0
    for seed in SEEDS:
        users = sample_users(toy, seed)
        fn = landscape_objective(toy, users, "zf")
        grid, shade = grid_vs_shade(toy, users, fn, ShadeConfig.for_layout(2), 5e-3, seed)
        worse += grid < shade - 1e-9 * abs(shade)
    ok = scan.local_maxima > 50 and worse >= 6
    assert acceptance(12, ok, f"{scan.local_maxima} strict local maxima (> 50); grid search "
                              f"worse than SHADE on {worse}/20 seeds (>= 6)")


# ---- 13: determinism -----------------------------------------------------------------

def test_criterion_13_determinism(tmp_path, acceptance):
    same = []
    for algorithm in ("fp", "zf", "sc", "mimo", "grid"):
        cfg = {"algorithm": algorithm, "seeds": [3, 4], "grid_step": 0.5,
               "shade": {"max_generations": 5}, "stop": {"max_outer": 4}}
        if algorithm == "zf":
            cfg["system"] = {"num_rf_chains": 4}
        path = tmp_path / f"{algorithm}.json"
        path.write_text(json.dumps(cfg))
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / algorithm / rep
            assert main(["run", "--config", str(path), "--out", str(out)]) == 0
            outs.append((out / "run.csv").read_bytes())
        same.append(outs[0] == outs[1])
    assert acceptance(13, all(same), f"byte-identical CSV on rerun for 5 algorithms: {same}")
