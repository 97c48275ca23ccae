"""Acceptance criteria 1 to 13, each at its stated tolerance.

Every test records a one-line verdict that is printed in the
"acceptance criteria" section at the end of the pytest run.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from lsdk import doping, radon
from lsdk.core import RelaxationFunction, estimate_operator_norm, validate_adjoint
from lsdk.harness import ExperimentConfig, PhiSpec, build_problem, solve
from lsdk.solver import SolverConfig, StopReason, run

PHI_RADON = RelaxationFunction.clamped(0.4, 2.0)


def rel_error(system, x):
    X = system.domain
    return X.norm(x - system.exact_solution) / X.norm(system.exact_solution)


def radon_system(n, noise, seed=0, refinement=2):
    spec = radon.default_phantom((n, n))
    det = radon.default_detectors(n)
    system, T = radon.build_system(spec, det, noise, seed, refinement)
    return system, T


def radon_run(system, variant="lsdk", phi=PHI_RADON, **kw):
    cfg = SolverConfig(variant, phi, 1.0, tau=2.0, **kw)
    return run(system, cfg, np.zeros(system.domain.size))


# ---------------------------------------------------------------------------
# shared desk-scale runs


@pytest.fixture(scope="module")
def table_runs():
    """Radon 120 x 120, N = 50, 4% noise, alpha_min = 0.4."""
    system, _ = radon_system(120, 0.04, seed=0)
    out = {"system": system}
    for variant, phi in (("lsdk", PHI_RADON), ("llk", RelaxationFunction.constant(0.4))):
        t0 = time.perf_counter()
        out[variant] = radon_run(system, variant, phi)
        out[variant + "_time"] = time.perf_counter() - t0
    cfg = ExperimentConfig(problem="radon", variant="cgne", tau=2.0, noise_rel=0.04,
                           grid=(120, 120), N=50, max_cycles=40, phi=PhiSpec("const", 0.4))
    t0 = time.perf_counter()
    out["cgne"] = solve(cfg, _Prebuilt(system))
    out["cgne_time"] = time.perf_counter() - t0
    return out


class _Prebuilt:
    """Problem stand-in that reuses an already assembled radon system."""

    def __init__(self, system):
        self.system = system
        self.x0 = np.zeros(system.domain.size)
        self.M = 1.0
        self.shape = system.domain.grid_shape
        self.clamp = None


@pytest.fixture(scope="module")
def doping_runs():
    """Doping 31 x 31, N = 11, tau = 2.5 with the harness defaults."""
    base = ExperimentConfig(problem="doping", variant="lsdk", tau=2.5, noise_rel=0.01, N=11,
                            m=31, grid=(31, 31), max_cycles=5000,
                            phi=PhiSpec("clamped", scale=1.0, cap=100.0))
    t0 = time.perf_counter()
    problem = build_problem(base)
    out = {"problem": problem}
    out["lsdk"] = solve(base, problem)
    const = PhiSpec("const")
    out["llk"] = solve(replace(base, variant="llk", phi=const), problem)
    out["lk"] = solve(replace(base, variant="lk", phi=const, residual_target="llk"), problem)
    out["time"] = time.perf_counter() - t0
    return out


# ---------------------------------------------------------------------------


def test_criterion_01_adjoint_identities(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    det = radon.default_detectors(60)
    T = radon.CircularMeanTransform(det, (60, 60))
    x = np.zeros(T.domain.size)
    radon_worst = max(
        validate_adjoint(T.block(int(rng.integers(det.N))), x, trials=1, seed=j).max_relative_defect
        for j in range(100))
    radon_time = time.perf_counter() - t0

    t0 = time.perf_counter()
    grid = doping.DeviceGrid(17)
    model = doping.DopingModel(grid, doping.make_voltage_profiles(grid))
    xd = 1.0 + rng.random(17 * 17)
    doping_worst = max(
        validate_adjoint(model.block(j % 11), xd, trials=1, seed=j).max_relative_defect
        for j in range(20))
    doping_time = time.perf_counter() - t0

    ok = radon_worst <= 1e-10 and radon_time < 10 and doping_worst <= 1e-8 and doping_time < 30
    criterion(1, ok, f"radon defect {radon_worst:.1e} in {radon_time:.1f}s, "
                     f"doping defect {doping_worst:.1e} in {doping_time:.1f}s")
    assert ok


def test_criterion_02_operator_norm(criterion):
    det = radon.default_detectors(60)
    T = radon.CircularMeanTransform(det, (60, 60))
    x = np.zeros(T.domain.size)
    norms = [estimate_operator_norm(T.block(i), x, iterations=50, seed=i)
             for i in (0, 12, 25, 37, 49)]
    ok = max(norms) <= 1.05
    criterion(2, ok, "||M_i|| estimates " + ", ".join(f"{v:.4f}" for v in norms))
    assert ok


def test_criterion_03_step_size_bound(table_runs, criterion):
    tr = table_runs["lsdk"].trace
    direct = sum(1 for s in tr.steps
                 if s.omega and s.alpha * s.step_norm**2 > s.residual_norm**2 * (1 + 1e-12))
    ok = direct == 0 and tr.step_size_violations == 0
    criterion(3, ok, f"{sum(s.omega for s in tr.steps)} performed steps, {direct} violations")
    assert ok


def test_criterion_04_step_size_lower_bound(table_runs, doping_runs, criterion):
    checked, bad = 0, 0
    runs = [(table_runs[v].trace, 0.4) for v in ("lsdk", "llk")]
    M = doping_runs["problem"].M
    runs += [(doping_runs["lsdk"].trace, RelaxationFunction.clamped(1.0, 100.0)(1 / M**2))]
    runs += [(doping_runs[v].trace, 1 / M**2) for v in ("llk", "lk")]
    for tr, alpha_min in runs:
        for s in tr.steps:
            checked += 1
            bad += s.alpha < alpha_min
        bad += tr.lower_bound_violations
    ok = bad == 0
    criterion(4, ok, f"{checked} steps in {len(runs)} runs, {bad} below alpha_min")
    assert ok


def test_criterion_05_monotone_error(criterion):
    t0 = time.perf_counter()
    system, _ = radon_system(60, 0.04, seed=0, refinement=0)
    result = radon_run(system)
    errs = [s.error_rel for s in result.trace.steps] + [rel_error(system, result.x_final)]
    increases = [b - a for a, b in zip(errs, errs[1:]) if b > a * (1 + 1e-9)]
    elapsed = time.perf_counter() - t0
    ok = not increases and elapsed < 60
    criterion(5, ok, f"{len(errs)} iterates, error {errs[0]:.3f} -> {errs[-1]:.3f}, "
                     f"{len(increases)} increases, {elapsed:.1f}s")
    assert ok


def test_criterion_06_stopping_residuals(table_runs, doping_runs, criterion):
    details, ok = [], True
    cases = [("radon", table_runs["system"], table_runs["lsdk"].trace,
              table_runs["lsdk"].x_final, 2.0),
             ("doping", doping_runs["problem"].system, doping_runs["lsdk"].trace,
              doping_runs["lsdk"].x, 2.5)]
    for name, system, tr, x, tau in cases:
        ratio = np.max(system.residual_norms(x) / (tau * np.asarray(system.noise_levels)))
        good = tr.stop_reason is StopReason.ALL_LOPED and ratio < 1
        ok &= good
        details.append(f"{name} N={system.N} max |r_i|/(tau delta_i) = {ratio:.3f}")
    criterion(6, ok, "; ".join(details))
    assert ok


def test_criterion_07_summability(criterion):
    system, _ = radon_system(40, 0.0, refinement=0)
    x0 = np.zeros(system.domain.size)
    result = radon_run(system, max_cycles=50, exact_data_residual_tol=0.0)
    total = sum(s.alpha * s.residual_norm**2 for s in result.trace.steps if s.omega)
    bound = system.domain.norm(x0 - system.exact_solution) ** 2
    ok = result.trace.cycles == 50 and total <= 1.01 * bound
    criterion(7, ok, f"sum alpha r^2 = {total:.4f}, ||x0 - x+||^2 = {bound:.4f}")
    assert ok


def test_criterion_08_table_reproduction(table_runs, criterion):
    system = table_runs["system"]
    lsdk, llk, cg = table_runs["lsdk"], table_runs["llk"], table_runs["cgne"]
    e_lsdk = rel_error(system, lsdk.x_final)
    e_llk = rel_error(system, llk.x_final)
    e_cg = rel_error(system, cg.x)
    times = [table_runs[k] for k in ("lsdk_time", "llk_time", "cgne_time")]
    ok = (e_lsdk <= 0.25 and lsdk.trace.cycles <= 15 and e_llk <= 0.25
          and 0.15 <= e_cg <= 0.30 and max(times) < 180)
    criterion(8, ok, f"l-SDK {100 * e_lsdk:.1f}% in {lsdk.trace.cycles} cycles, "
                     f"l-LK {100 * e_llk:.1f}%, CGNE {100 * e_cg:.1f}% at cycle {cg.cycles}, "
                     f"slowest {max(times):.1f}s")
    assert ok


def test_criterion_09_doping_ordering(doping_runs, criterion):
    ls, ll, lk = doping_runs["lsdk"], doping_runs["llk"], doping_runs["lk"]
    ok = (ls.stop_reason == "AllLoped" and ll.stop_reason == "AllLoped"
          and lk.stop_reason == "ResidualTarget"
          and ls.cycles <= ll.cycles <= lk.cycles
          and ls.adjoint_evals < 0.5 * lk.adjoint_evals
          and doping_runs["time"] < 300)
    criterion(9, ok, f"cycles l-SDK {ls.cycles} / l-LK {ll.cycles} / LK {lk.cycles}, "
                     f"adjoint evals {ls.adjoint_evals} vs LK {lk.adjoint_evals}, "
                     f"{doping_runs['time']:.1f}s")
    assert ok


def test_criterion_10_loping_profile(table_runs, criterion):
    updates = table_runs["lsdk"].trace.per_cycle_updates
    N = table_runs["system"].N
    ok = updates[-1] == 0 and any(u < N for u in updates[:-1])
    criterion(10, ok, f"updates per cycle {updates}")
    assert ok


def test_criterion_11_noise_regularization(criterion):
    med = {}
    for noise in (0.01, 0.08):
        errs = []
        for seed in range(3):
            system, _ = radon_system(60, noise, seed=seed)
            errs.append(rel_error(system, radon_run(system).x_final))
        med[noise] = float(np.median(errs))
    ok = med[0.01] < med[0.08]
    criterion(11, ok, f"median error 1%: {med[0.01]:.4f}, 8%: {med[0.08]:.4f}")
    assert ok


def test_criterion_12_variant_degeneration(criterion):
    system, _ = radon_system(60, 0.04, seed=3)
    c = RelaxationFunction.constant(0.4)
    a = radon_run(system, "lsdk", c)
    b = radon_run(system, "llk", c)
    same = (a.trace.steps == b.trace.steps
            and a.trace.per_cycle_updates == b.trace.per_cycle_updates
            and a.x_final.tobytes() == b.x_final.tobytes())
    criterion(12, same, f"{len(a.trace.steps)} trace rows, bit-identical: {same}")
    assert same


def test_criterion_13_doping_derivative(criterion):
    t0 = time.perf_counter()
    grid = doping.DeviceGrid(17)
    model = doping.DopingModel(grid, doping.make_voltage_profiles(grid))
    rng = np.random.default_rng(7)
    x = 1.0 + 0.5 * rng.random(17 * 17)
    eps = 1e-5
    worst = 0.0
    for j in range(10):
        h = rng.standard_normal(17 * 17)
        i = j % 11
        fd = (model.forward(x + eps * h, i) - model.forward(x - eps * h, i)) / (2 * eps)
        exact = model.derivative(x, h, i)
        worst = max(worst, abs(fd - exact) / abs(exact))
    elapsed = time.perf_counter() - t0
    ok = worst <= 5e-4 and elapsed < 60
    criterion(13, ok, f"max relative difference {worst:.1e} over 10 directions, {elapsed:.1f}s")
    assert ok
