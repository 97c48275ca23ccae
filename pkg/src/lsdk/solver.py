"""Loping steepest-descent Kaczmarz iteration and its relatives.

Variants
--------
``LSDK``  loping steepest descent Kaczmarz (adaptive step, loping weights)
``SDK``   steepest descent Kaczmarz (adaptive step, every step performed)
``LLK``   loping Landweber Kaczmarz (constant step, loping weights)
``LK``    Landweber Kaczmarz (constant step, every step performed)

A CGNE baseline for linear systems lives here as well.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import EPS, OperatorBlock, ProblemSystem, RelaxationFunction

log = logging.getLogger(__name__)


class Variant(enum.Enum):
    LSDK = "lsdk"
    SDK = "sdk"
    LLK = "llk"
    LK = "lk"

    @property
    def loping(self) -> bool:
        return self in (Variant.LSDK, Variant.LLK)


class StopReason(enum.Enum):
    ALL_LOPED = "AllLoped"
    MAX_CYCLES = "MaxCycles"
    EXACT_DATA_TOL = "ExactDataTol"
    RESIDUAL_TARGET = "ResidualTarget"
    DEGENERATE = "Degenerate"


class DegenerateStep(ArithmeticError):
    """Vanishing update direction while the residual is above threshold."""


class DegenerateCurvature(DegenerateStep):
    """``F'(x) s == 0`` for a nonzero direction ``s``."""


class DivergenceError(ArithmeticError):
    def __init__(self, k: int):
        super().__init__(f"non-finite iterate at step {k}")
        self.k = k


class UnsupportedVariant(ValueError):
    pass


class AssumptionViolation(AssertionError):
    """A step-size estimate guaranteed by the convergence theory failed."""


@dataclass(frozen=True)
class SolverConfig:
    """Parameters of a Kaczmarz run.

    ``alpha_min`` is derived as ``phi(1/M**2)``.  ``exact_data_residual_tol``
    of ``None`` means ``1e-8`` times the initial maximal residual.
    ``residual_targets`` (non-loping variants only) holds one residual level
    per equation; the run stops at the end of the first cycle where
    ``||F_i(x) - y_i|| <= residual_targets[i]`` for every ``i``.
    """

    variant: Variant
    phi: RelaxationFunction
    M: float
    tau: float = 2.0
    eta: float = 0.0
    max_cycles: int = 1000
    exact_data_residual_tol: float | None = None
    residual_targets: tuple[float, ...] | None = None
    clamp_bounds: tuple[float, float] | None = None
    step_eps: float = 1e-14
    strict: bool = False
    stop_on_degenerate: bool = False

    def __post_init__(self):
        variant = Variant(self.variant)
        object.__setattr__(self, "variant", variant)
        if not 0 <= self.eta < 0.5:
            raise ValueError("eta must lie in [0, 1/2)")
        if not self.M > 0:
            raise ValueError("M must be positive")
        bound = 2 * (1 + self.eta) / (1 - 2 * self.eta)
        if self.tau < bound * (1 - 1e-12):
            raise ValueError(f"tau = {self.tau} violates tau >= 2(1+eta)/(1-2eta) = {bound}")
        if variant in (Variant.LLK, Variant.LK) and not self.phi.is_constant:
            raise ValueError(f"{variant.value} needs a constant relaxation function")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")
        if self.exact_data_residual_tol is not None and self.exact_data_residual_tol < 0:
            raise ValueError("exact_data_residual_tol must be nonnegative")
        if self.residual_targets is not None:
            object.__setattr__(self, "residual_targets",
                               tuple(float(v) for v in self.residual_targets))
        if self.clamp_bounds is not None:
            lo, hi = self.clamp_bounds
            if not lo < hi:
                raise ValueError("clamp bounds must satisfy lo < hi")
        self.phi.check_admissible(self.M)

    @property
    def alpha_min(self) -> float:
        return self.phi(1.0 / self.M**2)


@dataclass
class StepRecord:
    k: int
    op_index: int
    omega: int
    alpha: float
    residual_norm: float
    step_norm: float | None = None
    error_rel: float | None = None


@dataclass
class IterationTrace:
    steps: list[StepRecord] = field(default_factory=list)
    per_cycle_updates: list[int] = field(default_factory=list)
    forward_evals: int = 0
    adjoint_evals: int = 0
    derivative_evals: int = 0
    stop_index: int | None = None
    stop_reason: StopReason | None = None
    step_size_violations: int = 0
    lower_bound_violations: int = 0

    @property
    def cycles(self) -> int:
        """Number of cycles that performed work before the stop.

        For a loped stop this is ``stop_index / N``; the final, fully loped
        check cycle is not counted.
        """
        if self.stop_reason is StopReason.ALL_LOPED:
            return len(self.per_cycle_updates) - 1
        return len(self.per_cycle_updates)

    @property
    def total_updates(self) -> int:
        return sum(self.per_cycle_updates)


@dataclass
class RunResult:
    x_final: np.ndarray
    trace: IterationTrace


@dataclass
class Step:
    residual: np.ndarray
    residual_norm: float
    s: np.ndarray
    curvature_ratio: float


def loping_weight(residual_norm: float, tau: float, delta_i: float) -> int:
    return 1 if residual_norm >= tau * delta_i else 0


def compute_step(block: OperatorBlock, x: np.ndarray, y_delta: np.ndarray, *,
                 tau: float = 2.0, delta: float = 0.0, eps: float = 1e-14,
                 with_curvature: bool = True, residual: np.ndarray | None = None) -> Step:
    """Residual, steepest-descent direction and curvature ratio at ``x``.

    ``curvature_ratio = ||s||_X^2 / ||F'(x) s||_Y^2``; it is ``nan`` when
    ``with_curvature`` is false.  A direction of size below
    ``eps * ||residual|| * M`` while the residual is above ``tau * delta``
    raises :class:`DegenerateStep`.
    """
    X, Y = block.domain, block.codomain
    if residual is None:
        residual = block.apply(x) - y_delta
    rn = Y.norm(residual)
    s = block.adjoint_derivative_apply(x, residual)
    sn = X.norm(s)
    if rn > 0 and rn >= tau * delta and sn <= eps * rn * block.norm_bound:
        raise DegenerateStep(f"|s| = {sn:.3e} vanishes at residual {rn:.3e}")
    ratio = float("nan")
    if with_curvature and sn > 0:
        fs = Y.norm(block.derivative_apply(x, s))
        if fs == 0.0:
            raise DegenerateCurvature("F'(x) s vanishes for nonzero s")
        ratio = sn**2 / fs**2
    return Step(residual, rn, s, ratio)


def relaxation_alpha(phi: RelaxationFunction, curvature_ratio: float, omega: int,
                     alpha_min: float) -> float:
    if omega == 0:
        return alpha_min
    if phi.is_constant:
        return phi.c
    return phi(curvature_ratio)


def run(system: ProblemSystem, config: SolverConfig, x0) -> RunResult:
    """Run the configured Kaczmarz variant from ``x0``.

    Loping variants with all noise levels positive stop at the first cycle in
    which every step is loped.  Otherwise every step is performed and the run
    ends by residual tolerance, residual target or ``max_cycles``.
    """
    N = system.N
    X = system.domain
    x = np.array(getattr(x0, "values", x0), dtype=float)
    X.check(x)
    deltas = system.noise_levels
    loping = config.variant.loping and all(d > 0 for d in deltas)
    phi = config.phi
    alpha_min = config.alpha_min
    need_curv = not phi.is_constant
    xs = system.exact_solution
    xs_norm = X.norm(xs) if xs is not None else None
    trace = IterationTrace()

    tol = None
    if not loping:
        tol = config.exact_data_residual_tol
        if tol is None:
            tol = 1e-8 * float(np.max(system.residual_norms(x)))
            trace.forward_evals += N
    target = None
    if config.residual_targets is not None and not loping:
        target = np.asarray(config.residual_targets)
        if target.shape != (N,):
            raise ValueError(f"need {N} residual targets")

    def fail(exc):
        if config.stop_on_degenerate:
            trace.stop_reason = StopReason.DEGENERATE
            return RunResult(x, trace)
        raise exc

    k = 0
    for cycle in range(config.max_cycles):
        updates = 0
        cycle_max = 0.0
        for i in range(N):
            block, y, delta = system.blocks[i], system.noisy_data[i], deltas[i]
            residual = block.apply(x) - y
            trace.forward_evals += 1
            rn = block.codomain.norm(residual)
            if not np.isfinite(rn):
                raise DivergenceError(k)
            cycle_max = max(cycle_max, rn)
            omega = loping_weight(rn, config.tau, delta) if loping else 1
            err = X.norm(x - xs) / xs_norm if xs is not None and xs_norm > 0 else None
            rec = StepRecord(k, i, omega, alpha_min, rn, None, err)
            if omega:
                try:
                    step = compute_step(block, x, y, tau=config.tau, delta=delta,
                                        eps=config.step_eps, with_curvature=need_curv,
                                        residual=residual)
                except DegenerateStep as exc:
                    trace.steps.append(rec)
                    trace.per_cycle_updates.append(updates)
                    return fail(exc)
                trace.adjoint_evals += 1
                if need_curv and not np.isnan(step.curvature_ratio):
                    trace.derivative_evals += 1
                sn = X.norm(step.s)
                if sn == 0.0:
                    # zero residual: nothing to do for this equation
                    alpha = alpha_min
                else:
                    alpha = relaxation_alpha(phi, step.curvature_ratio, 1, alpha_min)
                    x = x - alpha * step.s
                    if config.clamp_bounds is not None:
                        np.clip(x, *config.clamp_bounds, out=x)
                    if not np.all(np.isfinite(x)):
                        raise DivergenceError(k)
                rec.alpha = alpha
                rec.step_norm = sn
                updates += 1
                _check_step(trace, config, rec, alpha_min)
            trace.steps.append(rec)
            k += 1
        trace.per_cycle_updates.append(updates)

        if loping:
            if updates == 0:
                trace.stop_reason = StopReason.ALL_LOPED
                trace.stop_index = cycle * N
                break
            continue
        if cycle_max <= tol:
            trace.stop_reason = StopReason.EXACT_DATA_TOL
            break
        if target is not None:
            trace.forward_evals += N
            if np.all(system.residual_norms(x) <= target):
                trace.stop_reason = StopReason.RESIDUAL_TARGET
                break
    else:
        trace.stop_reason = StopReason.MAX_CYCLES

    log.info("%s stopped (%s) after %d cycles, %d updates", config.variant.value,
             trace.stop_reason.value, trace.cycles, trace.total_updates)
    return RunResult(x, trace)


def _check_step(trace: IterationTrace, config: SolverConfig, rec: StepRecord,
                alpha_min: float) -> None:
    # step-size estimate alpha |s|^2 <= |r|^2 and lower bound alpha >= alpha_min
    if rec.alpha * rec.step_norm**2 > rec.residual_norm**2 * (1 + 1e-12):
        trace.step_size_violations += 1
        msg = f"step {rec.k}: alpha |s|^2 exceeds |residual|^2"
        if config.strict:
            raise AssumptionViolation(msg)
        log.warning(msg)
    if rec.alpha < alpha_min:
        trace.lower_bound_violations += 1
        msg = f"step {rec.k}: alpha = {rec.alpha} below alpha_min = {alpha_min}"
        if config.strict:
            raise AssumptionViolation(msg)
        log.warning(msg)


# ---------------------------------------------------------------------------
# CGNE baseline


@dataclass
class CGNEResult:
    x_final: np.ndarray
    per_cycle_error: list[float]
    residual_norms: list[float]
    iterates: list[np.ndarray]
    alphas: list[float]
    forward_evals: int = 0
    adjoint_evals: int = 0


def cgne_run(system: ProblemSystem, x0, cycles: int) -> CGNEResult:
    """Conjugate gradients on the normal equations of the stacked operator.

    One CG step (one application of every block and every adjoint) counts as
    a cycle.  ``per_cycle_error[c]`` is the relative error after ``c`` steps
    (entry 0 belongs to ``x0``); it is empty without a known solution.
    """
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    if not all(b.is_linear for b in system.blocks):
        raise UnsupportedVariant("CGNE needs linear blocks")
    X = system.domain
    blocks, ys = system.blocks, system.noisy_data
    x = np.array(getattr(x0, "values", x0), dtype=float)
    X.check(x)
    xs = system.exact_solution
    xs_norm = X.norm(xs) if xs is not None else 0.0

    def F(v):
        return [b.apply(v) for b in blocks]

    def F_adj(rs):
        out = np.zeros(X.size)
        for b, r in zip(blocks, rs):
            out += b.adjoint_derivative_apply(None, r)
        return out

    def ynorm2(rs):
        return sum(b.codomain.inner(r, r) for b, r in zip(blocks, rs))

    res = CGNEResult(x.copy(), [], [], [x.copy()], [])

    def record(v, rs):
        res.residual_norms.append(float(np.sqrt(ynorm2(rs))))
        if xs is not None and xs_norm > 0:
            res.per_cycle_error.append(X.norm(v - xs) / xs_norm)

    r = [y - fx for y, fx in zip(ys, F(x))]
    s = F_adj(r)
    res.forward_evals += len(blocks)
    res.adjoint_evals += len(blocks)
    record(x, r)
    p = s.copy()
    gamma = X.inner(s, s)
    for _ in range(cycles):
        if gamma <= EPS * EPS:
            break
        q = F(p)
        qq = ynorm2(q)
        if qq == 0.0:
            break
        alpha = gamma / qq
        x = x + alpha * p
        r = [ri - alpha * qi for ri, qi in zip(r, q)]
        s = F_adj(r)
        res.forward_evals += len(blocks)
        res.adjoint_evals += len(blocks)
        gamma_new = X.inner(s, s)
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
        res.alphas.append(alpha)
        res.iterates.append(x.copy())
        record(x, r)
    res.x_final = x
    return res
