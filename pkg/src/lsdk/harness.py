"""Experiment configuration, problem assembly and artifact output.

A config is a small ``key = value`` text file.  ``run_experiment`` builds the
requested problem, runs one method and writes

* ``trace.csv``: one row per step,
* ``cycles.csv``: performed updates per cycle,
* ``recon.pgm`` / ``truth.pgm``: reconstruction and exact parameter,
* ``summary.txt``: counts, errors and residual ratios,

all byte-reproducible for a fixed seed.  Wall-clock time goes to a separate
``runtime.txt`` so the deterministic files stay deterministic.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import doping, radon
from .core import ParameterVector, ProblemSystem, RelaxationFunction
from .solver import (CGNEResult, IterationTrace, SolverConfig, StepRecord, Variant, cgne_run,
                     run)

log = logging.getLogger(__name__)

OUTPUT_ENV = "LSDK_OUTPUT_DIR"
DEFAULT_OUTPUT = "lsdk_out"
ARTIFACTS = ("trace.csv", "recon.pgm", "truth.pgm", "summary.txt", "cycles.csv")
TRACE_HEADER = "cycle,k,op_index,omega,alpha,residual_norm,step_norm,error_rel"

PROBLEMS = ("radon", "doping")
VARIANTS = ("lsdk", "sdk", "llk", "lk", "cgne")
TARGETS = ("none", "discrepancy", "llk")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class PhiSpec:
    """Relaxation function as written in a config.

    ``const auto`` stands for ``1/M**2``, resolved once ``M`` is known.
    """

    kind: str
    c: float | None = None
    scale: float = 0.0
    cap: float = 0.0

    def resolve(self, M: float) -> RelaxationFunction:
        if self.kind == "const":
            return RelaxationFunction.constant(self.c if self.c is not None else 1.0 / M**2)
        return RelaxationFunction.clamped(self.scale, self.cap)

    def __str__(self):
        if self.kind == "const":
            return "const auto" if self.c is None else f"const {self.c!r}"
        return f"clamped {self.scale!r} {self.cap!r}"


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str = "radon"
    variant: str = "lsdk"
    phi: PhiSpec | None = None
    tau: float | None = None
    noise_rel: float | None = None
    seed: int = 0
    grid: tuple[int, int] | None = None
    N: int | None = None
    max_cycles: int | None = None
    output_dir: Path | None = None
    residual_target: str = "none"
    # radon
    phantom: Path | None = None
    refinement: int = 2
    n_t: int | None = None
    n_sigma: int | None = None
    # doping
    m: int | None = None
    mu_n: float = 1.0
    h: float = 1 / 32
    x_min: float = 0.1
    x_max: float = 10.0
    norm_safety: float = 1.5
    contact_weight: tuple[float, ...] | None = None
    truth_file: Path | None = None
    initial_file: Path | None = None

    def to_text(self) -> str:
        """Render as config text; ``parse_config(cfg.to_text()) == cfg``."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None or (self.problem == "radon" and f.name in _DOPING_KEYS) or (
                    self.problem == "doping" and f.name in _RADON_KEYS):
                continue
            if f.name == "grid":
                v = f"{v[0]}x{v[1]}"
            elif f.name == "contact_weight":
                v = ", ".join(repr(c) for c in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_RADON_KEYS = {"phantom", "refinement", "n_t", "n_sigma"}
_DOPING_KEYS = {"m", "mu_n", "h", "x_min", "x_max", "norm_safety", "contact_weight",
                "truth_file", "initial_file"}

_DEFAULTS = {
    "radon": dict(tau=2.0, noise_rel=0.04, grid=(120, 120), N=50),
    "doping": dict(tau=2.5, noise_rel=0.01, N=11, m=31),
}


# ---------------------------------------------------------------------------
# parsing


def _float(text):
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("not finite")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _positive(text):
    v = _float(text)
    if v <= 0:
        raise ValueError("must be positive")
    return v


def _nonneg(text):
    v = _float(text)
    if v < 0:
        raise ValueError("must be nonnegative")
    return v


def _choice(options):
    def conv(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return conv


def _grid(text):
    parts = text.lower().replace(" ", "").split("x")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError("expected 'n' or 'rows x cols'")
    rows, cols = (int(p) for p in parts)
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2 x 2 cells")
    return rows, cols


def _phi(text):
    kind, *args = text.split()
    if kind == "const" and len(args) == 1:
        if args[0] == "auto":
            return PhiSpec("const")
        c = _positive(args[0])
        return PhiSpec("const", c=c)
    if kind == "clamped" and len(args) == 2:
        return PhiSpec("clamped", scale=_positive(args[0]), cap=_positive(args[1]))
    raise ValueError("expected 'const <c>', 'const auto' or 'clamped <scale> <cap>'")


def _weights(text):
    return tuple(_positive(v) for v in text.split(","))


_CONVERTERS = {
    "problem": _choice(PROBLEMS),
    "variant": _choice(VARIANTS),
    "phi": _phi,
    "tau": _float,
    "noise_rel": _nonneg,
    "seed": _nonneg_int,
    "grid": _grid,
    "N": _positive_int,
    "max_cycles": _positive_int,
    "output_dir": Path,
    "residual_target": _choice(TARGETS),
    "phantom": Path,
    "refinement": _nonneg_int,
    "n_t": _positive_int,
    "n_sigma": _positive_int,
    "m": _positive_int,
    "mu_n": _positive,
    "h": _positive,
    "x_min": _positive,
    "x_max": _positive,
    "norm_safety": _positive,
    "contact_weight": _weights,
    "truth_file": Path,
    "initial_file": Path,
}


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate config text; every error names its line."""
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONVERTERS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r} (first set on line {raw[key][1]})", lineno)
        if not value:
            raise ConfigError(f"empty value for {key!r}", lineno)
        raw[key] = (value, lineno)

    values, lines = {}, {}
    for key, (value, lineno) in raw.items():
        try:
            values[key] = _CONVERTERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r} for {key!r}: {exc}", lineno) from None
        lines[key] = lineno

    problem = values.get("problem", "radon")
    foreign = _DOPING_KEYS if problem == "radon" else _RADON_KEYS
    for key in values:
        if key in foreign:
            raise ConfigError(f"key {key!r} does not apply to problem {problem!r}", lines[key])
    if problem == "doping" and "grid" in values:
        rows, cols = values.pop("grid")
        if rows != cols:
            raise ConfigError("doping grids are square", lines["grid"])
        if "m" in values and values["m"] != rows:
            raise ConfigError("grid and m disagree", lines["grid"])
        values["m"] = rows
        lines.setdefault("m", lines["grid"])

    for key, v in _DEFAULTS[problem].items():
        values.setdefault(key, v)
    if problem == "doping":
        values["grid"] = (values["m"], values["m"])
    variant = values.get("variant", "lsdk")
    values.setdefault("max_cycles", 50 if variant == "cgne" else 1000)
    values.setdefault("phi", _default_phi(problem, variant))

    def fail(key, msg):
        raise ConfigError(msg, lines.get(key))

    tau = values["tau"]
    if tau < 2.0:
        fail("tau", f"tau = {tau!r} violates the discrepancy bound "
                    "tau >= 2(1 + eta)/(1 - 2 eta) = 2 (eta = 0)")
    phi = values["phi"]
    if variant in ("llk", "lk") and phi.kind != "const":
        fail("phi", f"variant {variant} needs a constant relaxation function")
    if phi.kind == "clamped" and phi.scale > 1:
        fail("phi", f"clamped slope {phi.scale!r} exceeds 1; phi(s) <= s would fail")
    if values.get("residual_target", "none") != "none" and variant in ("lsdk", "llk", "cgne"):
        fail("residual_target", "residual_target applies to the non-loping variants sdk and lk")
    if problem == "doping":
        if values["m"] < 5:
            fail("m", "doping grid needs m >= 5")
        x_min, x_max = values.get("x_min", 0.1), values.get("x_max", 10.0)
        if not x_min < x_max:
            fail("x_max", "need x_min < x_max")
        if not values.get("h", 1 / 32) < 0.5:
            fail("h", "need h < 1/2")
        cw = values.get("contact_weight")
        if cw is not None and len(cw) != values["m"]:
            fail("contact_weight", f"contact_weight needs m = {values['m']} entries, got {len(cw)}")
    if problem == "radon" and values["N"] < 2 and "N" in lines:
        fail("N", "radon needs at least 2 detectors")
    return ExperimentConfig(**values)


def _default_phi(problem: str, variant: str) -> PhiSpec:
    const = variant in ("llk", "lk")
    if problem == "radon":
        return PhiSpec("const", c=0.4) if const else PhiSpec("clamped", scale=0.4, cap=2.0)
    return PhiSpec("const") if const else PhiSpec("clamped", scale=1.0, cap=100.0)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# problems and runs


@dataclass
class Problem:
    system: ProblemSystem
    x0: np.ndarray
    M: float
    shape: tuple[int, int]
    clamp: tuple[float, float] | None = None


def build_problem(cfg: ExperimentConfig) -> Problem:
    if cfg.problem == "radon":
        spec = (radon.load_scene(cfg.phantom, cfg.grid) if cfg.phantom
                else radon.default_phantom(cfg.grid))
        det = radon.default_detectors(cfg.grid[0], cfg.N, cfg.n_t, cfg.n_sigma)
        system, _ = radon.build_system(spec, det, cfg.noise_rel, cfg.seed, cfg.refinement)
        return Problem(system, np.zeros(system.domain.size), 1.0, cfg.grid)

    grid = doping.DeviceGrid(cfg.m, cfg.mu_n, cfg.contact_weight, cfg.x_min)
    xt = (doping.read_grid(cfg.truth_file, grid).ravel() if cfg.truth_file
          else doping.default_true_profile(grid).values)
    x0 = (doping.read_grid(cfg.initial_file, grid).ravel() if cfg.initial_file
          else doping.default_initial_guess(grid).values)
    system, _, M = doping.build_system(grid, cfg.N, cfg.h, xt, cfg.noise_rel, cfg.seed,
                                       x0=x0, norm_safety=cfg.norm_safety)
    return Problem(system, x0, M, (cfg.m, cfg.m), (cfg.x_min, cfg.x_max))


def solver_config(cfg: ExperimentConfig, problem: Problem, variant: str | None = None,
                  residual_targets=None) -> SolverConfig:
    return SolverConfig(Variant(variant or cfg.variant), cfg.phi.resolve(problem.M), problem.M,
                        tau=cfg.tau, max_cycles=cfg.max_cycles, clamp_bounds=problem.clamp,
                        residual_targets=residual_targets)


@dataclass
class Outcome:
    """Result of one method on one problem, in a form common to all variants."""

    variant: str
    x: np.ndarray
    rows: list[StepRecord]
    per_cycle_updates: list[int]
    stop_reason: str
    cycles: int
    forward_evals: int
    adjoint_evals: int
    trace: IterationTrace | None = None
    cgne: CGNEResult | None = None


def residual_targets(cfg: ExperimentConfig, problem: Problem):
    """Per-equation residual levels for a non-loping run, or ``None``.

    ``discrepancy`` uses ``tau * delta_i``; ``llk`` uses the residuals at
    which l-LK stops on the same problem, so both methods are compared at
    equal data fit.
    """
    if cfg.residual_target == "none":
        return None
    system = problem.system
    if cfg.residual_target == "discrepancy":
        return tuple(cfg.tau * d for d in system.noise_levels)
    ref = run(system, solver_config(cfg, problem, "llk"), problem.x0)
    return tuple(system.residual_norms(ref.x_final))


def solve(cfg: ExperimentConfig, problem: Problem | None = None) -> Outcome:
    problem = problem or build_problem(cfg)
    system = problem.system
    if cfg.variant == "cgne":
        return _solve_cgne(cfg, problem)
    result = run(system, solver_config(cfg, problem, residual_targets=residual_targets(cfg, problem)),
                 problem.x0)
    tr = result.trace
    return Outcome(cfg.variant, result.x_final, tr.steps, tr.per_cycle_updates,
                   tr.stop_reason.value, tr.cycles, tr.forward_evals, tr.adjoint_evals, trace=tr)


def _solve_cgne(cfg: ExperimentConfig, problem: Problem) -> Outcome:
    # the run is cut back to the cycle of minimal error when the truth is known
    system, N = problem.system, problem.system.N
    res = cgne_run(system, problem.x0, cfg.max_cycles)
    done = len(res.alphas)
    best = int(np.argmin(res.per_cycle_error)) if res.per_cycle_error else done
    rows = [StepRecord(c, -1, 1, res.alphas[c], res.residual_norms[c], None,
                       res.per_cycle_error[c] if res.per_cycle_error else None)
            for c in range(best)]
    stop = "MinError" if res.per_cycle_error else ("MaxCycles" if done == cfg.max_cycles
                                                   else "Converged")
    return Outcome("cgne", res.iterates[best], rows, [N] * best, stop, best,
                   N * (best + 1), N * best, cgne=res)


# ---------------------------------------------------------------------------
# output


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def trace_csv(outcome: Outcome, N: int) -> str:
    lines = [TRACE_HEADER]
    cgne = outcome.variant == "cgne"
    for r in outcome.rows:
        cycle = r.k if cgne else r.k // N
        op = "" if cgne else str(r.op_index)
        lines.append(",".join([str(cycle), str(r.k), op, str(r.omega), _num(r.alpha),
                               _num(r.residual_norm), _num(r.step_norm), _num(r.error_rel)]))
    return "\n".join(lines) + "\n"


def cycles_csv(outcome: Outcome) -> str:
    body = [f"{c},{u}" for c, u in enumerate(outcome.per_cycle_updates)]
    return "\n".join(["cycle,updates", *body]) + "\n"


def summary_text(cfg: ExperimentConfig, problem: Problem, outcome: Outcome) -> str:
    system = problem.system
    res = system.residual_norms(outcome.x)
    deltas = np.asarray(system.noise_levels)
    X = system.domain
    xs = system.exact_solution
    err = X.norm(outcome.x - xs) / X.norm(xs) if xs is not None and X.norm(xs) > 0 else None
    ratio = float(np.max(res / (cfg.tau * deltas))) if np.all(deltas > 0) else None
    phi = cfg.phi.resolve(problem.M)
    items = [
        ("problem", cfg.problem),
        ("variant", outcome.variant),
        ("phi", "" if outcome.variant == "cgne" else str(phi)),
        ("tau", _num(cfg.tau)),
        ("noise_rel", _num(cfg.noise_rel)),
        ("seed", cfg.seed),
        ("grid", f"{problem.shape[0]}x{problem.shape[1]}"),
        ("N", system.N),
        ("M", _num(problem.M)),
        ("alpha_min", "" if outcome.variant == "cgne" else _num(phi(1 / problem.M**2))),
        ("stop_reason", outcome.stop_reason),
        ("cycles", outcome.cycles),
        ("total_updates", sum(outcome.per_cycle_updates)),
        ("forward_evals", outcome.forward_evals),
        ("adjoint_evals", outcome.adjoint_evals),
        ("final_error_rel", _num(err) if err is not None else "n/a"),
        ("max_residual_ratio", _num(ratio) if ratio is not None else "n/a"),
    ]
    if outcome.trace is not None:
        items += [("step_size_violations", outcome.trace.step_size_violations),
                  ("lower_bound_violations", outcome.trace.lower_bound_violations)]
    return "".join(f"{k} = {v}\n" for k, v in items)


def write_pgm(field: ParameterVector, path) -> None:
    """ASCII greyscale image with min-max scaling; the comment keeps the scale.

    Pixel levels are ``floor(255 * (v - min) / (max - min))``; a constant field
    maps to 0.
    """
    img = field.as_grid()
    if not np.all(np.isfinite(img)):
        raise ValueError("cannot render non-finite values")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        pix = np.clip(np.floor((img - lo) / (hi - lo) * 255), 0, 255).astype(int)
    else:
        pix = np.zeros(img.shape, dtype=int)
    rows, cols = img.shape
    body = "\n".join(" ".join(map(str, row)) for row in pix)
    Path(path).write_text(f"P2\n# min={lo!r} max={hi!r}\n{cols} {rows}\n255\n{body}\n",
                          encoding="ascii")


def read_pgm(path):
    """Return ``(pixels, min, max)`` from a file written by ``write_pgm``."""
    lo = hi = None
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        if line.startswith("#"):
            for part in line[1:].split():
                key, _, val = part.partition("=")
                if key == "min":
                    lo = float(val)
                elif key == "max":
                    hi = float(val)
            continue
        tokens += line.split()
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pix = np.array([int(t) for t in tokens[4:]], dtype=int)
    if pix.size != rows * cols or pix.max(initial=0) > maxval:
        raise ValueError(f"{path}: pixel data does not match header")
    return pix.reshape(rows, cols), lo, hi


def resolve_output_dir(cfg: ExperimentConfig, override=None) -> Path:
    if override is not None:
        return Path(override)
    if cfg.output_dir is not None:
        return cfg.output_dir
    return Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT))


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> dict[str, Path]:
    """Run ``cfg`` and write the artifact set; returns artifact name -> path.

    Nothing is left behind if the run or the writing fails.
    """
    out = resolve_output_dir(cfg, output_dir)
    t0 = time.perf_counter()
    problem = build_problem(cfg)
    outcome = solve(cfg, problem)
    runtime = time.perf_counter() - t0

    system = problem.system
    shape = problem.shape
    cw = system.domain.cell_weight
    contents = {
        "trace.csv": trace_csv(outcome, system.N),
        "cycles.csv": cycles_csv(outcome),
        "summary.txt": summary_text(cfg, problem, outcome),
    }
    paths = {name: out / name for name in (*ARTIFACTS, "runtime.txt")}
    created_dir = not out.exists()
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in contents.items():
            written.append(paths[name])
            paths[name].write_text(text, encoding="utf-8")
        written.append(paths["recon.pgm"])
        write_pgm(ParameterVector(outcome.x, shape, cw), paths["recon.pgm"])
        written.append(paths["truth.pgm"])
        write_pgm(ParameterVector(system.exact_solution, shape, cw), paths["truth.pgm"])
        written.append(paths["runtime.txt"])
        paths["runtime.txt"].write_text(f"seconds = {runtime:.3f}\n", encoding="utf-8")
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        if created_dir and out.exists() and not any(out.iterdir()):
            out.rmdir()
        raise
    log.info("%s/%s finished in %.2f s", cfg.problem, cfg.variant, runtime)
    return paths


def with_output(cfg: ExperimentConfig, output_dir) -> ExperimentConfig:
    return replace(cfg, output_dir=Path(output_dir))
