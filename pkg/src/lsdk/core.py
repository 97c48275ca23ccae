"""Spaces, weighted inner products and the operator-block abstraction.

Vectors are plain flat ``numpy`` arrays; the space objects carry the
quadrature weights that turn Euclidean sums into the discrete versions of
the continuous inner products.  Operator blocks are bundles of callables
acting on those arrays.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps


class DimensionError(ValueError):
    """Vector length does not match the space it is used in."""


class DegenerateInputError(ValueError):
    """Input for which a numerical routine is undefined (e.g. a zero start vector)."""


# ---------------------------------------------------------------------------
# spaces and vectors


@dataclass(frozen=True)
class XSpace:
    """Parameter space: a rectangular grid with a uniform cell weight."""

    grid_shape: tuple[int, int]
    cell_weight: float

    def __post_init__(self):
        if len(self.grid_shape) != 2 or min(self.grid_shape) < 1:
            raise ValueError(f"invalid grid shape {self.grid_shape}")
        if not self.cell_weight > 0:
            raise ValueError("cell_weight must be positive")

    @property
    def size(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    def check(self, a: np.ndarray) -> None:
        if a.shape != (self.size,):
            raise DimensionError(f"expected vector of length {self.size}, got shape {a.shape}")

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        self.check(a)
        self.check(b)
        return float(self.cell_weight * np.dot(a, b))

    def norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)


@dataclass(frozen=True, eq=False)
class YSpace:
    """Data space: samples with nonnegative quadrature weights."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1:
            raise ValueError("weights must be one-dimensional")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def check(self, a: np.ndarray) -> None:
        if a.shape != (self.size,):
            raise DimensionError(f"expected vector of length {self.size}, got shape {a.shape}")

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        self.check(a)
        self.check(b)
        return float(np.dot(self.weights * a, b))

    def norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)


def inner_product(space: XSpace | YSpace, a, b) -> float:
    """Weighted inner product ``sum_j w_j a_j b_j`` in ``space``."""
    return space.inner(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Element of the parameter space, stored row-major over ``grid_shape``."""

    values: np.ndarray
    grid_shape: tuple[int, int]
    cell_weight: float

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        shape = tuple(int(n) for n in self.grid_shape)
        if v.size != shape[0] * shape[1]:
            raise DimensionError(f"{v.size} values do not fit grid {shape}")
        if not self.cell_weight > 0:
            raise ValueError("cell_weight must be positive")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameter values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "grid_shape", shape)

    @property
    def space(self) -> XSpace:
        return XSpace(self.grid_shape, self.cell_weight)

    def as_grid(self) -> np.ndarray:
        return self.values.reshape(self.grid_shape)

    def norm(self) -> float:
        return self.space.norm(self.values)

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(values, self.grid_shape, self.cell_weight)


@dataclass(frozen=True, eq=False)
class DataBlock:
    """Measurement for a single equation together with its quadrature weights."""

    values: np.ndarray
    quadrature_weights: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        w = np.array(self.quadrature_weights, dtype=float).ravel()
        if v.shape != w.shape:
            raise DimensionError(f"{v.size} values but {w.size} quadrature weights")
        v.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "quadrature_weights", w)

    @property
    def space(self) -> YSpace:
        return YSpace(self.quadrature_weights)

    def norm(self) -> float:
        return self.space.norm(self.values)

    def with_values(self, values) -> "DataBlock":
        return DataBlock(values, self.quadrature_weights)


# ---------------------------------------------------------------------------
# relaxation


@dataclass(frozen=True)
class RelaxationFunction:
    """Monotone bounded map from the curvature ratio to the step size.

    Two families are available: ``constant`` (``phi(s) = c``, which turns the
    steepest-descent step into a Landweber step) and ``clamped``
    (``phi(s) = min(scale * s, cap)``).
    """

    kind: str
    c: float = 0.0
    scale: float = 0.0
    cap: float = 0.0

    def __post_init__(self):
        if self.kind == "constant":
            if not (np.isfinite(self.c) and self.c > 0):
                raise ValueError("constant relaxation must be positive")
        elif self.kind == "clamped":
            if not (self.scale > 0 and self.cap > 0 and np.isfinite(self.cap)):
                raise ValueError("clamped relaxation needs positive scale and finite cap")
        else:
            raise ValueError(f"unknown relaxation kind {self.kind!r}")

    @classmethod
    def constant(cls, c: float) -> "RelaxationFunction":
        return cls("constant", c=float(c))

    @classmethod
    def clamped(cls, scale: float, cap: float) -> "RelaxationFunction":
        return cls("clamped", scale=float(scale), cap=float(cap))

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    @property
    def alpha_max(self) -> float:
        return self.c if self.is_constant else self.cap

    def __call__(self, s: float) -> float:
        if self.is_constant:
            return self.c
        return min(self.scale * s, self.cap)

    def check_admissible(self, M: float) -> None:
        """Raise unless ``phi(s) <= s`` holds on ``[1/M**2, inf)``."""
        if self.is_constant:
            if self.c > 1.0 / M**2 * (1 + 1e-12):
                raise ValueError(
                    f"constant relaxation {self.c} exceeds 1/M^2 = {1.0 / M**2}")
        elif self.scale > 1.0:
            raise ValueError(f"clamped relaxation slope {self.scale} exceeds 1")

    def __str__(self):
        if self.is_constant:
            return f"const {self.c!r}"
        return f"clamped {self.scale!r} {self.cap!r}"


# ---------------------------------------------------------------------------
# operator blocks


@dataclass(frozen=True, eq=False)
class OperatorBlock:
    """One equation ``F_i(x) = y_i`` of the system.

    ``apply(x)``, ``derivative_apply(x, h)`` and
    ``adjoint_derivative_apply(x, r)`` act on flat value arrays of
    ``domain`` and ``codomain``.  The adjoint is taken with respect to the
    weighted inner products of the two spaces.
    """

    apply: Callable[[np.ndarray], np.ndarray]
    derivative_apply: Callable[[np.ndarray, np.ndarray], np.ndarray]
    adjoint_derivative_apply: Callable[[np.ndarray, np.ndarray], np.ndarray]
    norm_bound: float
    domain: XSpace
    codomain: YSpace
    is_linear: bool = False
    adjoint_tol: float = 1e-10
    name: str = ""

    def __post_init__(self):
        if not self.norm_bound > 0:
            raise ValueError("norm_bound must be positive")


def linear_block(matvec, rmatvec, domain: XSpace, codomain: YSpace,
                 norm_bound: float, adjoint_tol: float = 1e-10,
                 name: str = "") -> OperatorBlock:
    """Build a linear block from ``matvec`` and its weighted adjoint ``rmatvec``."""
    return OperatorBlock(
        apply=matvec,
        derivative_apply=lambda x, h: matvec(h),
        adjoint_derivative_apply=lambda x, r: rmatvec(r),
        norm_bound=norm_bound,
        domain=domain,
        codomain=codomain,
        is_linear=True,
        adjoint_tol=adjoint_tol,
        name=name,
    )


def matrix_block(A, domain: XSpace, codomain: YSpace, norm_bound: float | None = None,
                 name: str = "") -> OperatorBlock:
    """Linear block given by a dense matrix, adjoint taken in the weighted spaces."""
    A = np.asarray(A, dtype=float)
    if A.shape != (codomain.size, domain.size):
        raise DimensionError(f"matrix shape {A.shape} does not match spaces")
    w = codomain.weights
    c = domain.cell_weight
    if norm_bound is None:
        # exact weighted operator norm: sqrt(w) A / sqrt(c)
        norm_bound = float(np.linalg.norm(np.sqrt(w)[:, None] * A / np.sqrt(c), 2)) or 1.0
    return linear_block(lambda x: A @ x, lambda r: A.T @ (w * r) / c,
                        domain, codomain, norm_bound, name=name)


@dataclass(frozen=True, eq=False)
class ProblemSystem:
    """System of ``N`` equations with noisy data and noise levels."""

    blocks: Sequence[OperatorBlock]
    noisy_data: Sequence[np.ndarray]
    noise_levels: Sequence[float]
    exact_solution: np.ndarray | None = None

    def __post_init__(self):
        blocks = tuple(self.blocks)
        data = tuple(np.asarray(y, dtype=float) for y in self.noisy_data)
        deltas = tuple(float(d) for d in self.noise_levels)
        if not blocks:
            raise ValueError("a system needs at least one equation")
        if not len(blocks) == len(data) == len(deltas):
            raise DimensionError("blocks, data and noise levels differ in length")
        if any(d < 0 for d in deltas):
            raise ValueError("noise levels must be nonnegative")
        domain = blocks[0].domain
        for b, y in zip(blocks, data):
            if b.domain != domain:
                raise DimensionError("all blocks must share one parameter space")
            b.codomain.check(y)
        if self.exact_solution is not None:
            xs = np.asarray(self.exact_solution, dtype=float)
            domain.check(xs)
            object.__setattr__(self, "exact_solution", xs)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "noisy_data", data)
        object.__setattr__(self, "noise_levels", deltas)

    @property
    def N(self) -> int:
        return len(self.blocks)

    @property
    def domain(self) -> XSpace:
        return self.blocks[0].domain

    @property
    def exact_data(self) -> bool:
        return all(d == 0 for d in self.noise_levels)

    def residual_norms(self, x: np.ndarray) -> np.ndarray:
        return np.array([b.codomain.norm(b.apply(x) - y)
                         for b, y in zip(self.blocks, self.noisy_data)])


# ---------------------------------------------------------------------------
# numerical utilities


def estimate_operator_norm(block: OperatorBlock, x, iterations: int = 50,
                           seed: int = 0) -> float:
    """Power-iteration estimate of ``||F'(x)||`` in the weighted norms.

    The estimate ``||F'(x) v_k||`` for the normalized power iterate ``v_k`` of
    ``F'(x)^* F'(x)`` never decreases with ``k`` (up to round-off).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    X, Y = block.domain, block.codomain
    x = np.asarray(getattr(x, "values", x), dtype=float)
    v = np.random.default_rng(seed).standard_normal(X.size)
    nv = X.norm(v)
    if not nv > 0:
        raise DegenerateInputError("zero start vector in power iteration")
    v /= nv
    est = 0.0
    for _ in range(iterations):
        Av = block.derivative_apply(x, v)
        est = Y.norm(Av)
        w = block.adjoint_derivative_apply(x, Av)
        nw = X.norm(w)
        if nw == 0.0:
            break
        v = w / nw
    return float(est)


@dataclass
class AdjointReport:
    max_relative_defect: float
    passed: bool
    defects: list[float] = field(default_factory=list)

    @property
    def pass_(self) -> bool:
        return self.passed


def validate_adjoint(block: OperatorBlock, x, trials: int = 10, seed: int = 0,
                     tol: float | None = None) -> AdjointReport:
    """Check ``<F'(x)h, r>_Y == <h, F'(x)^* r>_X`` on random probes."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    tol = block.adjoint_tol if tol is None else tol
    if not tol > 0:
        raise ValueError("tol must be positive")
    X, Y = block.domain, block.codomain
    x = np.asarray(getattr(x, "values", x), dtype=float)
    X.check(x)
    rng = np.random.default_rng(seed)
    defects = []
    for _ in range(trials):
        h = rng.standard_normal(X.size)
        r = rng.standard_normal(Y.size)
        lhs = Y.inner(block.derivative_apply(x, h), r)
        rhs = X.inner(h, block.adjoint_derivative_apply(x, r))
        defects.append(abs(lhs - rhs) / (abs(lhs) + EPS))
    worst = max(defects)
    return AdjointReport(worst, bool(worst <= tol), defects)


def add_noise(y: Sequence[DataBlock], rel_level: float, seed: int):
    """Add Gaussian noise of exactly prescribed relative size to every block.

    Returns ``(y_delta, delta)`` where ``delta[i]`` is the measured
    ``||y_delta[i] - y[i]||``.  Blocks are drawn from independent child
    streams of ``seed``.
    """
    if rel_level < 0:
        raise ValueError("rel_level must be nonnegative")
    streams = np.random.SeedSequence(seed).spawn(len(y))
    y_delta, delta = [], []
    for yi, ss in zip(y, streams):
        if rel_level == 0:
            y_delta.append(yi)
            delta.append(0.0)
            continue
        Y = yi.space
        n = np.random.default_rng(ss).standard_normal(Y.size)
        target = rel_level * yi.norm()
        if target == 0.0:
            warnings.warn("zero data block; adding absolute noise of size rel_level",
                          RuntimeWarning, stacklevel=2)
            target = rel_level
        nn = Y.norm(n)
        if nn == 0.0:
            raise DegenerateInputError("noise draw has zero weighted norm")
        noisy = yi.values + (target / nn) * n
        y_delta.append(yi.with_values(noisy))
        delta.append(Y.norm(noisy - yi.values))
    return y_delta, delta
