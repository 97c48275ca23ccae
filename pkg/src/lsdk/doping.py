"""Inverse doping problem: voltage-current data of a linear elliptic device model.

The device is the unit square sampled by ``m x m`` nodes, stored row-major
with row ``j`` at height ``t = j / (m - 1)``.  Row 0 is the contact
``Gamma_0`` carrying the applied voltage, row ``m - 1`` the grounded contact
``Gamma_1``; the vertical sides are insulating.  The state ``u`` solves the
node-centred finite-volume discretization of ``div(x grad u) = 0`` with
harmonic averages of ``x`` on the dual-cell faces.  The measured quantity is
the current ``mu_n * int_{Gamma_1} w x du/dnu`` through ``Gamma_1``.

Derivative and adjoint are exact for the discrete model: the derivative
solves the linearized system, the adjoint one transposed system.
"""

from __future__ import annotations

import functools
import logging
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import (DataBlock, OperatorBlock, ParameterVector, ProblemSystem, XSpace, YSpace,
                   add_noise, estimate_operator_norm)

log = logging.getLogger(__name__)


class DomainError(ValueError):
    """Parameter outside the admissible set ``x >= x_min``."""


class SolverFailure(ArithmeticError):
    pass


@dataclass(frozen=True)
class DeviceGrid:
    m: int
    mu_n: float = 1.0
    contact_weight: tuple[float, ...] | None = None
    x_min: float = 0.1

    def __post_init__(self):
        if self.m < 5:
            raise ValueError("device grid needs m >= 5")
        if not self.mu_n > 0:
            raise ValueError("mu_n must be positive")
        if self.contact_weight is not None:
            cw = tuple(float(c) for c in self.contact_weight)
            if len(cw) != self.m or min(cw) <= 0:
                raise ValueError("contact_weight needs m positive entries")
            object.__setattr__(self, "contact_weight", cw)

    @property
    def spacing(self) -> float:
        return 1.0 / (self.m - 1)

    @property
    def space(self) -> XSpace:
        return XSpace((self.m, self.m), self.spacing**2)

    def weights_on_contact(self) -> np.ndarray:
        if self.contact_weight is None:
            return np.ones(self.m)
        return np.asarray(self.contact_weight)

    def node_coordinates(self):
        s = np.linspace(0.0, 1.0, self.m)
        return np.meshgrid(s, s)  # (S, T), row j <-> t_j


@dataclass(frozen=True, eq=False)
class VoltageProfile:
    """Applied potential at the ``Gamma_0`` nodes (``Gamma_1`` is grounded)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError("voltage values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def make_voltage_profiles(grid: DeviceGrid, N: int = 11, h: float = 1 / 32) -> list[VoltageProfile]:
    """Indicator bumps ``|s - s_i| <= h`` centred at ``s_i = (i + 1/2) / N``.

    Nodal values are the fraction of each node's dual interval covered by
    the bump, so the discrete profile carries the exact bump area ``2h``.
    """
    if N < 1 or not 0 < h < 0.5:
        raise ValueError("need N >= 1 and 0 < h < 1/2")
    centres = (np.arange(N) + 0.5) / N
    if N > 1 and h >= (centres[1] - centres[0]) / 2:
        warnings.warn("voltage bumps overlap", RuntimeWarning, stacklevel=2)
    m, d = grid.m, grid.spacing
    s = np.linspace(0.0, 1.0, m)
    lo = np.maximum(s - d / 2, 0.0)
    hi = np.minimum(s + d / 2, 1.0)
    out = []
    for c in centres:
        overlap = np.clip(np.minimum(hi, c + h) - np.maximum(lo, c - h), 0.0, None)
        out.append(VoltageProfile(overlap / (hi - lo)))
    return out


# ---------------------------------------------------------------------------
# discrete model


@dataclass(frozen=True, eq=False)
class _Topology:
    B: sp.csr_matrix          # face x node incidence, +1 at face[:, 0], -1 at face[:, 1]
    faces: np.ndarray         # (n_faces, 2) node pairs
    g: np.ndarray             # dual-face length / edge length
    free: np.ndarray          # interior + insulated nodes
    dirichlet: np.ndarray
    top_faces: np.ndarray     # vertical faces touching Gamma_1, ordered by column
    B_free: sp.csr_matrix


@functools.lru_cache(maxsize=16)
def _topology(m: int) -> _Topology:
    idx = np.arange(m * m).reshape(m, m)
    # horizontal edges (j, i) - (j, i+1)
    ha, hb = idx[:, 1:].ravel(), idx[:, :-1].ravel()
    hg = np.ones((m, m - 1))
    hg[[0, -1], :] = 0.5
    # vertical edges (j+1, i) - (j, i): upper node first
    va, vb = idx[1:, :].ravel(), idx[:-1, :].ravel()
    vg = np.ones((m - 1, m))
    vg[:, [0, -1]] = 0.5
    faces = np.column_stack([np.concatenate([ha, va]), np.concatenate([hb, vb])])
    g = np.concatenate([hg.ravel(), vg.ravel()])
    nf = faces.shape[0]
    rows = np.repeat(np.arange(nf), 2)
    vals = np.tile([1.0, -1.0], nf)
    B = sp.csr_matrix((vals, (rows, faces.ravel())), shape=(nf, m * m))
    dirichlet = np.concatenate([idx[0], idx[-1]])
    free = idx[1:-1].ravel()
    n_h = ha.size
    top_faces = n_h + (m - 2) * m + np.arange(m)
    return _Topology(B, faces, g, free, dirichlet, top_faces, B[:, free].tocsr())


def _harmonic(x, faces):
    a, b = x[faces[:, 0]], x[faces[:, 1]]
    return 2 * a * b / (a + b)


def _harmonic_partials(x, faces):
    a, b = x[faces[:, 0]], x[faces[:, 1]]
    s2 = (a + b) ** 2
    return 2 * b * b / s2, 2 * a * a / s2


class _State:
    """Face coefficients and factorized stiffness matrix for one parameter."""

    def __init__(self, grid: DeviceGrid, x: np.ndarray):
        topo = _topology(grid.m)
        if x.shape != (grid.m * grid.m,):
            raise ValueError(f"parameter must have {grid.m * grid.m} entries")
        if not np.all(np.isfinite(x)):
            raise DomainError("parameter is not finite")
        if x.min() < grid.x_min:
            raise DomainError(f"parameter {x.min():.4g} below x_min = {grid.x_min}")
        self.topo = topo
        self.x = x
        self.k = _harmonic(x, topo.faces)
        K = (topo.B.T @ sp.diags(topo.g * self.k) @ topo.B).tocsc()
        self.K_FF = K[topo.free][:, topo.free].tocsc()
        self.K_FD = K[topo.free][:, topo.dirichlet].tocsc()
        self.lu = spla.splu(self.K_FF)
        self._u: dict[bytes, np.ndarray] = {}

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        sol = self.lu.solve(rhs)
        res = np.linalg.norm(self.K_FF @ sol - rhs)
        if not np.isfinite(res) or res > 1e-8 * max(np.linalg.norm(rhs), 1e-300):
            raise SolverFailure(f"linear solve residual {res:.3e}")
        return sol

    def potential(self, U: VoltageProfile, m: int) -> np.ndarray:
        key = U.values.tobytes()
        u = self._u.get(key)
        if u is None:
            uD = np.concatenate([U.values, np.zeros(m)])
            u = np.empty(m * m)
            u[self.topo.dirichlet] = uD
            u[self.topo.free] = self.solve(-(self.K_FD @ uD))
            u.setflags(write=False)
            self._u[key] = u
        return u


class _StateCache:
    def __init__(self, grid: DeviceGrid, size: int = 2):
        self.grid = grid
        self.size = size
        self._states: OrderedDict[bytes, _State] = OrderedDict()

    def get(self, x: np.ndarray) -> _State:
        x = np.asarray(x, dtype=float)
        key = x.tobytes()
        st = self._states.get(key)
        if st is None:
            st = _State(self.grid, x.copy())
            self._states[key] = st
            if len(self._states) > self.size:
                self._states.popitem(last=False)
        else:
            self._states.move_to_end(key)
        return st


def _values(v) -> np.ndarray:
    return np.asarray(getattr(v, "values", v), dtype=float)


def _flux_weights(grid: DeviceGrid, topo: _Topology) -> np.ndarray:
    # mu_n * contact weight * trapezoid edge weight / spacing on the Gamma_1 faces
    return grid.mu_n * grid.weights_on_contact() * topo.g[topo.top_faces]


def solve_pde(x, U: VoltageProfile, grid: DeviceGrid, _cache: _StateCache | None = None) -> np.ndarray:
    """Nodal potential for parameter ``x`` and applied voltage ``U``."""
    st = (_cache or _StateCache(grid)).get(_values(x))
    return np.array(st.potential(U, grid.m))


def current_functional(u, grid: DeviceGrid, x) -> float:
    """Current through ``Gamma_1``: one-sided conormal flux with trapezoid weights."""
    topo = _topology(grid.m)
    x, u = _values(x), _values(u)
    f = topo.top_faces
    k = _harmonic(x, topo.faces[f])
    du = topo.B[f] @ u
    return float(np.dot(_flux_weights(grid, topo), k * du))


class DopingModel:
    """Forward, derivative and adjoint of the voltage-current data for one device."""

    def __init__(self, grid: DeviceGrid, profiles: list[VoltageProfile]):
        self.grid = grid
        self.profiles = list(profiles)
        self.cache = _StateCache(grid)
        for U in self.profiles:
            if U.values.shape != (grid.m,):
                raise ValueError("voltage profile does not match the device grid")

    def forward(self, x, i: int) -> float:
        x = _values(x)
        st = self.cache.get(x)
        return current_functional(st.potential(self.profiles[i], self.grid.m), self.grid, x)

    def derivative(self, x, dx, i: int) -> float:
        """``F_i'(x) dx`` from the linearized state equation."""
        x, dx = _values(x), _values(dx)
        grid, topo = self.grid, _topology(self.grid.m)
        st = self.cache.get(x)
        u = st.potential(self.profiles[i], grid.m)
        pa, pb = _harmonic_partials(x, topo.faces)
        dk = pa * dx[topo.faces[:, 0]] + pb * dx[topo.faces[:, 1]]
        Bu = topo.B @ u
        # K_FF du_F = -(B^T diag(g dk) B u)_F, du = 0 on the contacts
        rhs = -(topo.B_free.T @ (topo.g * dk * Bu))
        du = np.zeros(grid.m * grid.m)
        du[topo.free] = st.solve(rhs)
        f = topo.top_faces
        w = _flux_weights(grid, topo)
        return float(np.dot(w, dk[f] * Bu[f] + st.k[f] * (topo.B[f] @ du)))

    def gradient(self, x, i: int) -> np.ndarray:
        """Euclidean gradient of ``F_i`` at ``x`` via one adjoint solve."""
        x = _values(x)
        grid, topo = self.grid, _topology(self.grid.m)
        st = self.cache.get(x)
        u = st.potential(self.profiles[i], grid.m)
        f = topo.top_faces
        w = _flux_weights(grid, topo)
        Bu = topo.B @ u
        q = np.zeros(topo.faces.shape[0])
        q[f] = w * Bu[f]
        z = np.zeros_like(q)
        z[f] = w * st.k[f]
        lam = st.solve(topo.B_free.T @ z)
        dJ_dk = q - topo.g * Bu * (topo.B_free @ lam)
        pa, pb = _harmonic_partials(x, topo.faces)
        grad = np.bincount(topo.faces[:, 0], pa * dJ_dk, minlength=x.size)
        grad += np.bincount(topo.faces[:, 1], pb * dJ_dk, minlength=x.size)
        return grad

    def adjoint(self, x, r, i: int) -> np.ndarray:
        r = float(np.ravel(r)[0])
        return r * self.gradient(x, i) / self.grid.space.cell_weight

    def block(self, i: int, norm_bound: float = 1.0) -> OperatorBlock:
        return OperatorBlock(
            apply=lambda x, i=i: np.array([self.forward(x, i)]),
            derivative_apply=lambda x, h, i=i: np.array([self.derivative(x, h, i)]),
            adjoint_derivative_apply=lambda x, r, i=i: self.adjoint(x, r, i),
            norm_bound=norm_bound,
            domain=self.grid.space,
            codomain=YSpace(np.ones(1)),
            is_linear=False,
            adjoint_tol=1e-8,
            name=f"doping[{i}]",
        )

    def blocks(self, norm_bound: float = 1.0) -> list[OperatorBlock]:
        return [self.block(i, norm_bound) for i in range(len(self.profiles))]


def _model(grid, U) -> DopingModel:
    return DopingModel(grid, [U])


def doping_forward(x, U: VoltageProfile, grid: DeviceGrid) -> float:
    return _model(grid, U).forward(x, 0)


def doping_derivative(x, dx, U: VoltageProfile, grid: DeviceGrid) -> float:
    return _model(grid, U).derivative(x, dx, 0)


def doping_adjoint(x, r: float, U: VoltageProfile, grid: DeviceGrid) -> ParameterVector:
    g = _model(grid, U).adjoint(x, r, 0)
    return ParameterVector(g, (grid.m, grid.m), grid.space.cell_weight)


# ---------------------------------------------------------------------------
# profiles and problem assembly


def default_true_profile(grid: DeviceGrid) -> ParameterVector:
    """Background 1 with a rectangular inclusion of value 0.5 near the centre."""
    S, T = grid.node_coordinates()
    x = np.ones_like(S)
    x[(np.abs(S - 0.5) <= 0.2) & (np.abs(T - 0.45) <= 0.15)] = 0.5
    return ParameterVector(x.ravel(), (grid.m, grid.m), grid.space.cell_weight)


def default_initial_guess(grid: DeviceGrid) -> ParameterVector:
    return ParameterVector(np.ones(grid.m * grid.m), (grid.m, grid.m), grid.space.cell_weight)


def read_grid(path, grid: DeviceGrid | None = None) -> np.ndarray:
    """Read a plain-text grid dump (one row of reals per line)."""
    a = np.atleast_2d(np.loadtxt(Path(path), dtype=float))
    if grid is not None and a.shape != (grid.m, grid.m):
        raise ValueError(f"grid file has shape {a.shape}, expected {(grid.m, grid.m)}")
    return a


def write_grid(path, values, shape) -> None:
    np.savetxt(Path(path), np.asarray(values, dtype=float).reshape(shape), fmt="%.17g")


def build_system(grid: DeviceGrid, N: int, h: float, x_true, noise_rel: float, seed: int,
                 x0=None, norm_safety: float = 1.0):
    """Data ``F_i(x_true)`` plus noise; returns ``(system, model, M)``.

    ``M`` is ``norm_safety`` times the largest ``||F_i'(x0)||`` (or 1 when
    ``x0`` is not given) and becomes every block's norm bound.
    """
    model = DopingModel(grid, make_voltage_profiles(grid, N, h))
    xt = _values(x_true)
    y = [DataBlock([model.forward(xt, i)], [1.0]) for i in range(N)]
    y_delta, delta = add_noise(y, noise_rel, seed)
    M = 1.0
    if x0 is not None:
        probe = model.blocks()
        M = norm_safety * max(estimate_operator_norm(b, _values(x0), 3, seed) for b in probe)
    system = ProblemSystem(model.blocks(M), [yd.values for yd in y_delta], delta, xt)
    return system, model, M
