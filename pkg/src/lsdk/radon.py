"""Limited-view photoacoustic problem: circular means around boundary detectors.

The parameter lives on a ``rows x cols`` pixel grid over ``[-1, 1]^2``
(pixel centers, row 0 at the top); only pixels whose centers lie in the unit
disc are unknowns.  For detector ``xi_i`` on the unit circle the forward map
is the scaled circular mean

    (M_i x)(t) = 1/sqrt(pi) * int_{S^1} x(xi_i + t sigma) dsigma,  t in [0, 2],

discretized with a midpoint rule in the angle and bilinear interpolation of
the pixel values.  The data space carries trapezoid weights times ``t``.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .core import (DataBlock, OperatorBlock, ParameterVector, ProblemSystem, XSpace,
                   YSpace, add_noise, linear_block)

log = logging.getLogger(__name__)

SQRT_PI = math.sqrt(math.pi)

__all__ = [
    "DetectorSet", "Disc", "Ellipse", "Gaussian", "PhantomSpec", "CircularMeanTransform",
    "make_detectors", "radon_forward", "radon_adjoint", "radon_adjoint_analytic",
    "make_phantom", "synthesize_data", "add_noise", "load_scene", "parse_scene",
    "default_phantom", "build_system",
]


@dataclass(frozen=True)
class DetectorSet:
    centers: tuple[tuple[float, float], ...]
    radial_grid: tuple[float, ...]
    angular_count: int

    @property
    def N(self) -> int:
        return len(self.centers)

    @property
    def n_t(self) -> int:
        return len(self.radial_grid)

    def data_weights(self) -> np.ndarray:
        """Trapezoid weights on ``[0, 2]`` multiplied by ``t``."""
        t = np.asarray(self.radial_grid)
        dt = t[1] - t[0]
        w = np.full(t.size, dt)
        w[0] = w[-1] = dt / 2
        return w * t

    def data_space(self) -> YSpace:
        return YSpace(self.data_weights())


def make_detectors(N: int, n_t: int, n_sigma: int) -> DetectorSet:
    """``N`` detectors uniformly distributed on the right half of the unit circle."""
    if N < 2 or n_t < 2 or n_sigma < 4:
        raise ValueError("need N >= 2, n_t >= 2, n_sigma >= 4")
    phi = np.pi * np.arange(N) / (N - 1)
    centers = tuple((float(np.sin(a)), float(np.cos(a))) for a in phi)
    t = np.linspace(0.0, 2.0, n_t)
    return DetectorSet(centers, tuple(float(v) for v in t), int(n_sigma))


def pixel_space(grid_shape) -> XSpace:
    rows, cols = grid_shape
    return XSpace((rows, cols), (2.0 / rows) * (2.0 / cols))


def pixel_centers(grid_shape) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates ``(X, Y)`` of the pixel centers, row 0 at ``y = 1``."""
    rows, cols = grid_shape
    xc = -1 + (np.arange(cols) + 0.5) * (2.0 / cols)
    yc = 1 - (np.arange(rows) + 0.5) * (2.0 / rows)
    return np.meshgrid(xc, yc)


def disc_mask(grid_shape) -> np.ndarray:
    X, Y = pixel_centers(grid_shape)
    return (X**2 + Y**2 <= 1.0).ravel()


def _stencil(det: DetectorSet, i: int, grid_shape, mask: np.ndarray):
    """Bilinear interpolation stencil of the circular means of detector ``i``.

    Returns ``(rows, cols, weights)`` such that the transform equals
    ``sum weights * x[cols]`` accumulated into ``rows``.
    """
    nr, nc = grid_shape
    hx, hy = 2.0 / nc, 2.0 / nr
    t = np.asarray(det.radial_grid)
    ns = det.angular_count
    theta = 2 * np.pi * (np.arange(ns) + 0.5) / ns
    cx, cy = det.centers[i]
    px = cx + t[:, None] * np.cos(theta)[None, :]
    py = cy + t[:, None] * np.sin(theta)[None, :]
    j = np.broadcast_to(np.arange(t.size)[:, None], px.shape)
    inside = px**2 + py**2 <= 1.0
    px, py, j = px[inside], py[inside], j[inside]
    # continuous pixel-center coordinates
    fc = (px + 1) / hx - 0.5
    fr = (1 - py) / hy - 0.5
    c0 = np.floor(fc).astype(np.int64)
    r0 = np.floor(fr).astype(np.int64)
    ac = fc - c0
    ar = fr - r0
    scale = (2 * np.pi / ns) / SQRT_PI
    rows, cols, vals = [], [], []
    for dr, dc, w in ((0, 0, (1 - ar) * (1 - ac)), (0, 1, (1 - ar) * ac),
                      (1, 0, ar * (1 - ac)), (1, 1, ar * ac)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < nr) & (cc >= 0) & (cc < nc)
        pix = rr[ok] * nc + cc[ok]
        keep = mask[pix]
        rows.append(j[ok][keep])
        cols.append(pix[keep])
        vals.append(scale * w[ok][keep])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


class CircularMeanTransform:
    """Discrete circular-mean operators for every detector on one pixel grid.

    The interpolation stencil of each detector is assembled once into a
    sparse matrix ``A_i``; the forward map is ``A_i x`` and the adjoint in the
    weighted spaces is ``A_i^T (w * y) / cell_area``, masked to the disc.
    """

    def __init__(self, det: DetectorSet, grid_shape):
        self.det = det
        self.grid_shape = tuple(int(n) for n in grid_shape)
        self.domain = pixel_space(self.grid_shape)
        self.codomain = det.data_space()
        self.mask = disc_mask(self.grid_shape)
        self._mats: dict[int, sp.csr_matrix] = {}
        self._mats_t: dict[int, sp.csr_matrix] = {}

    def matrix(self, i: int) -> sp.csr_matrix:
        if not 0 <= i < self.det.N:
            raise IndexError(f"detector index {i} out of range")
        A = self._mats.get(i)
        if A is None:
            r, c, v = _stencil(self.det, i, self.grid_shape, self.mask)
            A = sp.csr_matrix((v, (r, c)), shape=(self.det.n_t, self.domain.size))
            A.sum_duplicates()
            self._mats[i] = A
            self._mats_t[i] = A.T.tocsr()
        return A

    def forward(self, x: np.ndarray, i: int) -> np.ndarray:
        self.domain.check(x)
        return self.matrix(i) @ x

    def adjoint(self, y: np.ndarray, i: int) -> np.ndarray:
        self.codomain.check(y)
        self.matrix(i)
        return self._mats_t[i] @ (self.codomain.weights * y) / self.domain.cell_weight

    def block(self, i: int, norm_bound: float = 1.0) -> OperatorBlock:
        return linear_block(
            lambda x, i=i: self.forward(x, i),
            lambda y, i=i: self.adjoint(y, i),
            self.domain, self.codomain, norm_bound,
            adjoint_tol=1e-10, name=f"radon[{i}]",
        )

    def analytic_adjoint_block(self, i: int, norm_bound: float = 1.0) -> OperatorBlock:
        """Forward map paired with the continuous adjoint formula (cross-check only)."""
        return linear_block(
            lambda x, i=i: self.forward(x, i),
            lambda y, i=i: radon_adjoint_analytic(y, self.det, i, self.grid_shape),
            self.domain, self.codomain, norm_bound,
            adjoint_tol=1e-10, name=f"radon-analytic[{i}]",
        )


@functools.lru_cache(maxsize=8)
def _transform(det: DetectorSet, grid_shape: tuple[int, int]) -> CircularMeanTransform:
    return CircularMeanTransform(det, grid_shape)


def radon_forward(x: ParameterVector, det: DetectorSet, i: int) -> DataBlock:
    T = _transform(det, x.grid_shape)
    return DataBlock(T.forward(x.values, i), T.codomain.weights)


def radon_adjoint(y: DataBlock, det: DetectorSet, i: int, grid) -> ParameterVector:
    T = _transform(det, tuple(grid))
    return ParameterVector(T.adjoint(np.asarray(y.values), i), T.grid_shape,
                           T.domain.cell_weight)


def radon_adjoint_analytic(y, det: DetectorSet, i: int, grid) -> np.ndarray:
    """``y(|xi_i - z|) / sqrt(pi)`` on the disc pixels, ``y`` linearly interpolated."""
    y = np.asarray(getattr(y, "values", y), dtype=float)
    X, Y = pixel_centers(tuple(grid))
    cx, cy = det.centers[i]
    d = np.hypot(X - cx, Y - cy).ravel()
    out = np.interp(d, np.asarray(det.radial_grid), y, right=0.0) / SQRT_PI
    return np.where(disc_mask(tuple(grid)), out, 0.0)


# ---------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class Disc:
    center: tuple[float, float]
    radius: float
    amplitude: float

    def __call__(self, X, Y):
        inside = (X - self.center[0]) ** 2 + (Y - self.center[1]) ** 2 <= self.radius**2
        return self.amplitude * inside


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    angle: float  # degrees
    amplitude: float

    def __call__(self, X, Y):
        a = np.deg2rad(self.angle)
        dx, dy = X - self.center[0], Y - self.center[1]
        u = np.cos(a) * dx + np.sin(a) * dy
        v = -np.sin(a) * dx + np.cos(a) * dy
        inside = (u / self.semi_axes[0]) ** 2 + (v / self.semi_axes[1]) ** 2 <= 1.0
        return self.amplitude * inside


@dataclass(frozen=True)
class Gaussian:
    center: tuple[float, float]
    width: float
    amplitude: float

    def __call__(self, X, Y):
        r2 = (X - self.center[0]) ** 2 + (Y - self.center[1]) ** 2
        return self.amplitude * np.exp(-r2 / (2 * self.width**2))


@dataclass(frozen=True)
class PhantomSpec:
    shapes: tuple
    grid: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "grid", tuple(int(n) for n in self.grid))
        if not all(np.isfinite(s.amplitude) for s in self.shapes):
            raise ValueError("shape amplitudes must be finite")

    def with_grid(self, grid) -> "PhantomSpec":
        return PhantomSpec(self.shapes, grid)


def make_phantom(spec: PhantomSpec) -> ParameterVector:
    """Rasterize ``spec`` at the pixel centers; zero outside the unit disc."""
    X, Y = pixel_centers(spec.grid)
    img = np.zeros(spec.grid)
    for shape in spec.shapes:
        img += shape(X, Y)
    img[X**2 + Y**2 > 1.0] = 0.0
    return ParameterVector(img.ravel(), spec.grid, pixel_space(spec.grid).cell_weight)


def parse_scene(text: str) -> list:
    shapes = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *args = line.split()
        try:
            vals = [float(a) for a in args]
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric shape parameter") from None
        expected = {"disc": 4, "ellipse": 6, "gaussian": 4}.get(kind)
        if expected is None:
            raise ValueError(f"line {lineno}: unknown shape {kind!r}")
        if len(vals) != expected:
            raise ValueError(f"line {lineno}: {kind} takes {expected} numbers, got {len(vals)}")
        if kind == "disc":
            shapes.append(Disc((vals[0], vals[1]), vals[2], vals[3]))
        elif kind == "ellipse":
            shapes.append(Ellipse((vals[0], vals[1]), (vals[2], vals[3]), vals[4], vals[5]))
        else:
            shapes.append(Gaussian((vals[0], vals[1]), vals[2], vals[3]))
    return shapes


def load_scene(path, grid) -> PhantomSpec:
    return PhantomSpec(parse_scene(Path(path).read_text(encoding="utf-8")), grid)


def default_phantom(grid) -> PhantomSpec:
    text = (Path(__file__).parent / "data" / "default_phantom.txt").read_text(encoding="utf-8")
    return PhantomSpec(parse_scene(text), grid)


# ---------------------------------------------------------------------------
# data


def synthesize_data(spec: PhantomSpec, det: DetectorSet, refinement: int = 2) -> list[DataBlock]:
    """Exact data from the phantom rasterized on a ``refinement`` times finer grid.

    The angular resolution is refined by the same factor; the radial grid is
    the working one.  Stencils are applied matrix-free, one detector at a time.
    """
    if refinement < 1:
        raise ValueError("refinement must be >= 1")
    fine_grid = (spec.grid[0] * refinement, spec.grid[1] * refinement)
    x = make_phantom(spec.with_grid(fine_grid)).values
    fine_det = DetectorSet(det.centers, det.radial_grid, det.angular_count * refinement)
    mask = disc_mask(fine_grid)
    w = det.data_weights()
    out = []
    for i in range(det.N):
        r, c, v = _stencil(fine_det, i, fine_grid, mask)
        out.append(DataBlock(np.bincount(r, weights=v * x[c], minlength=det.n_t), w))
    return out


def build_system(spec: PhantomSpec, det: DetectorSet, noise_rel: float, seed: int,
                 refinement: int = 2, norm_bound: float = 1.0):
    """Assemble the photoacoustic system for a phantom.

    ``refinement = 0`` generates consistent data with the working operator
    itself.  Returns ``(system, transform)``.
    """
    T = CircularMeanTransform(det, spec.grid)
    x_true = make_phantom(spec)
    if refinement == 0:
        y = [DataBlock(T.forward(x_true.values, i), T.codomain.weights) for i in range(det.N)]
    else:
        y = synthesize_data(spec, det, refinement)
    y_delta, delta = add_noise(y, noise_rel, seed)
    blocks = [T.block(i, norm_bound) for i in range(det.N)]
    system = ProblemSystem(blocks, [yd.values for yd in y_delta], delta, x_true.values)
    return system, T


def default_detectors(grid_rows: int, N: int = 50, n_t: int | None = None,
                      n_sigma: int | None = None) -> DetectorSet:
    n_t = n_t or 2 * grid_rows
    n_sigma = n_sigma or 4 * n_t
    return make_detectors(N, n_t, n_sigma)

