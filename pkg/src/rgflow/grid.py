"""Periodic lattice geometry, fields, kernels and dense multi-leg tensors.

Conventions used throughout the package:

* The torus has period 2*pi per axis, n sites per axis, spacing h = 2*pi/n.
* Dual lattice frequencies are the integers in (-n/2, n/2].
* A kernel is stored as a *density* against Lebesgue measure together with
  its Fourier multiplier  mult(k) = h^d * sum_x density(x) exp(-i k.x).
  A lattice Dirac delta therefore has density h^{-d} at the origin and
  multiplier identically one.
* convolve(a, k)(x) = h^d * sum_y density(x-y) a(y) = ifft(fft(a) * mult).
* A dense tensor with m legs carries an explicit h^{dm} measure factor in
  every contraction and norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .errors import ArityError, EmptyWindowError, GridMismatchError, MemoryGuardError

# Dense tensors beyond this many values are refused outright.
DENSE_VALUE_CAP = 2 ** 31


@dataclass(frozen=True)
class TorusGrid:
    """Uniform lattice on the d-dimensional torus of period 2*pi."""

    d: int
    n: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"spatial dimension must be 1 or 2, got {self.d}")
        if self.n < 8 or (self.n & (self.n - 1)) != 0:
            raise ValueError(f"points per axis must be a power of two >= 8, got {self.n}")

    @property
    def h(self) -> float:
        return 2.0 * np.pi / self.n

    @property
    def shape(self):
        return (self.n,) * self.d

    @property
    def nsites(self) -> int:
        return self.n ** self.d

    def frequencies(self):
        """Integer frequency array along one axis, fft order."""
        return np.fft.fftfreq(self.n, 1.0 / self.n)

    def freq_square(self):
        """|k|^2 on the dual lattice, shaped like a field."""
        k = self.frequencies()
        if self.d == 1:
            return k * k
        return k[:, None] ** 2 + k[None, :] ** 2

    def distance(self):
        """Periodic geodesic distance from the origin, shaped like a field."""
        x = np.arange(self.n) * self.h
        x = np.minimum(x, 2.0 * np.pi - x)
        if self.d == 1:
            return x
        return np.sqrt(x[:, None] ** 2 + x[None, :] ** 2)

    def coords(self):
        """Integer site coordinates per axis for a flat site index."""
        idx = np.arange(self.nsites)
        if self.d == 1:
            return (idx,)
        return (idx // self.n, idx % self.n)


def _check_same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatchError("operands live on different grids")


@dataclass
class Field:
    """Real-valued function sampled on the lattice sites."""

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    def sup(self) -> float:
        """Sup norm, the lattice version of the L^inf norm."""
        return float(np.abs(self.values).max())

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())

    def __add__(self, other):
        _check_same_grid(self, other)
        return Field(self.grid, self.values + other.values)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return Field(self.grid, self.values - other.values)

    def __neg__(self):
        return Field(self.grid, -self.values)

    def __mul__(self, c):
        if isinstance(c, Field):
            _check_same_grid(self, c)
            return Field(self.grid, self.values * c.values)
        return Field(self.grid, self.values * float(c))

    __rmul__ = __mul__


def constant_field(grid: TorusGrid, c: float) -> Field:
    return Field(grid, np.full(grid.shape, float(c)))


def apply_multiplier(values: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
    """Convolution of shaped real values with a kernel given by its multiplier."""
    return np.fft.ifftn(np.fft.fftn(values) * multiplier).real


@dataclass
class GridKernel:
    """Translation-invariant kernel: density plus consistent Fourier multiplier."""

    grid: TorusGrid
    density: np.ndarray
    multiplier: np.ndarray

    @classmethod
    def from_density(cls, grid: TorusGrid, density: np.ndarray) -> "GridKernel":
        density = np.asarray(density, dtype=float)
        mult = np.fft.fftn(density) * grid.h ** grid.d
        return cls(grid, density, mult)

    @classmethod
    def from_multiplier(cls, grid: TorusGrid, multiplier: np.ndarray) -> "GridKernel":
        multiplier = np.asarray(multiplier, dtype=complex)
        density = np.fft.ifftn(multiplier).real / grid.h ** grid.d
        return cls(grid, density, multiplier)

    @classmethod
    def delta(cls, grid: TorusGrid) -> "GridKernel":
        density = np.zeros(grid.shape)
        density[(0,) * grid.d] = grid.h ** (-grid.d)
        return cls(grid, density, np.ones(grid.shape, dtype=complex))

    @property
    def norm_tv(self) -> float:
        """Total variation norm h^d * sum |density|."""
        return float(np.abs(self.density).sum() * self.grid.h ** self.grid.d)

    def consistency_error(self) -> float:
        """Relative mismatch between density and multiplier."""
        mult = np.fft.fftn(self.density) * self.grid.h ** self.grid.d
        scale = max(np.abs(self.multiplier).max(), 1e-300)
        return float(np.abs(mult - self.multiplier).max() / scale)

    def scaled(self, c: float) -> "GridKernel":
        return GridKernel(self.grid, self.density * c, self.multiplier * c)


def convolve(a: Field, k: GridKernel) -> Field:
    """Periodic convolution of a field with a kernel via Fourier multipliers."""
    _check_same_grid(a, k)
    return Field(a.grid, apply_multiplier(a.values, k.multiplier))


def convolve_kernels(k1: GridKernel, k2: GridKernel) -> GridKernel:
    _check_same_grid(k1, k2)
    return GridKernel.from_multiplier(k1.grid, k1.multiplier * k2.multiplier)


def circulant_matrix(k: GridKernel) -> np.ndarray:
    """Dense (nsites, nsites) matrix M[x, y] = density(x - y)."""
    grid = k.grid
    if grid.nsites ** 2 > DENSE_VALUE_CAP:
        raise MemoryGuardError("circulant matrix would exceed the value cap")
    if grid.d == 1:
        idx = np.arange(grid.n)
        return k.density[(idx[:, None] - idx[None, :]) % grid.n]
    ix, iy = grid.coords()
    di = (ix[:, None] - ix[None, :]) % grid.n
    dj = (iy[:, None] - iy[None, :]) % grid.n
    return k.density[di, dj]


@dataclass
class DenseCoeffTensor:
    """Dense kernel with one anchor index and m leg indices (density convention)."""

    grid: TorusGrid
    legs: int
    data: np.ndarray
    symmetric: bool = False
    value_cap: int = DENSE_VALUE_CAP

    def __post_init__(self):
        if self.legs < 0:
            raise ValueError("legs must be nonnegative")
        nvals = self.grid.nsites ** (1 + self.legs)
        if nvals > self.value_cap:
            raise MemoryGuardError(
                f"dense tensor with {nvals} values exceeds the cap {self.value_cap}"
            )
        if self.legs > 0 and (self.grid.d != 1 or self.grid.n > 64 or self.legs > 3):
            raise MemoryGuardError(
                "dense tensors are limited to m <= 3 legs at n <= 64, d = 1"
            )
        self.data = np.asarray(self.data, dtype=float)
        if self.data.shape != self.grid.shape * (1 + self.legs):
            raise ValueError("dense tensor shape does not match grid/legs")

    @classmethod
    def delta(cls, grid: TorusGrid, legs: int, weight: float = 1.0) -> "DenseCoeffTensor":
        """weight * delta^{[m]}: all legs pinned to the anchor site."""
        n = grid.nsites
        data = np.zeros((n,) * (1 + legs))
        idx = np.arange(n)
        data[(idx,) * (1 + legs)] = weight * grid.h ** (-grid.d * legs)
        return cls(grid, legs, data.reshape(grid.shape * (1 + legs)), symmetric=True)

    def contract(self, args) -> Field:
        """x -> h^{dm} sum_y data[x; y_1..y_m] prod_j args_j(y_j)."""
        if len(args) != self.legs:
            raise ArityError(f"expected {self.legs} arguments, got {len(args)}")
        out = self.data
        for a in reversed(args):
            _check_same_grid(self, a)
            out = np.tensordot(out, a.values, axes=self.grid.d)
        out = out * self.grid.h ** (self.grid.d * self.legs)
        return Field(self.grid, out)

    def vm_norm(self) -> float:
        """sup over anchor of the total variation in the leg variables."""
        flat = self.data.reshape(self.grid.nsites, -1)
        return float(np.abs(flat).sum(axis=1).max() * self.grid.h ** (self.grid.d * self.legs))

    def symmetrized(self) -> "DenseCoeffTensor":
        """Average over all permutations of the leg indices."""
        if self.legs <= 1:
            return DenseCoeffTensor(self.grid, self.legs, self.data.copy(), symmetric=True)
        d = self.grid.d
        acc = np.zeros_like(self.data)
        for perm in permutations(range(self.legs)):
            axes = tuple(range(d)) + tuple(
                d + p * d + j for p in perm for j in range(d)
            )
            acc += np.transpose(self.data, axes)
        acc /= math.factorial(self.legs)
        return DenseCoeffTensor(self.grid, self.legs, acc, symmetric=True)

    def symmetry_defect(self, rng: np.random.Generator, trials: int = 32) -> float:
        """Max mismatch under random leg permutations at random index tuples."""
        if self.legs <= 1:
            return 0.0
        flat = self.data.reshape((self.grid.nsites,) * (1 + self.legs))
        worst = 0.0
        for _ in range(trials):
            idx = rng.integers(0, self.grid.nsites, size=1 + self.legs)
            perm = rng.permutation(self.legs)
            jdx = np.concatenate(([idx[0]], idx[1:][perm]))
            worst = max(worst, abs(flat[tuple(idx)] - flat[tuple(jdx)]))
        return worst

    def smooth(self, multiplier: np.ndarray) -> "DenseCoeffTensor":
        """Convolve every index (anchor and legs) with the given multiplier."""
        d = self.grid.d
        out = self.data.astype(complex)
        for group in range(1 + self.legs):
            axes = tuple(range(group * d, group * d + d))
            out = np.fft.fftn(out, axes=axes)
            shape = [1] * out.ndim
            for j, ax in enumerate(axes):
                shape[ax] = multiplier.shape[j]
            out = out * multiplier.reshape(shape)
            out = np.fft.ifftn(out, axes=axes)
        return DenseCoeffTensor(self.grid, self.legs, out.real, symmetric=self.symmetric)


def besov_norm(phi: Field, alpha: float, kernels, mus=None) -> float:
    """Hoelder-Besov norm: max over the scale grid of [mu]^{-alpha} ||K_mu * phi||.

    ``kernels`` must expose ``scale_grid.mus``, ``sigma`` and ``k_mult(mu)``;
    ``mus`` optionally restricts the scales used.
    """
    if mus is None:
        mus = kernels.scale_grid.mus
    mus = np.asarray(mus, dtype=float)
    if mus.size == 0:
        raise EmptyWindowError("besov norm needs a nonempty scale grid")
    best = 0.0
    for mu in mus:
        smooth = apply_multiplier(phi.values, kernels.k_mult(mu))
        val = mu ** (-alpha / kernels.sigma) * float(np.abs(smooth).max())
        best = max(best, val)
    return best
