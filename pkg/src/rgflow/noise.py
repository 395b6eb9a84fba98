"""White-noise sampling, mollified realizations and reproducible ensembles.

Per-site values are i.i.d. centered Gaussians of variance h^{-d}, which is
the lattice discretization of white noise: Cov(xi(x_i), xi(x_j)) =
h^{-d} delta_ij, so that smeared covariances reproduce L^2 pairings.
Streams are generated with the counter-based Philox generator keyed by a
splitmix-derived 64-bit seed per ensemble member, making every member
bitwise reproducible and independent of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Field, TorusGrid, apply_multiplier

_GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def splitmix64(z: int) -> int:
    """One splitmix64 finalization round."""
    z = (z + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def member_seed(base_seed: int, index: int) -> int:
    """Seed of ensemble member `index`, independent of evaluation order."""
    return splitmix64((base_seed + index * _GOLDEN) & _MASK)


@dataclass
class NoiseRealization:
    """One white-noise sample plus a cache of its mollified versions."""

    grid: TorusGrid
    seed: int
    values: Field
    _mollified: dict = field(default_factory=dict, repr=False)

    def mollified(self, kappa: float, kernels, strict: bool = False) -> Field:
        """xi_kappa = mollifier * xi, cached per kappa."""
        key = (float(kappa), strict)
        if key not in self._mollified:
            mol = kernels.mollifier_kernel(kappa, strict)
            self._mollified[key] = Field(
                self.grid, apply_multiplier(self.values.values, mol.multiplier)
            )
        return self._mollified[key]


def sample_noise(grid: TorusGrid, seed: int) -> NoiseRealization:
    """Deterministic white-noise sample for (grid, seed)."""
    rng = np.random.Generator(np.random.Philox(key=seed & _MASK))
    std = grid.h ** (-grid.d / 2.0)
    vals = rng.standard_normal(grid.shape) * std
    return NoiseRealization(grid, seed, Field(grid, vals))


def mollify(xi: NoiseRealization, kappa: float, kernels, strict: bool = False) -> Field:
    """Mollified noise xi_kappa; delegates to the realization cache."""
    return xi.mollified(kappa, kernels, strict)


@dataclass(frozen=True)
class EnsembleSpec:
    """Reproducible ensemble: member i uses splitmix(base_seed, i)."""

    base_seed: int
    count: int

    def seeds(self):
        return [member_seed(self.base_seed, i) for i in range(self.count)]

    def members(self, grid: TorusGrid):
        return [sample_noise(grid, s) for s in self.seeds()]
