"""Binary cache formats: kernels (RGFK), noise (RGFN), coefficients (RGFC),
solutions (RGFS).  All integers and floats are little-endian; arrays are raw
float64 in C order with shapes implied by the header."""

from __future__ import annotations

import struct

import numpy as np

from .errors import CacheFormatError
from .grid import Field, TorusGrid
from .kernels import KernelFamily, ScaleGrid
from .coeffs import CoeffRep, CoeffSet, FactoredTerm

_VERSION = 1


def _write_arr(f, arr):
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_arr(f, count):
    buf = f.read(8 * count)
    if len(buf) != 8 * count:
        raise CacheFormatError("truncated cache file")
    return np.frombuffer(buf, dtype="<f8").copy()


def _check_magic(f, magic):
    got = f.read(4)
    if got != magic:
        raise CacheFormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", f.read(4))
    if version != _VERSION:
        raise CacheFormatError(f"unsupported cache version {version}")


def save_family(family: KernelFamily, path):
    """RGFK: per-scale kernel densities in scale-major order."""
    grid = family.grid
    mus = family.scale_grid.mus
    with open(path, "wb") as f:
        f.write(b"RGFK")
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<II", grid.d, grid.n))
        f.write(struct.pack("<d", family.sigma))
        f.write(struct.pack("<I", len(mus)))
        _write_arr(f, np.asarray(mus))
        _write_arr(f, family.green.density)
        for mu in mus:
            sk = family.at(mu)
            for kern in (sk.g_mu, sk.gdot, sk.ktilde, sk.k, sk.gtilde):
                _write_arr(f, kern.density)


def load_family(path) -> KernelFamily:
    """Rebuild a kernel family from an RGFK cache; multipliers via FFT."""
    from .grid import GridKernel
    from .kernels import ScaleKernels

    with open(path, "rb") as f:
        _check_magic(f, b"RGFK")
        d, n = struct.unpack("<II", f.read(8))
        (sigma,) = struct.unpack("<d", f.read(8))
        (nscales,) = struct.unpack("<I", f.read(4))
        mus = tuple(_read_arr(f, nscales))
        grid = TorusGrid(d, n)
        nsites = grid.nsites
        green = GridKernel.from_density(grid, _read_arr(f, nsites).reshape(grid.shape))
        scales = {}
        for mu in mus:
            kerns = [
                GridKernel.from_density(grid, _read_arr(f, nsites).reshape(grid.shape))
                for _ in range(5)
            ]
            scales[mu] = ScaleKernels(mu, *kerns)
    family = KernelFamily.__new__(KernelFamily)
    family.grid = grid
    family.sigma = sigma
    family.scale_grid = ScaleGrid(mus)
    from .kernels import DEFAULT_CHI, DEFAULT_MOLLIFIER

    family.chi = DEFAULT_CHI
    family.mollifier_spec = DEFAULT_MOLLIFIER
    family.green = green
    family._scales = scales
    family._gmu_cache = {}
    family._moll_cache = {}
    family._plan = None
    family.diagnostics = {}
    family.c_g = max(sk.gtilde.norm_tv for sk in scales.values())
    family.c_gdot = max(max(sk.gdot.norm_tv for sk in scales.values()), 1.0)
    return family


def save_noise(path, seed: int, field: Field):
    """RGFN: seed plus the raw sample values."""
    with open(path, "wb") as f:
        f.write(b"RGFN")
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<II", field.grid.d, field.grid.n))
        f.write(struct.pack("<Q", seed & (2 ** 64 - 1)))
        _write_arr(f, field.values)


def load_noise(path):
    with open(path, "rb") as f:
        _check_magic(f, b"RGFN")
        d, n = struct.unpack("<II", f.read(8))
        (seed,) = struct.unpack("<Q", f.read(8))
        grid = TorusGrid(d, n)
        values = _read_arr(f, grid.nsites).reshape(grid.shape)
    return seed, Field(grid, values)


def save_coeffs(path, cset: CoeffSet):
    """RGFC: (order, legs, backend, scale, payload) records, factored backend."""
    grid = cset.grid
    keys = cset.entries()
    with open(path, "wb") as f:
        f.write(b"RGFC")
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<II", grid.d, grid.n))
        f.write(struct.pack("<dd", cset.kappa, cset.mu))
        f.write(struct.pack("<I", len(cset.counterterms)))
        _write_arr(f, np.asarray(cset.counterterms))
        f.write(struct.pack("<I", len(keys)))
        for key in keys:
            rep = cset.coeffs[key]
            if rep.backend != "factored":
                raise CacheFormatError("only factored coefficients are cacheable")
            f.write(struct.pack("<IIBI", key[0], key[1], 0, len(rep.terms)))
            for t in rep.terms:
                f.write(struct.pack("<BII", t.vertices, t.legs_root, t.legs_other))
                _write_arr(f, t.core)


def load_coeffs(path, pc) -> CoeffSet:
    with open(path, "rb") as f:
        _check_magic(f, b"RGFC")
        d, n = struct.unpack("<II", f.read(8))
        kappa, mu = struct.unpack("<dd", f.read(16))
        (ncts,) = struct.unpack("<I", f.read(4))
        cts = tuple(_read_arr(f, ncts))
        grid = TorusGrid(d, n)
        nsites = grid.nsites
        (ncoeffs,) = struct.unpack("<I", f.read(4))
        coeffs = {}
        for _ in range(ncoeffs):
            i, m, backend, nterms = struct.unpack("<IIBI", f.read(13))
            if backend != 0:
                raise CacheFormatError("unknown backend tag")
            terms = []
            for _ in range(nterms):
                vertices, k1, k2 = struct.unpack("<BII", f.read(9))
                count = nsites if vertices == 1 else nsites * nsites
                core = _read_arr(f, count)
                if vertices == 2:
                    core = core.reshape(nsites, nsites)
                terms.append(FactoredTerm(vertices, k1, k2, core))
            coeffs[(i, m)] = CoeffRep(grid, i, m, terms=terms)
    return CoeffSet(grid, pc, kappa, mu, coeffs, cts)


def save_solution(path, sol, family):
    """RGFS: scale-indexed state, the reconstructed field and residual trace."""
    grid = family.grid
    mus = np.asarray(sol.state.mus)
    with open(path, "wb") as f:
        f.write(b"RGFS")
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<II", grid.d, grid.n))
        f.write(struct.pack("<dd", family.sigma, sol.config.lam))
        f.write(struct.pack("<I", mus.size))
        _write_arr(f, mus)
        _write_arr(f, sol.state.phi)
        _write_arr(f, sol.state.zeta)
        _write_arr(f, sol.phi.values)
        f.write(struct.pack("<I", len(sol.distances)))
        _write_arr(f, np.asarray(sol.distances))


def load_solution(path):
    with open(path, "rb") as f:
        _check_magic(f, b"RGFS")
        d, n = struct.unpack("<II", f.read(8))
        sigma, lam = struct.unpack("<dd", f.read(16))
        (nscales,) = struct.unpack("<I", f.read(4))
        grid = TorusGrid(d, n)
        mus = _read_arr(f, nscales)
        phi_state = _read_arr(f, nscales * grid.nsites).reshape(nscales, grid.nsites)
        zeta = _read_arr(f, nscales * grid.nsites).reshape(nscales, grid.nsites)
        phi = _read_arr(f, grid.nsites).reshape(grid.shape)
        (nres,) = struct.unpack("<I", f.read(4))
        distances = _read_arr(f, nres)
    return {
        "sigma": sigma, "lam": lam, "mus": mus, "phi_state": phi_state,
        "zeta": zeta, "phi": Field(grid, phi), "distances": distances,
    }
