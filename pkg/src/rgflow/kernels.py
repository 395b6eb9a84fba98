"""Green function, position-space scale decomposition and regularizing kernels.

Scale conventions: a scale parameter mu in (0, 1] has characteristic length
len(mu) = mu**(1/sigma).  The decomposed Green function G_mu cuts G off in
position space with a smooth step chi applied to (periodic distance)**sigma,
so that the scale derivative Gdot_mu is supported in a thin shell of radius
at most len(mu) for mu <= 1/2.

The regularizing kernel Ktilde_mu inverts (1 - len(mu)^2 Laplacian)^(d+2).
It is built in position space from the periodized Bessel-type closed form
and renormalized to unit mass, which keeps it exactly nonnegative with
total variation one on the lattice; its Fourier multiplier then agrees with
(1 + len(mu)^2 |k|^2)^-(d+2) up to the (tiny) lattice aliasing error.
K_mu is the triple convolution Ktilde_mu * Ktilde_mu * Ktilde_mu.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc, gammaln
from scipy.special import gamma as gamma_fn
from scipy.special import kv as bessel_kv

from .errors import EmptyWindowError, RegimeError, UnderResolvedError
from .grid import Field, GridKernel, TorusGrid, apply_multiplier


def length_scale(mu: float, sigma: float) -> float:
    """Characteristic length mu**(1/sigma) of the scale parameter mu."""
    return float(mu) ** (1.0 / sigma)


# ---------------------------------------------------------------------------
# smooth cutoff profile


@dataclass(frozen=True)
class ChiProfile:
    """Smooth step: 0 for r <= lo, 1 for r >= hi, integrated bump between.

    The step is the normalized integral of ((r-lo)(hi-r))^power, evaluated
    through the regularized incomplete beta function, with the derivative
    available in closed form for the scale derivative of G_mu.  The default
    power keeps the step smooth enough for the resolvent guards while
    leaving the shell transit of a lattice site wide enough in the scale
    parameter for the flow quadrature to resolve.
    """

    lo: float = 0.25
    hi: float = 0.5
    power: int = 8

    def value(self, r: np.ndarray) -> np.ndarray:
        s = np.clip((np.asarray(r, dtype=float) - self.lo) / (self.hi - self.lo), 0.0, 1.0)
        return betainc(self.power + 1, self.power + 1, s)

    def deriv(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        s = (r - self.lo) / (self.hi - self.lo)
        inside = (s > 0.0) & (s < 1.0)
        out = np.zeros_like(r)
        si = s[inside]
        p = self.power
        log_norm = gammaln(2 * p + 2) - 2.0 * gammaln(p + 1)
        out[inside] = np.exp(
            log_norm + p * (np.log(si) + np.log1p(-si))
        ) / (self.hi - self.lo)
        return out


DEFAULT_CHI = ChiProfile()


def periodic_radius(grid: TorusGrid) -> np.ndarray:
    """Smooth radial coordinate: the geodesic distance below pi/2 per axis,
    flattened with all derivatives vanishing at the cut locus.

    Equals the periodic Euclidean distance wherever every axis offset is at
    most pi/2, which covers the whole support of the shell kernels for
    mu <= 1/2; beyond that it stays monotone and smooth so that cutoff
    kernels keep fast-decaying spectra instead of picking up cut-locus kinks.
    """
    x = np.arange(grid.n) * grid.h
    x = np.minimum(x, 2.0 * np.pi - x) / np.pi  # u in [0, 1]
    q = 16
    u = np.clip(2.0 * x - 1.0, 0.0, 1.0)
    # s(x) = x - int_0^x I_v(q, q) dv on [1/2, 1], via one integration by parts
    corr = u * betainc(q, q, u) - _beta_primitive(q, u)
    smooth = np.pi * (x - 0.5 * corr)
    if grid.d == 1:
        return smooth
    return np.sqrt(smooth[:, None] ** 2 + smooth[None, :] ** 2)


def _beta_primitive(q: int, u: np.ndarray) -> np.ndarray:
    """int_0^u v * (beta(q,q) density)(v) dv, for the radius flattening."""
    # d/dv I_v(q,q) = v^(q-1)(1-v)^(q-1)/B(q,q); integrate v * density by the
    # identity v * dens_(q,q)(v) = (1/2) dens_(q+1,q)(v)-rescaled mass ratio
    # mass ratio: B(q+1,q)/B(q,q) = q/(2q) = 1/2
    return 0.5 * betainc(q + 1, q, u)


# ---------------------------------------------------------------------------
# core kernel constructors


def green_kernel(grid: TorusGrid, sigma: float) -> GridKernel:
    """Fundamental solution of (1 - Laplacian)^(sigma/2) on the torus.

    Realized by the exact multiplier (1 + |k|^2)^(-sigma/2) over the integer
    dual lattice, i.e. the periodization of the whole-space kernel.
    """
    if not 0.0 < sigma <= 2.0:
        raise RegimeError(f"green kernel needs sigma in (0, 2], got {sigma}")
    mult = (1.0 + grid.freq_square()) ** (-sigma / 2.0)
    return GridKernel.from_multiplier(grid, mult.astype(complex))


def scale_decomposition(g: GridKernel, mu: float, sigma: float,
                        chi: ChiProfile = DEFAULT_CHI):
    """Return (G_mu, Gdot_mu) for the position-space cutoff decomposition.

    G_mu(x) = chi(|x|^sigma (1-mu)/mu) G(x), with |x| the periodic geodesic
    distance throughout the support of the cutoff for mu <= 1/2 (the smooth
    radial coordinate flattens only beyond half the cut-locus distance);
    Gdot_mu is the analytic mu-derivative.  mu = 0 returns (G, 0) and mu = 1
    gives G_1 = 0 identically.
    """
    grid = g.grid
    if mu == 0.0:
        zero = GridKernel(grid, np.zeros(grid.shape), np.zeros(grid.shape, dtype=complex))
        return g, zero
    radius = periodic_radius(grid).copy()
    # the origin cell carries its half-cell radius: with radius zero the
    # cutoff would zero that site for every positive scale and the family
    # would jump at scale zero instead of converging to G
    radius[(0,) * grid.d] = 0.5 * grid.h
    r = radius ** sigma
    arg = r * (1.0 - mu) / mu
    g_mu = GridKernel.from_density(grid, chi.value(arg) * g.density)
    gdot = GridKernel.from_density(grid, -(r / mu ** 2) * chi.deriv(arg) * g.density)
    return g_mu, gdot


def shell_outer_radius(mu: float, sigma: float) -> float:
    """Outer support radius of Gdot_mu: (mu / (2 (1-mu)))^(1/sigma)."""
    if mu >= 1.0:
        return np.inf
    return (mu / (2.0 * (1.0 - mu))) ** (1.0 / sigma)


def _matern_profile(dist: np.ndarray, lscale: float, nu: float, d: int) -> np.ndarray:
    """Whole-space kernel of (1 - lscale^2 Laplacian)^(-nu), unnormalized.

    Inverse Fourier transform of (1 + lscale^2 |k|^2)^(-nu) in d dimensions,
    a Bessel-type potential r^(nu - d/2) K_(nu - d/2)(r / lscale).
    """
    u = np.asarray(dist, dtype=float) / lscale
    order = nu - d / 2.0
    out = np.zeros_like(u)
    pos = u > 0.0
    with np.errstate(over="ignore"):
        out[pos] = u[pos] ** order * bessel_kv(order, u[pos])
    out[~np.isfinite(out)] = 0.0
    # r -> 0 limit: 2^(order-1) Gamma(order), finite for order > 0
    out[~pos] = 2.0 ** (order - 1.0) * gamma_fn(order)
    return out


def bessel_kernel(grid: TorusGrid, lscale: float, nu: float) -> GridKernel:
    """Periodized positive kernel with multiplier ~ (1 + lscale^2 |k|^2)^(-nu).

    Built by sampling the whole-space closed form, periodizing, and
    renormalizing to unit mass; exactly nonnegative with TV norm one.
    Degenerates gracefully to the lattice delta when lscale is far below
    the lattice spacing.
    """
    h = grid.h
    if lscale < 1e-3 * h:
        return GridKernel.delta(grid)
    x = np.arange(grid.n) * h
    images = int(np.ceil(10.0 * lscale / (2.0 * np.pi))) + 1
    if grid.d == 1:
        dens = np.zeros(grid.n)
        for j in range(-images, images + 1):
            dens += _matern_profile(np.abs(x + 2.0 * np.pi * j), lscale, nu, 1)
    else:
        dens = np.zeros(grid.shape)
        for jx in range(-images, images + 1):
            for jy in range(-images, images + 1):
                dx = x + 2.0 * np.pi * jx
                dy = x + 2.0 * np.pi * jy
                dens += _matern_profile(
                    np.sqrt(dx[:, None] ** 2 + dy[None, :] ** 2), lscale, nu, 2
                )
    mass = dens.sum() * h ** grid.d
    if mass <= 0.0 or not np.isfinite(mass):
        return GridKernel.delta(grid)
    return GridKernel.from_density(grid, dens / mass)


def regularizer(grid: TorusGrid, mu: float, sigma: float):
    """Return (Ktilde_mu, K_mu); K_mu is the cube of Ktilde_mu."""
    if mu == 0.0:
        delta = GridKernel.delta(grid)
        return delta, GridKernel.delta(grid)
    lmu = length_scale(mu, sigma)
    ktilde = bessel_kernel(grid, lmu, grid.d + 2)
    k = GridKernel.from_multiplier(grid, ktilde.multiplier ** 3)
    return ktilde, k


def transfer_kernel(family, mu: float, eta: float) -> GridKernel:
    """Kernel K_{mu,eta} with K_{mu,eta} * K_eta = K_mu, for eta <= mu."""
    if eta > mu:
        raise RegimeError(f"transfer kernel needs eta <= mu, got eta={eta} > mu={mu}")
    ratio = family.k_mult(mu) / family.k_mult(eta)
    return GridKernel.from_multiplier(family.grid, ratio)


# ---------------------------------------------------------------------------
# mollifier


@dataclass(frozen=True)
class MollifierSpec:
    """Smooth even bump exp(-1/(1-u^2)) on the unit ball, unit mass."""

    quad_points: int = 400
    table_points: int = 8001
    table_qmax: float = 80.0

    def profile(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        inside = np.abs(u) < 1.0
        out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
        return out

    def transform_table(self):
        """Tabulated 1-d continuum Fourier transform, normalized to hat(0)=1."""
        nodes, weights = np.polynomial.legendre.leggauss(self.quad_points)
        vals = self.profile(nodes)
        mass = float((vals * weights).sum())
        q = np.linspace(0.0, self.table_qmax, self.table_points)
        tab = np.array([(vals * np.cos(qq * nodes) * weights).sum() for qq in q]) / mass
        return q, tab


DEFAULT_MOLLIFIER = MollifierSpec()
_TRANSFORM_CACHE: dict = {}


def mollifier_transform(q: np.ndarray, spec: MollifierSpec = DEFAULT_MOLLIFIER) -> np.ndarray:
    """Continuum transform of the bump profile at arbitrary frequencies."""
    key = (spec.quad_points, spec.table_points, spec.table_qmax)
    if key not in _TRANSFORM_CACHE:
        _TRANSFORM_CACHE[key] = spec.transform_table()
    qtab, tab = _TRANSFORM_CACHE[key]
    return np.interp(np.abs(q), qtab, tab, right=0.0)


def mollifier(grid: TorusGrid, kappa: float, sigma: float,
              spec: MollifierSpec = DEFAULT_MOLLIFIER, strict: bool = False) -> GridKernel:
    """Rescaled mollifier of width len(kappa) = kappa**(1/sigma).

    For len(kappa) >= 4h the kernel is sampled in position space, compactly
    supported inside radius len(kappa) and renormalized to unit mass.  Below
    4h the position realization is not trustworthy: with strict=True this
    raises, otherwise the kernel falls back to the spectral form whose
    multiplier is the exact continuum transform at the lattice frequencies
    (smoothly approaching the identity as kappa -> 0).
    """
    if not 0.0 < kappa <= 1.0:
        raise RegimeError(f"kappa must be in (0, 1], got {kappa}")
    lk = length_scale(kappa, sigma)
    h = grid.h
    if lk >= 4.0 * h:
        dist = grid.distance()
        dens = spec.profile(dist / lk) / lk ** grid.d
        dens[dist > lk] = 0.0
        mass = dens.sum() * h ** grid.d
        return GridKernel.from_density(grid, dens / mass)
    if strict:
        raise UnderResolvedError(
            f"mollifier scale {lk:.3e} below resolution guard 4h = {4 * h:.3e}"
        )
    if grid.d == 1:
        q = np.abs(grid.frequencies()) * lk
    else:
        q = np.sqrt(grid.freq_square()) * lk
    return GridKernel.from_multiplier(grid, mollifier_transform(q, spec).astype(complex))


# ---------------------------------------------------------------------------
# scale grid


@dataclass(frozen=True)
class ScaleGrid:
    """Ascending scales in (0, 1], geometric, containing exactly 1/2 and 1."""

    mus: tuple

    @classmethod
    def build(cls, mu_min: float, count: int) -> "ScaleGrid":
        """Geometric grid of `count` points on [mu_min, 1/2], extended to 1."""
        if not 0.0 < mu_min < 0.5 or count < 4:
            raise EmptyWindowError("need 0 < mu_min < 1/2 and count >= 4")
        mus = list(np.geomspace(mu_min, 0.5, count))
        mus[-1] = 0.5
        ratio = (0.5 / mu_min) ** (1.0 / (count - 1))
        mu = 0.5 * ratio
        while mu < 1.0 / np.sqrt(ratio):
            mus.append(mu)
            mu *= ratio
        mus.append(1.0)
        return cls(tuple(float(m) for m in mus))

    def __post_init__(self):
        mus = np.asarray(self.mus, dtype=float)
        if mus.size == 0:
            raise EmptyWindowError("empty scale grid")
        if not (np.all(np.diff(mus) > 0) and mus[0] > 0 and mus[-1] == 1.0):
            raise EmptyWindowError("scale grid must be ascending in (0, 1] ending at 1")
        if 0.5 not in self.mus:
            raise EmptyWindowError("scale grid must contain 1/2")

    @property
    def flow_mus(self):
        """Scales up to and including 1/2, where the flow is integrated."""
        return tuple(m for m in self.mus if m <= 0.5)

    def flow_intervals(self):
        """(mu_lo, mu_mid, mu_hi) triples covering [0, 1/2], first from 0."""
        pts = (0.0,) + self.flow_mus
        return [
            (pts[j], 0.5 * (pts[j] + pts[j + 1]), pts[j + 1])
            for j in range(len(pts) - 1)
        ]

    def window(self, lo: float, hi: float):
        return tuple(m for m in self.mus if lo <= m <= hi)


# ---------------------------------------------------------------------------
# kernel family


@dataclass
class ScaleKernels:
    """Per-scale bundle: cutoff Green function, its derivative, regularizers."""

    mu: float
    g_mu: GridKernel
    gdot: GridKernel
    ktilde: GridKernel
    k: GridKernel
    gtilde: GridKernel


@dataclass
class KernelFamily:
    """All kernels needed by the flow and the solver on one grid.

    Per grid scale it stores the cutoff Green function G_mu, the shell
    kernel Gdot_mu, the regularizing pair (Ktilde_mu, K_mu) and the
    amplified shell kernel Gtilde_mu with multiplier
    (1 + len(mu)^2 |k|^2)^(6(d+2)) * Gdot_mu-hat, so that
    K_mu * Gtilde_mu * K_mu = Gdot_mu exactly in Fourier space.
    Kernels at off-grid scales (quadrature nodes) are built on demand and
    cached; the family is immutable after construction and safe to share.
    """

    grid: TorusGrid
    sigma: float
    scale_grid: ScaleGrid
    chi: ChiProfile = DEFAULT_CHI
    mollifier_spec: MollifierSpec = DEFAULT_MOLLIFIER

    def __post_init__(self):
        self.green = green_kernel(self.grid, self.sigma)
        self._scales: dict = {}
        self._gmu_cache: dict = {}
        self._moll_cache: dict = {}
        self._plan = None
        self.diagnostics = {"ktilde_min_density": 0.0, "ktilde_tv_excess": 0.0}
        for mu in self.scale_grid.mus:
            self._scales[mu] = self._build_scale(mu)
        # diagnostic: total variation of the fully amplified shell kernel can
        # blow up on coarse lattices; the operative smearing constant of the
        # smoothed-variable solver is the shell kernel's own variation
        self.c_g = max(sk.gtilde.norm_tv for sk in self._scales.values())
        self.c_gdot = max(max(sk.gdot.norm_tv for sk in self._scales.values()), 1.0)

    def _build_scale(self, mu: float) -> ScaleKernels:
        g_mu, gdot = scale_decomposition(self.green, mu, self.sigma, self.chi)
        ktilde, k = regularizer(self.grid, mu, self.sigma)
        lmu = length_scale(mu, self.sigma)
        p6 = (1.0 + lmu ** 2 * self.grid.freq_square()) ** (6 * (self.grid.d + 2))
        gtilde = GridKernel.from_multiplier(self.grid, p6 * gdot.multiplier)
        self.diagnostics["ktilde_min_density"] = min(
            self.diagnostics["ktilde_min_density"], float(ktilde.density.min())
        )
        self.diagnostics["ktilde_tv_excess"] = max(
            self.diagnostics["ktilde_tv_excess"], abs(ktilde.norm_tv - 1.0)
        )
        return ScaleKernels(mu, g_mu, gdot, ktilde, k, gtilde)

    def at(self, mu: float) -> ScaleKernels:
        """Scale bundle at mu, built on demand for off-grid scales."""
        if mu not in self._scales:
            self._scales[mu] = self._build_scale(mu)
        return self._scales[mu]

    # multiplier accessors -------------------------------------------------

    def k_mult(self, mu: float) -> np.ndarray:
        if mu == 0.0:
            return np.ones(self.grid.shape)
        return self.at(mu).k.multiplier.real

    def ktilde_mult(self, mu: float) -> np.ndarray:
        if mu == 0.0:
            return np.ones(self.grid.shape)
        return self.at(mu).ktilde.multiplier.real

    def gtilde_mult(self, mu: float) -> np.ndarray:
        return self.at(mu).gtilde.multiplier

    def gdot_kernel(self, mu: float) -> GridKernel:
        if mu == 0.0:
            return GridKernel(self.grid, np.zeros(self.grid.shape),
                              np.zeros(self.grid.shape, dtype=complex))
        return self.at(mu).gdot

    def transfer_mult(self, mu_hi: float, mu_lo: float) -> np.ndarray:
        """Multiplier of K_{mu_hi, mu_lo} for mu_lo <= mu_hi."""
        if mu_lo > mu_hi:
            raise RegimeError("transfer multiplier needs mu_lo <= mu_hi")
        return self.k_mult(mu_hi) / self.k_mult(mu_lo)

    def fluctuation_kernel(self, mu: float) -> GridKernel:
        """G - G_mu, the propagator of fluctuations below scale mu."""
        g_mu = self.g_mu_kernel(mu)
        return GridKernel(self.grid, self.green.density - g_mu.density,
                          self.green.multiplier - g_mu.multiplier)

    def g_mu_kernel(self, mu: float) -> GridKernel:
        """Cutoff Green function alone (cheaper than the full scale bundle)."""
        if mu == 0.0:
            return self.green
        if mu in self._scales:
            return self._scales[mu].g_mu
        if mu not in self._gmu_cache:
            g_mu, _ = scale_decomposition(self.green, mu, self.sigma, self.chi)
            self._gmu_cache[mu] = g_mu
        return self._gmu_cache[mu]

    def step_kernel(self, lo: float, hi: float) -> GridKernel:
        """Exact scale integral of the shell kernel over [lo, hi].

        Equals G_hi - G_lo, which the flow uses as the one-step graft kernel;
        integrating the shell kernel exactly removes all aliasing from shells
        that cross the lattice resolution inside the step.
        """
        g_lo = self.g_mu_kernel(lo)
        g_hi = self.g_mu_kernel(hi)
        return GridKernel(self.grid, g_hi.density - g_lo.density,
                          g_hi.multiplier - g_lo.multiplier)

    def solver_plan(self):
        """Per-interval moments of the shell kernel for the solution map.

        For every grid interval [lo, hi] the pair (c0, c1) satisfies
        int_lo^hi Gdot_eta * (linear interpolant of f) d eta
            = c0 * f(lo) + c1 * f(hi)
        in Fourier space, with the zeroth moment G_hi - G_lo exact and the
        first moment via Gauss-Legendre on the smooth-in-scale G_eta.
        """
        if self._plan is not None:
            return self._plan
        nodes, weights = np.polynomial.legendre.leggauss(8)
        mus = self.scale_grid.mus
        plan = []
        for j in range(len(mus) - 1):
            lo, hi = mus[j], mus[j + 1]
            m0 = self.g_mu_kernel(hi).multiplier - self.g_mu_kernel(lo).multiplier
            integral = np.zeros(self.grid.shape, dtype=complex)
            for t, w in zip(nodes, weights):
                eta = 0.5 * (hi - lo) * t + 0.5 * (hi + lo)
                integral += 0.5 * (hi - lo) * w * self.g_mu_kernel(eta).multiplier
            m1 = hi * self.g_mu_kernel(hi).multiplier \
                - lo * self.g_mu_kernel(lo).multiplier - integral
            slope = (m1 - lo * m0) / (hi - lo)
            plan.append((lo, hi, m0 - slope, slope))
        self._plan = plan
        return plan

    def mollifier_kernel(self, kappa: float, strict: bool = False) -> GridKernel:
        key = (float(kappa), strict)
        if key not in self._moll_cache:
            self._moll_cache[key] = mollifier(
                self.grid, kappa, self.sigma, self.mollifier_spec, strict
            )
        return self._moll_cache[key]

    def length(self, mu: float) -> float:
        return length_scale(mu, self.sigma)

    def cache_key(self) -> str:
        payload = np.asarray(self.scale_grid.mus).tobytes()
        digest = hashlib.sha256(payload).hexdigest()[:12]
        return f"rgfk_d{self.grid.d}_n{self.grid.n}_s{self.sigma:.6g}_{digest}"
