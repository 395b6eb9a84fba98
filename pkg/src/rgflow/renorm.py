"""Power counting, counterterm computation, cumulant estimation, scaling fits.

The scaling dimension of a coefficient with order i and m legs is
rho(i, m) = alpha - sigma - m*alpha + i*gamma with alpha = sigma - d/2 - eps
and gamma = 3*sigma - d - 3*eps.  Coefficients with rho <= 0 are relevant
and need probabilistic input; the mass coefficients (orders up to i_sharp)
need counterterms, fixed here by the condition that the expected mass of
the order-i one-leg coefficient vanishes at the stop scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .coeffs import (
    CoeffRep,
    CoeffSet,
    FactoredTerm,
    coeff_mass,
    merge_terms,
    run_flow,
)
from .errors import EmptyWindowError, RegimeError, SupercriticalError
from .grid import Field, GridKernel, TorusGrid, apply_multiplier
from .kernels import (
    DEFAULT_CHI,
    DEFAULT_MOLLIFIER,
    ScaleGrid,
    green_kernel,
    length_scale,
    mollifier_transform,
    scale_decomposition,
)
from .noise import member_seed, sample_noise

# ---------------------------------------------------------------------------
# power counting


@dataclass(frozen=True)
class PowerCounting:
    """Scaling exponents and derived truncation orders for (d, sigma, eps).

    boundary_orders lists the orders whose one-leg exponent vanishes exactly
    (up to roundoff); such configurations sit on a renormalization boundary
    and are treated as relevant, i.e. they receive a counterterm.
    """

    d: int
    sigma: float
    eps: float
    alpha: float
    gamma: float
    i_flat: int
    i_sharp: int
    boundary_orders: tuple = ()

    def rho(self, i: int, m: int) -> float:
        return self.alpha - self.sigma - m * self.alpha + i * self.gamma

    def rho_at(self, i: int, m: int, eps: float) -> float:
        a = self.sigma - self.d / 2.0 - eps
        g = 3.0 * self.sigma - self.d - 3.0 * eps
        return a - self.sigma - m * a + i * g

    def table(self, i_max: int = 8):
        return {(i, m): self.rho(i, m) for i in range(i_max + 1) for m in range(3 * i + 1)}

    def stored_targets(self):
        """(i, m) pairs of the nonvanishing coefficients kept by the flow."""
        out = [(0, 0)]
        for i in range(1, self.i_flat + 1):
            for m in range(min(3 * i, 2 * i + 1) + 1):
                out.append((i, m))
        return out

    def validate_eps_margin(self, l_max: int = 3, tol: float = 1e-9) -> bool:
        """eps is small enough: rho_eps(i,m) + l > 0 whenever rho_0(i,m) + l > 0.

        Exponents that vanish algebraically (up to roundoff) are boundary
        cases, not strictly positive, and are excluded.
        """
        for (i, m) in self.table():
            rho0 = self.rho_at(i, m, 0.0)
            for l in range(l_max + 1):
                if rho0 + l > tol and self.rho_at(i, m, self.eps) + l <= 0.0:
                    return False
        return True


def power_counting(d: int, sigma: float, eps: float = 0.0) -> PowerCounting:
    """Build the power-counting table; rejects supercritical parameters."""
    if sigma <= d / 3.0:
        raise SupercriticalError(
            f"supercritical: sigma = {sigma} <= d/3 = {d / 3.0:.6g}"
        )
    if sigma > d / 2.0:
        raise RegimeError(f"sigma = {sigma} above the singular window (d/2 = {d / 2.0})")
    gamma_eps = 3.0 * sigma - d - 3.0 * eps
    if gamma_eps <= 0.0:
        raise SupercriticalError(f"supercritical: gamma_eps = {gamma_eps:.6g} <= 0")
    alpha_eps = sigma - d / 2.0 - eps

    def rho0(i, m):
        a = sigma - d / 2.0
        g = 3.0 * sigma - d
        return a - sigma - m * a + i * g

    # exponents vanishing to roundoff sit on a renormalization boundary and
    # count as relevant (they get a counterterm)
    tol = 1e-9
    i_flat = next(i for i in range(1, 64) if rho0(i + 1, 0) > tol)
    i_sharp = next(i for i in range(1, 64) if rho0(i + 1, 1) > tol)
    boundary = tuple(i for i in range(1, i_sharp + 1) if abs(rho0(i, 1)) <= tol)
    return PowerCounting(d, sigma, eps, alpha_eps, gamma_eps, i_flat, i_sharp,
                         boundary)


def rho_of_pair(pc: PowerCounting, targets) -> float:
    """Additive scaling exponent of a list of coefficient indices."""
    return float(sum(pc.rho(i, m) for i, m in targets))


# ---------------------------------------------------------------------------
# Taylor split of translation-invariant one-leg kernels


@dataclass
class TaylorSplit:
    """Mass part and second-order remainders of a one-leg kernel."""

    grid: TorusGrid
    iv: float
    remainders: dict
    profile: np.ndarray
    invariance_defect: float
    parity_defect: float


def _signed_positions(grid: TorusGrid) -> np.ndarray:
    """Site offsets mapped to (-pi, pi], per axis, shape (nsites, d)."""
    x = np.arange(grid.n) * grid.h
    x = np.where(x > np.pi, x - 2.0 * np.pi, x)
    if grid.d == 1:
        return x[:, None]
    ix, iy = grid.coords()
    return np.stack([x[ix], x[iy]], axis=1)


def _freq_vectors(grid: TorusGrid) -> np.ndarray:
    k = grid.frequencies()
    if grid.d == 1:
        return k[:, None]
    return np.stack(
        [np.broadcast_to(k[:, None], grid.shape).reshape(-1),
         np.broadcast_to(k[None, :], grid.shape).reshape(-1)], axis=1
    )


def extract_profile(rep: CoeffRep, rtol: float = 1e-8):
    """Translation profile g with V(x; x+u) = g(u); raises if not invariant."""
    grid = rep.grid
    if rep.legs != 1:
        raise ValueError("taylor split needs a one-leg coefficient")
    profile = np.zeros(grid.nsites)
    defect = 0.0
    scale = 0.0
    for t in rep.terms:
        if t.vertices == 1:
            mean = float(t.core.mean())
            defect = max(defect, float(np.abs(t.core - mean).max()))
            scale = max(scale, float(np.abs(t.core).max()))
            profile[0] += mean * grid.h ** (-grid.d)
        else:
            if grid.d == 1:
                i = np.arange(grid.n)
                rolled = t.core[i[:, None], (i[:, None] + i[None, :]) % grid.n]
            else:
                ix, iy = grid.coords()
                tgt = ((ix[:, None] + ix[None, :]) % grid.n) * grid.n + \
                      ((iy[:, None] + iy[None, :]) % grid.n)
                rolled = t.core[np.arange(grid.nsites)[:, None], tgt]
            mean = rolled.mean(axis=0)
            defect = max(defect, float(np.abs(rolled - mean[None, :]).max()))
            scale = max(scale, float(np.abs(t.core).max()))
            profile += mean
    if scale > 0.0 and defect > rtol * scale:
        raise RegimeError(
            f"kernel is not translation invariant: defect {defect:.3e} vs scale {scale:.3e}"
        )
    return profile, defect


def taylor_split(rep: CoeffRep, quad_points: int = 32, rtol: float = 1e-8) -> TaylorSplit:
    """Split a symmetric translation-invariant one-leg kernel.

    Returns iv (the total mass) and per multi-index |a| = 2 the remainder
    kernels, built so that  V = iv * delta + sum_a d^a R^a  holds exactly on
    the lattice: the remainder multiplier is the integral-form Taylor rest
    of the kernel's transform, evaluated by Gauss-Legendre in the dilation
    parameter with exact off-lattice transforms of the small-support kernel.
    """
    grid = rep.grid
    profile, defect = extract_profile(rep, rtol)
    u = _signed_positions(grid)
    # parity check g(u) = g(-u)
    if grid.d == 1:
        flipped = profile[(-np.arange(grid.n)) % grid.n]
    else:
        ix, iy = grid.coords()
        flipped = profile.reshape(grid.shape)[(-ix) % grid.n, (-iy) % grid.n]
    pscale = max(float(np.abs(profile).max()), 1e-300)
    parity = float(np.abs(profile - flipped).max())
    if parity > rtol * pscale:
        raise RegimeError(f"kernel breaks the parity assumption: defect {parity:.3e}")
    hd = grid.h ** grid.d
    iv = float(profile.sum() * hd)
    nodes, weights = np.polynomial.legendre.leggauss(quad_points)
    tau = 0.5 * (nodes + 1.0)
    wtau = 0.5 * weights
    kvec = _freq_vectors(grid)
    support = np.abs(profile) > 0.0
    us = u[support]
    gs = profile[support] * hd
    remainders = {}
    multis = [(2,)] if grid.d == 1 else [(2, 0), (1, 1), (0, 2)]
    for a in multis:
        mono = np.ones(us.shape[0])
        for ax, p in enumerate(a):
            mono = mono * us[:, ax] ** p
        coeff = sum(a) / math.prod(math.factorial(p) for p in a)
        # r_hat(k) = coeff * int_0^1 (1-tau) * sum_u u^a g(u) exp(-i tau k.u) dtau
        rhat = np.zeros(grid.nsites, dtype=complex)
        for t, w in zip(tau, wtau):
            phase = np.exp(-1j * t * (kvec @ us.T))
            rhat += w * (1.0 - t) * (phase @ (mono * gs))
        rhat *= coeff
        dens = np.fft.ifftn(rhat.reshape(grid.shape)).real / hd
        if grid.d == 1:
            i = np.arange(grid.n)
            core = dens[(i[None, :] - i[:, None]) % grid.n]
        else:
            ix, iy = grid.coords()
            di = (ix[None, :] - ix[:, None]) % grid.n
            dj = (iy[None, :] - iy[:, None]) % grid.n
            core = dens.reshape(grid.shape)[di, dj]
        remainders[a] = CoeffRep(grid, rep.order, 1,
                                 terms=[FactoredTerm(2, 0, 1, core)])
    return TaylorSplit(grid, iv, remainders, profile, defect, parity)


def reconstruct_contraction(split: TaylorSplit, psi: Field) -> Field:
    """<iv*delta + sum_a d^a R^a, psi> with spectral leg derivatives."""
    grid = split.grid
    out = split.iv * psi.values.reshape(-1)
    k = grid.frequencies()
    for a, rep in split.remainders.items():
        mult = np.ones(grid.shape, dtype=complex)
        if grid.d == 1:
            mult = (1j * k) ** a[0]
        else:
            mult = (1j * k[:, None]) ** a[0] * (1j * k[None, :]) ** a[1]
        dpsi = np.fft.ifftn(np.fft.fftn(psi.values) * mult).real
        out = out + rep.contract([dpsi.reshape(-1)])
    return Field(grid, out.reshape(grid.shape))


# ---------------------------------------------------------------------------
# counterterms


@dataclass
class CountertermSchedule:
    """Mass counterterms per coupling order at one noise cutoff."""

    kappa: float
    values: tuple
    stderr: tuple
    method: str
    samples: int

    def padded(self, upto: int):
        vals = list(self.values) + [0.0] * max(0, upto - len(self.values))
        return tuple(vals)


def compute_counterterms(ens, kappa: float, family, pc: PowerCounting, *,
                         method: str = "monte-carlo", antithetic: bool = True,
                         strict_mollifier: bool = False,
                         max_order: int | None = None) -> CountertermSchedule:
    """Fix the mass counterterms order by order from the flow.

    c_i = - integral over the flow window of the anchor-averaged expected
    mass of the scale derivative of the order-i one-leg coefficient, using
    the same midpoint quadrature the flow itself integrates with, so that
    the installed schedule satisfies the vanishing-mass stop condition on
    the generating ensemble by construction.  Lower orders are installed
    before higher orders are measured.  Monte Carlo averages use antithetic
    noise pairs; the exact Gaussian evaluator covers order one.
    """
    if method == "exact-gaussian":
        if pc.i_sharp != 1:
            raise RegimeError("exact-gaussian counterterms only cover order one")
        c1 = exact_c1(family, kappa)
        return CountertermSchedule(kappa, (c1,), (0.0,), "exact-gaussian", 0)
    if method != "monte-carlo":
        raise ValueError(f"unknown counterterm method {method!r}")
    grid = family.grid
    top = pc.i_sharp if max_order is None else min(pc.i_sharp, max_order)
    values, errors = [], []
    schedule = [0.0] * top
    for order in range(1, top + 1):
        per_member = []
        for seed in ens.seeds():
            signs = (1.0, -1.0) if antithetic else (1.0,)
            acc = 0.0
            for sgn in signs:
                xi = sample_noise(grid, seed)
                xi_k = xi.mollified(kappa, family, strict_mollifier)
                if sgn < 0:
                    xi_k = Field(grid, -xi_k.values)
                integral = 0.0

                # the step rhs carries the exact scale integral of the shell
                # kernel, so its mass is already the full step contribution
                def hook(mu_lo, mu_hi, rhs_mid, _sink=None):
                    nonlocal integral
                    terms = rhs_mid.get((order, 1))
                    if terms:
                        integral += coeff_mass(terms, grid)

                run_flow(xi_k, family, pc, schedule, step_hook=hook,
                         order_cap=order)
                acc += integral
            per_member.append(acc / len(signs))
        arr = np.asarray(per_member)
        c = -float(arr.mean())
        err = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
        values.append(c)
        errors.append(err)
        schedule[order - 1] = c
    return CountertermSchedule(kappa, tuple(values), tuple(errors),
                               "monte-carlo", ens.count)


def exact_c1(family, kappa: float) -> float:
    """Order-one counterterm from the exact Gaussian dual-lattice sum.

    Equals -3 E[((G - G_stop) * xi_kappa)(x)^2] evaluated as
    -3 (2 pi)^-d sum_k (Ghat - Ghat_stop)^2 |mollifier-hat|^2.
    """
    grid = family.grid
    a = family.fluctuation_kernel(0.5).multiplier.real
    th = family.mollifier_kernel(kappa).multiplier.real
    return float(-3.0 * (a ** 2 * th ** 2).sum() / (2.0 * np.pi) ** grid.d)


def expected_mass(ens, kappa: float, family, pc: PowerCounting, order: int,
                  counterterms, *, strict_mollifier: bool = False):
    """Fresh-ensemble estimate of the stop-scale mass of F^(order, 1).

    Returns (mean, stderr) of the anchor-averaged mass over the ensemble.
    """
    grid = family.grid
    vals = []
    for seed in ens.seeds():
        xi = sample_noise(grid, seed)
        xi_k = xi.mollified(kappa, family, strict_mollifier)
        final = run_flow(xi_k, family, pc, counterterms, order_cap=order)
        rep = final.get(order, 1)
        vals.append(coeff_mass(rep, grid) if rep is not None else 0.0)
    arr = np.asarray(vals)
    err = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), err


def c1_fourier_oracle(sigma: float, kappas, *, n_oracle: int = 2 ** 18,
                      chi=DEFAULT_CHI, spec=DEFAULT_MOLLIFIER) -> np.ndarray:
    """Exact Gaussian order-one counterterms on a fine one-dimensional grid.

    Independent spectral oracle for the cutoff divergence of c1: the
    fluctuation propagator at the stop scale is built once at high
    resolution and paired with the exact continuum mollifier transform, so
    the full dual-lattice sum is effectively complete for every rung.
    """
    from .grid import TorusGrid as _Grid

    grid = _Grid(1, n_oracle)
    g = green_kernel(grid, sigma)
    g_half, _ = scale_decomposition(g, 0.5, sigma, chi)
    a = (g.multiplier - g_half.multiplier).real
    k = np.abs(grid.frequencies())
    out = []
    for kappa in kappas:
        lk = length_scale(kappa, sigma)
        th = mollifier_transform(k * lk, spec)
        out.append(-3.0 / (2.0 * np.pi) * float((a ** 2 * th ** 2).sum()))
    return np.asarray(out)


def fit_divergence_exponent(lengths, values) -> float:
    """Divergence exponent of values ~ const + b * length^p, by differencing.

    Consecutive differences cancel the finite part; the slope of
    log |delta value| against log length of the finer rung estimates p.
    """
    lengths = np.asarray(lengths, dtype=float)
    values = np.asarray(values, dtype=float)
    d = np.abs(np.diff(values))
    if np.any(d == 0.0):
        raise ValueError("degenerate ladder: consecutive values coincide")
    return float(np.polyfit(np.log(lengths[1:]), np.log(d), 1)[0])


# ---------------------------------------------------------------------------
# empirical cumulants


def k_statistic(data, order: int) -> float:
    """Unbiased cumulant estimator (k-statistic) of a scalar sample."""
    x = np.asarray(data, dtype=float)
    n = x.size
    if order == 1:
        return float(x.mean())
    c = x - x.mean()
    if order == 2:
        return float((c ** 2).sum() / (n - 1))
    if order == 3:
        return float(n * (c ** 3).sum() / ((n - 1) * (n - 2)))
    raise ValueError("k-statistics implemented up to order 3")


def _partitions(items):
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _partitions(rest):
        for j in range(len(part)):
            yield part[:j] + [[first] + part[j]] + part[j + 1:]
        yield [[first]] + part


def moment_from_cumulants(cumulant, p: int) -> float:
    """E(z_1 ... z_p) as the sum over set partitions of cumulant products."""
    total = 0.0
    for part in _partitions(range(p)):
        prod = 1.0
        for block in part:
            prod *= cumulant(tuple(sorted(block)))
        total += prod
    return total


@dataclass
class CumulantEstimate:
    """Second-order joint cumulant of two coefficient samples."""

    indices: tuple
    kernel: np.ndarray
    entry_variance: np.ndarray | None
    norm: float
    stderr: float
    samples: int


def _translation_autocovariance(stack: np.ndarray):
    """Translation-averaged covariance of field samples, with entry noise.

    stack has shape (members, nsites...); returns (ghat, vhat) flat over
    offsets: ghat is the unbiased covariance estimate pooled over
    translations, vhat the per-entry variance of ghat.
    """
    m = stack.shape[0]
    centered = stack - stack.mean(axis=0, keepdims=True)
    spec = np.fft.fftn(centered, axes=tuple(range(1, centered.ndim)))
    n = math.prod(centered.shape[1:])
    per = np.fft.ifftn(np.abs(spec) ** 2, axes=tuple(range(1, centered.ndim))).real / n
    ghat = per.sum(axis=0).reshape(-1) / (m - 1)
    dev = per * (m / (m - 1.0)) - ghat.reshape(per.shape[1:])[None]
    vhat = (dev ** 2).sum(axis=0).reshape(-1) / ((m - 1.0) * m)
    return ghat, vhat


def vt_norm_debiased(ghat: np.ndarray, vhat, grid: TorusGrid) -> float:
    """Translation-reduced norm h^d sum_z |g(z)| with noise debiasing.

    Entries are shrunk by their estimated sampling variance before the
    absolute sum: |g| ~ sqrt(max(ghat^2 - vhat, 0)).  Exact for entries far
    above the noise floor; pure-noise entries are suppressed instead of
    accumulating a positive bias.
    """
    hd = grid.h ** grid.d
    if vhat is None:
        return float(np.abs(ghat).sum() * hd)
    mag = np.sqrt(np.maximum(ghat ** 2 - vhat, 0.0))
    return float(mag.sum() * hd)


def empirical_cumulants(samples, indices, grid: TorusGrid, *,
                        smooth_mult=None, batches: int = 8,
                        debias: bool = True) -> CumulantEstimate:
    """Joint second cumulant of coefficient samples, with its reduced norm.

    ``samples``: per-member arrays; fields for zero-leg indices, or
    (nsites, nsites) one-leg kernels.  Only pairs (n = 2) with at most one
    leg per entry are supported.  The norm is the translation-reduced total
    variation; its stderr comes from a delete-one-batch jackknife.
    """
    if len(indices) != 2:
        raise ValueError("only pairs of coefficient indices are supported")
    arr = np.asarray(samples, dtype=float)
    m = arr.shape[0]
    if m < 16:
        raise ValueError("need at least 16 samples")
    if arr.ndim - 1 == grid.d:
        if smooth_mult is not None:
            arr = np.stack([apply_multiplier(a, smooth_mult) for a in arr])
        ghat, vhat = _translation_autocovariance(arr)
        norm = vt_norm_debiased(ghat, vhat if debias else None, grid)

        def norm_of(subset):
            g, v = _translation_autocovariance(arr[subset])
            return vt_norm_debiased(g, v if debias else None, grid)

        stderr = _jackknife(norm_of, m, batches)
        return CumulantEstimate(tuple(indices), ghat, vhat, norm, stderr, m)
    if arr.ndim == 3 and arr.shape[1] == arr.shape[2] == grid.nsites:
        est = _pair_cumulant_one_leg(arr, grid, smooth_mult)
        norm = float(np.abs(est).sum() * grid.h ** (3 * grid.d))

        def norm_of(subset):
            e = _pair_cumulant_one_leg(arr[subset], grid, smooth_mult)
            return float(np.abs(e).sum() * grid.h ** (3 * grid.d))

        stderr = _jackknife(norm_of, m, batches)
        return CumulantEstimate(tuple(indices), est, None, norm, stderr, m)
    raise ValueError("unsupported sample shape for empirical cumulants")


def _pair_cumulant_one_leg(arr: np.ndarray, grid: TorusGrid, smooth_mult):
    """Translation-reduced covariance of one-leg kernels (d = 1 layout)."""
    if grid.d != 1:
        raise ValueError("one-leg cumulants are implemented for d = 1")
    m, n = arr.shape[0], grid.nsites
    if smooth_mult is not None:
        sm = np.empty_like(arr)
        for s in range(m):
            spec = np.fft.fft2(arr[s])
            spec *= smooth_mult.reshape(-1)[:, None]
            spec *= smooth_mult.reshape(-1)[None, :]
            sm[s] = np.fft.ifft2(spec).real
        arr = sm
    i = np.arange(n)
    rel = arr[:, i[:, None], (i[:, None] + i[None, :]) % n]  # (m, x, u)
    rel = rel - rel.mean(axis=0, keepdims=True)
    spec = np.fft.fft(rel, axis=1)
    cov = np.einsum("sku,skv->kuv", np.conj(spec), spec) / (n * (m - 1))
    return np.fft.ifft(cov, axis=0).real


def _jackknife(norm_of, m: int, batches: int) -> float:
    batches = min(batches, m)
    edges = np.linspace(0, m, batches + 1).astype(int)
    idx = np.arange(m)
    vals = []
    for b in range(batches):
        mask = (idx < edges[b]) | (idx >= edges[b + 1])
        vals.append(norm_of(idx[mask]))
    vals = np.asarray(vals)
    return float(np.sqrt((batches - 1) / batches * ((vals - vals.mean()) ** 2).sum()))


# ---------------------------------------------------------------------------
# scaling reports


@dataclass
class ScalingFit:
    target: tuple
    slope: float
    intercept: float
    exponent: float
    threshold: float
    passed: bool


@dataclass
class ScalingReport:
    """Per-scale ensemble norms of coefficients and log-log slope verdicts."""

    window: tuple
    mus: tuple
    rows: dict
    fits: list
    kind: str = "coefficients"

    def fit_for(self, target):
        for f in self.fits:
            if f.target == target:
                return f
        raise KeyError(target)


def _fit_window(family, kappa, window):
    lo, hi = (8.0 * kappa, 0.5) if window is None else window
    if not (lo < hi <= 0.5):
        raise EmptyWindowError(f"fit window ({lo}, {hi}) must sit inside (0, 1/2]")
    mus = family.scale_grid.window(lo, hi)
    if len(mus) < 3:
        raise EmptyWindowError(f"fit window [{lo}, {hi}] holds fewer than 3 scales")
    return mus


def scaling_report(ens, kappa: float, family, pc: PowerCounting, counterterms, *,
                   window=None, targets=None, slope_tol: float = 0.15,
                   strict_mollifier: bool = False,
                   order_cap: int | None = None) -> ScalingReport:
    """Ensemble medians of smoothed coefficient norms and slope verdicts.

    For every stored target (i, m) the smoothed norm is recorded per window
    scale and member; the fitted slope of log(median) against log(length)
    must reach rho(i, m) - slope_tol.  order_cap restricts the flow to low
    orders (one-vertex representations), allowing much finer grids.
    """
    mus = _fit_window(family, kappa, window)
    if targets is None:
        targets = pc.stored_targets()
    if order_cap is not None:
        targets = [t for t in targets if t[0] <= order_cap]
    grid = family.grid
    norms = {t: {mu: [] for mu in mus} for t in targets}
    for seed in ens.seeds():
        xi = sample_noise(grid, seed)
        xi_k = xi.mollified(kappa, family, strict_mollifier)

        def hook(cset):
            if cset.mu in norms[targets[0]]:
                mult = family.k_mult(cset.mu)
                for t in targets:
                    rep = cset.get(*t)
                    norms[t][cset.mu].append(
                        rep.smoothed_vm_norm(mult) if rep is not None else 0.0
                    )

        run_flow(xi_k, family, pc, counterterms, scale_hook=hook,
                 order_cap=order_cap)
    rows = {}
    fits = []
    lengths = np.array([length_scale(mu, pc.sigma) for mu in mus])
    for t in targets:
        med = np.array([float(np.median(norms[t][mu])) for mu in mus])
        q25 = np.array([float(np.percentile(norms[t][mu], 25)) for mu in mus])
        q75 = np.array([float(np.percentile(norms[t][mu], 75)) for mu in mus])
        rows[t] = {"mu": np.array(mus), "length": lengths,
                   "median": med, "q25": q25, "q75": q75}
        good = med > 0.0
        if good.sum() >= 2:
            slope, intercept = np.polyfit(np.log(lengths[good]), np.log(med[good]), 1)
        else:
            slope, intercept = 0.0, 0.0
        rho = pc.rho(*t)
        fits.append(ScalingFit(t, float(slope), float(intercept), rho,
                               rho - slope_tol, bool(slope >= rho - slope_tol)))
    return ScalingReport((mus[0], mus[-1]), tuple(mus), rows, fits)


def cumulant_scaling_report(ens, kappa: float, family, pc: PowerCounting,
                            counterterms, pairs, *, window=None,
                            slope_tol: float = 0.2,
                            strict_mollifier: bool = False,
                            order_cap: int | None = None) -> ScalingReport:
    """Slope verdicts for smoothed pair cumulants of zero-leg coefficients.

    For a pair of (i, 0) coefficients the reduced norm of the doubly
    smoothed covariance must scale at least like
    length^(rho(i,0)+rho(j,0)+d) - slope_tol.
    """
    for pair in pairs:
        if any(m != 0 for _, m in pair):
            raise ValueError("cumulant scaling handles zero-leg pairs only")
    mus = _fit_window(family, kappa, window)
    grid = family.grid
    fields = {pair: {mu: [] for mu in mus} for pair in pairs}
    orders = sorted({i for pair in pairs for i, _ in pair})
    need_flow = any(i > 0 for i in orders)
    for seed in ens.seeds():
        xi = sample_noise(grid, seed)
        xi_k = xi.mollified(kappa, family, strict_mollifier)
        per_scale = {}

        def hook(cset):
            if cset.mu in mus:
                per_scale[cset.mu] = {
                    i: (cset.get(i, 0).terms[0].core.copy()
                        if cset.get(i, 0) is not None else np.zeros(grid.nsites))
                    for i in orders
                }

        if need_flow:
            run_flow(xi_k, family, pc, counterterms, scale_hook=hook,
                     order_cap=order_cap)
        else:
            for mu in mus:
                per_scale[mu] = {0: xi_k.values.reshape(-1)}
        for pair in pairs:
            i = pair[0][0]
            for mu in mus:
                fields[pair][mu].append(per_scale[mu][i].reshape(grid.shape))
    rows = {}
    fits = []
    lengths = np.array([length_scale(mu, pc.sigma) for mu in mus])
    estimates = {}
    for pair in pairs:
        med = []
        per_mu_est = {}
        for mu in mus:
            est = empirical_cumulants(
                np.stack(fields[pair][mu]), pair, grid,
                smooth_mult=family.ktilde_mult(mu),
            )
            per_mu_est[mu] = est
            med.append(est.norm)
        med = np.asarray(med)
        rows[pair] = {"mu": np.array(mus), "length": lengths, "median": med,
                      "q25": med, "q75": med}
        good = med > 0.0
        slope = float(np.polyfit(np.log(lengths[good]), np.log(med[good]), 1)[0]) \
            if good.sum() >= 2 else 0.0
        expo = rho_of_pair(pc, pair) + pc.d
        fits.append(ScalingFit(pair, slope, 0.0, expo,
                               expo - slope_tol, bool(slope >= expo - slope_tol)))
        estimates[pair] = per_mu_est
    report = ScalingReport((mus[0], mus[-1]), tuple(mus), rows, fits,
                           kind="cumulants")
    report.estimates = estimates
    return report
