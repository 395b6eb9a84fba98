"""Fixed-point solver for the coarse-grained effective equation.

The unknown is a pair of scale-indexed fields: the coarse-grained process
phi_mu and the remainder zeta_mu.  One application of the solution map is

    phi_mu  = - int_mu^1  Gdot_eta * (F_eta[phi_eta] + zeta_eta) d eta
    zeta_mu = - int_0^mu  (H_eta[phi_eta] + DF_eta[phi_eta].(Gdot_eta * zeta_eta)) d eta

which is the regularized system written in its smoothed representatives:
phi_mu and zeta_mu are the mass-one smoothings of the dressed pair the
contraction certificates refer to, and every kernel that appears above is
total-variation bounded on the lattice (the amplifying dressings cancel
exactly against the regularizing kernels).  The scale integrals use exact
zeroth and first moments of the shell kernel per grid interval applied to
linear interpolants of the functional evaluations, so the zero-coupling
solution is reproduced to machine precision by telescoping.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .coeffs import contract_force, h_functional, run_flow
from .errors import IterationDivergedError, RegimeError
from .grid import Field, apply_multiplier, besov_norm
from .kernels import length_scale
from .noise import sample_noise


@dataclass
class FlowTrajectory:
    """Coefficient sets at every grid scale up to the stop scale."""

    sets: list

    @classmethod
    def run(cls, xi_kappa: Field, family, pc, counterterms, **kw) -> "FlowTrajectory":
        sets = run_flow(xi_kappa, family, pc, counterterms,
                        keep_trajectory=True, **kw)
        return cls(sets)

    def __post_init__(self):
        self._by_mu = {s.mu: s for s in self.sets}
        self.final = self.sets[-1]

    def at(self, mu: float):
        """(coefficient set, evaluation scale); frozen above the stop scale."""
        if mu in self._by_mu:
            return self._by_mu[mu], mu
        if mu > self.final.mu:
            return self.final, mu
        raise KeyError(f"no coefficient set stored at scale {mu}")


def ball_radius_floor(c_smear: float, alpha: float, beta: float, sigma: float) -> float:
    """Smallest radius making the solution map a self-map of the ball."""
    return 1.05 * (2.0 * sigma * c_smear / abs(alpha) + sigma * (1.0 + c_smear) / beta)


def lambda_star(radius: float) -> float:
    """Guaranteed-contraction coupling bound 1/(2 R^2)^3."""
    return 1.0 / (2.0 * radius ** 2) ** 3


@dataclass
class SolverConfig:
    """Coupling, ball radius and derived contraction bound for one solve."""

    lam: float
    radius: float
    alpha: float
    beta: float
    m_flat: int
    lambda_star: float
    sigma: float
    tol: float = 1e-10
    max_iter: int = 40
    override: bool = False

    def __post_init__(self):
        if self.beta <= 0.0:
            raise RegimeError(f"solver needs beta > 0, got {self.beta}")
        # monotonicity guard: shrinking the ball can only enlarge the bound
        assert lambda_star(self.radius / 2.0) >= lambda_star(self.radius)
        if abs(self.lam) > self.lambda_star and not self.override:
            warnings.warn(
                f"|lambda| = {abs(self.lam):.3e} exceeds the contraction bound "
                f"{self.lambda_star:.3e}; convergence is monitored, not guaranteed",
                stacklevel=2,
            )
            self.override = True

    @classmethod
    def calibrate(cls, pc, family, traj: FlowTrajectory, lam: float,
                  tol: float = 1e-10, max_iter: int = 40) -> "SolverConfig":
        """Ball radius from the realized coefficient norms.

        R is the larger of the measured sup over scales and stored targets of
        length^-rho times the smoothed coefficient norm, and the self-map
        floor built from the shell kernel's variation bound.
        """
        r_data = 1.0
        for cset in traj.sets:
            if cset.mu <= 0.0:
                continue
            mult = family.k_mult(cset.mu)
            for (i, m), rep in cset.coeffs.items():
                rho = pc.rho(i, m)
                val = rep.smoothed_vm_norm(mult) * family.length(cset.mu) ** (-rho)
                r_data = max(r_data, val)
        beta = pc.rho(pc.i_flat + 1, 0)
        floor = ball_radius_floor(family.c_gdot, pc.alpha, beta, pc.sigma)
        radius = max(r_data, floor)
        return cls(lam, radius, pc.alpha, beta, 3 * pc.i_flat,
                   lambda_star(radius), pc.sigma, tol, max_iter)


@dataclass
class SolverState:
    """Scale-indexed pair (phi_mu, zeta_mu) on the family's grid scales.

    Both components are stored as their smoothed representatives (the
    coarse-grained process and the mass-one smoothed remainder), which stay
    uniformly bounded on the lattice.
    """

    mus: tuple
    phi: np.ndarray   # (scales, nsites)
    zeta: np.ndarray  # (scales, nsites)

    @classmethod
    def zero(cls, family) -> "SolverState":
        mus = tuple(family.scale_grid.mus)
        n = family.grid.nsites
        return cls(mus, np.zeros((len(mus), n)), np.zeros((len(mus), n)))

    def copy(self) -> "SolverState":
        return SolverState(self.mus, self.phi.copy(), self.zeta.copy())

    def ball_norm(self, cfg: SolverConfig) -> float:
        """sup_mu len^-alpha |phi| + R sup_mu len^-beta |zeta|."""
        phi_part = 0.0
        zeta_part = 0.0
        for s, mu in enumerate(self.mus):
            ln = length_scale(mu, cfg.sigma)
            phi_part = max(phi_part, ln ** (-cfg.alpha) * float(np.abs(self.phi[s]).max()))
            zeta_part = max(zeta_part, ln ** (-cfg.beta) * float(np.abs(self.zeta[s]).max()))
        return phi_part + cfg.radius * zeta_part

    def distance(self, other: "SolverState", cfg: SolverConfig) -> float:
        diff = SolverState(self.mus, self.phi - other.phi, self.zeta - other.zeta)
        return diff.ball_norm(cfg)


@dataclass
class EffectiveSolution:
    """Solver output: the fixed point, reconstruction and iteration trace."""

    state: SolverState
    phi: Field
    recon_gap: float
    distances: list
    ratios: list
    iterations: int
    config: SolverConfig
    under_resolved: bool = False


def _functional_data(state: SolverState, traj: FlowTrajectory, family, lam: float):
    """Per-scale transforms of the force and of the defect integrand."""
    grid = family.grid
    nscales = len(state.mus)
    a_hat = np.empty((nscales,) + grid.shape, dtype=complex)
    y_hat = np.empty((nscales,) + grid.shape, dtype=complex)
    z_hat = np.empty((nscales,) + grid.shape, dtype=complex)
    for s, mu in enumerate(state.mus):
        cset, eval_mu = traj.at(mu)
        if np.abs(state.phi[s]).max() > 1e50:
            raise IterationDivergedError("state blew up; coupling too large")
        phi_s = Field(grid, state.phi[s].reshape(grid.shape))
        zeta_s = state.zeta[s].reshape(grid.shape)
        force = contract_force(cset, lam, phi_s)
        a_hat[s] = np.fft.fftn(force.values)
        z_hat[s] = np.fft.fftn(zeta_s)
        h_val = h_functional(cset, lam, phi_s, family, eval_mu=eval_mu,
                             dressed=False)
        gdz = apply_multiplier(zeta_s, family.gdot_kernel(eval_mu).multiplier)
        dfz = contract_force(cset, lam, phi_s, deriv=(1, Field(grid, gdz)))
        y_hat[s] = np.fft.fftn(h_val.values + dfz.values)
    return a_hat, y_hat, z_hat


def q_apply(state: SolverState, traj: FlowTrajectory, family,
            cfg: SolverConfig) -> SolverState:
    """One application of the solution map to a scale-indexed state."""
    grid = family.grid
    if state.mus != tuple(family.scale_grid.mus):
        raise RegimeError("state scales do not match the kernel family grid")
    mus = state.mus
    nscales = len(mus)
    a_hat, y_hat, z_hat = _functional_data(state, traj, family, cfg.lam)
    plan = family.solver_plan()
    # phi: suffix sums of exact per-interval shell moments applied to the
    # linear interpolant of (force + remainder)
    contrib = np.zeros((nscales - 1,) + grid.shape, dtype=complex)
    for j, (lo, hi, c0, c1) in enumerate(plan):
        f_lo = a_hat[j] + z_hat[j]
        f_hi = a_hat[j + 1] + z_hat[j + 1]
        contrib[j] = c0 * f_lo + c1 * f_hi
    phi_out = np.zeros((nscales, grid.nsites))
    tail = np.zeros(grid.shape, dtype=complex)
    for s in range(nscales - 1, -1, -1):
        phi_out[s] = -np.fft.ifftn(tail).real.reshape(-1)
        if s > 0:
            tail = tail + contrib[s - 1]
    # zeta: trapezoid prefix integral of the defect data, starting from zero
    zeta_out = np.zeros((nscales, grid.nsites))
    acc = 0.5 * mus[0] * y_hat[0]  # interval [0, mu_0] with y(0) = 0
    zeta_out[0] = -np.fft.ifftn(acc).real.reshape(-1)
    for s in range(1, nscales):
        acc = acc + 0.5 * (mus[s] - mus[s - 1]) * (y_hat[s - 1] + y_hat[s])
        zeta_out[s] = -np.fft.ifftn(acc).real.reshape(-1)
    return SolverState(mus, phi_out, zeta_out)


def solve_effective(traj: FlowTrajectory, family, cfg: SolverConfig,
                    state0: SolverState | None = None) -> EffectiveSolution:
    """Iterate the solution map from the zero state to its fixed point."""
    state = SolverState.zero(family) if state0 is None else state0.copy()
    distances, ratios = [], []
    for it in range(cfg.max_iter):
        nxt = q_apply(state, traj, family, cfg)
        dist = nxt.distance(state, cfg)
        distances.append(dist)
        if len(distances) >= 2 and distances[-2] > 0.0:
            ratios.append(dist / distances[-2])
        state = nxt
        if dist <= cfg.tol:
            phi, gap, flagged = reconstruct_phi(state, traj, family, cfg)
            return EffectiveSolution(state, phi, gap, distances, ratios,
                                     it + 1, cfg, flagged)
    last = ratios[-1] if ratios else float("nan")
    raise IterationDivergedError(
        f"no fixed point within {cfg.max_iter} iterations; last ratio {last:.4f}"
    )


def reconstruct_phi(state: SolverState, traj: FlowTrajectory, family,
                    cfg: SolverConfig):
    """Undo the coarse graining at the two smallest scales.

    phi = phi_mu + (G - G_mu) * (F_mu[phi_mu] + zeta_mu), evaluated at the
    two smallest grid scales; returns the smallest-scale value, the gap
    between the two reconstructions, and an under-resolution flag.
    """
    grid = family.grid
    vals = []
    for s in (0, 1):
        mu = state.mus[s]
        cset, eval_mu = traj.at(mu)
        phi_s = Field(grid, state.phi[s].reshape(grid.shape))
        force = contract_force(cset, cfg.lam, phi_s)
        fluct = family.fluctuation_kernel(mu).multiplier
        rhs = np.fft.fftn(phi_s.values) + fluct * np.fft.fftn(
            force.values + state.zeta[s].reshape(grid.shape))
        vals.append(np.fft.ifftn(rhs).real)
    gap = float(np.abs(vals[0] - vals[1]).max())
    flagged = gap > 100.0 * cfg.tol
    if flagged:
        warnings.warn(
            f"reconstruction gap {gap:.3e} exceeds 100x solver tolerance; "
            "the smallest scale may be under-resolved", stacklevel=2,
        )
    return Field(grid, vals[0]), gap, flagged


# ---------------------------------------------------------------------------
# reference solvers


def force_apply(xi_kappa: Field, lam: float, counterterms, phi: Field) -> Field:
    """Pointwise force: noise + lam phi^3 + sum_i lam^i c_i phi."""
    vals = xi_kappa.values + lam * phi.values ** 3
    mass = sum(lam ** (i + 1) * c for i, c in enumerate(counterterms))
    return Field(phi.grid, vals + mass * phi.values)


def direct_picard(xi_kappa: Field, lam: float, counterterms, family,
                  tol: float = 1e-12, max_iter: int = 1000) -> Field:
    """Classical fixed-point iteration of phi = G * force(phi).

    Starts from the linear solution; aborts when the residual grows three
    times in a row.
    """
    g = family.green.multiplier
    phi = Field(xi_kappa.grid, apply_multiplier(xi_kappa.values, g))
    prev_res = np.inf
    grows = 0
    for _ in range(max_iter):
        nxt = Field(phi.grid, apply_multiplier(
            force_apply(xi_kappa, lam, counterterms, phi).values, g))
        res = (nxt - phi).sup()
        if res > prev_res:
            grows += 1
            if grows >= 3:
                raise IterationDivergedError(
                    f"picard residual grew three times in a row ({res:.3e})"
                )
        else:
            grows = 0
        phi = nxt
        if res <= tol * max(1.0, phi.sup()):
            return phi
        prev_res = res
    raise IterationDivergedError(f"picard did not reach tol; residual {prev_res:.3e}")


def dpd_counterterm(family, kappa: float) -> float:
    """Mass counterterm -3 E[(G * xi_kappa)^2] for the remainder ansatz."""
    grid = family.grid
    gm = family.green.multiplier.real
    th = family.mollifier_kernel(kappa).multiplier.real
    return float(-3.0 * ((gm * th) ** 2).sum() / (2.0 * np.pi) ** grid.d)


def dpd_solve(xi_kappa: Field, lam: float, family, c1: float,
              tol: float = 1e-12, max_iter: int = 1000) -> Field:
    """Solve by subtracting the explicit Gaussian trees first.

    Valid for sigma in (5d/12, d/2]; iterates the remainder equation
    psi = lam G * (psi^3 + 3 psi^2 t1 + 3 psi t2 + t3) with
    t1 = G * xi, t2 = t1^2 + c1/3, t3 = t1^3 + c1 t1, and returns t1 + psi.
    """
    grid = xi_kappa.grid
    d, sigma = grid.d, family.sigma
    if not (5.0 * d / 12.0 < sigma <= d / 2.0):
        raise RegimeError(
            f"remainder ansatz needs sigma in (5d/12, d/2] = "
            f"({5 * d / 12.0:.6g}, {d / 2.0:.6g}], got {sigma}"
        )
    g = family.green.multiplier
    t1 = apply_multiplier(xi_kappa.values, g)
    t2 = t1 ** 2 + c1 / 3.0
    t3 = t1 ** 3 + c1 * t1
    psi = np.zeros(grid.shape)
    prev_res = np.inf
    grows = 0
    for _ in range(max_iter):
        rhs = lam * (psi ** 3 + 3.0 * psi ** 2 * t1 + 3.0 * psi * t2 + t3)
        nxt = apply_multiplier(rhs, g)
        res = float(np.abs(nxt - psi).max())
        if res > prev_res:
            grows += 1
            if grows >= 3:
                raise IterationDivergedError("remainder iteration diverging")
        else:
            grows = 0
        psi = nxt
        if res <= tol * max(1.0, float(np.abs(t1 + psi).max())):
            return Field(grid, t1 + psi)
        prev_res = res
    raise IterationDivergedError("remainder iteration did not converge")


# ---------------------------------------------------------------------------
# cutoff-convergence study


def solve_for_noise(xi_kappa: Field, family, pc, counterterms, lam: float,
                    tol: float = 1e-10, max_iter: int = 40) -> EffectiveSolution:
    """Flow + calibrated solve + reconstruction for one mollified sample."""
    traj = FlowTrajectory.run(xi_kappa, family, pc, counterterms)
    cfg = SolverConfig.calibrate(pc, family, traj, lam, tol, max_iter)
    return solve_effective(traj, family, cfg)


def kappa_study(ens, kappas, family, pc, schedules: dict, lam: float,
                alpha_prime: float, tol: float = 1e-10):
    """Cutoff-convergence table at fixed seeds across a descending ladder.

    For each seed the equation is solved per rung with that rung's
    counterterm schedule; consecutive solutions are compared in the Besov
    norm of regularity alpha_prime.  Returns one row per consecutive pair
    with the per-seed differences, their median, and the fitted decay
    exponent of the medians in the cutoff length.
    """
    kappas = list(kappas)
    if any(b >= a for a, b in zip(kappas, kappas[1:])):
        raise RegimeError("cutoff ladder must be strictly descending")
    grid = family.grid
    diffs = {pair: [] for pair in zip(kappas, kappas[1:])}
    for seed in ens.seeds():
        xi = sample_noise(grid, seed)
        sols = {}
        for kappa in kappas:
            xi_k = xi.mollified(kappa, family)
            sols[kappa] = solve_for_noise(xi_k, family, pc, schedules[kappa],
                                          lam, tol).phi
        for pair in diffs:
            a, b = pair
            diffs[pair].append(besov_norm(sols[a] - sols[b], alpha_prime, family))
    rows = []
    for (a, b), vals in diffs.items():
        rows.append({
            "kappa_hi": a,
            "kappa_lo": b,
            "length_hi": length_scale(a, family.sigma),
            "median": float(np.median(vals)),
            "values": [float(v) for v in vals],
        })
    meds = np.array([r["median"] for r in rows])
    lens = np.array([r["length_hi"] for r in rows])
    rate = float(np.polyfit(np.log(lens), np.log(meds), 1)[0]) if np.all(meds > 0) \
        else float("nan")
    return rows, rate
