import numpy as np
import pytest

from rgflow.errors import RegimeError, SupercriticalError
from rgflow.grid import Field, TorusGrid, apply_multiplier
from rgflow.coeffs import CoeffRep, FactoredTerm, tensor_contract
from rgflow.kernels import KernelFamily, ScaleGrid, length_scale
from rgflow.noise import EnsembleSpec, sample_noise
from rgflow.renorm import (
    CountertermSchedule,
    c1_fourier_oracle,
    compute_counterterms,
    empirical_cumulants,
    exact_c1,
    expected_mass,
    fit_divergence_exponent,
    k_statistic,
    moment_from_cumulants,
    power_counting,
    reconstruct_contraction,
    rho_of_pair,
    taylor_split,
    vt_norm_debiased,
)

# ---------------------------------------------------------------------------
# power counting


def test_power_counting_reference_values():
    pc = power_counting(1, 0.40)
    assert abs(pc.alpha + 0.1) < 1e-12
    assert abs(pc.gamma - 0.2) < 1e-12
    assert abs(pc.rho(2, 0) + 0.1) < 1e-12
    assert abs(pc.rho(3, 0) - 0.1) < 1e-12
    assert pc.i_flat == 2
    assert abs(pc.rho(2, 1)) < 1e-12
    assert abs(pc.rho(3, 1) - 0.2) < 1e-12
    assert pc.i_sharp == 2
    assert pc.boundary_orders == (2,)  # exponent vanishes exactly: flagged


def test_power_counting_identities():
    for d, sigma in ((1, 0.45), (1, 0.40), (5, 2.0), (3, 1.3)):
        pc = power_counting(d, sigma)
        assert abs(pc.rho(0, 0) + d / 2.0) < 1e-12
        assert abs(pc.rho(1, 3)) < 1e-12
        # graft identity over the stored table
        for i in range(1, 5):
            for m in range(3 * i + 1):
                for j in range(1, i + 1):
                    for k in range(m + 1):
                        lhs = pc.rho(j, 1 + k) + pc.rho(i - j, m - k)
                        assert abs(lhs - (pc.rho(i, m) - sigma)) < 1e-10


def test_power_counting_floor_formula():
    # i_sharp агrees with floor(sigma / (3 sigma - d)) off the boundary
    for d, sigma in ((5, 2.0), (1, 0.42), (1, 0.48), (3, 1.35)):
        pc = power_counting(d, sigma)
        ratio = sigma / (3 * sigma - d)
        if abs(ratio - round(ratio)) > 1e-9:
            assert pc.i_sharp == int(np.floor(ratio))
    assert power_counting(5, 2.0).i_sharp == 2


def test_power_counting_supercritical():
    with pytest.raises(SupercriticalError, match="supercritical"):
        power_counting(1, 0.30)
    with pytest.raises(RegimeError):
        power_counting(1, 0.55)


def test_power_counting_additivity_and_eps():
    pc = power_counting(1, 0.45, eps=0.01)
    pairs = [(1, 0), (2, 3)]
    assert abs(rho_of_pair(pc, pairs) - (pc.rho(1, 0) + pc.rho(2, 3))) < 1e-14
    assert pc.validate_eps_margin()
    assert not power_counting(1, 0.45, eps=0.1).validate_eps_margin()


def test_stored_targets():
    pc = power_counting(1, 0.40)
    targets = pc.stored_targets()
    assert (0, 0) in targets and (2, 5) in targets
    assert (2, 6) not in targets  # legs capped at 2i+1
    assert len(targets) == 11


# ---------------------------------------------------------------------------
# Taylor split


def compact_one_leg(grid, rng, radius_sites=8):
    x = np.arange(grid.n) * grid.h
    z = np.where(x > np.pi, x - 2 * np.pi, x)
    prof = np.where(np.abs(z) <= radius_sites * grid.h,
                    np.cos(3 * z) * np.exp(-(z / (4 * grid.h)) ** 2), 0.0)
    i = np.arange(grid.n)
    prof = 0.5 * (prof + prof[(-i) % grid.n])
    core = prof[(i[None, :] - i[:, None]) % grid.n]
    return CoeffRep(grid, 1, 1, terms=[FactoredTerm(2, 0, 1, core)]), prof


def test_taylor_split_mass_and_reconstruction(grid64, rng):
    rep, prof = compact_one_leg(grid64, rng)
    split = taylor_split(rep)
    assert abs(split.iv - prof.sum() * grid64.h) < 1e-12
    assert abs(split.iv) <= rep.vm_norm() + 1e-12
    x = np.arange(64) * grid64.h
    psi = Field(grid64, np.cos(x) + 0.3 * np.sin(2 * x) - 0.2 * np.cos(3 * x))
    lhs = tensor_contract(rep, [psi])
    rhs = reconstruct_contraction(split, psi)
    assert (lhs - rhs).sup() / lhs.sup() < 1e-6


def test_taylor_split_smoothed_delta_mass(grid64, fam45_64):
    c = 1.7
    mu = 0.4
    kd = np.fft.ifft(fam45_64.k_mult(mu).astype(complex) ** 2).real / grid64.h
    i = np.arange(64)
    core = c * kd[(i[None, :] - i[:, None]) % 64]
    rep = CoeffRep(grid64, 1, 1, terms=[FactoredTerm(2, 0, 1, core)])
    split = taylor_split(rep)
    assert abs(split.iv - c) < 1e-9


def test_taylor_split_rejects_non_invariant(grid64, rng):
    core = rng.standard_normal((64, 64))
    rep = CoeffRep(grid64, 1, 1, terms=[FactoredTerm(2, 0, 1, core)])
    with pytest.raises(RegimeError):
        taylor_split(rep)


def test_taylor_split_rejects_odd(grid64):
    i = np.arange(64)
    prof = np.zeros(64)
    prof[1] = 1.0  # no parity partner
    core = prof[(i[None, :] - i[:, None]) % 64]
    rep = CoeffRep(grid64, 1, 1, terms=[FactoredTerm(2, 0, 1, core)])
    with pytest.raises(RegimeError):
        taylor_split(rep)


# ---------------------------------------------------------------------------
# counterterms


@pytest.fixture(scope="module")
def fam45c(grid64):
    return KernelFamily(grid64, 0.45, ScaleGrid.build(1e-4, 96))


def test_counterterms_match_exact_oracle(grid64, pc45, fam45c):
    kappa = 0.1
    sched = compute_counterterms(EnsembleSpec(4242, 32), kappa, fam45c, pc45)
    oracle = exact_c1(fam45c, kappa)
    assert sched.values[0] < 0.0  # recorded sign for the cubic model
    assert abs(sched.values[0] - oracle) <= 3.0 * max(sched.stderr[0], 1e-12)
    exact_sched = compute_counterterms(EnsembleSpec(1, 16), kappa, fam45c, pc45,
                                       method="exact-gaussian")
    assert exact_sched.values == (oracle,)


def test_renormalization_condition_fresh_ensemble(grid64, pc45, fam45c):
    kappa = 0.1
    sched = compute_counterterms(EnsembleSpec(4242, 32), kappa, fam45c, pc45)
    mean, err = expected_mass(EnsembleSpec(999, 32), kappa, fam45c, pc45, 1,
                              sched.padded(pc45.i_sharp))
    assert abs(mean) <= 4.0 * err


def test_counterterm_schedule_padding():
    sched = CountertermSchedule(0.1, (-1.0,), (0.0,), "zero", 0)
    assert sched.padded(3) == (-1.0, 0.0, 0.0)


def test_divergence_fit_on_synthetic():
    # geometric ladder: the difference fit removes the constant exactly
    lengths = 0.3 * 0.4 ** np.arange(4)
    values = 4.0 - 2.5 * lengths ** -0.37
    assert abs(fit_divergence_exponent(lengths, values) + 0.37) < 1e-9


def test_c1_oracle_divergence_rate():
    kappas = [0.2, 0.1, 0.05, 0.025]
    vals = c1_fourier_oracle(0.40, kappas, n_oracle=2 ** 17)
    lens = np.array([length_scale(k, 0.40) for k in kappas])
    assert np.all(np.diff(np.abs(vals)) > 0)  # magnitudes grow along the ladder
    p = fit_divergence_exponent(lens, vals)
    assert abs(p - (2 * 0.40 - 1.0)) < 0.05


# ---------------------------------------------------------------------------
# cumulants


def test_k_statistics_gaussian():
    rng = np.random.default_rng(5)
    data = rng.standard_normal(4000)
    assert abs(k_statistic(data, 1)) < 4 / np.sqrt(4000)
    assert abs(k_statistic(data, 2) - 1.0) < 4 * np.sqrt(2.0 / 4000)
    assert abs(k_statistic(data, 3)) < 4 * np.sqrt(6.0 / 4000)


def test_moment_cumulant_partition_identity():
    # exact on the cumulants of a tiny empirical distribution
    rng = np.random.default_rng(5)
    tiny = rng.standard_normal(7)
    mu1 = tiny.mean()
    m2 = ((tiny - mu1) ** 2).mean()
    m3 = ((tiny - mu1) ** 3).mean()

    def cum(block):
        return {1: mu1, 2: m2, 3: m3}[len(block)]

    assert abs((tiny ** 2).mean() - moment_from_cumulants(cum, 2)) < 1e-14
    assert abs((tiny ** 3).mean() - moment_from_cumulants(cum, 3)) < 1e-14


def test_debiased_norm_suppresses_pure_noise(grid64):
    rng = np.random.default_rng(8)
    ghat = rng.standard_normal(64) * 1e-3
    vhat = np.full(64, 1e-6)  # matches the noise variance
    raw = vt_norm_debiased(ghat, None, grid64)
    deb = vt_norm_debiased(ghat, vhat, grid64)
    assert deb < 0.75 * raw


def test_empirical_cumulants_base_case(grid64, fam45c):
    mu = 0.5
    samples = []
    for seed in EnsembleSpec(11, 256).seeds():
        xi = sample_noise(grid64, seed)
        samples.append(apply_multiplier(xi.mollified(0.1, fam45c).values,
                                        fam45c.ktilde_mult(mu)))
    est = empirical_cumulants(np.stack(samples), ((0, 0), (0, 0)), grid64)
    assert est.norm <= 1.0 + 3.0 * est.stderr
    assert est.norm > 0.5


def test_empirical_cumulants_requires_pairs(grid64):
    with pytest.raises(ValueError):
        empirical_cumulants(np.zeros((32, 64)), ((0, 0),), grid64)
    with pytest.raises(ValueError):
        empirical_cumulants(np.zeros((8, 64)), ((0, 0), (0, 0)), grid64)


def test_one_leg_pair_cumulant_against_direct(grid16):
    # translation-reduced covariance of one-leg kernels vs a direct loop
    rng = np.random.default_rng(3)
    m, n = 24, grid16.nsites
    kernels = rng.standard_normal((m, n, n))
    est = empirical_cumulants(kernels, ((1, 1), (1, 1)), grid16)
    i = np.arange(n)
    rel = kernels[:, i[:, None], (i[:, None] + i[None, :]) % n]
    rel = rel - rel.mean(axis=0, keepdims=True)
    direct = np.zeros((n, n, n))
    for w in range(n):
        for u in range(n):
            for v in range(n):
                acc = 0.0
                for x in range(n):
                    acc += (rel[:, x, u] * rel[:, (x + w) % n, v]).sum()
                direct[w, u, v] = acc / (n * (m - 1))
    assert np.abs(est.kernel - direct).max() < 1e-10
    want_norm = np.abs(direct).sum() * grid16.h ** 3
    assert abs(est.norm - want_norm) < 1e-10
