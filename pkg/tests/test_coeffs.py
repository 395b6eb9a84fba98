import math
from itertools import permutations

import numpy as np
import pytest

from rgflow.errors import FlowInstabilityError, UnsupportedDepthError
from rgflow.grid import (
    DenseCoeffTensor,
    Field,
    GridKernel,
    apply_multiplier,
    circulant_matrix,
)
from rgflow.coeffs import (
    CoeffRep,
    FactoredTerm,
    b_map,
    coeff_mass,
    contract_force,
    flow_advance,
    flow_rhs,
    h_functional,
    init_coeffs,
    run_flow,
    support_radius,
    tensor_contract,
    vm_norm,
)
from rgflow.kernels import KernelFamily, ScaleGrid, length_scale
from rgflow.noise import EnsembleSpec, sample_noise


def random_field(grid, rng):
    return Field(grid, rng.standard_normal(grid.shape))


def random_kernel(grid, rng, even=False):
    d = rng.standard_normal(grid.shape)
    if even:
        d = 0.5 * (d + d[(-np.arange(grid.n)) % grid.n])
    return GridKernel.from_density(grid, d)


def direct_b_map(gk, w, u):
    """Literal quadrature of the graft formula on dense tensors (oracle)."""
    grid = gk.grid
    n, h = grid.n, grid.h
    k = w.legs - 1
    mu = u.legs
    m = k + mu
    gmat = circulant_matrix(gk)  # G(y - z)
    # contract W's first leg with G, then U's anchor
    a = np.tensordot(w.data, gmat, axes=([1], [0])) * h   # (x, rest_w..., z)
    a = np.moveaxis(a, -1, 1)
    prod = np.tensordot(a, u.data, axes=([1], [0])) * h   # (x, rest_w..., rest_u...)
    if m <= 1:
        return DenseCoeffTensor(grid, m, prod)
    out = np.zeros_like(prod)
    for perm in permutations(range(m)):
        out += np.transpose(prod, (0,) + tuple(1 + p for p in perm))
    out /= math.factorial(m)
    return DenseCoeffTensor(grid, m, out)


# ---------------------------------------------------------------------------
# graft map


def test_b_map_delta_constant(grid16, rng):
    gk = random_kernel(grid16, rng)
    w = CoeffRep.delta_tree(grid16, 0, 1, 1.0)
    u = CoeffRep.from_field(grid16, 0, np.full(grid16.shape, 1.0))
    out = b_map(gk, w, u)
    mass = gk.density.sum() * grid16.h
    assert out.legs == 0
    got = out.terms[0].core
    assert np.abs(got - mass).max() < 1e-10


def test_b_map_norm_inequality(grid16, rng):
    gk = random_kernel(grid16, rng, even=True)
    for k, mu in ((0, 1), (1, 1), (2, 0)):
        w = CoeffRep(grid16, 1, 1 + k,
                     dense=DenseCoeffTensor(grid16, 1 + k,
                                            rng.standard_normal((16,) * (2 + k))))
        u = CoeffRep(grid16, 1, mu,
                     dense=DenseCoeffTensor(grid16, mu,
                                            rng.standard_normal((16,) * (1 + mu))))
        out = b_map(gk, w, u)
        bound = gk.norm_tv * w.vm_norm() * u.vm_norm()
        assert out.vm_norm() <= bound * (1 + 1e-10)


def test_b_map_dense_matches_direct_oracle(grid16, rng):
    gk = random_kernel(grid16, rng)
    for k, mu in ((0, 1), (1, 1), (1, 0), (2, 1)):
        wd = DenseCoeffTensor(grid16, 1 + k, rng.standard_normal((16,) * (2 + k)))
        ud = DenseCoeffTensor(grid16, mu, rng.standard_normal((16,) * (1 + mu)))
        got = b_map(gk, CoeffRep(grid16, 1, 1 + k, dense=wd),
                    CoeffRep(grid16, 0, mu, dense=ud))
        want = direct_b_map(gk, wd, ud)
        scale = max(np.abs(want.data).max(), 1e-30)
        assert np.abs(got.dense.data - want.data).max() / scale < 1e-10


def test_b_map_factored_matches_dense(grid16, rng):
    # graft of the two-leg payload tree into the noise, both backends
    gk = random_kernel(grid16, rng, even=True)
    payload = rng.standard_normal(16)
    xi = rng.standard_normal(16)
    w_f = CoeffRep(grid16, 1, 2, terms=[FactoredTerm.single(3.0 * payload, 2)])
    u_f = CoeffRep.from_field(grid16, 0, xi)
    got = b_map(gk, w_f, u_f)
    w_d = CoeffRep(grid16, 1, 2, dense=w_f.densify())
    u_d = CoeffRep(grid16, 0, 0, dense=u_f.densify())
    want = b_map(gk, w_d, u_d)
    diff = np.abs(got.densify().data - want.dense.data).max()
    assert diff / max(np.abs(want.dense.data).max(), 1e-30) < 1e-10


def test_b_map_two_vertex_collapse_weights(grid16, rng):
    # symmetrized two-vertex term grafted into a field: the first leg sits at
    # the root with probability legs_root/legs
    gk = random_kernel(grid16, rng, even=True)
    core = rng.standard_normal((16, 16))
    w = CoeffRep(grid16, 2, 3, terms=[FactoredTerm(2, 1, 2, core)])
    u = CoeffRep.from_field(grid16, 0, rng.standard_normal(16))
    out = b_map(gk, w, u)
    assert out.legs == 2
    tops = sorted(t.topology for t in out.terms)
    assert tops == [(2, 0, 2), (2, 1, 1)]
    got = out.densify().data
    want = b_map(gk, CoeffRep(grid16, 2, 3, dense=w.densify()),
                 CoeffRep(grid16, 0, 0, dense=u.densify())).dense.data
    assert np.abs(got - want).max() / np.abs(want).max() < 1e-10


def test_b_map_depth_guard(grid16, rng):
    gk = random_kernel(grid16, rng)
    two_vertex = CoeffRep(grid16, 2, 2,
                          terms=[FactoredTerm(2, 1, 1, rng.standard_normal((16, 16)))])
    legged = CoeffRep.delta_tree(grid16, 1, 2, 1.0)
    with pytest.raises(UnsupportedDepthError):
        b_map(gk, two_vertex, legged)


def test_tensor_contract_symmetric_in_identical_args(grid16, rng):
    core = rng.standard_normal((16, 16))
    rep = CoeffRep(grid16, 2, 3, terms=[FactoredTerm(2, 1, 2, core)])
    phi = random_field(grid16, rng)
    psi = random_field(grid16, rng)
    a = rep.contract([psi.values.reshape(-1), phi.values.reshape(-1), phi.values.reshape(-1)])
    b = rep.contract([phi.values.reshape(-1), psi.values.reshape(-1), phi.values.reshape(-1)])
    assert np.abs(a - b).max() < 1e-12 * max(1.0, np.abs(a).max())


def test_factored_contract_matches_dense(grid16, rng):
    core = rng.standard_normal((16, 16))
    rep = CoeffRep(grid16, 2, 3, terms=[
        FactoredTerm(2, 1, 2, core),
        FactoredTerm.single(rng.standard_normal(16), 3),
    ])
    args = [random_field(grid16, rng) for _ in range(3)]
    got = tensor_contract(rep, args)
    dense = CoeffRep(grid16, 2, 3, dense=rep.densify())
    want = tensor_contract(dense, args)
    assert (got - want).sup() / want.sup() < 1e-10


def test_vm_norm_factored_conventions(grid16, rng):
    # one-vertex: sup of payload; two-vertex: sup over anchors of mass
    payload = rng.standard_normal(16)
    rep1 = CoeffRep(grid16, 1, 2, terms=[FactoredTerm.single(payload, 2)])
    assert abs(vm_norm(rep1) - np.abs(payload).max()) < 1e-14
    core = rng.standard_normal((16, 16))
    rep2 = CoeffRep(grid16, 2, 1, terms=[FactoredTerm(2, 0, 1, core)])
    want = (np.abs(core).sum(axis=1) * grid16.h).max()
    assert abs(vm_norm(rep2) - want) < 1e-14
    # matches the dense norm for a single topology
    assert abs(vm_norm(rep2) - rep2.densify().vm_norm()) < 1e-12


# ---------------------------------------------------------------------------
# flow


def closed_forms(fam, mu, xi_vals, c1, c2=0.0):
    fl = fam.fluctuation_kernel(mu).multiplier
    t1 = apply_multiplier(xi_vals, fl)
    t2 = t1 ** 2 + c1 / 3.0
    t3 = t1 ** 3 + c1 * t1
    t30 = apply_multiplier(t3, fl)
    f20 = 3.0 * t2 * t30 + c2 * t1
    return t1, t2, t3, t30, f20


def test_init_coeffs_structure(grid32, pc40, rng):
    xi = random_field(grid32, rng)
    cset = init_coeffs(xi, (-0.5, 0.25), pc40)
    assert set(cset.entries()) == {(0, 0), (1, 3), (1, 1), (2, 1)}
    assert cset.get(2, 0) is None
    phi = random_field(grid32, rng)
    cubed = tensor_contract(cset.get(1, 3), [phi, phi, phi])
    assert np.abs(cubed.values - phi.values ** 3).max() < 1e-12
    assert np.abs(cset.get(0, 0).terms[0].core - xi.values.reshape(-1)).max() == 0.0


def test_flow_rhs_enumeration(grid64, pc40, fam40f, rng):
    xi = random_field(grid64, rng)
    cset = init_coeffs(xi, (-0.5, 0.25), pc40)
    step = fam40f.step_kernel(0.42, 0.46)
    rhs = flow_rhs(cset, step)
    assert (1, 3) not in rhs  # every candidate graft involves a vanishing factor
    # rhs(1,2) = -3 (step * xi) on the double-delta tree
    got = rhs[(1, 2)]
    assert len(got) == 1 and got[0].topology == (1, 2, 0)
    want = -3.0 * apply_multiplier(xi.values, step.multiplier).reshape(-1)
    assert np.abs(got[0].core - want).max() < 1e-12 * max(1.0, np.abs(want).max())


@pytest.fixture(scope="module")
def fam40f(grid64):
    return KernelFamily(grid64, 0.40, ScaleGrid.build(1e-4, 384))


def test_flow_closed_forms(grid64, pc40, fam40f):
    c1, c2 = -0.37, 0.11
    xi = sample_noise(grid64, 4)
    final = run_flow(xi.values, fam40f, pc40, (c1, c2))
    t1, t2, t3, t30, f20 = closed_forms(fam40f, 0.5, xi.values.values, c1, c2)
    # the quadratic tree is integrated exactly by the step kernels
    assert np.abs(final.get(1, 2).terms[0].core - 3 * t1.reshape(-1)).max() < 1e-12
    # the cubic delta tree never moves
    assert np.abs(final.get(1, 3).terms[0].core - 1.0).max() == 0.0
    # state-dependent trees match at quadrature accuracy (the acceptance
    # suite measures the refinement order; these are smoke tolerances)
    for key, want, tol in (((1, 1), 3 * t2, 0.01), ((1, 0), t3, 0.08),
                           ((2, 0), f20, 0.5)):
        got = final.get(*key).terms[0].core
        rel = np.abs(got - want.reshape(-1)).max() / np.abs(want).max()
        assert rel < tol, (key, rel)


def test_flow_refinement_order(grid64, pc40):
    c1, c2 = -0.37, 0.11
    xi = sample_noise(grid64, 4)
    errs = []
    for count in (96, 192, 384):
        fam = KernelFamily(grid64, 0.40, ScaleGrid.build(1e-4, count))
        final = run_flow(xi.values, fam, pc40, (c1, c2))
        _, t2, t3, _, f20 = closed_forms(fam, 0.5, xi.values.values, c1, c2)
        err = max(
            np.abs(final.get(1, 1).terms[0].core - 3 * t2.reshape(-1)).max(),
            np.abs(final.get(1, 0).terms[0].core - t3.reshape(-1)).max(),
        )
        errs.append(err)
    assert errs[0] > errs[1] > errs[2]
    assert np.log2(errs[1] / errs[2]) > 1.5


def test_flow_two_vertex_closed_form(grid64, pc40, fam40f):
    c1, c2 = -0.37, 0.11
    xi = sample_noise(grid64, 4)
    final = run_flow(xi.values, fam40f, pc40, (c1, c2))
    t1, t2, t3, t30, _ = closed_forms(fam40f, 0.5, xi.values.values, c1, c2)
    r21 = final.get(2, 1)
    pay = next(t for t in r21.terms if t.vertices == 1)
    core = next(t for t in r21.terms if t.vertices == 2)
    want_pay = 6.0 * t1 * t30 + c2
    assert np.abs(pay.core - want_pay.reshape(-1)).max() / np.abs(want_pay).max() < 0.4
    fl = fam40f.fluctuation_kernel(0.5).density
    i = np.arange(64)
    want_core = 9.0 * t2.reshape(-1)[:, None] * fl[(i[:, None] - i[None, :]) % 64] \
        * t2.reshape(-1)[None, :]
    assert np.abs(core.core - want_core).max() / np.abs(want_core).max() < 0.4
    # the quintic tree integrates exactly to three times the fluctuation kernel
    t25 = final.get(2, 5).terms[0]
    assert t25.topology == (2, 2, 3)
    want25 = 3.0 * fl[(i[:, None] - i[None, :]) % 64]
    assert np.abs(t25.core - want25).max() < 1e-12


def test_counterterm_insertion_bitwise_invariance(grid64, pc40, fam40f):
    # only coefficients allowed to depend on the mass counterterm change
    xi = sample_noise(grid64, 4)
    a = run_flow(xi.values, fam40f, pc40, (-0.37, 0.0))
    b = run_flow(xi.values, fam40f, pc40, (+0.83, 0.0))
    assert np.array_equal(a.get(1, 3).terms[0].core, b.get(1, 3).terms[0].core)
    assert np.array_equal(a.get(1, 2).terms[0].core, b.get(1, 2).terms[0].core)
    assert not np.array_equal(a.get(1, 1).terms[0].core, b.get(1, 1).terms[0].core)


def test_flow_instability_guard(grid64, pc40, fam40f):
    xi = sample_noise(grid64, 4)
    cset = init_coeffs(xi.values, (-0.37, 0.0), pc40)
    # advance into the active band, then doctor the next step kernel
    active = None
    for j, (lo, _, hi) in enumerate(fam40f.scale_grid.flow_intervals()):
        if fam40f.step_kernel(lo, hi).norm_tv > 0.05 and cset.mu > 0.0:
            active = (lo, hi)
            break
        cset, _ = flow_advance(cset, fam40f, hi)
    assert active is not None

    class Doctored:
        def __init__(self, fam):
            self.fam = fam
            self.scale_grid = fam.scale_grid

        def step_kernel(self, lo, hi):
            k = self.fam.step_kernel(lo, hi)
            return GridKernel(k.grid, k.density * 1e9, k.multiplier * 1e9)

    with pytest.raises(FlowInstabilityError):
        flow_advance(cset, Doctored(fam40f), active[1])


@pytest.fixture(scope="module")
def fam40c(grid64):
    return KernelFamily(grid64, 0.40, ScaleGrid.build(1e-4, 96))


def test_mean_parity(grid64, pc40, fam40c):
    # coefficients with an even leg count have vanishing ensemble mean
    acc = {}
    members = 48
    for seed in EnsembleSpec(11, members).seeds():
        xi = sample_noise(grid64, seed)
        final = run_flow(xi.values, fam40c, pc40, (-0.37, 0.0))
        for key in ((1, 0), (1, 2), (2, 1)):
            rep = final.get(*key)
            pay = next(t.core for t in rep.terms if t.vertices == 1)
            acc.setdefault(key, []).append(pay.copy())
        acc.setdefault("odd", []).append(final.get(1, 1).terms[0].core.copy())
    for key in ((1, 0), (1, 2)):
        stack = np.stack(acc[key])
        mean = stack.mean(axis=0)
        stderr = stack.std(axis=0, ddof=1) / np.sqrt(members)
        assert np.all(np.abs(mean) < 4.5 * stderr + 1e-12)
    # odd leg count: the mass coefficient has a nonzero anchor-averaged mean
    # away from the renormalization point
    masses = np.array([v.mean() for v in acc["odd"]])
    assert abs(masses.mean()) > 6 * masses.std(ddof=1) / np.sqrt(members)


# ---------------------------------------------------------------------------
# force functionals


def test_contract_force_lambda_zero(grid64, pc40, fam40c, rng):
    xi = sample_noise(grid64, 4)
    final = run_flow(xi.values, fam40c, pc40, (-0.37, 0.11))
    phi = random_field(grid64, rng)
    out = contract_force(final, 0.0, phi)
    # at lambda = 0 only the order-zero coefficient survives
    assert np.abs(out.values - xi.values.values).max() < 1e-12


def test_contract_force_boundary_formula(grid64, pc40, rng):
    # at scale zero the force is noise + lam phi^3 + mass counterterms
    xi = random_field(grid64, rng)
    cts = (-0.5, 0.25)
    cset = init_coeffs(xi, cts, pc40)
    phi = random_field(grid64, rng)
    lam = 0.3
    out = contract_force(cset, lam, phi)
    want = xi.values + lam * phi.values ** 3 \
        + (lam * cts[0] + lam ** 2 * cts[1]) * phi.values
    assert np.abs(out.values - want).max() < 1e-11


def test_contract_force_polynomial_in_coupling(grid64, pc40, fam40c, rng):
    # values at distinct couplings interpolate a polynomial of degree <= i_flat
    xi = sample_noise(grid64, 4)
    final = run_flow(xi.values, fam40c, pc40, (-0.37, 0.11))
    phi = random_field(grid64, rng)
    lams = np.linspace(-0.9, 0.9, 3 * pc40.i_flat + 1)
    site = 7
    vals = np.array([contract_force(final, l, phi).values[site] for l in lams])
    coeffs = np.polyfit(lams, vals, pc40.i_flat)
    resid = np.abs(np.polyval(coeffs, lams) - vals).max()
    assert resid < 1e-9 * max(1.0, np.abs(vals).max())


def test_contract_force_directional_derivative(grid64, pc40, fam40c, rng):
    xi = sample_noise(grid64, 4)
    final = run_flow(xi.values, fam40c, pc40, (-0.37, 0.11))
    phi = random_field(grid64, rng)
    psi = random_field(grid64, rng)
    lam = 0.2
    eps = 1e-6
    fd = (contract_force(final, lam, phi + eps * psi).values
          - contract_force(final, lam, phi + (-eps) * psi).values) / (2 * eps)
    dv = contract_force(final, lam, phi, deriv=(1, psi)).values
    assert np.abs(fd - dv).max() / max(1.0, np.abs(dv).max()) < 1e-6


def test_h_functional_lambda_zero(grid64, pc40, fam40c, rng):
    xi = sample_noise(grid64, 4)
    final = run_flow(xi.values, fam40c, pc40, (-0.37, 0.11))
    phi = random_field(grid64, rng)
    out = h_functional(final, 0.0, phi, fam40c)
    assert np.abs(out.values).max() == 0.0


def test_h_functional_leading_coupling_order(grid64, pc40, fam40c, rng):
    # dividing by lam^(i_flat+1) tends to a finite nonzero limit
    xi = sample_noise(grid64, 4)
    final = run_flow(xi.values, fam40c, pc40, (-0.37, 0.11))
    phi = random_field(grid64, rng)
    p = pc40.i_flat + 1
    v1 = h_functional(final, 1e-3, phi, fam40c).values / 1e-3 ** p
    v2 = h_functional(final, 1e-4, phi, fam40c).values / 1e-4 ** p
    scale = np.abs(v1).max()
    assert scale > 0
    assert np.abs(v1 - v2).max() / scale < 0.2


def test_h_functional_flow_defect_residual(grid64, pc40, rng):
    # finite differences of the undressed force reproduce the defect,
    # improving under scale-grid refinement (order >= 1)
    xi = sample_noise(grid64, 4)
    phi = random_field(grid64, rng)
    lam = 0.4
    resids = []
    for count in (96, 192):
        fam = KernelFamily(grid64, 0.40, ScaleGrid.build(1e-4, count))
        pc = pc40
        traj = run_flow(xi.values, fam, pc, (-0.37, 0.11), keep_trajectory=True)
        mus = [s.mu for s in traj]
        j = next(i for i, mu in enumerate(mus) if mu > 0.45)
        lo, hi = traj[j - 1], traj[j + 1]
        mid = traj[j]
        dmu = mus[j + 1] - mus[j - 1]
        dF = (contract_force(hi, lam, phi).values
              - contract_force(lo, lam, phi).values) / dmu
        gdot = fam.gdot_kernel(mus[j]).multiplier
        df_slot = apply_multiplier(contract_force(mid, lam, phi).values, gdot)
        dfdot = contract_force(mid, lam, phi, deriv=(1, Field(grid64, df_slot))).values
        h_val = h_functional(mid, lam, phi, fam, dressed=False).values
        resid = np.abs(dF + dfdot - h_val).max()
        scale = max(np.abs(h_val).max(), np.abs(dfdot).max())
        resids.append(resid / scale)
    assert resids[1] < resids[0]


# ---------------------------------------------------------------------------
# support and mass


def test_support_radius_deltas(grid32, pc40, rng):
    rep = CoeffRep.delta_tree(grid32, 1, 1, 2.0)
    assert support_radius(rep) == 0.0


def test_support_radius_bound(grid64, pc40, fam40c):
    xi = sample_noise(grid64, 4)
    traj = run_flow(xi.values, fam40c, pc40, (-0.37, 0.11), keep_trajectory=True)
    kappa = 0.2
    for cset in traj[::8]:
        if cset.mu == 0.0:
            continue
        bound = max(length_scale(max(cset.mu, kappa), 0.40), 0.0)
        for key in cset.entries():
            rad = support_radius(cset.get(*key))
            assert rad <= 1.0 * bound + 1e-12, (key, cset.mu, rad, bound)


def test_coeff_mass(grid32, rng):
    payload = rng.standard_normal(32)
    rep = CoeffRep(grid32, 1, 1, terms=[FactoredTerm.single(payload, 1)])
    assert abs(coeff_mass(rep, grid32) - payload.mean()) < 1e-14
    core = rng.standard_normal((32, 32))
    rep2 = CoeffRep(grid32, 2, 1, terms=[FactoredTerm(2, 0, 1, core)])
    want = (core.sum(axis=1) * grid32.h).mean()
    assert abs(coeff_mass(rep2, grid32) - want) < 1e-14
