"""Effective force coefficients, the scale-flow integrator and contractions.

A coefficient of order i with m legs is a kernel F(x; y_1..y_m), symmetric
in the legs.  Two representations are supported:

* dense: an explicit (1+m)-index tensor (small grids, oracle checks);
* factored: a list of one- or two-vertex terms.  A one-vertex term is
  payload(x) * delta_x(dy_1)...delta_x(dy_m).  A two-vertex term carries a
  core C(x, z), k1 legs pinned to the anchor x and k2 legs pinned to the
  interior vertex z, meaning the symmetrization of
      C(x, z) dz * delta_x^(k1) * delta_z^(k2)
  over all assignments of the m = k1 + k2 arguments to the legs.

The flow advances a coefficient set in the scale parameter with an explicit
midpoint (second order) step; the right-hand side grafts pairs of lower
coefficients through the shell kernel.  Eager collapse keeps every term at
two vertices or fewer: an interior vertex that loses its last free leg is
integrated out into the payload immediately, and terms with identical leg
topology are merged by adding cores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np

from .errors import (
    ArityError,
    FlowInstabilityError,
    GridMismatchError,
    UnsupportedDepthError,
)
from .grid import (
    DenseCoeffTensor,
    Field,
    GridKernel,
    TorusGrid,
    apply_multiplier,
    circulant_matrix,
)

# Instability guard: a flow step may not blow any coefficient norm up by more
# than this factor once the norm is above the absolute floor.  Legitimate
# shell activations grow norms by two orders of magnitude from near-zero
# baselines, so the guard only catches genuine runaway amplification.
GUARD_FACTOR = 1e4
GUARD_FLOOR = 1e-8
# two-vertex cores are (nsites, nsites) arrays; refuse them on grids where a
# single core would exceed ~32 MB (use order_cap=1 for one-vertex studies)
PAIR_VALUE_CAP = 2 ** 22
_SUPPORT_REL_TOL = 1e-12


def _flat(values) -> np.ndarray:
    if isinstance(values, Field):
        return values.values.reshape(-1)
    return np.asarray(values, dtype=float).reshape(-1)


def _smooth_flat(grid: TorusGrid, flat: np.ndarray, mult: np.ndarray) -> np.ndarray:
    return apply_multiplier(flat.reshape(grid.shape), mult).reshape(-1)


def _smooth_core(grid: TorusGrid, core: np.ndarray, mult: np.ndarray) -> np.ndarray:
    """Apply a multiplier to both the anchor and interior index of a core."""
    d = grid.d
    shaped = core.reshape(grid.shape * 2).astype(complex)
    for group in (range(d), range(d, 2 * d)):
        axes = tuple(group)
        shaped = np.fft.fftn(shaped, axes=axes)
        shp = [1] * shaped.ndim
        for j, ax in enumerate(axes):
            shp[ax] = mult.shape[j]
        shaped = shaped * mult.reshape(shp)
        shaped = np.fft.ifftn(shaped, axes=axes)
    return shaped.real.reshape(core.shape)


@dataclass
class FactoredTerm:
    """One tree term of a factored coefficient; weight is folded into core."""

    vertices: int
    legs_root: int
    legs_other: int
    core: np.ndarray

    @classmethod
    def single(cls, payload: np.ndarray, legs: int, weight: float = 1.0) -> "FactoredTerm":
        return cls(1, legs, 0, np.asarray(payload, dtype=float).reshape(-1) * weight)

    @classmethod
    def pair(cls, grid: TorusGrid, core: np.ndarray, legs_root: int, legs_other: int,
             weight: float = 1.0) -> "FactoredTerm":
        """Two-vertex term; collapses the interior vertex if it has no legs."""
        if grid.nsites ** 2 > PAIR_VALUE_CAP:
            raise MemoryGuardError(
                f"two-vertex core with {grid.nsites}^2 values exceeds the cap; "
                "restrict the flow to one-vertex orders on this grid"
            )
        core = np.asarray(core, dtype=float) * weight
        if legs_other == 0:
            return cls.single(core.sum(axis=1) * grid.h ** grid.d, legs_root)
        return cls(2, legs_root, legs_other, core)

    @property
    def legs(self) -> int:
        return self.legs_root + self.legs_other

    @property
    def topology(self):
        return (self.vertices, self.legs_root, self.legs_other)

    def leg_assignment(self):
        """Explicit map {root, leg_1..leg_m} -> vertex index."""
        out = {"root": 1}
        for j in range(self.legs):
            out[f"leg_{j + 1}"] = 1 if j < self.legs_root else 2
        return out

    def scaled(self, c: float) -> "FactoredTerm":
        return FactoredTerm(self.vertices, self.legs_root, self.legs_other, self.core * c)

    def contract(self, grid: TorusGrid, args) -> np.ndarray:
        """Symmetrized contraction against flat argument arrays."""
        m = self.legs
        if len(args) != m:
            raise ArityError(f"term with {m} legs contracted with {len(args)} arguments")
        if self.vertices == 1:
            out = self.core.copy()
            for a in args:
                out = out * a
            return out
        hd = grid.h ** grid.d
        k1 = self.legs_root
        w = math.factorial(k1) * math.factorial(self.legs_other) / math.factorial(m)
        out = np.zeros(grid.nsites)
        for subset in combinations(range(m), k1):
            root_prod = np.ones(grid.nsites)
            other_prod = np.ones(grid.nsites)
            for j in range(m):
                if j in subset:
                    root_prod = root_prod * args[j]
                else:
                    other_prod = other_prod * args[j]
            out += w * root_prod * (self.core @ other_prod) * hd
        return out

    def vm_norm(self, grid: TorusGrid) -> float:
        if self.vertices == 1:
            return float(np.abs(self.core).max())
        return float(np.abs(self.core).sum(axis=1).max() * grid.h ** grid.d)

    def smoothed_vm_norm(self, grid: TorusGrid, mult: np.ndarray) -> float:
        """Smoothed-norm contribution; see CoeffRep.smoothed_vm_norm."""
        if self.vertices == 1:
            return float(np.abs(_smooth_flat(grid, self.core, mult)).max())
        sm = _smooth_core(grid, self.core, mult)
        return float(np.abs(sm).sum(axis=1).max() * grid.h ** grid.d)

    def support_radius(self, grid: TorusGrid, dist_matrix: np.ndarray) -> float:
        if self.vertices == 1:
            return 0.0
        peak = np.abs(self.core).max()
        if peak == 0.0:
            return 0.0
        mask = np.abs(self.core) > _SUPPORT_REL_TOL * peak
        return float(dist_matrix[mask].max()) if mask.any() else 0.0


def merge_terms(terms) -> list:
    """Sum cores of terms with identical leg topology, drop exact zeros."""
    merged: dict = {}
    for t in terms:
        key = t.topology
        if key in merged:
            merged[key] = FactoredTerm(t.vertices, t.legs_root, t.legs_other,
                                       merged[key].core + t.core)
        else:
            merged[key] = FactoredTerm(t.vertices, t.legs_root, t.legs_other,
                                       t.core.copy())
    return [t for t in merged.values() if np.abs(t.core).max() > 0.0]


@dataclass
class CoeffRep:
    """One effective force coefficient F^{(order, legs)} at a fixed scale."""

    grid: TorusGrid
    order: int
    legs: int
    terms: list | None = None
    dense: DenseCoeffTensor | None = None

    @property
    def backend(self) -> str:
        return "dense" if self.dense is not None else "factored"

    @classmethod
    def from_field(cls, grid: TorusGrid, order: int, values) -> "CoeffRep":
        return cls(grid, order, 0, terms=[FactoredTerm.single(_flat(values), 0)])

    @classmethod
    def delta_tree(cls, grid: TorusGrid, order: int, legs: int, payload) -> "CoeffRep":
        """payload(x) times delta^{[legs]}; payload may be scalar or field."""
        p = np.full(grid.nsites, float(payload)) if np.isscalar(payload) else _flat(payload)
        return cls(grid, order, legs, terms=[FactoredTerm.single(p, legs)])

    def copy(self) -> "CoeffRep":
        if self.dense is not None:
            return CoeffRep(self.grid, self.order, self.legs,
                            dense=DenseCoeffTensor(self.grid, self.legs,
                                                   self.dense.data.copy(),
                                                   self.dense.symmetric))
        return CoeffRep(self.grid, self.order, self.legs,
                        terms=[t.scaled(1.0) for t in self.terms])

    def scaled(self, c: float) -> "CoeffRep":
        if self.dense is not None:
            return CoeffRep(self.grid, self.order, self.legs,
                            dense=DenseCoeffTensor(self.grid, self.legs,
                                                   self.dense.data * c,
                                                   self.dense.symmetric))
        return CoeffRep(self.grid, self.order, self.legs,
                        terms=[t.scaled(c) for t in self.terms])

    def add_terms(self, terms, c: float = 1.0) -> "CoeffRep":
        if self.dense is not None:
            raise ValueError("cannot add factored terms to a dense representation")
        return CoeffRep(self.grid, self.order, self.legs,
                        terms=merge_terms(self.terms + [t.scaled(c) for t in terms]))

    def contract(self, args) -> np.ndarray:
        flats = [_flat(a) for a in args]
        if self.dense is not None:
            fields = [Field(self.grid, f.reshape(self.grid.shape)) for f in flats]
            return self.dense.contract(fields).values.reshape(-1)
        if len(flats) != self.legs:
            raise ArityError(f"expected {self.legs} arguments, got {len(flats)}")
        out = np.zeros(self.grid.nsites)
        for t in self.terms:
            out += t.contract(self.grid, flats)
        return out

    def vm_norm(self) -> float:
        if self.dense is not None:
            return self.dense.vm_norm()
        return float(sum(t.vm_norm(self.grid) for t in self.terms))

    def smoothed_vm_norm(self, mult: np.ndarray) -> float:
        """Norm of the coefficient smoothed at every index by `mult`.

        Dense backend: exact.  Factored backend: the mass-one smoothing of
        the pinned legs is integrated out exactly, while the anchor and the
        interior vertex are smoothed before absolute values are taken.
        This is exact for m = 0 and for one-signed payloads, and captures
        the sign cancellations that drive the scale behaviour.
        """
        if self.dense is not None:
            return self.dense.smooth(mult).vm_norm()
        return float(sum(t.smoothed_vm_norm(self.grid, mult) for t in self.terms))

    def support_radius(self) -> float:
        if self.dense is not None:
            return _dense_support_radius(self.dense)
        dm = _distance_matrix(self.grid)
        return max((t.support_radius(self.grid, dm) for t in self.terms), default=0.0)

    def densify(self) -> DenseCoeffTensor:
        """Materialize the symmetrized kernel as a dense tensor (tests only)."""
        if self.dense is not None:
            return self.dense
        grid = self.grid
        m = self.legs
        n = grid.nsites
        hd = grid.h ** grid.d
        data = np.zeros((n,) * (1 + m))
        idx = np.arange(n)
        for t in self.terms:
            if t.vertices == 1:
                data[(idx,) * (1 + m)] += t.core * hd ** (-m)
            else:
                k1 = t.legs_root
                w = math.factorial(k1) * math.factorial(t.legs_other) / math.factorial(m)
                scale = hd ** (-(k1 + t.legs_other - 1))
                for subset in combinations(range(m), k1):
                    for x in range(n):
                        for z in range(n):
                            pos = [x] + [x if j in subset else z for j in range(m)]
                            data[tuple(pos)] += w * t.core[x, z] * scale
        return DenseCoeffTensor(grid, m, data.reshape(grid.shape * (1 + m)),
                                symmetric=True)


_DIST_CACHE: dict = {}


def _distance_matrix(grid: TorusGrid) -> np.ndarray:
    key = (grid.d, grid.n)
    if key not in _DIST_CACHE:
        dist = grid.distance().reshape(-1)
        if grid.d == 1:
            i = np.arange(grid.n)
            _DIST_CACHE[key] = dist[(i[:, None] - i[None, :]) % grid.n]
        else:
            ix, iy = grid.coords()
            di = (ix[:, None] - ix[None, :]) % grid.n
            dj = (iy[:, None] - iy[None, :]) % grid.n
            _DIST_CACHE[key] = dist.reshape(grid.shape)[di, dj]
    return _DIST_CACHE[key]


def _dense_support_radius(t: DenseCoeffTensor) -> float:
    grid = t.grid
    if t.legs == 0:
        return 0.0
    peak = np.abs(t.data).max()
    if peak == 0.0:
        return 0.0
    dist = grid.distance().reshape(-1)
    if grid.d == 1:
        i = np.arange(grid.n)
        dmat = dist[(i[:, None] - i[None, :]) % grid.n]
    else:
        ix, iy = grid.coords()
        dmat = grid.distance()[(ix[:, None] - ix[None, :]) % grid.n,
                               (iy[:, None] - iy[None, :]) % grid.n]
    flat = np.abs(t.data.reshape((grid.nsites,) * (1 + t.legs)))
    worst = 0.0
    for leg in range(t.legs):
        axes = tuple(j for j in range(1, 1 + t.legs) if j != leg + 1)
        prof = flat.max(axis=axes) if axes else flat
        mask = prof > _SUPPORT_REL_TOL * peak
        if mask.any():
            worst = max(worst, float(dmat[mask].max()))
    return worst


# ---------------------------------------------------------------------------
# public wrappers


def tensor_contract(rep: CoeffRep, args) -> Field:
    """<F(x; .), arg_1 x ... x arg_m> as a field over the anchor point."""
    for a in args:
        if isinstance(a, Field) and a.grid != rep.grid:
            raise GridMismatchError("contraction arguments on a different grid")
    return Field(rep.grid, rep.contract(args).reshape(rep.grid.shape))


def vm_norm(rep: CoeffRep) -> float:
    """sup over the anchor of the total variation in the leg variables."""
    return rep.vm_norm()


def support_radius(rep: CoeffRep) -> float:
    """Largest leg-to-anchor periodic distance carrying mass."""
    return rep.support_radius()


# ---------------------------------------------------------------------------
# the graft map


def b_map(gk: GridKernel, w_rep: CoeffRep, u_rep: CoeffRep) -> CoeffRep:
    """Graft U into the first leg of W through the kernel gk.

    Contracts W's first leg variable through gk(y - z) into U's anchor z and
    symmetrizes over the remaining legs; the result has W.legs - 1 + U.legs
    legs.  Factored inputs stay within two vertices (eager collapse when U
    has no legs); anything deeper raises UnsupportedDepthError.
    """
    if w_rep.legs < 1:
        raise ArityError("W must have at least one leg to graft through")
    m = w_rep.legs - 1 + u_rep.legs
    order = w_rep.order + u_rep.order
    if w_rep.backend == "dense" and u_rep.backend == "dense":
        return CoeffRep(w_rep.grid, order, m,
                        dense=_b_map_dense(gk, w_rep.dense, u_rep.dense))
    if w_rep.backend != "factored" or u_rep.backend != "factored":
        raise ValueError("b_map requires both operands on the same backend")
    terms = []
    for tw in w_rep.terms:
        for tu in u_rep.terms:
            terms.extend(_b_map_terms(gk, tw, tu))
    return CoeffRep(w_rep.grid, order, m, terms=merge_terms(terms))


def _b_map_terms(gk: GridKernel, tw: FactoredTerm, tu: FactoredTerm) -> list:
    grid = gk.grid
    if tu.legs == 0:
        # interior payload: gk * u collapses onto a vertex of W
        gu = _smooth_flat(grid, tu.core, gk.multiplier)
        if tw.vertices == 1:
            return [FactoredTerm.single(tw.core * gu, tw.legs_root - 1)]
        total = tw.legs_root + tw.legs_other
        out = []
        if tw.legs_root >= 1:
            out.append(FactoredTerm.pair(
                grid, tw.core * gu[:, None], tw.legs_root - 1, tw.legs_other,
                weight=tw.legs_root / total))
        if tw.legs_other >= 1:
            out.append(FactoredTerm.pair(
                grid, tw.core * gu[None, :], tw.legs_root, tw.legs_other - 1,
                weight=tw.legs_other / total))
        return out
    if tw.vertices == 1 and tu.vertices == 1:
        gmat = circulant_matrix(gk)
        core = tw.core[:, None] * gmat * tu.core[None, :]
        return [FactoredTerm.pair(grid, core, tw.legs_root - 1, tu.legs_root)]
    raise UnsupportedDepthError(
        "graft would create a factored term with more than two vertices"
    )


def _b_map_dense(gk: GridKernel, w: DenseCoeffTensor, u: DenseCoeffTensor) -> DenseCoeffTensor:
    grid = gk.grid
    d = grid.d
    hd = grid.h ** grid.d
    # correlate W's first leg with gk: A[x, z, rest] = h^d sum_y W[x, y, rest] gk(y - z)
    data = w.data.astype(complex)
    axes = tuple(range(d, 2 * d))
    data = np.fft.fftn(data, axes=axes)
    shp = [1] * data.ndim
    for j, ax in enumerate(axes):
        shp[ax] = grid.n
    data = data * np.conj(gk.multiplier).reshape(shp)
    a = np.fft.ifftn(data, axes=axes).real
    # move the contracted axis group to the end, tensordot with U's anchor
    a = np.moveaxis(a, axes, tuple(range(a.ndim - d, a.ndim)))
    out = np.tensordot(a, u.data, axes=d) * hd
    res = DenseCoeffTensor(grid, w.legs - 1 + u.legs, out, symmetric=False)
    return res.symmetrized()


# ---------------------------------------------------------------------------
# coefficient sets and the flow


@dataclass
class CoeffSet:
    """Indexed family of coefficients at one scale, for one noise sample."""

    grid: TorusGrid
    pc: object
    kappa: float
    mu: float
    coeffs: dict
    counterterms: tuple
    guard_scale: float = 1.0

    def get(self, i: int, m: int):
        return self.coeffs.get((i, m))

    def entries(self):
        return sorted(self.coeffs.keys())

    def copy(self) -> "CoeffSet":
        return CoeffSet(self.grid, self.pc, self.kappa, self.mu,
                        {k: v.copy() for k, v in self.coeffs.items()},
                        self.counterterms, self.guard_scale)

    def add_scaled(self, rhs: dict, c: float, mu: float) -> "CoeffSet":
        """Set plus c * rhs, relabeled to scale mu."""
        coeffs = {k: v.copy() for k, v in self.coeffs.items()}
        for key, terms in rhs.items():
            if not terms:
                continue
            if key in coeffs:
                coeffs[key] = coeffs[key].add_terms(terms, c)
            else:
                coeffs[key] = CoeffRep(self.grid, key[0], key[1],
                                       terms=merge_terms([t.scaled(c) for t in terms]))
        return CoeffSet(self.grid, self.pc, self.kappa, mu, coeffs,
                        self.counterterms, self.guard_scale)


def max_legs(i: int) -> int:
    """Largest leg count with a nonvanishing coefficient at order i."""
    return min(3 * i, 2 * i + 1) if i > 0 else 0


def init_coeffs(xi_kappa: Field, counterterms, pc) -> CoeffSet:
    """Boundary data of the flow at scale zero.

    Nonzero entries: the noise at order zero, the cubic delta tree at order
    one, and one mass counterterm per order up to the renormalization order.
    """
    if pc.i_flat > 2:
        raise UnsupportedDepthError(
            f"truncation order i_flat = {pc.i_flat} > 2 is not representable "
            "with two-vertex factored terms"
        )
    grid = xi_kappa.grid
    cts = tuple(float(c) for c in counterterms)
    if len(cts) < pc.i_sharp:
        # unsupplied higher orders run unrenormalized
        cts = cts + (0.0,) * (pc.i_sharp - len(cts))
    coeffs = {
        (0, 0): CoeffRep.from_field(grid, 0, xi_kappa),
        (1, 3): CoeffRep.delta_tree(grid, 1, 3, 1.0),
    }
    for i in range(1, pc.i_sharp + 1):
        coeffs[(i, 1)] = CoeffRep.delta_tree(grid, i, 1, cts[i - 1])
    guard_scale = 1.0 + xi_kappa.sup() + max((abs(c) for c in cts), default=0.0)
    return CoeffSet(grid, pc, 0.0, 0.0, coeffs, cts, guard_scale)


def flow_rhs(cset: CoeffSet, gdot: GridKernel, order_cap: int | None = None) -> dict:
    """Right-hand side of the flow at the set's scale, as factored terms.

    rhs(i, m) = - sum_{j,k} (1+k) * graft(gdot, F^{j,1+k}, F^{i-j,m-k});
    pairs whose coefficients vanish identically are skipped.  order_cap
    restricts the computed orders (used when only low orders are needed).
    """
    out: dict = {}
    if np.abs(gdot.density).max() == 0.0:
        return out
    i_flat = cset.pc.i_flat if order_cap is None else min(cset.pc.i_flat, order_cap)
    for i in range(1, i_flat + 1):
        for m in range(max_legs(i), -1, -1):
            terms = []
            for j in range(1, i + 1):
                for k in range(0, m + 1):
                    w = cset.get(j, 1 + k)
                    u = cset.get(i - j, m - k)
                    if w is None or u is None:
                        continue
                    graft = b_map(gdot, w, u)
                    terms.extend(t.scaled(-(1.0 + k)) for t in graft.terms)
            if terms:
                out[(i, m)] = merge_terms(terms)
    return out


def _guard_norms(cset: CoeffSet) -> dict:
    return {key: rep.vm_norm() for key, rep in cset.coeffs.items()}


def flow_advance(cset: CoeffSet, family, mu_hi: float,
                 guard_factor: float = GUARD_FACTOR,
                 order_cap: int | None = None):
    """One explicit-midpoint step from the set's scale to mu_hi.

    The graft kernel of each stage is the exact scale integral of the shell
    kernel over the (half-)interval, so state-independent contributions are
    integrated exactly and the remaining error is the second-order midpoint
    error of the state.  Returns (advanced set, integrated midpoint rhs).
    """
    mu_lo = cset.mu
    if mu_hi <= mu_lo:
        raise ValueError("flow_advance needs mu_hi > current scale")
    mu_mid = 0.5 * (mu_lo + mu_hi)
    r_lo = flow_rhs(cset, family.step_kernel(mu_lo, mu_mid), order_cap)
    half = cset.add_scaled(r_lo, 1.0, mu_mid)
    r_mid = flow_rhs(half, family.step_kernel(mu_lo, mu_hi), order_cap)
    before = _guard_norms(cset)
    advanced = cset.add_scaled(r_mid, 1.0, mu_hi)
    # shell activations legitimately ramp norms over many orders of
    # magnitude from near-zero baselines, so jumps are measured against the
    # overall size of the set, and every norm is capped by a ceiling built
    # from the boundary data (runaway integrations cross it within steps)
    scale = max(max(before.values(), default=1.0), 1.0)
    ceiling = guard_factor * cset.guard_scale ** (3 * cset.pc.i_flat)
    for key, norm in _guard_norms(advanced).items():
        old = max(before.get(key, 0.0), 1e-3 * scale)
        if norm > guard_factor * old or norm > ceiling:
            raise FlowInstabilityError(
                f"coefficient {key} norm jumped {before.get(key, 0.0):.3e} -> "
                f"{norm:.3e} in step {mu_lo:.3e} -> {mu_hi:.3e}"
            )
    return advanced, r_mid


def run_flow(xi_kappa: Field, family, pc, counterterms, *,
             scale_hook=None, step_hook=None, keep_trajectory: bool = False,
             guard_factor: float = GUARD_FACTOR, order_cap: int | None = None):
    """Integrate the flow from scale zero to 1/2 on the family's grid.

    scale_hook(cset) fires at every reached grid scale (including zero);
    step_hook(mu_lo, mu_hi, rhs_mid) fires per step with the midpoint
    right-hand side, which is exactly what the step integrates.
    Returns the final set, or the list of per-scale sets if keep_trajectory.
    """
    cset = init_coeffs(xi_kappa, counterterms, pc)
    traj = [cset.copy()] if keep_trajectory else None
    if scale_hook is not None:
        scale_hook(cset)
    for mu_lo, _mid, mu_hi in family.scale_grid.flow_intervals():
        cset, r_mid = flow_advance(cset, family, mu_hi, guard_factor, order_cap)
        if step_hook is not None:
            step_hook(mu_lo, mu_hi, r_mid)
        if scale_hook is not None:
            scale_hook(cset)
        if keep_trajectory:
            traj.append(cset.copy())
    return traj if keep_trajectory else cset


def coeff_mass(terms_or_rep, grid: TorusGrid) -> float:
    """Anchor-averaged total mass: mean_x integral over legs of the kernel."""
    terms = terms_or_rep.terms if isinstance(terms_or_rep, CoeffRep) else terms_or_rep
    hd = grid.h ** grid.d
    total = 0.0
    for t in terms:
        if t.vertices == 1:
            total += float(t.core.mean())
        else:
            total += float(t.core.sum(axis=1).mean() * hd)
    return total


# ---------------------------------------------------------------------------
# force functionals


def contract_force(cset: CoeffSet, lam: float, phi: Field, *, dressed: bool = False,
                   family=None, eval_mu: float | None = None, deriv=None) -> Field:
    """Evaluate the effective force (or a directional derivative) at phi.

    Returns sum_i lam^i sum_m <F^{i,m}, phi x ... x phi>.  With deriv=(k, psi)
    the k-th directional derivative along psi is returned instead.  The
    dressed variant smooths arguments and output with the regularizing kernel
    at eval_mu (defaulting to the set's scale); coefficient sets frozen at
    the stop scale may be evaluated at larger eval_mu.
    """
    grid = cset.grid
    if dressed and family is None:
        raise ValueError("dressed evaluation needs a kernel family")
    mu = cset.mu if eval_mu is None else eval_mu
    kmult = family.k_mult(mu) if dressed else None
    phi_in = _smooth_flat(grid, _flat(phi), kmult) if dressed else _flat(phi)
    k_deriv = 0
    psi_in = None
    if deriv is not None:
        k_deriv, psi = deriv
        psi_in = _smooth_flat(grid, _flat(psi), kmult) if dressed else _flat(psi)
    out = np.zeros(grid.nsites)
    for (i, m), rep in cset.coeffs.items():
        if m < k_deriv:
            continue
        weight = lam ** i * math.perm(m, k_deriv)
        if weight == 0.0:
            continue
        args = [psi_in] * k_deriv + [phi_in] * (m - k_deriv)
        out += weight * rep.contract(args)
    if dressed:
        out = _smooth_flat(grid, out, kmult)
    return Field(grid, out.reshape(grid.shape))


def h_functional(cset: CoeffSet, lam: float, phi: Field, family,
                 eval_mu: float | None = None, dressed: bool = True) -> Field:
    """Flow defect functional evaluated at phi, never materialized as kernels.

    Below the stop scale the flow cancels every order up to the truncation,
    so only orders i_flat+1 .. 2*i_flat contribute, each a sum of grafts of
    stored coefficients contracted against phi.  Above the stop scale the
    set is frozen, the scale derivative drops out, and all orders of the
    graft sum contribute.
    """
    grid = cset.grid
    mu = cset.mu if eval_mu is None else eval_mu
    stopped = mu > cset.mu + 1e-12
    i_flat = cset.pc.i_flat
    i_lo = 0 if stopped else i_flat + 1
    kmult = family.k_mult(mu) if dressed else None
    gdot_mult = family.gdot_kernel(mu).multiplier
    phi_in = _smooth_flat(grid, _flat(phi), kmult) if dressed else _flat(phi)
    out = np.zeros(grid.nsites)
    for i in range(i_lo, 2 * i_flat + 1):
        li = lam ** i
        if li == 0.0:
            continue
        for m in range(0, 2 * max_legs(i_flat)):
            for j in range(max(1, i - i_flat), min(i_flat, i) + 1):
                for k in range(0, m + 1):
                    w = cset.get(j, 1 + k)
                    u = cset.get(i - j, m - k)
                    if w is None or u is None:
                        continue
                    inner = u.contract([phi_in] * (m - k))
                    slot = apply_multiplier(inner.reshape(grid.shape),
                                            gdot_mult).reshape(-1)
                    out += li * (1.0 + k) * w.contract([slot] + [phi_in] * k)
    if dressed:
        out = _smooth_flat(grid, out, kmult)
    return Field(grid, out.reshape(grid.shape))
