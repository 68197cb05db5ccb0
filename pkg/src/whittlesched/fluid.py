"""Deterministic population dynamics of the priority scheduler.

The empirical distribution of users over (class, belief state) evolves, in the
large-population limit, by a piecewise-affine map: each slot the budget alpha
is poured down the index ladder (full rungs first, a clamped fraction on the
marginal rung), scheduled mass splits by belief into fresh ON/OFF
observations, and idle mass ages deterministically.  This module implements
that map, its exact linearization on the region where the marginal rung is
pinned, the closed-form linearization blocks for the canonical two-class
configuration, and a spectral-radius certificate for local stability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .belief import (
    ClassMix,
    belief_value,
    belief_vector,
    lattice_position,
    lattice_states,
    off_age,
)
from .whittle import IndexTable, build_index_table
from .relaxed import RelaxedSolution

FD_STEP = 1e-6  # forward-difference step for the numerical linearization
MASS_TOL = 1e-9  # state-vector validation slack


class FluidModel:
    """Precomputed layout, ladder and belief arrays for one mix, with the
    fluid map and its pieces as methods.  Module-level functions below wrap
    this for one-shot use."""

    def __init__(self, mix: ClassMix, table: IndexTable | None = None):
        if table is None:
            table = build_index_table(mix)
        self.mix = mix
        self.table = table
        self.tau = mix.tau
        self.block = 2 * self.tau + 1
        self.dim = mix.n_classes * self.block
        self.alpha = mix.alpha
        self.gamma = np.array(mix.gamma)
        self.beliefs = np.concatenate([belief_vector(c) for c in mix.classes])
        self.p = np.array([c.p for c in mix.classes])
        self.r = np.array([c.r for c in mix.classes])
        # rungs as (value, positions) with positions ascending for determinism
        self.rungs = [
            (rung.value, np.array(sorted(rung.positions), dtype=np.intp))
            for rung in table.ladder
        ]
        # idle successor position for every state
        self.age_to = np.empty(self.dim, dtype=np.intp)
        tau = self.tau
        for k in range(mix.n_classes):
            base = k * self.block
            for i in range(self.block):
                if i < tau - 1:          # OffAge(l) -> OffAge(l+1)
                    self.age_to[base + i] = base + i + 1
                elif i in (tau - 1, tau, tau + 1):  # OffAge(tau), stationary, OnAge(tau)
                    self.age_to[base + i] = base + tau
                else:                    # OnAge(l) -> OnAge(l+1): one slot left
                    self.age_to[base + i] = base + i - 1
        self.on1 = np.array([k * self.block + 2 * tau for k in range(mix.n_classes)])
        self.off1 = np.array([k * self.block for k in range(mix.n_classes)])
        # flattened ladder layout so the profile and the step stay in numpy
        self._rung_order = np.concatenate([pos for _, pos in self.rungs])
        sizes = np.array([len(pos) for _, pos in self.rungs], dtype=np.intp)
        self._rung_sizes = sizes
        self._rung_starts = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.intp)
        self._class_starts = (np.arange(mix.n_classes) * self.block).astype(np.intp)

    # -- basic state-vector helpers ------------------------------------

    def validate(self, z: np.ndarray) -> None:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise ValueError(f"state vector must have shape ({self.dim},)")
        if z.min() < -MASS_TOL:
            raise ValueError("state vector has negative mass")
        for k in range(self.mix.n_classes):
            s = z[self.class_slice(k)].sum()
            if abs(s - self.mix.gamma[k]) > MASS_TOL:
                raise ValueError(
                    f"class {k} mass {s} != gamma_{k} = {self.mix.gamma[k]}")

    def class_slice(self, k: int) -> slice:
        return slice(k * self.block, (k + 1) * self.block)

    def position(self, class_idx: int, state) -> int:
        return class_idx * self.block + lattice_position(state, self.tau)

    # -- the fluid map ---------------------------------------------------

    def activation_profile(self, z: np.ndarray) -> np.ndarray:
        """Scheduled fraction g_i of each state's mass: pour alpha down the
        ladder; rungs with no mass soak up nothing but still read g = 1 while
        budget remains (so g is ladder-monotone)."""
        z = np.asarray(z, dtype=float)
        zr = np.add.reduceat(z[self._rung_order], self._rung_starts)
        above = np.concatenate(([0.0], np.cumsum(zr)[:-1]))
        remaining = self.alpha - above
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.clip(remaining / zr, 0.0, 1.0)
        empty = zr == 0.0
        frac[empty] = (remaining[empty] > 0.0).astype(float)
        g = np.empty(self.dim)
        g[self._rung_order] = np.repeat(frac, self._rung_sizes)
        return g

    def step(self, z: np.ndarray) -> np.ndarray:
        """One slot of the fluid map (O(dim), no matrix assembly)."""
        z = np.asarray(z, dtype=float)
        g = self.activation_profile(z)
        served = g * z
        idle = z - served
        out = np.bincount(self.age_to, weights=idle, minlength=self.dim)
        on_mass = np.add.reduceat(served * self.beliefs, self._class_starts)
        total = np.add.reduceat(served, self._class_starts)
        out[self.on1] += on_mass
        out[self.off1] += total - on_mass
        return out

    def transition_matrix(self, z: np.ndarray) -> np.ndarray:
        """Generator-style matrix Q(z) with columns summing to zero such that
        the slot update is z' = z + Q(z) z."""
        g = self.activation_profile(z)
        d = self.dim
        T = np.zeros((d, d))  # row-stochastic per-user kernel
        rows = np.arange(d)
        # idle share ages deterministically
        T[rows, self.age_to] += 1.0 - g
        # served share resets by observation
        for k in range(self.mix.n_classes):
            b = self.class_slice(k)
            idx = rows[b]
            T[idx, self.on1[k]] += g[b] * self.beliefs[b]
            T[idx, self.off1[k]] += g[b] * (1.0 - self.beliefs[b])
        return T.T - np.eye(d)

    # -- marginal-rung region ------------------------------------------

    def crossing_rung(self, solution: RelaxedSolution) -> int:
        """Ladder position of the rung valued omega_star (exact match)."""
        for j, (v, _) in enumerate(self.rungs):
            if v == solution.omega_star:
                return j
        raise ValueError("solution's omega_star is not a rung of this table")

    def in_linear_region(self, z: np.ndarray, rung_idx: int) -> bool:
        """True when the budget pins this rung as the marginal one: everything
        strictly above is fully served, the rung itself only partially."""
        above = 0.0
        for j in range(rung_idx):
            above += z[self.rungs[j][1]].sum()
        rung_mass = z[self.rungs[rung_idx][1]].sum()
        return above < self.alpha <= above + rung_mass


def activation_profile(z, table: IndexTable, alpha: float | None = None) -> np.ndarray:
    model = FluidModel(table.mix, table)
    if alpha is not None and alpha != model.alpha:
        model.alpha = alpha
    return model.activation_profile(z)


def transition_matrix(z, table: IndexTable) -> np.ndarray:
    return FluidModel(table.mix, table).transition_matrix(z)


def fluid_step(z, table: IndexTable) -> np.ndarray:
    return FluidModel(table.mix, table).step(z)


# ---------------------------------------------------------------------------
# linearization on the marginal-rung region


@dataclass(frozen=True)
class RegionSpec:
    """Description of the state-space region on which the linearization is
    exact: the rung valued omega_star is marginal, i.e. the mass strictly
    above it is below alpha and the rung tops the budget up."""

    omega_star: float
    rung_positions: tuple[int, ...]
    above_positions: tuple[int, ...]
    text: str


@dataclass(frozen=True)
class LinearizedSystem:
    """Exact affine form of the fluid map around the fixed point.

    Full coordinates: z' = z + q_star z + a_star on the marginal-rung region.
    Reduced coordinates (one coordinate per class eliminated through the mass
    identities): y' = y + u_star y + b_star.
    """

    q_star: np.ndarray = field(repr=False)
    a_star: np.ndarray = field(repr=False)
    u_star: np.ndarray = field(repr=False)
    b_star: np.ndarray = field(repr=False)
    eliminated: tuple[int, ...]
    region: RegionSpec
    zeta: np.ndarray = field(repr=False)
    zeta_reduced: np.ndarray = field(repr=False)

    def reduce(self, z: np.ndarray) -> np.ndarray:
        return np.delete(z, list(self.eliminated))

    def affine_step(self, z: np.ndarray) -> np.ndarray:
        return z + self.q_star @ z + self.a_star


def _eliminated_coordinates(model: FluidModel, solution: RelaxedSolution) -> list[int]:
    """One coordinate per class: the randomized class drops its rung
    coordinate, a deterministic-threshold class drops its deepest idle OFF
    state (or the stationary state when its threshold is age 1)."""
    out = []
    for k, pol in enumerate(solution.policies):
        if pol.randomized:
            out.append(model.position(k, off_age(pol.threshold_age)))
        elif pol.threshold_age is not None and pol.threshold_age >= 2:
            out.append(model.position(k, off_age(pol.threshold_age - 1)))
        else:
            out.append(k * model.block + model.tau)  # stationary coordinate
    return out


def linearize(solution: RelaxedSolution, table: IndexTable | None = None,
              fd_step: float | None = None) -> LinearizedSystem:
    """Extract the exact affine form of the fluid map on the marginal-rung
    region by finite differences around the fixed point.

    Differencing runs along simplex-tangent directions (mass moved from the
    class's eliminated coordinate to coordinate i), so every probe stays a
    valid state inside the region.  The map is affine there, so the step size
    is mathematically uncritical; numerically, larger steps divide the
    rounding noise of the two map evaluations by a larger number, so by
    default each direction uses the largest step the region admits (about
    1e-2 here) rather than a fixed small increment, keeping the extracted
    entries accurate to ~1e-14.
    """
    if solution.degenerate:
        raise ValueError("cannot linearize a degenerate solution")
    if solution.rho_star in (0.0, 1.0):
        raise ValueError("non-generic alpha: the fixed point sits on the "
                         "boundary of the marginal-rung region")
    model = FluidModel(solution.mix, table if table is not None else solution.table)
    rung_idx = model.crossing_rung(solution)
    if len(model.rungs[rung_idx][1]) > 1:
        raise ValueError("crossing rung is tied across classes; the fluid map "
                         "is not affine on the region")
    zeta = solution.zeta
    d = model.dim
    class_of = np.repeat(np.arange(model.mix.n_classes), model.block)
    elim = _eliminated_coordinates(model, solution)
    f0 = model.step(zeta)
    # tangent derivative D[:, i] = dF/dz_i - dF/dz_elim(class of i); columns of
    # eliminated coordinates stay zero.
    D = np.zeros((d, d))
    for i in range(d):
        if i in elim:
            continue
        e = elim[class_of[i]]
        if fd_step is not None:
            h = fd_step
        else:
            h = 0.9 * zeta[e]
            while h > 1e-9:
                zp = zeta.copy()
                zp[i] += h
                zp[e] -= h
                if zp.min() >= 0.0 and model.in_linear_region(zp, rung_idx):
                    break
                h *= 0.5
        zp = zeta.copy()
        zp[i] += h
        zp[e] -= h
        D[:, i] = (model.step(zp) - f0) / h
    q_star = D - np.eye(d)
    a_star = f0 - zeta - q_star @ zeta

    rung_pos = tuple(int(i) for i in model.rungs[rung_idx][1])
    above_pos = tuple(
        int(i) for j in range(rung_idx) for i in model.rungs[j][1])
    region = RegionSpec(
        omega_star=solution.omega_star,
        rung_positions=rung_pos,
        above_positions=above_pos,
        text=(f"sum(z[above]) < alpha <= sum(z[above]) + sum(z[rung]) with "
              f"rung value {solution.omega_star!r}"),
    )

    keep = [i for i in range(d) if i not in elim]
    u_star = D[np.ix_(keep, keep)] - np.eye(len(keep))
    zeta_reduced = zeta[keep]
    b_star = -(u_star @ zeta_reduced)
    return LinearizedSystem(
        q_star=q_star,
        a_star=a_star,
        u_star=u_star,
        b_star=b_star,
        eliminated=tuple(elim),
        region=region,
        zeta=zeta,
        zeta_reduced=zeta_reduced,
    )


# ---------------------------------------------------------------------------
# closed-form blocks for the canonical two-class configuration


@dataclass(frozen=True)
class AnalyticBlocks:
    """Reduced linearization assembled from closed forms: one block for the
    randomized class, one for the deterministic-threshold class, and the
    coupling block sitting on the randomized class's rows."""

    q_randomized: np.ndarray = field(repr=False)
    q_deterministic: np.ndarray = field(repr=False)
    coupling: np.ndarray = field(repr=False)
    u_star: np.ndarray = field(repr=False)
    b_star: np.ndarray = field(repr=False)
    randomized_class: int
    deterministic_class: int


def analytic_blocks(solution: RelaxedSolution) -> AnalyticBlocks:
    """Closed-form reduced linearization for the canonical case: two classes,
    exactly one randomized at the crossing rung, the other holding a strict
    deterministic threshold at age >= 2.  Matches ``linearize`` entrywise."""
    if solution.degenerate:
        raise ValueError("analytic blocks undefined for a degenerate solution")
    mix = solution.mix
    if mix.n_classes != 2:
        raise ValueError("analytic blocks require a two-class mix")
    rand = [k for k, pol in enumerate(solution.policies) if pol.randomized]
    if len(rand) != 1:
        raise ValueError("analytic blocks require exactly one randomized class")
    kr = rand[0]
    kd = 1 - kr
    m = solution.policies[kr].threshold_age
    n = solution.policies[kd].threshold_age
    tau = mix.tau
    if m is None or n is None:
        raise ValueError("both classes must activate in the canonical case")
    if not m + 1 <= tau:
        raise ValueError("randomized threshold must sit strictly inside the lattice")
    if n < 2:
        raise ValueError("canonical case needs a deterministic threshold age >= 2")

    size = 2 * tau
    cls_r, cls_d = mix.classes[kr], mix.classes[kd]
    g_r, g_d = mix.gamma[kr], mix.gamma[kd]
    alpha = mix.alpha

    # reduced per-class belief layouts: the randomized class drops its rung
    # coordinate OffAge(m), the deterministic class drops OffAge(n-1); the
    # remaining states keep the canonical order (OFF ascending, stationary,
    # ON descending), so position j >= active_start carries the active states.
    def reduced_beliefs(cls, dropped_age):
        vals = []
        for s in lattice_states(tau):
            if s.kind == "off" and s.age == dropped_age:
                continue
            vals.append(belief_value(cls, s))
        return np.array(vals)

    cb_r = reduced_beliefs(cls_r, m)     # length 2*tau
    cb_d = reduced_beliefs(cls_d, n - 1)
    b_m = float(belief_vector(cls_r)[m - 1])  # belief at the rung

    QR = np.zeros((size, size))
    # rows are 0-based positions in the reduced randomized block
    act_r = slice(m - 1, size)  # active states: OffAge(m+1).. up to OnAge(1)
    if m >= 2:
        QR[0, 0] = -1.0
        QR[0, act_r] += b_m - cb_r[act_r]
    for l in range(2, m):  # OffAge(l) inherits OffAge(l-1)
        QR[l - 1, l - 2] += 1.0
        QR[l - 1, l - 1] += -1.0
    QR[m - 1, :m] += -1.0  # OffAge(m+1) absorbs the unserved rung mass
    for pos in range(m, size - 1):
        QR[pos, pos] = -1.0
    # ON-feedback row: beliefs of the active states, shifted by the rung
    # belief because serving one more active user displaces rung service
    QR[size - 1, act_r] += cb_r[act_r] - b_m
    QR[size - 1, size - 1] += -1.0

    QD = np.zeros((size, size))
    act_d = slice(n - 2, size)
    if n >= 3:
        QD[0, 0] = -1.0
        QD[0, act_d] += 1.0 - cb_d[act_d]
    for l in range(2, n - 1):
        QD[l - 1, l - 2] += 1.0
        QD[l - 1, l - 1] += -1.0
    QD[n - 2, :] += -1.0  # OffAge(n) row: class mass minus everything else
    QD[n - 2, n - 2] += -1.0
    for pos in range(n - 1, size - 1):
        QD[pos, pos] = -1.0
    QD[size - 1, act_d] += cb_d[act_d]
    QD[size - 1, size - 1] += -1.0

    B = np.zeros((size, size))  # randomized-class rows, deterministic-class columns
    if m >= 2:
        B[0, act_d] = b_m - 1.0
    B[m - 1, act_d] += 1.0
    B[size - 1, act_d] += -b_m

    b_star_r = np.zeros(size)
    if m >= 2:
        b_star_r[0] = (1.0 - b_m) * alpha
    b_star_r[m - 1] += g_r - alpha
    b_star_r[size - 1] += b_m * alpha
    b_star_d = np.zeros(size)
    b_star_d[n - 2] = g_d

    u_star = np.zeros((2 * size, 2 * size))
    b_star = np.zeros(2 * size)
    sl = [slice(0, size), slice(size, 2 * size)]
    u_star[sl[kr], sl[kr]] = QR
    u_star[sl[kd], sl[kd]] = QD
    u_star[sl[kr], sl[kd]] = B
    b_star[sl[kr]] = b_star_r
    b_star[sl[kd]] = b_star_d
    return AnalyticBlocks(
        q_randomized=QR,
        q_deterministic=QD,
        coupling=B,
        u_star=u_star,
        b_star=b_star,
        randomized_class=kr,
        deterministic_class=kd,
    )


# ---------------------------------------------------------------------------
# stability certificate and trajectories


@dataclass(frozen=True)
class StabilityCertificate:
    """Gelfand-style spectral radius estimates rho_K = ||(U*+I)^K||_F^(1/K).
    Certified means every estimate is below one and none increases in K, so
    the true spectral radius (their infimum) is below one as well."""

    estimates: tuple[tuple[int, float], ...]
    certified: bool
    note: str


def stability_certificate(u_star: np.ndarray,
                          powers: tuple[int, ...] = (64, 128, 256)) -> StabilityCertificate:
    A = u_star + np.eye(u_star.shape[0])
    # repeated squaring; powers must be increasing powers of two times the first
    ests = []
    P = A.copy()
    k = 1
    for K in powers:
        while k < K:
            P = P @ P
            k *= 2
        if k != K:
            raise ValueError("powers must be reachable by repeated squaring")
        ests.append((K, float(np.linalg.norm(P, "fro") ** (1.0 / K))))
    below = all(e < 1.0 for _, e in ests)
    # non-strict: nilpotent-style cases sit at an exact constant (e.g. all
    # zero for U* = -I), which still certifies since every Gelfand estimate
    # upper-bounds the spectral radius
    monotone = all(ests[i + 1][1] <= ests[i][1] for i in range(len(ests) - 1))
    if below and monotone:
        note = "spectral radius provably below one on the sampled powers"
    elif not below:
        note = "norm estimate at or above one: not certified (inconclusive or unstable)"
    else:
        note = "estimates below one but not settling: inconclusive"
    return StabilityCertificate(estimates=tuple(ests), certified=below and monotone, note=note)


@dataclass(frozen=True)
class FluidTrajectory:
    distances: np.ndarray = field(repr=False)  # ||z_t - zeta||_2, length T+1 (empty if no zeta)
    final: np.ndarray = field(repr=False)
    in_region: np.ndarray = field(repr=False)  # bool per step, if a region was given
    path: np.ndarray | None = field(default=None, repr=False)


def fluid_trajectory(z0: np.ndarray, steps: int, table: IndexTable,
                     zeta: np.ndarray | None = None,
                     region: tuple[FluidModel, int] | None = None,
                     store_path: bool = False) -> FluidTrajectory:
    """Iterate the fluid map for the given number of slots."""
    model = FluidModel(table.mix, table)
    model.validate(z0)
    z = np.array(z0, dtype=float)
    dists = np.empty(steps + 1) if zeta is not None else np.empty(0)
    inreg = np.empty(steps + 1, dtype=bool) if region is not None else np.empty(0, dtype=bool)
    path = np.empty((steps + 1, model.dim)) if store_path else None
    for t in range(steps + 1):
        if zeta is not None:
            dists[t] = np.linalg.norm(z - zeta)
        if region is not None:
            inreg[t] = region[0].in_linear_region(z, region[1])
        if store_path:
            path[t] = z
        if t < steps:
            z = model.step(z)
    return FluidTrajectory(distances=dists, final=z, in_region=inreg, path=path)
