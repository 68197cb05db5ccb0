"""Finite-N Monte Carlo simulation of the index scheduler.

Two engines compute the same process:

* ``users``: one record per user (class, true channel bit, belief state).
  This is the reference implementation; scheduling picks the ``floor(alpha*N)``
  highest-index users with a seeded uniform tie-break on the boundary rung.
* ``pooled``: per-(class, belief-state) counts of users split by true channel
  bit.  Users sharing a belief state are exchangeable and their bits are iid
  Bernoulli(belief), so the tie-break becomes a hypergeometric split across
  the boundary rung and channel transitions become binomial draws.  The law of
  the counts is identical to the per-user engine, but a slot costs O(states)
  instead of O(N), which is what makes population sizes of 1e5 over 1e5 slots
  tractable.

Per slot, both engines draw randomness in a fixed documented order (channel
transitions first, then scheduling tie-breaks), so runs are reproducible
bit-for-bit given (config, seed).
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .belief import ClassMix
from .fluid import FluidModel, fluid_trajectory
from .relaxed import RelaxedSolution, solve_relaxed
from .whittle import IndexTable, build_index_table

WORKERS_ENV = "WHITTLESCHED_WORKERS"

INITIAL_STATES = ("all_off_observed", "all_stationary")


@dataclass(frozen=True)
class SimConfig:
    mix: ClassMix
    n_users: int
    horizon: int
    seed: int
    policy: str = "whittle"  # or "relaxed"
    initial_state: str | tuple = "all_off_observed"  # or explicit state vector
    engine: str = "pooled"  # or "users"
    burn_in: int | None = None  # slots dropped from the averages; default horizon // 10

    def __post_init__(self):
        if self.policy not in ("whittle", "relaxed"):
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.engine not in ("pooled", "users"):
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.n_users < 1 or self.horizon < 1:
            raise ValueError("n_users and horizon must be positive")
        if isinstance(self.initial_state, str):
            if self.initial_state not in INITIAL_STATES:
                raise ValueError(f"unknown initial state {self.initial_state!r}")
        else:
            z = np.asarray(self.initial_state, dtype=float)
            counts = z * self.n_users
            if np.abs(counts - np.round(counts)).max() > 1e-6:
                raise ValueError("explicit initial state must sit on the 1/N lattice")
        for g in self.mix.gamma:
            gn = g * self.n_users
            if abs(gn - round(gn)) > 1e-9:
                raise ValueError(f"class fraction {g} times N={self.n_users} is not integral")
        an = self.mix.alpha * self.n_users
        if abs(an - round(an)) > 1e-9:
            raise ValueError(f"alpha*N = {an} is not integral")

    @property
    def k_slots(self) -> int:
        return round(self.mix.alpha * self.n_users)

    @property
    def effective_burn_in(self) -> int:
        return self.horizon // 10 if self.burn_in is None else self.burn_in


def lattice_round(z: np.ndarray, mix: ClassMix, n_users: int) -> np.ndarray:
    """Nearest state vector on the 1/N mesh with exact per-class counts
    (largest-remainder rounding within each class block)."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    block = 2 * mix.tau + 1
    for k, g in enumerate(mix.gamma):
        sl = slice(k * block, (k + 1) * block)
        target = round(g * n_users)
        raw = z[sl] * n_users
        base = np.floor(raw).astype(int)
        short = target - base.sum()
        if short < 0:
            raise ValueError("class mass exceeds gamma_k")
        rema = raw - base
        order = np.argsort(-rema, kind="stable")
        base[order[:short]] += 1
        out[sl] = base / n_users
    return out


def _scheduling_order(model: FluidModel):
    """Rung-major, layout-minor ordering of all states, plus the start offset
    of each rung within that ordering (with an end sentinel)."""
    order = []
    starts = []
    for _, pos in model.rungs:
        starts.append(len(order))
        order.extend(int(i) for i in pos)
    starts.append(len(order))
    return np.array(order, dtype=np.intp), np.array(starts, dtype=np.intp)


class _EngineBase:
    def __init__(self, config: SimConfig, table: IndexTable | None = None,
                 solution: RelaxedSolution | None = None):
        self.config = config
        self.mix = config.mix
        if table is None:
            table = build_index_table(self.mix)
        self.table = table
        self.model = FluidModel(self.mix, table)
        self.rng = np.random.default_rng(config.seed)
        self.n = config.n_users
        self.k_slots = config.k_slots
        self.p_arr = np.repeat(self.model.p, self.model.block)
        self.r_arr = np.repeat(self.model.r, self.model.block)
        if config.policy == "relaxed":
            if solution is None:
                solution = solve_relaxed(self.mix, table)
            if solution.degenerate:
                raise ValueError("relaxed policy unavailable: " +
                                 (solution.degenerate_reason or "degenerate solution"))
            self.solution = solution
            d = self.model.dim
            self.act_prob = np.zeros(d)
            for k, pol in enumerate(solution.policies):
                block = self.model.class_slice(k)
                vals = table.values[block]
                self.act_prob[block] = np.where(vals > solution.omega_star, 1.0, 0.0)
                if pol.randomized:
                    rung_pos = self.model.position(k, pol.threshold_state)
                    self.act_prob[rung_pos] = solution.rho_star
        else:
            self.solution = solution
        self.order, self.rung_starts = _scheduling_order(self.model)
        # accumulators past burn-in
        self.t = 0
        self.belief_reward = 0.0
        self.realized_reward = 0.0
        self.activation = 0
        self.tallied_slots = 0

    def _initial_counts(self) -> np.ndarray:
        cfg = self.config
        counts = np.zeros(self.model.dim, dtype=np.int64)
        block = self.model.block
        if isinstance(cfg.initial_state, str):
            for k, g in enumerate(self.mix.gamma):
                nk = round(g * self.n)
                if cfg.initial_state == "all_off_observed":
                    counts[k * block] = nk  # OffAge(1)
                else:
                    counts[k * block + self.mix.tau] = nk  # stationary
        else:
            z = lattice_round(np.asarray(cfg.initial_state, dtype=float), self.mix, self.n)
            counts = np.round(z * self.n).astype(np.int64)
        return counts

    def _tally(self, scheduled_belief_mass: float, realized: int, m_total: int):
        if self.t >= self.config.effective_burn_in:
            self.belief_reward += scheduled_belief_mass
            self.realized_reward += realized
            self.activation += m_total
            self.tallied_slots += 1
        self.t += 1

    def rates(self) -> dict:
        """Per-user per-slot averages past burn-in."""
        denom = max(self.tallied_slots, 1) * self.n
        return {
            "belief_throughput": self.belief_reward / denom,
            "realized_throughput": self.realized_reward / denom,
            "activation": self.activation / denom,
            "slots": self.tallied_slots,
        }

    def _whittle_cut(self, counts: np.ndarray):
        """Split the budget over the ladder: returns (fully scheduled states,
        boundary-rung states, number still needed from the boundary rung).
        The boundary rung is the first whose cumulative population reaches the
        budget; a rung that fits exactly is folded into the full set."""
        c_ord = counts[self.order]
        starts = self.rung_starts
        rung_tot = np.add.reduceat(c_ord, starts[:-1])
        rcum = np.cumsum(rung_tot)
        k = self.k_slots
        j = int(np.searchsorted(rcum, k))
        if j >= rung_tot.size:  # budget >= population: everyone scheduled
            return self.order, self.order[:0], 0
        prev = int(rcum[j - 1]) if j > 0 else 0
        need = k - prev
        if need == int(rung_tot[j]):
            return self.order[: starts[j + 1]], self.order[:0], 0
        return self.order[: starts[j]], self.order[starts[j]: starts[j + 1]], need


class PooledEngine(_EngineBase):
    """Counts per (class, belief state), split by true channel bit."""

    def __init__(self, config, table=None, solution=None):
        super().__init__(config, table, solution)
        counts = self._initial_counts()
        beliefs = self.model.beliefs
        self.n_on = self.rng.binomial(counts, beliefs)
        self.n_off = counts - self.n_on

    def empirical_state(self) -> np.ndarray:
        return (self.n_on + self.n_off) / self.n

    def _schedule_whittle(self, counts: np.ndarray) -> np.ndarray:
        m = np.zeros(self.model.dim, dtype=np.int64)
        full, boundary, need = self._whittle_cut(counts)
        m[full] = counts[full]
        if need > 0:
            # uniform random subset of the boundary rung's users: sequential
            # multivariate hypergeometric over its states in layout order
            left = need
            rest = int(counts[boundary].sum())
            for s in boundary:
                c = int(counts[s])
                rest -= c
                if left == 0:
                    break
                take = left if rest == 0 else int(self.rng.hypergeometric(c, rest, left))
                m[s] = take
                left -= take
        return m

    def _schedule_relaxed(self, counts: np.ndarray):
        # independent Bernoulli(act_prob) per user; by bit so the on/off split
        # of the scheduled set is drawn consistently
        sched_on = self.rng.binomial(self.n_on, self.act_prob)
        sched_off = self.rng.binomial(self.n_off, self.act_prob)
        return sched_on, sched_off

    def step(self):
        counts = self.n_on + self.n_off
        if self.config.policy == "whittle":
            m = self._schedule_whittle(counts)
            # scheduled users are a uniform subset within each state, so their
            # ON share is hypergeometric
            sched_on = np.zeros_like(m)
            mask = m > 0
            if mask.any():
                sched_on[mask] = self.rng.hypergeometric(
                    self.n_on[mask], self.n_off[mask], m[mask])
            sched_off = m - sched_on
        else:
            sched_on, sched_off = self._schedule_relaxed(counts)
            m = sched_on + sched_off
        belief_mass = float(m @ self.model.beliefs)
        realized = int(sched_on.sum())

        u_on = self.n_on - sched_on
        u_off = self.n_off - sched_off
        p_arr, r_arr = self.p_arr, self.r_arr
        # channel transitions: every user keeps/gains the ON bit independently
        stay_on = self.rng.binomial(u_on, p_arr)
        gain_on = self.rng.binomial(u_off, r_arr)
        new_on = np.zeros_like(self.n_on)
        new_off = np.zeros_like(self.n_off)
        np.add.at(new_on, self.model.age_to, stay_on + gain_on)
        np.add.at(new_off, self.model.age_to, (u_on - stay_on) + (u_off - gain_on))
        # scheduled users reset by observation, then transition
        obs_on_next = self.rng.binomial(sched_on, p_arr)
        obs_off_next = self.rng.binomial(sched_off, r_arr)
        for k in range(self.mix.n_classes):
            sl = self.model.class_slice(k)
            on1, off1 = self.model.on1[k], self.model.off1[k]
            so = int(sched_on[sl].sum())
            sf = int(sched_off[sl].sum())
            son = int(obs_on_next[sl].sum())
            sfn = int(obs_off_next[sl].sum())
            new_on[on1] += son
            new_off[on1] += so - son
            new_on[off1] += sfn
            new_off[off1] += sf - sfn
        self.n_on, self.n_off = new_on, new_off
        self._tally(belief_mass, realized, int(m.sum()))


class UserEngine(_EngineBase):
    """Reference per-user engine: arrays indexed by user id."""

    def __init__(self, config, table=None, solution=None):
        super().__init__(config, table, solution)
        counts = self._initial_counts()
        self.state = np.repeat(np.arange(self.model.dim, dtype=np.intp), counts)
        self.cls = np.repeat(np.arange(self.mix.n_classes, dtype=np.intp),
                             [round(g * self.n) for g in self.mix.gamma])
        assert self.state.shape == (self.n,)
        self.bits = self.rng.random(self.n) < self.model.beliefs[self.state]
        self.p_user = np.array(self.model.p)[self.cls]
        self.r_user = np.array(self.model.r)[self.cls]
        self.on1_user = np.array(self.model.on1)[self.cls]
        self.off1_user = np.array(self.model.off1)[self.cls]

    def empirical_state(self) -> np.ndarray:
        return np.bincount(self.state, minlength=self.model.dim) / self.n

    def _schedule_whittle(self) -> np.ndarray:
        counts = np.bincount(self.state, minlength=self.model.dim)
        full_states, boundary_states, need = self._whittle_cut(counts)
        full = np.zeros(self.model.dim, dtype=bool)
        full[full_states] = True
        sel = full[self.state]
        if need > 0:
            boundary = np.zeros(self.model.dim, dtype=bool)
            boundary[boundary_states] = True
            cand = np.flatnonzero(boundary[self.state])
            pick = self.rng.choice(cand, size=need, replace=False)
            sel[pick] = True
        return sel

    def _schedule_relaxed(self) -> np.ndarray:
        u = self.rng.random(self.n)
        return u < self.act_prob[self.state]

    def step(self):
        u = self.rng.random(self.n)  # channel transition draws, by user id
        if self.config.policy == "whittle":
            sel = self._schedule_whittle()
        else:
            sel = self._schedule_relaxed()
        belief_mass = float(self.model.beliefs[self.state[sel]].sum())
        realized = int(self.bits[sel].sum())
        m_total = int(sel.sum())
        # observation resets scheduled users; everyone else ages
        new_state = self.model.age_to[self.state]
        new_state[sel] = np.where(self.bits[sel], self.on1_user[sel], self.off1_user[sel])
        self.state = new_state
        self.bits = u < np.where(self.bits, self.p_user, self.r_user)
        self._tally(belief_mass, realized, m_total)


def make_engine(config: SimConfig, table: IndexTable | None = None,
                solution: RelaxedSolution | None = None):
    cls = PooledEngine if config.engine == "pooled" else UserEngine
    return cls(config, table, solution)


def step(run) -> None:
    """Advance a simulation run by one slot."""
    run.step()


def empirical_state(run) -> np.ndarray:
    return run.empirical_state()


# ---------------------------------------------------------------------------
# experiments


def run_throughput(config: SimConfig, table: IndexTable | None = None,
                   solution: RelaxedSolution | None = None) -> dict:
    """Run one seed to the horizon and return per-user rates past burn-in."""
    eng = make_engine(config, table, solution)
    for _ in range(config.horizon):
        eng.step()
    out = eng.rates()
    out["seed"] = config.seed
    out["n_users"] = config.n_users
    return out


def hitting_time(config: SimConfig, epsilon: float, zeta: np.ndarray,
                 max_slots: int | None = None,
                 table: IndexTable | None = None,
                 solution: RelaxedSolution | None = None) -> int | None:
    """First slot at which ||Z - zeta||_2 <= epsilon (0 when the start already
    qualifies); None if not hit within max_slots (default: the horizon)."""
    if max_slots is None:
        max_slots = config.horizon
    eng = make_engine(config, table, solution)
    for t in range(max_slots + 1):
        if np.linalg.norm(eng.empirical_state() - zeta) <= epsilon:
            return t
        if t < max_slots:
            eng.step()
    return None


def occupancy(config: SimConfig, epsilon: float, zeta: np.ndarray,
              table: IndexTable | None = None,
              solution: RelaxedSolution | None = None) -> float:
    """Fraction of post-burn-in slots spent inside the epsilon-ball."""
    eng = make_engine(config, table, solution)
    inside = 0
    total = 0
    burn = config.effective_burn_in
    for t in range(config.horizon + 1):
        if t >= burn:
            total += 1
            if np.linalg.norm(eng.empirical_state() - zeta) <= epsilon:
                inside += 1
        if t < config.horizon:
            eng.step()
    return inside / total


def trajectory_deviation(config: SimConfig, steps: int,
                         table: IndexTable | None = None,
                         solution: RelaxedSolution | None = None) -> float:
    """Sup over t <= steps of ||Z[t] - z[t]|| between one simulation run and
    the fluid trajectory launched from the simulation's exact initial state."""
    if table is None:
        table = build_index_table(config.mix)
    eng = make_engine(config, table, solution)
    z0 = eng.empirical_state()
    fl = fluid_trajectory(z0, steps, table, store_path=True)
    sup = 0.0
    for t in range(steps + 1):
        sup = max(sup, float(np.linalg.norm(eng.empirical_state() - fl.path[t])))
        if t < steps:
            eng.step()
    return sup


def _worker_count(n_tasks: int) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return max(1, min(os.cpu_count() or 1, n_tasks))


def run_many(fn, configs: list, *args, **kwargs) -> list:
    """Map fn over configs, in parallel when the worker pool allows, results
    in input order."""
    workers = _worker_count(len(configs))
    if workers == 1:
        return [fn(c, *args, **kwargs) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(fn, c, *args, **kwargs) for c in configs]
        return [f.result() for f in futs]
