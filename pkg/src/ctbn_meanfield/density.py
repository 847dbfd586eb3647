"""Factored marginal-density representation and its functionals.

Each free component carries a forward marginal curve mu and a backward
likelihood message rho on the interval; the transition density gamma is
never stored but always reconstructed from (mu, rho) and the geometrically
averaged rates, so the defining algebraic relation holds identically.
Components observed as full trajectories are represented by step functions
and are excluded from optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .model import CtbnModel, Evidence
from .ode import OdeSolution, QuadratureError, ScaledSolution, quadrature_batch

__all__ = [
    "ComponentDensity",
    "TrajectoryDensity",
    "FactoredDensitySet",
    "FreeEnergyReport",
    "DegenerateDensityError",
    "gamma_at",
    "free_energy",
    "discretized_free_energy",
    "expected_stats",
    "consistency_check",
    "density_set_to_dict",
    "density_set_from_dict",
]

# A rho entry this far below the per-time maximum counts as extinct; a mu
# above MU_FLOOR paired with an extinct rho is a genuine degeneracy.
RHO_REL_FLOOR = 1e-250
MU_FLOOR = 1e-12
MU_LOG_FLOOR = 1e-300


class DegenerateDensityError(RuntimeError):
    """The product of forward and backward curves lost all its mass."""

    def __init__(self, component: int, state: int, t: float):
        where = f"state {state}" if state >= 0 else "all states"
        super().__init__(
            f"degenerate density: component {component}, {where} carry no "
            f"posterior mass at t={t!r}"
        )
        self.component = component
        self.state = state
        self.t = t


class FixedRatesContext:
    """Rate context of a density driven by one fixed rate matrix."""

    def __init__(self, q: np.ndarray):
        q = np.asarray(q, dtype=float)
        s = q.shape[0]
        off = q.copy()
        off[np.arange(s), np.arange(s)] = 1.0
        self._ln = np.log(np.maximum(off, 1e-300))
        self._ln.flags.writeable = False

    def ln_qtilde_one(self, t: float, mu_lookup=None) -> np.ndarray:
        return self._ln

    def ln_qtilde_batch(self, ts) -> np.ndarray:
        return np.broadcast_to(self._ln, (len(ts),) + self._ln.shape)


class FrozenMarginalsContext:
    """Rate context capturing the parent marginals at build time.

    The context keeps references to the (immutable) parent densities that
    were current when the component was integrated, so the component's
    transition density stays consistent with its marginal even after the
    parents are later replaced in the set.
    """

    def __init__(self, model: CtbnModel, i: int, parent_densities):
        self._tables = model.tables(i)
        self._parents = list(parent_densities)
        self._n = self._tables.n_states

    def ln_qtilde_one(self, t: float, mu_lookup=None) -> np.ndarray:
        if mu_lookup is None:
            mu_lookup = lambda pd: pd.mu_one(t)
        if not self._parents:
            w = _SCALAR_ONE_W
        else:
            w = mu_lookup(self._parents[0])
            for pd in self._parents[1:]:
                w = np.multiply.outer(w, mu_lookup(pd)).ravel()
        return (w @ self._tables.log_flat).reshape(self._n, self._n)

    def ln_qtilde_batch(self, ts) -> np.ndarray:
        nt = len(ts)
        if not self._parents:
            w = np.ones((nt, 1))
        else:
            w = np.clip(self._parents[0].mu_batch(ts), 0.0, None)
            for pd in self._parents[1:]:
                mp = np.clip(pd.mu_batch(ts), 0.0, None)
                w = (w[:, :, None] * mp[:, None, :]).reshape(nt, -1)
        return (w @ self._tables.log_flat).reshape(nt, self._n, self._n)


_SCALAR_ONE_W = np.ones(1)


class ComponentDensity:
    """Marginal density of one free component on [0, T].

    The marginal is represented as the pointwise-normalized product of a
    forward filtered curve pi and the backward likelihood message rho,
    mu = pi * rho / sum(pi * rho), which keeps every quantity well scaled
    even when rho spans many orders of magnitude across states.  The
    per-time normalizer is conserved by the dynamics, so normalizing only
    removes integrator drift.
    """

    is_fixed = False

    def __init__(
        self,
        index: int,
        T: float,
        pi: ScaledSolution,
        rho: ScaledSolution,
        start_vector: np.ndarray,
        end_state: int | None,
        rates_context,
        endpoint_defect: float | None = None,
    ):
        self.index = index
        self.T = float(T)
        self.pi = pi if isinstance(pi, ScaledSolution) else ScaledSolution.single(pi)
        self.rho = rho if isinstance(rho, ScaledSolution) else ScaledSolution.single(rho)
        start_vector = np.asarray(start_vector, dtype=float)
        start_vector.flags.writeable = False
        self.start_vector = start_vector
        self.end_state = end_state
        # The geometric-rate context in effect when pi was integrated; the
        # transition density is reconstructed against it so the flow
        # identity keeps holding after other components move on.
        self.rates_context = rates_context
        # Deviation of the conserved product mass from 1 at the horizon;
        # measures accumulated integration error.
        self.pre_clamp_gap = endpoint_defect

    @property
    def n_states(self) -> int:
        return self.pi.dim

    def _product_parts(self, ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        pv, _ = self.pi.evaluate_scaled(ts)
        rv, _ = self.rho.evaluate_scaled(ts)
        prod = np.clip(pv, 0.0, None) * np.clip(rv, 0.0, None)
        z = prod.sum(axis=1, keepdims=True)
        if np.any(z <= 0.0):
            t_bad = float(ts[np.argmin(z[:, 0])])
            raise DegenerateDensityError(self.index, -1, t_bad)
        return ts, pv, rv, prod, z

    def mu_batch(self, ts) -> np.ndarray:
        _, _, _, prod, z = self._product_parts(ts)
        return prod / z

    def mu_one(self, t: float) -> np.ndarray:
        t = float(t)
        prod = np.maximum(self.pi.evaluate_one(t)[0], 0.0) * np.maximum(
            self.rho.evaluate_one(t)[0], 0.0
        )
        z = prod.sum()
        if z <= 0.0:
            raise DegenerateDensityError(self.index, -1, t)
        return prod / z

    def mu_derivative_batch(self, ts) -> np.ndarray:
        """Time derivative of mu via the product rule on pi and rho."""
        ts, pv, rv, prod, z = self._product_parts(ts)
        dp = _scaled_derivative(self.pi, ts)
        dr = _scaled_derivative(self.rho, ts)
        dprod = dp * np.clip(rv, 0.0, None) + np.clip(pv, 0.0, None) * dr
        dz = dprod.sum(axis=1, keepdims=True)
        return dprod / z - prod * dz / (z * z)

    def rho_pair_batch(self, ts):
        return self.rho.evaluate_scaled(np.atleast_1d(ts))

    def rho_pair_one(self, t: float):
        return self.rho.evaluate_scaled(float(t))

    def with_rho_scaled(self, log_factor: float) -> "ComponentDensity":
        """Same density with rho multiplied by exp(log_factor)."""
        return ComponentDensity(
            self.index,
            self.T,
            self.pi,
            self.rho.scaled_by(log_factor),
            self.start_vector,
            self.end_state,
            self.rates_context,
            self.pre_clamp_gap,
        )

    def knots(self) -> np.ndarray:
        return np.union1d(self.pi.knots(), self.rho.knots())


def _scaled_derivative(sol: ScaledSolution, ts) -> np.ndarray:
    """Derivative of the scaled values (scale factors excluded)."""
    ts = np.asarray(ts, dtype=float)
    out = np.empty((len(ts), sol.dim))
    if len(sol.segments) == 1:
        return np.atleast_2d(sol.segments[0].evaluate_derivative(ts))
    seg_idx = np.searchsorted(sol._starts, ts, side="right")
    for si in np.unique(seg_idx):
        mask = seg_idx == si
        out[mask] = sol.segments[si].evaluate_derivative(ts[mask])
    return out


class TrajectoryDensity:
    """Degenerate density of a fully observed component.

    mu is the indicator step function of the observed path; the smooth part
    of gamma is identically zero and the jumps are carried explicitly.
    """

    is_fixed = True

    def __init__(self, index: int, T: float, n_states: int, trajectory):
        self.index = index
        self.T = float(T)
        self._n_states = n_states
        self.trajectory = tuple((float(t), int(s)) for t, s in trajectory)
        self._break_times = np.array([t for t, _ in self.trajectory])
        self._break_states = np.array([s for _, s in self.trajectory], dtype=int)
        self.pre_clamp_gap = None

    @property
    def n_states(self) -> int:
        return self._n_states

    def state_at(self, ts) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        idx = np.clip(
            np.searchsorted(self._break_times, ts, side="right") - 1,
            0,
            len(self._break_times) - 1,
        )
        return self._break_states[idx]

    def mu_batch(self, ts) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        out = np.zeros((len(ts), self._n_states))
        out[np.arange(len(ts)), self.state_at(ts)] = 1.0
        return out

    def mu_one(self, t: float) -> np.ndarray:
        import bisect

        k = bisect.bisect_right(self._break_times, t) - 1
        out = np.zeros(self._n_states)
        out[self._break_states[max(k, 0)]] = 1.0
        return out

    def jumps(self):
        """Transitions of the observed path as (time, from, to) triples."""
        out = []
        for (t0, s0), (t1, s1) in zip(self.trajectory, self.trajectory[1:]):
            out.append((t1, s0, s1))
        return tuple(out)

    def occupancy(self) -> np.ndarray:
        """Exact time spent in each state."""
        times = np.append(self._break_times, self.T)
        occ = np.zeros(self._n_states)
        for k, s in enumerate(self._break_states):
            occ[s] += times[k + 1] - times[k]
        return occ

    def knots(self) -> np.ndarray:
        return np.append(self._break_times, self.T)


class FactoredDensitySet:
    """Product density set: one component density per model component."""

    def __init__(self, model: CtbnModel, evidence: Evidence, components):
        components = list(components)
        if len(components) != model.num_components:
            raise ValueError("need one density per component")
        ts = {cd.T for cd in components}
        if len(ts) != 1:
            raise ValueError("all components must share the horizon")
        self.model = model
        self.evidence = evidence
        self.components = components

    @property
    def T(self) -> float:
        return self.components[0].T

    @property
    def num_components(self) -> int:
        return len(self.components)

    def mu_batch(self, j: int, ts) -> np.ndarray:
        return self.components[j].mu_batch(ts)

    def mu_one(self, j: int, t: float) -> np.ndarray:
        return self.components[j].mu_one(t)

    def replace(self, i: int, cd) -> None:
        self.components[i] = cd

    def free_components(self):
        return [i for i, cd in enumerate(self.components) if not cd.is_fixed]


# -- rate averaging under the factored marginals ---------------------------


def marginal_weight_batch(view, parents, ts) -> np.ndarray:
    """Product of parent marginals over instantiations, shape (nt, n_u)."""
    nt = len(ts)
    if not parents:
        return np.ones((nt, 1))
    w = view.mu_batch(parents[0], ts)
    for p in parents[1:]:
        mp = view.mu_batch(p, ts)
        w = (w[:, :, None] * mp[:, None, :]).reshape(nt, -1)
    return np.clip(w, 0.0, None)


def marginal_weight_one(view, parents, t: float) -> np.ndarray:
    if not parents:
        return np.ones(1)
    w = view.mu_one(parents[0], t)
    for p in parents[1:]:
        w = np.multiply.outer(w, view.mu_one(p, t)).ravel()
    return np.clip(w, 0.0, None)


def _zero_diagonal(a: np.ndarray) -> np.ndarray:
    s = a.shape[-1]
    a[..., np.arange(s), np.arange(s)] = 0.0
    return a


def mu_gamma_batch(cd: ComponentDensity, ts, ln_qtilde) -> tuple[np.ndarray, np.ndarray]:
    """Marginal and off-diagonal transition density of one component.

    Works entirely in the normalized product representation,
    gamma[x, y] = pi[x] * qtilde[x, y] * rho[y] / Z, so no ratio of
    backward-message entries ever forms.
    """
    ts, pv, rv, prod, z = cd._product_parts(ts)
    mu = prod / z
    qtilde = _zero_diagonal(np.exp(ln_qtilde))
    pv = np.clip(pv, 0.0, None)
    rv = np.clip(rv, 0.0, None)
    gamma = pv[:, :, None] * qtilde * rv[:, None, :] / z[:, :, None]
    return mu, gamma


def gamma_batch(view, i: int, ts) -> np.ndarray:
    """Off-diagonal transition density of component i at the given times.

    Reconstructed against the component's own rate context, which makes the
    flow identity d(mu)/dt = net flux hold identically.
    """
    cd = view.components[i]
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if cd.is_fixed:
        return np.zeros((len(ts), cd.n_states, cd.n_states))
    return mu_gamma_batch(cd, ts, cd.rates_context.ln_qtilde_batch(ts))[1]


def gamma_at(cd: ComponentDensity, model: CtbnModel, others, t: float) -> np.ndarray:
    """Full transition-density matrix of one component at time t.

    The diagonal is the negative row sum, matching the consistency
    convention.  ``others`` is accepted for signature uniformity; the rates
    entering the reconstruction are the ones frozen on the density itself.
    """
    t = float(t)
    ln_qtilde = cd.rates_context.ln_qtilde_one(t)
    g = mu_gamma_batch(cd, np.array([t]), ln_qtilde[None, :, :])[1][0]
    g[np.arange(len(g)), np.arange(len(g))] = -g.sum(axis=1)
    return g


# -- free energy ------------------------------------------------------------


@dataclass
class FreeEnergyReport:
    """Variational objective split into its energy and entropy parts."""

    total: float
    energy: float
    entropy: float
    component_energy: np.ndarray
    component_entropy: np.ndarray
    quadrature_error: float

    @classmethod
    def from_components(cls, comp_energy, comp_entropy, quad_err):
        comp_energy = np.asarray(comp_energy, dtype=float)
        comp_entropy = np.asarray(comp_entropy, dtype=float)
        energy = float(comp_energy.sum())
        entropy = float(comp_entropy.sum())
        return cls(
            energy + entropy, energy, entropy, comp_energy, comp_entropy, quad_err
        )


def _energy_entropy_integrand(view, i: int):
    """Batched integrand [energy_i(t), entropy_i(t)] for one component."""
    model = view.model
    cd = view.components[i]
    tables = model.tables(i)
    parents = model.parents(i)
    s = cd.n_states

    if cd.is_fixed:

        def f_fixed(ts):
            w = marginal_weight_batch(view, parents, ts)
            qbar_diag = w @ tables.flat_diag
            mu = cd.mu_batch(ts)
            energy = np.sum(mu * qbar_diag, axis=1)
            return np.stack([energy, np.zeros_like(energy)], axis=1)

        return f_fixed

    def f(ts):
        ts = np.atleast_1d(ts)
        # Energy averages follow the live marginals; gamma follows the
        # component's frozen context.
        w = marginal_weight_batch(view, parents, ts)
        qbar_diag = w @ tables.flat_diag
        ln_qtilde_live = (w @ tables.log_flat).reshape(len(ts), s, s)
        mu, gamma = mu_gamma_batch(cd, ts, cd.rates_context.ln_qtilde_batch(ts))
        energy = np.sum(mu * qbar_diag, axis=1)
        energy = energy + (gamma * ln_qtilde_live).sum(axis=(1, 2))
        # ln(mu) floored so the integrable log singularity at an observed
        # endpoint evaluates to a large finite value instead of -inf.
        ln_mu = np.log(np.maximum(mu, MU_LOG_FLOOR))
        entropy = (
            gamma.sum(axis=(1, 2))
            + (gamma * ln_mu[:, :, None]).sum(axis=(1, 2))
            - xlogy(gamma, gamma).sum(axis=(1, 2))
        )
        return np.stack([energy, entropy], axis=1)

    return f


def _fixed_jump_energy(view, i: int) -> float:
    """Log-rate contributions of a fully observed component's transitions."""
    model = view.model
    cd = view.components[i]
    if not cd.is_fixed:
        return 0.0
    total = 0.0
    tables = model.tables(i)
    parents = model.parents(i)
    for t, a, b in cd.jumps():
        w = marginal_weight_one(view, parents, t)
        ln_qtilde = (w @ tables.log_flat).reshape(cd.n_states, cd.n_states)
        total += float(ln_qtilde[a, b])
    return total


def _component_knots(view, i: int) -> np.ndarray:
    """Quadrature seed points: solver knots of the component and parents,
    plus a geometric ladder toward an observed end, where the entropy
    integrand has an integrable log singularity that plain bisection would
    chase one level at a time."""
    model = view.model
    cd = view.components[i]
    pieces = [cd.knots()]
    for p in model.parents(i):
        pieces.append(view.components[p].knots())
    T = view.T
    if not cd.is_fixed and cd.end_state is not None:
        pieces.append(T - T * 2.0 ** -np.arange(1.0, 45.0))
    return np.unique(np.concatenate(pieces))


def component_contributions(view, components=None, tol: float = 1e-8):
    """Per-component (energy, entropy, quadrature_error) triples."""
    if components is None:
        components = range(view.num_components)
    out = {}
    T = view.T
    for i in components:
        f = _energy_entropy_integrand(view, i)
        knots = _component_knots(view, i)
        try:
            vals, err = quadrature_batch(f, 0.0, T, tol=tol, initial_points=knots)
        except QuadratureError:
            # Retreat to a hair inside the interval; the excluded slivers
            # contribute O(eps * integrand) which we bound by evaluation.
            eps = 1e-9 * T
            vals, err = quadrature_batch(
                f, eps, T - eps, tol=tol, initial_points=knots
            )
            tails = eps * (f(np.array([eps]))[0] + f(np.array([T - eps]))[0])
            vals = vals + tails
            err = err + np.abs(tails)
        energy = float(vals[0]) + _fixed_jump_energy(view, i)
        out[i] = (energy, float(vals[1]), float(err.sum()))
    return out


def free_energy(
    density_set: FactoredDensitySet, model: CtbnModel | None = None, tol: float = 1e-8
) -> FreeEnergyReport:
    """Evaluate the variational free energy of a factored density set.

    The total is the sum over components of an energy term (averaged rates
    weighted by the marginals plus log geometric rates weighted by the
    transition density) and an entropy term; it lower-bounds the evidence
    log-likelihood.
    """
    if model is not None and model is not density_set.model:
        raise ValueError("density set was built for a different model")
    contribs = component_contributions(density_set, tol=tol)
    d = density_set.num_components
    comp_e = np.array([contribs[i][0] for i in range(d)])
    comp_h = np.array([contribs[i][1] for i in range(d)])
    quad_err = float(sum(contribs[i][2] for i in range(d)))
    return FreeEnergyReport.from_components(comp_e, comp_h, quad_err)


def discretized_free_energy(
    density_set: FactoredDensitySet, model: CtbnModel | None = None, K: int = 64
) -> float:
    """Left Riemann-sum approximation of the free energy on K grid cells.

    Evaluates the same integrands as :func:`free_energy` at times k*T/K for
    k = 0..K-1 and weighs them by T/K; converges to the functional as K
    grows.
    """
    if K < 2:
        raise ValueError("need K >= 2")
    if model is not None and model is not density_set.model:
        raise ValueError("density set was built for a different model")
    T = density_set.T
    delta = T / K
    ts = np.arange(K) * delta
    total = 0.0
    for i in range(density_set.num_components):
        f = _energy_entropy_integrand(density_set, i)
        total += float(f(ts).sum()) * delta
        total += _fixed_jump_energy(density_set, i)
    return total


# -- expected sufficient statistics ------------------------------------------


def expected_stats(
    density_set: FactoredDensitySet, model: CtbnModel | None = None, tol: float = 1e-8
):
    """Expected occupancy times and transition counts under the density set.

    Occupancies integrate mu; transition counts integrate gamma.  The
    parent-resolved variants weigh both by the product of parent marginals.
    """
    from .stats import FactoredStats

    if model is None:
        model = density_set.model
    T = density_set.T
    occupancy = []
    transitions = []
    parent_occupancy = []
    parent_transitions = []
    for i in range(density_set.num_components):
        cd = density_set.components[i]
        s = cd.n_states
        parents = model.parents(i)
        n_u = model.rate_matrices[i].n_instantiations
        tables = model.tables(i)

        if cd.is_fixed:

            def f(ts, cd=cd, parents=parents, s=s):
                ts = np.atleast_1d(ts)
                w = marginal_weight_batch(density_set, parents, ts)
                mu = cd.mu_batch(ts)
                pocc = (w[:, :, None] * mu[:, None, :]).reshape(len(ts), -1)
                return pocc

            knots = _component_knots(density_set, i)
            vals, _ = quadrature_batch(f, 0.0, T, tol=tol, initial_points=knots)
            pocc = vals.reshape(n_u, s)
            occ = cd.occupancy()
            trans = np.zeros((s, s))
            ptrans = np.zeros((n_u, s, s))
            for t, aa, bb in cd.jumps():
                trans[aa, bb] += 1.0
                w = marginal_weight_one(density_set, parents, t)
                ptrans[:, aa, bb] += w
        else:

            def f(ts, i=i, cd=cd, parents=parents, s=s):
                ts = np.atleast_1d(ts)
                w = marginal_weight_batch(density_set, parents, ts)
                mu, gamma = mu_gamma_batch(
                    cd, ts, cd.rates_context.ln_qtilde_batch(ts)
                )
                gflat = gamma.reshape(len(ts), s * s)
                pocc = (w[:, :, None] * mu[:, None, :]).reshape(len(ts), -1)
                ptrans = (w[:, :, None] * gflat[:, None, :]).reshape(len(ts), -1)
                return np.concatenate([mu, gflat, pocc, ptrans], axis=1)

            knots = _component_knots(density_set, i)
            vals, _ = quadrature_batch(f, 0.0, T, tol=tol, initial_points=knots)
            occ = vals[:s]
            trans = vals[s : s + s * s].reshape(s, s)
            pocc = vals[s + s * s : s + s * s + n_u * s].reshape(n_u, s)
            ptrans = vals[s + s * s + n_u * s :].reshape(n_u, s, s)
            trans = _zero_diagonal(trans.copy())
            ptrans = _zero_diagonal(ptrans.copy())
        occupancy.append(occ)
        transitions.append(trans)
        parent_occupancy.append(pocc)
        parent_transitions.append(ptrans)
    return FactoredStats(occupancy, transitions, parent_occupancy, parent_transitions)


# -- consistency audit -------------------------------------------------------


def consistency_check(
    density_set: FactoredDensitySet,
    grid_resolution: int = 512,
    rate_scale: float | None = None,
) -> list[str]:
    """Audit a density set against its defining constraints.

    Checks positivity and normalization of mu, positivity of gamma, the flow
    identity d(mu)/dt = net gamma flux on an audit grid (uniform points plus
    all solver knots), and the boundary conditions.
    """
    model = density_set.model
    T = density_set.T
    if rate_scale is None:
        rate_scale = max(model.max_rate(), 1e-12)
    violations = []
    for i in range(density_set.num_components):
        cd = density_set.components[i]
        if cd.is_fixed:
            continue
        name = model.component_names[i]
        grid = np.union1d(np.linspace(0.0, T, grid_resolution + 1), cd.knots())
        mu = cd.mu_batch(grid)
        if np.min(mu) < -1e-9:
            t_bad = grid[np.argmin(mu.min(axis=1))]
            violations.append(
                f"component {name}: mu dips to {float(np.min(mu)):.3e} at t={t_bad:.6g}"
            )
        norms = mu.sum(axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            t_bad = grid[np.argmax(np.abs(norms - 1.0))]
            violations.append(
                f"component {name}: mu normalization off by "
                f"{float(np.max(np.abs(norms - 1.0))):.3e} at t={t_bad:.6g}"
            )
        gamma = gamma_batch(density_set, i, grid)
        if np.min(gamma) < -1e-9 * rate_scale:
            violations.append(f"component {name}: negative transition density")
        flux = gamma.sum(axis=1) - gamma.sum(axis=2)
        dmu = cd.mu_derivative_batch(grid)
        resid = np.max(np.abs(dmu - flux))
        if resid > 1e-3 * rate_scale:
            t_bad = grid[np.argmax(np.abs(dmu - flux).max(axis=1))]
            violations.append(
                f"component {name}: flow residual {resid:.3e} at t={t_bad:.6g} "
                f"exceeds {1e-3 * rate_scale:.3e}"
            )
        if np.max(np.abs(cd.mu_batch([0.0])[0] - cd.start_vector)) > 1e-12:
            violations.append(f"component {name}: mu(0) does not match start condition")
        if cd.end_state is not None:
            ind = np.zeros(cd.n_states)
            ind[cd.end_state] = 1.0
            gap = np.max(np.abs(cd.mu_batch([T])[0] - ind))
            if gap > 1e-4:
                violations.append(
                    f"component {name}: mu(T) misses end observation by {gap:.3e}"
                )
            rT, _ = cd.rho_pair_batch([T])
            if np.max(np.abs(rT[0] / rT[0].max() - ind)) > 1e-12:
                violations.append(f"component {name}: rho(T) is not the end indicator")
    return violations


# -- serialization -----------------------------------------------------------


def density_set_to_dict(density_set: FactoredDensitySet) -> dict:
    comps = []
    for cd in density_set.components:
        if cd.is_fixed:
            comps.append(
                {
                    "fixed": True,
                    "n_states": cd.n_states,
                    "trajectory": [[t, int(s)] for t, s in cd.trajectory],
                }
            )
            continue
        comps.append(
            {
                "fixed": False,
                "start_vector": cd.start_vector.tolist(),
                "end_state": cd.end_state,
                "pre_clamp_gap": cd.pre_clamp_gap,
                "pi": _scaled_to_dict(cd.pi),
                "rho": _scaled_to_dict(cd.rho),
            }
        )
    return {"schema_version": 1, "T": density_set.T, "components": comps}


def _scaled_to_dict(sol: ScaledSolution) -> dict:
    return {
        "segments": [
            {
                "ts": seg.ts.tolist(),
                "ys": seg.ys.tolist(),
                "fs": seg.fs.tolist(),
                "direction": seg.direction,
            }
            for seg in sol.segments
        ],
        "log_scales": list(sol.log_scales),
        "ledger": [[t, v] for t, v in sol.ledger],
    }


def _scaled_from_dict(data: dict) -> ScaledSolution:
    segments = [
        OdeSolution(s["ts"], s["ys"], s["fs"], s["direction"])
        for s in data["segments"]
    ]
    return ScaledSolution(
        segments, data["log_scales"], [(t, v) for t, v in data["ledger"]]
    )


def density_set_from_dict(
    data: dict, model: CtbnModel, evidence: Evidence
) -> FactoredDensitySet:
    """Rebuild a density set from its knots file.

    Rate contexts are re-derived from the loaded marginals themselves, which
    reproduces the stored state exactly for converged sets.
    """
    comps = []
    for i, entry in enumerate(data["components"]):
        if entry["fixed"]:
            comps.append(
                TrajectoryDensity(
                    i, data["T"], entry["n_states"], entry["trajectory"]
                )
            )
            continue
        comps.append(
            ComponentDensity(
                i,
                data["T"],
                _scaled_from_dict(entry["pi"]),
                _scaled_from_dict(entry["rho"]),
                np.asarray(entry["start_vector"], dtype=float),
                entry["end_state"],
                None,
                entry["pre_clamp_gap"],
            )
        )
    for i, cd in enumerate(comps):
        if not cd.is_fixed:
            cd.rates_context = FrozenMarginalsContext(
                model, i, [comps[p] for p in model.parents(i)]
            )
    return FactoredDensitySet(model, evidence, comps)
