"""Mean-field optimization of a factored density set on an interval.

Updating one component solves a backward equation for its likelihood
message rho (driven by the arithmetically averaged rates, the geometrically
averaged rates and a child-feedback term) and then a forward equation for
its marginal mu; sweeping components round-robin monotonically improves the
free energy until convergence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .density import (
    ComponentDensity,
    FactoredDensitySet,
    FixedRatesContext,
    FreeEnergyReport,
    FrozenMarginalsContext,
    TrajectoryDensity,
    component_contributions,
    marginal_weight_one,
)
from .model import CtbnModel, Evidence
from .ode import IntegratorConfig, OdeSolution, ScaledSolution, integrate

__all__ = [
    "MeanFieldConfig",
    "MeanFieldTrace",
    "avg_rates",
    "geo_rates",
    "psi",
    "backward_rho",
    "forward_mu",
    "initialize",
    "update_component",
    "run_mean_field",
]

MONOTONICITY_SLACK = 1e-7


@dataclass(frozen=True)
class MeanFieldConfig:
    """Knobs of the optimization loop.

    ``tol`` is the relative free-energy change over a full sweep below which
    the run counts as converged; ``eps_end_fraction`` sets how close to an
    observed endpoint the forward integration runs before clamping.
    """

    tol: float = 1e-6
    max_sweeps: int = 100
    integrator: IntegratorConfig = IntegratorConfig()
    seed: int = 0
    eps_end_fraction: float = 1e-9
    rho_renorm_threshold: float = 1e100
    quad_tol: float = 1e-8

    def __post_init__(self):
        if self.tol <= 0 or self.max_sweeps < 1:
            raise ValueError("tolerance must be positive and max sweeps >= 1")
        if not 0 < self.eps_end_fraction < 1e-3:
            raise ValueError("endpoint guard must be tiny and positive")
        if self.rho_renorm_threshold <= 1:
            raise ValueError("renormalization threshold must exceed 1")


@dataclass
class MeanFieldTrace:
    """Free-energy history of a run: one entry per component update."""

    entries: list = field(default_factory=list)  # (sweep, component, F)
    converged: bool = False
    n_sweeps: int = 0
    initial_free_energy: float = math.nan
    diagnostics: list = field(default_factory=list)

    def free_energies(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries])

    def is_monotone(self, slack_coefficient: float = MONOTONICITY_SLACK) -> bool:
        values = np.concatenate([[self.initial_free_energy], self.free_energies()])
        slack = slack_coefficient * (1.0 + np.abs(values[1:]))
        return bool(np.all(np.diff(values) >= -slack))


# -- averaged rates ----------------------------------------------------------


def avg_rates(model: CtbnModel, i: int, parent_marginals) -> np.ndarray:
    """Arithmetic average of component i's rate matrices under the given
    parent marginals (one distribution per parent, ascending order)."""
    tables = model.tables(i)
    w = _weights_from_list(parent_marginals, model, i)
    s = tables.n_states
    return (w @ tables.flat).reshape(s, s)


def geo_rates(model: CtbnModel, i: int, parent_marginals) -> np.ndarray:
    """Geometric average of the off-diagonal rates; diagonal is zero.

    A zero conditional rate with positive parent weight drives the averaged
    entry to zero (the limiting convention).
    """
    tables = model.tables(i)
    w = _weights_from_list(parent_marginals, model, i)
    s = tables.n_states
    ln = (w @ tables.log_flat).reshape(s, s)
    out = np.exp(ln)
    out[np.arange(s), np.arange(s)] = 0.0
    return out


def _weights_from_list(parent_marginals, model: CtbnModel, i: int) -> np.ndarray:
    parents = model.parents(i)
    marginals = [np.asarray(m, dtype=float) for m in parent_marginals]
    if len(marginals) != len(parents):
        raise ValueError(f"component {i} has {len(parents)} parents")
    if not marginals:
        return np.ones(1)
    for m, p in zip(marginals, parents):
        if m.shape != (model.state_space.cardinalities[p],):
            raise ValueError("parent marginal has wrong length")
        if abs(m.sum() - 1.0) > 1e-9:
            raise ValueError("parent marginals must be normalized")
    w = marginals[0]
    for m in marginals[1:]:
        w = np.multiply.outer(w, m).ravel()
    return w


# -- scalar-time evaluation helpers (integration hot path) -------------------


_SCALAR_ONE = np.ones(1)


class _Cache:
    """Per-RHS-call memo of component curves at one time, keyed by object.

    Keying by density object (not component index) lets frozen rate
    contexts share lookups with the live set whenever they reference the
    same solution.
    """

    __slots__ = ("t", "_mu", "_pv", "_rv")

    def __init__(self, t: float):
        self.t = t
        self._mu = {}
        self._pv = {}
        self._rv = {}

    def pv(self, cd) -> np.ndarray:
        k = id(cd)
        out = self._pv.get(k)
        if out is None:
            out = np.maximum(cd.pi.evaluate_one(self.t)[0], 0.0)
            self._pv[k] = out
        return out

    def rv(self, cd) -> np.ndarray:
        k = id(cd)
        out = self._rv.get(k)
        if out is None:
            out = np.maximum(cd.rho.evaluate_one(self.t)[0], 0.0)
            self._rv[k] = out
        return out

    def mu(self, cd) -> np.ndarray:
        k = id(cd)
        out = self._mu.get(k)
        if out is None:
            if cd.is_fixed:
                out = cd.mu_one(self.t)
            else:
                prod = self.pv(cd) * self.rv(cd)
                out = prod / prod.sum()
            self._mu[k] = out
        return out


def _weights_of(cache: _Cache, densities) -> np.ndarray:
    if not densities:
        return _SCALAR_ONE
    w = cache.mu(densities[0])
    for d in densities[1:]:
        w = np.multiply.outer(w, cache.mu(d)).ravel()
    return w


def _gamma_of(cd, cache: _Cache) -> np.ndarray:
    """Off-diagonal transition density of a component at the cached time."""
    if cd.is_fixed:
        return np.zeros((cd.n_states, cd.n_states))
    s = cd.n_states
    qtilde = np.exp(cd.rates_context.ln_qtilde_one(cache.t, cache.mu))
    qtilde[np.arange(s), np.arange(s)] = 0.0
    pv = cache.pv(cd)
    rv = cache.rv(cd)
    z = float(pv @ rv)
    if z <= 0.0:
        from .density import DegenerateDensityError

        raise DegenerateDensityError(cd.index, -1, cache.t)
    return pv[:, None] * qtilde * rv[None, :] / z


class _ChildTerm:
    """Prebuilt pieces of one child's contribution to the feedback term."""

    __slots__ = ("cd", "cond_diag", "log_cond", "rest")

    def __init__(self, model: CtbnModel, i: int, j: int, view):
        tables = model.tables(j)
        pos = model.parents(j).index(i)
        self.cd = view.components[j]
        self.cond_diag = tables.cond_diag[pos]
        self.log_cond = tables.log_cond[pos]
        self.rest = [view.components[p] for p in model.parents(j) if p != i]


def _children_of(model: CtbnModel, i: int, view) -> list:
    return [_ChildTerm(model, i, j, view) for j in model.children[i]]


def _psi_terms(children, cache: _Cache) -> np.ndarray | float:
    out = 0.0
    for ch in children:
        w_rest = _weights_of(cache, ch.rest)
        # Diagonal rates averaged over the other parents, per state of i.
        out = out + (ch.cond_diag @ w_rest) @ cache.mu(ch.cd)
        gamma_j = _gamma_of(ch.cd, cache)
        if gamma_j.any():
            out = out + (ch.log_cond @ w_rest) @ gamma_j.ravel()
    return out


def psi(model: CtbnModel, i: int, density_set, t: float) -> np.ndarray:
    """Child-feedback term of component i's backward equation at time t.

    Sums, over the children of i, the diagonal of their averaged rates
    conditioned on i's state (weighted by the child marginal) and the log
    geometric rates conditioned on i (weighted by the child transition
    density).
    """
    children = _children_of(model, i, density_set)
    out = _psi_terms(children, _Cache(float(t)))
    if np.ndim(out) == 0:
        return np.zeros(model.state_space.cardinalities[i])
    return out


# -- the two fixed-point equations -------------------------------------------


def _collect_child_jump_events(model: CtbnModel, i: int, view):
    """Observed transitions of fully observed children, as reweighting
    events (time, child, from_state, to_state) for i's backward message."""
    events = []
    for j in model.children[i]:
        cd = view.components[j]
        if cd.is_fixed:
            for t, a, b in cd.jumps():
                events.append((t, j, a, b))
    events.sort()
    return events


def _jump_factor(model: CtbnModel, i: int, j: int, a: int, b: int, view, cache: _Cache):
    """Likelihood of child j's observed jump a->b as a function of i's state."""
    tables = model.tables(j)
    pos = model.parents(j).index(i)
    rest = [view.components[p] for p in model.parents(j) if p != i]
    w_rest = _weights_of(cache, rest)
    s_j = tables.n_states
    ln_cond = (tables.log_cond[pos] @ w_rest).reshape(-1, s_j, s_j)
    return np.exp(ln_cond[:, a, b])


def backward_rho(
    model: CtbnModel,
    i: int,
    density_set,
    evidence: Evidence,
    config: MeanFieldConfig | None = None,
) -> ScaledSolution:
    """Integrate component i's backward message from T down to 0.

    The terminal value is the indicator of the observed end state, or all
    ones when the end is unobserved.  The message is renormalized against
    the configured threshold with the factors kept in the ledger.
    """
    if config is None:
        config = MeanFieldConfig()
    T = evidence.T
    end = evidence.components[i].end
    s = model.state_space.cardinalities[i]
    terminal = np.ones(s)
    if end is not None:
        terminal = np.zeros(s)
        terminal[end] = 1.0
    return _backward_rho_span(
        model, i, density_set, terminal, T, 0.0, config
    )


def _backward_rho_span(
    model: CtbnModel,
    i: int,
    view,
    terminal: np.ndarray,
    t_hi: float,
    t_lo: float,
    config: MeanFieldConfig,
) -> ScaledSolution:
    tables = model.tables(i)
    s = tables.n_states
    diag_idx = np.arange(s)
    parent_densities = [view.components[p] for p in model.parents(i)]
    children = _children_of(model, i, view)
    flat_diag = tables.flat_diag
    log_flat = tables.log_flat

    def rhs(t, rho):
        cache = _Cache(t)
        w = _weights_of(cache, parent_densities)
        qbar_diag = w @ flat_diag
        qtilde = np.exp((w @ log_flat).reshape(s, s))
        qtilde[diag_idx, diag_idx] = 0.0
        drift = qbar_diag + _psi_terms(children, cache)
        return -drift * rho - qtilde @ rho

    events = [
        e for e in _collect_child_jump_events(model, i, view) if t_lo < e[0] < t_hi
    ]
    if not events:
        return _integrate_scaled_span(rhs, t_hi, t_lo, terminal, config)

    # Observed child jumps reweight the message; integrate piecewise between
    # them, applying the per-state likelihood factors at each event time.
    times = sorted({e[0] for e in events}, reverse=True)
    by_time = {}
    for t_ev, j, a, b in events:
        by_time.setdefault(t_ev, []).append((j, a, b))

    pieces = []  # (ScaledSolution, log factor applied at its lower end)
    t_cur = t_hi
    y = terminal
    for t_ev in times:
        sol = _integrate_scaled_span(rhs, t_cur, t_ev, y, config)
        cache = _Cache(t_ev)
        y = sol.evaluate_scaled(t_ev)[0].copy()
        for j, a, b in by_time[t_ev]:
            y = y * _jump_factor(model, i, j, a, b, view, cache)
        m = float(np.max(np.abs(y)))
        if m <= 0.0:
            raise ValueError(
                f"backward message of component {i} vanished at observed "
                f"child transition t={t_ev!r}"
            )
        pieces.append((sol, math.log(m)))
        y = y / m
        t_cur = t_ev
    pieces.append((_integrate_scaled_span(rhs, t_cur, t_lo, y, config), 0.0))

    # Each piece's own frame starts at the log scale reached at its top;
    # chain frames downward through the recorded factors.
    segments = []
    logs = []
    ledger = []
    offset = 0.0
    for sol, extra in pieces:
        segments.extend(sol.segments)
        logs.extend(offset + ls for ls in sol.log_scales)
        ledger.extend(sol.ledger)
        offset = offset + sol.log_scales[0] + extra
        if extra:
            ledger.append((sol.t_min, extra))
    return ScaledSolution(segments, logs, ledger)


def _integrate_scaled_span(rhs, t_from, t_to, y0, config: MeanFieldConfig):
    from .ode import integrate_scaled

    return integrate_scaled(
        rhs,
        t_from,
        t_to,
        y0,
        config.integrator,
        hi=config.rho_renorm_threshold,
    )


def forward_mu(
    model: CtbnModel,
    i: int,
    rho: ScaledSolution,
    density_set,
    evidence: Evidence,
    config: MeanFieldConfig | None = None,
):
    """Integrate component i's marginal forward given its backward message.

    The marginal is carried in filtered form pi = mu / rho, whose evolution
    is linear with bounded coefficients even next to observed endpoints; the
    density then represents mu as the normalized product pi * rho, which
    hits an observed end state exactly.
    """
    if config is None:
        config = MeanFieldConfig()
    T = evidence.T
    ev = evidence.components[i]
    s = model.state_space.cardinalities[i]
    start = ev.start_vector(s)
    pi, defect, context = _forward_pi_span(
        model, i, density_set, rho, start, 0.0, T, config
    )
    return ComponentDensity(i, T, pi, rho, start, ev.end, context, defect)


def _initial_pi(start: np.ndarray, rho_at_start, component: int, t: float) -> np.ndarray:
    """Divide the start condition by the backward message, entrywise.

    Zero-mass start states contribute zero regardless of the message; a
    vanished message under a positive start weight is a degeneracy.
    """
    rv = np.clip(rho_at_start, 0.0, None)
    dead = rv <= rv.max() * 1e-250
    bad = dead & (start > 0.0)
    if np.any(bad):
        from .density import DegenerateDensityError

        raise DegenerateDensityError(component, int(np.argwhere(bad)[0]), t)
    pi0 = np.where(start > 0.0, start / np.where(dead, 1.0, rv), 0.0)
    total = float(pi0 @ rv)
    return pi0 / total


def _forward_pi_span(
    model: CtbnModel,
    i: int,
    view,
    rho: ScaledSolution,
    start: np.ndarray,
    t_lo: float,
    t_hi: float,
    config: MeanFieldConfig,
):
    parents = model.parents(i)
    s = model.state_space.cardinalities[i]
    diag_idx = np.arange(s)
    parent_densities = [view.components[p] for p in parents]
    children = _children_of(model, i, view)
    tables = model.tables(i)
    flat_diag = tables.flat_diag
    log_flat = tables.log_flat
    # Freeze the geometric rates against the current parent marginals; the
    # same context both drives this integration and later reconstructs the
    # component's transition density.
    context = FrozenMarginalsContext(model, i, parent_densities)

    def rhs(t, pi_vec):
        cache = _Cache(t)
        w = _weights_of(cache, parent_densities)
        qbar_diag = w @ flat_diag
        qtilde = np.exp((w @ log_flat).reshape(s, s))
        qtilde[diag_idx, diag_idx] = 0.0
        drift = qbar_diag + _psi_terms(children, cache)
        return drift * pi_vec + qtilde.T @ pi_vec

    rv0, _ = rho.evaluate_scaled(t_lo)
    y = _initial_pi(start, rv0, i, t_lo)

    jump_times = sorted(
        {
            e[0]
            for e in _collect_child_jump_events(model, i, view)
            if t_lo < e[0] < t_hi
        }
    )
    by_time = {}
    for t_ev, j, a, b in _collect_child_jump_events(model, i, view):
        if t_lo < t_ev < t_hi:
            by_time.setdefault(t_ev, []).append((j, a, b))

    pieces = []
    t_cur = t_lo
    for t_ev in jump_times:
        sol = _integrate_scaled_span(rhs, t_cur, t_ev, y, config)
        cache = _Cache(t_ev)
        y = sol.evaluate_scaled(t_ev)[0].copy()
        for j, a, b in by_time[t_ev]:
            y = y * _jump_factor(model, i, j, a, b, view, cache)
        m = float(np.max(np.abs(y)))
        if m <= 0.0:
            raise ValueError(
                f"forward curve of component {i} vanished at observed "
                f"child transition t={t_ev!r}"
            )
        pieces.append((sol, math.log(m)))
        y = y / m
        t_cur = t_ev
    pieces.append((_integrate_scaled_span(rhs, t_cur, t_hi, y, config), 0.0))

    segments = []
    logs = []
    ledger = []
    offset = 0.0
    for sol, extra in pieces:
        segments.extend(sol.segments)
        logs.extend(offset + ls for ls in sol.log_scales)
        ledger.extend(sol.ledger)
        offset = offset + sol.log_scales[-1] + extra
        if extra:
            ledger.append((sol.t_max, extra))
    pi = ScaledSolution(segments, logs, ledger)

    # Conservation defect of the product mass across the span, an estimate
    # of accumulated integration error (exactly zero in exact arithmetic).
    pv0, lp0 = pi.evaluate_scaled(t_lo)
    rv0b, lr0 = rho.evaluate_scaled(t_lo)
    pv1, lp1 = pi.evaluate_scaled(t_hi)
    rv1, lr1 = rho.evaluate_scaled(t_hi)
    log_ratio = (
        math.log(max(float(pv1 @ rv1), 1e-300))
        + lp1
        + lr1
        - math.log(max(float(pv0 @ rv0b), 1e-300))
        - lp0
        - lr0
    )
    defect = abs(math.expm1(log_ratio))
    return pi, defect, context


# -- initialization -----------------------------------------------------------


def _single_component_posterior(
    q: np.ndarray,
    start: np.ndarray,
    end_state: int | None,
    T: float,
    config: MeanFieldConfig,
    index: int = 0,
) -> ComponentDensity:
    """Exact posterior density of an isolated component with rate matrix q.

    rho solves the backward equation from the end condition; the filtered
    curve pi solves the plain master equation from the start condition.
    """
    s = q.shape[0]
    terminal = np.ones(s)
    if end_state is not None:
        terminal = np.zeros(s)
        terminal[end_state] = 1.0
    from .ode import integrate_scaled

    rho = integrate_scaled(
        lambda t, r: -(q @ r), T, 0.0, terminal, config.integrator,
        hi=config.rho_renorm_threshold,
    )
    qt = np.ascontiguousarray(q.T)
    rv0, _ = rho.evaluate_scaled(0.0)
    pi0 = _initial_pi(start, rv0, index, 0.0)
    pi = integrate_scaled(
        lambda t, p: qt @ p, 0.0, T, pi0, config.integrator,
        hi=config.rho_renorm_threshold,
    )
    return ComponentDensity(
        index, T, pi, rho, start, end_state, FixedRatesContext(q), None
    )


def initialize(
    model: CtbnModel, evidence: Evidence, seed: int = 0,
    config: MeanFieldConfig | None = None,
) -> FactoredDensitySet:
    """Legal starting point: each component gets the posterior of a fictional
    isolated chain whose rate matrix is one of its conditional rate matrices,
    drawn uniformly at random (per component, seeded)."""
    if config is None:
        config = MeanFieldConfig(seed=seed)
    rng = np.random.default_rng(seed)
    comps = []
    for i in range(model.num_components):
        crm = model.rate_matrices[i]
        u_idx = int(rng.integers(crm.n_instantiations))
        ev = evidence.components[i]
        if ev.trajectory is not None:
            comps.append(
                TrajectoryDensity(i, evidence.T, crm.n_states, ev.trajectory)
            )
            continue
        q = crm.table[u_idx]
        comps.append(
            _single_component_posterior(
                q,
                ev.start_vector(crm.n_states),
                ev.end,
                evidence.T,
                config,
                index=i,
            )
        )
    return FactoredDensitySet(model, evidence, comps)


# -- optimization loop --------------------------------------------------------


def _update_density(model, i, density_set, evidence, config) -> ComponentDensity:
    rho = backward_rho(model, i, density_set, evidence, config)
    return forward_mu(model, i, rho, density_set, evidence, config)


def update_component(
    density_set: FactoredDensitySet, i: int, config: MeanFieldConfig | None = None
):
    """One backward-forward refresh of component i against the others.

    Replaces the component in place and returns the new density together
    with the total free energy after the update.
    """
    if config is None:
        config = MeanFieldConfig()
    model = density_set.model
    evidence = density_set.evidence
    cd = _update_density(model, i, density_set, evidence, config)
    density_set.replace(i, cd)
    from .density import free_energy

    report = free_energy(density_set, tol=config.quad_tol)
    return cd, report.total


def run_mean_field(
    model: CtbnModel,
    evidence: Evidence,
    config: MeanFieldConfig | None = None,
):
    """Optimize the factored density set for the given evidence.

    Returns ``(density_set, report, trace)``.  Components are refreshed in
    ascending order each sweep; the run stops when the free-energy change
    over a sweep falls below the relative tolerance, or flags
    ``converged=False`` after the sweep budget.
    """
    if config is None:
        config = MeanFieldConfig()
    problems = evidence.validate(model)
    if problems:
        raise ValueError("invalid evidence: " + "; ".join(problems))

    density_set = initialize(model, evidence, config.seed, config)
    contribs = component_contributions(density_set, tol=config.quad_tol)
    free = {
        i: (c[0], c[1]) for i, c in contribs.items()
    }
    total = sum(e + h for e, h in free.values())

    trace = MeanFieldTrace(initial_free_energy=total)
    update_order = density_set.free_components()
    slack_of = lambda value: MONOTONICITY_SLACK * (1.0 + abs(value))

    for sweep in range(1, config.max_sweeps + 1):
        sweep_start = total
        for i in update_order:
            cd = _update_density(model, i, density_set, evidence, config)
            density_set.replace(i, cd)
            if cd.pre_clamp_gap is not None and cd.pre_clamp_gap > 1e-3:
                trace.diagnostics.append(
                    f"sweep {sweep}: component {i} pre-clamp gap "
                    f"{cd.pre_clamp_gap:.2e}"
                )
            touched = [i] + [j for j in model.children[i] if j != i]
            updated = component_contributions(
                density_set, components=touched, tol=config.quad_tol
            )
            for j, c in updated.items():
                free[j] = (c[0], c[1])
            new_total = sum(e + h for e, h in free.values())
            if new_total < total - slack_of(new_total):
                trace.diagnostics.append(
                    f"sweep {sweep}: free energy dropped by "
                    f"{total - new_total:.3e} updating component {i}"
                )
            total = new_total
            trace.entries.append((sweep, i, total))
        trace.n_sweeps = sweep
        if abs(total - sweep_start) < config.tol * (1.0 + abs(total)):
            trace.converged = True
            break

    d = model.num_components
    report = FreeEnergyReport.from_components(
        [free[i][0] for i in range(d)],
        [free[i][1] for i in range(d)],
        float(sum(contribs[i][2] for i in contribs)),
    )
    return density_set, report, trace
