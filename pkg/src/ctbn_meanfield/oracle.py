"""Exact inference on the amalgamated joint chain.

Ground truth for small models: evidence likelihood, posterior marginals and
expected sufficient statistics, all computed by propagating the master
equation with the adaptive integrator (dense matrix exponentials are kept
out of the main path and appear only in tests as a cross-check).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import CtbnModel, JointRateMatrix, StateSpace
from .ode import IntegratorConfig, ScaledSolution, integrate_scaled, quadrature_batch
from .stats import FactoredStats

__all__ = [
    "ExactPosterior",
    "SufficientStats",
    "compute_exact_posterior",
    "exact_log_likelihood",
    "exact_posterior_marginals",
    "exact_sufficient_stats",
    "project_component_marginal",
    "project_stats",
]

ORACLE_CONFIG = IntegratorConfig(rtol=1e-9, atol=1e-12)


def _boundary_vector(condition, n: int, name: str) -> np.ndarray:
    """Indicator for an observed state, the given distribution for a prior,
    all-ones for an unobserved end (condition None)."""
    if condition is None:
        return np.ones(n)
    if isinstance(condition, (int, np.integer)):
        if not 0 <= condition < n:
            raise ValueError(f"{name} state {condition} out of range [0, {n})")
        v = np.zeros(n)
        v[int(condition)] = 1.0
        return v
    v = np.asarray(condition, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"{name} distribution has wrong length")
    return v.copy()


@dataclass
class ExactPosterior:
    """Forward/backward solutions of the master equation and the evidence
    likelihood they imply.

    ``forward`` carries the filtered mass started from the initial
    condition; ``backward`` the likelihood of the terminal condition given
    the state.  Their pointwise product, normalized, is the posterior.
    """

    forward: ScaledSolution
    backward: ScaledSolution
    log_likelihood: float
    T: float

    def marginals(self, times) -> np.ndarray:
        """Posterior distributions at the requested times, shape (nt, N)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        a, _ = self.forward.evaluate_scaled(times)
        b, _ = self.backward.evaluate_scaled(times)
        prod = np.clip(a, 0.0, None) * np.clip(b, 0.0, None)
        return prod / prod.sum(axis=1, keepdims=True)

    def pointwise_likelihood(self, times) -> np.ndarray:
        """log sum_x forward_x(t) * backward_x(t); constant in t."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        a, la = self.forward.evaluate_scaled(times)
        b, lb = self.backward.evaluate_scaled(times)
        return np.log(np.sum(a * b, axis=1)) + la + lb


def compute_exact_posterior(
    joint: JointRateMatrix,
    start,
    end,
    T: float,
    config: IntegratorConfig | None = None,
) -> ExactPosterior:
    """Solve the forward and backward master equations for the evidence.

    ``start`` is an observed joint state index or a distribution; ``end``
    an observed index, a weight vector, or None for an unobserved endpoint.
    """
    if T <= 0:
        raise ValueError("horizon must be positive")
    if config is None:
        config = ORACLE_CONFIG
    n = joint.n_states
    q = joint.matrix
    qt = joint.matrix_t
    p0 = _boundary_vector(start, n, "start")
    bT = _boundary_vector(end, n, "end")

    forward = integrate_scaled(lambda t, p: qt.dot(p), 0.0, T, p0, config)
    backward = integrate_scaled(lambda t, b: -q.dot(b), T, 0.0, bT, config)

    aT, la = forward.evaluate_scaled(T)
    like = float(np.dot(aT, bT))
    if like <= 0.0:
        raise ValueError("evidence has zero likelihood under the model")
    log_likelihood = math.log(like) + la
    return ExactPosterior(forward, backward, log_likelihood, float(T))


def exact_log_likelihood(joint: JointRateMatrix, e0, eT, T: float) -> float:
    """Log probability of the terminal condition given the initial one."""
    return compute_exact_posterior(joint, e0, eT, T).log_likelihood


def exact_posterior_marginals(
    joint: JointRateMatrix, e0, eT, T: float, times
) -> np.ndarray:
    """Posterior joint-state distributions at the requested times."""
    return compute_exact_posterior(joint, e0, eT, T).marginals(times)


@dataclass
class SufficientStats:
    """Joint-chain expected occupancy times and transition counts.

    ``occupancy[x]`` is the expected time in joint state x; transitions are
    stored on the sparse off-diagonal support of the rate matrix.
    """

    state_space: StateSpace
    occupancy: np.ndarray
    transition_rows: np.ndarray
    transition_cols: np.ndarray
    transition_counts: np.ndarray

    def transition_matrix(self) -> np.ndarray:
        n = len(self.occupancy)
        out = np.zeros((n, n))
        out[self.transition_rows, self.transition_cols] = self.transition_counts
        return out


def exact_sufficient_stats(
    joint: JointRateMatrix,
    e0,
    eT,
    T: float,
    tol: float = 1e-8,
    posterior: ExactPosterior | None = None,
) -> SufficientStats:
    """Expected occupancy times and transition counts under the posterior.

    Occupancies integrate the posterior marginals; the expected count of a
    transition x→y is its rate times the integrated overlap of forward mass
    at x with backward likelihood at y.
    """
    if posterior is None:
        posterior = compute_exact_posterior(joint, e0, eT, T)
    rows, cols, rates = joint.offdiagonal_entries()
    log_like = posterior.log_likelihood

    def integrand(ts):
        a, la = posterior.forward.evaluate_scaled(ts)
        b, lb = posterior.backward.evaluate_scaled(ts)
        a = np.clip(a, 0.0, None)
        b = np.clip(b, 0.0, None)
        w = np.exp(la + lb - log_like)[:, None]
        occ = a * b * w
        flux = a[:, rows] * b[:, cols] * w
        return np.concatenate([occ, flux], axis=1)

    knots = np.union1d(posterior.forward.knots(), posterior.backward.knots())
    vals, _ = quadrature_batch(integrand, 0.0, T, tol=tol, initial_points=knots)
    n = joint.n_states
    occupancy = vals[:n]
    counts = rates * vals[n:]
    return SufficientStats(
        joint.state_space, occupancy, rows, cols, counts
    )


def project_component_marginal(
    joint_probs: np.ndarray, space: StateSpace, i: int
) -> np.ndarray:
    """Marginal distribution of component i from a joint distribution."""
    p = np.asarray(joint_probs, dtype=float).reshape(space.cardinalities)
    axes = tuple(k for k in range(space.num_components) if k != i)
    return p.sum(axis=axes)


def project_stats(stats: SufficientStats, model: CtbnModel) -> FactoredStats:
    """Reduce joint-chain statistics to the factored per-component form."""
    space = model.state_space
    states = space.enumerate_states()
    occupancy = []
    transitions = []
    parent_occupancy = []
    parent_transitions = []
    row_states = states[stats.transition_rows]
    col_states = states[stats.transition_cols]
    for i in range(model.num_components):
        card = space.cardinalities[i]
        occ = np.zeros(card)
        np.add.at(occ, states[:, i], stats.occupancy)
        occupancy.append(occ)

        changed = row_states[:, i] != col_states[:, i]
        trans = np.zeros((card, card))
        np.add.at(
            trans,
            (row_states[changed, i], col_states[changed, i]),
            stats.transition_counts[changed],
        )
        transitions.append(trans)

        parents = model.parents(i)
        n_u = model.rate_matrices[i].n_instantiations
        pocc = np.zeros((n_u, card))
        if parents:
            u_all = states[:, parents] @ model._parent_strides[i]
        else:
            u_all = np.zeros(len(states), dtype=np.int64)
        np.add.at(pocc, (u_all, states[:, i]), stats.occupancy)
        parent_occupancy.append(pocc)

        ptrans = np.zeros((n_u, card, card))
        if np.any(changed):
            u_rows = u_all[stats.transition_rows[changed]]
            np.add.at(
                ptrans,
                (u_rows, row_states[changed, i], col_states[changed, i]),
                stats.transition_counts[changed],
            )
        parent_transitions.append(ptrans)
    return FactoredStats(occupancy, transitions, parent_occupancy, parent_transitions)
