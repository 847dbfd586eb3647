"""Multi-component continuous-time Markov models.

A model is a collection of components, each with a conditional rate matrix
table indexed by the joint state of its parent components.  Joint states and
parent instantiations are enumerated in mixed-radix order with the first
(lowest-index) component most significant, so all modules agree on indexing.
"""

from __future__ import annotations

import json
import math

import numpy as np
from scipy import sparse

__all__ = [
    "StateSpace",
    "ConditionalRateMatrix",
    "CtbnModel",
    "JointRateMatrix",
    "ComponentEvidence",
    "Evidence",
    "StateSpaceTooLargeError",
    "validate_model",
    "amalgamate",
    "build_ising_chain",
    "conditional_rate",
    "load_model",
    "save_model",
    "model_to_dict",
    "model_from_dict",
    "load_evidence",
    "save_evidence",
    "evidence_to_dict",
    "evidence_from_dict",
]

DEFAULT_JOINT_SIZE_CAP = 4096

ROW_SUM_TOL = 1e-12
PRIOR_SUM_TOL = 1e-12


class StateSpaceTooLargeError(RuntimeError):
    """Joint state space exceeds the configured cap."""


def _mixed_radix_strides(cards) -> np.ndarray:
    """Strides for mixed-radix indices, first position most significant."""
    strides = np.ones(len(cards), dtype=np.int64)
    for k in range(len(cards) - 2, -1, -1):
        strides[k] = strides[k + 1] * cards[k + 1]
    return strides


class StateSpace:
    """Product state space of a multi-component process."""

    def __init__(self, cardinalities, labels=None):
        cards = tuple(int(c) for c in cardinalities)
        if not cards:
            raise ValueError("need at least one component")
        if any(c < 2 for c in cards):
            raise ValueError("every component needs at least two states")
        self.cardinalities = cards
        if labels is None:
            labels = tuple(tuple(str(s) for s in range(c)) for c in cards)
        else:
            labels = tuple(tuple(str(x) for x in comp) for comp in labels)
            if len(labels) != len(cards) or any(
                len(lab) != c for lab, c in zip(labels, cards)
            ):
                raise ValueError("labels must match cardinalities")
        self.labels = labels
        self._strides = _mixed_radix_strides(cards)

    @property
    def num_components(self) -> int:
        return len(self.cardinalities)

    @property
    def joint_size(self) -> int:
        # Python ints do not overflow; enumeration is separately capped.
        return math.prod(self.cardinalities)

    def joint_index(self, states) -> int:
        states = tuple(states)
        if len(states) != self.num_components:
            raise ValueError("state tuple has wrong arity")
        idx = 0
        for s, c, stride in zip(states, self.cardinalities, self._strides):
            if not 0 <= s < c:
                raise ValueError(f"state {s} out of range [0, {c})")
            idx += s * int(stride)
        return idx

    def joint_state(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.joint_size:
            raise ValueError("joint index out of range")
        out = []
        for stride in self._strides:
            out.append(index // int(stride))
            index %= int(stride)
        return tuple(out)

    def enumerate_states(self) -> np.ndarray:
        """All joint states as an ``(N, D)`` integer array, in index order."""
        n = self.joint_size
        if n > 50_000_000:
            raise StateSpaceTooLargeError(
                f"refusing to enumerate {n} joint states"
            )
        return np.array(
            np.unravel_index(np.arange(n), self.cardinalities)
        ).T.astype(np.int64)


class ConditionalRateMatrix:
    """Rate matrices of one component, one per parent instantiation.

    ``table`` has shape ``(n_instantiations, S, S)`` where instantiations are
    enumerated in mixed-radix order over the (ascending) parent components.
    Rows containing NaN mark missing instantiations; they are reported by
    :func:`validate_model` rather than rejected here.
    """

    def __init__(self, component: int, parents, table):
        self.component = int(component)
        parents = tuple(int(p) for p in parents)
        if len(set(parents)) != len(parents):
            raise ValueError("duplicate parent indices")
        if any(b <= a for a, b in zip(parents, parents[1:])):
            raise ValueError("parents must be strictly increasing")
        if self.component in parents:
            raise ValueError("component cannot be its own parent")
        self.parents = parents
        table = np.array(table, dtype=float)
        if table.ndim != 3 or table.shape[1] != table.shape[2]:
            raise ValueError("table must have shape (n_instantiations, S, S)")
        table.flags.writeable = False
        self.table = table

    @property
    def n_states(self) -> int:
        return self.table.shape[1]

    @property
    def n_instantiations(self) -> int:
        return self.table.shape[0]


class _AveragingTables:
    """Flattened per-component rate tables used by the averaging operations.

    ``flat`` is ``(n_u, S*S)``; ``log_flat`` its elementwise log (−inf where
    a rate is zero).  ``cond[m]`` regroups the table by the m-th parent:
    shape ``(c_m, n_rest, S*S)`` with the remaining parents kept in ascending
    order, so a conditional average is a single tensor contraction.
    """

    def __init__(self, crm: ConditionalRateMatrix, parent_cards):
        s = crm.n_states
        n_u = crm.n_instantiations
        self.parent_cards = tuple(parent_cards)
        self.n_states = s
        table_nd = crm.table.reshape(*self.parent_cards, s, s)
        self.flat = np.ascontiguousarray(crm.table.reshape(n_u, s * s))
        self.flat_diag = np.ascontiguousarray(
            crm.table[:, np.arange(s), np.arange(s)]
        )
        off = crm.table.copy()
        off[:, np.arange(s), np.arange(s)] = 1.0  # keep log zero on the diagonal
        self.has_zero_rate = bool(np.any(off <= 0.0))
        # Zero rates are floored before the log so geometric averages reach
        # the zero-rate limit without propagating infinities.
        off = np.maximum(off, 1e-300)
        self.log_flat = np.ascontiguousarray(np.log(off).reshape(n_u, s * s))
        # Conditioned tables: axis order (own parent state, entries, rest)
        # so a conditional average is a single matrix-vector product.
        self.cond = []
        self.cond_diag = []
        self.log_cond = []
        off_nd = off.reshape(*self.parent_cards, s, s)
        log_nd = np.log(off_nd)
        for m in range(len(self.parent_cards)):
            c_m = self.parent_cards[m]
            n_rest = n_u // c_m
            moved = np.moveaxis(table_nd, m, 0).reshape(c_m, n_rest, s * s)
            self.cond.append(np.ascontiguousarray(moved.transpose(0, 2, 1)))
            diag = moved.reshape(c_m, n_rest, s, s)[:, :, np.arange(s), np.arange(s)]
            self.cond_diag.append(np.ascontiguousarray(diag.transpose(0, 2, 1)))
            lmoved = np.moveaxis(log_nd, m, 0).reshape(c_m, n_rest, s * s)
            self.log_cond.append(np.ascontiguousarray(lmoved.transpose(0, 2, 1)))


class CtbnModel:
    """A multi-component Markov model with conditional rates.

    Immutable after construction; child lists are derived as the transpose
    of the parent lists.  Cycles between distinct components are allowed.
    """

    def __init__(self, state_space: StateSpace, rate_matrices, component_names=None):
        self.state_space = state_space
        d = state_space.num_components
        rate_matrices = tuple(rate_matrices)
        if len(rate_matrices) != d:
            raise ValueError("need exactly one rate matrix per component")
        for i, crm in enumerate(rate_matrices):
            if crm.component != i:
                raise ValueError(f"rate matrix at position {i} is for component {crm.component}")
            if crm.n_states != state_space.cardinalities[i]:
                raise ValueError(f"component {i}: state count mismatch")
            if any(p >= d or p < 0 for p in crm.parents):
                raise ValueError(f"component {i}: parent index out of range")
            expected = math.prod(state_space.cardinalities[p] for p in crm.parents)
            if crm.n_instantiations != expected:
                raise ValueError(
                    f"component {i}: expected {expected} parent instantiations,"
                    f" got {crm.n_instantiations}"
                )
        self.rate_matrices = rate_matrices
        if component_names is None:
            component_names = tuple(f"X{i}" for i in range(d))
        else:
            component_names = tuple(str(n) for n in component_names)
            if len(component_names) != d or len(set(component_names)) != d:
                raise ValueError("component names must be unique, one per component")
        self.component_names = component_names
        children = [[] for _ in range(d)]
        for i, crm in enumerate(rate_matrices):
            for p in crm.parents:
                children[p].append(i)
        self.children = tuple(tuple(c) for c in children)
        self._parent_strides = tuple(
            _mixed_radix_strides([state_space.cardinalities[p] for p in crm.parents])
            if crm.parents
            else np.zeros(0, dtype=np.int64)
            for crm in rate_matrices
        )
        self._tables = None

    @property
    def num_components(self) -> int:
        return self.state_space.num_components

    def parents(self, i: int) -> tuple[int, ...]:
        return self.rate_matrices[i].parents

    def parent_cards(self, i: int) -> tuple[int, ...]:
        return tuple(self.state_space.cardinalities[p] for p in self.parents(i))

    def parent_index(self, i: int, u) -> int:
        """Mixed-radix index of a full parent instantiation of component i."""
        u = tuple(u)
        parents = self.parents(i)
        if len(u) != len(parents):
            raise ValueError(
                f"component {i} has {len(parents)} parents, got instantiation of arity {len(u)}"
            )
        idx = 0
        for s, p, stride in zip(u, parents, self._parent_strides[i]):
            c = self.state_space.cardinalities[p]
            if not 0 <= s < c:
                raise ValueError(f"parent state {s} out of range [0, {c})")
            idx += s * int(stride)
        return idx

    def parent_instantiation(self, i: int, index: int) -> tuple[int, ...]:
        out = []
        for stride, p in zip(self._parent_strides[i], self.parents(i)):
            out.append(int(index // int(stride)))
            index %= int(stride)
        return tuple(out)

    def tables(self, i: int) -> _AveragingTables:
        """Cached flattened rate tables for the averaging operations."""
        if self._tables is None:
            self._tables = [
                _AveragingTables(crm, self.parent_cards(j))
                for j, crm in enumerate(self.rate_matrices)
            ]
        return self._tables[i]

    def max_rate(self) -> float:
        return max(
            float(np.nanmax(np.abs(crm.table))) for crm in self.rate_matrices
        )


def conditional_rate(model: CtbnModel, i: int, x: int, y: int, u) -> float:
    """Rate entry ``q[x, y]`` of component ``i`` under parent instantiation ``u``."""
    crm = model.rate_matrices[i]
    s = crm.n_states
    if not (0 <= x < s and 0 <= y < s):
        raise ValueError(f"state index out of range [0, {s})")
    return float(crm.table[model.parent_index(i, u), x, y])


def validate_model(model: CtbnModel) -> list[str]:
    """Check numeric invariants; returns human-readable violations.

    Structural impossibilities (wrong arities, out-of-range parents) are
    rejected at construction time; everything here is data-level.
    """
    violations = []
    for i, crm in enumerate(model.rate_matrices):
        name = model.component_names[i]
        for u_idx in range(crm.n_instantiations):
            u = model.parent_instantiation(i, u_idx)
            key = _instantiation_key(model, i, u)
            block = crm.table[u_idx]
            if np.any(np.isnan(block)):
                violations.append(
                    f"component {name}: parent state ({key}): missing or NaN entries"
                )
                continue
            for x in range(crm.n_states):
                row = block[x]
                for y in range(crm.n_states):
                    if y != x and row[y] < 0:
                        violations.append(
                            f"component {name}: parent state ({key}): "
                            f"negative off-diagonal q[{x},{y}] = {row[y]!r}"
                        )
                rs = float(row.sum())
                if abs(rs) > ROW_SUM_TOL * max(1.0, float(np.abs(row).max())):
                    violations.append(
                        f"component {name}: parent state ({key}): "
                        f"row {x} sums to {rs!r}"
                    )
    return violations


class JointRateMatrix:
    """Sparse rate matrix over the joint state space."""

    def __init__(self, matrix, state_space: StateSpace):
        matrix = sparse.csr_matrix(matrix)
        matrix.eliminate_zeros()
        self.matrix = matrix
        self.matrix_t = sparse.csr_matrix(matrix.T)
        self.state_space = state_space

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def offdiagonal_entries(self):
        """Arrays ``(rows, cols, rates)`` of the off-diagonal support."""
        coo = self.matrix.tocoo()
        mask = coo.row != coo.col
        return coo.row[mask], coo.col[mask], coo.data[mask]


def amalgamate(
    model: CtbnModel, max_joint_size: int = DEFAULT_JOINT_SIZE_CAP
) -> JointRateMatrix:
    """Assemble the joint rate matrix from the conditional rate tables.

    Off-diagonal entries exist only between joint states differing in exactly
    one component; the diagonal is the sum of the per-component diagonals.
    """
    space = model.state_space
    n = space.joint_size
    if n > max_joint_size:
        raise StateSpaceTooLargeError(
            f"state space too large: {n} joint states exceeds cap {max_joint_size}"
        )
    states = space.enumerate_states()
    all_idx = np.arange(n, dtype=np.int64)
    joint_strides = _mixed_radix_strides(space.cardinalities)

    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for i in range(model.num_components):
        crm = model.rate_matrices[i]
        parents = crm.parents
        if parents:
            u_idx = states[:, parents] @ model._parent_strides[i]
        else:
            u_idx = np.zeros(n, dtype=np.int64)
        x_i = states[:, i]
        rates_from = crm.table[u_idx, x_i, :]  # (n, S_i)
        diag += rates_from[all_idx, x_i]
        for y in range(crm.n_states):
            mask = x_i != y
            targets = all_idx[mask] + (y - x_i[mask]) * int(joint_strides[i])
            rows.append(all_idx[mask])
            cols.append(targets)
            vals.append(rates_from[mask, y])
    rows.append(all_idx)
    cols.append(all_idx)
    vals.append(diag)
    matrix = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return JointRateMatrix(matrix, space)


def build_ising_chain(d: int, beta: float, tau: float) -> CtbnModel:
    """Chain of ±1 spins where each prefers to match its neighbors.

    The flip rate of component i toward state ``y`` given neighbor spins
    ``x_j`` is ``tau / (1 + exp(-2 * y * beta * sum_j x_j))``.
    """
    if d < 1:
        raise ValueError("need at least one component")
    if tau <= 0:
        raise ValueError("rate parameter must be positive")
    space = StateSpace([2] * d, labels=[("-", "+")] * d)
    spin = np.array([-1.0, 1.0])
    crms = []
    for i in range(d):
        parents = tuple(p for p in (i - 1, i + 1) if 0 <= p < d)
        n_u = 2 ** len(parents)
        table = np.zeros((n_u, 2, 2))
        for u_idx in range(n_u):
            u = np.array(
                np.unravel_index(u_idx, (2,) * len(parents)), dtype=int
            ).ravel()
            field = spin[u].sum() if len(parents) else 0.0
            for x in range(2):
                y = 1 - x
                rate = tau / (1.0 + math.exp(-2.0 * spin[y] * beta * field))
                table[u_idx, x, y] = rate
                table[u_idx, x, x] = -rate
        crms.append(ConditionalRateMatrix(i, parents, table))
    return CtbnModel(space, crms)


class ComponentEvidence:
    """Evidence on one component over the interval.

    ``start`` is an observed state index or a prior distribution; ``end`` is
    an observed state index or None (unobserved).  A fully observed
    trajectory is a right-continuous step function given as breakpoints
    ``(t, state)`` starting at t=0; it overrides both endpoint conditions.
    """

    def __init__(self, start, end=None, trajectory=None):
        if isinstance(start, (int, np.integer)):
            self.start = int(start)
        else:
            prior = np.array(start, dtype=float)
            prior.flags.writeable = False
            self.start = prior
        self.end = None if end is None else int(end)
        if trajectory is not None:
            trajectory = tuple((float(t), int(s)) for t, s in trajectory)
        self.trajectory = trajectory

    @property
    def start_observed(self) -> bool:
        return isinstance(self.start, int)

    def start_vector(self, n_states: int) -> np.ndarray:
        if self.start_observed:
            v = np.zeros(n_states)
            v[self.start] = 1.0
            return v
        return np.array(self.start, dtype=float)

    def trajectory_state(self, t: float) -> int:
        ts = [b[0] for b in self.trajectory]
        import bisect

        return self.trajectory[bisect.bisect_right(ts, t) - 1][1]


class Evidence:
    """End-point (and optionally trajectory) evidence for every component."""

    def __init__(self, T: float, components):
        self.T = float(T)
        if self.T <= 0:
            raise ValueError("horizon must be positive")
        self.components = tuple(components)

    @classmethod
    def from_endpoints(cls, T, start_states, end_states) -> "Evidence":
        return cls(
            T,
            [
                ComponentEvidence(s, e)
                for s, e in zip(start_states, end_states)
            ],
        )

    def validate(self, model: CtbnModel) -> list[str]:
        violations = []
        if len(self.components) != model.num_components:
            return [
                f"evidence covers {len(self.components)} components,"
                f" model has {model.num_components}"
            ]
        for i, ev in enumerate(self.components):
            card = model.state_space.cardinalities[i]
            name = model.component_names[i]
            if ev.start_observed:
                if not 0 <= ev.start < card:
                    violations.append(f"component {name}: start state out of range")
            else:
                prior = np.asarray(ev.start)
                if prior.shape != (card,):
                    violations.append(f"component {name}: prior has wrong length")
                elif np.any(prior < 0) or abs(prior.sum() - 1.0) > PRIOR_SUM_TOL:
                    violations.append(
                        f"component {name}: prior must be nonnegative and sum to 1"
                    )
            if ev.end is not None and not 0 <= ev.end < card:
                violations.append(f"component {name}: end state out of range")
            if ev.trajectory is not None:
                ts = [t for t, _ in ev.trajectory]
                ss = [s for _, s in ev.trajectory]
                if not ts or ts[0] != 0.0:
                    violations.append(
                        f"component {name}: trajectory must start at t=0"
                    )
                if any(b <= a for a, b in zip(ts, ts[1:])) or (
                    ts and ts[-1] > self.T
                ):
                    violations.append(
                        f"component {name}: trajectory times must increase within [0, T]"
                    )
                if any(not 0 <= s < card for s in ss):
                    violations.append(
                        f"component {name}: trajectory state out of range"
                    )
        return violations

    def observed_endpoint_indices(self, space: StateSpace):
        """Joint (start, end) indices when every component is observed."""
        starts, ends = [], []
        for ev in self.components:
            if not ev.start_observed or ev.end is None or ev.trajectory is not None:
                return None
            starts.append(ev.start)
            ends.append(ev.end)
        return space.joint_index(starts), space.joint_index(ends)


def _instantiation_key(model: CtbnModel, i: int, u) -> str:
    labels = [
        model.state_space.labels[p][s] for p, s in zip(model.parents(i), u)
    ]
    return ",".join(labels)


def model_to_dict(model: CtbnModel) -> dict:
    components = []
    for i, crm in enumerate(model.rate_matrices):
        rates = {}
        for u_idx in range(crm.n_instantiations):
            u = model.parent_instantiation(i, u_idx)
            rates[_instantiation_key(model, i, u)] = crm.table[u_idx].tolist()
        components.append(
            {
                "name": model.component_names[i],
                "states": list(model.state_space.labels[i]),
                "parents": [model.component_names[p] for p in crm.parents],
                "rates": rates,
            }
        )
    return {"schema_version": 1, "components": components}


def model_from_dict(data: dict) -> CtbnModel:
    components = data["components"]
    names = [c["name"] for c in components]
    name_to_idx = {n: i for i, n in enumerate(names)}
    if len(name_to_idx) != len(names):
        raise ValueError("duplicate component names")
    cards = [len(c["states"]) for c in components]
    labels = [tuple(c["states"]) for c in components]
    space = StateSpace(cards, labels)
    crms = []
    for i, comp in enumerate(components):
        try:
            parents = tuple(sorted(name_to_idx[p] for p in comp["parents"]))
        except KeyError as exc:
            raise ValueError(f"unknown parent component {exc}") from exc
        parent_labels = [labels[p] for p in parents]
        n_u = math.prod(len(pl) for pl in parent_labels) if parents else 1
        s = cards[i]
        table = np.full((n_u, s, s), np.nan)
        strides = _mixed_radix_strides([len(pl) for pl in parent_labels])
        for key, block in comp["rates"].items():
            parts = key.split(",") if key else []
            if len(parts) != len(parents):
                raise ValueError(
                    f"component {comp['name']}: instantiation key '{key}' has wrong arity"
                )
            idx = 0
            for part, pl, stride in zip(parts, parent_labels, strides):
                if part not in pl:
                    raise ValueError(
                        f"component {comp['name']}: unknown parent state '{part}'"
                    )
                idx += pl.index(part) * int(stride)
            block = np.asarray(block, dtype=float)
            if block.shape != (s, s):
                raise ValueError(
                    f"component {comp['name']}: rate block for '{key}' has wrong shape"
                )
            table[idx] = block
        crms.append(ConditionalRateMatrix(i, parents, table))
    return CtbnModel(space, crms, component_names=names)


def save_model(model: CtbnModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2)


def load_model(path) -> CtbnModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def evidence_to_dict(evidence: Evidence, model: CtbnModel) -> dict:
    comps = []
    for i, ev in enumerate(evidence.components):
        labels = model.state_space.labels[i]
        entry = {}
        if ev.start_observed:
            entry["start"] = labels[ev.start]
        else:
            entry["start"] = {"prior": list(np.asarray(ev.start, dtype=float))}
        entry["end"] = None if ev.end is None else labels[ev.end]
        entry["trajectory"] = (
            None
            if ev.trajectory is None
            else [[t, labels[s]] for t, s in ev.trajectory]
        )
        comps.append(entry)
    return {"schema_version": 1, "T": evidence.T, "components": comps}


def evidence_from_dict(data: dict, model: CtbnModel) -> Evidence:
    comps = []
    for i, entry in enumerate(data["components"]):
        labels = model.state_space.labels[i]
        start = entry["start"]
        if isinstance(start, dict):
            start = np.asarray(start["prior"], dtype=float)
        else:
            start = labels.index(start)
        end = entry.get("end")
        end = None if end is None else labels.index(end)
        traj = entry.get("trajectory")
        if traj is not None:
            traj = [(float(t), labels.index(s)) for t, s in traj]
        comps.append(ComponentEvidence(start, end, traj))
    return Evidence(data["T"], comps)


def save_evidence(evidence: Evidence, model: CtbnModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(evidence_to_dict(evidence, model), fh, indent=2)


def load_evidence(path, model: CtbnModel) -> Evidence:
    with open(path, encoding="utf-8") as fh:
        return evidence_from_dict(json.load(fh), model)
