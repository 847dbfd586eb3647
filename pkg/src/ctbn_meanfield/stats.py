"""Expected sufficient statistics containers and the comparison metric.

Occupancy statistics are expected times spent in states; transition
statistics are expected numbers of jumps.  Both appear in joint form (over
the amalgamated chain) and in factored per-component form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["FactoredStats", "relative_stats_error"]


@dataclass
class FactoredStats:
    """Per-component sufficient statistics.

    ``occupancy[i]`` has shape ``(S_i,)`` and sums to the horizon;
    ``transitions[i]`` has shape ``(S_i, S_i)`` with zero diagonal.  The
    optional parent-resolved variants carry one leading axis over parent
    instantiations of the component.
    """

    occupancy: list[np.ndarray]
    transitions: list[np.ndarray]
    parent_occupancy: list[np.ndarray] | None = None
    parent_transitions: list[np.ndarray] | None = None

    @property
    def num_components(self) -> int:
        return len(self.occupancy)

    def flatten(self) -> np.ndarray:
        """Occupancies and off-diagonal transition counts as one vector."""
        parts = []
        for occ, trans in zip(self.occupancy, self.transitions):
            parts.append(occ)
            s = trans.shape[0]
            mask = ~np.eye(s, dtype=bool)
            parts.append(trans[mask])
        return np.concatenate(parts)


def relative_stats_error(
    approx: FactoredStats, exact: FactoredStats, floor: float = 1e-8
):
    """Sum of per-statistic relative errors, skipping tiny denominators.

    Returns ``(error, n_excluded)`` where statistics whose exact value falls
    below ``floor`` are left out of the sum and counted separately.
    """
    a = approx.flatten()
    b = exact.flatten()
    if a.shape != b.shape:
        raise ValueError("statistics vectors have different shapes")
    keep = np.abs(b) >= floor
    err = float(np.sum(np.abs(a[keep] - b[keep]) / np.abs(b[keep])))
    return err, int(np.sum(~keep))
