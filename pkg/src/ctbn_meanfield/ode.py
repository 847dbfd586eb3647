"""Adaptive ODE integration and quadrature.

Embedded Runge-Kutta-Fehlberg 4(5) stepping with cubic-Hermite dense output,
a renormalizing driver for linear systems whose solutions span many orders of
magnitude, and adaptive Simpson quadrature in scalar and batched form.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "IntegratorConfig",
    "OdeSolution",
    "ScaledSolution",
    "StepUnderflowError",
    "QuadratureError",
    "integrate",
    "integrate_scaled",
    "evaluate",
    "quadrature",
    "quadrature_batch",
]


class StepUnderflowError(RuntimeError):
    """Adaptive step size collapsed below the configured minimum."""

    def __init__(self, message: str, t: float):
        super().__init__(message)
        self.t = t


class QuadratureError(RuntimeError):
    """Adaptive quadrature could not meet its tolerance."""

    def __init__(self, message: str, interval: tuple[float, float]):
        super().__init__(message)
        self.interval = interval


@dataclass(frozen=True)
class IntegratorConfig:
    """Step-control parameters for :func:`integrate`.

    ``max_step_fraction`` and ``min_step_fraction`` are relative to the
    length of the integration interval.
    """

    rtol: float = 1e-6
    atol: float = 1e-9
    max_step_fraction: float = 1.0 / 16.0
    min_step_fraction: float = 1e-12

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.min_step_fraction < self.max_step_fraction:
            raise ValueError("need 0 < min step < max step")


DEFAULT_CONFIG = IntegratorConfig()

# Fehlberg 4(5) tableau.  The fifth-order solution is propagated; the
# difference to the embedded fourth-order solution drives step control.
_RK_C = (0.25, 0.375, 12.0 / 13.0, 1.0, 0.5)
_RK_A = (
    np.array([0.25]),
    np.array([3.0 / 32.0, 9.0 / 32.0]),
    np.array([1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0]),
    np.array([439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0]),
    np.array([-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0]),
)
_RK_B5 = np.array(
    [16.0 / 135.0, 0.0, 6656.0 / 12825.0, 28561.0 / 56430.0, -9.0 / 50.0, 2.0 / 55.0]
)
_RK_ERR = np.array(
    [1.0 / 360.0, 0.0, -128.0 / 4275.0, -2197.0 / 75240.0, 1.0 / 50.0, 2.0 / 55.0]
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
_ENDPOINT_SLOP = 1e-12


class OdeSolution:
    """Dense-output solution on an interval.

    Knot times are stored in ascending order together with the state and its
    derivative at each knot; values between knots come from cubic Hermite
    interpolation, so evaluating at a knot reproduces the stored value
    exactly and the interpolant is C^1 inside each step.
    """

    __slots__ = ("ts", "ys", "fs", "direction", "_tlist", "_slop")

    def __init__(self, ts, ys, fs, direction="forward"):
        ts = np.asarray(ts, dtype=float)
        ys = np.asarray(ys, dtype=float)
        fs = np.asarray(fs, dtype=float)
        if ts.ndim != 1 or len(ts) < 2:
            raise ValueError("need at least two knots")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("knot times must be strictly increasing")
        if ys.shape != (len(ts),) + ys.shape[1:] or ys.shape != fs.shape:
            raise ValueError("inconsistent knot array shapes")
        if direction not in ("forward", "backward"):
            raise ValueError("direction must be 'forward' or 'backward'")
        for a in (ts, ys, fs):
            a.flags.writeable = False
        self.ts = ts
        self.ys = ys
        self.fs = fs
        self.direction = direction
        self._tlist = ts.tolist()
        self._slop = _ENDPOINT_SLOP * max(1.0, float(ts[-1] - ts[0]))

    @property
    def t_min(self) -> float:
        return float(self.ts[0])

    @property
    def t_max(self) -> float:
        return float(self.ts[-1])

    @property
    def dim(self) -> int:
        return self.ys.shape[1]

    def initial_value(self) -> np.ndarray:
        """State at the time integration started from."""
        return self.ys[0] if self.direction == "forward" else self.ys[-1]

    def final_value(self) -> np.ndarray:
        """State at the time integration ran to."""
        return self.ys[-1] if self.direction == "forward" else self.ys[0]

    def _locate(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)
        slop = _ENDPOINT_SLOP * max(1.0, self.t_max - self.t_min)
        if np.any(tt < self.t_min - slop) or np.any(tt > self.t_max + slop):
            raise ValueError(
                f"time outside solution span [{self.t_min}, {self.t_max}]"
            )
        tt = np.clip(tt, self.t_min, self.t_max)
        idx = np.searchsorted(self.ts, tt, side="right") - 1
        idx = np.clip(idx, 0, len(self.ts) - 2)
        h = self.ts[idx + 1] - self.ts[idx]
        s = (tt - self.ts[idx]) / h
        return scalar, idx, h, s

    def evaluate(self, t):
        """State vector at time ``t`` (scalar or 1-D array of times)."""
        scalar, idx, h, s = self._locate(t)
        y0, y1 = self.ys[idx], self.ys[idx + 1]
        f0, f1 = self.fs[idx], self.fs[idx + 1]
        s = s[:, None]
        h = h[:, None]
        oms = 1.0 - s
        # Difference form keeps constant solutions exactly constant.
        h01 = s * s * (3.0 - 2.0 * s)
        out = y0 + h01 * (y1 - y0) + (h * s * oms) * (oms * f0 - s * f1)
        return out[0] if scalar else out

    def evaluate_one(self, t: float) -> np.ndarray:
        """Fast scalar-time evaluation (hot path of the RHS closures)."""
        tlist = self._tlist
        if t <= tlist[0]:
            if t < tlist[0] - self._slop:
                raise ValueError(f"time {t!r} outside solution span")
            return self.ys[0]
        if t >= tlist[-1]:
            if t > tlist[-1] + self._slop:
                raise ValueError(f"time {t!r} outside solution span")
            return self.ys[-1]
        i = bisect.bisect_right(tlist, t) - 1
        t0 = tlist[i]
        if t == t0:
            return self.ys[i]
        h = tlist[i + 1] - t0
        s = (t - t0) / h
        oms = 1.0 - s
        h01 = s * s * (3.0 - 2.0 * s)
        y0 = self.ys[i]
        return (
            y0
            + h01 * (self.ys[i + 1] - y0)
            + (h * s * oms) * (oms * self.fs[i] - s * self.fs[i + 1])
        )

    def evaluate_derivative(self, t):
        """Time derivative of the interpolant at ``t``."""
        scalar, idx, h, s = self._locate(t)
        y0, y1 = self.ys[idx], self.ys[idx + 1]
        f0, f1 = self.fs[idx], self.fs[idx + 1]
        s = s[:, None]
        h = h[:, None]
        d01 = 6.0 * s * (1.0 - s)
        d10 = 3.0 * s * s - 4.0 * s + 1.0
        d11 = 3.0 * s * s - 2.0 * s
        out = d01 * (y1 - y0) / h + d10 * f0 + d11 * f1
        return out[0] if scalar else out


def evaluate(solution: OdeSolution, t):
    """Evaluate a dense-output solution at time(s) ``t``."""
    return solution.evaluate(t)


def integrate(
    rhs,
    t_start: float,
    t_end: float,
    y0,
    config: IntegratorConfig | None = None,
    _stop_lo: float | None = None,
    _stop_hi: float | None = None,
) -> OdeSolution:
    """Integrate ``dy/dt = rhs(t, y)`` from ``t_start`` to ``t_end``.

    Backward integration (``t_end < t_start``) is supported natively.  Local
    error per step is controlled against ``atol + rtol * |y|`` with the usual
    safety factor 0.9 and growth exponent 1/5.

    The private ``_stop_lo``/``_stop_hi`` bounds make the integrator return
    early (with a truncated solution) once ``max|y|`` leaves the bracket;
    :func:`integrate_scaled` uses this to renormalize.

    Raises
    ------
    StepUnderflowError
        If error control forces the step below the configured minimum,
        which typically signals stiffness beyond the solver's reach.
    """
    if config is None:
        config = DEFAULT_CONFIG
    t_start = float(t_start)
    t_end = float(t_end)
    if t_end == t_start:
        raise ValueError("integration interval is empty")
    y = np.array(y0, dtype=float)
    if y.ndim != 1:
        raise ValueError("y0 must be one-dimensional")

    direction = 1.0 if t_end > t_start else -1.0
    span = abs(t_end - t_start)
    max_step = config.max_step_fraction * span
    min_step = config.min_step_fraction * span

    t = t_start
    f = np.asarray(rhs(t, y), dtype=float)
    ts = [t]
    ys = [y.copy()]
    fs = [f.copy()]

    # Initial step from the standard curvature-free heuristic, capped.
    scale = config.atol + config.rtol * np.abs(y)
    d0 = math.sqrt(float(np.mean((y / scale) ** 2)))
    d1 = math.sqrt(float(np.mean((f / scale) ** 2)))
    h = max_step if d1 == 0.0 else min(max_step, max(0.01 * d0 / d1, 100.0 * min_step))

    k = np.empty((6, y.size))
    while True:
        remaining = abs(t_end - t)
        if remaining <= 0.0:
            break
        h = min(h, remaining)
        last = h >= remaining
        # A final sliver shorter than the minimum step is simply taken;
        # underflow only counts when error control forces it mid-interval.
        if h < min_step and not last:
            raise StepUnderflowError(
                f"step size underflow at t={t!r} (h={h!r})", t
            )
        dh = direction * h

        k[0] = f
        for s in range(1, 6):
            tv = t + _RK_C[s - 1] * dh
            yv = y + dh * (_RK_A[s - 1] @ k[:s])
            k[s] = rhs(tv, yv)
        y_new = y + dh * (_RK_B5 @ k)
        err = dh * (_RK_ERR @ k)
        scale = config.atol + config.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = math.sqrt(float(np.mean((err / scale) ** 2)))

        if err_norm <= 1.0:
            t_new = t_end if last else t + dh
            f_new = np.asarray(rhs(t_new, y_new), dtype=float)
            ts.append(t_new)
            ys.append(y_new.copy())
            fs.append(f_new.copy())
            t, y, f = t_new, y_new, f_new
            if _stop_lo is not None or _stop_hi is not None:
                m = float(np.max(np.abs(y)))
                if (_stop_hi is not None and m > _stop_hi) or (
                    _stop_lo is not None and 0.0 < m < _stop_lo
                ):
                    break
            factor = (
                _MAX_FACTOR
                if err_norm == 0.0
                else min(_MAX_FACTOR, max(_MIN_FACTOR, _SAFETY * err_norm**-0.2))
            )
        else:
            factor = max(_MIN_FACTOR, _SAFETY * err_norm**-0.2)
        h = min(h * factor, max_step)

    ts = np.asarray(ts)
    ys = np.asarray(ys)
    fs = np.asarray(fs)
    if direction < 0:
        ts, ys, fs = ts[::-1], ys[::-1], fs[::-1]
        return OdeSolution(ts, ys, fs, direction="backward")
    return OdeSolution(ts, ys, fs, direction="forward")


class ScaledSolution:
    """Piecewise dense-output solution with per-segment log scale factors.

    The represented function is ``segment.evaluate(t) * exp(log_scale)`` for
    the segment containing ``t``.  Renormalization events are recorded in
    ``ledger`` as ``(time, log_factor)`` pairs.
    """

    __slots__ = ("segments", "log_scales", "ledger", "_starts", "_starts_list")

    def __init__(self, segments, log_scales, ledger=None):
        if not segments:
            raise ValueError("need at least one segment")
        order = np.argsort([seg.t_min for seg in segments])
        self.segments = [segments[i] for i in order]
        self.log_scales = [float(log_scales[i]) for i in order]
        for a, b in zip(self.segments, self.segments[1:]):
            if not math.isclose(a.t_max, b.t_min, rel_tol=0.0, abs_tol=1e-9 * max(1.0, abs(a.t_max))):
                raise ValueError("segments must be contiguous")
        self.ledger = list(ledger) if ledger is not None else []
        # Right-open bins keyed by segment start; last segment owns its end.
        self._starts = np.array([seg.t_min for seg in self.segments[1:]])

    @classmethod
    def single(cls, solution: OdeSolution) -> "ScaledSolution":
        return cls([solution], [0.0])

    @property
    def t_min(self) -> float:
        return self.segments[0].t_min

    @property
    def t_max(self) -> float:
        return self.segments[-1].t_max

    @property
    def dim(self) -> int:
        return self.segments[0].dim

    def knots(self) -> np.ndarray:
        """Union of all segment knot times."""
        return np.unique(np.concatenate([seg.ts for seg in self.segments]))

    def scaled_by(self, log_factor: float) -> "ScaledSolution":
        """Same function multiplied by ``exp(log_factor)``."""
        return ScaledSolution(
            self.segments,
            [ls + log_factor for ls in self.log_scales],
            self.ledger,
        )

    def evaluate_one(self, t: float):
        """Fast scalar-time ``(values, log_scale)`` lookup."""
        if len(self.segments) == 1:
            return self.segments[0].evaluate_one(t), self.log_scales[0]
        si = int(np.searchsorted(self._starts, t, side="right"))
        return self.segments[si].evaluate_one(t), self.log_scales[si]

    def evaluate_scaled(self, t):
        """Return ``(values, log_scales)`` with true value = v * exp(l)."""
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)
        if len(self.segments) == 1:
            vals = np.atleast_2d(self.segments[0].evaluate(tt))
            logs = np.full(len(tt), self.log_scales[0])
        else:
            seg_idx = np.searchsorted(self._starts, tt, side="right")
            vals = np.empty((len(tt), self.dim))
            logs = np.empty(len(tt))
            for si in np.unique(seg_idx):
                mask = seg_idx == si
                vals[mask] = np.atleast_2d(self.segments[si].evaluate(tt[mask]))
                logs[mask] = self.log_scales[si]
        if scalar:
            return vals[0], float(logs[0])
        return vals, logs

    def evaluate(self, t):
        """True (unscaled) values; may overflow for extreme ledgers."""
        vals, logs = self.evaluate_scaled(t)
        if np.ndim(logs) == 0:
            return vals * math.exp(logs)
        return vals * np.exp(logs)[:, None]


def integrate_scaled(
    rhs,
    t_start: float,
    t_end: float,
    y0,
    config: IntegratorConfig | None = None,
    lo: float | None = None,
    hi: float = 1e100,
) -> ScaledSolution:
    """Like :func:`integrate` but renormalizes whenever ``max|y|`` leaves
    ``[lo, hi]``, recording the accumulated log scale in the ledger.

    ``lo`` defaults to ``atol / rtol``, the magnitude below which the step
    controller stops tracking the solution in relative terms; renormalizing
    there preserves relative accuracy across arbitrarily deep decays.
    """
    if config is None:
        config = DEFAULT_CONFIG
    if lo is None:
        lo = config.atol / config.rtol
    segments = []
    logs = []
    ledger = []
    t = float(t_start)
    y = np.array(y0, dtype=float)
    log_scale = 0.0
    forward = t_end > t_start
    while True:
        sol = integrate(rhs, t, t_end, y, config, _stop_lo=lo, _stop_hi=hi)
        segments.append(sol)
        logs.append(log_scale)
        reached = sol.t_max if forward else sol.t_min
        if reached == t_end:
            break
        y = sol.final_value()
        m = float(np.max(np.abs(y)))
        if m == 0.0:
            raise StepUnderflowError(
                f"solution collapsed to zero at t={reached!r}", reached
            )
        y = y / m
        log_scale += math.log(m)
        ledger.append((reached, math.log(m)))
        t = reached
    return ScaledSolution(segments, logs, ledger)


def _simpson(a, b, fa, fm, fb):
    return (b - a) / 6.0 * (fa + 4.0 * fm + fb)


def quadrature(g, t0: float, t1: float, tol: float = 1e-8, max_depth: int = 50) -> float:
    """Adaptive Simpson integral of a scalar function over ``[t0, t1]``.

    The tolerance is applied in combined absolute/relative form,
    ``tol * (1 + |I|)``.  Raises :class:`QuadratureError` carrying the worst
    subinterval when the recursion depth cap is exceeded.
    """
    t0 = float(t0)
    t1 = float(t1)
    if t0 == t1:
        return 0.0
    fa, fm, fb = g(t0), g((t0 + t1) / 2.0), g(t1)
    s_whole = _simpson(t0, t1, fa, fm, fb)
    eps = 15.0 * tol * (1.0 + abs(s_whole))

    total = 0.0
    worst = None
    # Stack of (a, b, fa, fm, fb, S, eps, depth).
    stack = [(t0, t1, fa, fm, fb, s_whole, eps, 0)]
    while stack:
        a, b, fa, fm, fb, s, eps, depth = stack.pop()
        m = (a + b) / 2.0
        lm = (a + m) / 2.0
        rm = (m + b) / 2.0
        flm, frm = g(lm), g(rm)
        s_l = _simpson(a, m, fa, flm, fm)
        s_r = _simpson(m, b, fm, frm, fb)
        delta = s_l + s_r - s
        if abs(delta) <= eps:
            total += s_l + s_r + delta / 15.0
        elif depth >= max_depth:
            total += s_l + s_r + delta / 15.0
            if worst is None or abs(delta) > worst[0]:
                worst = (abs(delta), (a, b))
        else:
            stack.append((a, m, fa, flm, fm, s_l, eps / 2.0, depth + 1))
            stack.append((m, b, fm, frm, fb, s_r, eps / 2.0, depth + 1))
    if worst is not None:
        raise QuadratureError(
            f"quadrature depth cap exceeded; worst subinterval "
            f"{worst[1]} (residual {worst[0]:.3e})",
            worst[1],
        )
    return total


def quadrature_batch(
    f,
    t0: float,
    t1: float,
    tol: float = 1e-8,
    initial_points=None,
    max_depth: int = 48,
):
    """Adaptive Simpson integral of a vector-valued function.

    ``f`` maps an array of times ``(nt,)`` to values ``(nt, m)`` and is
    evaluated in batches, one call per refinement level.  ``initial_points``
    seeds the subdivision (solver knots are a good choice).  Returns
    ``(integral (m,), error_estimate (m,))``.
    """
    t0 = float(t0)
    t1 = float(t1)
    if t0 == t1:
        probe = np.atleast_2d(f(np.array([t0])))
        return np.zeros(probe.shape[1]), np.zeros(probe.shape[1])
    sign = 1.0
    if t1 < t0:
        t0, t1 = t1, t0
        sign = -1.0
    width = t1 - t0

    if initial_points is None:
        pts = np.array([t0, t1])
    else:
        pts = np.asarray(initial_points, dtype=float)
        pts = pts[(pts > t0) & (pts < t1)]
        pts = np.unique(np.concatenate([[t0, t1], pts]))
        keep = np.concatenate([[True], np.diff(pts) > 1e-14 * width])
        pts = pts[keep]
        if pts[-1] != t1:
            pts = np.append(pts, t1)

    mids = 0.5 * (pts[:-1] + pts[1:])
    vals = np.atleast_2d(f(np.concatenate([pts, mids])))
    m_out = vals.shape[1]
    f_pts, f_mids = vals[: len(pts)], vals[len(pts):]

    a = pts[:-1]
    b = pts[1:]
    fa = f_pts[:-1]
    fb = f_pts[1:]
    fm = f_mids
    s = ((b - a) / 6.0)[:, None] * (fa + 4.0 * fm + fb)

    scale = 1.0 + np.abs(s.sum(axis=0))
    total = np.zeros(m_out)
    err = np.zeros(m_out)
    depth = 0
    while len(a) > 0:
        lm = 0.5 * (a + 0.5 * (a + b))
        rm = 0.5 * (0.5 * (a + b) + b)
        newvals = np.atleast_2d(f(np.concatenate([lm, rm])))
        flm, frm = newvals[: len(a)], newvals[len(a):]
        m = 0.5 * (a + b)
        s_l = ((m - a) / 6.0)[:, None] * (fa + 4.0 * flm + fm)
        s_r = ((b - m) / 6.0)[:, None] * (fm + 4.0 * frm + fb)
        delta = s_l + s_r - s

        budget = (15.0 * tol / width) * ((b - a)[:, None] * scale[None, :])
        ok = np.all(np.abs(delta) <= budget, axis=1)
        floor = (b - a) < width * 2.0**-45
        force = floor | (np.full(len(a), depth >= max_depth))
        done = ok | force
        if np.any(done):
            total += (s_l + s_r + delta / 15.0)[done].sum(axis=0)
            err += np.abs(delta)[done].sum(axis=0) / 15.0
            if np.any(force & ~ok):
                err += np.abs(delta)[force & ~ok].sum(axis=0)

        keep = ~done
        a, b, m = a[keep], b[keep], m[keep]
        fa, fb, fm = fa[keep], fb[keep], fm[keep]
        flm, frm = flm[keep], frm[keep]
        s_l, s_r = s_l[keep], s_r[keep]
        a = np.concatenate([a, m])
        b = np.concatenate([m, b])
        fa = np.concatenate([fa, fm])
        fb = np.concatenate([fm, fb])
        fm = np.concatenate([flm, frm])
        s = np.concatenate([s_l, s_r])
        depth += 1

    bad = err > 1000.0 * tol * scale
    if np.any(bad):
        raise QuadratureError(
            f"batched quadrature error estimate {float(err[bad].max()):.3e} "
            f"exceeds tolerance budget",
            (t0, t1),
        )
    return sign * total, err
