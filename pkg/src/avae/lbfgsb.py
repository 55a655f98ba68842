"""Limited-memory BFGS with box constraints (L-BFGS-B).

Each iteration finds the generalized Cauchy point along the projected
steepest-descent path of the compact limited-memory quadratic model,
minimizes that model over the variables left free (direct primal method,
falling back to a truncated step when the projected one is not a descent
direction), and runs a strong-Wolfe line search capped at the largest
feasible step.

References: Byrd, Lu, Nocedal & Zhu (1995); Zhu, Byrd, Lu & Nocedal (1997);
Morales & Nocedal (2011).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

EPS = np.finfo(np.float64).eps
FTOL = 1e-3     # sufficient decrease
GTOL = 0.9      # curvature
XTOL = 0.1      # minimum relative bracket shrink in zoom

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class LbfgsbConfig:
    """Optimizer settings.

    ``factr`` scales machine epsilon in the relative-reduction stop test
    ``(f_k - f_k+1) <= factr * eps * max(|f_k|, |f_k+1|, 1)``.
    """

    m: int = 25
    factr: float = 10.0
    pgtol: float = 1e-5
    max_iter: int = 15000
    max_fun: int = 15000
    max_ls: int = 20
    init_scale: float = 1e-8

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("memory size m must be >= 1")
        if not (self.factr > 0 and self.pgtol > 0 and self.init_scale > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1 or self.max_fun < 1 or self.max_ls < 1:
            raise ValueError("iteration limits must be positive")


@dataclass
class LbfgsbResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    converged: bool
    message: str

    def __iter__(self):
        # (x, value, iterations, converged)
        return iter((self.x, self.fun, self.iterations, self.converged))


def projected_gradient_norm(x, g, lower, upper) -> float:
    pg = np.where(g < 0, np.maximum(x - upper, g), np.minimum(x - lower, g))
    return float(np.max(np.abs(pg))) if pg.size else 0.0


class _Memory:
    """Correction pairs and the compact representation B = theta*I - W M W^T.

    With W = [Y, theta*S] = U diag(1, theta) for U = [Y, S], the pair
    (U, diag(1, theta) M diag(1, theta)) gives the same products, so U is
    kept in a preallocated buffer and updated in place.  Pair ``j`` lives
    in columns (2j, 2j+1) = (y_j, s_j); the filled columns are always a
    prefix.  ``gram`` tracks U^T U incrementally.
    """

    def __init__(self, m: int, n: int):
        self.m, self.n = m, n
        self.U = np.empty((n, 2 * m))
        self.gram = np.zeros((2 * m, 2 * m))
        self.order: list[int] = []      # slots, oldest first
        self.theta = 1.0
        self._wm = None

    def __len__(self):
        return len(self.order)

    def clear(self):
        self.order = []
        self.theta = 1.0
        self._wm = None

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        sy = float(s @ y)
        yy = float(y @ y)
        if not sy > EPS * yy:
            return False
        slot = len(self.order) if len(self.order) < self.m else self.order.pop(0)
        self.order.append(slot)
        self.U[:, 2 * slot] = y
        self.U[:, 2 * slot + 1] = s
        k = 2 * len(self.order)
        cross = self.U[:, :k].T @ self.U[:, 2 * slot:2 * slot + 2]
        self.gram[:k, 2 * slot:2 * slot + 2] = cross
        self.gram[2 * slot:2 * slot + 2, :k] = cross.T
        self.theta = yy / sy
        self._wm = None
        return True

    def wm(self) -> tuple[np.ndarray, np.ndarray]:
        if self._wm is None:
            k = len(self.order)
            if k == 0:
                self._wm = (np.zeros((self.n, 0)), np.zeros((0, 0)))
            else:
                ys = [2 * o for o in self.order]
                ss = [2 * o + 1 for o in self.order]
                SY = self.gram[np.ix_(ss, ys)]
                SS = self.gram[np.ix_(ss, ss)]
                D = np.diag(np.diag(SY))
                L = np.tril(SY, -1)
                K = np.block([[-D, L.T], [L, self.theta * SS]])
                scale = np.concatenate([np.ones(k), np.full(k, self.theta)])
                Mc = scale[:, None] * np.linalg.inv(K) * scale[None, :]
                perm = ys + ss
                M = np.empty((2 * k, 2 * k))
                M[np.ix_(perm, perm)] = Mc
                self._wm = (self.U[:, :2 * k], M)
        return self._wm

    def free_gram(self, free: np.ndarray) -> np.ndarray:
        """W_Z^T W_Z in the unscaled basis, via whichever index set is smaller."""
        W = self._wm[0]
        k = W.shape[1]
        nfree = int(free.sum())
        if nfree <= free.size - nfree:
            WZ = W[free]
            return WZ.T @ WZ
        WA = W[~free]
        return self.gram[:k, :k] - WA.T @ WA


def _cauchy_point(x, g, lower, upper, theta, W, M):
    """Generalized Cauchy point and the vector c = W^T (xc - x)."""
    n = x.size
    t = np.full(n, np.inf)
    neg, pos = g < 0, g > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t[neg] = (x[neg] - upper[neg]) / g[neg]
        t[pos] = (x[pos] - lower[pos]) / g[pos]
    d = np.where(t <= 0, 0.0, -g)
    xc = x.copy()
    p = W.T @ d
    c = np.zeros_like(p)
    fp = -float(d @ d)
    fpp0 = -theta * fp
    fpp = fpp0 - float(p @ (M @ p))
    fpp = max(fpp, EPS * fpp0)
    dtm = -fp / fpp if fpp > 0 else 0.0

    cand = np.flatnonzero((t > 0) & np.isfinite(t))
    order = cand[np.argsort(t[cand], kind="stable")]
    told = 0.0
    for b in order:
        tj = t[b]
        dt = tj - told
        if dtm < dt:
            break
        xc[b] = upper[b] if d[b] > 0 else lower[b]
        zb = xc[b] - x[b]
        c += dt * p
        gb = g[b]
        wb = W[b]
        Mwb = M @ wb
        fp += dt * fpp + gb * gb + theta * gb * zb - gb * float(Mwb @ c)
        fpp -= theta * gb * gb + 2.0 * gb * float(Mwb @ p) + gb * gb * float(wb @ Mwb)
        fpp = max(fpp, EPS * fpp0)
        p += gb * wb
        d[b] = 0.0
        dtm = -fp / fpp
        told = tj
    dtm = max(dtm, 0.0)
    tsum = told + dtm
    moving = d != 0
    xc[moving] = x[moving] + tsum * d[moving]
    np.clip(xc, lower, upper, out=xc)
    c += dtm * p
    return xc, c


def _subspace_min(x, g, lower, upper, xc, c, theta, W, M, mem: _Memory):
    free = (xc > lower) & (xc < upper)
    if not free.any():
        return xc
    r = np.zeros_like(x)
    r[free] = g[free] + theta * (xc[free] - x[free])
    if W.shape[1]:
        r[free] -= (W @ (M @ c))[free]
        v = M @ (W.T @ r)
        N = np.eye(M.shape[0]) - (M @ mem.free_gram(free)) / theta
        v = np.linalg.solve(N, v)
        du = -r[free] / theta - (W @ v)[free] / theta ** 2
    else:
        du = -r[free] / theta
    xbar = xc.copy()
    xbar[free] = np.clip(xc[free] + du, lower[free], upper[free])
    if float((xbar - x) @ g) < 0:
        return xbar
    # projected step is not a descent direction: truncate to the box instead
    lo, hi, xf = lower[free], upper[free], xc[free]
    with np.errstate(divide="ignore", invalid="ignore"):
        lim = np.where(du > 0, (hi - xf) / du, np.where(du < 0, (lo - xf) / du, np.inf))
    alpha = min(1.0, float(np.min(lim)))
    xbar[free] = np.clip(xf + alpha * du, lo, hi)
    return xbar


def _max_step(x, d, lower, upper) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        lim = np.where(d > 0, (upper - x) / d, np.where(d < 0, (lower - x) / d, np.inf))
    return float(max(0.0, np.min(lim))) if lim.size else np.inf


def _cubic_min(a, fa, da, b, fb, db) -> float | None:
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - da * db
    if rad < 0:
        return None
    d2 = np.copysign(np.sqrt(rad), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


class _LineSearch:
    """Strong-Wolfe search along d from x, steps limited to [0, stpmax]."""

    def __init__(self, fg: Objective, x, f0, g0, d, lower, upper, budget: int):
        self.fg, self.x, self.f0, self.d = fg, x, f0, d
        self.lower, self.upper = lower, upper
        self.dg0 = float(g0 @ d)
        self.budget = budget
        self.nfev = 0
        self.best = None   # (stp, f, g, xt) with sufficient decrease

    def _eval(self, stp):
        xt = np.clip(self.x + stp * self.d, self.lower, self.upper)
        f, g = self.fg(xt)
        self.nfev += 1
        f = float(f)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            return xt, None, None, None
        dg = float(g @ self.d)
        if f <= self.f0 + FTOL * stp * self.dg0 and (self.best is None or f < self.best[1]):
            self.best = (stp, f, g, xt)
        return xt, f, g, dg

    def run(self, stp: float, stpmax: float):
        a_prev, f_prev, dg_prev = 0.0, self.f0, self.dg0
        a = min(stp, stpmax)
        first = True
        while self.nfev < self.budget:
            xt, f, g, dg = self._eval(a)
            if f is None:
                stpmax = a
                a = a_prev + 0.5 * (a - a_prev)
                if a - a_prev <= EPS * max(1.0, a_prev):
                    break
                continue
            if f > self.f0 + FTOL * a * self.dg0 or (not first and f >= f_prev):
                return self._zoom(a_prev, f_prev, dg_prev, a, f, dg)
            if abs(dg) <= -GTOL * self.dg0:
                return a, f, g, xt
            if dg >= 0:
                return self._zoom(a, f, dg, a_prev, f_prev, dg_prev)
            if a >= stpmax:
                return a, f, g, xt
            a_prev, f_prev, dg_prev = a, f, dg
            a = min(4.0 * a, stpmax)
            first = False
        return self._fallback()

    def _zoom(self, lo, flo, dlo, hi, fhi, dhi):
        while self.nfev < self.budget:
            width = abs(hi - lo)
            if width <= EPS * max(1.0, abs(lo)):
                break
            a = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
            left, right = min(lo, hi), max(lo, hi)
            margin = XTOL * width
            if a is None or not (left + margin <= a <= right - margin):
                a = 0.5 * (lo + hi)
            xt, f, g, dg = self._eval(a)
            if f is None:
                hi, fhi, dhi = a, np.inf, 0.0
                continue
            if f > self.f0 + FTOL * a * self.dg0 or f >= flo:
                hi, fhi, dhi = a, f, dg
            else:
                if abs(dg) <= -GTOL * self.dg0:
                    return a, f, g, xt
                if dg * (hi - lo) >= 0:
                    hi, fhi, dhi = lo, flo, dlo
                lo, flo, dlo = a, f, dg
        return self._fallback()

    def _fallback(self):
        # out of evaluations: accept the best sufficient-decrease point, if any
        if self.best is not None and self.best[1] < self.f0:
            stp, f, g, xt = self.best
            return stp, f, g, xt
        return None


def lbfgsb_minimize(fg: Objective, x0, lower, upper, cfg: LbfgsbConfig = LbfgsbConfig()) -> LbfgsbResult:
    """Minimize ``fg`` (returning value and gradient) over ``lower <= x <= upper``.

    The returned point always satisfies the bounds exactly and never has a
    larger value than the starting point.
    """
    x = np.array(x0, dtype=np.float64).ravel()
    lower = np.broadcast_to(np.asarray(lower, dtype=np.float64).ravel(), x.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=np.float64).ravel(), x.shape)
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    if np.any(x < lower) or np.any(x > upper):
        raise ValueError("starting point violates the bounds")
    f, g = fg(x)
    f = float(f)
    g = np.array(g, dtype=np.float64).ravel()
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise ValueError("objective is not finite at the starting point")
    nfev = 1
    mem = _Memory(cfg.m, x.size)
    message, converged = "iteration limit reached", False
    it = 0
    retried = False

    while it < cfg.max_iter:
        if projected_gradient_norm(x, g, lower, upper) <= cfg.pgtol:
            message, converged = "projected gradient below tolerance", True
            break
        W, M = mem.wm()
        xc, c = _cauchy_point(x, g, lower, upper, mem.theta, W, M)
        xbar = _subspace_min(x, g, lower, upper, xc, c, mem.theta, W, M, mem)
        d = xbar - x
        dg = float(g @ d)
        if not dg < 0:
            if len(mem) and not retried:
                mem.clear()
                retried = True
                continue
            message = "no descent direction"
            break
        if len(mem) == 0:
            stpmax = 1.0
            boxed = bool(np.all(np.isfinite(lower)) and np.all(np.isfinite(upper)))
            stp = 1.0 if boxed else min(1.0 / float(np.linalg.norm(d)), stpmax)
        else:
            stpmax = max(1.0, _max_step(x, d, lower, upper))
            stp = 1.0
        budget = min(cfg.max_ls, cfg.max_fun - nfev)
        if budget <= 0:
            message = "function evaluation limit reached"
            break
        ls = _LineSearch(fg, x, f, g, d, lower, upper, budget)
        found = ls.run(stp, stpmax)
        nfev += ls.nfev
        if found is None:
            if len(mem) and not retried:
                logger.debug("line search failed at iteration %d; resetting memory", it)
                mem.clear()
                retried = True
                continue
            message = "line search failed"
            break
        retried = False
        _, f_new, g_new, x_new = found
        g_new = np.array(g_new, dtype=np.float64).ravel()
        it += 1
        reduction = f - f_new
        mem.push(x_new - x, g_new - g)
        x, f_old, f, g = x_new, f, f_new, g_new
        if reduction <= cfg.factr * EPS * max(abs(f_old), abs(f), 1.0):
            message, converged = "relative reduction below tolerance", True
            break
        if nfev >= cfg.max_fun:
            message = "function evaluation limit reached"
            break

    return LbfgsbResult(x, f, g, it, nfev, converged, message)
