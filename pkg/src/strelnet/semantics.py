"""STREL monitoring: Boolean satisfaction, original and counting robustness.

Robustness is evaluated as a *signal*: an array of shape ``(steps, N)`` per
subformula, so one pass covers every agent and every admissible time step.
In smooth mode the evaluator carries the hard (max/min) signal next to the
smooth one; route counts, agent counts and the distance witness are always
taken from the hard values, which keeps them identical between the two modes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numba
import numpy as np

from . import formula as fm
from .formula import Distance
from .spatial import (ConnectionGraph, TeamTrace, adjacency_keys, enumerate_routes,
                      hop_matrix, hop_matrix_from_key, pairwise_distances,
                      route_table_from_key)

COUNTING = "counting"
ORIGINAL = "original"


class HorizonError(ValueError):
    """The trace is too short to evaluate the formula at the requested step."""


@dataclass(frozen=True)
class SemanticsConfig:
    beta: float = 100.0
    k_dist: float = 1.0
    k_routes: float = 1.0
    k_ag: float = 1.0
    max_route_len: Optional[int] = None   # None: number of agents
    rho_max: float = 1.0
    smooth: bool = False
    counting_mode: str = COUNTING
    zero_route_tie: str = "violating"
    flip_ag_sign: bool = False
    surround_variant: str = "negated-escape"

    def __post_init__(self):
        for name in ("beta", "k_dist", "k_routes", "k_ag", "rho_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_route_len is not None and self.max_route_len < 1:
            raise ValueError("max_route_len must be at least 1")
        if self.counting_mode not in (COUNTING, ORIGINAL):
            raise ValueError(f"unknown counting mode {self.counting_mode!r}")
        if self.zero_route_tie not in ("violating", "satisfying"):
            raise ValueError(f"unknown zero-route tie policy {self.zero_route_tie!r}")
        if self.surround_variant not in fm.SURROUND_VARIANTS:
            raise ValueError(f"unknown surround variant {self.surround_variant!r}")

    def route_cap(self, n_agents: int) -> int:
        return n_agents if self.max_route_len is None else self.max_route_len


@dataclass(frozen=True)
class RobustnessReport:
    per_agent: np.ndarray
    team: float
    sigma_ag: float
    ag_plus: int
    ag_minus: int


# -- smooth extrema and the counting sigmoids -------------------------------

def soft_max(values, beta: float, axis=None):
    """Log-sum-exp maximum, shifted by the hard max for stability."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("soft_max of an empty collection")
    if not beta > 0:
        raise ValueError("beta must be positive")
    m = np.max(v, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(beta * (v - m_safe)), axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = m_safe + np.log(s) / beta
    out = np.where(np.isneginf(m), -np.inf, out)
    return out.item() if axis is None else np.squeeze(out, axis=axis)


def soft_min(values, beta: float, axis=None):
    return -soft_max(-np.asarray(values, dtype=float), beta, axis=axis)


def _soft_min2(a, b, beta):
    return -np.logaddexp(-beta * a, -beta * b) / beta


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def sigma_dist(d_norm, side: str, k_dist: float):
    """Distance gate: ``-tanh(k (d_norm - 1))`` for ``<=``, its negative for ``>``."""
    d = np.asarray(d_norm, dtype=float)
    with np.errstate(invalid="ignore"):
        v = np.tanh(k_dist * (d - 1.0))
    v = np.where(np.isposinf(d), 1.0, v)
    if side == fm.LE:
        v = -v
    elif side != fm.GT:
        raise ValueError(f"side must be '<=' or '>', got {side!r}")
    return v.item() if v.ndim == 0 else v


def sigma_routes(r_plus, r_minus, k_routes: float):
    rp = np.asarray(r_plus, dtype=float)
    rm = np.asarray(r_minus, dtype=float)
    v = np.maximum(_logistic(-k_routes * rm), _logistic(k_routes * (rp - rm)))
    return v.item() if v.ndim == 0 else v


def sigma_ag(ag_plus, ag_minus, k_ag: float, flip: bool = False):
    ap = np.asarray(ag_plus, dtype=float)
    am = np.asarray(ag_minus, dtype=float)
    first = _logistic(-k_ag * am) if flip else _logistic(k_ag * am)
    v = np.maximum(first, _logistic(k_ag * (ap - am)))
    return v.item() if v.ndim == 0 else v


# -- evaluation context ------------------------------------------------------

class SpatialContext:
    """Per-trace data shared by all subformulas: distances, hop counts, routes."""

    def __init__(self, trace: TeamTrace, graphs: Sequence[ConnectionGraph] = None,
                 adjacency: np.ndarray = None):
        self.trace = trace
        self.positions = trace.positions
        self.steps, self.n = trace.positions.shape[:2]
        if adjacency is not None:
            if adjacency.shape[0] < self.steps:
                raise ValueError("need one adjacency matrix per trace step")
            self.keys = adjacency_keys(adjacency[:self.steps])
        elif graphs is not None:
            if len(graphs) < self.steps:
                raise ValueError("need one connection graph per trace step")
            if any(g.n != self.n for g in graphs):
                raise ValueError("graph size does not match the number of agents")
            self.keys = [g.key for g in graphs[:self.steps]]
        else:
            raise ValueError("either graphs or adjacency matrices are required")
        self.euclid = pairwise_distances(trace.positions)
        self.attr = np.array(trace.attributes, dtype=object)
        self._hops = None
        self._routes = {}

    @property
    def hops(self) -> np.ndarray:
        if self._hops is None:
            self._hops = np.stack([hop_matrix_from_key(self.n, k) for k in self.keys])
        return self._hops

    def routes(self, cap: int):
        """Routes of every step, concatenated: (nodes, step, seg_offsets)."""
        if cap not in self._routes:
            tables = [route_table_from_key(self.n, k, cap) for k in self.keys]
            counts = np.array([t.nodes.shape[0] for t in tables])
            base = np.concatenate([[0], np.cumsum(counts)])
            offsets = np.concatenate([t.offsets[:-1] + b for t, b in zip(tables, base)]
                                     + [base[-1:]]).astype(np.intp)
            self._routes[cap] = (np.concatenate([t.nodes for t in tables]),
                                 np.repeat(np.arange(len(tables)), counts), offsets)
        return self._routes[cap]


class _Evaluator:
    def __init__(self, ctx: SpatialContext, cfg: SemanticsConfig):
        self.ctx = ctx
        self.cfg = cfg
        self.counting = cfg.counting_mode == COUNTING
        self.memo = {}

    def signal(self, f):
        """(smooth, hard) robustness arrays of shape (valid steps, N)."""
        key = id(f)
        hit = self.memo.get(key)
        if hit is None:
            hit = self.memo[key] = (f, self._eval(f))
        return hit[1]

    # ops that reduce to max/min
    def _pair(self, h, s_fn):
        return (s_fn() if self.cfg.smooth else h), h

    def _eval(self, f):
        cfg, ctx = self.cfg, self.ctx
        beta = cfg.beta
        if isinstance(f, fm.Const):
            v = np.full((ctx.steps, ctx.n), cfg.rho_max if f.value else -cfg.rho_max)
            return v, v
        if isinstance(f, fm.Atom):
            row = np.where(ctx.attr == f.label, cfg.rho_max, -cfg.rho_max).astype(float)
            v = np.broadcast_to(row, (ctx.steps, ctx.n))
            return v, v
        if isinstance(f, fm.Predicate):
            v = _interpret(f, ctx)
            return v, v
        if isinstance(f, fm.Not):
            s, h = self.signal(f.arg)
            return -s, -h
        if isinstance(f, (fm.And, fm.Or)):
            (s1, h1), (s2, h2) = self.signal(f.left), self.signal(f.right)
            t = min(len(h1), len(h2))
            s1, h1, s2, h2 = s1[:t], h1[:t], s2[:t], h2[:t]
            if isinstance(f, fm.And):
                return self._pair(np.minimum(h1, h2), lambda: _soft_min2(s1, s2, beta))
            return self._pair(np.maximum(h1, h2), lambda: -_soft_min2(-s1, -s2, beta))
        if isinstance(f, (fm.Eventually, fm.Always)):
            s, h = self.signal(f.arg)
            t = len(h) - f.b
            w = f.b - f.a + 1
            hw = np.lib.stride_tricks.sliding_window_view(h, w, axis=0)[f.a:f.a + t]
            sw = np.lib.stride_tricks.sliding_window_view(s, w, axis=0)[f.a:f.a + t]
            if isinstance(f, fm.Eventually):
                return self._pair(hw.max(axis=-1), lambda: soft_max(sw, beta, axis=-1))
            return self._pair(hw.min(axis=-1), lambda: soft_min(sw, beta, axis=-1))
        if isinstance(f, fm.Until):
            return self._until(f)
        if isinstance(f, (fm.Reach, fm.Escape)):
            return self._spatial(f)
        if isinstance(f, fm.Surround):
            return self.signal(fm.expand_surround(f, cfg.surround_variant))
        raise TypeError(f"not a formula: {f!r}")

    def _until(self, f):
        (s1, h1), (s2, h2) = self.signal(f.left), self.signal(f.right)
        beta = self.cfg.beta
        t = min(len(h1), len(h2)) - f.b
        run_h = h1[:t].copy()
        acc_s = -beta * s1[:t]                      # log-sum of exp(-beta*s1) so far
        terms_h, terms_s = [], []
        for j in range(f.b + 1):
            if j:
                run_h = np.minimum(run_h, h1[j:j + t])
                acc_s = np.logaddexp(acc_s, -beta * s1[j:j + t])
            if j >= f.a:
                terms_h.append(np.minimum(h2[j:j + t], run_h))
                if self.cfg.smooth:
                    terms_s.append(_soft_min2(s2[j:j + t], -acc_s / beta, beta))
        hard = np.max(terms_h, axis=0)
        if not self.cfg.smooth:
            return hard, hard
        return soft_max(np.stack(terms_s), beta, axis=0), hard

    def _spatial(self, f):
        cfg, ctx = self.cfg, self.ctx
        beta, smooth = cfg.beta, cfg.smooth
        reach = isinstance(f, fm.Reach)
        s1, h1 = self.signal(f.left if reach else f.arg)
        t = len(h1)
        if reach:
            s2, h2 = self.signal(f.right)
            t = min(t, len(h2))
        nodes, step, offsets = ctx.routes(cfg.route_cap(ctx.n))
        nseg = t * ctx.n
        r_end = offsets[nseg]
        nodes, step, offsets = nodes[:r_end], step[:r_end], offsets[:nseg + 1]
        dmat = ctx.hops if f.dist == Distance.HOPS else ctx.euclid
        if not reach:
            s2 = h2 = h1                                   # unused by the kernel
        rho_h, rho_s, r_plus, wdist = _route_kernel(
            nodes, step, offsets[:nseg + 1], np.ascontiguousarray(dmat),
            np.ascontiguousarray(h1[:t]), np.ascontiguousarray(s1[:t]),
            np.ascontiguousarray(h2[:t]), np.ascontiguousarray(s2[:t]),
            float(f.d), reach, smooth, float(beta), float(cfg.rho_max),
            cfg.zero_route_tie == "satisfying")
        if not smooth:
            rho_s = rho_h
        if not self.counting:
            return rho_s.reshape(t, ctx.n), rho_h.reshape(t, ctx.n)
        r_minus = np.diff(offsets[:nseg + 1]) - r_plus
        s_routes = sigma_routes(r_plus, r_minus, cfg.k_routes)
        s_dist = sigma_dist(wdist / f.d, fm.LE if reach else fm.GT, cfg.k_dist)
        hard = np.minimum(s_routes * rho_h, s_dist)
        soft = _soft_min2(s_routes * rho_s, s_dist, beta) if smooth else hard
        return soft.reshape(t, ctx.n), hard.reshape(t, ctx.n)


@numba.njit(cache=True)
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    m = max(a, b)
    return m + np.log1p(np.exp(-abs(a - b)))


@numba.njit(cache=True)
def _route_kernel(nodes, step, offsets, dmat, h1, s1, h2, s2, d, reach, smooth, beta,
                  rho_max, tie_pos):
    """Reach/escape over every (step, agent) segment of packed routes.

    For each route the candidate targets are the positions whose distance
    from the start is ``<= d`` (reach) or ``> d`` (escape, start excluded).
    A reach candidate scores min(phi2 at the target, phi1 over the route up
    to it, the start always included); an escape candidate scores phi1 over
    the route strictly before it.  Routes without candidates score -rho_max.

    Returns per segment: hard value, smooth value, number of satisfying
    routes, and the distance from the start to the hard-argmax witness
    (first route attaining the max, first best position on it).
    """
    nseg = offsets.shape[0] - 1
    width = nodes.shape[1]
    rho_h = np.empty(nseg)
    rho_s = np.empty(nseg)
    r_plus = np.zeros(nseg, dtype=np.int64)
    wdist = np.zeros(nseg)
    for g in range(nseg):
        seg_h = -np.inf
        seg_m = -np.inf           # running max of smooth route values (log-sum-exp shift)
        seg_acc = 0.0
        for r in range(offsets[g], offsets[g + 1]):
            k = step[r]
            start = nodes[r, 0]
            cum_h = np.inf
            acc_s = -np.inf       # log sum exp(-beta * phi1) over the prefix
            best_h = -np.inf
            best_pos = 0
            m_s = -np.inf
            sum_s = 0.0
            any_cand = False
            for i in range(width):
                node = nodes[r, i]
                if node < 0:
                    break
                dist = dmat[k, start, node]
                v1h = h1[k, node]
                v1s = s1[k, node]
                if reach:
                    if i == 0:
                        cum_h = v1h
                        acc_s = -beta * v1s
                    cand = dist <= d
                    if cand:
                        vh = min(h2[k, node], cum_h)
                        vs = 0.0
                        if smooth:
                            vs = -_logaddexp(-beta * s2[k, node], acc_s) / beta
                else:
                    cand = i > 0 and dist > d
                    vh = cum_h
                    vs = -acc_s / beta
                if cand:
                    any_cand = True
                    if vh > best_h:
                        best_h = vh
                        best_pos = i
                    if smooth:
                        if vs > m_s:
                            sum_s = sum_s * np.exp(beta * (m_s - vs)) + 1.0
                            m_s = vs
                        else:
                            sum_s += np.exp(beta * (vs - m_s))
                if i > 0 or not reach:
                    cum_h = min(cum_h, v1h)
                    acc_s = _logaddexp(acc_s, -beta * v1s)
            if any_cand:
                tau_h = best_h
                tau_s = m_s + np.log(sum_s) / beta if smooth else 0.0
            else:
                tau_h = -rho_max
                tau_s = -rho_max
            if tau_h > 0 or (tie_pos and tau_h == 0):
                r_plus[g] += 1
            if tau_h > seg_h:
                seg_h = tau_h
                wdist[g] = dmat[k, start, nodes[r, best_pos]]
            if smooth:
                if tau_s > seg_m:
                    seg_acc = seg_acc * np.exp(beta * (seg_m - tau_s)) + 1.0
                    seg_m = tau_s
                else:
                    seg_acc += np.exp(beta * (tau_s - seg_m))
        rho_h[g] = seg_h
        rho_s[g] = seg_m + np.log(seg_acc) / beta if smooth else seg_h
    return rho_h, rho_s, r_plus, wdist


def _interpret(p: fm.Predicate, ctx: SpatialContext) -> np.ndarray:
    pos = ctx.positions
    fn = p.fn
    if isinstance(fn, fm.DistTo):
        g = np.linalg.norm(pos - np.asarray(fn.point, float), axis=-1)
    elif isinstance(fn, fm.MinPairDist):
        d = ctx.euclid.copy()
        idx = np.arange(ctx.n)
        d[:, idx, idx] = np.inf
        g = d.min(axis=-1) if ctx.n > 1 else np.full((ctx.steps, ctx.n), np.inf)
    else:
        if fn.axis >= pos.shape[2]:
            raise ValueError(f"coord({fn.axis}) out of range")
        g = pos[..., fn.axis]
    return g - p.threshold if p.cmp == fm.GT else p.threshold - g


# -- public entry points -----------------------------------------------------

class Monitor:
    """Evaluate formulas over one trace and its connection graphs."""

    def __init__(self, trace: TeamTrace, graphs: Sequence[ConnectionGraph] = None,
                 cfg: SemanticsConfig = SemanticsConfig(), adjacency: np.ndarray = None):
        self.ctx = SpatialContext(trace, graphs, adjacency)
        self.cfg = cfg
        self._ev = _Evaluator(self.ctx, cfg)

    def _check(self, f, k: int):
        if k < 0 or k + fm.horizon(f) > self.ctx.steps - 1:
            raise HorizonError(f"step {k} + horizon {fm.horizon(f)} exceeds trace "
                               f"horizon {self.ctx.steps - 1}")

    def signal(self, f, hard: bool = False) -> np.ndarray:
        s, h = self._ev.signal(f)
        return h if hard else s

    def agent(self, f, k: int, l: int) -> float:
        self._check(f, k)
        return float(self.signal(f)[k, l])

    def team(self, f, k: int = 0) -> RobustnessReport:
        self._check(f, k)
        team, sag, ag_plus = self.team_rows(f, [k])
        return RobustnessReport(per_agent=np.array(self.signal(f)[k]), team=float(team[0]),
                                sigma_ag=float(sag[0]), ag_plus=int(ag_plus[0]),
                                ag_minus=self.ctx.n - int(ag_plus[0]))

    def team_rows(self, f, rows):
        """Team robustness at several steps at once: (team, sigma_ag, ag_plus).

        Used for batches of traces concatenated along the time axis, where the
        rows are the first step of each trace; the caller checks horizons.
        """
        s, h = self._ev.signal(f)
        cfg = self.cfg
        soft, hard = s[rows], h[rows]
        ag_plus = np.count_nonzero(hard > 0, axis=1)
        worst = soft_min(soft, cfg.beta, axis=1) if cfg.smooth else hard.min(axis=1)
        if cfg.counting_mode == COUNTING:
            sag = sigma_ag(ag_plus, self.ctx.n - ag_plus, cfg.k_ag, cfg.flip_ag_sign)
        else:
            sag = np.ones(len(rows))
        sag = np.atleast_1d(sag)
        return sag * worst, sag, ag_plus


def robustness_original(trace, graphs, f, k, l, cfg: SemanticsConfig = SemanticsConfig()):
    return Monitor(trace, graphs, replace(cfg, counting_mode=ORIGINAL)).agent(f, k, l)


def robustness_counting(trace, graphs, f, k, l, cfg: SemanticsConfig = SemanticsConfig()):
    return Monitor(trace, graphs, replace(cfg, counting_mode=COUNTING)).agent(f, k, l)


def robustness_team(trace, graphs, f, k=0, cfg: SemanticsConfig = SemanticsConfig()):
    return Monitor(trace, graphs, cfg).team(f, k)


# -- Boolean semantics ---------------------------------------------------------

def qualitative_sat(trace: TeamTrace, graphs: Sequence[ConnectionGraph], f, k: int, l: int,
                    cfg: SemanticsConfig = SemanticsConfig()) -> bool:
    """Boolean satisfaction by direct recursion over explicitly enumerated routes."""
    if k < 0 or k + fm.horizon(f) > trace.horizon:
        raise HorizonError(f"step {k} + horizon {fm.horizon(f)} exceeds trace "
                           f"horizon {trace.horizon}")
    cap = cfg.route_cap(trace.n_agents)
    pos = trace.positions

    def fdist(kind, k, a, b):
        if kind == Distance.HOPS:
            return float(hop_matrix(graphs[k])[a, b])
        return math.dist(pos[k, a], pos[k, b])

    def sat(f, k, l):
        if isinstance(f, fm.Const):
            return f.value
        if isinstance(f, fm.Atom):
            return trace.attributes[l] == f.label
        if isinstance(f, fm.Predicate):
            fn = f.fn
            if isinstance(fn, fm.DistTo):
                g = math.dist(pos[k, l], fn.point)
            elif isinstance(fn, fm.MinPairDist):
                g = min((math.dist(pos[k, l], pos[k, j]) for j in range(trace.n_agents)
                         if j != l), default=math.inf)
            else:
                g = pos[k, l, fn.axis]
            return g <= f.threshold if f.cmp == fm.LE else g > f.threshold
        if isinstance(f, fm.Not):
            return not sat(f.arg, k, l)
        if isinstance(f, fm.And):
            return sat(f.left, k, l) and sat(f.right, k, l)
        if isinstance(f, fm.Or):
            return sat(f.left, k, l) or sat(f.right, k, l)
        if isinstance(f, fm.Eventually):
            return any(sat(f.arg, j, l) for j in range(k + f.a, k + f.b + 1))
        if isinstance(f, fm.Always):
            return all(sat(f.arg, j, l) for j in range(k + f.a, k + f.b + 1))
        if isinstance(f, fm.Until):
            return any(sat(f.right, j, l) and all(sat(f.left, i, l) for i in range(k, j + 1))
                       for j in range(k + f.a, k + f.b + 1))
        if isinstance(f, fm.Reach):
            for route in enumerate_routes(graphs[k], l, cap):
                for i, target in enumerate(route):
                    if fdist(f.dist, k, l, target) > f.d or not sat(f.right, k, target):
                        continue
                    before = route[:max(i, 1)]
                    if all(sat(f.left, k, j) for j in before):
                        return True
            return False
        if isinstance(f, fm.Escape):
            for route in enumerate_routes(graphs[k], l, cap):
                for i, target in enumerate(route):
                    if i and fdist(f.dist, k, l, target) > f.d and \
                            all(sat(f.arg, k, j) for j in route[:i]):
                        return True
            return False
        if isinstance(f, fm.Surround):
            return sat(fm.expand_surround(f, cfg.surround_variant), k, l)
        raise TypeError(f"not a formula: {f!r}")

    return sat(f, k, l)
