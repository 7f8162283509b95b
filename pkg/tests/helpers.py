"""Shared builders and independent oracles for the test suite."""
from __future__ import annotations

import functools
import itertools
import math

import numpy as np

from strelnet import formula as fm
from strelnet import scenario as sc
from strelnet.formula import Distance
from strelnet.semantics import SemanticsConfig, sigma_dist, sigma_routes
from strelnet.spatial import (ConnectionGraph, ConnectivityPolicy, TeamTrace,
                              connection_graphs, enumerate_routes, hop_matrix, rollout)

ACCEPTANCE: dict = {}   # criterion -> (passed, detail), printed at the end of the run


def report(criterion, ok: bool, detail: str) -> bool:
    """Record one acceptance line and echo it immediately."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    label = f"criterion {criterion}" if isinstance(criterion, int) else criterion
    print(f"{label}: {'PASS' if ok else 'FAIL'} {detail}", flush=True)
    return bool(ok)


FIXTURE_EDGES = [(1, 3), (3, 4), (3, 2), (3, 6), (2, 5), (6, 5)]   # 1-based, as drawn


def fixture():
    """(trace, graphs) for the seven-agent example team (0-based agents)."""
    sf = sc.load_bundled("fixture")
    trace = rollout(sf.scenario, np.zeros(sf.scenario.control_shape))
    return trace, connection_graphs(trace, sf.scenario.connectivity)


def fixture_graph():
    return ConnectionGraph(7, frozenset((a - 1, b - 1) for a, b in FIXTURE_EDGES))


# -- random instances ------------------------------------------------------------

LABELS = ("a", "b")


def random_formula(rng, depth, budget, labels=LABELS, dists=(Distance.HOPS, Distance.EUCLID)):
    """Random AST of at most ``depth`` levels with horizon at most ``budget``."""
    if depth <= 1 or rng.random() < 0.2:
        r = rng.random()
        if r < 0.5:
            return fm.Atom(str(rng.choice(labels)))
        if r < 0.65:
            return fm.Predicate(fm.Coord(int(rng.integers(2))), str(rng.choice([fm.LE, fm.GT])),
                                float(np.round(rng.uniform(0, 3), 3)))
        if r < 0.85:
            pt = tuple(float(x) for x in np.round(rng.uniform(0, 3, 2), 3))
            return fm.Predicate(fm.DistTo(pt), str(rng.choice([fm.LE, fm.GT])),
                                float(np.round(rng.uniform(0.3, 2.5), 3)))
        return fm.Predicate(fm.MinPairDist(), str(rng.choice([fm.LE, fm.GT])),
                            float(np.round(rng.uniform(0.2, 1.5), 3)))
    kind = rng.choice(["not", "and", "or", "F", "G", "U", "R", "E", "O"])
    sub = lambda b=budget: random_formula(rng, depth - 1, b, labels, dists)  # noqa: E731
    dist = dists[int(rng.integers(len(dists)))]
    d = float(rng.integers(1, 3)) if dist == Distance.HOPS else float(np.round(rng.uniform(0.5, 2.5), 2))
    if kind == "not":
        return fm.Not(sub())
    if kind in ("and", "or"):
        return (fm.And if kind == "and" else fm.Or)(sub(), sub())
    if kind in ("F", "G", "U"):
        if budget == 0:
            return fm.Not(sub())
        b = int(rng.integers(0, min(budget, 3) + 1))
        a = int(rng.integers(0, b + 1))
        rest = budget - b
        if kind == "U":
            return fm.Until(a, b, sub(rest), sub(rest))
        return (fm.Eventually if kind == "F" else fm.Always)(a, b, sub(rest))
    if kind == "R":
        return fm.Reach(dist, d, sub(), sub())
    if kind == "E":
        return fm.Escape(dist, d, sub())
    return fm.Surround(dist, d, sub(), sub())


def random_instance(rng, max_agents=5, max_h=6):
    n = int(rng.integers(2, max_agents + 1))
    h = int(rng.integers(1, max_h + 1))
    attrs = tuple(str(x) for x in rng.choice(LABELS, n))
    pos = rng.uniform(0, 3, (1, n, 2)) + np.cumsum(rng.uniform(-0.4, 0.4, (h + 1, n, 2)), axis=0)
    trace = TeamTrace(pos, attrs)
    policy = ConnectivityPolicy(float(rng.uniform(1.0, 3.0)), bool(rng.random() < 0.5))
    return trace, connection_graphs(trace, policy)


# -- straight-line robustness oracle ------------------------------------------------

def oracle_robustness(trace, graphs, f, k, l, cfg: SemanticsConfig = SemanticsConfig()):
    """Hard robustness by direct recursion over explicit route lists (no vectorization)."""
    counting = cfg.counting_mode == "counting"
    cap = cfg.route_cap(trace.n_agents)
    pos = trace.positions
    rmax = cfg.rho_max

    def fdist(kind, k, a, b):
        if kind == Distance.HOPS:
            return float(hop_matrix(graphs[k])[a, b])
        return math.dist(pos[k, a], pos[k, b])

    @functools.cache
    def rho(f, k, l):
        if isinstance(f, fm.Const):
            return rmax if f.value else -rmax
        if isinstance(f, fm.Atom):
            return rmax if trace.attributes[l] == f.label else -rmax
        if isinstance(f, fm.Predicate):
            fn = f.fn
            if isinstance(fn, fm.DistTo):
                g = math.dist(pos[k, l], fn.point)
            elif isinstance(fn, fm.MinPairDist):
                g = min((math.dist(pos[k, l], pos[k, j]) for j in range(trace.n_agents)
                         if j != l), default=math.inf)
            else:
                g = pos[k, l, fn.axis]
            return f.threshold - g if f.cmp == fm.LE else g - f.threshold
        if isinstance(f, fm.Not):
            return -rho(f.arg, k, l)
        if isinstance(f, fm.And):
            return min(rho(f.left, k, l), rho(f.right, k, l))
        if isinstance(f, fm.Or):
            return max(rho(f.left, k, l), rho(f.right, k, l))
        if isinstance(f, fm.Eventually):
            return max(rho(f.arg, j, l) for j in range(k + f.a, k + f.b + 1))
        if isinstance(f, fm.Always):
            return min(rho(f.arg, j, l) for j in range(k + f.a, k + f.b + 1))
        if isinstance(f, fm.Until):
            return max(min([rho(f.right, j, l)] + [rho(f.left, i, l) for i in range(k, j + 1)])
                       for j in range(k + f.a, k + f.b + 1))
        if isinstance(f, (fm.Reach, fm.Escape)):
            reach = isinstance(f, fm.Reach)
            per_route = []
            for route in enumerate_routes(graphs[k], l, cap):
                best, best_i = -math.inf, 0
                for i, target in enumerate(route):
                    dd = fdist(f.dist, k, l, target)
                    if reach and dd <= f.d:
                        v = min([rho(f.right, k, target)]
                                + [rho(f.left, k, j) for j in route[:max(i, 1)]])
                    elif not reach and i > 0 and dd > f.d:
                        v = min(rho(f.arg, k, j) for j in route[:i])
                    else:
                        continue
                    if v > best:
                        best, best_i = v, i
                if best == -math.inf:
                    best = -rmax
                per_route.append((best, route[best_i]))
            value = max(v for v, _ in per_route)
            if not counting:
                return value
            plus = sum(1 for v, _ in per_route
                       if v > 0 or (cfg.zero_route_tie == "satisfying" and v == 0))
            minus = len(per_route) - plus
            witness = next(w for v, w in per_route if v == value)
            sd = sigma_dist(fdist(f.dist, k, l, witness) / f.d, fm.LE if reach else fm.GT,
                            cfg.k_dist)
            return min(sigma_routes(plus, minus, cfg.k_routes) * value, sd)
        if isinstance(f, fm.Surround):
            return rho(fm.expand_surround(f, cfg.surround_variant), k, l)
        raise TypeError(f)

    return rho(f, k, l)


# -- smoothing error budget -----------------------------------------------------------

def soft_depth(f, counting: bool) -> int:
    """Longest chain of smooth min/max applications from a leaf to the root."""
    extra = 1 if counting else 0
    if isinstance(f, (fm.Const, fm.Atom, fm.Predicate)):
        return 0
    if isinstance(f, fm.Not):
        return soft_depth(f.arg, counting)
    if isinstance(f, (fm.And, fm.Or)):
        return 1 + max(soft_depth(f.left, counting), soft_depth(f.right, counting))
    if isinstance(f, (fm.Eventually, fm.Always)):
        return 1 + soft_depth(f.arg, counting)
    if isinstance(f, fm.Until):
        # prefix min, min with the right operand, max over the window
        return 3 + max(soft_depth(f.left, counting), soft_depth(f.right, counting))
    if isinstance(f, fm.Reach):
        # prefix min, min with the target, max over positions, max over routes
        return 4 + extra + max(soft_depth(f.left, counting), soft_depth(f.right, counting))
    if isinstance(f, fm.Escape):
        return 3 + extra + soft_depth(f.arg, counting)
    if isinstance(f, fm.Surround):
        return soft_depth(fm.expand_surround(f), counting)
    raise TypeError(f)


def max_soft_arity(f, trace, graphs, cfg) -> int:
    """Largest number of arguments any smooth min/max can see on this instance."""
    cap = cfg.route_cap(trace.n_agents)
    widths = [2, trace.n_agents, cap]
    for node in fm.walk(f):
        if isinstance(node, (fm.Eventually, fm.Always, fm.Until)):
            widths.append(node.b - node.a + 1)
    for g in graphs:
        for l in range(trace.n_agents):
            widths.append(len(enumerate_routes(g, l, cap)))
    return max(widths)


# -- geometry oracles -------------------------------------------------------------------

def circumcircle_oracle(pts):
    """Pairs on a triangle whose circumcircle holds no other site (non-degenerate sets)."""
    pts = [tuple(map(float, p)) for p in pts]
    pairs = set()
    for a, b, c in itertools.combinations(range(len(pts)), 3):
        (ax, ay), (bx, by), (cx, cy) = pts[a], pts[b], pts[c]
        den = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
        if den == 0:
            continue
        ux = ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay)
              + (cx * cx + cy * cy) * (ay - by)) / den
        uy = ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx)
              + (cx * cx + cy * cy) * (bx - ax)) / den
        r = math.dist((ux, uy), pts[a])
        if all(math.dist((ux, uy), pts[d]) > r for d in range(len(pts)) if d not in (a, b, c)):
            pairs |= {(a, b), (b, c), (a, c)}
    return pairs


def voronoi_oracle(pts):
    """Neighbouring cells found by probing the bisector between every breakpoint.

    Every other site can only switch "strictly closer to i and j" on or off at one
    point of the bisector, so testing one point inside each gap between those
    switch points (and beyond the ends) finds any ridge of positive length.
    """
    pts = [np.array(p, float) for p in pts]
    n = len(pts)
    scale = float(np.ptp(np.array(pts), axis=0).max())
    pairs = set()
    for i, j in itertools.combinations(range(n), 2):
        mid = (pts[i] + pts[j]) / 2
        d = pts[j] - pts[i]
        v = np.array([-d[1], d[0]]) / np.linalg.norm(d)
        cuts = []
        for k in range(n):
            if k in (i, j):
                continue
            # |mid + t v - p_i|^2 = |mid + t v - p_k|^2 is linear in t
            w = pts[k] - pts[i]
            a = 2 * v @ w
            if abs(a) > 1e-12:
                cuts.append((w @ w - 2 * (mid - pts[i]) @ w) / a)
        cuts = sorted(cuts)
        probes = [0.0] if not cuts else (
            [cuts[0] - 1.0, cuts[-1] + 1.0]
            + [(x + y) / 2 for x, y in zip(cuts, cuts[1:]) if y - x > 1e-9 * scale])
        for t in probes:
            x = mid + t * v
            r = math.dist(x, pts[i])
            if all(math.dist(x, pts[k]) > r + 1e-12 * scale for k in range(n) if k not in (i, j)):
                pairs.add((i, j))
                break
    return pairs


def routes_oracle(g: ConnectionGraph, start: int, max_len: int):
    """Every simple path from ``start`` found by trying all node sequences."""
    out = []
    others = [v for v in range(g.n) if v != start]
    for size in range(0, max_len):
        for perm in itertools.permutations(others, size):
            path = (start,) + perm
            if all((min(x, y), max(x, y)) in g.edges for x, y in zip(path, path[1:])):
                out.append(path)
    return sorted(out)


# -- LSTM gradient check ---------------------------------------------------------------

def lstm_gradient_error(model, xs, ys, masks=None, h=1e-3):
    """Largest relative gap between BPTT and a fourth-order central difference.

    The five-point stencil keeps truncation error at O(h^4), so ``h`` can stay
    large enough that rounding in the summed loss does not swamp tiny gradients.
    """
    from strelnet.neuro import loss_and_grad
    _, grads = loss_and_grad(model, xs, ys, masks)
    worst = 0.0
    for name, w in model.params.items():
        for idx in np.ndindex(w.shape):
            keep = w[idx]
            vals = []
            for off in (2 * h, h, -h, -2 * h):
                w[idx] = keep + off
                vals.append(loss_and_grad(model, xs, ys, masks)[0])
            w[idx] = keep
            fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            an = grads[name][idx]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
    return worst
