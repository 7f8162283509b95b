"""Team state, single-integrator rollout, connection graphs and routes."""
from __future__ import annotations

import csv
import functools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

UNREACHABLE = math.inf


class ControlBoxError(ValueError):
    """Controls outside the admissible box (they are never clamped silently)."""


@dataclass(frozen=True)
class ConnectivityPolicy:
    range: float
    voronoi: bool = True

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError("communication range must be positive")


@dataclass(frozen=True, eq=False)
class Scenario:
    attributes: tuple
    initial_positions: np.ndarray
    controllable: tuple
    control_lo: np.ndarray
    control_hi: np.ndarray
    connectivity: ConnectivityPolicy
    horizon: int

    def __post_init__(self):
        q0 = np.array(self.initial_positions, dtype=float)
        if q0.ndim != 2 or q0.shape[0] != len(self.attributes):
            raise ValueError("initial positions must be N x dim with one attribute per agent")
        lo = np.broadcast_to(np.asarray(self.control_lo, float), (q0.shape[1],)).copy()
        hi = np.broadcast_to(np.asarray(self.control_hi, float), (q0.shape[1],)).copy()
        if np.any(lo >= hi):
            raise ValueError("control box needs lo < hi on every axis")
        ctrl = tuple(int(i) for i in self.controllable)
        if len(set(ctrl)) != len(ctrl) or any(not 0 <= i < q0.shape[0] for i in ctrl):
            raise ValueError("controllable agents must be distinct valid indices")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        for arr in (q0, lo, hi):
            arr.flags.writeable = False
        object.__setattr__(self, "initial_positions", q0)
        object.__setattr__(self, "control_lo", lo)
        object.__setattr__(self, "control_hi", hi)
        object.__setattr__(self, "controllable", ctrl)
        object.__setattr__(self, "attributes", tuple(self.attributes))

    @property
    def n_agents(self) -> int:
        return self.initial_positions.shape[0]

    @property
    def dim(self) -> int:
        return self.initial_positions.shape[1]

    @property
    def control_shape(self) -> tuple:
        return (self.horizon, len(self.controllable), self.dim)

    def with_initial_positions(self, q0) -> "Scenario":
        return Scenario(self.attributes, np.asarray(q0, float), self.controllable,
                        self.control_lo, self.control_hi, self.connectivity, self.horizon)

    def lower_bounds(self) -> np.ndarray:
        return np.broadcast_to(self.control_lo, self.control_shape).ravel().copy()

    def upper_bounds(self) -> np.ndarray:
        return np.broadcast_to(self.control_hi, self.control_shape).ravel().copy()


@dataclass(frozen=True, eq=False)
class TeamTrace:
    positions: np.ndarray  # (steps, N, dim)
    attributes: tuple

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 3 or pos.shape[1] != len(self.attributes):
            raise ValueError("positions must be steps x N x dim")
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "attributes", tuple(self.attributes))

    @property
    def steps(self) -> int:
        return self.positions.shape[0]

    @property
    def horizon(self) -> int:
        return self.positions.shape[0] - 1

    @property
    def n_agents(self) -> int:
        return self.positions.shape[1]

    def __eq__(self, other):
        return (isinstance(other, TeamTrace) and self.attributes == other.attributes
                and np.array_equal(self.positions, other.positions))


def rollout(scn: Scenario, controls) -> TeamTrace:
    """Integrate ``q[k+1] = q[k] + u[k]`` for controllable agents; others stay put."""
    u = np.asarray(controls, dtype=float)
    if u.shape != scn.control_shape:
        raise ValueError(f"controls have shape {u.shape}, expected {scn.control_shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("controls must be finite")
    if np.any(u < scn.control_lo) or np.any(u > scn.control_hi):
        raise ControlBoxError("controls outside the admissible box")
    H, N = scn.horizon, scn.n_agents
    pos = np.empty((H + 1, N, scn.dim))
    pos[:] = scn.initial_positions
    if scn.controllable:
        idx = list(scn.controllable)
        pos[1:, idx] = scn.initial_positions[idx] + np.cumsum(u, axis=0)
    return TeamTrace(pos, scn.attributes)


# -- connection graphs ---------------------------------------------------

@dataclass(frozen=True)
class ConnectionGraph:
    n: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        norm = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError("self-loops are not allowed")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i},{j}) out of range")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(norm))

    @classmethod
    def from_adjacency(cls, adj) -> "ConnectionGraph":
        adj = np.asarray(adj, bool)
        ii, jj = np.nonzero(np.triu(adj | adj.T, 1))
        return cls(adj.shape[0], frozenset(zip(ii.tolist(), jj.tolist())))

    @functools.cached_property
    def key(self) -> int:
        """Bitmask over the upper-triangular pairs; identifies the edge set."""
        k = 0
        for i, j in self.edges:
            k |= 1 << (i * self.n + j)
        return k

    @classmethod
    def from_key(cls, n: int, key: int) -> "ConnectionGraph":
        return cls(n, frozenset((i, j) for i in range(n) for j in range(i + 1, n)
                                if key >> (i * n + j) & 1))

    @functools.cached_property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n), dtype=bool)
        for i, j in self.edges:
            a[i, j] = a[j, i] = True
        a.flags.writeable = False
        return a

    @functools.cached_property
    def neighbors(self) -> tuple:
        nb = [[] for _ in range(self.n)]
        for i, j in self.edges:
            nb[i].append(j)
            nb[j].append(i)
        return tuple(tuple(sorted(x)) for x in nb)


@numba.njit(cache=True)
def _ridge_kernel(pts, rel_tol):
    """Voronoi adjacency for a batch of 2-D point sets, shape (S, N, 2).

    Sites ``i`` and ``j`` are neighbours when the part of their bisector that is
    strictly closer to them than to every other site has positive length.  Each
    other site cuts the bisector line to a half-line, so the shared ridge is an
    interval in the line parameter.
    """
    s_count, n = pts.shape[0], pts.shape[1]
    adj = np.zeros((s_count, n, n), dtype=np.bool_)
    for s in range(s_count):
        p = pts[s]
        lo0, hi0, lo1, hi1 = p[0, 0], p[0, 0], p[0, 1], p[0, 1]
        for i in range(1, n):
            lo0, hi0 = min(lo0, p[i, 0]), max(hi0, p[i, 0])
            lo1, hi1 = min(lo1, p[i, 1]), max(hi1, p[i, 1])
        tol = rel_tol * (max(hi0 - lo0, hi1 - lo1) + 1e-300)
        for i in range(n):
            for j in range(i + 1, n):
                dx, dy = p[j, 0] - p[i, 0], p[j, 1] - p[i, 1]
                norm = math.sqrt(dx * dx + dy * dy)
                vx, vy = -dy / norm, dx / norm      # unit direction of the bisector
                mx, my = 0.5 * dx, 0.5 * dy         # midpoint, relative to site i
                lo, hi = -np.inf, np.inf
                for k in range(n):
                    if k == i or k == j:
                        continue
                    wx, wy = p[k, 0] - p[i, 0], p[k, 1] - p[i, 1]
                    # closer to i than to k:  a * t < b
                    a = 2.0 * (vx * wx + vy * wy)
                    b = wx * wx + wy * wy - 2.0 * (mx * wx + my * wy)
                    if abs(a) <= 1e-12 * math.sqrt(wx * wx + wy * wy):
                        if b <= tol * norm:
                            hi = lo
                            break
                    elif a > 0:
                        hi = min(hi, b / a)
                    else:
                        lo = max(lo, b / a)
                    if hi - lo <= tol:
                        break
                if hi - lo > tol:
                    adj[s, i, j] = adj[s, j, i] = True
    return adj


def _delaunay_adjacency(pts: np.ndarray, rel_tol: float = 1e-9) -> np.ndarray:
    """Voronoi-neighbour adjacency (Delaunay edges with a proper ridge), (..., N, N)."""
    pts = np.asarray(pts, float)
    n = pts.shape[-2]
    batch = pts.shape[:-2]
    flat = np.ascontiguousarray(pts.reshape((-1, n, 2)))
    return _ridge_kernel(flat, rel_tol).reshape(batch + (n, n))


def _check_distinct(pts: np.ndarray):
    d = np.linalg.norm(pts[..., :, None, :] - pts[..., None, :, :], axis=-1)
    n = pts.shape[-2]
    d[..., np.arange(n), np.arange(n)] = np.inf
    if np.any(d == 0):
        raise ValueError("duplicate agent positions: Voronoi cells are undefined")


def voronoi_neighbors(positions) -> set:
    """Pairs ``(i, j)``, ``i < j``, whose Voronoi cells are adjacent."""
    pts = np.asarray(positions, float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("Voronoi adjacency needs N x 2 positions")
    if pts.shape[0] < 2:
        raise ValueError("Voronoi adjacency needs at least two sites")
    _check_distinct(pts)
    adj = _delaunay_adjacency(pts)
    ii, jj = np.nonzero(np.triu(adj, 1))
    return set(zip(ii.tolist(), jj.tolist()))


def adjacency_matrices(positions, policy: ConnectivityPolicy) -> np.ndarray:
    """Boolean adjacency for a batch of position sets, shape (..., N, N)."""
    pts = np.asarray(positions, float)
    if not np.all(np.isfinite(pts)):
        raise ValueError("positions must be finite")
    n = pts.shape[-2]
    dist = np.linalg.norm(pts[..., :, None, :] - pts[..., None, :, :], axis=-1)
    adj = dist <= policy.range
    if policy.voronoi and n >= 2:
        if pts.shape[-1] != 2:
            raise ValueError("Voronoi adjacency is only defined in 2-D")
        _check_distinct(pts)
        adj &= _delaunay_adjacency(pts)
    adj[..., np.arange(n), np.arange(n)] = False
    return adj


def connection_graph(positions, policy: ConnectivityPolicy) -> ConnectionGraph:
    return ConnectionGraph.from_adjacency(adjacency_matrices(positions, policy))


def connection_graphs(trace: TeamTrace, policy: ConnectivityPolicy) -> list:
    """One graph per step of ``trace``, recomputed from the positions."""
    adj = adjacency_matrices(trace.positions, policy)
    return [ConnectionGraph.from_adjacency(a) for a in adj]


# -- distances and routes ------------------------------------------------

def hops(g: ConnectionGraph, source: int, target: int) -> float:
    """Edge count of the shortest route, ``UNREACHABLE`` (inf) if none."""
    return float(hop_matrix(g)[source, target])


def adjacency_keys(adj: np.ndarray) -> list:
    """Edge-set keys (as in ``ConnectionGraph.key``) for a batch of adjacencies."""
    adj = np.asarray(adj, bool)
    n = adj.shape[-1]
    pi, pj = np.triu_indices(n, 1)
    if pi.size == 0:
        return [0] * int(np.prod(adj.shape[:-2]))
    bits = adj[..., pi, pj].reshape(-1, pi.size)
    if n * n <= 62:
        weights = np.left_shift(np.int64(1), (pi * n + pj).astype(np.int64))
        return (bits.astype(np.int64) @ weights).tolist()
    shifts = (pi * n + pj).tolist()
    return [sum(1 << s for s, b in zip(shifts, row) if b) for row in bits.tolist()]


def hop_matrix(g: ConnectionGraph) -> np.ndarray:
    return hop_matrix_from_key(g.n, g.key)


@functools.lru_cache(maxsize=4096)
def hop_matrix_from_key(n: int, key: int) -> np.ndarray:
    neighbors = ConnectionGraph.from_key(n, key).neighbors
    out = np.full((n, n), UNREACHABLE)
    for s in range(n):
        out[s, s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in neighbors[u]:
                if out[s, v] == UNREACHABLE:
                    out[s, v] = out[s, u] + 1
                    queue.append(v)
    out.flags.writeable = False
    return out


def enumerate_routes(g: ConnectionGraph, start: int, max_len: Optional[int] = None) -> list:
    """All simple paths from ``start`` with at most ``max_len`` nodes, lexicographic."""
    max_len = g.n if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    routes = []
    path = [start]
    on_path = [False] * g.n
    on_path[start] = True

    def dfs():
        routes.append(tuple(path))
        if len(path) == max_len:
            return
        for v in g.neighbors[path[-1]]:
            if not on_path[v]:
                on_path[v] = True
                path.append(v)
                dfs()
                path.pop()
                on_path[v] = False

    dfs()
    return routes


@dataclass(frozen=True, eq=False)
class RouteTable:
    """Every route of one graph packed into padded arrays, grouped by start node.

    ``nodes`` is (R, max_len) with -1 padding; routes of start ``l`` occupy rows
    ``offsets[l]:offsets[l+1]`` in lexicographic order.
    """

    nodes: np.ndarray
    lengths: np.ndarray
    starts: np.ndarray
    offsets: np.ndarray


def route_table(g: ConnectionGraph, max_len: int) -> RouteTable:
    return route_table_from_key(g.n, g.key, max_len)


@functools.lru_cache(maxsize=8192)
def route_table_from_key(n: int, key: int, max_len: int) -> RouteTable:
    g = ConnectionGraph.from_key(n, key)
    rows, offsets = [], [0]
    for l in range(n):
        rows.extend(enumerate_routes(g, l, max_len))
        offsets.append(len(rows))
    nodes = np.full((len(rows), max_len), -1, dtype=np.intp)
    for i, r in enumerate(rows):
        nodes[i, :len(r)] = r
    lengths = np.array([len(r) for r in rows], dtype=np.intp)
    starts = nodes[:, 0].copy()
    for arr in (nodes, lengths, starts):
        arr.flags.writeable = False
    return RouteTable(nodes, lengths, starts, np.array(offsets, dtype=np.intp))


# -- trace files -------------------------------------------------------------

def write_trace_csv(trace: TeamTrace, path) -> None:
    dim = trace.positions.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "agent", "attr"] + [f"x{i}" for i in range(dim)])
        for k in range(trace.steps):
            for l in range(trace.n_agents):
                w.writerow([k, l, trace.attributes[l]]
                           + ["%.17g" % v for v in trace.positions[k, l]])


def read_trace_csv(path) -> TeamTrace:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if not header or header[:3] != ["step", "agent", "attr"]:
            raise ValueError(f"{path}: not a trace file (bad header)")
        dim = len(header) - 3
        rows = [row for row in r if row]
    if not rows:
        raise ValueError(f"{path}: empty trace")
    steps = max(int(x[0]) for x in rows) + 1
    n = max(int(x[1]) for x in rows) + 1
    if len(rows) != steps * n:
        raise ValueError(f"{path}: expected {steps * n} rows, found {len(rows)}")
    pos = np.full((steps, n, dim), np.nan)
    attrs: list = [None] * n
    for row in rows:
        k, l = int(row[0]), int(row[1])
        if attrs[l] is not None and attrs[l] != row[2]:
            raise ValueError(f"{path}: attribute of agent {l} changes over time")
        attrs[l] = row[2]
        pos[k, l] = [float(v) for v in row[3:]]
    if np.isnan(pos).any():
        raise ValueError(f"{path}: missing (step, agent) rows")
    return TeamTrace(pos, tuple(attrs))


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    p = np.asarray(positions, float)
    return np.linalg.norm(p[..., :, None, :] - p[..., None, :, :], axis=-1)
