"""Control synthesis: PSO exploration followed by projected quasi-Newton refinement.

The dynamics are eliminated by forward simulation, so the decision variable
is the control sequence of the controllable agents, flattened to a vector
and bounded by the control box.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import formula as fm
from .semantics import HorizonError, Monitor, SemanticsConfig
from .spatial import Scenario, TeamTrace, adjacency_matrices, rollout

GRAD, PSO, HYBRID = "grad", "pso", "hybrid"
METHODS = (GRAD, PSO, HYBRID)


def max_arity(f, n_agents: int) -> int:
    """Widest soft min/max the objective applies: agents, temporal windows, pairs."""
    widths = [2, n_agents]
    for node in fm.walk(f):
        if isinstance(node, (fm.Eventually, fm.Always, fm.Until)):
            widths.append(node.b - node.a + 1)
    return max(widths)


@dataclass(frozen=True, eq=False)
class SynthesisProblem:
    scenario: Scenario
    formula: object
    gamma: float = 0.01
    semantics: SemanticsConfig = field(default_factory=lambda: SemanticsConfig(smooth=True))
    eps_min: float = 1e-3

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not self.eps_min > 0:
            raise ValueError("eps_min must be positive")
        h = fm.horizon(self.formula)
        if h > self.scenario.horizon:
            raise ValueError(f"formula horizon {h} exceeds scenario horizon "
                             f"{self.scenario.horizon}")
        fm.check_dimension(self.formula, self.scenario.dim)
        if self.semantics.smooth:
            eps_beta = math.log(max_arity(self.formula, self.scenario.n_agents)) \
                / self.semantics.beta
            if self.eps_min < eps_beta:
                raise ValueError(f"eps_min {self.eps_min} is below the smoothing error "
                                 f"{eps_beta:.3g}; raise beta or eps_min")

    @property
    def n_vars(self) -> int:
        return int(np.prod(self.scenario.control_shape))

    def with_scenario(self, scn: Scenario) -> "SynthesisProblem":
        return SynthesisProblem(scn, self.formula, self.gamma, self.semantics, self.eps_min)


def _positions(scn: Scenario, u: np.ndarray) -> np.ndarray:
    """Rollout of a batch of control sequences, (B, H+1, N, dim)."""
    pos = np.empty((u.shape[0], scn.horizon + 1) + scn.initial_positions.shape)
    pos[:] = scn.initial_positions
    if scn.controllable:
        idx = list(scn.controllable)
        pos[:, 1:, idx] = scn.initial_positions[idx] + np.cumsum(u, axis=1)
    return pos


def team_robustness_batch(p: SynthesisProblem, positions: np.ndarray) -> np.ndarray:
    """Team robustness at step 0 of each trace in a (B, steps, N, dim) batch.

    The traces are concatenated along the time axis and monitored in one pass;
    since the formula horizon fits inside one trace, the value at the first
    step of each trace only reads that trace's own steps.
    """
    b, steps = positions.shape[:2]
    if fm.horizon(p.formula) > steps - 1:
        raise HorizonError(f"formula horizon {fm.horizon(p.formula)} exceeds trace "
                           f"horizon {steps - 1}")
    flat = positions.reshape((b * steps,) + positions.shape[2:])
    trace = TeamTrace(flat, p.scenario.attributes)
    adj = adjacency_matrices(flat, p.scenario.connectivity)
    team, _, _ = Monitor(trace, cfg=p.semantics, adjacency=adj).team_rows(
        p.formula, np.arange(b) * steps)
    return team


def robustness_of_trace(p: SynthesisProblem, trace: TeamTrace) -> float:
    return float(team_robustness_batch(p, trace.positions[None])[0])


def objective_batch(p: SynthesisProblem, controls) -> tuple:
    """(objective, robustness, cost) arrays for a batch of control vectors."""
    scn = p.scenario
    u = np.asarray(controls, dtype=float).reshape((-1,) + scn.control_shape)
    pos = _positions(scn, u)
    if not np.all(np.isfinite(pos)):
        raise ValueError("non-finite positions in rollout")
    rho = team_robustness_batch(p, pos)
    cost = np.sum(u * u, axis=(1, 2, 3))
    return rho - p.gamma * cost, rho, cost


def objective(p: SynthesisProblem, controls) -> tuple:
    """(objective, robustness, cost) for one control sequence."""
    obj, rho, cost = objective_batch(p, np.asarray(controls, float)[None])
    return float(obj[0]), float(rho[0]), float(cost[0])


class _Counted:
    """Batched objective wrapper (rows are candidate vectors) counting evaluations."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn
        self.calls = 0

    def __call__(self, xs):
        xs = np.atleast_2d(xs)
        self.calls += xs.shape[0]
        return np.asarray(self.fn(xs), dtype=float)


def _problem_fn(p: SynthesisProblem):
    return _Counted(lambda xs: objective_batch(p, xs)[0])


def batched(fn: Callable[[np.ndarray], float]) -> _Counted:
    """Lift a scalar objective on vectors to the batched form used by the solvers."""
    return _Counted(lambda xs: np.array([fn(x) for x in xs]))


# -- stage I: particle swarm ---------------------------------------------------

@dataclass(frozen=True)
class PsoConfig:
    particles: int = 64
    iterations: int = 50
    inertia: float = 0.729
    cognitive: float = 1.494
    social: float = 1.494
    seed: int = 0
    vmax_frac: float = 0.1      # velocity clamp as a fraction of the box width

    def __post_init__(self):
        if self.particles < 2:
            raise ValueError("need at least 2 particles")
        if not 0 < self.inertia < 1:
            raise ValueError("inertia must lie in (0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


def pso_maximize(fn, lo, hi, cfg: PsoConfig, history: Optional[list] = None):
    """Global-best PSO maximizing the batched ``fn`` over the box ``[lo, hi]``."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    rng = np.random.default_rng(cfg.seed)
    n, dim = cfg.particles, lo.size
    x = rng.uniform(lo, hi, size=(n, dim))
    vmax = cfg.vmax_frac * (hi - lo)
    v = rng.uniform(-vmax, vmax, size=(n, dim))
    fx = fn(x)
    pbest, pval = x.copy(), fx.copy()
    g = int(np.argmax(pval))                   # argmax returns the lowest index on ties
    gbest, gval = pbest[g].copy(), float(pval[g])
    if history is not None:
        history.append(gval)
    for _ in range(cfg.iterations):
        r1 = rng.random((n, dim))
        r2 = rng.random((n, dim))
        v = cfg.inertia * v + cfg.cognitive * r1 * (pbest - x) + cfg.social * r2 * (gbest - x)
        v = np.clip(v, -vmax, vmax)
        x = np.clip(x + v, lo, hi)
        fx = fn(x)
        better = fx > pval
        pbest[better], pval[better] = x[better], fx[better]
        g = int(np.argmax(pval))
        if pval[g] > gval:
            gbest, gval = pbest[g].copy(), float(pval[g])
        if history is not None:
            history.append(gval)
    return gbest, gval


def pso_stage(p: SynthesisProblem, cfg: PsoConfig = PsoConfig(), history: Optional[list] = None):
    fn = _problem_fn(p)
    x, val = pso_maximize(fn, p.scenario.lower_bounds(), p.scenario.upper_bounds(), cfg, history)
    return x.reshape(p.scenario.control_shape), val


# -- stage II: projected quasi-Newton ascent ------------------------------------

@dataclass(frozen=True)
class RefineConfig:
    max_iters: int = 30
    grad_step: float = 1e-5
    tolerance: float = 1e-6
    memory: int = 8
    armijo: float = 1e-4
    max_backtracks: int = 20

    def __post_init__(self):
        if not self.grad_step > 0 or not self.tolerance > 0:
            raise ValueError("grad_step and tolerance must be positive")
        if self.memory < 1 or self.max_iters < 0:
            raise ValueError("memory must be >= 1 and max_iters >= 0")


def fd_gradient(fn, x, fx, lo, hi, h):
    """Central differences; one-sided where a probe would leave the box."""
    n = x.size
    up, down = x + h <= hi, x - h >= lo
    eye = np.eye(n) * h
    probes = np.concatenate([x + eye[up], x - eye[down]])
    vals = fn(probes) if len(probes) else np.empty(0)
    f_plus = np.full(n, fx)
    f_minus = np.full(n, fx)
    f_plus[up] = vals[:up.sum()]
    f_minus[down] = vals[up.sum():]
    return (f_plus - f_minus) / (h * (up.astype(float) + down))


def _lbfgs_direction(g, mem_s, mem_y):
    """Two-loop recursion on the ascent problem (curvature pairs of -fn)."""
    q = g.copy()
    alphas = []
    for s, y in reversed(list(zip(mem_s, mem_y))):
        a = s @ q / (y @ s)
        alphas.append(a)
        q -= a * y
    if mem_s:
        s, y = mem_s[-1], mem_y[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), a in zip(zip(mem_s, mem_y), reversed(alphas)):
        b = y @ q / (y @ s)
        q += (a - b) * s
    return q


def refine_maximize(fn, x0, lo, hi, cfg: RefineConfig = RefineConfig()):
    """Projected L-BFGS ascent with Armijo backtracking; never returns worse than x0."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    x = np.clip(np.asarray(x0, float).ravel(), lo, hi)
    fx = float(fn(x)[0])
    if not np.isfinite(fx):
        raise ValueError("objective is not finite at the initial point")
    g = fd_gradient(fn, x, fx, lo, hi, cfg.grad_step)
    mem_s, mem_y = [], []
    width = float(np.max(hi - lo))
    for _ in range(cfg.max_iters):
        pg = np.clip(x + g, lo, hi) - x
        if np.max(np.abs(pg)) < cfg.tolerance:
            break
        free = ~(((x <= lo) & (g < 0)) | ((x >= hi) & (g > 0)))
        accepted = False
        for use_memory in ((True, False) if mem_s else (False,)):
            if use_memory:
                d = _lbfgs_direction(np.where(free, g, 0.0), mem_s, mem_y)
                d[~free] = 0.0
                if d @ g <= 0:
                    continue
                t = 1.0
            else:
                d = np.where(free, g, 0.0)
                t = min(1.0, 0.25 * width / max(np.max(np.abs(d)), 1e-300))
            for _ in range(cfg.max_backtracks):
                xn = np.clip(x + t * d, lo, hi)
                step = xn - x
                if not np.any(step):
                    break
                fn_x = float(fn(xn)[0])
                if fn_x >= fx + cfg.armijo * (g @ step) and fn_x > fx:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
            mem_s.clear()
            mem_y.clear()
        if not accepted:
            break
        gn = fd_gradient(fn, xn, fn_x, lo, hi, cfg.grad_step)
        s, y = xn - x, -(gn - g)
        if s @ y > 1e-12 * (np.linalg.norm(s) * np.linalg.norm(y) + 1e-300):
            mem_s.append(s)
            mem_y.append(y)
            if len(mem_s) > cfg.memory:
                mem_s.pop(0)
                mem_y.pop(0)
        x, fx, g = xn, fn_x, gn
    return x, fx


def refine_stage(p: SynthesisProblem, init, cfg: RefineConfig = RefineConfig()):
    scn = p.scenario
    x0 = np.asarray(init, float).ravel()
    if np.any(x0 < scn.lower_bounds()) or np.any(x0 > scn.upper_bounds()):
        raise ValueError("initial controls lie outside the box")
    x, val = refine_maximize(_problem_fn(p), x0, scn.lower_bounds(), scn.upper_bounds(), cfg)
    return x.reshape(scn.control_shape), val


# -- driver -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SynthesisResult:
    controls: np.ndarray
    trace: TeamTrace
    objective: float
    robustness: float
    cost: float
    success: bool
    evaluations: int
    wall_time: float
    method: str = HYBRID


def synthesize(p: SynthesisProblem, method: str = HYBRID, pso_cfg: PsoConfig = PsoConfig(),
               refine_cfg: RefineConfig = RefineConfig(), seed: Optional[int] = None
               ) -> SynthesisResult:
    """Solve with ``grad`` (refine from a random start), ``pso`` or ``hybrid``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if seed is not None:
        pso_cfg = PsoConfig(**{**pso_cfg.__dict__, "seed": seed})
    scn = p.scenario
    lo, hi = scn.lower_bounds(), scn.upper_bounds()
    fn = _problem_fn(p)
    t0 = time.perf_counter()
    if method == GRAD:
        x0 = np.random.default_rng(pso_cfg.seed).uniform(lo, hi)
        x, _ = refine_maximize(fn, x0, lo, hi, refine_cfg)
    else:
        x, _ = pso_maximize(fn, lo, hi, pso_cfg)
        if method == HYBRID:
            x, _ = refine_maximize(fn, x, lo, hi, refine_cfg)
    wall = time.perf_counter() - t0
    u = x.reshape(scn.control_shape)
    trace = rollout(scn, u)
    obj, rho, cost = objective(p, u)
    return SynthesisResult(controls=u, trace=trace, objective=obj, robustness=rho, cost=cost,
                           success=bool(rho >= p.eps_min), evaluations=fn.calls,
                           wall_time=wall, method=method)
