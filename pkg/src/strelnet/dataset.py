"""Batches of satisfying state-control trajectories for imitation learning."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

import jsonschema
import numpy as np

from . import formula as fm
from .synthesis import (HYBRID, PsoConfig, RefineConfig, SynthesisProblem, robustness_of_trace,
                        synthesize)
from .spatial import TeamTrace, rollout

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Malformed, truncated or incompatible dataset file."""


@dataclass(frozen=True)
class InitSampler:
    """Uniform initial positions for controllable agents inside per-agent boxes.

    ``regions`` maps each controllable agent, in the scenario's order, to a
    ``(lo, hi)`` box; uncontrollable agents keep their scenario positions.
    """

    regions: tuple
    seed: int = 0

    def __post_init__(self):
        regs = []
        for lo, hi in self.regions:
            lo, hi = tuple(map(float, lo)), tuple(map(float, hi))
            if len(lo) != len(hi) or any(a > b for a, b in zip(lo, hi)):
                raise ValueError("sampling region needs lo <= hi on every axis")
            regs.append((lo, hi))
        object.__setattr__(self, "regions", tuple(regs))

    def sample(self, p: SynthesisProblem, rng: np.random.Generator) -> np.ndarray:
        scn = p.scenario
        if len(self.regions) != len(scn.controllable):
            raise ValueError("need one sampling region per controllable agent")
        q = scn.initial_positions.copy()
        for agent, (lo, hi) in zip(scn.controllable, self.regions):
            if len(lo) != scn.dim:
                raise ValueError("sampling region dimension does not match the scenario")
            q[agent] = rng.uniform(lo, hi)
        return q

    def init_seeds(self, count: int) -> list:
        return [int(s) for s in np.random.SeedSequence(self.seed).generate_state(count)]

    def problems(self, p: SynthesisProblem, count: int) -> list:
        """``count`` (seed, problem) pairs with sampled initial positions."""
        out = []
        for s in self.init_seeds(count):
            q = self.sample(p, np.random.default_rng(s))
            out.append((s, p.with_scenario(p.scenario.with_initial_positions(q))))
        return out


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    trace: TeamTrace
    controls: np.ndarray
    robustness: float
    seed: int
    init_id: int

    def __eq__(self, other):
        return (isinstance(other, DatasetRecord) and self.trace == other.trace
                and np.array_equal(self.controls, other.controls)
                and self.robustness == other.robustness and self.seed == other.seed
                and self.init_id == other.init_id)


@dataclass(frozen=True)
class GenerationSummary:
    attempted: int
    kept: int
    failed: int
    seconds: float


def generate(p: SynthesisProblem, sampler: InitSampler, m: int, method: str = HYBRID,
             pso_cfg: PsoConfig = PsoConfig(), refine_cfg: RefineConfig = RefineConfig(),
             retries: int = 0):
    """Solve ``m`` sampled initializations; keep the ones meeting ``eps_min``.

    Returns ``(records, summary)``.  Failed solves are retried up to
    ``retries`` times with a fresh optimizer seed, then excluded.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    records, failed, seconds = [], 0, 0.0
    for init_id, (seed, prob) in enumerate(sampler.problems(p, m)):
        for attempt in range(retries + 1):
            run_seed = seed if attempt == 0 else int(
                np.random.SeedSequence([seed, attempt]).generate_state(1)[0])
            res = synthesize(prob, method, pso_cfg, refine_cfg, seed=run_seed)
            seconds += res.wall_time
            if res.success:
                records.append(DatasetRecord(res.trace, res.controls, res.robustness,
                                             run_seed, init_id))
                break
        else:
            failed += 1
    return records, GenerationSummary(m, len(records), failed, seconds)


def verify(p: SynthesisProblem, rec: DatasetRecord, tol: float = 1e-9) -> bool:
    """Re-roll the controls and re-evaluate robustness independently."""
    scn = p.scenario.with_initial_positions(rec.trace.positions[0])
    trace = rollout(scn, rec.controls)
    if trace != rec.trace:
        return False
    rho = robustness_of_trace(p, trace)
    return abs(rho - rec.robustness) <= tol and rho >= p.eps_min


# -- persistence ----------------------------------------------------------------

def scenario_hash(p: SynthesisProblem) -> str:
    """Digest of everything a record depends on except the sampled start positions."""
    scn = p.scenario
    fixed = [i for i in range(scn.n_agents) if i not in scn.controllable]
    doc = {
        "attributes": list(scn.attributes),
        "fixedPositions": scn.initial_positions[fixed].tolist(),
        "controllable": list(scn.controllable),
        "controlBox": [scn.control_lo.tolist(), scn.control_hi.tolist()],
        "connectivity": [scn.connectivity.range, scn.connectivity.voronoi],
        "horizon": scn.horizon,
        "formula": fm.format(p.formula),
        "gamma": p.gamma,
        "semantics": asdict(p.semantics),
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class Dataset:
    header: dict
    records: list


_HEADER_SCHEMA = {
    "type": "object",
    "required": ["version", "scenarioHash", "epsMin", "semantics", "attributes", "count"],
    "properties": {
        "version": {"const": FORMAT_VERSION},
        "scenarioHash": {"type": "string"},
        "epsMin": {"type": "number"},
        "semantics": {"type": "object"},
        "attributes": {"type": "array", "items": {"type": "string"}},
        "count": {"type": "integer", "minimum": 0},
    },
}

_RECORD_SCHEMA = {
    "type": "object",
    "required": ["initId", "seed", "robustness", "controls", "trace"],
    "properties": {
        "initId": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "robustness": {"type": "number"},
        "controls": {"type": "array"},
        "trace": {"type": "array"},
    },
}


def make_header(p: SynthesisProblem, count: int) -> dict:
    return {"version": FORMAT_VERSION, "scenarioHash": scenario_hash(p), "epsMin": p.eps_min,
            "semantics": asdict(p.semantics), "attributes": list(p.scenario.attributes),
            "count": count}


def save(records, path, p: Optional[SynthesisProblem] = None, header: Optional[dict] = None):
    """Write a header line then one JSON object per record (floats round-trip exactly)."""
    if header is None:
        if p is None:
            raise ValueError("need a problem or an explicit header")
        header = make_header(p, len(records))
    header = {**header, "count": len(records)}
    jsonschema.validate(header, _HEADER_SCHEMA)
    lines = [json.dumps(header)]
    for r in records:
        lines.append(json.dumps({"initId": r.init_id, "seed": r.seed,
                                 "robustness": r.robustness,
                                 "controls": r.controls.tolist(),
                                 "trace": r.trace.positions.tolist()}))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load(path, expect_hash: Optional[str] = None) -> Dataset:
    with open(path) as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    if not lines:
        raise DatasetError(f"{path}: empty file, no header")
    try:
        header = json.loads(lines[0])
        jsonschema.validate(header, _HEADER_SCHEMA)
    except (json.JSONDecodeError, jsonschema.ValidationError) as e:
        raise DatasetError(f"{path}: bad header: {e}") from None
    if expect_hash is not None and header["scenarioHash"] != expect_hash:
        raise DatasetError(f"{path}: dataset was generated for a different scenario")
    if len(lines) - 1 != header["count"]:
        raise DatasetError(f"{path}: expected {header['count']} records, "
                           f"found {len(lines) - 1} (truncated?)")
    attrs = tuple(header["attributes"])
    records = []
    for i, ln in enumerate(lines[1:], start=2):
        try:
            d = json.loads(ln)
            jsonschema.validate(d, _RECORD_SCHEMA)
            pos = np.array(d["trace"], dtype=float)
            u = np.array(d["controls"], dtype=float)
            if pos.ndim != 3 or u.ndim != 3 or pos.shape[0] != u.shape[0] + 1:
                raise ValueError("trace/controls shapes are inconsistent")
            records.append(DatasetRecord(TeamTrace(pos, attrs), u, float(d["robustness"]),
                                         int(d["seed"]), int(d["initId"])))
        except (json.JSONDecodeError, jsonschema.ValidationError, ValueError) as e:
            raise DatasetError(f"{path}:{i}: bad record: {e}") from None
    return Dataset(header, records)
