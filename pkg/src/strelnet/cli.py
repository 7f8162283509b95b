"""Command-line interface: monitor, synth, dataset, train, eval, bench.

Exit codes: 0 success/satisfied, 1 violated/unsatisfied, 2 usage, 3 I/O or schema.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import dataset as ds
from . import formula as fm
from . import neuro
from . import scenario as sc
from .semantics import COUNTING, ORIGINAL, Monitor
from .spatial import TeamTrace, connection_graphs, read_trace_csv, rollout, write_trace_csv
from .synthesis import GRAD, HYBRID, METHODS, PSO, PsoConfig, RefineConfig, synthesize

EXIT_OK, EXIT_VIOLATED, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, msg, code=EXIT_IO):
        super().__init__(msg)
        self.code = code


def master_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("STREL_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"STREL_SEED must be an integer, got {env!r}", EXIT_USAGE) from None


def derive_seeds(seed: int, count: int) -> list:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _load_scenario(args) -> sc.ScenarioFile:
    sf = sc.load(args.scenario, getattr(args, "formula", None))
    sem = sf.problem.semantics
    if getattr(args, "semantics", None) in (ORIGINAL, COUNTING):
        sem = replace(sem, counting_mode=args.semantics)
    if getattr(args, "smooth", None) is not None:
        sem = replace(sem, smooth=args.smooth == "on")
    if sem is not sf.problem.semantics:
        prob = replace_problem(sf.problem, semantics=sem)
        sf = sc.ScenarioFile(prob, sf.labels, sf.sampler, sf.doc)
    return sf


def replace_problem(p, **kw):
    from .synthesis import SynthesisProblem
    fields = dict(scenario=p.scenario, formula=p.formula, gamma=p.gamma,
                  semantics=p.semantics, eps_min=p.eps_min)
    fields.update(kw)
    return SynthesisProblem(**fields)


def _pso_cfg(args, seed):
    return PsoConfig(particles=args.particles, iterations=args.pso_iterations, seed=seed)


def _refine_cfg(args):
    return RefineConfig(max_iters=args.refine_iterations)


# -- monitor ---------------------------------------------------------------------

def cmd_monitor(args) -> int:
    sf = _load_scenario(args)
    p = sf.problem
    trace = read_trace_csv(args.trace) if args.trace else rollout(
        sf.scenario, np.zeros(sf.scenario.control_shape))
    if trace.attributes != sf.scenario.attributes:
        raise CliError("trace attributes do not match the scenario")
    graphs = connection_graphs(trace, sf.scenario.connectivity)
    modes = [ORIGINAL, COUNTING] if args.semantics == "both" else [p.semantics.counting_mode]
    team_value = None
    for mode in modes:
        cfg = replace(p.semantics, counting_mode=mode)
        mon = Monitor(trace, graphs, cfg)
        rep = mon.team(p.formula, args.at)
        agents = range(trace.n_agents) if args.agent is None else [args.agent]
        for l in agents:
            print(f"{mode} agent {l} robustness {rep.per_agent[l]:.17g}")
        print(f"{mode} team robustness {rep.team:.17g} (ag+={rep.ag_plus} ag-={rep.ag_minus} "
              f"sigma_ag={rep.sigma_ag:.6g})")
        if cfg.smooth:
            hard = Monitor(trace, graphs, replace(cfg, smooth=False)).team(p.formula, args.at)
            print(f"{mode} hard team robustness {hard.team:.17g}")
        if mode == p.semantics.counting_mode or team_value is None:
            team_value = rep.team
    return EXIT_OK if team_value >= 0 else EXIT_VIOLATED


# -- synth -------------------------------------------------------------------------

def _controls_doc(res, seed):
    return {"method": res.method, "seed": seed, "robustness": res.robustness,
            "cost": res.cost, "objective": res.objective, "success": res.success,
            "controls": res.controls.tolist()}


def cmd_synth(args) -> int:
    sf = _load_scenario(args)
    seed = master_seed(args)
    print(f"master seed {seed}")
    res = synthesize(sf.problem, args.method, _pso_cfg(args, seed), _refine_cfg(args), seed=seed)
    print(f"method {res.method} robustness {res.robustness:.17g} cost {res.cost:.17g} "
          f"objective {res.objective:.17g} success {res.success} "
          f"evaluations {res.evaluations} seconds {res.wall_time:.3f}")
    if args.out:
        trace_path, ctrl_path = args.out + ".trace.csv", args.out + ".controls.json"
        write_trace_csv(res.trace, trace_path)
        with open(ctrl_path, "w") as fh:
            json.dump(_controls_doc(res, seed), fh)
        if read_trace_csv(trace_path) != res.trace:
            raise CliError(f"{trace_path}: re-read does not match the written trace")
        with open(ctrl_path) as fh:
            if not np.array_equal(np.array(json.load(fh)["controls"]), res.controls):
                raise CliError(f"{ctrl_path}: re-read does not match the written controls")
        print(f"wrote {trace_path} {ctrl_path}")
    return EXIT_OK if res.success else EXIT_VIOLATED


# -- dataset / train / eval ------------------------------------------------------------

def _require_sampler(sf):
    if sf.sampler is None:
        raise CliError("scenario has no sampler regions")
    return sf.sampler


def cmd_dataset(args) -> int:
    sf = _load_scenario(args)
    seed = master_seed(args)
    print(f"master seed {seed}")
    sampler = replace(_require_sampler(sf), seed=seed)
    records, summary = ds.generate(sf.problem, sampler, args.M, args.method,
                                   _pso_cfg(args, seed), _refine_cfg(args), args.retries)
    ds.save(records, args.out, sf.problem)
    if ds.load(args.out).records != records:
        raise CliError(f"{args.out}: re-read does not match the written dataset")
    print(f"kept {summary.kept} of {summary.attempted} (failed {summary.failed}) "
          f"solve seconds {summary.seconds:.1f}; wrote {args.out}")
    return EXIT_OK if records else EXIT_VIOLATED


def training_arrays(records, sf, include_adjacency=True):
    """Inputs (H, S, in) and targets (H, S, out) from dataset records."""
    scn = sf.scenario
    xs, ys = [], []
    for r in records:
        xs.append(neuro.encode_trace(r.trace.positions[:-1], scn.attributes, sf.labels,
                                     scn.connectivity, include_adjacency))
        ys.append(r.controls.reshape(r.controls.shape[0], -1))
    return np.stack(xs, axis=1), np.stack(ys, axis=1)


def train_model(records, sf, cfg: neuro.TrainConfig, dataset_hash: str):
    xs, ys = training_arrays(records, sf, cfg.include_adjacency)
    scn = sf.scenario
    model = neuro.init_model(xs.shape[2], ys.shape[2], cfg.hidden, seed=cfg.seed)
    neuro.fit_normalization(model, xs, float(np.max(np.abs(
        np.concatenate([scn.control_lo, scn.control_hi])))))
    curve = neuro.train(model, xs, ys, cfg)
    model.meta = {"datasetHash": dataset_hash, "labels": list(sf.labels),
                  "includeAdjacency": cfg.include_adjacency}
    return model, curve


def cmd_train(args) -> int:
    sf = _load_scenario(args)
    data = ds.load(args.data, expect_hash=ds.scenario_hash(sf.problem))
    if not data.records:
        raise CliError(f"{args.data}: dataset is empty; no model written", EXIT_VIOLATED)
    seed = master_seed(args)
    print(f"master seed {seed}")
    cfg = neuro.TrainConfig(epochs=args.epochs, learning_rate=args.lr,
                            batch_size=args.batch_size, seed=seed,
                            hidden=tuple([args.width] * args.layers),
                            include_adjacency=not args.no_adjacency)
    model, curve = train_model(data.records, sf, cfg, data.header["scenarioHash"])
    neuro.save(model, args.out)
    reloaded = neuro.load(args.out)
    if any(not np.array_equal(reloaded.params[k], v) for k, v in model.params.items()):
        raise CliError(f"{args.out}: re-read does not match the written model")
    print(f"epochs {len(curve)} final loss {curve[-1] if curve else float('nan'):.6g}; "
          f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    sf = _load_scenario(args)
    model = neuro.load(args.model)
    want = ds.scenario_hash(sf.problem)
    if model.meta.get("datasetHash") not in (None, want):
        raise CliError("model was trained for a different scenario")
    seed = master_seed(args)
    print(f"master seed {seed}")
    sampler = replace(_require_sampler(sf), seed=seed)
    probs = sampler.problems(sf.problem, args.inits)
    inits = [p.scenario.initial_positions for _, p in probs]
    rep = neuro.evaluate(model, sf.problem, inits, model.meta.get("labels", sf.labels),
                         model.meta.get("includeAdjacency", True))
    if rep.runs == 0:
        print("runs 0 (no initializations)")
        return EXIT_OK
    print(f"runs {rep.runs} successes {rep.successes} success rate {rep.success_rate:.4f} "
          f"mean robustness {rep.mean_robustness:.6g} "
          f"mean inference seconds {rep.mean_inference_time:.6g}")
    if args.compare > 0:
        times = [synthesize(p, HYBRID, _pso_cfg(args, s), _refine_cfg(args), seed=s).wall_time
                 for s, p in probs[:args.compare]]
        print(f"hybrid mean solve seconds {np.mean(times):.6g} ratio "
              f"{np.mean(times) / rep.mean_inference_time:.1f}")
    return EXIT_OK if rep.success_rate >= 0.5 else EXIT_VIOLATED


# -- bench -------------------------------------------------------------------------------

def _bench_job(job):
    p, method, pso_cfg, refine_cfg, seed = job
    r = synthesize(p, method, pso_cfg, refine_cfg, seed=seed)
    return r.success, r.robustness, r.wall_time


def run_bench(sf, runs, methods, semantics, seed, pso_cfg, refine_cfg, jobs=1):
    """Rows {method, semantics, runs, successes, successRate, meanRobustness, meanSeconds}."""
    sampler = replace(_require_sampler(sf), seed=seed)
    probs = sampler.problems(sf.problem, runs)
    rows = []
    for sem in semantics:
        for method in methods:
            jobs_ = []
            for s, p in probs:
                p2 = replace_problem(p, semantics=replace(p.semantics, counting_mode=sem))
                jobs_.append((p2, method, replace(pso_cfg, seed=s), refine_cfg, s))
            out = _map(_bench_job, jobs_, jobs)
            ok = [o[0] for o in out]
            good = [o[1] for o in out if o[0]]
            rows.append({"method": method, "semantics": sem, "runs": runs,
                         "successes": int(sum(ok)), "successRate": sum(ok) / runs,
                         "meanRobustness": float(np.mean(good)) if good else float("nan"),
                         "meanSeconds": float(np.mean([o[2] for o in out]))})
    return rows


def cmd_bench(args) -> int:
    sf = _load_scenario(args)
    seed = master_seed(args)
    print(f"master seed {seed}")
    methods = args.methods.split(",")
    if any(m not in METHODS for m in methods):
        raise CliError(f"methods must be drawn from {METHODS}", EXIT_USAGE)
    sems = [ORIGINAL, COUNTING] if args.semantics == "both" else [args.semantics]
    rows = run_bench(sf, args.runs, methods, sems, seed, _pso_cfg(args, seed),
                     _refine_cfg(args), args.jobs)
    fields = ["method", "semantics", "runs", "successes", "successRate", "meanRobustness",
              "meanSeconds"]
    for r in rows:
        print(",".join(str(r[k]) for k in fields))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
        with open(args.out) as fh:
            if len(list(csv.DictReader(fh))) != len(rows):
                raise CliError(f"{args.out}: re-read row count mismatch")
        print(f"wrote {args.out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="strelnet", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, semantics=True):
        p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--formula", help="override the scenario formula")
        p.add_argument("--seed", type=int, help="master seed (fallback: $STREL_SEED, then 0)")
        p.add_argument("--jobs", type=int, default=1)
        if semantics:
            p.add_argument("--semantics", choices=[ORIGINAL, COUNTING])
        p.add_argument("--smooth", choices=["on", "off"])

    def solver(p):
        p.add_argument("--method", choices=list(METHODS), default=HYBRID)
        p.add_argument("--particles", type=int, default=64)
        p.add_argument("--pso-iterations", type=int, default=50)
        p.add_argument("--refine-iterations", type=int, default=30)

    p = sub.add_parser("monitor", help="robustness of a trace")
    common(p, semantics=False)
    p.add_argument("--semantics", choices=[ORIGINAL, COUNTING, "both"])
    p.add_argument("--trace", help="trace CSV (default: the scenario held still)")
    p.add_argument("--agent", type=int)
    p.add_argument("--team", action="store_true", help="team robustness (always printed)")
    p.add_argument("--at", type=int, default=0)
    p.set_defaults(fn=cmd_monitor)

    p = sub.add_parser("synth", help="synthesize controls for one scenario")
    common(p)
    solver(p)
    p.add_argument("--out", help="output prefix for <out>.trace.csv and <out>.controls.json")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("dataset", help="generate satisfying trajectories")
    common(p)
    solver(p)
    p.add_argument("--M", type=int, required=True)
    p.add_argument("--retries", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("train", help="train the LSTM controller")
    common(p)
    p.add_argument("data")
    p.add_argument("--epochs", type=int, default=700)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--no-adjacency", action="store_true",
                   help="leave the flattened adjacency out of the network input")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation of a trained controller")
    common(p)
    solver(p)
    p.add_argument("model")
    p.add_argument("--inits", type=int, default=30)
    p.add_argument("--compare", type=int, default=0,
                   help="also time Hybrid synthesis on this many of the inits")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="success rates per method and semantics")
    common(p, semantics=False)
    solver(p)
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--semantics", choices=[ORIGINAL, COUNTING, "both"], default="both")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except fm.FormulaSyntaxError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
