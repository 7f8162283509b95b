"""Scenario files: a JSON document describing team, connectivity, formula and knobs."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Optional

import jsonschema
import numpy as np

from . import formula as fm
from .dataset import InitSampler
from .semantics import SemanticsConfig
from .spatial import ConnectivityPolicy, Scenario
from .synthesis import SynthesisProblem

SCENARIO_VERSION = 1

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}

SCHEMA = {
    "type": "object",
    "required": ["version", "N", "dim", "attributes", "initialPositions", "controllable",
                 "controlBox", "connectivity", "horizon", "formula"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": SCENARIO_VERSION},
        "name": {"type": "string"},
        "N": {"type": "integer", "minimum": 1},
        "dim": {"type": "integer", "minimum": 1},
        "attributes": {"type": "array", "items": {"type": "string"}},
        "attributeLabels": {"type": "array", "items": {"type": "string"}},
        "initialPositions": {"type": "array", "items": _VEC},
        "controllable": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "controlBox": {
            "type": "object", "required": ["lo", "hi"], "additionalProperties": False,
            "properties": {"lo": {"oneOf": [_NUM, _VEC]}, "hi": {"oneOf": [_NUM, _VEC]}},
        },
        "connectivity": {
            "type": "object", "required": ["range"], "additionalProperties": False,
            "properties": {"range": {"type": "number", "exclusiveMinimum": 0},
                           "voronoi": {"type": "boolean"}},
        },
        "horizon": {"type": "integer", "minimum": 1},
        "formula": {"type": "string"},
        "gamma": {"type": "number", "minimum": 0},
        "epsMin": {"type": "number", "exclusiveMinimum": 0},
        "semantics": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "beta": {"type": "number", "exclusiveMinimum": 0},
                "kDist": {"type": "number", "exclusiveMinimum": 0},
                "kRoutes": {"type": "number", "exclusiveMinimum": 0},
                "kAg": {"type": "number", "exclusiveMinimum": 0},
                "maxRouteLen": {"type": ["integer", "null"], "minimum": 1},
                "rhoMax": {"type": "number", "exclusiveMinimum": 0},
                "countingMode": {"enum": ["original", "counting"]},
                "smooth": {"type": "boolean"},
                "zeroRouteTie": {"enum": ["violating", "satisfying"]},
                "flipAgSign": {"type": "boolean"},
                "surroundVariant": {"enum": list(fm.SURROUND_VARIANTS)},
            },
        },
        "sampler": {
            "type": "object", "required": ["regions"], "additionalProperties": False,
            "properties": {
                "regions": {"type": "array",
                            "items": {"type": "array", "items": _VEC,
                                      "minItems": 2, "maxItems": 2}},
                "seed": {"type": "integer"},
            },
        },
    },
}

_SEM_KEYS = {"beta": "beta", "kDist": "k_dist", "kRoutes": "k_routes", "kAg": "k_ag",
             "maxRouteLen": "max_route_len", "rhoMax": "rho_max",
             "countingMode": "counting_mode", "smooth": "smooth",
             "zeroRouteTie": "zero_route_tie", "flipAgSign": "flip_ag_sign",
             "surroundVariant": "surround_variant"}


class ScenarioError(ValueError):
    """Scenario document fails schema or consistency checks."""


@dataclass(frozen=True, eq=False)
class ScenarioFile:
    problem: SynthesisProblem
    labels: tuple
    sampler: Optional[InitSampler]
    doc: dict

    @property
    def scenario(self) -> Scenario:
        return self.problem.scenario


def semantics_from_dict(d: dict, **overrides) -> SemanticsConfig:
    kw = {_SEM_KEYS[k]: v for k, v in d.items()}
    kw.update(overrides)
    return SemanticsConfig(**kw)


def from_dict(doc: dict, formula_text: Optional[str] = None) -> ScenarioFile:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as e:
        raise ScenarioError(f"scenario schema: {e.message}") from None
    n, dim = doc["N"], doc["dim"]
    if len(doc["attributes"]) != n or len(doc["initialPositions"]) != n:
        raise ScenarioError("attributes and initialPositions need one entry per agent")
    if any(len(q) != dim for q in doc["initialPositions"]):
        raise ScenarioError(f"every initial position needs {dim} coordinates")
    labels = tuple(doc.get("attributeLabels") or sorted(set(doc["attributes"])))
    if not set(doc["attributes"]) <= set(labels):
        raise ScenarioError("attributes must be drawn from attributeLabels")
    try:
        scn = Scenario(tuple(doc["attributes"]), np.array(doc["initialPositions"], float),
                       tuple(doc["controllable"]), doc["controlBox"]["lo"],
                       doc["controlBox"]["hi"],
                       ConnectivityPolicy(doc["connectivity"]["range"],
                                          doc["connectivity"].get("voronoi", True)),
                       doc["horizon"])
        f = fm.parse(formula_text if formula_text is not None else doc["formula"], labels)
        sem = semantics_from_dict(doc.get("semantics", {}))
        prob = SynthesisProblem(scn, f, doc.get("gamma", 0.0), sem, doc.get("epsMin", 1e-3))
    except fm.FormulaSyntaxError:
        raise
    except ValueError as e:
        raise ScenarioError(str(e)) from None
    sampler = None
    if "sampler" in doc:
        try:
            sampler = InitSampler(tuple((lo, hi) for lo, hi in doc["sampler"]["regions"]),
                                  doc["sampler"].get("seed", 0))
        except ValueError as e:
            raise ScenarioError(str(e)) from None
        if len(sampler.regions) != len(scn.controllable):
            raise ScenarioError("sampler needs one region per controllable agent")
    return ScenarioFile(prob, labels, sampler, doc)


def load(path, formula_text: Optional[str] = None) -> ScenarioFile:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ScenarioError(f"{path}: invalid JSON: {e}") from None
    return from_dict(doc, formula_text)


def bundled(name: str) -> dict:
    """A scenario document shipped with the package (``case_study``, ``fixture``)."""
    text = resources.files("strelnet").joinpath("data", f"{name}.json").read_text()
    return json.loads(text)


def load_bundled(name: str, formula_text: Optional[str] = None) -> ScenarioFile:
    return from_dict(bundled(name), formula_text)
