"""
Subcommand handlers.
Each handler resolves a run, writes its artifacts under --out and returns an exit code.
"""
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from src import __version__
from src.config import settings
from src.exceptions import ConfigError
from src.models.config import ModelConfig, RunConfig
from src.models.results import RunManifest
from src.services.lln import Study, run_experiment
from src.services.operators import H_transform_quadruple, SpaceTimeWeight
from src.services.particles import simulate_ensemble
from src.services.pde import expectation_flow, variance_weighted_mass
from src.services.registry import build_model, model_service, registry
from src.utils.ensemble import canonical_json, stable_hash

logger = logging.getLogger(__name__)

MAX_RAW_ROWS = 1_000_000
EXIT_PASS = 0
EXIT_VERDICT_FAIL = 2


def _jsonable(value: Any) -> Any:
    """Plain JSON types; non-finite floats become strings."""
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isfinite(value):
            return value
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def dump_json(payload: Any) -> str:
    return json.dumps(_jsonable(payload), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


class ArtifactWriter:
    """Writes artifacts under one directory, manifest first and last."""

    def __init__(self, out: Path, config_hash: str, master_seed: int):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(config_hash=config_hash, master_seed=master_seed, version=__version__)
        self._write_manifest()

    def _write_manifest(self):
        (self.out / "manifest.json").write_text(dump_json(self.manifest.model_dump()), encoding="utf-8")

    def _register(self, name: str, data: bytes):
        (self.out / name).write_bytes(data)
        self.manifest.outputs[name] = hashlib.sha256(data).hexdigest()
        logger.info(f"Wrote {self.out / name}")

    def csv(self, name: str, frame: pd.DataFrame):
        text = frame.to_csv(index=False, float_format="%.12g", lineterminator="\r\n")
        self._register(name, text.encode("utf-8"))

    def json(self, name: str, payload: Any):
        self._register(name, dump_json(payload).encode("utf-8"))

    def close(self) -> RunManifest:
        self._write_manifest()
        return self.manifest


@dataclass
class Invocation:
    """A parsed command line: the subcommand, its resolved run and the output directory."""

    subcommand: str
    run: RunConfig
    out: Path
    analytic: bool = False

    @property
    def model(self) -> ModelConfig:
        if self.run.model is not None:
            return self.run.model
        return build_model(self.run.model_name, self.run.parameters)

    @property
    def seed(self) -> int:
        return self.run.simulation.seed

    @property
    def config_hash(self) -> str:
        return stable_hash({"subcommand": self.subcommand, "analytic": self.analytic,
                            "run": self.run.model_dump(mode="json")})


def load_run_config(path: Optional[str], overrides: Dict[str, Any]) -> RunConfig:
    """Read a JSON run document and apply command-line overrides on top of it."""
    document: Dict[str, Any] = {}
    if path:
        try:
            document = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    for section in ("simulation", "experiment"):
        values = {key: value for key, value in overrides.get(section, {}).items() if value is not None}
        if values:
            document[section] = {**document.get(section, {}), **values}
    for key in ("model_name", "grid_size", "dt"):
        if overrides.get(key) is not None:
            document[key] = overrides[key]
    if overrides.get("model_name") is not None:
        document.pop("model", None)
    if overrides.get("parameters"):
        document["parameters"] = {**document.get("parameters", {}), **overrides["parameters"]}
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"invalid run config: {e}") from e


def _study(invocation: Invocation) -> Study:
    run = invocation.run
    model = invocation.model
    triple = model_service.ground_state(model, run.grid_size, invocation.analytic)
    return Study.build(model, run.simulation, run.experiment, run.grid_size, run.dt, triple)


def spectral_command(invocation: Invocation, writer: ArtifactWriter) -> int:
    model = invocation.model
    triple = model_service.ground_state(model, invocation.run.grid_size, invocation.analytic)
    summary = triple.summary()
    summary.update({"model": model.name, "expected_lambda": model.expected_lambda,
                    "backward_error": triple.backward_error, "normalization": triple.normalization})
    writer.json("spectral.json", summary)
    writer.csv("truncations.csv", pd.DataFrame(triple.truncation_rows(),
                                               columns=["left", "right", "lambda", "integral_phi_phi_tilde"]))
    writer.csv("ground_state.csv", pd.DataFrame({
        "x": triple.phi_c.nodes, "phi": triple.phi_c.values, "phi_tilde": triple.phi_tilde_c.values,
    }))
    return EXIT_PASS


def moments_command(invocation: Invocation, writer: ArtifactWriter) -> int:
    study = _study(invocation)
    name, g = study.test_functions()[0]
    times = [0.0] + [t for t in study.experiment.t_grid if t > 0]
    flow = expectation_flow(study.Q, g, times, study.dt)
    means = [study.mu.pair(snapshot) for snapshot in flow.snapshots]
    formula, bound = [np.nan] * len(times), [np.nan] * len(times)
    if study.lam > 0:
        for k, t in enumerate(times):
            result = variance_weighted_mass(study.Q, study.triple, study.mu, t, study.dt)
            formula[k], bound[k] = result.value, result.bound
    else:
        logger.warning(f"lambda_c = {study.lam:.4g} <= 0: variance formula columns left empty")
    writer.csv("moments.csv", pd.DataFrame({
        "t": flow.times, "mean": means, "variance_formula": formula, "variance_bound": bound,
    }))
    matrix = pd.DataFrame(np.array([snapshot.values for snapshot in flow.snapshots]),
                          columns=[f"{x:.12g}" for x in g.nodes])
    matrix.insert(0, "t", flow.times)
    writer.csv("snapshots.csv", matrix)
    writer.json("moments.json", {"function": name, "lambda_c": study.lam, "level": study.level})
    return EXIT_PASS


def simulate_command(invocation: Invocation, writer: ArtifactWriter) -> int:
    run = invocation.run
    model = invocation.model
    Q = model.quadruple()
    lo, hi = Q.domain.largest
    grid_size = run.grid_size or settings.grid_size
    mu = model.initial.build(lo, hi, grid_size)
    specs = run.experiment.test_functions
    functions = [spec.build(lo, hi, grid_size) for spec in specs if spec.kind != "ground-state"]
    names = [spec.name for spec in specs if spec.kind != "ground-state"]

    def observe(snapshot):
        columns = [snapshot.total_mass(), snapshot.counts()] + [snapshot.pair(f) for f in functions]
        return np.column_stack(columns)

    ensemble = simulate_ensemble(Q, mu, run.simulation, observe)
    rows = []
    for replicate in range(ensemble.replicates):
        for k, t in enumerate(ensemble.times):
            values = ensemble.values[replicate, k]
            row = {"replicate": replicate, "t": t, "mass": values[0], "particles": int(values[1])}
            row.update({name: values[2 + column] for column, name in enumerate(names)})
            rows.append(row)
    writer.csv("snapshots.csv", pd.DataFrame(rows))
    if run.simulation.raw_positions:
        total = sum(cloud.alive_count for cloud in ensemble.raw)
        if total > MAX_RAW_ROWS:
            logger.warning(f"raw dump of {total} positions exceeds {MAX_RAW_ROWS}; skipped")
        else:
            writer.csv("positions.csv", pd.DataFrame({
                "t": np.concatenate([np.full(cloud.alive_count, cloud.time) for cloud in ensemble.raw]),
                "x": np.concatenate([cloud.positions for cloud in ensemble.raw]),
            }))
    return EXIT_PASS


def transform_command(invocation: Invocation, writer: ArtifactWriter) -> int:
    model = invocation.model
    triple = model_service.ground_state(model, invocation.run.grid_size, invocation.analytic)
    Q = model.quadruple()
    transformed = H_transform_quadruple(Q, SpaceTimeWeight.ground_state(triple.phi_c, triple.lambda_c))
    nodes = triple.phi_c.nodes[1:-1]
    beta = transformed.beta(nodes, 0.0)
    writer.csv("transform.csv", pd.DataFrame({
        "x": nodes,
        "b_tilde": transformed.L.b(nodes, 0.0),
        "beta_tilde": beta,
        "alpha_tilde": transformed.alpha(nodes, 0.0),
    }))
    lo, hi = triple.phi_c.left, triple.phi_c.right
    margin = 0.1 * (hi - lo)
    window = (nodes > lo + margin) & (nodes < hi - margin)
    max_abs_beta = float(np.max(np.abs(beta[window])))
    tolerance = max(10.0 * triple.residual, 1e-8)
    passed = max_abs_beta <= tolerance
    writer.json("transform.json", {"max_abs_beta": max_abs_beta, "residual": triple.residual,
                                   "tolerance": tolerance, "pass": passed, "analytic": invocation.analytic})
    logger.info(f"H-transform: max |beta~| = {max_abs_beta:.3e} (tolerance {tolerance:.3e})")
    return EXIT_PASS if passed else EXIT_VERDICT_FAIL


def verify_command(invocation: Invocation, writer: ArtifactWriter) -> int:
    outcome = run_experiment(_study(invocation))
    for name, table in sorted(outcome.tables.items()):
        writer.csv(f"{name}.csv", table)
    writer.json("verdict.json", outcome.verdict.model_dump(by_alias=True))
    return EXIT_PASS if outcome.passed else EXIT_VERDICT_FAIL


def models_command(invocation: Invocation, writer: ArtifactWriter) -> int:
    writer.json("models.json", [
        {
            "name": model.name,
            "parameters": model.parameters,
            "domain": list(model.domain),
            "expected_lambda": model.expected_lambda,
            "product_critical": model.product_critical,
            "provenance": model.provenance,
        }
        for model in registry()
    ])
    return EXIT_PASS


COMMANDS: Dict[str, Callable[[Invocation, ArtifactWriter], int]] = {
    "spectral": spectral_command,
    "moments": moments_command,
    "simulate": simulate_command,
    "transform": transform_command,
    "verify": verify_command,
    "models": models_command,
}


def execute(invocation: Invocation) -> Tuple[int, RunManifest]:
    """Run a subcommand and return its exit code with the final manifest."""
    writer = ArtifactWriter(invocation.out, invocation.config_hash, invocation.seed)
    code = COMMANDS[invocation.subcommand](invocation, writer)
    manifest = writer.close()
    return code, manifest


def manifest_text(manifest: RunManifest) -> str:
    return canonical_json(manifest.model_dump())
