"""Command-line pipeline: simulate, build-surrogate, virtual-experiment, update, report.

Every stage writes into its own subdirectory of ``--out`` together with a
``manifest.json`` that echoes the configuration and lists the SHA-256 of
each deterministic artifact.  Wall-clock measurements go to separate
``timing`` files so that manifests and artifacts are reproducible byte for
byte under a fixed configuration and seed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde

from .bayes import (
    FEForward,
    NoiseModel,
    ObservationSet,
    Posterior,
    SurrogateForward,
    default_probes,
    default_times,
    effective_sample_size,
    kde_density,
    metropolis_hastings,
    observation_operator,
    virtual_experiment,
    write_chain_csv,
    write_density_csv,
)
from .coefficients import PARAM_NAMES, MaterialParams
from .config import ConfigError, RunConfig, load_config
from .fem.io import _jsonable, write_manifest, write_mesh_csv, write_states_csv
from .fem.timestepping import StepFailure, run_simulation
from .pce.expansion import load_expansion, save_expansion
from .pce.galerkin import GalerkinFailure, GalerkinSettings, build_surrogate
from .pce.study import STUDY_HEADER, TIMING_HEADER, error_study
from .random_field import build_basis, realize_fields

log = logging.getLogger("kunzel_uq")

STAGES = ("simulate", "surrogate", "experiment", "update_pce", "update_fe")
EXIT_CODES = {
    "config": 2,
    "simulate": 3,
    "build-surrogate": 4,
    "virtual-experiment": 5,
    "update": 6,
    "report": 7,
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


# ------------------------------------------------------------ helpers
def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _finish_stage(directory: Path, stage: str, cfg: RunConfig, artifacts: list, diagnostics: dict,
                  extra: dict | None = None) -> Path:
    hashes = {Path(p).name: sha256_file(p) for p in artifacts}
    body = {"stage": stage, "artifacts": hashes, "seeds": cfg.raw["seeds"]}
    if extra:
        body.update(extra)
    return write_manifest(directory / "manifest.json", cfg.raw, diagnostics, body)


def _write_json(path: Path, body) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n")
    return path


def _write_rows(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def _basis(cfg: RunConfig, mesh, modes: int | None = None):
    return build_basis(mesh.centroids(), cfg.kernel(), modes or cfg.random_field.modes)


def _probes_times(cfg: RunConfig, mesh):
    o = cfg.observations
    probes = np.asarray(o.probes) if o.probes is not None else default_probes(mesh)
    times = np.asarray(o.times) if o.times is not None else default_times(cfg.time.steps)
    return probes, times


def _galerkin_settings(cfg: RunConfig) -> GalerkinSettings:
    n = cfg.newton
    return GalerkinSettings(tol=cfg.surrogate.tol, max_iter=n.max_iter, max_halvings=n.max_halvings,
                            newton_switch=n.newton_switch)


def _parse_xi(text: str | None):
    if text is None:
        return None
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError as exc:
        raise ConfigError(f"--xi must be a comma separated list of numbers: {exc}") from exc


def _label_point(name: str, point) -> str:
    return f"{name}@({point[0]:.4g},{point[1]:.4g})"


def _report_elements(mesh) -> list[int]:
    """Elements nearest the bottom-left corner, the centre and the top-right corner."""
    c = mesh.centroids()
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    targets = [lo, 0.5 * (lo + hi), hi]
    picks = []
    for t in targets:
        e = int(np.argmin(np.linalg.norm(c - t, axis=1)))
        if e not in picks:
            picks.append(e)
    return picks


# ------------------------------------------------------------ stages
def cmd_simulate(cfg: RunConfig, out: Path, xi=None) -> Path:
    mesh = cfg.build_mesh()
    disc = cfg.discretization(mesh)
    ti = cfg.time_integration()
    if xi is None:
        means = cfg.prior_means()
        params = MaterialParams(**{k: np.full(mesh.n_elements, getattr(means, k)) for k in PARAM_NAMES})
    else:
        if len(xi) > mesh.n_elements:
            raise ConfigError(f"--xi has {len(xi)} entries but the mesh has only {mesh.n_elements} modes")
        params = realize_fields(_basis(cfg, mesh, len(xi)), cfg.specs(), xi)
    solution = run_simulation(disc, params, ti, cfg.newton_settings())
    directory = out / "simulate"
    paths = write_mesh_csv(mesh, directory)
    states = write_states_csv(solution, directory / "states.csv")
    diag = dict(solution.diagnostics)
    diag["steps"] = ti.steps
    diag["dt_s"] = ti.dt
    return _finish_stage(directory, "simulate", cfg, [paths["nodes"], paths["triangles"], states], diag,
                         {"xi": None if xi is None else list(map(float, xi))})


def cmd_build_surrogate(cfg: RunConfig, out: Path) -> Path:
    mesh = cfg.build_mesh()
    disc = cfg.discretization(mesh)
    ti = cfg.time_integration()
    specs = cfg.specs()
    s = cfg.surrogate
    m = cfg.random_field.modes
    basis = _basis(cfg, mesh)
    t0 = time.perf_counter()
    pce = build_surrogate(disc, basis, specs, ti, s.degree, level=s.level, settings=_galerkin_settings(cfg))
    build_seconds = time.perf_counter() - t0

    directory = out / "surrogate"
    surrogate = save_expansion(pce, directory / "surrogate.zip")
    kle_path = directory / "kle.json"
    kle_path.write_text(basis.to_json())

    # error study over a fresh sample set against the untruncated field
    full = _basis(cfg, mesh, mesh.n_elements)
    prebuilt = {(m, s.degree): (pce, build_seconds)} if s.level is None else {}
    rows = error_study(disc, full, specs, ti, s.study_modes, s.study_degrees, s.error_samples,
                       cfg.seeds.error_samples, cfg.newton_settings(), _galerkin_settings(cfg), prebuilt)
    report = _write_rows(directory / "error_report.csv", ("modes", "degree", "n_terms", "quadrature_nodes",
                                                           "PCE-only", "PCE+KLE"),
                         [[getattr(r, k) for k in STUDY_HEADER] for r in rows])
    _write_rows(directory / "error_report_wallclock.csv", TIMING_HEADER, [[getattr(r, k) for k in TIMING_HEADER] for r in rows])
    _write_json(directory / "timing.json", {"build_seconds": build_seconds})
    diag = {
        "n_terms": pce.index_set.size,
        "quadrature_nodes": pce.meta["quadrature_nodes"],
        "newton_iterations": pce.meta["newton_iterations"],
        "captured_variance": basis.captured_variance(),
        "kle_digest": basis.digest(),
    }
    return _finish_stage(directory, "surrogate", cfg, [surrogate, kle_path, report], diag)


def _write_observations(path: Path, obs: ObservationSet, mesh, steps_to_time):
    body = {
        "probes": obs.probes,
        "probe_coordinates": mesh.nodes[obs.probes],
        "times": obs.times,
        "time_s": steps_to_time[obs.times],
        "ordering": "field (theta, phi), then probe, then time",
        "values": obs.values,
        "covariance": obs.cov,
        "truth_xi": obs.truth_xi,
        "noise_free": obs.noise_free,
    }
    return _write_json(path, body)


def read_observations(path) -> ObservationSet:
    body = json.loads(Path(path).read_text())
    return ObservationSet(
        probes=np.asarray(body["probes"], int),
        times=np.asarray(body["times"], int),
        values=np.asarray(body["values"], float),
        cov=np.asarray(body["covariance"], float),
        truth_xi=None if body["truth_xi"] is None else np.asarray(body["truth_xi"], float),
        noise_free=None if body["noise_free"] is None else np.asarray(body["noise_free"], float),
    )


def cmd_virtual_experiment(cfg: RunConfig, out: Path) -> Path:
    mesh = cfg.build_mesh()
    disc = cfg.discretization(mesh)
    ti = cfg.time_integration()
    specs = cfg.specs()
    basis = _basis(cfg, mesh)
    probes, times = _probes_times(cfg, mesh)
    o = cfg.observations
    truth = np.random.default_rng(cfg.seeds.truth).standard_normal(basis.n_modes)
    forward = FEForward(disc, basis, specs, ti, probes, times, cfg.newton_settings())
    noise = NoiseModel(o.sigma_theta, o.sigma_phi, o.replicates)
    obs = virtual_experiment(truth, forward.states, probes, times, noise,
                             np.random.default_rng(cfg.seeds.noise), o.covariance)
    directory = out / "experiment"
    obs_path = _write_observations(directory / "observations.json", obs, mesh, ti.times)
    fields = realize_fields(basis, specs, truth)
    centroids = mesh.centroids()
    rows = [[e, centroids[e, 0], centroids[e, 1]] + [float(getattr(fields, k)[e]) for k in PARAM_NAMES]
            for e in range(mesh.n_elements)]
    truth_path = _write_rows(directory / "truth_fields.csv", ["element", "x_m", "y_m", *PARAM_NAMES], rows)
    diag = {"n_observations": obs.size, "truth_xi": truth, "kle_digest": basis.digest()}
    return _finish_stage(directory, "experiment", cfg, [obs_path, truth_path], diag)


def _time_forward(forward, xs) -> float:
    t0 = time.perf_counter()
    for x in xs:
        forward(x)
    return (time.perf_counter() - t0) / len(xs)


def _pairwise_rows(samples, points: int = 30):
    rows = []
    dim = samples.shape[1]
    for i in range(dim):
        for j in range(i + 1, dim):
            pair = samples[:, [i, j]].T
            if np.any(pair.std(axis=1) == 0):
                continue
            kde = gaussian_kde(pair, bw_method="silverman")
            gx = np.linspace(pair[0].min(), pair[0].max(), points)
            gy = np.linspace(pair[1].min(), pair[1].max(), points)
            X, Y = np.meshgrid(gx, gy, indexing="ij")
            dens = kde(np.vstack([X.ravel(), Y.ravel()]))
            rows.extend([f"xi_{i + 1}", f"xi_{j + 1}", x, y, d] for x, y, d in zip(X.ravel(), Y.ravel(), dens))
    return rows


def cmd_update(cfg: RunConfig, out: Path, forward_kind: str) -> Path:
    mesh = cfg.build_mesh()
    disc = cfg.discretization(mesh)
    ti = cfg.time_integration()
    specs = cfg.specs()
    basis = _basis(cfg, mesh)
    obs_path = out / "experiment" / "observations.json"
    if not obs_path.exists():
        raise StageError("update", f"missing {obs_path}; run virtual-experiment first")
    obs = read_observations(obs_path)
    if obs.truth_xi is not None and len(obs.truth_xi) != basis.n_modes:
        raise StageError("update", "observations were generated with a different number of modes")
    fe = FEForward(disc, basis, specs, ti, obs.probes, obs.times, cfg.newton_settings())
    surrogate_path = out / "surrogate" / "surrogate.zip"
    sur = None
    if surrogate_path.exists():
        pce = load_expansion(surrogate_path)
        if pce.meta.get("kle_digest") != basis.digest():
            raise StageError("update", "surrogate was built for a different random field basis")
        sur = SurrogateForward(pce, obs.probes, obs.times)
    if forward_kind == "pce" and sur is None:
        raise StageError("update", f"missing {surrogate_path}; run build-surrogate first")
    forward = sur if forward_kind == "pce" else fe

    c = cfg.mcmc
    chain = metropolis_hastings(Posterior(forward, obs), np.zeros(basis.n_modes), c.samples, c.proposal_scale,
                                seed=cfg.seeds.mcmc, warmup=c.warmup, store_aux=True)
    directory = out / f"update_{forward_kind}"
    chain_path = write_chain_csv(chain, directory / "chain.csv")

    start = int(round(c.burn_in * len(chain.samples)))
    kept = chain.samples[start:]
    tables = [kde_density(kept[:, k], f"xi_{k + 1}", c.density_points) for k in range(kept.shape[1])]
    centroids = mesh.centroids()
    fields = realize_fields(basis, specs, kept)
    for e in _report_elements(mesh):
        for name in PARAM_NAMES:
            tables.append(kde_density(getattr(fields, name)[:, e], _label_point(name, centroids[e]),
                                      c.density_points))
    labels = _observation_labels(mesh, obs)
    predictions = chain.aux[start:]
    for k, label in enumerate(labels):
        tables.append(kde_density(predictions[:, k], label, c.density_points))
    density_path = write_density_csv(tables, directory / "densities.csv")
    pair_path = _write_rows(directory / "pairwise.csv", ("x_name", "y_name", "x", "y", "density"),
                            _pairwise_rows(kept))

    # prior predictive spread with the same forward, for the variance reduction check
    prior_rng = np.random.default_rng([cfg.seeds.mcmc, 1])
    prior_xi = prior_rng.standard_normal((c.prior_samples, basis.n_modes))
    if forward_kind == "pce":
        prior_pred = sur.pce.basis_values(prior_xi) @ sur.block
    else:
        states = run_simulation(disc, realize_fields(basis, specs, prior_xi), ti, cfg.newton_settings(),
                                on_failure="nan").states
        prior_pred = observation_operator(states, obs.probes, obs.times)
        prior_pred = prior_pred[np.all(np.isfinite(prior_pred), axis=1)]
    prior_var = prior_pred.var(axis=0, ddof=1)
    post_var = predictions.var(axis=0, ddof=1)
    var_path = _write_rows(directory / "response_variance.csv",
                           ("quantity", "prior_variance", "posterior_variance"),
                           [[lab, float(a), float(b)] for lab, a, b in zip(labels, prior_var, post_var)])

    timing_xi = np.random.default_rng([cfg.seeds.mcmc, 2]).standard_normal((3, basis.n_modes))
    timing = {"forward": forward_kind, "seconds_per_sample": chain.seconds_per_sample,
              "fe_seconds_per_evaluation": _time_forward(fe, timing_xi)}
    if sur is not None:
        many = np.random.default_rng([cfg.seeds.mcmc, 3]).standard_normal((200, basis.n_modes))
        timing["pce_seconds_per_evaluation"] = _time_forward(sur, many)
        timing["fe_over_pce"] = timing["fe_seconds_per_evaluation"] / timing["pce_seconds_per_evaluation"]
    _write_json(directory / "timing.json", timing)

    diag = {
        "acceptance_rate": chain.acceptance_rate,
        "proposal_scale": chain.proposal_scale,
        "burn_in_samples": start,
        "effective_sample_size": [effective_sample_size(kept[:, k]) for k in range(kept.shape[1])],
        "posterior_mean": kept.mean(axis=0),
        "posterior_std": kept.std(axis=0),
    }
    return _finish_stage(directory, f"update_{forward_kind}", cfg,
                         [chain_path, density_path, pair_path, var_path], diag, {"forward": forward_kind})


def _observation_labels(mesh, obs: ObservationSet) -> list[str]:
    labels = []
    for name in ("theta", "phi"):
        for p in obs.probes:
            for t in obs.times:
                labels.append(_label_point(name, mesh.nodes[p]) + f",step={int(t)}")
    return labels


def cmd_report(out: Path) -> Path:
    if not out.is_dir():
        raise StageError("report", f"run directory {out} does not exist")
    stages = {}
    missing = []
    for stage in STAGES:
        manifest = out / stage / "manifest.json"
        if not manifest.exists():
            missing.append(stage)
            stages[stage] = {"present": False}
            continue
        body = json.loads(manifest.read_text())
        entry = {"present": True, "manifest": str(manifest), "manifest_sha256": sha256_file(manifest),
                 "artifacts": body.get("artifacts", {}), "diagnostics": body.get("diagnostics", {})}
        bad = [name for name, h in entry["artifacts"].items()
               if not (out / stage / name).exists() or sha256_file(out / stage / name) != h]
        entry["modified_artifacts"] = bad
        timing = out / stage / "timing.json"
        if timing.exists():
            entry["timing"] = json.loads(timing.read_text())
        stages[stage] = entry
    if len(missing) == len(STAGES):
        raise StageError("report", f"no completed stages found in {out}")
    summary = {"run_dir": str(out), "stages": stages, "missing_stages": missing}
    fe = stages.get("update_fe", {}).get("timing", {})
    pce = stages.get("update_pce", {}).get("timing", {})
    if fe and pce:
        summary["chain_speedup"] = fe["seconds_per_sample"] / pce["seconds_per_sample"]
    directory = out / "report"
    path = _write_json(directory / "report.json", summary)
    rows = [[stage, name, h] for stage, e in stages.items() for name, h in e.get("artifacts", {}).items()]
    _write_rows(directory / "artifacts.csv", ("stage", "artifact", "sha256"), rows)
    return path


# ------------------------------------------------------------ entry point
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kunzel-uq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="YAML run configuration")
            p.add_argument("--seed", type=int, default=None, help="override all named seeds")
        p.add_argument("--out", default="runs", help="run directory (default: runs)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("simulate", help="deterministic run at prior means or a given xi")).add_argument(
        "--xi", default=None, help="comma separated KLE coordinates")
    common(sub.add_parser("build-surrogate", help="Galerkin surrogate and error study"))
    common(sub.add_parser("virtual-experiment", help="synthetic observations from a prior draw"))
    common(sub.add_parser("update", help="Metropolis-Hastings posterior sampling")).add_argument(
        "--forward", choices=("fe", "pce"), default="pce")
    common(sub.add_parser("report", help="consolidate stage manifests"), needs_config=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    stage = args.command
    try:
        if stage == "report":
            path = cmd_report(out)
        else:
            try:
                cfg = load_config(args.config)
                if args.seed is not None:
                    cfg = cfg.with_seed(args.seed)
                xi = _parse_xi(getattr(args, "xi", None))
            except (ConfigError, OSError) as exc:
                print(f"error [config]: {exc}", file=sys.stderr)
                return EXIT_CODES["config"]
            if stage == "simulate":
                path = cmd_simulate(cfg, out, xi)
            elif stage == "build-surrogate":
                path = cmd_build_surrogate(cfg, out)
            elif stage == "virtual-experiment":
                path = cmd_virtual_experiment(cfg, out)
            else:
                path = cmd_update(cfg, out, args.forward)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    except GalerkinFailure as exc:
        print(f"error [{stage}]: Galerkin solve failed: {exc}", file=sys.stderr)
        return EXIT_CODES[stage]
    except StepFailure as exc:
        print(f"error [{stage}]: finite element solve failed: {exc}", file=sys.stderr)
        return EXIT_CODES[stage]
    except (StageError, ValueError, OSError) as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return EXIT_CODES[stage]
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
