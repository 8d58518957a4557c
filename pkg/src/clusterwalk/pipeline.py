"""Stage orchestration: sample -> solve -> walk -> estimate -> report.

Each stage reads its inputs from the output directory (or from memory when the
previous stage ran in the same call), writes its artifacts, and records them
with SHA-256 hashes in ``manifest.json``.  A stage failure stops the run; the
manifest then marks that stage failed and keeps whatever earlier stages wrote.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, estimators as est, formats
from .config import STAGES, ExperimentConfig, parse_config, serialize_config
from .corrector import (SolverOptions, integrate_corrector, solve_all_directions,
                        verify_cocycle, verify_harmonic)
from .lattice import LatticeSpec, decompose_clusters, sample_bonds
from .walk import EnsembleSpec, rescaled_endpoints, simulate_walk, start_vertices

log = logging.getLogger(__name__)

PERC = "bonds.perc"
GCHI = "corrector.gchi"
SOLVE = "solve.json"
ENDPOINTS = "endpoints.csv"
TRAJECTORIES = "trajectories.csv"
REPORT = "report.json"
SUMMARY = "summary.txt"
MANIFEST = "manifest.json"
LOCK = ".lock"


class StageError(RuntimeError):
    """A stage could not run; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


class SupercriticalityWarning(UserWarning):
    """Largest cluster is too small for the supercritical regime to be plausible."""


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def gfld_name(b: int) -> str:
    return f"field_{b}.gfld"


@dataclass
class RunManifest:
    config: str
    version: str = __version__
    artifacts: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    root: Path | None = field(default=None, compare=False)

    @property
    def complete(self) -> bool:
        return bool(self.stages) and all(s["status"] == "complete" for s in self.stages.values())

    def to_dict(self) -> dict:
        return {"version": self.version, "config": self.config, "complete": self.complete,
                "stages": self.stages, "artifacts": self.artifacts}

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(data["config"], data.get("version", __version__),
                   dict(data.get("artifacts", {})), dict(data.get("stages", {})))

    def save(self, out: Path) -> None:
        tmp = out / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        os.replace(tmp, out / MANIFEST)

    @classmethod
    def load(cls, out) -> "RunManifest":
        m = cls.from_dict(json.loads((Path(out) / MANIFEST).read_text()))
        m.root = Path(out)
        return m

    def record(self, out: Path, stage: str, names: list[str]) -> None:
        for name in list(self.artifacts):
            if self.artifacts[name]["stage"] == stage:
                del self.artifacts[name]
        for name in names:
            self.artifacts[name] = {"stage": stage, "sha256": sha256(out / name)}


@contextmanager
def _lock(out: Path):
    path = out / LOCK
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError("lock", f"{path} exists; another run is using {out}") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


class _Run:
    """Cross-stage state; anything missing is loaded from the output directory."""

    def __init__(self, cfg: ExperimentConfig, out: Path, threads: int):
        self.cfg = cfg.resolved()
        self.out = out
        self.threads = threads
        self._cache: dict = {}

    def need(self, name: str, stage: str) -> Path:
        path = self.out / name
        if not path.exists():
            raise StageError(stage, f"missing {name}; run the stage that produces it first")
        return path

    def config(self, stage):
        if "config" not in self._cache:
            self._cache["config"] = formats.read_perc(self.need(PERC, stage))
        return self._cache["config"]

    def clusters(self, stage):
        if "clusters" not in self._cache:
            self._cache["clusters"] = decompose_clusters(self.config(stage))
        return self._cache["clusters"]

    def fields(self, stage):
        if "fields" not in self._cache:
            d = self.cfg.d
            self._cache["fields"] = [formats.read_gfld(self.need(gfld_name(b), stage))
                                     for b in range(d)]
        return self._cache["fields"]

    def chi(self, stage):
        if "chi" not in self._cache:
            cl = self.clusters(stage)
            self._cache["chi"] = formats.read_gchi(self.need(GCHI, stage), cl.largest_cluster_id)
        return self._cache["chi"]


# -- stages -----------------------------------------------------------------------

def _stage_sample(run: _Run) -> list[str]:
    cfg = run.cfg
    config = sample_bonds(LatticeSpec(cfg.d, cfg.L), cfg.p, cfg.seed)
    formats.write_perc(run.out / PERC, config)
    run._cache["config"] = config
    clusters = run.clusters("sample")
    frac = clusters.sizes[clusters.largest_cluster_id] / config.spec.n_vertices
    if frac < 0.1:
        warnings.warn(f"largest cluster holds {frac:.1%} of the box; p={cfg.p} may be "
                      "subcritical, where the invariance principle does not apply",
                      SupercriticalityWarning, stacklevel=2)
    return [PERC]


def _stage_solve(run: _Run) -> list[str]:
    cfg = run.cfg
    config, clusters = run.config("solve"), run.clusters("solve")
    opts = SolverOptions(cfg.tol, cfg.max_iter, cfg.preconditioner)
    sols = solve_all_directions(config, clusters, opts)
    fields = [s.field for s in sols]
    chi = integrate_corrector(fields, config, clusters)
    run._cache.update(fields=fields, chi=chi)
    names = []
    for f in fields:
        formats.write_gfld(run.out / gfld_name(f.b), f)
        names.append(gfld_name(f.b))
    formats.write_gchi(run.out / GCHI, chi)
    n = int(clusters.sizes[clusters.largest_cluster_id])
    checks = {
        "cluster_size": n,
        "cluster_fraction": n / config.spec.n_vertices,
        "iterations": [s.iterations for s in sols],
        "residual": [s.residual for s in sols],
        "harmonic_residual": verify_harmonic(chi, config, clusters),
        "cocycle_residual": max(verify_cocycle(f, config, clusters) for f in fields),
        # sum of G_b over every directed open edge of the cluster, summed exactly
        "gradient_sum": [_directed_sum(f, config, clusters) for f in fields],
    }
    (run.out / SOLVE).write_text(json.dumps(checks, indent=2) + "\n")
    return names + [GCHI, SOLVE]


def _directed_sum(f, config, clusters) -> float:
    dense = f.to_dense()
    members = clusters.members()
    mask = config.open_table[members]
    return math.fsum(dense[members][mask])


def _stage_walk(run: _Run) -> list[str]:
    cfg = run.cfg
    config, clusters = run.config("walk"), run.clusters("walk")
    start = cfg.start if cfg.start == "uniform" else int(cfg.start)
    ens = EnsembleSpec(cfg.N, cfg.t_max, cfg.seed, start)
    ends = rescaled_endpoints(config, clusters, ens, cfg.eps, threads=run.threads)
    formats.write_endpoints(run.out / ENDPOINTS, ends, ens.seeds(), cfg.t_max, cfg.eps)
    names = [ENDPOINTS]
    if cfg.trajectories:
        k = min(cfg.trajectories, cfg.N)
        starts = start_vertices(clusters, ens)[:k]
        trajs = [simulate_walk(config, clusters, int(x), cfg.t_micro, int(s))
                 for x, s in zip(starts, ens.seeds()[:k])]
        formats.write_trajectories(run.out / TRAJECTORIES, trajs)
        names.append(TRAJECTORIES)
    return names


def _csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)] + [",".join(repr(v) if isinstance(v, float) else str(v)
                                           for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _stage_estimate(run: _Run) -> list[str]:
    cfg = run.cfg
    stage = "estimate"
    config, clusters = run.config(stage), run.clusters(stage)
    fields, chi = run.fields(stage), run.chi(stage)
    ends, _, t_max, eps = formats.read_endpoints(run.need(ENDPOINTS, stage))
    t = t_max  # endpoints are rescaled, so the macroscopic horizon is the right divisor
    d = cfg.d
    solve_checks = json.loads(run.need(SOLVE, stage).read_text())
    report: dict = {
        "params": {"d": d, "L": cfg.L, "p": cfg.p, "seed": cfg.seed, "N": len(ends),
                   "t": t, "eps": eps, "t_lattice": t / eps ** 2},
        "config": serialize_config(cfg),
        "solve": solve_checks,
    }
    var = est.variational_sigma2(config, clusters, fields)
    report["variational_sigma2"] = var.tolist()
    report["unprojected_sigma2"] = est.variational_sigma2(config, clusters, None).tolist()
    if len(ends) >= 100:
        msd = est.msd_sigma2(ends, t, n_boot=cfg.bootstrap, seed=cfg.seed)
        report["msd"] = {"value": msd.sigma2.tolist(), "stderr": msd.stderr.tolist(),
                         "degenerate": msd.degenerate}
        report["covariance"] = msd.covariance.tolist()
        report["covariance_stderr"] = msd.cov_stderr.tolist()
        dr = est.DiffusivityReport(var, msd, report["params"])
        with np.errstate(divide="ignore", invalid="ignore"):
            z = dr.z_scores
        off = [abs(msd.covariance[i, j]) <= 3 * msd.cov_stderr[i, j]
               for i in range(d) for j in range(i + 1, d)]
        report["agreement"] = {"z": [float(v) for v in z], "agree": dr.agree,
                               "offdiagonal_within_3se": bool(all(off))}
    else:
        report["msd"] = report["covariance"] = report["agreement"] = None
    if len(ends) >= 1000:
        ks = [est.gaussianity_test(ends, b, lattice_spacing=eps, seed=cfg.seed)
              for b in range(d)]
        report["ks"] = {"stat": [k.statistic for k in ks], "p": [k.pvalue for k in ks]}
    else:
        report["ks"] = None
    sub = est.sublinearity_statistic(chi, cfg.eps_list)
    report["sublinearity"] = sub.to_list()
    s = [e.s for e in sub.entries]
    if all(v == 0 for v in s):
        trend = "zero"
    elif all(a > b for a, b in zip(s, s[1:])):
        trend = "decreasing"
    else:
        trend = "not decreasing"
    report["sublinearity_trend"] = trend
    boxes = []
    for e in sub.entries:
        vals = est.box_average_statistic(chi, e.eps, cfg.rectangles, cfg.b0)
        for r, v in zip(cfg.rectangles, vals):
            boxes.append({"eps": e.eps, "rectangle": [list(a) for a in r], "value": v})
    report["box_average"] = boxes
    report["poincare"] = [est.poincare_ratio(config, clusters, e, cfg.poincare_trials,
                                             cfg.seed).to_dict() for e in cfg.poincare_eps]
    chop = []
    ce = cfg.chop_eps()
    for dl in cfg.delta_list:
        lhs, rhs = est.chopped_box_bound(chi, fields, config, clusters, dl, cfg.M, ce)
        chop.append({"delta": dl, "M": cfg.M, "eps": ce, "lhs": lhs, "rhs": rhs,
                     "ratio": lhs / rhs if rhs > 0 else None})
    report["chopped_box"] = chop
    if cfg.heat_N:
        hk = est.heat_kernel_return(config, clusters, clusters.root, cfg.heat_t, cfg.heat_N,
                                    seed=cfg.seed + cfg.N, threads=run.threads)
        report["heat_kernel"] = {"x0": clusters.root, "N": cfg.heat_N, "points": hk.to_list(),
                                 "slope": hk.slope, "slope_stderr": hk.slope_stderr}
    else:
        report["heat_kernel"] = None

    out = run.out
    (out / REPORT).write_text(json.dumps(report, indent=2) + "\n")
    names = [REPORT, "sublinearity.csv", "box_average.csv", "poincare.csv", "chopped_box.csv"]
    _csv(out / "sublinearity.csv", ["eps", "s"] + [f"a{i + 1}" for i in range(d)],
         [[e["eps"], e["s"]] + e["a_eps"] for e in report["sublinearity"]])
    _csv(out / "box_average.csv", ["eps", "rectangle", "value"],
         [[b["eps"], " ".join(f"{lo}:{hi}" for lo, hi in b["rectangle"]), b["value"]]
          for b in boxes])
    _csv(out / "poincare.csv", ["eps", "size", "lambda1", "ratio", "trial_max"],
         [[p["eps"], p["size"], p["lambda1"], p["ratio"], p["trial_max"]]
          for p in report["poincare"]])
    _csv(out / "chopped_box.csv", ["delta", "M", "eps", "lhs", "rhs"],
         [[c["delta"], c["M"], c["eps"], c["lhs"], c["rhs"]] for c in chop])
    if report["heat_kernel"]:
        names.append("heat_kernel.csv")
        _csv(out / "heat_kernel.csv", ["t", "returns", "p", "lo", "hi"],
             [[q["t"], q["returns"], q["p"], q["lo"], q["hi"]]
              for q in report["heat_kernel"]["points"]])
    if report["msd"]:
        names.append("covariance.csv")
        _csv(out / "covariance.csv", ["row", "col", "value", "stderr"],
             [[i, j, report["covariance"][i][j], report["covariance_stderr"][i][j]]
              for i in range(d) for j in range(d)])
    return names


def _stage_report(run: _Run) -> list[str]:
    text = report_summary(RunManifest.load(run.out))
    (run.out / SUMMARY).write_text(text)
    return [SUMMARY]


_STAGE_FUNCS = {"sample": _stage_sample, "solve": _stage_solve, "walk": _stage_walk,
                "estimate": _stage_estimate, "report": _stage_report}


def run_pipeline(config: ExperimentConfig, out=None, threads: int = 1,
                 stages=None) -> RunManifest:
    """Run the selected stages (default: ``config.stages``) in dependency order."""
    out = Path(out if out is not None else config.dir)
    out.mkdir(parents=True, exist_ok=True)
    selected = set(stages if stages is not None else config.stages)
    unknown = selected - set(STAGES)
    if unknown:
        raise StageError(sorted(unknown)[0], "unknown stage")
    text = serialize_config(config)
    with _lock(out):
        manifest = RunManifest(text, root=out)
        if (out / MANIFEST).exists():
            old = RunManifest.load(out)
            if parse_config(old.config) != config:
                raise StageError("config", f"{out} holds a run with a different config; "
                                 "use a fresh output directory")
            manifest = old
            manifest.version = __version__
        run = _Run(config, out, threads)
        for stage in STAGES:
            if stage not in selected:
                continue
            log.info("stage %s", stage)
            t0 = time.perf_counter()
            manifest.stages[stage] = {"status": "running", "seconds": None, "error": None}
            try:
                names = _STAGE_FUNCS[stage](run)
            except BaseException as exc:
                manifest.stages[stage] = {"status": "failed",
                                          "seconds": time.perf_counter() - t0,
                                          "error": f"{type(exc).__name__}: {exc}"}
                manifest.save(out)
                if isinstance(exc, StageError):
                    raise
                raise StageError(stage, str(exc)) from exc
            manifest.record(out, stage, names)
            manifest.stages[stage] = {"status": "complete",
                                      "seconds": time.perf_counter() - t0, "error": None}
            manifest.save(out)
    return manifest


# -- summary ----------------------------------------------------------------------

def _verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def report_summary(manifest: RunManifest | str | Path) -> str:
    """Plain-text table of the estimate stage's report.

    Accepts a manifest (as returned by :func:`run_pipeline` or
    :meth:`RunManifest.load`) or a run directory.
    """
    if not isinstance(manifest, RunManifest):
        out = Path(manifest)
        if not (out / MANIFEST).exists():
            raise StageError("report", f"no manifest in {out}; nothing has run")
        manifest = RunManifest.load(out)
    st = manifest.stages.get("estimate", {}).get("status")
    if st != "complete" or manifest.root is None or not (manifest.root / REPORT).exists():
        raise StageError("report", "missing stage 'estimate' (no completed report.json)")
    out = manifest.root
    r = json.loads((out / REPORT).read_text())
    pr, d = r["params"], r["params"]["d"]
    rows = [("parameters", f"d={d} L={pr['L']} p={pr['p']} seed={pr['seed']} "
                           f"N={pr['N']} t={pr['t']:g} eps={pr['eps']:g}")]
    sv = r["solve"]
    rows.append(("largest cluster", f"{sv['cluster_size']} vertices "
                                    f"({sv['cluster_fraction']:.1%} of box)"))
    rows.append(("harmonic residual", f"{sv['harmonic_residual']:.2e}  "
                                      f"{_verdict(sv['harmonic_residual'] <= 1e-8)}"))
    rows.append(("cocycle residual", f"{sv['cocycle_residual']:.2e}  "
                                     f"{_verdict(sv['cocycle_residual'] <= 1e-8)}"))
    rows.append(("gradient zero-sum", f"{max(map(abs, sv['gradient_sum'])):.2e}  "
                                      f"{_verdict(max(map(abs, sv['gradient_sum'])) == 0)}"))
    for b in range(d):
        line = f"variational {r['variational_sigma2'][b]:.6f}"
        if r["msd"]:
            line += (f"   msd {r['msd']['value'][b]:.6f} +/- {r['msd']['stderr'][b]:.6f}"
                     f"   z={r['agreement']['z'][b]:+.2f}")
        rows.append((f"sigma^2 [b={b}]", line))
    if r["agreement"]:
        rows.append(("estimators agree (3 se)", _verdict(r["agreement"]["agree"])))
        rows.append(("covariance diagonal (3 se)",
                     _verdict(r["agreement"]["offdiagonal_within_3se"])))
    if r["ks"]:
        rows.append(("KS p-value per direction",
                     "  ".join(f"{p:.3f}" for p in r["ks"]["p"])
                     + f"  {_verdict(min(r['ks']['p']) > 0.01)}"))
    rows.append(("sublinearity s(eps)", "  ".join(f"{e['eps']:.4g}:{e['s']:.3e}"
                                                  for e in r["sublinearity"])))
    trend = r["sublinearity_trend"]
    rows.append(("s(eps) trend", f"{trend}  {_verdict(trend != 'not decreasing')}"))
    for p in r["poincare"]:
        rows.append((f"Poincare ratio*eps^2 [eps={p['eps']:.4g}]",
                     f"{p['ratio'] * p['eps'] ** 2:.4f}"))
    for c in r["chopped_box"]:
        rows.append((f"chopped box [delta={c['delta']:g}]",
                     f"lhs={c['lhs']:.3e} rhs={c['rhs']:.3e}"))
    if r["heat_kernel"]:
        hk = r["heat_kernel"]
        rows.append(("heat-kernel slope", f"{hk['slope']:.4f} +/- {hk['slope_stderr']:.4f}"
                                          f" (target {-d / 2:g})"))
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"
