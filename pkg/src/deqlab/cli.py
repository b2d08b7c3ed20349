"""Command-line experiment harness.

    deqlab <subcommand> --config cfg.json [--out DIR] [--threads N] [--seed-offset K]

Every experiment writes plain CSV/JSON into the output directory.  Exit codes:
0 success, 1 configuration error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from enum import Enum
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import gmm, kernels, matching, rmt_equiv, scalar_system, spectra
from .activations import Activation
from .errors import AssumptionViolated, ConfigError, DeqlabError
from .parallel import resolve_threads, run_blocks, single_threaded_blas

log = logging.getLogger("deqlab")

SCHEMA_PATH = Path(__file__).with_name("experiment.schema.json")


class Experiment(str, Enum):
    fig1_ck_error = "fig1_ck_error"
    fig1_ntk_error = "fig1_ntk_error"
    fig2_matching = "fig2_matching"
    spectra = "spectra"
    coeffs = "coeffs"
    match_only = "match_only"


SUBCOMMANDS = {
    "fig1-ck": Experiment.fig1_ck_error,
    "fig1-ntk": Experiment.fig1_ntk_error,
    "fig2": Experiment.fig2_matching,
    "spectra": Experiment.spectra,
    "coeffs": Experiment.coeffs,
    "match": Experiment.match_only,
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ActivationSpec(_Strict):
    family: str
    params: list[float] = []


class DeqSection(_Strict):
    sigma_a2: float = Field(0.2, ge=0)
    sigma_b: float = 1.0
    activation: ActivationSpec = ActivationSpec(family="Tanh")

    def build(self, tau0: float) -> scalar_system.DeqConfig:
        act = Activation.from_spec(self.activation.model_dump())
        return scalar_system.DeqConfig.from_variance(self.sigma_a2, self.sigma_b, act, tau0)


class McSection(_Strict):
    m: int = Field(4096, ge=64)
    iters: int = Field(100, ge=1)
    reps: int = Field(1, ge=1)
    tol: float = Field(1e-10, gt=0)


class DefaultGmm(_Strict):
    default_mixture: Literal[True] = True
    K: int = Field(2, ge=1)
    p_ratio: float = Field(0.8, gt=0)


class ExplicitGmm(_Strict):
    p: int = Field(ge=1)
    means: list
    covs: list


class CsvGmm(_Strict):
    csv: str
    header: bool = False
    labels: bool = True


class SpectraSection(_Strict):
    bins: int = Field(40, ge=1)
    drop_below: Optional[float] = None
    compare_matched: bool = True


class ExperimentConfig(_Strict):
    experiment: Experiment = Experiment.fig1_ck_error
    deq: DeqSection = DeqSection()
    gmm: Union[DefaultGmm, ExplicitGmm, CsvGmm] = DefaultGmm()
    n_grid: list[int] = [40, 80, 160, 320]
    mc: McSection = McSection()
    seeds: list[int] = [0, 1, 2, 3, 4]
    output_dir: str = "out"
    method: Literal["montecarlo", "exact"] = "montecarlo"
    share_input_weights: bool = True
    spectra: SpectraSection = SpectraSection()

    @field_validator("n_grid")
    @classmethod
    def _grid(cls, v):
        if not v or any(n < 2 for n in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("n_grid must be a nonempty strictly ascending list of sizes >= 2")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v or any(s < 0 for s in v):
            raise ValueError("seeds must be a nonempty list of nonnegative integers")
        return v


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        cfg = ExperimentConfig.model_validate(raw)
        Activation.from_spec(cfg.deq.activation.model_dump())
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


# ---------------------------------------------------------------- data

class _Data:
    """One (n, seed) dataset with the statistics the equivalents need."""

    def __init__(self, X, stats):
        self.X, self.stats = X, stats


def _p_for(n: int, ratio: float) -> int:
    return max(1, int(math.floor(ratio * n + 0.5)))


def make_data(cfg: ExperimentConfig, n: int, seed: int) -> _Data:
    spec = cfg.gmm
    if isinstance(spec, CsvGmm):
        X, labels = gmm.load_matrix_csv(spec.csv, spec.header, spec.labels)
        if X.shape[1] < n:
            raise ConfigError(f"{spec.csv} holds {X.shape[1]} samples, need {n}")
        X = X[:, :n]
        labels = None if labels is None else labels[:n]
        return _Data(X, gmm.plug_in_stats(X, labels))
    if isinstance(spec, DefaultGmm):
        model = gmm.default_model(_p_for(n, spec.p_ratio), spec.K, n=n)
    else:
        model = gmm.model_from_spec(spec.model_dump(), n=n)
    smp = gmm.sample_gmm(model, seed)
    return _Data(smp.X, gmm.compute_stats(model, smp))


def target_tau0(cfg: ExperimentConfig) -> float:
    """tau0 used by coeffs/match: population value at the largest grid size."""
    spec = cfg.gmm
    n = cfg.n_grid[-1]
    if isinstance(spec, CsvGmm):
        return make_data(cfg, n, 0).stats.tau0
    if isinstance(spec, DefaultGmm):
        model = gmm.default_model(_p_for(n, spec.p_ratio), spec.K, n=n)
    else:
        model = gmm.model_from_spec(spec.model_dump(), n=n)
    return gmm.population_tau0(model)


# ---------------------------------------------------------------- points

def _mc_kwargs(cfg: ExperimentConfig, seed: int, threads) -> dict:
    mc = cfg.mc
    return dict(m=mc.m, iters=mc.iters, reps=mc.reps, tol=mc.tol, seed=seed, threads=threads)


def _matched_layers(deq: scalar_system.DeqConfig, tau0: float, seed: int):
    ck = scalar_system.ck_coefficients(deq)
    res = matching.match_activation(matching.MatchTarget.from_ck(ck, tau0), seed=seed, threads=1)
    if not res.converged:
        raise DeqlabError(f"matching did not converge (residuals {res.residuals.tolist()})")
    return res


def _deq_kernels(cfg: ExperimentConfig, deq, X, seed: int, threads, ntk: bool = False):
    if cfg.method == "exact":
        G, Gd = kernels.implicit_ck_exact(deq, X, threads=threads)
        return kernels.implicit_ntk_from_ck(G, Gd) if ntk else G
    kw = _mc_kwargs(cfg, seed, threads)
    if ntk:
        return kernels.implicit_ntk_montecarlo(deq, X, **kw)
    return kernels.implicit_ck_montecarlo(deq, X, **kw)


def _enn_kernel(cfg: ExperimentConfig, layers, X, tau0: float, seed: int, threads):
    if cfg.method == "exact":
        return kernels.explicit_ck_exact(layers, X, tau0=tau0, threads=threads)[-1]
    return kernels.explicit_ck_montecarlo(layers, X, m=cfg.mc.m, seed=seed, tau0=tau0,
                                          share_input_weights=cfg.share_input_weights,
                                          threads=threads)


def point_error(cfg: ExperimentConfig, n: int, seed: int, threads=1) -> float:
    data = make_data(cfg, n, seed)
    deq = cfg.deq.build(data.stats.tau0)
    exp = cfg.experiment
    if exp is Experiment.fig1_ck_error:
        G = _deq_kernels(cfg, deq, data.X, seed, threads)
        Gbar = rmt_equiv.approx_implicit_ck(scalar_system.ck_coefficients(deq), data.stats, data.X)
        return spectra.relative_spectral_error(G, Gbar)
    if exp is Experiment.fig1_ntk_error:
        K = _deq_kernels(cfg, deq, data.X, seed, threads, ntk=True)
        Kbar = rmt_equiv.approx_implicit_ntk(scalar_system.ntk_coefficients(deq), data.stats,
                                             data.X)
        return spectra.relative_spectral_error(K, Kbar)
    if exp is Experiment.fig2_matching:
        res = _matched_layers(deq, data.stats.tau0, 0)
        G = _deq_kernels(cfg, deq, data.X, seed, threads)
        S = _enn_kernel(cfg, res.layers, data.X, data.stats.tau0, seed, threads)
        return spectra.relative_spectral_error(G, S)
    raise ConfigError(f"{exp.value} is not a per-point experiment")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _writer(path: Path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def run_curve(cfg: ExperimentConfig, out: Path, threads: int, seed_offset: int = 0) -> dict:
    """Per-point errors over n_grid x seeds, then (n, mean, min, max)."""
    points = [(n, s + seed_offset) for n in cfg.n_grid for s in cfg.seeds]
    outer = min(threads, len(points))
    inner = max(1, threads // outer)
    errors: dict[int, list] = {n: [] for n in cfg.n_grid}
    fh, w = _writer(out / "points.csv")
    try:
        w.writerow(["n", "seed", "relative_error"])
        fh.flush()
        for start in range(0, len(points), outer):
            chunk = points[start:start + outer]
            vals = run_blocks(lambda pt: point_error(cfg, pt[0], pt[1], inner), chunk, outer)
            for (n, s), e in zip(chunk, vals):
                errors[n].append(e)
                w.writerow([_fmt(n), _fmt(s), _fmt(e)])
                log.info("n=%d seed=%d error=%.6g", n, s, e)
            fh.flush()
    finally:
        fh.close()
    fh, w = _writer(out / "aggregate.csv")
    with fh:
        w.writerow(["n", "mean", "min", "max"])
        for n in cfg.n_grid:
            e = np.array(errors[n])
            w.writerow([_fmt(n), _fmt(e.mean()), _fmt(e.min()), _fmt(e.max())])
    return {n: errors[n] for n in cfg.n_grid}


def run_spectra(cfg: ExperimentConfig, out: Path, threads: int, seed_offset: int = 0) -> dict:
    """Eigenvalues and histograms of the MC CK (and its matched explicit twin)."""
    n, seed = cfg.n_grid[-1], cfg.seeds[0] + seed_offset
    data = make_data(cfg, n, seed)
    deq = cfg.deq.build(data.stats.tau0)
    mats = {"deq": _deq_kernels(cfg, deq, data.X, seed, threads)}
    if cfg.spectra.compare_matched:
        res = _matched_layers(deq, data.stats.tau0, 0)
        mats["enn"] = _enn_kernel(cfg, res.layers, data.X, data.stats.tau0, seed, threads)
    summary = {"n": n, "seed": seed}
    for name, M in mats.items():
        ev = spectra.eigenvalues_dense(M)
        edges, counts = spectra.histogram(ev, cfg.spectra.bins, cfg.spectra.drop_below)
        spectra.write_histogram_csv(edges, counts, out / f"hist_{name}.csv")
        fh, w = _writer(out / f"eigs_{name}.csv")
        with fh:
            w.writerow(["eigenvalue"])
            for v in ev:
                w.writerow([_fmt(v)])
        summary[f"{name}_spectral_norm"] = float(max(abs(ev[0]), abs(ev[-1])))
    if "enn" in mats:
        summary["difference_norm"] = spectra.spectral_norm(mats["deq"].data - mats["enn"].data)
    _write_json(out / "spectra.json", summary)
    return summary


def run_coeffs(cfg: ExperimentConfig, out: Path) -> dict:
    tau0 = target_tau0(cfg)
    deq = cfg.deq.build(tau0)
    report = scalar_system.check_assumptions(deq)
    doc = {"tau0": tau0, "assumptions": report.to_dict()}
    if not report.passed:
        # still emit the report so the failing check can be inspected
        _write_json(out / "coeffs.json", doc)
        raise AssumptionViolated("assumptions fail: " + ", ".join(c.name for c in report.failures()))
    ck = scalar_system.ck_coefficients(deq)
    doc.update(ck=ck.to_dict(), ntk=scalar_system.ntk_coefficients(deq, ck).to_dict())
    _write_json(out / "coeffs.json", doc)
    return doc


def run_match(cfg: ExperimentConfig, out: Path, threads: int, seed_offset: int = 0) -> dict:
    tau0 = target_tau0(cfg)
    ck = scalar_system.ck_coefficients(cfg.deq.build(tau0))
    target = matching.MatchTarget.from_ck(ck, tau0)
    res = matching.match_activation(target, seed=seed_offset, threads=threads)
    doc = {"tau0": tau0, "target": {"alpha1": target.alpha1, "alpha2": target.alpha2,
                                    "alpha3": target.alpha3, "gamma_star": target.gamma_star},
           "depth_rule": matching.decide_depth(target), **res.to_dict()}
    _write_json(out / "match.json", doc)
    return doc


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Enum):
        return o.value
    return o


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out=None, threads=None, seed_offset: int = 0):
    out = Path(out if out is not None else cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    threads = resolve_threads(threads)
    # results must not depend on how many BLAS threads happen to be around
    with single_threaded_blas():
        exp = cfg.experiment
        if exp is Experiment.coeffs:
            return run_coeffs(cfg, out)
        if exp is Experiment.match_only:
            return run_match(cfg, out, threads, seed_offset)
        if exp is Experiment.spectra:
            return run_spectra(cfg, out, threads, seed_offset)
        return run_curve(cfg, out, threads, seed_offset)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deqlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ["run", *SUBCOMMANDS]:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--threads", type=int, help="worker threads (default: $DEQLAB_THREADS or 1)")
        sp.add_argument("--seed-offset", type=int, default=0)
        sp.add_argument("-v", "--verbose", action="store_true")
    sc = sub.add_parser("schema", help="print the config JSON schema")
    sc.add_argument("--out", help="write to a file instead of stdout")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        text = json.dumps(config_schema(), indent=2, sort_keys=True) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command != "run":
            cfg = cfg.model_copy(update={"experiment": SUBCOMMANDS[args.command]})
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.seed_offset < 0:
            raise ConfigError("--seed-offset must be >= 0")
        run_experiment(cfg, args.out, args.threads, args.seed_offset)
    except DeqlabError as exc:
        print(f"deqlab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"deqlab: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
