"""Experiment orchestration: runs, comparison tables and CSV outputs."""
from __future__ import annotations

import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import __version__, metrics, synthdata
from .config import ExperimentConfig
from .errors import ContractViolation
from .nets import ArchitectureSpec, ModelParams, load_model, save_model
from .synthdata import Dataset
from .training import IterationLog, TrainConfig, TrainingDivergence, evaluate, train

log = logging.getLogger(__name__)

TRAJECTORY_HEADER = "iteration,loss_c,loss_adv,bacc,dcor2,mi"
REPORT_FIELDS = ("bacc", "f1", "auc", "dcor2", "mi", "eo_avg", "eo_max")
COMPARISON_HEADER = "variant,seed,status," + ",".join(REPORT_FIELDS)
PathLike = Union[str, Path]


def fmt(v) -> str:
    """17 significant digits; None and NaN become empty cells."""
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    if np.isnan(v):
        return ""
    return f"{v:.17g}"


def provenance_line(config_hash: str, seed: int) -> str:
    return f"# config_hash={config_hash}, seed={seed}, version={__version__}"


def write_csv(path: PathLike, header: str, rows: Iterable[Sequence], provenance: Optional[str] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if provenance:
            f.write(provenance + "\n")
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(c if isinstance(c, str) else fmt(c) for c in row) + "\n")


def read_csv(path: PathLike) -> tuple[list[str], list[list[str]]]:
    """(header fields, rows) skipping ``#`` lines."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def write_provenance(out_dir: PathLike, config_hash: str, seed: int, **extra) -> None:
    """Sidecar record; the timestamp lives only here so CSVs stay reproducible."""
    record = {
        "config_hash": config_hash,
        "seed": seed,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        **extra,
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "provenance.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def trajectory_rows(logs: Sequence[IterationLog]):
    for entry in logs:
        yield (entry.iteration, entry.loss_c, entry.loss_adv, entry.bacc, entry.dcor2[0], entry.mi[0])


def write_trajectory(path: PathLike, logs: Sequence[IterationLog], provenance: Optional[str] = None) -> None:
    write_csv(path, TRAJECTORY_HEADER, trajectory_rows(logs), provenance)


def report_for(params: ModelParams, dataset: Dataset, eo_bins: int = 4) -> metrics.MetricReport:
    _, probs, features = evaluate(params, dataset)
    return metrics.metric_report(probs[:, 1], dataset.labels.astype(int), features, dataset.protected, eo_bins)


def report_row(rep: metrics.MetricReport) -> tuple:
    return (rep.bacc, rep.f1, rep.auc, rep.dcor2[0], rep.mi[0], rep.eo_avg, rep.eo_max)


def write_report(path: PathLike, rep: metrics.MetricReport, provenance: Optional[str] = None) -> None:
    write_csv(path, ",".join(REPORT_FIELDS), [report_row(rep)], provenance)


def dataset_spec(dataset: Dataset) -> ArchitectureSpec:
    _, _, h, w = dataset.images.shape
    return ArchitectureSpec(input_hw=(h, w), n_protected=dataset.protected.shape[1])


@dataclass
class RunResult:
    variant: str
    seed: int
    params: Optional[ModelParams]
    logs: list[IterationLog]
    report: Optional[metrics.MetricReport]
    status: str = "ok"


def run_training(
    dataset: Dataset, cfg: TrainConfig, out_dir: Optional[PathLike] = None, config_hash: str = ""
) -> RunResult:
    """Train one model; with ``out_dir`` also write model, trajectory and report.

    On divergence the last logged parameters are saved before the error
    propagates.
    """
    prov = provenance_line(config_hash, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        params, logs = train(dataset, cfg, dataset_spec(dataset))
    except TrainingDivergence as exc:
        if out is not None:
            if exc.last_good is not None:
                save_model(exc.last_good, out / "model.brnt")
            write_trajectory(out / "trajectory.csv", exc.logs, prov)
        raise
    rep = report_for(params, dataset)
    if out is not None:
        save_model(params, out / "model.brnt")
        write_trajectory(out / "trajectory.csv", logs, prov)
        write_report(out / "report.csv", rep, prov)
        timing = {"elapsed_seconds": time.perf_counter() - t0, "iterations": cfg.iterations}
        (out / "run.json").write_text(json.dumps(timing, indent=2) + "\n", encoding="utf-8")
    return RunResult(cfg.variant.name, cfg.seed, params, logs, rep)


def read_trajectory(path: PathLike) -> list[IterationLog]:
    header, rows = read_csv(path)
    if header != TRAJECTORY_HEADER.split(","):
        raise ContractViolation(f"{path}: unexpected trajectory header {header}")
    opt = lambda c: float(c) if c else None  # noqa: E731
    return [IterationLog(int(r[0]), float(r[1]), opt(r[2]), float(r[3]), [float(r[4])], [float(r[5])]) for r in rows]


def load_run(run_dir: PathLike, dataset: Dataset, variant: str, seed: int, config_hash: str) -> Optional[RunResult]:
    """A finished run written by :func:`run_training`, or None if absent or stale."""
    run_dir = Path(run_dir)
    paths = [run_dir / n for n in ("model.brnt", "trajectory.csv", "report.csv")]
    if not all(p.is_file() for p in paths):
        return None
    with open(paths[1], encoding="utf-8") as f:
        if f.readline().rstrip("\n") != provenance_line(config_hash, seed):
            return None
    params = load_model(paths[0])
    return RunResult(variant, seed, params, read_trajectory(paths[1]), report_for(params, dataset))


def _aggregate(values: list[Optional[float]]) -> str:
    vals = np.array([v for v in values if v is not None and not np.isnan(v)], dtype=np.float64)
    if len(vals) == 0:
        return ""
    std = vals.std(ddof=1) if len(vals) > 1 else 0.0
    return f"{vals.mean():.17g}±{std:.17g}"


def comparison_rows(results: Sequence[RunResult], variants: Sequence[str]):
    """Per-run rows in (variant, seed) order, then one mean±std row per variant."""
    ordered = sorted(results, key=lambda r: (list(variants).index(r.variant), r.seed))
    for r in ordered:
        cells = report_row(r.report) if r.report is not None else (None,) * len(REPORT_FIELDS)
        yield (r.variant, str(r.seed), r.status, *cells)
    for v in variants:
        ok = [r for r in ordered if r.variant == v and r.report is not None]
        cols = list(zip(*(report_row(r.report) for r in ok))) if ok else [[] for _ in REPORT_FIELDS]
        yield (v, "mean±std", f"n={len(ok)}", *(_aggregate(list(c)) for c in cols))


def seeds_for(base_seed: int, n_seeds: int) -> list[int]:
    return [base_seed + i for i in range(n_seeds)]


def compare(
    dataset: Dataset,
    exp: ExperimentConfig,
    out_dir: Optional[PathLike] = None,
    base_seed: Optional[int] = None,
    resume: bool = False,
) -> list[RunResult]:
    """Every (variant, seed) cell, sequentially; failures are kept as flagged rows.

    With ``resume``, cells already finished under the same config hash in
    ``out_dir`` are loaded instead of retrained.
    """
    base = exp.train.seed if base_seed is None else base_seed
    out = Path(out_dir) if out_dir is not None else None
    chash = exp.hash()
    results = []
    for variant in exp.variants:
        for seed in seeds_for(base, exp.n_seeds):
            cfg = replace(exp.train, seed=seed, variant=replace(exp.train.variant, name=variant))
            run_dir = out / "runs" / f"{variant}_seed{seed}" if out is not None else None
            t0 = time.time()
            res = load_run(run_dir, dataset, variant, seed, chash) if resume and run_dir is not None else None
            try:
                if res is None:
                    res = run_training(dataset, cfg, run_dir, chash)
            except (TrainingDivergence, ContractViolation, FloatingPointError) as exc:
                log.warning("%s seed %d failed: %s", variant, seed, exc)
                res = RunResult(variant, seed, None, getattr(exc, "logs", []), None,
                                status="failed: " + str(exc).replace(",", ";"))
            log.info("%s seed %d done in %.0fs (%s)", variant, seed, time.time() - t0, res.status)
            results.append(res)
            if out is not None:
                write_csv(out / "comparison.csv", COMPARISON_HEADER, comparison_rows(results, exp.variants),
                          provenance_line(chash, base))
    return results


def pca_project(features: np.ndarray, dims: int) -> np.ndarray:
    """Projection of centered features onto the top principal axes.

    Each axis is signed so that its largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if not 1 <= dims <= min(x.shape):
        raise ContractViolation(f"cannot take {dims} principal components of a {x.shape} matrix")
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    axes = vt[:dims]
    signs = np.sign(axes[np.arange(dims), np.argmax(np.abs(axes), axis=1)])
    axes = axes * np.where(signs == 0, 1.0, signs)[:, None]
    return xc @ axes.T


def feature_rows(params: ModelParams, dataset: Dataset, pca_dims: int = 2):
    _, _, feats = evaluate(params, dataset)
    proj = pca_project(feats, pca_dims) if pca_dims else None
    header = ["index", "label", "sigma_a", "sigma_b"] + [f"f{j}" for j in range(feats.shape[1])]
    if proj is not None:
        header += [f"p{j}" for j in range(pca_dims)]
    rows = []
    for i in range(len(dataset)):
        row = [i, int(dataset.labels[i]), dataset.sigma_a[i], dataset.sigma_b[i], *feats[i]]
        if proj is not None:
            row += list(proj[i])
        rows.append(row)
    return ",".join(header), rows


def check_compatible(params: ModelParams, dataset: Dataset) -> None:
    _, c, h, w = dataset.images.shape
    if c != 1 or tuple(params.spec.input_hw) != (h, w):
        raise ContractViolation(
            f"model expects 1x{params.spec.input_hw[0]}x{params.spec.input_hw[1]} images, dataset has {c}x{h}x{w}"
        )
    if params.spec.n_protected != dataset.protected.shape[1]:
        raise ContractViolation("model and dataset disagree on the number of protected variables")


def oracle_summary(cfg: synthdata.SyntheticConfig, n_mc: int = 200_000, seed: int = 0) -> dict:
    res = synthdata.bayes_oracle_accuracy(cfg, n_mc=n_mc, seed=seed)
    return asdict(res)
