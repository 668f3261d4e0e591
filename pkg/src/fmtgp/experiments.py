"""Batch experiments behind the command-line verbs.

Each ``run_*`` function takes a validated config dict and an existing
output directory, writes its artifacts there atomically and returns a
small summary dict.  Timing values only ever appear in dedicated timing
columns or files so that all other outputs are byte-reproducible.
"""

from __future__ import annotations

import concurrent.futures
import csv
import io
import json
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from . import config as config_mod
from .encoding import EncodingConfig, fit_encoder, read_channels
from .errors import ConfigError, FMTGPError, SizeGuardError
from .kernels import KernelConfig, PeriodicSpec, ScalarKernel, build_blocks
from .kronecker import block_cholesky, dense_kron, kron_matvec, modewise_lower_solve
from .metrics import (
    EvaluationBatch,
    calibration_envelopes,
    summarize,
    task_coverage,
    task_q2,
    write_envelopes_csv,
    write_metrics_csv,
)
from .model import (
    Dataset,
    FitConfig,
    FittedModel,
    InitRanges,
    PROFILES,
    multi_start_fit,
)
from .random import stream
from .synthetic import (
    GroundTruth,
    RayleighConfig,
    generate_dataset,
    read_outputs_csv,
    write_dataset,
)

LOO_FAILURE_LIMIT = 0.10


class RunFailed(FMTGPError):
    """A run finished but too many of its units failed."""


# -- file helpers ---------------------------------------------------------------------------

def atomic_write(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_via(path, writer, *args):
    """Run ``writer(tmp_path, *args)`` and rename the result onto ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp, *args)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def check_out_dir(out):
    out = Path(out)
    if not out.is_dir():
        raise ConfigError(f"output directory {out} does not exist")
    return out


def write_resolved(cfg, out):
    atomic_write(Path(out) / "config.resolved", config_mod.dumps(cfg))


# -- config to objects -----------------------------------------------------------------------

def kernel_from(cfg):
    k = cfg["kernel"]
    return KernelConfig(k["nu_f"], ScalarKernel(k["scalar_kind"], k["nu_u"],
                                                PeriodicSpec(k["lengthscale_per"], k["period"])))


def encoding_from(cfg):
    e = cfg["encoding"]
    return EncodingConfig(e["kind"], e["d_proj"], e["inertia"], e["bspline_order"],
                          e["bspline_interior_knots"], e["haar_level"], e["whiten"])


def fit_config_from(cfg):
    o = cfg["optimizer"]
    prof = PROFILES[o["profile"]]
    base = prof["init"]
    init = InitRanges(
        tuple(o["init_lengthscale_f"] or base.lengthscale_f),
        tuple(o["init_lengthscale_u"] or base.lengthscale_u),
        tuple(o["init_sigma2"] or base.sigma2),
        tuple(o["init_noise"] or base.noise))
    return FitConfig(
        lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"], weight_decay=o["weight_decay"],
        clip_norm=o["clip_norm"], tol=o["tol"], patience=o["patience"],
        max_iter=o["max_iter"] if o["max_iter"] is not None else prof["max_iter"],
        normalize=o["normalize"],
        learn_noise=o["learn_noise"] if o["learn_noise"] is not None else prof["learn_noise"],
        init=init,
        lengthscale_u_bounds=None if o["lengthscale_u_bounds"] is None
        else tuple(o["lengthscale_u_bounds"]))


def generator_from(cfg):
    g = cfg["generator"]
    truth = GroundTruth(tuple(tuple(r) for r in g["K_S"]), g["sigma2"], tuple(g["lengthscales_f"]),
                        cfg["kernel"]["nu_f"], g["lengthscale_u"], cfg["kernel"]["nu_u"],
                        g["lengthscale_per"], g["period"])
    try:
        return RayleighConfig(g["n_f"], g["n_u"], g["n_grid"], len(g["lengthscales_f"]),
                              tuple(g["rho_range"]), tuple(g["alpha_range"]), tuple(g["domain"]),
                              g["d_proj"], truth, cfg["seed"])
    except ValueError as exc:
        raise ConfigError(f"[generator]: {exc}") from exc


@dataclass(frozen=True)
class RawData:
    """Raw curves (n_channels, n_f, n_grid), responses (S, n_f, n_u) and grids."""

    input_grid: np.ndarray
    curves: np.ndarray
    Y: np.ndarray
    u: np.ndarray

    @property
    def n_f(self):
        return self.Y.shape[1]

    def take(self, idx):
        return RawData(self.input_grid, self.curves[:, idx], self.Y[:, idx], self.u)


def _load_files(channels, outputs):
    grid, curves = read_channels(channels)
    Y, u = read_outputs_csv(outputs)
    curves = np.asarray(curves)
    if curves.shape[1] != Y.shape[1]:
        raise ConfigError(f"{len(channels)} channel files hold {curves.shape[1]} replicates but "
                          f"{outputs} holds {Y.shape[1]}")
    return RawData(np.asarray(grid), curves, Y, u)


def load_data(cfg):
    """Training and test raw data according to ``[data]`` and ``evaluation.n_test``."""
    d = cfg["data"]
    if d["source"] == "generator":
        sd = generate_dataset(generator_from(cfg))
        raw = RawData(sd.input_grid, np.asarray(sd.curves), sd.dataset.Y, sd.dataset.grid)
    else:
        raw = _load_files(d["channels"], d["outputs"])
    if d["test_channels"]:
        return raw, _load_files(d["test_channels"], d["test_outputs"])
    n_test = cfg["evaluation"]["n_test"]
    if n_test == 0:
        return raw, None
    if n_test >= raw.n_f - 1:
        raise ConfigError(f"evaluation.n_test = {n_test} leaves fewer than 2 training replicates")
    perm = stream(cfg["seed"], "split").permutation(raw.n_f)
    return raw.take(np.sort(perm[n_test:])), raw.take(np.sort(perm[:n_test]))


def encode_train(raw, cfg):
    encoder = fit_encoder(list(raw.curves), raw.input_grid, encoding_from(cfg))
    return Dataset(encoder.transform(list(raw.curves)), raw.u, raw.Y), encoder


def fit_raw(raw, cfg, jobs=1, tasks=None):
    data, encoder = encode_train(raw, cfg)
    if tasks is not None:
        data = data.take_tasks(tasks)
    return multi_start_fit(data, fit_config_from(cfg), cfg["optimizer"]["n_restart"], cfg["seed"],
                           kernel_from(cfg), encoder, jobs=jobs)


def evaluate(model, test, cfg, tasks=None):
    post = model.predict(list(test.curves), test.u,
                         include_noise=cfg["evaluation"]["include_noise"])
    Y = test.Y if tasks is None else test.Y[np.atleast_1d(tasks)]
    return post, EvaluationBatch(Y, post.mean, post.var)


def _metric_rows(batch, delta, prefix=""):
    rows = []
    for s in range(batch.n_tasks):
        rows.append((s, f"{prefix}q2", task_q2(batch, s)))
        rows.append((s, f"{prefix}ca", task_coverage(batch, s, delta)))
    return rows


def _trace_text(model):
    return _csv_text(["restart", "iteration", "nll", "grad_norm"], model.info.telemetry())


def _save_model(model, out):
    atomic_write(Path(out) / "model.json", json.dumps(model.to_dict()) + "\n")
    atomic_write(Path(out) / "trace.csv", _trace_text(model))


# -- verbs ---------------------------------------------------------------------------------------

def run_generate(cfg, out):
    """Write the synthetic dataset files."""
    out = check_out_dir(out)
    sd = generate_dataset(generator_from(cfg))
    with tempfile.TemporaryDirectory(dir=out) as tmp:
        for p in write_dataset(sd, tmp):
            os.replace(p, out / p.name)
    write_resolved(cfg, out)
    S, n_f, n_u = sd.dataset.shape
    return {"S": S, "n_f": n_f, "n_u": n_u, "n": S * n_f * n_u}


def run_fit(cfg, out, jobs=1):
    """Multi-start fit; writes model.json, trace.csv and metrics.csv."""
    out = check_out_dir(out)
    train, test = load_data(cfg)
    model = fit_raw(train, cfg, jobs)
    rows = [("all", "nll", float(model.nll)), ("all", "restart", model.info.restart)]
    if test is not None:
        _, batch = evaluate(model, test, cfg)
        rows += _metric_rows(batch, cfg["evaluation"]["delta"])
        sizes = cfg["evaluation"]["train_sizes"]
        if sizes:
            atomic_write(out / "train_sizes.csv", _csv_text(
                ["n_train", "task", "metric", "value"], _size_study(train, test, cfg, sizes, jobs)))
    _save_model(model, out)
    atomic_via(out / "metrics.csv", write_metrics_csv, rows)
    write_resolved(cfg, out)
    return {"nll": float(model.nll), "restart": model.info.restart}


def _size_study(train, test, cfg, sizes, jobs):
    """Refit on the first ``k`` training replicates for each requested ``k``."""
    rows = []
    for k in sizes:
        if not 2 <= int(k) <= train.n_f:
            raise ConfigError(f"evaluation.train_sizes entry {k} outside [2, {train.n_f}]")
        model = fit_raw(train.take(np.arange(int(k))), cfg, jobs)
        _, batch = evaluate(model, test, cfg)
        rows += [(int(k),) + r for r in _metric_rows(batch, cfg["evaluation"]["delta"])]
    return rows


def run_predict(cfg, out):
    """Predict from a saved model without refitting; writes predictions.csv."""
    out = check_out_dir(out)
    p = cfg["predict"]
    if not p["model"]:
        raise ConfigError("predict.model must name a saved model.json")
    try:
        model = FittedModel.from_dict(json.loads(Path(p["model"]).read_text()))
    except OSError as exc:
        raise ConfigError(f"cannot read model {p['model']}: {exc.strerror}") from exc
    if p["channels"]:
        _, curves = read_channels(p["channels"])
        inputs = list(np.asarray(curves))
    else:
        inputs = model.data.enc
    u = np.asarray(p["u"], dtype=float) if p["u"] else None
    tasks = p["tasks"] or None
    post = model.predict(inputs, u, tasks, include_noise=cfg["evaluation"]["include_noise"])
    rows = [(int(t), i, float(uu), float(post.mean[a, i, j]), float(post.var[a, i, j]))
            for a, t in enumerate(post.tasks) for i in range(post.mean.shape[1])
            for j, uu in enumerate(post.u)]
    atomic_write(out / "predictions.csv", _csv_text(["task", "replicate", "u", "mean", "var"], rows))
    write_resolved(cfg, out)
    return {"rows": len(rows)}


def _loo_fold(args):
    raw, cfg, k, theta = args
    train = raw.take(np.setdiff1d(np.arange(raw.n_f), [k]))
    test = raw.take([k])
    try:
        if theta is None:
            model = fit_raw(train, cfg)
        else:
            data, encoder = encode_train(train, cfg)
            model = FittedModel(theta, data, kernel_from(cfg), encoder)
        _, batch = evaluate(model, test, cfg)
        return k, _metric_rows(batch, cfg["evaluation"]["delta"]), None
    except FMTGPError as exc:
        return k, None, f"{type(exc).__name__}: {exc}"


def run_loo(cfg, out, jobs=1):
    """Leave-one-replicate-out cross-validation.

    Writes ``loo.csv`` (``fold,task,metric,value``) with per-fold results
    and ``metrics.csv`` with boxplot statistics.  The basis is refitted on
    each fold's training replicates; hyperparameters are re-optimized per
    fold unless ``evaluation.loo_reoptimize`` is false.
    """
    out = check_out_dir(out)
    raw, _ = load_data(cfg)
    if raw.n_f < 3:
        raise ConfigError("LOO needs at least 3 functional replicates")
    folds = range(raw.n_f if cfg["evaluation"]["loo_folds"] is None
                  else min(cfg["evaluation"]["loo_folds"], raw.n_f))
    theta = None if cfg["evaluation"]["loo_reoptimize"] else fit_raw(raw, cfg, jobs).theta
    args = [(raw, cfg, k, theta) for k in folds]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_loo_fold, args))
    else:
        results = [_loo_fold(a) for a in args]
    fold_rows, failures = [], []
    per = {}
    for k, rows, err in results:
        if err is not None:
            failures.append((k, err))
            fold_rows.append((k, "all", "error", err))
            continue
        for task, metric, value in rows:
            fold_rows.append((k, task, metric, value))
            per.setdefault((task, metric), []).append(value)
    atomic_write(out / "loo.csv", _csv_text(["fold", "task", "metric", "value"], fold_rows))
    summary = []
    for (task, metric), vals in sorted(per.items()):
        for stat, v in summarize(vals).items():
            summary.append((task, f"{metric}_{stat}", v))
        if metric == "ca":
            summary.append((task, "ca_eq1_fraction", float(np.mean(np.asarray(vals) == 1.0))))
    summary.append(("all", "folds", len(results)))
    summary.append(("all", "failed_folds", len(failures)))
    atomic_via(out / "metrics.csv", write_metrics_csv, summary)
    write_resolved(cfg, out)
    result = {"folds": len(results), "failed": len(failures), "per_fold": per}
    if len(failures) > LOO_FAILURE_LIMIT * len(results):
        raise RunFailed(f"{len(failures)} of {len(results)} LOO folds failed: {failures[:3]}")
    return result


def run_compare(cfg, out, jobs=1):
    """MTGP versus ``S`` independent single-task models on one test split.

    Both arms share restarts, seeds, init ranges and optimizer settings.
    Writes ``metrics.csv`` (``task,metric,value`` with ``mtgp_`` and
    ``single_`` prefixes) and ``timing.csv``.
    """
    out = check_out_dir(out)
    train, test = load_data(cfg)
    if test is None:
        raise ConfigError("compare needs a test split: set evaluation.n_test or data.test_*")
    delta = cfg["evaluation"]["delta"]
    t0 = time.perf_counter()
    mtgp = fit_raw(train, cfg, jobs)
    t_train_m = time.perf_counter() - t0
    t0 = time.perf_counter()
    _, batch_m = evaluate(mtgp, test, cfg)
    t_pred_m = time.perf_counter() - t0
    S = train.Y.shape[0]
    means, vars_ = [], []
    t_train_s = t_pred_s = 0.0
    for s in range(S):
        t0 = time.perf_counter()
        single = fit_raw(train, cfg, jobs, tasks=[s])
        t_train_s += time.perf_counter() - t0
        t0 = time.perf_counter()
        post, _ = evaluate(single, test, cfg, tasks=[s])
        t_pred_s += time.perf_counter() - t0
        means.append(post.mean[0])
        vars_.append(post.var[0])
    batch_s = EvaluationBatch(test.Y, np.array(means), np.array(vars_))
    rows = _metric_rows(batch_m, delta, "mtgp_") + _metric_rows(batch_s, delta, "single_")
    rows.sort(key=lambda r: (r[0], r[1]))
    summary = {}
    for arm, batch in (("mtgp", batch_m), ("single", batch_s)):
        q = float(np.mean([task_q2(batch, s) for s in range(S)]))
        c = float(np.mean([task_coverage(batch, s, delta) for s in range(S)]))
        rows += [("mean", f"{arm}_q2", q), ("mean", f"{arm}_ca", c)]
        summary[arm] = {"q2": q, "ca": c}
    atomic_via(out / "metrics.csv", write_metrics_csv, rows)
    n_test = test.n_f
    timing = [("mtgp", t_train_m, t_pred_m / n_test), ("single", t_train_s, t_pred_s / n_test)]
    atomic_write(out / "timing.csv",
                 _csv_text(["model", "train_seconds", "predict_seconds_per_scenario"], timing))
    write_resolved(cfg, out)
    return summary


def benchmark_problem(cfg, n_f):
    """Shared factors at the generator's truth for ``n_f`` replicates."""
    b = cfg["benchmark"]
    gcfg = generator_from({**cfg, "generator": {**cfg["generator"], "n_f": n_f, "n_u": b["n_u"]}})
    sd = generate_dataset(gcfg)
    blocks = build_blocks(sd.theta0, sd.dataset.enc, sd.dataset.grid, sd.kernel,
                          sqdist=sd.dataset.sqdist)
    return block_cholesky(blocks), sd.dataset.Y


def run_benchmark(cfg, out):
    """Time naive dense versus mode-wise computation of ``alpha = L^{-1} y``.

    Writes ``benchmark.csv`` with ``n_f,method,mean_seconds,std_seconds,reps``
    plus ``speedup.csv``.  Every size must pass the dense-path guard, which
    is checked before any work starts.
    """
    out = check_out_dir(out)
    b = cfg["benchmark"]
    S = len(cfg["generator"]["K_S"])
    for n_f in b["sizes"]:
        n = S * n_f * b["n_u"]
        if n > b["max_naive_n"]:
            raise SizeGuardError(f"n_f = {n_f} gives n = {n} above the dense-path guard "
                                 f"benchmark.max_naive_n = {b['max_naive_n']}")
    rows, ratios = [], []
    for n_f in b["sizes"]:
        kc, Y = benchmark_problem(cfg, n_f)
        y = Y.reshape(-1)
        L = dense_kron(*kc.factors, max_n=b["max_naive_n"])
        a_fast = modewise_lower_solve(kc, y)
        a_naive = _dense_solve(L, y)
        err = np.max(np.abs(a_fast - a_naive)) / max(np.max(np.abs(a_naive)), 1e-300)
        # on ill-conditioned factors the forward gap reflects cond(L), so accept
        # agreement when both solutions reproduce y to the same tolerance
        resid = max(np.linalg.norm(kron_matvec(*kc.factors, a) - y) / np.linalg.norm(y)
                    for a in (a_fast, a_naive))
        if not (err <= b["check_tol"] or resid <= b["check_tol"]):
            raise RunFailed(f"n_f = {n_f}: methods disagree (relative difference {err:.2e}, "
                            f"residual {resid:.2e})")
        times = {"naive": [], "tensorized": []}
        for _ in range(b["reps"]):
            t0 = time.perf_counter()
            _dense_solve(L, y)
            times["naive"].append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            modewise_lower_solve(kc, y)
            times["tensorized"].append(time.perf_counter() - t0)
        del L
        for method in ("naive", "tensorized"):
            t = np.asarray(times[method])
            rows.append((n_f, method, float(t.mean()), float(t.std(ddof=1) if t.size > 1 else 0.0),
                         b["reps"]))
        ratios.append((n_f, float(np.mean(times["naive"]) / np.mean(times["tensorized"])), err, resid))
    atomic_write(out / "benchmark.csv",
                 _csv_text(["n_f", "method", "mean_seconds", "std_seconds", "reps"], rows))
    atomic_write(out / "speedup.csv", _csv_text(["n_f", "speedup", "max_rel_diff", "max_rel_residual"], ratios))
    write_resolved(cfg, out)
    return {"rows": rows, "speedup": {n: r for n, r, _, _ in ratios}}


def _dense_solve(L, y):
    # L.T is Fortran-ordered, so LAPACK runs on the shared matrix without copying it
    return scipy.linalg.solve_triangular(L.T, y, lower=False, trans="T", check_finite=False)


def run_envelope(cfg, out, jobs=1):
    """Calibration envelopes over the test replicates.

    Writes ``envelopes.csv`` and ``metrics.csv`` with per-task CI_v
    coverage of the true responses and whether CI_v contains CI_m.
    """
    out = check_out_dir(out)
    train, test = load_data(cfg)
    if test is None:
        raise ConfigError("envelope needs test replicates: set evaluation.n_test or data.test_*")
    model = fit_raw(train, cfg, jobs)
    _, batch = evaluate(model, test, cfg)
    delta = cfg["evaluation"]["delta"]
    envs, rows = {}, []
    for s in range(batch.n_tasks):
        env = calibration_envelopes(batch.y_true[s], batch.mean[s], batch.var[s], delta)
        envs[s] = env
        contains = bool(np.all((env.ci_v[:, 0] <= env.ci_m[:, 0]) & (env.ci_v[:, 1] >= env.ci_m[:, 1])))
        rows += [(s, "ci_v_coverage", env.pointwise_coverage(batch.y_true[s])),
                 (s, "ci_v_contains_ci_m", int(contains))]
    atomic_via(out / "envelopes.csv", write_envelopes_csv, test.u, envs)
    atomic_via(out / "metrics.csv", write_metrics_csv, rows)
    _save_model(model, out)
    write_resolved(cfg, out)
    coverage = {s: v for s, k, v in rows if k == "ci_v_coverage"}
    return {"ci_v_coverage": coverage, "envelopes": envs, "rows": rows}


VERBS = {
    "generate": run_generate,
    "fit": run_fit,
    "predict": run_predict,
    "loo": run_loo,
    "compare": run_compare,
    "benchmark": run_benchmark,
    "envelope": run_envelope,
}
