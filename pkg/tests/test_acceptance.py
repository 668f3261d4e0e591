"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``.  The lines are
also collected in the terminal summary of any pytest run.
"""

import math

import numpy as np
import pytest
import scipy.linalg
import scipy.stats

from conftest import random_instance, report
from fmtgp import config as config_mod
from fmtgp.cli import main
from fmtgp.encoding import EncodedInputs
from fmtgp.errors import SizeGuardError
from fmtgp.experiments import run_benchmark, run_compare, run_envelope, run_loo
from fmtgp.kernels import build_blocks, functional_block
from fmtgp.kronecker import block_cholesky
from fmtgp.model import (
    Dataset,
    FitConfig,
    FittedModel,
    Hyperparameters,
    dense_covariance,
    multi_start_fit,
    nll,
    nll_and_grad,
    sample_prior,
)
from fmtgp.synthetic import RayleighConfig, generate_dataset


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def dense_oracle(theta, data, kernel, enc_star, u_star):
    K = dense_covariance(theta, data, kernel)
    y = data.Y.ravel()
    value = -scipy.stats.multivariate_normal(np.zeros(y.size), K).logpdf(y)
    Kf = functional_block(data.enc.pairwise_sq(enc_star), theta.lengthscales_f, theta.sigma2,
                          kernel.nu_f)
    Kx = np.kron(theta.K_S, np.kron(Kf, kernel.scalar(data.grid, u_star, theta.lengthscale_u)))
    prior = np.kron(np.diag(theta.K_S), np.full(Kf.shape[1], theta.sigma2)
                    )[:, None] * kernel.scalar.diag(u_star)[None, :]
    cf = scipy.linalg.cho_factor(K)
    mean = Kx.T @ scipy.linalg.cho_solve(cf, y)
    var = prior.ravel() - np.einsum("ij,ij->j", Kx, scipy.linalg.cho_solve(cf, Kx))
    return value, mean, var


def test_criterion_01_oracle_equivalence():
    rng = np.random.default_rng(1)
    worst = {"nll": 0.0, "mean": 0.0, "var": 0.0}
    for k in range(200):
        S, n_f, n_u = int(rng.integers(1, 4)), int(rng.integers(2, 21)), int(rng.integers(2, 31))
        noise = 0.05 if k % 2 else None
        theta, data, kernel = random_instance(rng, S, n_f, n_u, noise=noise,
                                              periodic=noise is not None)
        data = Dataset(data.enc, np.linspace(0, 1.5, n_u), data.Y)
        if noise is None:
            # keep the dense oracle invertible without jitter
            theta = Hyperparameters(theta.task_raw, theta.log_sigma2, theta.log_lengthscales_f,
                                    math.log(rng.uniform(0.03, 0.1)))
        enc_star = EncodedInputs(tuple(rng.normal(size=(3, 3)) for _ in range(2)), data.enc.grams)
        u_star = rng.uniform(0, 1.5, 5)
        post = FittedModel(theta, data, kernel).predict(enc_star, u_star, include_noise=False)
        value, mean, var = dense_oracle(theta, data, kernel, enc_star, u_star)
        worst["nll"] = max(worst["nll"], abs(nll(theta, data, kernel) - value) / abs(value))
        worst["mean"] = max(worst["mean"], rel_err(post.mean, mean))
        worst["var"] = max(worst["var"], rel_err(post.var, var))
    ok = max(worst.values()) <= 1e-7
    report(1, ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
           + " (tol 1e-7, 200 instances)")
    assert ok


def test_criterion_02_gradient():
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in range(20):
        theta, data, kernel = random_instance(rng, int(rng.integers(1, 4)), int(rng.integers(2, 8)),
                                              int(rng.integers(2, 9)), noise=0.05 if k % 2 else None)
        _, g = nll_and_grad(theta, data, kernel)
        x = theta.to_vector()
        for i in range(x.size):
            h = 1e-5 * max(1.0, abs(x[i]))
            f = []
            for sign in (1, -1):
                v = x.copy()
                v[i] += sign * h
                f.append(nll(Hyperparameters.from_vector(v, theta.S, theta.d_f,
                                                         theta.noise is not None), data, kernel))
            fd = (f[0] - f[1]) / (2 * h)
            worst = max(worst, abs(g[i] - fd) / max(abs(fd), 1e-3))
    ok = worst <= 1e-4
    report(2, ok, f"max relative gradient error {worst:.1e} (tol 1e-4, 20 instances)")
    assert ok


def test_criterion_03_log_determinant():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        while True:
            S, n_f, n_u = int(rng.integers(1, 4)), int(rng.integers(1, 20)), int(rng.integers(1, 30))
            if S * n_f * n_u <= 512:
                break
        theta, data, kernel = random_instance(rng, S, max(n_f, 2), n_u)
        blocks = build_blocks(theta, data.enc, data.grid, kernel)
        kc = block_cholesky(blocks)
        _, ref = np.linalg.slogdet(blocks.dense())
        worst = max(worst, abs(2 * kc.log_det_L - ref) / abs(ref))
    ok = worst <= 1e-8
    report(3, ok, f"max relative log-det error {worst:.1e} (tol 1e-8)")
    assert ok


@pytest.mark.slow
def test_criterion_04_runtime_benchmark(tmp_path):
    cfg = config_mod.defaults()
    speedups, skipped = {}, []
    for n_f in (25, 100, 175, 250):
        cfg["benchmark"]["sizes"] = [n_f]
        out = tmp_path / str(n_f)
        out.mkdir()
        try:
            speedups[n_f] = run_benchmark(cfg, out)["speedup"][n_f]
        except SizeGuardError:
            skipped.append(n_f)
    needed = [n for n in (100, 175, 250)]
    ok = all(n in speedups and speedups[n] >= 10 for n in needed)
    detail = ", ".join(f"n_f={n}: {s:.0f}x" for n, s in speedups.items())
    if skipped:
        detail += f"; n_f={skipped} exceed the dense-path memory guard (n > 20000), not measured"
    report(4, ok, detail)
    assert ok


@pytest.mark.slow
def test_criterion_05_desk_loo(tmp_path):
    cfg = config_mod.defaults()
    cfg["seed"] = 1
    result = run_loo(cfg, tmp_path)
    per = result["per_fold"]
    q2_med = [float(np.median(per[(s, "q2")])) for s in range(2)]
    ca_frac = [float(np.mean(np.asarray(per[(s, "ca")]) == 1.0)) for s in range(2)]
    ok_q2 = min(q2_med) >= 0.95
    ok_ca = min(ca_frac) >= 0.9
    report(5, ok_q2 and ok_ca,
           f"median Q2 per task {q2_med[0]:.4f}, {q2_med[1]:.4f} (>= 0.95: {ok_q2}); "
           f"folds with CA = 1: {ca_frac[0]:.2f}, {ca_frac[1]:.2f} (>= 0.90: {ok_ca}); "
           f"{result['folds']} folds, {result['failed']} failed")
    assert ok_q2 and ok_ca


def test_criterion_06_prior_sampling():
    sd = generate_dataset(RayleighConfig(n_f=10, n_u=8))
    draws = sample_prior(sd.theta0, sd.dataset.enc, sd.dataset.grid, 5000, seed=6,
                         kernel=sd.kernel)
    a = draws[:, 0].reshape(5000, -1)
    b = draws[:, 1].reshape(5000, -1)
    a, b = a - a.mean(axis=0), b - b.mean(axis=0)
    r = (a * b).sum(axis=0) / np.sqrt((a * a).sum(axis=0) * (b * b).sum(axis=0))
    ok = bool(np.all(np.abs(r - 0.85) <= 0.05))
    report(6, ok, f"matched-coordinate correlations in [{r.min():.3f}, {r.max():.3f}], "
                  f"mean {r.mean():.3f} (target 0.85 +/- 0.05)")
    assert ok


@pytest.mark.slow
def test_criterion_07_parameter_recovery():
    sd = generate_dataset(RayleighConfig(n_f=60, n_u=50, seed=1))
    m = multi_start_fit(sd.dataset, FitConfig.profile("synthetic"), n_restart=10, seed=0,
                        kernel=sd.kernel)
    corr = m.theta.task_correlation()[0, 1]
    ratio = m.theta.lengthscale_u / sd.truth.lengthscale_u
    ok = abs(corr - 0.85) <= 0.1 and 0.5 <= ratio <= 2.0
    report(7, ok, f"task correlation {corr:.3f} (0.85 +/- 0.1), "
                  f"lengthscale_u {m.theta.lengthscale_u:.3f} (1.5, factor 2)")
    assert ok


@pytest.mark.slow
def test_criterion_08_mtgp_vs_single(tmp_path):
    res = []
    for seed in range(5):
        cfg = config_mod.defaults()
        cfg["seed"] = seed
        cfg["evaluation"]["n_test"] = 20
        out = tmp_path / str(seed)
        out.mkdir()
        res.append(run_compare(cfg, out))
    q = {arm: float(np.mean([r[arm]["q2"] for r in res])) for arm in ("mtgp", "single")}
    c = {arm: float(np.mean([r[arm]["ca"] for r in res])) for arm in ("mtgp", "single")}
    ok_q = q["mtgp"] >= q["single"]
    ok_c = abs(c["mtgp"] - 0.95) <= abs(c["single"] - 0.95)
    report(8, ok_q and ok_c,
           f"mean Q2 mtgp {q['mtgp']:.5f} vs single {q['single']:.5f} ({ok_q}); "
           f"mean CA mtgp {c['mtgp']:.4f} vs single {c['single']:.4f} ({ok_c}); 5 seeds")
    assert ok_q and ok_c


def test_criterion_09_envelopes(tmp_path):
    cfg = config_mod.defaults()
    cfg["evaluation"]["n_test"] = 30
    cfg["optimizer"]["n_restart"] = 3
    rows = run_envelope(cfg, tmp_path)["rows"]
    cov = [v for _, k, v in rows if k == "ci_v_coverage"]
    contains = [v for _, k, v in rows if k == "ci_v_contains_ci_m"]
    ok = all(contains) and min(cov) >= 0.9
    report(9, ok, f"CI_v contains CI_m for all tasks: {bool(all(contains))}; "
                  f"CI_v coverage {', '.join(f'{c:.3f}' for c in cov)} (>= 0.9)")
    assert ok


CONFIG_10 = """
seed = 5
[generator]
n_f = 32
n_u = 10
[optimizer]
n_restart = 2
max_iter = 60
[evaluation]
n_test = 20
loo_folds = 3
[benchmark]
sizes = [8]
n_u = 10
reps = 2
"""


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(CONFIG_10)
    timing = {"timing.csv", "benchmark.csv", "speedup.csv"}
    mismatched, compared = [], 0
    for verb in ("generate", "fit", "predict", "loo", "compare", "benchmark", "envelope"):
        dirs = []
        for rep in ("a", "b"):
            out = tmp_path / verb / rep
            out.mkdir(parents=True)
            config = cfg
            if verb == "predict":
                config = tmp_path / "predict.toml"
                config.write_text(f'[predict]\nmodel = "{tmp_path / "fit" / "a" / "model.json"}"\n')
            assert main(["--config", str(config), "--out", str(out), verb]) == 0
            dirs.append(out)
        for p in sorted(dirs[0].iterdir()):
            if p.name in timing:
                continue
            compared += 1
            if p.read_bytes() != (dirs[1] / p.name).read_bytes():
                mismatched.append(f"{verb}/{p.name}")
    ok = not mismatched
    report(10, ok, f"{compared} output files compared across 7 verbs, "
                   f"{len(mismatched)} differ {mismatched if mismatched else ''}".rstrip())
    assert ok
