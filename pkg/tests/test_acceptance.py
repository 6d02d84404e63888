"""Acceptance criteria, each run at its stated tolerance.

Every test records one pass/fail line (shown in the terminal summary) before
asserting. Oracle constants come from mpmath expressions evaluated in the
tests themselves.
"""

from __future__ import annotations

import json
import math
import os
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest
import sympy as sp

from metapac import cli
from metapac.bounds import BoundInputs, bound_fast_rate, bound_new_classic, bound_pacoh, evaluate_bound, generic_corollary_bound, specialization
from metapac.coverage import CoverageConfig, mc_slack, run_coverage
from metapac.data import SyntheticEnvSpec, gen_synthetic, make_permuted_tasks, read_idx, write_idx
from metapac.divergences import combine_squares, kl_bernoulli, kl_bernoulli_inv_upper
from metapac.gaussians import DiagGaussian, IsotropicGaussian, KlMode, kl_diag, kl_hyper
from metapac.lemmas import Dist, TrialConfig, verify_dgamma, verify_dv_random, verify_maurer, verify_subgauss_sq, verify_union_sum
from metapac.rng import rng_stream
from metapac.trainer import TrainConfig, adapt_result, baseline_result, init_state, objective, train

mpmath.mp.dps = 30


def zeros(n, m, delta):
    return BoundInputs(n, m, delta, 0.0, 0.0, np.zeros(n))


# --------------------------------------------------------------------------
# 1


def test_criterion_1_divergences(record):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    size = 100_000
    tol = 1e-10

    p, q = rng.uniform(0, 1, (2, size))
    pinsker = sum(kl_bernoulli(a, b) < 2 * (a - b) ** 2 - 1e-12 for a, b in zip(p, q))

    round_trip = 0
    for a, c in zip(rng.uniform(0, 1, size), rng.uniform(0, 5, size)):
        inv = kl_bernoulli_inv_upper(a, c, tol)
        k = kl_bernoulli(a, inv)
        ok = a <= inv <= 1.0 and k <= c + 1e-15
        if inv < 1.0:
            # the window holds unless the next double already violates the budget
            ok &= k >= c - 10 * tol or kl_bernoulli(a, np.nextafter(inv, 2.0)) > c
        round_trip += not ok

    n = rng.integers(1, 1000, size).astype(float)
    m = rng.integers(1, 1000, size).astype(float)
    x, y, z = rng.uniform(-1, 2, (3, size))
    budget = n * (x - y) ** 2 + m * (y - z) ** 2
    combined = np.array([combine_squares(a, b, c) for a, b, c in zip(n, m, budget)])
    inv_ineq = int(np.sum(np.abs(x - z) > combined * (1 + 1e-12) + 1e-12))

    elapsed = time.perf_counter() - start
    ok = pinsker == 0 and round_trip == 0 and inv_ineq == 0 and elapsed < 10
    record("1", ok, f"violations pinsker={pinsker} round-trip={round_trip} inv_ineq={inv_ineq} on 1e5 each; {elapsed:.1f}s < 10s")
    assert ok


# --------------------------------------------------------------------------
# 2


def test_criterion_2_gaussian_kl(record):
    rng = np.random.default_rng(202)
    worst_add, negatives = 0.0, 0
    for _ in range(10_000):
        d = int(rng.integers(1, 8))
        mq, lvq, mp, lvp = rng.normal(scale=2, size=(4, d))
        total = kl_diag(DiagGaussian(mq, lvq), DiagGaussian(mp, lvp))
        parts = sum(kl_diag(DiagGaussian(mq[k:k + 1], lvq[k:k + 1]), DiagGaussian(mp[k:k + 1], lvp[k:k + 1])) for k in range(d))
        negatives += total < 0
        worst_add = max(worst_add, abs(total - parts) / max(1.0, total))

    th2, ks, kp, mq_, mp_, vq_, vp_ = sp.symbols("th2 ks kp mq mp vq vp", positive=True)
    hyper = sp.lambdify((th2, ks, kp), (th2 + ks) / (2 * kp) + sp.log(kp / ks) - sp.Rational(1, 2), "mpmath")
    diag = sp.lambdify((mq_, mp_, vq_, vp_), sp.Rational(1, 2) * (sp.log(vp_ / vq_) + sp.log((vq_ + (mq_ - mp_) ** 2) / vp_)), "mpmath")
    worst_sym = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 6))
        mq, mp, lvq, lvp = rng.normal(size=(4, d))
        got = kl_diag(DiagGaussian(mq, lvq), DiagGaussian(mp, lvp), KlMode.PAPER_VERBATIM)
        want = sum(float(diag(mq[k], mp[k], math.exp(lvq[k]), math.exp(lvp[k]))) for k in range(d))
        theta = rng.normal(size=d)
        s, p = rng.uniform(0.01, 3, 2)
        got_h = kl_hyper(IsotropicGaussian(theta, s), IsotropicGaussian(np.zeros(d), p), KlMode.PAPER_VERBATIM)
        want_h = float(hyper(float(theta @ theta), s, p))
        worst_sym = max(worst_sym, abs(got - want) / max(1.0, abs(want)), abs(got_h - want_h) / max(1.0, abs(want_h)))
    ok = negatives == 0 and worst_add <= 1e-12 and worst_sym <= 1e-12
    record("2", ok, f"negatives={negatives}, additivity err {worst_add:.1e}, symbolic err {worst_sym:.1e} (tol 1e-12)")
    assert ok


# --------------------------------------------------------------------------
# 3


def test_criterion_3_lemmas(record):
    start = time.perf_counter()
    exact = [
        verify_subgauss_sq(TrialConfig(inner=1, dist=Dist("bernoulli", p=0.5)), 1.0),
        verify_maurer(TrialConfig(dist=Dist("bernoulli", p=0.5)), 10),
        verify_dgamma(TrialConfig(dist=Dist("bernoulli", p=0.3)), 5, -1.0),
    ]
    maurer_cert_ok = abs(exact[1].certified - 6.3246) < 5e-5
    exact_ok = all(v.exact and v.passed for v in exact) and maurer_cert_ok
    mc = [
        verify_subgauss_sq(TrialConfig(trials=100_000, inner=10, seed=1), 1.0),
        verify_subgauss_sq(TrialConfig(trials=100_000, inner=10, seed=2), 1.0, "sqrt"),
        verify_maurer(TrialConfig(trials=100_000, inner=10, seed=3)),
        verify_dgamma(TrialConfig(trials=100_000, inner=5, seed=4), gamma=-1.0),
        verify_union_sum(TrialConfig(trials=100_000, seed=5), [0.05, 0.05]),
    ]
    mc_ok = all(v.passed and v.slack_sds >= 3 for v in mc)
    dv = verify_dv_random(seed=6, cases=10_000)
    elapsed = time.perf_counter() - start
    ok = exact_ok and mc_ok and dv.passed and dv.empirical <= 1e-10 and elapsed < 60
    min_slack = min(v.slack_sds for v in mc)
    record("3", ok, f"exact paths pass={exact_ok} (2 sqrt 10 = {exact[1].certified:.4f}), MC min headroom "
                    f"{min_slack:.0f} sd, DV gap {dv.empirical:.1e}; {elapsed:.1f}s < 60s")
    assert ok


# --------------------------------------------------------------------------
# 4


def _random_inputs(rng):
    n = int(rng.integers(9, 40))
    m = int(rng.integers(9, 300))
    return BoundInputs(n, m, rng.uniform(0.01, 0.5), rng.uniform(), rng.exponential(3), rng.exponential(3, n))


SPECIALIZATIONS = [("mlap", {}), ("lambda-liu", {"lam": 0.7}), ("mys-classic", {}), ("mys-quadratic", {}),
                   ("mys-lambda", {"lam": 1.3}), ("fast-rate", {"lam_e": 1.5, "lam_t": 0.8})]


def test_criterion_4a_bound_algebra(record):
    rng = np.random.default_rng(404)
    worst = 0.0
    for name, hp in SPECIALIZATIONS:
        for _ in range(100):
            inp = _random_inputs(rng)
            g = generic_corollary_bound(inp, **specialization(name, inp, **hp)).value
            d = evaluate_bound(name, inp, **hp).value
            worst = max(worst, abs(g - d) / max(1.0, abs(d)))
    mp = mpmath.mpf
    oracles = {
        "new-classic(2,2)": (bound_new_classic(zeros(2, 2, 0.1)).value,
                             float(mpmath.sqrt(mp(3) / 2) * mpmath.sqrt(mpmath.log(2 * mpmath.sqrt(2) / mp("0.1"))))),
        "new-classic(5,100)": (bound_new_classic(zeros(5, 100, 0.1)).value,
                               float(mpmath.sqrt(mp(202) / 792) * mpmath.sqrt(mpmath.log(100 * mpmath.sqrt(5) / mp("0.1"))))),
        "fast-rate(10,10)": (bound_fast_rate(zeros(10, 10, 0.2), 1.0, 1.0).value,
                             float(2 * mpmath.log(10) / 10 + 4 * mpmath.log(100) / 10)),
    }
    fixed_ok = all(abs(v - o) <= 1e-6 for v, o in oracles.values())
    fast_literal = abs(oracles["fast-rate(10,10)"][0] - 2.302585) <= 1e-6
    ok = worst <= 1e-12 and fixed_ok and fast_literal
    values = ", ".join(f"{k}={v:.7f}" for k, (v, _) in oracles.items())
    record("4a", ok, f"generic reproduces 6 specializations x100 (max rel err {worst:.1e}); oracle fixed points {values}")
    assert ok


@pytest.mark.xfail(strict=True, reason="printed new-classic literals disagree with the formula; see decisions ledger")
def test_criterion_4b_new_classic_literals(record):
    a = bound_new_classic(zeros(2, 2, 0.1)).value
    b = bound_new_classic(zeros(5, 100, 0.1)).value
    ok = abs(a - 2.239128) <= 1e-6 and abs(b - 1.402354) <= 1e-6
    record("4b", ok, f"literal targets 2.239128 / 1.402354 +-1e-6 vs computed {a:.6f} / {b:.6f} "
                     "(unattainable: the literals are arithmetic slips; the mpmath oracle agrees with the computed values)")
    assert ok


@pytest.mark.xfail(strict=True, reason="printed PACOH constants differ from every linear generic instance; see ledger")
def test_criterion_4c_pacoh_specialization(record):
    rng = np.random.default_rng(405)
    worst = 0.0
    for _ in range(100):
        inp = _random_inputs(rng)
        lam, beta = rng.uniform(0.5, 50, 2)
        g = generic_corollary_bound(inp, **specialization("pacoh", inp, lam=lam, beta=beta)).value
        d = bound_pacoh(inp, lam, beta).value
        worst = max(worst, abs(g - d) / max(1.0, abs(d)))
    ok = worst <= 1e-12
    record("4c", ok, f"generic reproduces PACOH x100: max rel err {worst:.2e} "
                     "(unattainable: moment and confidence constants differ; analysis in ledger)")
    assert ok


# --------------------------------------------------------------------------
# 5


def test_criterion_5_gradients(record):
    start = time.perf_counter()
    rng = np.random.default_rng(505)
    worst = 0.0
    for k in range(50):
        dim = int(rng.integers(1, 8))  # weight dimension dim + 1 <= 8
        n = int(rng.integers(2, 5))
        data = gen_synthetic(SyntheticEnvSpec(dim=dim, n=n, m=int(rng.integers(5, 30)), n_test_tasks=0, seed=k))[0]
        cfg = TrainConfig(seed=k)
        state = init_state(cfg, data)
        d = state.d
        state = state.with_flat(np.concatenate([rng.normal(size=d), rng.uniform(-3, 0, d), rng.normal(size=n * d),
                                                rng.uniform(-3, 0, n * d)]))
        g = objective(state, data, cfg, rng_stream(55, k)).grads.flat()
        v = state.flat()
        fd = np.empty_like(v)
        for i in range(v.size):
            e = np.zeros_like(v)
            e[i] = 1e-5
            up = objective(state.with_flat(v + e), data, cfg, rng_stream(55, k)).value
            down = objective(state.with_flat(v - e), data, cfg, rng_stream(55, k)).value
            fd[i] = (up - down) / 2e-5
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 30
    record("5", ok, f"max rel err vs central differences {worst:.1e} over 50 states (tol 1e-4); {elapsed:.1f}s < 30s")
    assert ok


# --------------------------------------------------------------------------
# 6


def test_criterion_6_coverage(record):
    start = time.perf_counter()
    cfg = CoverageConfig(trials=500, delta=0.1, env=SyntheticEnvSpec(dim=4, m=50, n=5, n_test_tasks=0, m_test=0))
    reports = run_coverage(cfg, {"new-classic": "new-classic", "mlap": "mlap"})
    elapsed = time.perf_counter() - start
    limit = 0.1 + mc_slack(0.1, 500)
    ok = all(r.violation_rate <= limit for r in reports) and elapsed < 300
    summary = "; ".join(f"{r.bound} rate {r.violations}/{r.trials} (mean bound {r.mean_bound:.3f}, "
                        f"mean risk {r.mean_risk:.3f})" for r in reports)
    record("6", ok, f"{summary}; limit {limit:.4f}; {elapsed:.0f}s < 300s")
    assert ok


# --------------------------------------------------------------------------
# 7


def test_criterion_7_training(record):
    start = time.perf_counter()
    decreased, improved, details = 0, 0, []
    for seed in (0, 1, 2):
        data = gen_synthetic(SyntheticEnvSpec(dim=4, task_spread=0.25, seed=seed, n=5, m=50, n_test_tasks=20, m_test=100))[0]
        cfg = TrainConfig(bound="new-classic", lr=1e-3, epochs=200, seed=seed)
        state, history = train(cfg, data)
        meta = np.mean([adapt_result(state, t, cfg, i).test_loss for i, t in enumerate(data.test_tasks)])
        base = np.mean([baseline_result(t, cfg, i).test_loss for i, t in enumerate(data.test_tasks)])
        decreased += history.objective[-1] < history.objective[0]
        improved += meta <= 0.8 * base
        details.append(f"seed {seed}: obj {history.objective[0]:.1f}->{history.objective[-1]:.2f}, "
                       f"test {meta:.3f} vs baseline {base:.3f}")
    elapsed = time.perf_counter() - start
    ok = decreased == 3 and improved >= 2 and elapsed < 120
    record("7", ok, f"(a) {decreased}/3 (b) {improved}/3; " + "; ".join(details) + f"; {elapsed:.0f}s < 120s")
    assert ok


# --------------------------------------------------------------------------
# 8 (informational)


def _mnist_paths():
    root = os.environ.get("METAPAC_MNIST_DIR")
    if not root:
        return None
    for suffix in ("", ".gz"):
        images = Path(root) / f"train-images-idx3-ubyte{suffix}"
        labels = Path(root) / f"train-labels-idx1-ubyte{suffix}"
        if images.exists() and labels.exists():
            return images, labels
    return None


def _fixture_images(tmp_path, count, side=8, seed=8):
    """Class-prototype images written and re-read through the IDX pipeline."""
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0, 1, (10, side * side))
    labels = rng.integers(0, 10, count)
    pixels = np.clip(protos[labels] + rng.normal(scale=0.3, size=(count, side * side)), 0, 1)
    write_idx(tmp_path / "img.idx", np.rint(pixels * 255).astype(np.uint8).reshape(count, side, side))
    write_idx(tmp_path / "lab.idx", labels.astype(np.uint8))
    return tmp_path / "img.idx", tmp_path / "lab.idx"


def test_criterion_8_permuted_ordering(record, tmp_path):
    paths = _mnist_paths()
    source = "MNIST"
    n_test, m_test = 20, 200
    if paths is None:
        source = "synthetic 8x8 IDX fixture (MNIST not available offline)"
        n_test, m_test = 5, 200
        paths = _fixture_images(tmp_path, (3 + n_test) * (1000 + m_test))
    images, _ = read_idx(paths[0])
    labels, _ = read_idx(paths[1])
    data = make_permuted_tasks(images, labels, "pixel-swaps", n=3, m=1000, seed=8, m_test=m_test, n_test_tasks=n_test)
    errors = {}
    for bound in ("new-classic", "mlap"):
        cfg = TrainConfig(bound=bound, epochs=100, seed=8)
        state, _ = train(cfg, data)
        errors[bound] = float(np.mean([adapt_result(state, t, cfg, i).test_loss for i, t in enumerate(data.test_tasks)]))
    holds = errors["new-classic"] <= errors["mlap"]
    record("8", "INFO", f"{source}: mean test loss new-classic {errors['new-classic']:.4f} vs mlap {errors['mlap']:.4f}; "
                        f"ordering new-classic <= mlap {'holds' if holds else 'does not hold'} (non-gating)")


# --------------------------------------------------------------------------
# 9


def test_criterion_9_determinism(record, tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("METAPAC_SEED", raising=False)
    monkeypatch.delenv("METAPAC_OUT", raising=False)
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"train": {"epochs": 10, "seed": 5},
                                  "data": {"synthetic": {"dim": 2, "n": 3, "m": 20, "n_test_tasks": 20, "m_test": 20}}}))
    out = str(tmp_path / "out")
    commands = {
        "bounds": ["bounds", "--n", "5", "--m", "100"],
        "lemmas": ["lemmas", "--trials", "20000", "--dv-cases", "500"],
        "history": ["train", "--config", str(config)],
        "eval": ["eval", "--config", str(config), "--baseline"],
        "coverage": ["coverage", "--bound", "new-classic,mlap", "--trials", "5", "--risk-tasks", "20"],
        "report": ["report", str(tmp_path / "out" / "eval.csv")],
    }
    extra = {"history": ["state.json"]}
    identical = {}
    for name, argv in commands.items():
        for fmt in ("json", "csv"):
            files = [f"{name}.{fmt}"] + extra.get(name, [])
            runs = []
            for _ in range(2):
                code = cli.main(argv + ["--out", out, "--format", fmt, "--seed", "5"])
                runs.append((code, [(Path(out) / f).read_bytes() for f in files]))
            capsys.readouterr()
            for k, f in enumerate(files):
                identical[f if f == "state.json" else f"{name}.{fmt}"] = (
                    runs[0][0] == runs[1][0] == 0 and runs[0][1][k] == runs[1][1][k])
    ok = all(identical.values())
    bad = [k for k, v in identical.items() if not v]
    record("9", ok, f"byte-identical re-runs for {len(identical)} report files" + (f"; differing: {bad}" if bad else ""))
    assert ok
