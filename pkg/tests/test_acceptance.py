"""Acceptance criteria, each checked at its stated tolerance and time budget.

A ``[PASS]``/``[FAIL]`` line per criterion is printed in the terminal summary.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from deepfair import autodiff as ad
from deepfair import cli, data, network, training
from deepfair.dependence import class_weights, dc_conditional, dc_fast, dc_naive
from deepfair.metrics import PredictionSet, evaluate, ks_distance, mcdp_gap, tpr_gap
from deepfair.network import NetworkSpec
from deepfair.training import TrainConfig, loss_independence, loss_separation


def mean_se(values):
    values = np.asarray(values)
    return values.mean(), values.std(ddof=1) / math.sqrt(values.size)


# --- estimator -----------------------------------------------------------------------------

def test_criterion_01_oracle_equivalence(record_criterion):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        n, d, p = rng.integers(4, 17), rng.integers(1, 5), rng.integers(1, 5)
        z, x = rng.normal(size=(n, d)), rng.normal(size=(n, p))
        naive = dc_naive(z, x).value
        worst = max(worst, abs(dc_fast(z, x).value - naive) / max(abs(naive), 1e-300))
    elapsed = time.perf_counter() - start
    ok = record_criterion(1, "fast estimator equals 4-subset oracle", worst < 1e-9 and elapsed < 5,
                          f"max rel err {worst:.2e}, {elapsed:.2f}s")
    assert ok


def test_criterion_02_unbiased_under_independence(record_criterion):
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    est = [dc_fast(rng.normal(size=(16, 2)), rng.normal(size=(16, 3))).value for _ in range(2000)]
    m, se = mean_se(est)
    elapsed = time.perf_counter() - start
    ok = record_criterion(2, "unbiased under independence", abs(m) <= 3 * se and elapsed < 30,
                          f"mean {m:.4g}, 3 SE {3 * se:.4g}, {elapsed:.1f}s")
    assert ok


def test_criterion_03_detects_dependence(record_criterion):
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    est = []
    for _ in range(500):
        x = rng.normal(size=(64, 3))
        est.append(dc_fast(x[:, :1], x).value)
    m, se = mean_se(est)
    elapsed = time.perf_counter() - start
    ok = record_criterion(3, "detects dependence", m > 5 * se and elapsed < 30,
                          f"mean {m:.4g}, 5 SE {5 * se:.4g}, {elapsed:.1f}s")
    assert ok


def test_criterion_04_data_processing(record_criterion):
    rng = np.random.default_rng(404)
    g = rng.normal(size=(4, 2))
    start = time.perf_counter()
    raw, mapped = [], []
    for _ in range(2000):
        x = rng.normal(size=(32, 4))
        z = x[:, :2] @ np.array([[1.0], [0.5]]) + rng.normal(size=(32, 1))
        raw.append(dc_fast(z, x).value)
        mapped.append(dc_fast(z, x @ g).value)
    m_raw, se_raw = mean_se(raw)
    m_map, se_map = mean_se(mapped)
    bound = m_raw + 3 * math.hypot(se_raw, se_map)
    elapsed = time.perf_counter() - start
    ok = record_criterion(4, "DC(Z, g(X)) does not exceed DC(Z, X)", m_map <= bound and elapsed < 60,
                          f"mapped {m_map:.4g} <= {bound:.4g}, {elapsed:.1f}s")
    assert ok


# --- gradients ---------------------------------------------------------------------------------

def test_criterion_05_gradient_correctness(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(505)
    X = rng.normal(size=(16, 4))
    Y = np.repeat([0, 1], 8)
    Z = rng.normal(size=(16, 1)) + X[:, :1]
    worst = {}
    for name, loss_fn in (("independence", loss_independence), ("separation", loss_separation)):
        for weights in (TrainConfig(lambda_mu_form=True, lam=1.5, mu=0.7).weights(),
                        TrainConfig(alpha=0.3).weights()):
            model = network.build(NetworkSpec(4, 2, 4, 7, 0.5), 5)
            model.zero_grad()
            loss_fn(model, X, Y, Z, weights, mode="train").total.backward()
            analytic, numeric = [], []
            for p in model.parameters().values():
                numeric.append(ad.numerical_gradient(
                    lambda: float(loss_fn(model, X, Y, Z, weights, mode="train").total.value),
                    p.value).ravel())
                analytic.append(p.grad.ravel())
            a, b = np.concatenate(analytic), np.concatenate(numeric)
            err = np.max(np.abs(a - b)) / np.max(np.abs(b))
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    ok = record_criterion(5, "full-loss gradients match finite differences",
                          max(worst.values()) < 1e-4 and elapsed < 60,
                          ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")
    assert ok


# --- fixtures ---------------------------------------------------------------------------------

def test_criterion_06_conditional_weights(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(606)
    z, x = rng.normal(size=(9, 1)), rng.normal(size=(9, 2))
    checks = [
        class_weights({0: 5, 1: 5}) == {0: 0.5, 1: 0.5},
        class_weights({0: 6, 1: 4}) == {0: 15 / 16, 1: 1 / 16},
        dc_conditional(z, x, np.zeros(9, dtype=int), 1).value == dc_fast(z, x).value,
    ]
    elapsed = time.perf_counter() - start
    ok = record_criterion(6, "conditional-DC class weights", all(checks) and elapsed < 1,
                          f"{sum(checks)}/3 exact, {elapsed:.3f}s")
    assert ok


def test_criterion_07_metric_fixtures(record_criterion):
    start = time.perf_counter()
    eye = np.eye(2)
    tpr = tpr_gap(PredictionSet(eye[[0, 0, 1, 0, 0, 1, 1, 0]], [0, 0, 1, 1, 0, 0, 1, 1],
                                [1, 1, 1, 1, 0, 0, 0, 0])).aggregate
    scores = lambda p: np.column_stack([1 - np.asarray(p), p])  # noqa: E731
    disjoint = mcdp_gap(PredictionSet(scores([0.9, 0.8, 0.1, 0.2]), [1, 1, 0, 0], [1, 1, 0, 0]))
    interleaved = mcdp_gap(PredictionSet(scores([0.1, 0.9, 0.5]), [0, 1, 0], [1, 1, 0]))
    rng = np.random.default_rng(707)
    grid_ok = True
    for _ in range(200):
        a = rng.choice(np.linspace(0, 1, 11), rng.integers(1, 20))
        b = rng.choice(np.linspace(0, 1, 11), rng.integers(1, 20))
        grid = np.union1d(a, b)
        brute = max(abs(np.mean(a <= y) - np.mean(b <= y)) for y in grid)
        grid_ok &= ks_distance(a, b) == brute
    checks = [round(tpr, 2) == 35.36, disjoint.per_class[0] == 1.0 and disjoint.aggregate == 100.0,
              interleaved.per_class[0] == 0.5, grid_ok]
    elapsed = time.perf_counter() - start
    ok = record_criterion(7, "metric fixtures", all(checks) and elapsed < 1,
                          f"TPR {tpr:.2f}, MCDP {disjoint.per_class[0]}/{interleaved.per_class[0]}, "
                          f"{elapsed:.3f}s")
    assert ok


# --- toy subspace ---------------------------------------------------------------------------

def u_centered(v):
    return ad.u_center(ad.pairwise_distances(ad.constant(v))).value


def permutation_null(a_tilde, b_tilde, reps, rng):
    n = a_tilde.shape[0]
    out = []
    for _ in range(reps):
        p = rng.permutation(n)
        out.append(np.sum(a_tilde[np.ix_(p, p)] * b_tilde) / (n * (n - 3)))
    return np.asarray(out)


def test_criterion_08_toy_subspace(record_criterion):
    start = time.perf_counter()
    ds = data.gen_toy_sdr(5000, noise_sd=0.1, seed=808)
    n = ds.n
    rng = np.random.default_rng(809)
    a = u_centered(ds.Z)
    fair = u_centered(ds.X @ data.BETA[2:].T)
    stat_fair = np.sum(a * fair) / (n * (n - 3))
    null_fair = permutation_null(a, fair, 20, rng)
    del fair
    full = u_centered(ds.X)
    stat_full = np.sum(a * full) / (n * (n - 3))
    null_full = permutation_null(a, full, 20, rng)
    fair_ok = abs(stat_fair - null_fair.mean()) <= 3 * null_fair.std(ddof=1)
    full_ok = stat_full > null_full.mean() + 3 * null_full.std(ddof=1)
    elapsed = time.perf_counter() - start
    ok = record_criterion(
        8, "toy fair subspace independent of Z, full X dependent", fair_ok and full_ok and elapsed < 60,
        f"fair {stat_fair:.2e} vs null sd {null_fair.std(ddof=1):.2e}; "
        f"full {stat_full:.3g} vs null sd {null_full.std(ddof=1):.2e}; {elapsed:.1f}s")
    assert ok


# --- end to end ----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def biased_run(tmp_path_factory):
    """Separation-criterion training through the CLI with the bundled biased config."""
    out = tmp_path_factory.mktemp("biased")
    cfg = cli.load_config("biased")
    start = time.perf_counter()
    with open(os.devnull, "w") as sink:
        import contextlib

        with contextlib.redirect_stdout(sink), contextlib.redirect_stderr(sink):
            code = cli.main(["train", "--config", "biased", "--deterministic", "--out", str(out / "a")])
    assert code == 0
    train_set, _, test_set = cli.load_splits(cfg)
    tcfg = cfg.train_config()
    spec = cfg.network_spec(train_set.p, train_set.num_classes)
    standard, _ = training.train_standard(train_set, tcfg, cfg.probe_hidden)
    base = evaluate(standard, test_set)
    initial = evaluate(network.build(spec, tcfg.seed), test_set, with_dc=True)
    elapsed = time.perf_counter() - start
    final = json.loads((out / "a" / "metrics.json").read_text())
    return dict(out=out, cfg=cfg, train=train_set, test=test_set, base=base, initial=initial,
                final=final, elapsed=elapsed)


def test_criterion_09_fairness_tradeoff(biased_run, record_criterion):
    base, final = biased_run["base"], biased_run["final"]
    tpr_cut = 1 - final["tpr_gap"] / base.tpr_gap
    mcdp_cut = 1 - final["mcdp_gap"] / base.mcdp_gap
    dc_ratio = final["dc_z_latent_given_y"] / biased_run["initial"].dc_z_latent_given_y
    checks = [tpr_cut >= 0.60, mcdp_cut >= 0.50, final["accuracy"] >= base.accuracy - 5,
              dc_ratio <= 0.20, biased_run["elapsed"] < 600]
    ok = record_criterion(
        9, "separation DFL vs Standard on the biased generator", all(checks),
        f"TPR {base.tpr_gap:.2f}->{final['tpr_gap']:.2f} (-{100 * tpr_cut:.0f}%), "
        f"MCDP {base.mcdp_gap:.2f}->{final['mcdp_gap']:.2f} (-{100 * mcdp_cut:.0f}%), "
        f"acc {base.accuracy:.2f}->{final['accuracy']:.2f}, DC ratio {dc_ratio:.3f}, "
        f"{biased_run['elapsed']:.0f}s")
    assert ok


def test_criterion_10_probe(biased_run, record_criterion):
    import contextlib
    import io

    start = time.perf_counter()
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf), contextlib.redirect_stderr(io.StringIO()):
        code = cli.main(["probe", str(biased_run["out"] / "a" / "model.dflm"), "--config", "biased"])
    assert code == 0
    probe = json.loads(buf.getvalue())
    elapsed = time.perf_counter() - start
    dfl, base = biased_run["final"], biased_run["base"]
    checks = [
        abs(probe["accuracy"] - dfl["accuracy"]) <= 2,
        probe["tpr_gap"] <= 1.5 * dfl["tpr_gap"], probe["mcdp_gap"] <= 1.5 * dfl["mcdp_gap"],
        probe["tpr_gap"] <= 0.4 * base.tpr_gap, probe["mcdp_gap"] <= 0.4 * base.mcdp_gap,
        elapsed < 300,
    ]
    ok = record_criterion(
        10, "plain probe on the frozen representation stays fair", all(checks),
        f"acc {probe['accuracy']:.2f} vs {dfl['accuracy']:.2f}, "
        f"TPR {probe['tpr_gap']:.2f} (DFL {dfl['tpr_gap']:.2f}, Std {base.tpr_gap:.2f}), "
        f"MCDP {probe['mcdp_gap']:.2f} (DFL {dfl['mcdp_gap']:.2f}, Std {base.mcdp_gap:.2f}), {elapsed:.0f}s")
    assert ok


ADULT_CSV = os.environ.get("DFL_ADULT_CSV")


def test_criterion_11_adult_advisory(tmp_path, record_criterion):
    if not ADULT_CSV:
        record_criterion(11, "Adult reproduction (advisory)", None, "set DFL_ADULT_CSV to run")
        pytest.skip("advisory: set DFL_ADULT_CSV to a headed Adult CSV")
    from importlib import resources

    schema = resources.files("deepfair").joinpath("schemas", "adult.json")
    cfg_text = (f"data_format = csv\ndata_path = {ADULT_CSV}\nschema_path = {schema}\n"
                "split = 0.7,0.15,0.15\ngrowth_rate = 20\ndepth = 10\nreduction = 0.2\n"
                "criterion = separation\nalpha = 0.5\nlr = 0.001\nepochs = 100\nbatch_size = 128\n")
    cfg_path = tmp_path / "adult.cfg"
    cfg_path.write_text(cfg_text)
    import contextlib
    import io

    with contextlib.redirect_stdout(io.StringIO()):
        code = cli.main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "run")])
    m = json.loads((tmp_path / "run" / "metrics.json").read_text())
    ok = code == 0 and abs(m["accuracy"] - 79.24) <= 3 and abs(m["mcdp_gap"] - 7.31) <= 3
    record_criterion(11, "Adult reproduction (advisory)", ok,
                     f"acc {m['accuracy']:.2f}, MCDP {m['mcdp_gap']:.2f}")
    if not ok:
        pytest.xfail("advisory criterion outside its band; see the decisions ledger")


def test_criterion_12_determinism(biased_run, record_criterion):
    import contextlib
    import io

    out = biased_run["out"]
    with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
        code = cli.main(["train", "--config", "biased", "--deterministic", "--out", str(out / "b")])
    same = code == 0 and (Path(out / "a" / "trajectory.csv").read_bytes()
                          == Path(out / "b" / "trajectory.csv").read_bytes())
    ok = record_criterion(12, "identical seeds give byte-identical trajectories", same)
    assert ok
