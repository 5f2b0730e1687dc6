"""Acceptance criteria, one test per criterion.

Every test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line with the
measured quantity; the lines are also collected into the terminal summary.
"""

import hashlib
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from ovrosr.cli import main as cli_main
from ovrosr.data import gen_blobs, gen_supplementary_2d, open_split
from ovrosr.distributions import WeibullParams, fit_weibull, weibull_loglik, weibull_sample
from ovrosr.evaluation import (
    ConfusionTally,
    OpennessSpec,
    abating_check,
    kl_comparison_study,
    open_f_measure,
    open_space_risk,
    openness,
)
from ovrosr.netcore import TrainConfig, init_net, loss_and_gradients
from ovrosr.openset import (
    UNKNOWN,
    calibrate,
    decide,
    fit_recognizer,
    membership_probability,
    raw_threshold_predict,
    train_bank,
)
from test_netcore import max_rel_error, numeric_gradients


def report(n, ok, detail):
    line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


SUPP_CFG = TrainConfig(learning_rate=0.1, epochs=3000, batch_size=32, momentum=0.9,
                       seed=0, target_loss=1e-3)
TRAINED = {}


@pytest.fixture(scope="module")
def supplementary():
    data = gen_supplementary_2d(seed=0, n_per_class=100)
    t0 = time.perf_counter()
    bank = train_bank(data, [5], SUPP_CFG)
    elapsed = time.perf_counter() - t0
    evt = calibrate(bank, data, alpha=0.2)
    TRAINED["supplementary"] = evt
    return data, bank, evt, elapsed


def test_01_supplementary_experiment(supplementary):
    _, bank, _, elapsed = supplementary
    final = {c: h[-1] for c, h in bank.histories.items()}
    worst = max(final.values())
    detail = ", ".join(f"{c}={v:.2e}" for c, v in final.items())
    report(1, worst <= 1e-3 and elapsed < 30,
           f"final BCE {detail} (max {worst:.2e} <= 1e-3), {elapsed:.2f}s < 30s")


def test_02_openness_arithmetic():
    cases = [((12, 22, 22), 26.1), ((12, 72, 72), 59.2), ((40, 45, 45), 5.7), ((40, 100, 100), 36.8)]
    got = [100 * openness(OpennessSpec(*counts)) for counts, _ in cases]
    ok = all(abs(g - want) <= 0.1 for g, (_, want) in zip(got, cases))
    detail = ", ".join(f"{counts}->{g:.2f}% (want {w}%)" for g, (counts, w) in zip(got, cases))
    report(2, ok, detail)


def test_03_zero_open_space_risk(supplementary):
    data, bank, evt, _ = supplementary
    t0 = time.perf_counter()
    results = []
    for j, cls in enumerate(bank.class_labels):
        pts = data.features[data.labels == cls]
        head, e = bank.heads[j], evt[j]
        prob = lambda s, e=e: membership_probability(e, s)
        pmin = float(np.min(prob(head.predict(pts)[:, 0])))
        above = open_space_risk(head, 0, pts, delta=0.5, r=0.0, grid_res=128,
                                cutoff=np.nextafter(pmin, 1.0), prob_fn=prob)
        below = open_space_risk(head, 0, pts, delta=0.5, r=0.0, grid_res=128,
                                cutoff=0.0, prob_fn=prob)
        results.append((cls, above.risk, below.risk))
    elapsed = time.perf_counter() - t0
    ok = all(a == 0.0 and b > 0.0 for _, a, b in results) and elapsed < 10
    detail = "; ".join(f"{c}: above-min risk={a}, below-min risk={b:.4f}" for c, a, b in results)
    report(3, ok, f"{detail}; 128^2 grid, {elapsed:.2f}s < 10s")


def test_04_abating_property():
    violations, checked = 0, 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        dim = int(rng.integers(1, 5))
        hidden = [int(h) for h in rng.integers(2, 12, size=int(rng.integers(1, 3)))]
        net = init_net(dim, hidden, 1, seed=seed)
        for layer in net.layers:
            layer.biases[:] = rng.normal(scale=0.5, size=layer.biases.shape)
        rep = abating_check(net, 0, rng.normal(scale=2.0, size=(1000, dim)), 1e-4)
        violations += len(rep.violations)
        checked += rep.checked
    report(4, violations == 0, f"20 nets x 1000 probes: {violations} violations, "
                               f"{checked} in-region steps judged")


def test_05_weibull_recovery():
    lines, ok = [], True
    for i, kappa in enumerate((0.8, 1.5, 3.0)):
        truth = WeibullParams(0.0, 1.0, kappa)
        data = weibull_sample(truth, 10_000, np.random.default_rng(50 + i))
        fit = fit_weibull(data)
        lam_err = abs(fit.lam - 1.0)
        k_err = abs(fit.kappa - kappa) / kappa
        lams = np.linspace(0.5 * fit.lam, 1.5 * fit.lam, 20)
        kappas = np.linspace(0.5 * fit.kappa, 1.5 * fit.kappa, 20)
        grid_best = max(weibull_loglik(WeibullParams(fit.nu, l, k), data)
                        for l in lams for k in kappas)
        dominates = fit.loglik >= grid_best
        ok &= lam_err <= 0.1 and k_err <= 0.1 and dominates
        lines.append(f"kappa={kappa}: lam={fit.lam:.4f} kappa={fit.kappa:.4f} "
                     f"(rel err {lam_err:.3f}/{k_err:.3f}), loglik {fit.loglik:.2f} >= grid "
                     f"{grid_best:.2f}")
    report(5, ok, "; ".join(lines))


def test_06_calibration_monotone_and_rule(supplementary, benchmark):
    grid = np.linspace(0.0, 1.0, 1000)
    n_classes, mono = 0, True
    for name, evt in TRAINED.items():
        for e in evt:
            n_classes += 1
            mono &= bool(np.all(np.diff(membership_probability(e, grid)) >= 0))
    rng = np.random.default_rng(6)
    rule_ok = True
    for _ in range(10_000):
        k = int(rng.integers(1, 6))
        P = rng.uniform(size=k)
        if rng.random() < 0.2:
            P[rng.integers(k)] = P.max()  # inject exact ties
        theta = float(rng.choice([rng.uniform(), P[rng.integers(k)]]))
        label = decide(P[None, :], theta, [f"c{i}" for i in range(k)])[0]
        rejected = label == UNKNOWN
        rule_ok &= rejected == (P.max() < theta)
        if not rejected:
            rule_ok &= label == f"c{int(np.flatnonzero(P == P.max())[0])}"
    report(6, mono and rule_ok,
           f"{n_classes} calibrated classes nondecreasing on 1000-pt grid: {mono}; "
           f"rejection iff max P < theta over 10000 cases: {rule_ok}")


def test_07_gradient_correctness():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(700 + seed)
        dim = int(rng.integers(1, 5))
        hidden = [int(h) for h in rng.integers(1, 7, size=int(rng.integers(0, 3)))]
        softmax = seed % 4 == 3
        out = int(rng.integers(2, 5)) if softmax else 1
        net = init_net(dim, hidden, out, "softmax" if softmax else "sigmoid", seed=seed)
        for layer in net.layers:
            layer.biases[:] = rng.normal(scale=0.3, size=layer.biases.shape)
        X = rng.normal(size=(6, dim))
        if softmax:
            T, loss = np.eye(out)[rng.integers(0, out, size=6)], "ce"
        else:
            T, loss = rng.integers(0, 2, size=(6, 1)).astype(float), "bce"
        _, analytic = loss_and_gradients(net, X, T, loss)
        worst = max(worst, max_rel_error(analytic, numeric_gradients(net, X, T, loss)))
    report(7, worst < 1e-4, f"20 architectures, max relative error {worst:.2e} < 1e-4")


KL_SEEDS = range(10)


def test_08_kl_direction():
    wins, per_seed = 0, []
    for seed in KL_SEEDS:
        data = gen_blobs(seed=seed, classes=9, dim=2, separation=4.0, n_per_class=200)
        split = open_split(data, 3, 0.8, seed=seed)
        cfg = TrainConfig(learning_rate=0.05, epochs=200, batch_size=32, momentum=0.9,
                          seed=seed, target_loss=1e-3)
        bank = train_bank(split.train, [10], cfg, with_baseline="softmax")
        ovr = {c: bank.representation(data.features[data.labels == c]) for c in data.classes}
        soft = {c: bank.baseline_representation(data.features[data.labels == c])
                for c in data.classes}
        rep = kl_comparison_study(ovr, soft, split.known_labels, split.unknown_labels,
                                  [5, 10], seed)
        ps = [t["p_one_sided"] for t in rep.tests]
        wins += all(p < 0.05 for p in ps)
        per_seed.append("/".join(f"{p:.3f}" for p in ps))
    report(8, wins >= 8, f"seeds with p<0.05 at k=5 and k=10: {wins}/10 (need >= 8); "
                         f"p per seed: {', '.join(per_seed)}")


@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    data = gen_blobs(seed=0, classes=12, dim=2, separation=4.0, n_per_class=100)
    split = open_split(data, 4, 0.8, seed=0)
    cfg = TrainConfig(learning_rate=0.05, epochs=300, batch_size=32, momentum=0.9,
                      seed=0, target_loss=1e-3)
    model, val = fit_recognizer(split.train, [16], cfg, holdout_classes=2, with_raw=True)
    TRAINED["benchmark"] = model.evt
    return split, model, val, time.perf_counter() - t0


def test_09_open_set_benchmark(benchmark):
    split, model, val, fit_time = benchmark
    t0 = time.perf_counter()

    def f(pred):
        return open_f_measure(ConfusionTally.from_predictions(split.test.labels, pred,
                                                              split.known_labels))

    f_cal = f(model.predict(split.test.features))
    raw_theta = val.theta_grid[int(np.argmax(val.raw_table[0]))]
    f_raw = f(raw_threshold_predict(model.bank, split.test.features, raw_theta))
    elapsed = fit_time + time.perf_counter() - t0
    ok = f_cal >= 0.90 and f_cal > f_raw and elapsed < 120
    report(9, ok, f"calibrated macro F {f_cal:.4f} (theta={model.theta}, alpha={model.alpha}) "
                  f">= 0.90; raw ablation F {f_raw:.4f} (theta={raw_theta}); {elapsed:.1f}s < 120s")


def _hashed_outputs(out):
    digests = {}
    for p in sorted(out.iterdir()):
        digests[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return digests


def test_10_determinism(tmp_path):
    cfg = {"seed": 3, "arch": [6], "baseline": "softmax",
           "train": {"epochs": 150, "target_loss": 1e-3},
           "dataset": {"generator": "blobs", "classes": 6, "dim": 2, "separation": 6.0,
                       "n_per_class": 40},
           "split": {"n_unknown": 2}, "theta_grid": [0.2, 0.5], "alpha_grid": [0.1, 0.3],
           "openness_sweep": [0, 1, 2], "kl_k": [4, 6], "formats": ["csv", "osrf"],
           "riskmap": {"grid_res": 32}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        codes = [cli_main(["synth", "--config", str(path), "--out", str(out)]),
                 cli_main(["train", "--config", str(path), "--out", str(out)]),
                 cli_main(["calibrate", "--config", str(path), "--out", str(out)]),
                 cli_main(["eval", "--config", str(path), "--out", str(out)]),
                 cli_main(["kl", "--config", str(path), "--out", str(out)]),
                 cli_main(["riskmap", "--config", str(path), "--out", str(out)])]
        assert codes == [0] * 6, codes
        runs.append(_hashed_outputs(out))
    differing = sorted(k for k in runs[0] if runs[0][k] != runs[1].get(k))
    ok = runs[0].keys() == runs[1].keys() and not differing
    report(10, ok, f"{len(runs[0])} output files across 6 stages byte-identical on rerun; "
                   f"differing: {differing or 'none'}")
