"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL ...`` line that is printed in
the terminal summary, then asserts.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import all_params, random_probs, tiny_set, zero_all
from test_analysis import brier_oracle, ece_oracle, kl_oracle, rate_oracle
from hdmi_lab.adapt import (
    AdaptConfig, SourceConfig, adapt_target, new_source_set, run_pipeline, target_loss_and_grads,
    train_source,
)
from hdmi_lab.analysis import brier, disagreement_rates, ece, kl_matrix
from hdmi_lab.diffnet import softmax
from hdmi_lab.hypotheses import HypothesisSet, SourceSnapshot, to_target
from hdmi_lab.objectives import (
    ce_kl_identity_residual, conditional_entropy_loss, hdmi_loss, hypothesis_disparity,
    l2_regularizers, mi_ensemble_loss, mutual_information,
)
from hdmi_lab.shiftdata import ShiftSpec, generate, load_csv, save_csv

SEEDS = (1, 2, 3, 4, 5)
# central differences at step 1e-5 carry about 2e-11 of round-off; gradient
# components below this size are compared absolutely
FD_FLOOR = 1e-5


def check(record_property, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    record_property("criterion", line)
    assert ok, line


@pytest.fixture(scope="session")
def desk_runs():
    """Source-only, MI ensemble and HDMI results on the desk preset, seeds 1..5."""
    out = {"source_only": [], "mi_ensemble": [], "hdmi": []}
    t0 = time.perf_counter()
    for seed in SEEDS:
        spec = ShiftSpec(seed=seed)
        scfg = SourceConfig(seed=seed)
        pair = generate(spec)
        source = train_source(new_source_set(2, spec.K, scfg), pair.source, scfg)[0]
        for objective in ("mi_ensemble", "hdmi"):
            report, _, log = run_pipeline(spec, scfg, AdaptConfig(objective=objective, seed=seed),
                                          source_set=source)
            out[objective].append((report, log))
        out["source_only"].append(out["hdmi"][-1][0].extra["source_only"])
    out["seconds"] = time.perf_counter() - t0
    return out


def _objective_values(hset, xb, cfgs, anchor, snapshot):
    """Loss of every config from one forward pass, using value-only objective functions."""
    logits, _, _ = hset.forward_heads(xb, "eval")
    ps = [softmax(z) for z in logits]
    out = []
    for cfg in cfgs:
        lam, kind, red = cfg.lam, cfg.divergence, cfg.reduction
        if cfg.objective == "hdmi":
            out.append(hdmi_loss(ps, anchor, lam, kind, red).total)
        elif cfg.objective == "mi_single":
            out.append(-mutual_information(ps[anchor]))
        elif cfg.objective == "hd_only":
            out.append(hypothesis_disparity(ps, anchor, kind, red))
        elif cfg.objective == "cond_entropy_hd":
            out.append(conditional_entropy_loss(ps, lam, anchor, kind, red).total)
        else:
            total = mi_ensemble_loss(ps).total
            if cfg.objective in ("mi_l2", "mi_l2_source"):
                mode = cfg.objective[3:]
                for key, store in hset.named_stores():
                    total += lam * l2_regularizers(store, snapshot[key], mode)
            out.append(total)
    return np.array(out)


def _smooth_batch(hset, rng, margin=1e-3):
    """Random batch whose ReLU inputs all sit at least ``margin`` away from the kink."""
    while True:
        xb = rng.normal(size=(8, 2))
        _, ext_tapes, clf_tapes = hset.forward_heads(xb, "eval")
        nets = hset.extractors + hset.classifiers
        pre = [z for net, t in zip(nets, ext_tapes + clf_tapes)
               for spec, z in zip(net.specs, t.pre) if spec.activation == "relu"]
        if min(np.abs(p).min() for p in pre) > margin:
            return xb


def _fd_errors(hset, xb, cfgs, anchor, snapshot, step=1e-5):
    """Per-config max relative error of analytic grads against central differences."""
    analytic = []
    for cfg in cfgs:
        zero_all(hset)
        target_loss_and_grads(hset, xb, cfg, anchor, snapshot, "eval")
        analytic.append({(k, n): s.grads(n).copy() for k, s, n in all_params(hset)})
    zero_all(hset)
    worst = np.zeros(len(cfgs))
    for key, store, name in all_params(hset):
        flat = store.values(name).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _objective_values(hset, xb, cfgs, anchor, snapshot)
            flat[i] = orig - step
            fm = _objective_values(hset, xb, cfgs, anchor, snapshot)
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            a = np.array([g[(key, name)].reshape(-1)[i] for g in analytic])
            err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), FD_FLOOR)
            worst = np.maximum(worst, err)
    return worst


def test_criterion_01_gradients(record_property):
    cfgs = [AdaptConfig(objective=o, divergence=d, lam=0.5) for o, d in (
        ("hdmi", "cross_entropy"), ("hdmi", "kl"), ("mi_ensemble", "cross_entropy"),
        ("mi_single", "cross_entropy"), ("hd_only", "cross_entropy"),
        ("cond_entropy_hd", "cross_entropy"), ("mi_l2", "cross_entropy"),
        ("mi_l2_source", "cross_entropy"))]
    rng = np.random.default_rng(2024)
    worst = np.zeros(len(cfgs))
    t0 = time.perf_counter()
    for net in range(20):
        hset = tiny_set(seed=net, M=2 + net % 2, k=3)
        hset.frozen_classifiers = False
        # nonzero biases keep ReLU pre-activations off the kink at exactly 0
        for _, store, name in all_params(hset):
            if name.endswith(".b"):
                store.values(name)[...] = rng.normal(scale=0.1, size=store.values(name).shape)
        assert hset.num_params() <= 200
        snapshot = SourceSnapshot.of(tiny_set(seed=1000 + net, M=hset.M, k=3))
        for _ in range(5):
            xb = _smooth_batch(hset, rng)
            anchor = int(rng.integers(hset.M))
            worst = np.maximum(worst, _fd_errors(hset, xb, cfgs, anchor, snapshot))
    elapsed = time.perf_counter() - t0
    names = [f"{c.objective}/{c.divergence}" for c in cfgs]
    top = float(worst.max())
    ok = top < 1e-5 and elapsed < 30
    check(record_property, 1, ok,
          f"max rel err {top:.2e} ({names[int(worst.argmax())]}) over {len(cfgs)} objectives, {elapsed:.1f}s")


def test_criterion_02_ce_kl_identity(record_property):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        m = int(rng.integers(2, 5))
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 17))
        ps = [random_probs(rng, n, k, rng.uniform(0.1, 5.0)) for _ in range(m)]
        worst = max(worst, ce_kl_identity_residual(ps, int(rng.integers(m)), rng.uniform(0, 1)))
    elapsed = time.perf_counter() - t0
    check(record_property, 2, worst < 1e-9 and elapsed < 5,
          f"max residual {worst:.2e}, {elapsed:.2f}s")


def test_criterion_03_mi_properties(record_property):
    rng = np.random.default_rng(11)
    lo, hi_gap = math.inf, -math.inf
    for _ in range(10_000):
        k = int(rng.integers(2, 8))
        p = random_probs(rng, int(rng.integers(1, 20)), k, rng.uniform(0.1, 6.0))
        mi = mutual_information(p)
        lo = min(lo, mi)
        hi_gap = max(hi_gap, mi - math.log(k))
    same = max(abs(mutual_information(np.repeat(random_probs(rng, 1, k), 9, axis=0)))
               for k in range(2, 8))
    balanced = max(abs(mutual_information(np.eye(k)[np.arange(3 * k) % k]) - math.log(k))
                   for k in range(2, 8))
    ok = lo >= -1e-9 and hi_gap <= 1e-9 and same <= 1e-10 and balanced <= 1e-9
    check(record_property, 3, ok,
          f"min MI {lo:.2e}, max MI - ln K {hi_gap:.2e}, identical rows {same:.1e}, one-hot gap {balanced:.1e}")


def _trajectory(hset):
    return [s.values(n).tobytes() for _, s in hset.named_stores() for n in s]


def _adapt_steps(source, target, **kwargs):
    cfg = AdaptConfig(**{"steps": 100, "eval_every": 100, "seed": 4, **kwargs})
    hset, snap = to_target(source)
    adapt_target(hset, target, cfg, snap)
    return _trajectory(hset)


def test_criterion_04_degeneration_lattice(record_property):
    pair = generate(ShiftSpec(seed=4))
    cfg2 = SourceConfig(steps=200, seed=4)
    src2 = train_source(new_source_set(2, 2, cfg2), pair.source, cfg2)[0]
    a = _adapt_steps(src2, pair.target, objective="hdmi", lam=0.0)
    b = _adapt_steps(src2, pair.target, objective="mi_ensemble")
    cfg1 = SourceConfig(M=1, steps=200, seed=4)
    src1 = train_source(new_source_set(2, 2, cfg1), pair.source, cfg1)[0]
    c = _adapt_steps(src1, pair.target, objective="mi_ensemble")
    d = _adapt_steps(src1, pair.target, objective="mi_single")
    moved = a != _trajectory(to_target(src2)[0])
    ok = a == b and c == d and moved
    check(record_property, 4, ok,
          f"hdmi(lam=0)==mi_ensemble: {a == b}, mi_ensemble(M=1)==mi_single: {c == d}")


def test_criterion_05_classifier_freezing(record_property):
    pair = generate(ShiftSpec(seed=5))
    cfg = SourceConfig(steps=200, seed=5)
    source = train_source(new_source_set(2, 2, cfg), pair.source, cfg)[0]
    results = []
    for objective in ("hdmi", "mi_l2", "cond_entropy_hd"):
        hset, snap = to_target(source)
        adapt_target(hset, pair.target, AdaptConfig(objective=objective, steps=1000, lr=1e-2,
                                                    eval_every=500), snap)
        results.append(snap.matches(hset, "classifier") and not snap.matches(hset, "extractor"))
    check(record_property, 5, all(results), f"classifiers bit-equal to snapshot in {sum(results)}/3 runs")


def _mean(xs):
    return float(np.mean(xs))


def test_criterion_06_transfer_ordering(record_property, desk_runs):
    src = _mean([s["accuracy_ensemble"] for s in desk_runs["source_only"]])
    mi = _mean([r.accuracy_ensemble for r, _ in desk_runs["mi_ensemble"]])
    hd = _mean([r.accuracy_anchor for r, _ in desk_runs["hdmi"]])
    secs = desk_runs["seconds"]
    ok = hd >= mi >= src and hd - src >= 0.05 and secs < 300
    check(record_property, 6, ok,
          f"source only {src:.4f}, MI ensemble {mi:.4f}, HDMI {hd:.4f}, {secs:.0f}s")


def test_criterion_07_anchor_ensemble(record_property, desk_runs):
    gaps = [abs(r.accuracy_anchor - r.accuracy_ensemble) for r, _ in desk_runs["hdmi"]]
    agree = [r.anchor_ensemble_agreement for r, _ in desk_runs["hdmi"]]
    ok = max(gaps) <= 0.005 and min(agree) >= 0.99
    check(record_property, 7, ok, f"max |anchor-ensemble| {max(gaps):.4f}, min agreement {min(agree):.4f}")


def test_criterion_08_disagreement(record_property, desk_runs):
    mi = _mean([r.mean_disagreement for r, _ in desk_runs["mi_ensemble"]])
    hd = _mean([r.mean_disagreement for r, _ in desk_runs["hdmi"]])
    src = _mean([s["mean_disagreement"] for s in desk_runs["source_only"]])
    ok = hd < mi and hd < 0.02
    check(record_property, 8, ok, f"disagreement HDMI {hd:.4f} < MI ensemble {mi:.4f} (source only {src:.4f})")


def test_criterion_09_calibration(record_property, desk_runs):
    e_mi = _mean([r.ece for r, _ in desk_runs["mi_ensemble"]])
    e_hd = _mean([r.ece for r, _ in desk_runs["hdmi"]])
    b_mi = _mean([r.brier for r, _ in desk_runs["mi_ensemble"]])
    b_hd = _mean([r.brier for r, _ in desk_runs["hdmi"]])
    ok = e_hd <= e_mi and b_hd <= b_mi
    check(record_property, 9, ok,
          f"ECE HDMI {e_hd:.4f} vs MI {e_mi:.4f}; Brier HDMI {b_hd:.4f} vs MI {b_mi:.4f}")


def test_criterion_10_stability(record_property, desk_runs):
    drops = []
    for report, log in desk_runs["hdmi"]:
        curve = log.column("acc_anchor")
        drops.append(max(curve) - curve[-1])
        assert curve[-1] == report.accuracy_anchor
    ok = max(drops) <= 0.015
    check(record_property, 10, ok, "drop from running max per seed: "
          + ", ".join(f"{d:.4f}" for d in drops))


def test_criterion_11_metric_oracles(record_property):
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(100):
        n, k, m = int(rng.integers(1, 30)), int(rng.integers(2, 6)), int(rng.integers(2, 5))
        ps = [random_probs(rng, n, k, rng.uniform(0.2, 4.0)) for _ in range(m)]
        y = rng.integers(k, size=n)
        bins = int(rng.integers(1, 16))
        worst = max(worst,
                    abs(brier(ps[0], y) - brier_oracle(ps[0], y)),
                    abs(ece(ps[0], y, bins)[0] - ece_oracle(ps[0], y, bins)),
                    float(np.max(np.abs(disagreement_rates(ps)[0].values - np.array(rate_oracle(ps))))),
                    float(np.max(np.abs(kl_matrix(ps).values - np.array(kl_oracle(ps))))))
    check(record_property, 11, worst <= 1e-12, f"max deviation from brute force {worst:.2e}")


def test_criterion_12_determinism_round_trips(record_property, tmp_path):
    spec = ShiftSpec(n_source=200, n_target=200, seed=3)
    scfg, acfg = SourceConfig(steps=150, seed=3), AdaptConfig(steps=150, seed=3)
    _, live, _ = run_pipeline(spec, scfg, acfg, tmp_path / "a")
    run_pipeline(spec, scfg, acfg, tmp_path / "b")
    same_report = (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()

    doc = json.loads((tmp_path / "a" / "adapted.ckpt.json").read_text())
    hset = HypothesisSet.from_dict(doc)
    ckpt_ok = _trajectory(hset) == _trajectory(live)
    ckpt_ok &= json.dumps(hset.to_dict(), sort_keys=True) == json.dumps(doc, sort_keys=True)

    pair = generate(spec)
    save_csv(pair.source, tmp_path / "s.csv")
    back = load_csv(tmp_path / "s.csv", num_classes=2)
    csv_ok = back.x.tobytes() == pair.source.x.tobytes() and np.array_equal(back.y, pair.source.y)
    ok = same_report and ckpt_ok and csv_ok
    check(record_property, 12, ok,
          f"report.json identical: {same_report}, checkpoint exact: {ckpt_ok}, csv exact: {csv_ok}")
