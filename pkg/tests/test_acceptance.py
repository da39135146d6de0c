"""End-to-end acceptance checks, one group per numbered criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
ends with one PASS/FAIL line per criterion. The training criteria share
seven smoke runs (about 150 s each on one core).
"""
import csv
import json
import time

import numpy as np
import pytest

from gridlift.cli import main
from gridlift.engine import make_rng
from gridlift.metrics import auc, mpjpe, pa_mpjpe, pck
from gridlift.sgt import (
    GridSpec,
    autogrids_sample,
    build_handcrafted_layout,
    h36m_skeleton,
    init_autogrids,
    random_sgt,
    rowwise_onehot,
    sgt_forward,
    sgt_inverse,
    validate_constraints,
)
from gridlift.verify import GRAD_TOL, conv_oracle_error, run_suite, saturation_error

SMOKE = {"latent_channels": 64, "blocks": 1, "epochs": 30, "batch_size": 200}
SEEDS = (0, 1, 2)


def read_history(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class SmokeRuns:
    """Lazily trains and caches CLI runs on the shared 2000-sample dataset."""

    def __init__(self, root):
        self.root = root
        self.data = root / "smoke.csv"
        assert main(["gen-data", "--n", "2000", "--seed", "0", "--out", str(self.data)]) == 0
        self.runs = {}

    def get(self, mode, seed):
        key = (mode, seed)
        if key not in self.runs:
            out = self.root / f"{mode}{seed}"
            cfg = self.root / f"{mode}{seed}.json"
            cfg.write_text(json.dumps({"train_data": str(self.data), "sgt_mode": mode, "seed": seed, **SMOKE}))
            t0 = time.perf_counter()
            code = main(["train", "--config", str(cfg), "--out", str(out)])
            seconds = time.perf_counter() - t0
            assert code == 0
            self.runs[key] = (read_history(out / "history.csv"), seconds)
        return self.runs[key]


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    return SmokeRuns(tmp_path_factory.mktemp("smoke"))


# -- 1: parameter budget ---------------------------------------------------


def test_c1_parameter_budget(acceptance, capsys):
    t0 = time.perf_counter()
    code = main(["params", "--instantiate"])
    counts = json.loads(capsys.readouterr().out)
    total, attention = counts["instantiated_total"], counts["instantiated_attention"]
    ok = code == 0 and abs(total - 4.79e6) / 4.79e6 <= 0.01 and 30_000 <= attention <= 50_000
    ok = ok and total == counts["total"]
    acceptance(1, ok, f"total {total:,}, attention {attention:,} ({time.perf_counter() - t0:.1f}s)")
    assert ok


# -- 2: gradient suite -------------------------------------------------------


def test_c2_gradient_suite(acceptance):
    t0 = time.perf_counter()
    results = run_suite("gradcheck")
    seconds = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.value)
    names = {r.name for r in results}
    ok = all(r.passed and r.tolerance == GRAD_TOL == 1e-4 for r in results) and "gln_end_to_end" in names
    ok = ok and seconds <= 120
    acceptance(2, ok, f"{len(results)} checks, worst {worst.name} {worst.value:.1e}, {seconds:.1f}s")
    assert ok, [r.line() for r in results if not r.passed]


# -- 3: convolution oracle ---------------------------------------------------


def test_c3_convolution_oracle(acceptance):
    t0 = time.perf_counter()
    err = conv_oracle_error(make_rng(3), cases=200)
    seconds = time.perf_counter() - t0
    ok = err <= 1e-10 and seconds <= 30
    acceptance(3, ok, f"200 cases, max abs error {err:.1e}, {seconds:.1f}s")
    assert ok


# -- 4: grid transform algebra ---------------------------------------------


def test_c4_sgt_algebra(acceptance):
    topology = h36m_skeleton()
    rng = make_rng(4)
    inexact = 0
    for _ in range(1000):
        S = random_sgt(topology, GridSpec(), rng)
        G = rng.normal(size=(17, 3)) * 1000
        inexact += not np.array_equal(sgt_inverse(S, sgt_forward(S, G)), G)
    replica = sgt_inverse(np.array([[1.0], [1.0]]), np.array([[2.0], [4.0]]))[0, 0]
    report = validate_constraints(build_handcrafted_layout(topology), topology)
    ok = inexact == 0 and replica == 3.0 and report.ok and not report.violations
    acceptance(4, ok, f"{inexact}/1000 inexact round trips, replica mean {replica}, "
                      f"{len(report.violations)} layout violations")
    assert ok


# -- 5: saturated attention --------------------------------------------------


def test_c5_saturated_attention(acceptance):
    err = saturation_error(make_rng(5), cases=100)
    ok = err <= 1e-6
    acceptance(5, ok, f"100 cases, max abs difference {err:.1e}")
    assert ok


# -- 6: AutoGrids sampling ----------------------------------------------------


def test_c6_noise_free_sampling_is_argmax(acceptance):
    rng = make_rng(6)
    mismatches = 0
    for _ in range(50):
        state = init_autogrids(None, GridSpec(), rng, num_joints=17)
        _, sampled = autogrids_sample(state, None, None)
        mismatches += int(np.sum(sampled.S != rowwise_onehot(state.s_prob)))
    ok = mismatches == 0
    acceptance(6, ok, f"argmax mismatches {mismatches}")
    assert ok


def test_c6_uniform_logits_give_uniform_columns(acceptance):
    rng = make_rng(66)
    state = init_autogrids(None, GridSpec(), rng, num_joints=17)
    state.s_prob = np.ones((25, 17))
    draws = 10_000
    counts = np.zeros((25, 17))
    for _ in range(draws):
        counts += autogrids_sample(state, rng, 0)[1].S
    p = 1 / 17
    z = np.abs(counts - draws * p) / np.sqrt(draws * p * (1 - p))
    ok = z.max() <= 4
    acceptance(6, ok, f"10^4 draws, worst |z| {z.max():.2f} over 25x17 cells")
    assert ok


def test_c6_noise_stops_at_epoch_30(acceptance, tmp_path, capsys):
    main(["gen-data", "--n", "20", "--seed", "1", "--out", str(tmp_path / "d.csv")])
    cfg = {"train_data": str(tmp_path / "d.csv"), "sgt_mode": "learnable", "latent_channels": 2, "blocks": 0,
           "epochs": 32, "batch_size": 10, "dynamic": False}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "run")]) == 0
    noise = [int(r["gumbel_noise"]) for r in read_history(tmp_path / "run" / "history.csv")]
    ok = noise[:30] == [1] * 30 and noise[30:] == [0, 0]
    acceptance(6, ok, f"noise flag epoch 29 -> {noise[29]}, epoch 30 -> {noise[30]}")
    assert ok


# -- 7: training smoke --------------------------------------------------------


@pytest.mark.slow
def test_c7_handcrafted_smoke(acceptance, smoke):
    history, seconds = smoke.get("handcrafted", 0)
    first, last = float(history[0]["train_mpjpe_mm"]), float(history[-1]["train_mpjpe_mm"])
    ratio = last / first
    ok = len(history) == 30 and ratio <= 0.4 and seconds <= 300
    acceptance(7, ok, f"handcrafted {first:.1f} -> {last:.1f} mm, ratio {ratio:.3f}, {seconds:.0f}s")
    assert ok


@pytest.mark.slow
def test_c7_learnable_smoke(acceptance, smoke):
    history, seconds = smoke.get("learnable", 0)
    coverage = int(history[-1]["sgt_coverage"])
    ok = len(history) == 30 and coverage == 17 and seconds <= 300
    acceptance(7, ok, f"learnable final coverage {coverage}/17, {seconds:.0f}s")
    assert ok


# -- 8: handcrafted versus random layouts ------------------------------------


@pytest.mark.slow
def test_c8_handcrafted_not_worse_than_random(acceptance, smoke):
    finals = {mode: [float(smoke.get(mode, s)[0][-1]["train_mpjpe_mm"]) for s in SEEDS]
              for mode in ("handcrafted", "random")}
    hand, rand = np.mean(finals["handcrafted"]), np.mean(finals["random"])
    ok = hand <= rand
    acceptance(8, ok, f"mean final MPJPE handcrafted {hand:.1f} mm vs random {rand:.1f} mm "
                      f"(per seed {[round(v, 1) for v in finals['handcrafted']]} vs "
                      f"{[round(v, 1) for v in finals['random']]})")
    assert ok


# -- 9: metrics and schedules ------------------------------------------------


def test_c9_metric_properties(acceptance):
    rng = make_rng(9)
    gt = rng.normal(size=(50, 17, 3)) * 300
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    R = q * np.sign(np.diag(r))
    R = R if np.linalg.det(R) > 0 else -R
    moved = 1.7 * gt @ R.T + rng.normal(size=3) * 1000
    pa_copy = pa_mpjpe(moved, gt)
    worst_gap = -np.inf
    for _ in range(1000):
        g = rng.normal(size=(1, 17, 3)) * 300
        p = g + rng.normal(size=(1, 17, 3)) * rng.uniform(1, 300)
        worst_gap = max(worst_gap, pa_mpjpe(p, g) - mpjpe(p, g))
    far = gt + 200.0 * np.array([1.0, 0.0, 0.0])
    trivial = (pck(gt, gt), pck(far, gt), auc(gt, gt), auc(far, gt))
    ok = pa_copy <= 1e-9 and worst_gap <= 1e-9 and trivial == (100.0, 0.0, 100.0, 0.0)
    acceptance(9, ok, f"PA of similarity copy {pa_copy:.1e} mm, max(pa - mpjpe) {worst_gap:.1e}, "
                      f"PCK/AUC trivial {trivial}")
    assert ok


@pytest.mark.slow
def test_c9_learning_rates_in_history(acceptance, smoke):
    hand = smoke.get("handcrafted", 0)[0]
    learn = smoke.get("learnable", 0)[0]
    lr1, lr10 = float(hand[1]["lr"]), float(learn[10]["lr"])
    ok = np.isclose(lr1, 0.00096, rtol=1e-12, atol=0) and np.isclose(lr10, 0.0001, rtol=1e-12, atol=0)
    acceptance(9, ok, f"lr epoch 1 handcrafted {lr1!r}, epoch 10 learnable {lr10!r}")
    assert ok


# -- 10: determinism ------------------------------------------------------------


@pytest.mark.parametrize("mode", ["handcrafted", "learnable"])
def test_c10_training_is_byte_identical(acceptance, tmp_path, mode):
    main(["gen-data", "--n", "60", "--seed", "2", "--out", str(tmp_path / "d.csv")])
    cfg = {"train_data": str(tmp_path / "d.csv"), "sgt_mode": mode, "latent_channels": 8, "blocks": 1,
           "epochs": 3, "batch_size": 16, "seed": 5}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    for name in ("a", "b"):
        assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / name)]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("history.csv", "checkpoint.npz")}
    ok = all(same.values())
    acceptance(10, ok, f"{mode}: " + ", ".join(f"{f} {'identical' if v else 'DIFFERS'}" for f, v in same.items()))
    assert ok
