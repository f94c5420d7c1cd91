"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end criteria share one trained model (the configs/acceptance.ini
run), so the whole file takes several minutes on one CPU core.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from distembed import tensor as T
from distembed.config import RunConfig
from distembed.corruption import CorruptionSpec
from distembed.gaussian import DiagGaussian, kl_divergence, mc_kl_estimate
from distembed.gradcheck import DEFAULT_TOL
from distembed.gradsuites import SUITES, run_suites, summarize
from distembed.losses import PriorBank, class_logits, gm_class_logits, row_entropy, soft_labels
from distembed.pipeline import run_training, sweep
from distembed.retrieval import evaluate_distances
from distembed.sigma_net import SigmaNetConfig, init_head_params, uncertainty_fusion, variance_head
from retrieval_oracle import check_against_oracle, random_instance

ACCEPTANCE_INI = Path(__file__).resolve().parents[1] / "configs" / "acceptance.ini"
NOISE_SEEDS = (0, 1, 2)


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line (visible without -s), then assert."""

    def _report(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {number}: {detail}"

    return _report


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    rc = RunConfig.resolve(ACCEPTANCE_INI, {"run.out": str(out)})
    start = time.perf_counter()
    result = run_training(rc)
    return rc, result, time.perf_counter() - start


def test_c01_closed_form_kl_vs_monte_carlo(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    within = 0
    for i in range(100):
        d = int(rng.integers(1, 17))
        q = DiagGaussian(rng.normal(size=d), rng.uniform(0.2, 3.0, size=d))
        p = DiagGaussian(rng.normal(size=d), rng.uniform(0.2, 3.0, size=d))
        est, se = mc_kl_estimate(q, p, 100_000, seed=i)
        within += abs(est - kl_divergence(q, p).item()) <= 3 * se
    elapsed = time.perf_counter() - start
    verdict(1, within >= 97 and elapsed < 30, f"{within}/100 pairs within 3 SE, {elapsed:.1f}s")


def test_c02_delta_posterior_limit(verdict):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        k, d = int(rng.integers(2, 11)), int(rng.integers(1, 17))
        bank = PriorBank(rng.normal(size=(k, d)), rng.normal(size=(k, d)))
        z = rng.normal(size=(3, d))
        a = T.log_softmax(class_logits(DiagGaussian(z, np.full((3, d), 1e-6)), bank)).data
        b = T.log_softmax(gm_class_logits(z, bank)).data
        worst = max(worst, float(np.abs(a - b).max()))
    elapsed = time.perf_counter() - start
    verdict(2, worst <= 1e-3 and elapsed < 10, f"max |diff| {worst:.2e} over 100 instances, {elapsed:.1f}s")


def test_c03_gradient_suite(verdict):
    start = time.perf_counter()
    summary = summarize(run_suites(0), DEFAULT_TOL)
    elapsed = time.perf_counter() - start
    failed = [name for name, (_, _, ok) in summary.items() if not ok]
    worst = max(err for err, _, _ in summary.values())
    ok = not failed and set(summary) == set(SUITES) and elapsed < 120
    verdict(3, ok, f"{len(summary)} suites, max rel err {worst:.2e}, failed {failed or 'none'}, {elapsed:.1f}s")


def test_c04_retrieval_oracle(verdict):
    rng = np.random.default_rng(11)
    agree = 0
    for _ in range(200):
        inst = random_instance(rng)
        agree += check_against_oracle(evaluate_distances(*inst), *inst, tol=0.0)
    hand = evaluate_distances(np.array([[0.1, 0.2, 0.3, 0.4]]), [7], [1], [7, 3, 7, 4], [2, 2, 3, 2]).map
    ok = agree == 200 and round(hand, 4) == 0.8333
    verdict(4, ok, f"{agree}/200 instances equal the brute-force oracle, hand AP {hand:.4f}")


def test_c05_end_to_end_run(verdict, acceptance_run):
    _, result, elapsed = acceptance_run
    r1, m = result.report.rank(1), result.report.map
    ok = r1 >= 0.95 and m >= 0.90 and elapsed < 600
    verdict(5, ok, f"rank1 {r1:.4f}, mAP {m:.4f}, {elapsed:.0f}s")


def test_c06_corruption_trend(verdict, acceptance_run):
    rc, result, _ = acceptance_run
    from distembed.pipeline import load_data

    data = load_data(rc)
    blur = [CorruptionSpec("gaussian-blur", k, rc.seed) for k in (1, 3, 5, 7)]
    interp = [CorruptionSpec("interp", r, rc.seed) for r in (1.0, 0.75, 0.5, 0.25)]
    blur_maps = [rep.map for _, rep in sweep(result.model, data, blur)]
    interp_maps = [rep.map for _, rep in sweep(result.model, data, interp)]
    ok = all(b <= a for a, b in zip(blur_maps, blur_maps[1:])) and all(b <= a for a, b in zip(interp_maps, interp_maps[1:]))
    detail = "blur " + " ".join(f"{v:.4f}" for v in blur_maps) + " | interp " + " ".join(f"{v:.4f}" for v in interp_maps)
    verdict(6, ok, detail)


def test_c07_label_noise_ordering(verdict):
    full, base = [], []
    for seed in NOISE_SEEDS:
        common = {"run.seed": seed, "data.train_label_noise": 0.1}
        rc_full = RunConfig.resolve(ACCEPTANCE_INI, dict(common, **{"model.variance_head": "sigma", "train.loss": "distribution"}))
        rc_base = RunConfig.resolve(ACCEPTANCE_INI, dict(common, **{"train.loss": "ce", "train.stage2": False}))
        full.append(run_training(rc_full, write=False).report.map)
        base.append(run_training(rc_base, write=False).report.map)
    ok = np.mean(full) >= np.mean(base)
    detail = f"mean mAP full {np.mean(full):.4f} vs ce {np.mean(base):.4f} (per seed {[round(v, 4) for v in full]} vs {[round(v, 4) for v in base]})"
    verdict(7, ok, detail)


def test_c08_soft_label_properties(verdict, acceptance_run):
    bank = acceptance_run[1].model.bank
    taus = (0.05, 0.1, 0.17, 0.3, 0.5)
    mats = [soft_labels(bank, t) for t in taus]
    sums = max(float(np.abs(m.sum(1) - 1).max()) for m in mats)
    diag = all(np.all(np.diag(m) >= m.max(1)) for m in mats)
    ent = [float(row_entropy(m).mean()) for m in mats]
    monotone = all(b >= a for a, b in zip(ent, ent[1:]))
    onehot = float(np.abs(soft_labels(bank, 1e-8) - np.eye(bank.num_classes)).max())
    ok = sums <= 1e-9 and diag and monotone and onehot <= 1e-9
    detail = f"row-sum err {sums:.1e}, diagonal max {diag}, entropy {[round(e, 4) for e in ent]}, tau->0 err {onehot:.1e}"
    verdict(8, ok, detail)


def test_c09_sigma_net_contracts(verdict):
    cfg = SigmaNetConfig(channels=8, dropout=0.25)
    rng = np.random.default_rng(5)
    positive = 0
    for i in range(1000):
        params = init_head_params("sigma", 8, seed=i)
        feat = rng.normal(0, 3, size=(int(rng.integers(1, 9)), int(rng.integers(1, 9)), 8))
        out = variance_head("sigma", feat, params, cfg, "train", seed=i).data
        positive += bool(np.all(out > 0) and np.all(np.isfinite(out)))
    params = init_head_params("sigma", 8, seed=0)
    sizes_ok = all(
        uncertainty_fusion(rng.normal(size=(h, w, 2)), rng.normal(size=(h, w, 2)), params, cfg).shape == (h, w, 2)
        for h in range(1, 9)
        for w in range(1, 9)
    )
    feat = rng.normal(size=(2, 6, 4, 8))
    first = variance_head("sigma", feat, params, cfg, "eval", seed=1).data
    repeat = [variance_head("sigma", feat, params, cfg, "eval", seed=s).data for s in (1, 2, 3)]
    deterministic = all(np.array_equal(first, r) for r in repeat)
    ok = positive == 1000 and sizes_ok and deterministic
    verdict(9, ok, f"positive {positive}/1000, fusion sizes preserved {sizes_ok}, eval bit-deterministic {deterministic}")


def test_c10_reproducibility(verdict, acceptance_run, tmp_path):
    rc, first, _ = acceptance_run
    again = RunConfig.resolve(ACCEPTANCE_INI, {"run.out": str(tmp_path)})
    second = run_training(again)
    names = ("stage1", "stage2", "model", "report_json", "report_csv")
    same = {n: first.files[n].read_bytes() == second.files[n].read_bytes() for n in names}
    log_same = first.log.deterministic_view() == second.log.deterministic_view()
    ok = all(same.values()) and log_same
    verdict(10, ok, f"identical files {sum(same.values())}/{len(names)}, identical loss log {log_same}")
