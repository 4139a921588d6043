"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s``. Criteria 5-8 train the
micro model on the default synthetic dataset and take roughly half an hour
on one core; the arms are trained once per session and shared.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from cfan import tensor as T
from cfan.cli import main
from cfan.data import SynthConfig, generate_synthetic, load_dataset
from cfan.experiments import MICRO_TRAIN, eval_run, median_auroc, run_arm
from cfan.gradcheck import run_suite
from cfan.openset import auroc, calibrate_threshold, oscr
from cfan.spectral import (AdjustableFilterSpec, build_templates, ep_exponents, ep_weights, fft2d, filter_apply,
                           fvf_series, ifft2d, make_filter)
from cfan.tensor import Tensor
from cfan.train import checkpoint_bytes, load_checkpoint, save_checkpoint, train_loop
from oracles import auroc_pairs, brute_force_counts, naive_dft2, oscr_enumerate, random_scores

SEEDS = (0, 1, 2)
# the training settings were chosen on a dataset generated with seed 1; this one is held out
DATA_SEED = 0


def rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# -- criteria 1-4: numeric oracles ---------------------------------------------


def test_criterion_1_fft_and_templates(verdict):
    t0 = time.time()
    rng = np.random.default_rng(0)
    dft_err = 0.0
    trip_err = 0.0
    for h in (4, 8, 16):
        for w in (4, 8, 16):
            x = rng.standard_normal((h, w))
            dft_err = max(dft_err, rel(fft2d(x).values, naive_dft2(x)))
            trip_err = max(trip_err, rel(ifft2d(fft2d(x))[0], x))
    partitions = 0
    for _ in range(20):
        h, w = (int(2 ** rng.integers(1, 7)) for _ in range(2))
        n_t = int(rng.integers(1, 25))
        bank = build_templates(h, w, n_t)
        exact = np.array_equal(bank.masks.sum(axis=0), np.ones((h, w))) and set(np.unique(bank.masks)) <= {0, 1}
        partitions += exact and bank.counts() == brute_force_counts(h, w, n_t)
    counts = build_templates(8, 8, 4).counts()
    secs = time.time() - t0
    ok = dft_err < 1e-9 and trip_err < 1e-6 and partitions == 20 and counts == [39, 16, 8, 1] and secs < 10
    verdict(1, ok, f"dft rel-err {dft_err:.1e}, roundtrip {trip_err:.1e}, {partitions}/20 partitions, "
                   f"8x8 counts {counts}, {secs:.2f}s")


def test_criterion_2_ep_weights(verdict):
    t0 = time.time()
    w11 = float(ep_weights(AdjustableFilterSpec("high", [1.0], 20))[0, 0])
    w2020 = float(ep_weights(AdjustableFilterSpec("high", [20.0], 20))[0, 19])
    ps = np.geomspace(0.2, 20, 10)
    monotone = True
    for mode, sign in (("high", 1), ("low", -1)):
        spec = AdjustableFilterSpec(mode, ps, 20)
        w, e = ep_weights(spec), ep_exponents(spec)
        # weights saturate at 1.0 in float64, so they are checked non-strictly and the exponents strictly
        monotone &= bool(np.all(sign * np.diff(e, axis=1) > 0) and np.all(sign * np.diff(w, axis=1) <= 0))
        monotone &= bool(np.all(np.diff(e, axis=0) < 0) and np.all(np.diff(w, axis=0) >= 0))
    rng = np.random.default_rng(1)
    bank = build_templates(64, 64, 20)
    x = rng.standard_normal((4, 64, 64))
    dev = 0.0
    for mode in ("high", "low"):
        dev = max(dev, rel(filter_apply(Tensor(x), make_filter(mode, [20.0], bank)[0]).data, x))
    high, low = fvf_series(Tensor(x), np.full(4, 0.2), np.full(4, 0.2), 4)
    dev = max(dev, rel(high.elements[-1].data, x), rel(low.elements[-1].data, x))
    secs = time.time() - t0
    ok = abs(w11 - 0.97531) <= 1e-5 and abs(w2020 - 0.97031) <= 1e-5 and monotone and dev <= 0.05 and secs < 5
    verdict(2, ok, f"f_h(1,1)={w11:.6f}, f_h(20,20)={w2020:.6f}, monotone={monotone}, "
                   f"full-pass deviation {dev:.4f}, {secs:.2f}s")


def test_criterion_3_gradients(verdict):
    t0 = time.time()
    results = run_suite(trials=3, seed=0, include_model=True)
    failed = [f"{r.name} ({r.error:.1e})" for r in results if not r.passed]
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(50):
        size = (8, 16)[i % 2]
        mask = make_filter(rng.choice(["high", "low"]), rng.uniform(0.2, 20, 3), build_templates(size, size, 4))
        x, y = rng.standard_normal((3, size, size)), rng.standard_normal((3, size, size))
        with T.no_grad():
            a = float(np.sum(filter_apply(Tensor(x), mask).data * y))
            b = float(np.sum(x * filter_apply(Tensor(y), mask).data))
        worst = max(worst, abs(a - b) / max(abs(a), abs(b)))
    secs = time.time() - t0
    ok = not failed and worst < 1e-6 and secs < 120
    verdict(3, ok, f"{len(results) - len(failed)}/{len(results)} gradient checks "
                   f"(max rel-err {max(r.error for r in results):.1e}){'; failed ' + ', '.join(failed) if failed else ''}, "
                   f"self-adjoint rel-err {worst:.1e}, {secs:.1f}s")


def test_criterion_4_metrics(verdict):
    t0 = time.time()
    rng = np.random.default_rng(3)
    auroc_ok = oscr_ok = calib_ok = 0
    for trial in range(100):
        n = int(rng.integers(2, 201))
        nk = int(rng.integers(1, n))
        s = random_scores(rng, n, ties=trial % 3 == 0)
        auroc_ok += auroc(s[:nk], s[nk:]) == auroc_pairs(list(s[:nk]), list(s[nk:]))
    for trial in range(100):
        n = int(rng.integers(2, 51))
        nk = int(rng.integers(1, n))
        s = random_scores(rng, n, ties=trial % 2 == 0)
        correct = rng.random(nk) < 0.7
        oscr_ok += abs(oscr(s[:nk], correct, s[nk:]) - oscr_enumerate(list(s[:nk]), list(correct), list(s[nk:]))) < 1e-12
    for _ in range(100):
        n = int(rng.integers(1, 300))
        s = rng.standard_normal(n)
        frac = np.mean(s >= calibrate_threshold(s, 0.9))
        calib_ok += 0.9 <= frac <= 0.9 + 1 / n
    worked = oscr([0.9, 0.7, 0.4], [True, False, True], [0.8, 0.3])
    secs = time.time() - t0
    ok = auroc_ok == oscr_ok == calib_ok == 100 and worked == 0.5 and secs < 30
    verdict(4, ok, f"AUROC {auroc_ok}/100 exact, OSCR {oscr_ok}/100, worked example {worked}, "
                   f"calibration {calib_ok}/100, {secs:.2f}s")


# -- criteria 5-8: ablation trends on the synthetic dataset --------------------


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance") / "synthetic"
    generate_synthetic(SynthConfig(seed=DATA_SEED), root)
    return load_dataset(root)


class Arms:
    """Train each (ablation, fixed_p, seed) arm on first use and keep it."""

    VIEWS = {"none": ("test", "HFI", "LFI"), "bypass": ("test", "HFI", "LFI")}

    def __init__(self, data):
        self.data = data
        self.cache = {}

    def get(self, ablation, fixed_p=None):
        out = []
        for seed in SEEDS:
            key = (ablation, fixed_p, seed)
            if key not in self.cache:
                views = self.VIEWS.get(ablation, ("test",)) if fixed_p is None else ("test",)
                arm = run_arm(self.data, ablation, seed, fixed_p, base=MICRO_TRAIN, views=views)
                print(f"  {ablation}{'' if fixed_p is None else f' p={fixed_p:g}'} seed {seed}: "
                      + ", ".join(f"{v} {arm.auroc(v):.3f}" for v in views) + f" ({arm.seconds:.0f}s)", flush=True)
                self.cache[key] = arm
            out.append(self.cache[key])
        return out


@pytest.fixture(scope="session")
def arms(synthetic):
    return Arms(synthetic)


def test_criterion_5_ablation_ordering(arms, verdict):
    t0 = time.time()
    full, bare, fvf = (median_auroc(arms.get(a)) for a in ("none", "bypass", "fvf-only"))
    secs = sum(a.seconds for name in ("none", "bypass", "fvf-only") for a in arms.get(name))
    lo, hi = min(bare, full), max(bare, full)
    between = lo - 0.01 <= fvf <= hi + 0.01
    ok = bare + 0.02 <= full and between and secs < 15 * 60
    verdict(5, ok, f"median AUROC backbone-only {bare:.3f}, backbone+FVF {fvf:.3f}, full {full:.3f}; "
                   f"9 runs in {secs / 60:.1f} min (wall {time.time() - t0:.0f}s)")


def test_criterion_6_both_branches(arms, verdict):
    full, high, low = (median_auroc(arms.get(a)) for a in ("none", "high-only", "low-only"))
    ok = full >= max(high, low) - 0.01 and full >= min(high, low) + 0.02
    verdict(6, ok, f"median AUROC high-only {high:.3f}, low-only {low:.3f}, full {full:.3f}")


def test_criterion_7_hfi_lfi(arms, verdict):
    full, bare = arms.get("none"), arms.get("bypass")
    parts = {v: (median_auroc(full, v), median_auroc(bare, v)) for v in ("HFI", "LFI")}
    ok = all(f >= b for f, b in parts.values())
    verdict(7, ok, "; ".join(f"{v} full {f:.3f} vs backbone-only {b:.3f}" for v, (f, b) in parts.items()))


def test_criterion_8_randomized_p(arms, verdict):
    rand, fixed = median_auroc(arms.get("none")), median_auroc(arms.get("none", fixed_p=1.0))
    ok = rand >= fixed - 0.01
    verdict(8, ok, f"median AUROC randomized p {rand:.3f}, fixed p=1 {fixed:.3f}")


# -- criterion 9: engineering contracts ----------------------------------------


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_contracts(arms, synthetic, tmp_path, verdict):
    notes = []
    # checkpoint roundtrip on a trained full model
    arm = arms.get("none")[0]
    res = arm.train
    path = tmp_path / "full.ckpt"
    save_checkpoint(path, res.model, res.optimizer, res.rng, res.epoch, MICRO_TRAIN.to_text())
    loaded = load_checkpoint(path)
    x, _, _ = synthetic.arrays("test")
    ckpt_ok = np.array_equal(res.model.predict_logits(x), loaded.model.predict_logits(x))
    ckpt_ok &= eval_run(loaded.model, synthetic)["test"].to_csv() == arm.reports["test"].to_csv()
    state = res.optimizer.state_tensors()
    ckpt_ok &= state.keys() == loaded.optimizer_state.keys() and all(
        np.array_equal(v, loaded.optimizer_state[k]) for k, v in state.items())
    ckpt_ok &= loaded.rng_state == res.rng.bit_generator.state
    notes.append(f"checkpoint bit-exact={ckpt_ok}")

    # seeded determinism of a short run, including the sampled filter shapes
    xs, ys, _ = synthetic.arrays("train", known=True)
    cfg = replace(MICRO_TRAIN, epochs=2, seed=11)
    a, b = train_loop(cfg, xs[:64], ys[:64]), train_loop(cfg, xs[:64], ys[:64])
    det_ok = a.log_csv() == b.log_csv() and checkpoint_bytes(a.model, a.optimizer, a.rng) == \
        checkpoint_bytes(b.model, b.optimizer, b.rng)
    notes.append(f"train determinism={det_ok}")

    # dataset generation
    small = SynthConfig(image_size=32, n_train=10, n_val=3, n_test=4, seed=5)
    generate_synthetic(small, tmp_path / "d1")
    generate_synthetic(small, tmp_path / "d2")
    data_ok = tree_bytes(tmp_path / "d1") == tree_bytes(tmp_path / "d2")
    notes.append(f"dataset bytes identical={data_ok}")

    # CLI error paths leave nothing behind
    out = tmp_path / "cli"
    out.mkdir()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(path.read_bytes()[:100])
    ds = str(tmp_path / "d1")
    codes = [
        main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", ds, "--out", str(out / "r.csv")]),
        main(["eval", "--checkpoint", str(bad), "--data", ds, "--out", str(out / "r.csv")]),
        main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(out / "m.ckpt")]),
        main(["train", "--data", ds, "--out", str(out / "m.ckpt"), "--set", "lr=-1"]),
        main(["filters", "--p", "99", "--out-dir", str(out)]),
        main(["eval", "--bogus"]),
    ]
    cli_ok = all(c != 0 for c in codes) and list(out.iterdir()) == []
    notes.append(f"CLI exit codes {codes}, leftovers {len(list(out.iterdir()))}")
    verdict(9, ckpt_ok and det_ok and data_ok and cli_ok, "; ".join(notes))
