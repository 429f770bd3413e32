"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are echoed in an "acceptance" section at the end of the pytest run.
"""

import math
import time
from fractions import Fraction

import numpy as np

from mstl import autodiff as ad
from mstl.autodiff import Tensor
from mstl.cli import main
from mstl.data import (
    SynthSpec,
    builtin_dataset,
    encode_dataset,
    load_dataset,
    save_dataset,
    stratified_split,
    synth_generate,
)
from mstl.losses import cbce_loss, ce_loss, class_balanced_weights
from mstl.metrics import accuracy, one_vs_rest, quadratic_weighted_kappa
from mstl.model import (
    Checkpoint,
    build_network,
    default_layers,
    encode_checkpoint,
    grad_cam,
    load_checkpoint,
    save_checkpoint,
)
from mstl.pipeline import ablate, bundled_plan, classifier_stage, classifier_stage_spec

from gradcheck import check_gradients
from saliency_fixture import class4_image, on_off_means, trained_network
from test_metrics import brute_force_kappa, dr4_fixture, table_fixture


def kink_distance(net, x) -> float:
    """Smallest |ReLU input| over the batch."""
    return min(float(np.abs(net.forward(x, tap=l.name)[1].data).min()) for l in net.layers if l.kind == "conv")


def test_criterion_1_gradients(criterion):
    t0 = time.perf_counter()
    worst, redraws = 0.0, 0
    for seed in range(20):
        net = build_network(default_layers(), seed=seed, input_shape=(1, 6, 6))
        # central differences are only an oracle away from ReLU kinks
        draw = 1
        x = ad.randn([4, 1, 6, 6], seed=[seed, draw]).data
        while kink_distance(net, x) < 1e-3:
            draw += 1
            x = ad.randn([4, 1, 6, 6], seed=[seed, draw]).data
        redraws += draw - 1
        y = np.array([0, 1, 3, 4])
        w = class_balanced_weights([40, 3, 30, 12, 9], beta=0.99)
        leaves = [p for ps in net.params.values() for p in ps]
        worst = max(worst, check_gradients(lambda: cbce_loss(net.forward(x), y, w), leaves, h=1e-5))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    assert criterion(1, ok, f"max rel error {worst:.2e} over 20 networks (< 1e-4), "
                            f"{redraws} input redraws near ReLU kinks, {elapsed:.1f}s (< 30s)")


def test_criterion_2_beta_limits(criterion):
    rng = np.random.default_rng(2)
    worst_ce = 0.0
    for _ in range(100):
        C = int(rng.integers(2, 7))
        n = int(rng.integers(1, 17))
        z = Tensor(rng.normal(scale=3.0, size=(n, C)))
        y = rng.integers(0, C, n)
        w = class_balanced_weights(rng.integers(1, 1000, C), beta=0.0)
        worst_ce = max(worst_ce, abs(cbce_loss(z, y, w).item() - ce_loss(z, y).item()))
    counts = [1, 10, 100, 1000, 10000]
    w = class_balanced_weights(counts, beta=1 - 1e-10)
    products = [wk * n for wk, n in zip(w.weights, counts)]
    spread = (max(products) - min(products)) / min(products)
    ok = worst_ce < 1e-12 and spread < 1e-4
    assert criterion(2, ok, f"beta=0 |CBCE-CE| max {worst_ce:.1e} (< 1e-12); "
                            f"beta=1-1e-10 weight*n relative spread {spread:.1e} (< 1e-4)")


def test_criterion_3_kappa_oracle(criterion):
    rng = np.random.default_rng(3)
    worst, transpose_ok, checked = 0.0, True, 0
    while checked < 1000:
        C = int(rng.integers(2, 7))
        M = rng.integers(0, 25, (C, C)) * (rng.random((C, C)) < 0.7)
        W = (np.arange(C)[:, None] - np.arange(C)[None, :]) ** 2
        if M.sum() == 0 or (W * np.outer(M.sum(1), M.sum(0))).sum() == 0:
            continue
        checked += 1
        k = quadratic_weighted_kappa(M)
        worst = max(worst, abs(k - float(brute_force_kappa(M.tolist()))))
        transpose_ok &= k == quadratic_weighted_kappa(M.T)
    hand = quadratic_weighted_kappa([[2, 0, 0], [0, 0, 1], [0, 0, 1]])
    hand_ok = brute_force_kappa([[2, 0, 0], [0, 0, 1], [0, 0, 1]]) == Fraction(6, 7) and abs(hand - 6 / 7) < 1e-15
    ok = worst < 1e-12 and transpose_ok and hand_ok
    assert criterion(3, ok, f"1000 matrices: max |impl-brute| {worst:.1e}; transpose exact {transpose_ok}; "
                            f"hand case {hand:.15f}")


def test_criterion_4_metric_fixtures(criterion):
    M = table_fixture()
    acc = accuracy(M)
    r = one_vs_rest(dr4_fixture(), 4)
    ok = (np.trace(M), M.sum()) == (82, 103) and abs(acc - 0.7961) <= 1e-4 \
        and (r.fp, r.fn) == (2, 3) and r.fpr == 2 / 90 and r.fnr == 3 / 13
    assert criterion(4, ok, f"accuracy {acc:.4f}; DR4 FP={r.fp} FN={r.fn} FPR={r.fpr:.4f} FNR={r.fnr:.4f}")


def test_criterion_5_decoupling(criterion):
    ds = builtin_dataset("synth-small", seed=0)
    changed = []
    for seed in range(10):
        train, val = stratified_split(ds, 0.1, seed=seed)
        ckpt = Checkpoint.from_network(build_network(default_layers(), seed=seed))
        out, _ = classifier_stage(ckpt, train, val, classifier_stage_spec(), seed=seed)
        for name in ("conv1", "conv2"):
            for a, b in zip(ckpt.tensors[name], out.tensors[name]):
                if a.tobytes() != b.tobytes():
                    changed.append((seed, name))
    assert criterion(5, not changed, f"non-final parameters changed in {len(changed)} (seed, layer) pairs over 10 seeds")


def test_criterion_6_table_ordering(criterion):
    names = ["onestage", "multistage", "multistage_cbce"]
    plans = {n: bundled_plan(n) for n in names}
    t0 = time.perf_counter()
    rep = ablate(plans, seeds=range(10))
    elapsed = time.perf_counter() - t0
    one, multi, cbce = (rep.row(n) for n in names)
    n = len(one.runs)

    def gap_ok(lo, hi):
        se = math.sqrt(lo.std_kappa ** 2 / n + hi.std_kappa ** 2 / n)
        return hi.mean_kappa - lo.mean_kappa > se, se

    ok1, se1 = gap_ok(one, multi)
    ok2, se2 = gap_ok(multi, cbce)
    wins = sum(b["recall"][1] > a["recall"][1] for a, b in zip(multi.runs, cbce.runs))
    detail = (f"kappa one-stage {one.mean_kappa:.4f} < multi-stage {multi.mean_kappa:.4f} (se {se1:.4f}) {ok1}; "
              f"multi-stage < +CBCE {cbce.mean_kappa:.4f} (se {se2:.4f}) {ok2}; "
              f"class-1 recall up in {wins}/10 seeds; {elapsed:.0f}s (< 300s)")
    ok = ok1 and ok2 and wins >= 7 and elapsed < 300
    assert criterion(6, ok, detail)


def test_criterion_7_determinism(criterion, tmp_path):
    mismatched = []
    for plan in ("onestage", "twostage_cbce", "multistage_cbce"):
        for run in ("a", "b"):
            assert main(["train", "--plan", plan, "--out-dir", str(tmp_path / plan / run)]) == 0
        a, b = tmp_path / plan / "a", tmp_path / plan / "b"
        names = sorted(p.name for p in a.iterdir())
        if names != sorted(p.name for p in b.iterdir()):
            mismatched.append(f"{plan}: file sets differ")
        mismatched += [f"{plan}/{f}" for f in names if (a / f).read_bytes() != (b / f).read_bytes()]
    assert criterion(7, not mismatched, f"3 plans rerun; differing artifacts: {mismatched or 'none'}")


def test_criterion_8_round_trips(criterion, tmp_path):
    rng = np.random.default_rng(8)
    bad = []
    for i in range(50):
        C = int(rng.integers(2, 7))
        p = rng.dirichlet(np.ones(C)) * 0.8 + 0.2 / C
        side = int(rng.integers(6, 20))
        spec = SynthSpec(n=int(rng.integers(C, 200)), h=side, w=int(rng.integers(6, 20)), blob_size=1,
                         distribution=tuple(p / p.sum()), seed=int(rng.integers(2**31)),
                         difficulty=float(rng.uniform(0, 2)), grade_noise=float(rng.uniform(0, 1)))
        ds = synth_generate(spec)
        save_dataset(ds, tmp_path / "d.stds")
        back = load_dataset(tmp_path / "d.stds")
        if encode_dataset(back) != (tmp_path / "d.stds").read_bytes() or back.images.tobytes() != ds.images.tobytes() \
                or back.labels.tolist() != ds.labels.tolist():
            bad.append(f"dataset {i}")

        net = build_network(default_layers(num_classes=C, width=int(rng.integers(1, 12))), seed=int(rng.integers(2**31)))
        saved = save_checkpoint(net, tmp_path / "c.ckpt", {"instance": i})
        loaded = load_checkpoint(tmp_path / "c.ckpt")
        same = all(a.tobytes() == b.tobytes()
                   for k in saved.tensors for a, b in zip(saved.tensors[k], loaded.tensors[k]))
        if not same or encode_checkpoint(loaded) != (tmp_path / "c.ckpt").read_bytes() \
                or loaded.metadata["instance"] != i:
            bad.append(f"checkpoint {i}")
    assert criterion(8, not bad, f"50 dataset + 50 checkpoint round trips; failures: {bad or 'none'}")


def test_criterion_9_saliency(criterion):
    x = class4_image()
    margins, in_range = [], True
    for seed in range(5):
        net, _ = trained_network(seed)
        for cls in range(5):
            for layer in ("conv1", "conv2"):
                cam = grad_cam(net, x, cls, layer)
                in_range &= bool(cam.min() >= 0.0 and cam.max() <= 1.0)
        on, off = on_off_means(grad_cam(net, x, 4, "conv2"))
        margins.append(on - off)
    ok = in_range and min(margins) > 0
    assert criterion(9, ok, f"conv2 on-blob minus off-blob saliency over 5 networks: "
                            f"{', '.join(f'{m:+.3f}' for m in margins)}; all maps in [0,1] {in_range}")
