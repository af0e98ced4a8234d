"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``.  The lines are
repeated in an "acceptance criteria" section of the terminal summary.  The
desk-scale training criteria take about ten minutes on one core.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, direct_conv
from convtimenet.analysis import occlusion_sensitivity
from convtimenet.checkpoint import Checkpoint, decode, encode, file_hash, load_checkpoint
from convtimenet.cli import main
from convtimenet.data import gen_cbf, gen_mixed_scale, gen_two_patterns, train_test_split
from convtimenet.layers import TRAIN, TYPE1, TYPE2, BatchNorm, batchnorm_forward
from convtimenet.model import ArchConfig, build_ctn, forward_embed, head_hash, new_head, orthogonal_init
from convtimenet.optim import finite_diff_check
from convtimenet.tensor import conv1d_same
from convtimenet.train import (
    FinetuneConfig,
    PretrainConfig,
    ValidationTask,
    evaluate,
    finetune_target,
    iterations_to_loss,
    predict,
    pretrain,
)

pytestmark = pytest.mark.slow


def report(capsys, number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line, flush=True)
    assert ok, line


# -- 1-5: exact contracts ------------------------------------------------------


def test_criterion_01_gradient_check(capsys):
    arch = ArchConfig(lengths=(2, 4), filters_per_length=2, block_types=(TYPE1, TYPE2))
    r = np.random.default_rng(0)
    model = build_ctn(arch, rng=1, dtype=np.float64)
    assert model.blocks[1].proj is not None
    head = new_head("t", 3, model.embedding_dim, 2, np.float64)
    start = time.perf_counter()
    rep = finite_diff_check(model, head, r.normal(size=(2, 16)), [0, 2])
    elapsed = time.perf_counter() - start
    ok = rep.passed and rep.worst < 1e-4 and elapsed < 60
    report(capsys, 1, ok, f"{len(rep.max_rel_error)} groups, worst rel {rep.worst:.2e}, {elapsed:.1f} s")


def test_criterion_02_kernel_oracle(capsys):
    r = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        T, f, c = int(r.integers(1, 33)), int(r.integers(1, 9)), int(r.integers(1, 5))
        x, w, b = r.normal(size=(T, c)), r.normal(size=(f, c)), float(r.normal())
        worst = max(worst, float(np.abs(conv1d_same(x, w, b) - direct_conv(x, w, b)).max()))
    report(capsys, 2, worst < 1e-10, f"200 instances, max abs diff {worst:.1e}")


def test_criterion_03_orthogonal_init(capsys):
    r = np.random.default_rng(3)
    shapes = [(40, 200), (200, 40), (40, 40), (1, 200), (33, 64)]
    worst = 0.0
    for seed in range(50):
        rows, cols = shapes[seed % len(shapes)] if seed < 10 else (int(r.integers(1, 41)), int(r.integers(1, 201)))
        q = orthogonal_init((rows, cols), np.random.default_rng(seed))
        g = q @ q.T if rows <= cols else q.T @ q
        worst = max(worst, float(np.abs(g - np.eye(len(g))).max()))
    report(capsys, 3, worst < 1e-6, f"50 seeds, max Gram deviation {worst:.1e}")


def test_criterion_04_batchnorm_contract(capsys):
    r = np.random.default_rng(4)
    worst_mean = worst_var = worst_exact = 0.0
    for _ in range(50):
        B, T, C = int(r.integers(1, 6)), int(r.integers(2, 30)), int(r.integers(1, 8))
        scale = 10.0 ** r.uniform(-2, 2)
        x = scale * r.normal(size=(B, T, C)) + r.normal(0, 3, size=C)
        bn = BatchNorm.fresh(C)
        bn.gamma[:] = r.uniform(0.5, 2, C)
        bn.beta[:] = r.normal(size=C)
        _, (_, xhat, _) = batchnorm_forward(x, bn, TRAIN)
        var = x.var(axis=(0, 1))
        assert np.all(var > bn.eps)
        out_var = xhat.var(axis=(0, 1))
        worst_mean = max(worst_mean, float(np.abs(xhat.mean(axis=(0, 1))).max()))
        worst_var = max(worst_var, float(np.abs(out_var - 1).max()))
        # what normalization with eps in the denominator yields exactly
        worst_exact = max(worst_exact, float(np.abs(out_var - var / (var + bn.eps)).max()))
    assert worst_exact < 1e-12
    ok = worst_mean < 1e-8 and worst_var < 1e-6
    detail = f"max |mean| {worst_mean:.1e}, max |var - 1| {worst_var:.1e}, max |var - var/(var+eps)| {worst_exact:.1e}"
    report(capsys, 4, ok, detail)


def test_criterion_05_head_isolation(capsys):
    T = 48
    src = [gen_cbf(40, T, rng=51, name="cbf"), gen_two_patterns(40, T, 0.3, rng=52, name="tp"),
           gen_mixed_scale(40, T, 0.3, rng=53, name="ms")]
    vtr, vte = train_test_split(gen_cbf(30, T, rng=54, name="val"), 20)
    model = build_ctn(ArchConfig(lengths=(2, 4), filters_per_length=2), rng=5)
    prev = {}
    own_updates = foreign_updates = steps = 0

    def on_iteration(ev):
        nonlocal own_updates, foreign_updates, steps
        hashes = {k: head_hash(h) for k, h in ev.heads.items()}
        if prev:
            steps += 1
            changed = {k for k in hashes if hashes[k] != prev[k]}
            own_updates += ev.dataset in changed
            foreign_updates += len(changed - {ev.dataset})
        prev.update(hashes)

    cfg = PretrainConfig(max_train_epochs=20, n=5, b=8, max_val_epochs=1, validate_every=20, seed=5)
    pretrain(src, [ValidationTask("val", vtr, vte)], model, cfg, on_iteration=on_iteration)
    # every iteration after the first has a previous hash to compare with
    ok = steps == 20 * 3 * 5 - 1 and own_updates == steps and foreign_updates == 0
    report(capsys, 5, ok, f"{foreign_updates} violations over 20 epochs, own head changed in {own_updates}/{steps} steps")


# -- 6 and 9: shared two-patterns model ---------------------------------------

TP_NOISE = 0.1


@pytest.fixture(scope="module")
def two_patterns_run():
    ds = gen_two_patterns(800, 128, TP_NOISE, rng=7)
    train, test = train_test_split(ds, 400)
    model = build_ctn(ArchConfig(filters_per_length=8), rng=0, dtype=np.float32)
    start = time.perf_counter()
    res = finetune_target(model, train, FinetuneConfig(iterations=1500, lr=0.002, seed=0))
    return res, test, time.perf_counter() - start


def test_criterion_06_two_patterns(capsys, two_patterns_run):
    res, test, elapsed = two_patterns_run
    err = evaluate(res.model, res.head, test)
    ok = err <= 0.05 and len(res.trace) <= 3000 and elapsed < 600
    report(capsys, 6, ok, f"test error {err:.4f} after {len(res.trace)} iterations, {elapsed:.0f} s")


def test_criterion_09_occlusion_localization(capsys, two_patterns_run):
    res, test, _ = two_patterns_run
    pred = np.argmax(predict(res.model, res.head, test.values), axis=1)
    hits = []
    for i in np.flatnonzero(pred == test.labels):
        t = occlusion_sensitivity(res.model, res.head, test.values[i]).most_sensitive
        hits.append(any(a <= t < b for a, b in test.meta["segments"][i]))
    rate = float(np.mean(hits))
    report(capsys, 9, rate >= 0.8, f"{sum(hits)}/{len(hits)} correctly classified series localized ({rate:.3f})")


# -- 7: transfer speed ----------------------------------------------------------

TRANSFER_T = 64
TRANSFER_ARCH = ArchConfig(filters_per_length=8)


@pytest.fixture(scope="module")
def pretrained_ctn():
    T = TRANSFER_T
    sources = [gen_cbf(400, T, rng=101, name="cbf"), gen_two_patterns(400, T, 0.3, rng=102, name="tp"),
               gen_mixed_scale(400, T, 0.3, rng=103, name="ms")]
    vtr, vte = train_test_split(gen_cbf(150, T, rng=104, noise=False, name="cbf_clean"), 100)
    model = build_ctn(TRANSFER_ARCH, rng=np.random.default_rng([0, 9]), dtype=np.float32)
    cfg = PretrainConfig(max_train_epochs=100, n=5, b=16, max_val_epochs=3, validate_every=5, seed=0)
    return pretrain(sources, [ValidationTask("cbf_clean", vtr, vte)], model, cfg).model


def test_criterion_07_transfer_speed(capsys, pretrained_ctn):
    # held out: short and long ramps at widths the sources never used
    target = gen_mixed_scale(200, TRANSFER_T, 0.3, rng=105, short_fraction=0.1, long_fraction=0.25, name="target")
    target = target.subset(np.arange(150))
    budget = 1500
    transfer, scratch = [], []
    for seed in range(5):
        cfg = FinetuneConfig(iterations=budget, lr=2e-4, seed=seed, stop_loss=0.3)
        fresh = build_ctn(TRANSFER_ARCH, rng=np.random.default_rng([seed, 9]), dtype=np.float32)
        for out, start in ((transfer, pretrained_ctn), (scratch, fresh)):
            hit = iterations_to_loss(finetune_target(start, target, cfg).trace, 0.3, cfg.smoothing_window)
            out.append(budget + 1 if hit is None else hit)  # a miss counts as beyond the budget
    mt, ms = float(np.median(transfer)), float(np.median(scratch))
    report(capsys, 7, mt <= ms, f"median iterations to loss 0.3: transfer {mt:g} {transfer}, scratch {ms:g} {scratch}")


# -- 8: multi-length ablation ---------------------------------------------------


def test_criterion_08_multi_length_ablation(capsys):
    ds = gen_mixed_scale(600, 128, 0.3, rng=21)
    train, test = train_test_split(ds, 300)
    multi = ArchConfig(filters_per_length=4)
    fixed = multi.fixed_length_variant(16)
    ratio = fixed.num_parameters() / multi.num_parameters()
    assert abs(ratio - 1) < 0.02
    errors = {"multi": [], "fixed": []}
    for seed in range(5):
        for name, arch in (("multi", multi), ("fixed", fixed)):
            model = build_ctn(arch, rng=np.random.default_rng([seed, 9]), dtype=np.float32)
            res = finetune_target(model, train, FinetuneConfig(iterations=800, lr=0.002, seed=seed))
            errors[name].append(evaluate(res.model, res.head, test))
    em, ef = float(np.mean(errors["multi"])), float(np.mean(errors["fixed"]))
    detail = f"mean test error multi-length {em:.4f}, fixed f=16 with {fixed.filters_per_length} filters {ef:.4f} (parameter ratio {ratio:.3f})"
    report(capsys, 8, em <= ef + 0.01, detail)


# -- 10: determinism and persistence -------------------------------------------


def test_criterion_10_determinism_and_round_trip(capsys, tmp_path):
    for name, gen, seed, role in [("cbf", "cbf", 1, "source"), ("tp", "two-patterns", 2, "source"),
                                  ("ms", "mixed-scale", 3, "source"), ("val", "cbf", 4, "validation")]:
        assert main(["gendata", "--generator", gen, "--name", name, "--num-train", "30", "--num-test", "15",
                     "--length", "48", "--seed", str(seed), "--out", str(tmp_path / "data"), "--role", role]) == 0
    hashes = []
    for run in ("a", "b"):
        assert main(["pretrain", "--manifest", str(tmp_path / "data" / "manifest.tsv"), "--out", str(tmp_path / run),
                     "--max-train-epochs", "3", "--max-val-epochs", "2", "--lengths", "2,4,8",
                     "--filters-per-length", "2", "--seed", "10"]) == 0
        hashes.append(file_hash(tmp_path / run / "best.ctn"))
    same_hash = hashes[0] == hashes[1]

    x = gen_two_patterns(8, 48, 0.3, rng=11).values
    ck = load_checkpoint(tmp_path / "a" / "best.ctn")
    again = decode(encode(ck))
    reload_exact = np.array_equal(forward_embed(ck.model, x), forward_embed(again.model, x))
    bytes_exact = encode(again) == (tmp_path / "a" / "best.ctn").read_bytes()

    # a float32 model in memory and its saved copy
    model = build_ctn(ArchConfig(lengths=(2, 4, 8), filters_per_length=2), rng=12, dtype=np.float32)
    head = new_head("t", 3, model.embedding_dim, 13, np.float32)
    train, _ = train_test_split(gen_cbf(60, 48, rng=14, name="t"), 40)
    res = finetune_target(model, train, FinetuneConfig(iterations=30, lr=0.002, seed=1))
    loaded = decode(encode(Checkpoint(res.model, {"t": res.head})))
    memory_exact = np.array_equal(forward_embed(res.model, x), forward_embed(loaded.model, x))

    ok = same_hash and reload_exact and bytes_exact and memory_exact
    detail = (f"best hash equal: {same_hash}, reload forward bitwise: {reload_exact}, "
              f"re-save bytes equal: {bytes_exact}, in-memory vs loaded bitwise: {memory_exact}")
    report(capsys, 10, ok, detail)
