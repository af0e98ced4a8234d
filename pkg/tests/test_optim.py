import numpy as np
import pytest
from hypothesis import given, strategies as st

from convtimenet.checkpoint import load_checkpoint, save_checkpoint
from convtimenet.errors import NumericError
from convtimenet.layers import TYPE1, TYPE2
from convtimenet.model import ArchConfig, Head, ParamGrads, backward, build_ctn, new_head
from convtimenet.optim import FINETUNE_LR, PRETRAIN_LR, AdamState, adam_step, finite_diff_check, relative_error

TINY = ArchConfig(lengths=(2, 4), filters_per_length=2, block_types=(TYPE1, TYPE2))


def test_defaults():
    s = AdamState()
    assert (s.learning_rate, s.beta1, s.beta2, s.eps) == (0.002, 0.9, 0.999, 1e-8)
    assert PRETRAIN_LR == 0.002 and FINETUNE_LR == 2e-4
    with pytest.raises(ValueError):
        AdamState(0.0)


def test_zero_gradient_from_fresh_state():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_first_step_hand_computed():
    p = {"w": np.array([0.0])}
    s = AdamState(0.1)
    adam_step(p, {"w": np.array([1.0])}, s)
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert p["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert s.t == 1


def adam_reference(theta, grads, lr=0.002, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(theta)
    return out


def test_matches_scalar_reference(rng):
    gs = rng.normal(size=20)
    p = {"w": np.array(0.5)}
    s = AdamState()
    ours = []
    for g in gs:
        adam_step(p, {"w": np.array(g)}, s)
        ours.append(float(p["w"]))
    assert np.allclose(ours, adam_reference(0.5, gs), atol=1e-15, rtol=1e-13)


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_first_update_is_scale_invariant(c):
    r = np.random.default_rng(0)
    g = r.normal(size=30) + 0.5
    p1, p2 = {"w": np.zeros(30)}, {"w": np.zeros(30)}
    s1, s2 = AdamState(eps=1e-14), AdamState(eps=1e-14)
    adam_step(p1, {"w": g}, s1)
    adam_step(p2, {"w": c * g}, s2)
    assert np.max(np.abs(p1["w"] - p2["w"]) / np.abs(p1["w"])) < 1e-9


def test_frozen_arrays_bitwise_untouched(rng):
    p = {"a": rng.normal(size=4), "b": rng.normal(size=3)}
    before = p["a"].copy()
    ref = p["a"]
    s = AdamState()
    for _ in range(5):
        adam_step(p, {"a": rng.normal(size=4), "b": rng.normal(size=3)}, s, frozen={"a"})
    assert p["a"] is ref and np.array_equal(p["a"], before)
    assert "a" not in s.m


def test_non_finite_gradient_aborts_without_changes(rng):
    p = {"a": rng.normal(size=3), "b": rng.normal(size=3)}
    snap = {k: v.copy() for k, v in p.items()}
    s = AdamState()
    g = {"a": np.ones(3), "b": np.array([1.0, np.nan, 0.0])}
    with pytest.raises(NumericError):
        adam_step(p, g, s)
    assert s.t == 0 and not s.m
    assert all(np.array_equal(p[k], snap[k]) for k in p)


def test_gradient_clipping(rng):
    p = {"a": np.zeros(4)}
    s = AdamState()
    assert adam_step(p, {"a": np.full(4, 10.0)}, s, max_grad_norm=1.0)
    assert np.allclose(s.m["a"], 0.1 * 0.5)
    assert not adam_step(p, {"a": np.full(4, 0.01)}, s, max_grad_norm=1.0)


@given(seed=st.integers(0, 2**31), steps=st.integers(1, 6))
def test_v_nonnegative_and_t_counts(seed, steps):
    r = np.random.default_rng(seed)
    p = {"a": r.normal(size=(2, 3))}
    s = AdamState()
    for _ in range(steps):
        adam_step(p, {"a": r.normal(size=(2, 3))}, s)
    assert s.t == steps and np.all(s.v["a"] >= 0) and s.m["a"].shape == (2, 3)


def test_state_round_trip_preserves_next_update(tmp_path):
    r = np.random.default_rng(3)
    model = build_ctn(TINY, rng=r)
    head = new_head("t", 3, model.embedding_dim, r)
    x, y = r.normal(size=(4, 16)), [0, 1, 2, 1]
    state = AdamState()
    for _ in range(3):
        g, _ = backward(model, head, x, y)
        adam_step(model.params(), g.core, state)
    model.quantize_()
    save_checkpoint(tmp_path / "s.ctn", model, optimizers={"core": state})
    ck = load_checkpoint(tmp_path / "s.ctn")
    g, _ = backward(model.copy(), head, x, y, update_stats=False)
    a, b = model.params(), ck.model.params()
    adam_step(a, g.core, state)
    adam_step(b, g.core, ck.optimizers["core"])
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-10, 0.0) == pytest.approx(1e-2)


def test_gradcheck_linear_toy_is_exact():
    # frozen all-zero conv: the embedding is a function of BN shift only
    model = build_ctn(TINY, rng=0)
    for k, a in model.params().items():
        if ".conv." in k:
            a[...] = 0
    model.freeze(2)
    r = np.random.default_rng(1)
    for k, a in model.params().items():
        if k.endswith("beta"):
            a[...] = r.uniform(0.1, 1.0, a.shape)
    head = new_head("t", 3, model.embedding_dim, r)
    report = finite_diff_check(model, head, r.normal(size=(2, 8)), [0, 1])
    # only BN shifts and the head move the loss, and all arrays are near-linear there
    assert report.passed
    assert report.max_rel_error["head.weight"] < 1e-9 and report.max_rel_error["head.bias"] < 1e-9


def test_gradcheck_flags_corrupted_component():
    r = np.random.default_rng(2)
    model = build_ctn(TINY, rng=r)
    head = new_head("t", 3, model.embedding_dim, r)
    x, y = r.normal(size=(2, 16)), [0, 2]
    grads, _ = backward(model.copy(), head, x, y, update_stats=False)
    bad = ParamGrads({k: v.copy() for k, v in grads.core.items()}, dict(grads.head))
    bad.core["blocks.1.conv.w4"][0, 1, 0] += 1.0
    report = finite_diff_check(model, head, x, y, analytic=bad)
    assert report.failed == ["core.blocks.1.conv.w4"]
    assert not report.passed and report.worst > 1e-4


def test_gradcheck_is_read_only():
    r = np.random.default_rng(4)
    model = build_ctn(TINY, rng=r)
    head = new_head("t", 3, model.embedding_dim, r)
    h = model.state_hash()
    finite_diff_check(model, head, r.normal(size=(2, 16)), [0, 1])
    assert model.state_hash() == h
