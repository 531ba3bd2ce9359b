import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from bgfss import losses as L
from bgfss.gradcheck import central_difference, random_instance, rel_error
from bgfss.taxonomy import IGNORE

U, BASE, NOVEL = 0, (1, 2), (3, 4)
FULL = (U, *BASE, *NOVEL)


def probs_of(rows, order=FULL):
    return L.ProbMap(np.asarray(rows, dtype=float), order)


def softmax_of(z, order=FULL):
    return L.softmax(L.LogitsMap(np.asarray(z, dtype=float), order))


def jaccard_loss_bruteforce(fg, wrong):
    """1 - |P ∩ G| / |P ∪ G| for the hard prediction that flips exactly the wrong elements."""
    gt = {i for i, f in enumerate(fg) if f}
    flipped = {i for i, w in enumerate(wrong) if w}
    pred = gt ^ flipped
    union = pred | gt
    return 0.0 if not union else 1.0 - len(pred & gt) / len(union)


# ---------------------------------------------------------------- softmax

def test_softmax_examples():
    assert np.allclose(softmax_of([[0, 0]], (0, 1)).values, [[0.5, 0.5]])
    assert np.allclose(softmax_of([[math.log(2), 0]], (0, 1)).values, [[2 / 3, 1 / 3]], atol=1e-15)
    p = softmax_of([[1000, 0]], (0, 1)).values
    assert np.isfinite(p).all() and p[0, 0] == 1.0 and p[0, 1] < 1e-300


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(z):
    p = L.softmax(L.LogitsMap(z, tuple(range(z.shape[1])))).values
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert ((p >= 0) & (p <= 1)).all()


# ---------------------------------------------------------------- weighted CE

def test_weighted_ce_examples():
    assert L.weighted_ce(probs_of([[1.0, 0.0]], (0, 1)), [0], {0: 1.0}).value == 0.0
    assert L.weighted_ce(probs_of([[0.5, 0.5]], (0, 1)), [0], {0: 1.0}).value == pytest.approx(math.log(2))


def test_weighted_ce_linear_in_alpha():
    rng = np.random.default_rng(0)
    p = softmax_of(rng.normal(size=(6, 5)))
    lab = np.array([0, 3, 3, 4, 0, IGNORE])
    a = L.weighted_ce(p, lab, {0: 1.0, 3: 1.5, 4: 0.5})
    b = L.weighted_ce(p, lab, {0: 1.0, 3: 3.0, 4: 0.5})
    rows = lab == 3
    assert np.allclose(b.grad[rows], 2 * a.grad[rows])
    assert np.allclose(b.grad[~rows], a.grad[~rows])
    assert b.value - a.value == pytest.approx(a.value - L.weighted_ce(p, lab, {0: 1.0, 3: 0.0, 4: 0.5}).value)
    assert (a.grad[lab == IGNORE] == 0).all()


def test_weighted_ce_errors():
    with pytest.raises(L.LossError, match="column"):
        L.weighted_ce(probs_of([[1.0, 0.0]], (0, 1)), [7], {7: 1.0})
    with pytest.raises(L.LossError, match="weight"):
        L.weighted_ce(probs_of([[1.0, 0.0]], (0, 1)), [1], {0: 1.0})


# ---------------------------------------------------------------- Lovász

def test_lovasz_perfect_prediction_is_zero():
    p = probs_of(np.eye(5)[[0, 3, 4, 3]])
    assert L.lovasz_softmax(p, [0, 3, 4, 3], (U, *NOVEL)).value == 0.0


def test_lovasz_binary_vertex():
    # truth = first of two elements, P^k = (0, 1): wrong on both
    value, _ = L.lovasz_extension(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
    assert value == 1.0
    assert jaccard_loss_bruteforce([1, 0], [1, 1]) == 1.0


@pytest.mark.parametrize("m", range(1, 7))
def test_lovasz_vertices_match_jaccard(m):
    for fg in itertools.product((0, 1), repeat=m):
        for wrong in itertools.product((0, 1), repeat=m):
            value, _ = L.lovasz_extension(np.array(wrong, float), np.array(fg, float))
            assert value == pytest.approx(jaccard_loss_bruteforce(fg, wrong), abs=1e-12)


def test_lovasz_empty_class_set():
    with pytest.raises(L.LossError, match="empty"):
        L.lovasz_softmax(probs_of([[1, 0, 0, 0, 0]]), [0], ())


@given(st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_lovasz_midpoint_convex(m, seed):
    rng = np.random.default_rng(seed)
    fg = (rng.random(m) < 0.5).astype(float)
    a, b = rng.random(m), rng.random(m)
    f = lambda e: L.lovasz_extension(e, fg)[0]  # noqa: E731
    assert f((a + b) / 2) <= (f(a) + f(b)) / 2 + 1e-9


# ---------------------------------------------------------------- unbiased CE

def test_unbiased_ce_examples():
    alpha = {U: 1.0, 3: 2.0, 4: 1.0}
    base = probs_of([[0.0, 0.6, 0.4], [0.2, 0.5, 0.3]], (U, *BASE))
    student = probs_of([[0.1, 0.2, 0.2, 0.5, 0.0], [0.1, 0.2, 0.2, 0.5, 0.0]])
    # element 0: background, base mass 1 -> 0; element 1: class 3 with P = 0.5 -> alpha ln 2
    res = L.unbiased_ce(student, base, [U, 3], alpha, U, BASE, "paper")
    assert res.value == pytest.approx((0.0 + 2.0 * math.log(2)) / 2)
    assert (res.grad[0] == 0).all()
    cm = L.unbiased_ce(student, base, [U, 3], alpha, U, BASE, "current-model")
    assert cm.value == pytest.approx((-math.log(0.5) + 2.0 * math.log(2)) / 2)
    with pytest.raises(L.LossError, match="variant"):
        L.unbiased_ce(student, base, [U, 3], alpha, U, BASE, "other")
    with pytest.raises(L.LossError, match="misaligned"):
        L.unbiased_ce(student, probs_of([[1, 0, 0]], (U, *BASE)), [U, 3], alpha, U, BASE)


def test_unbiased_ce_frozen_base_variant_zeroes_background_rows():
    rng = np.random.default_rng(1)
    for _ in range(50):
        inst = random_instance(rng)
        res = L.unbiased_ce(inst.student(inst.logits), inst.teacher(), inst.labels_novel, inst.alpha,
                            inst.background, inst.base, "paper")
        assert (res.grad[inst.labels_novel == inst.background] == 0.0).all()


@given(st.integers(0, 2**32 - 1))
def test_unbiased_ce_without_base_classes_is_weighted_ce(seed):
    rng = np.random.default_rng(seed)
    m, order = int(rng.integers(1, 16)), (U, *NOVEL)
    p = softmax_of(rng.normal(0, 2, size=(m, 3)), order)
    lab = rng.choice([U, *NOVEL, IGNORE], size=m)
    alpha = {U: 0.7, 3: 1.9, 4: 1.1}
    empty_base = L.ProbMap(np.ones((m, 1)), (U,))
    a = L.unbiased_ce(p, empty_base, lab, alpha, U, (), "current-model")
    b = L.weighted_ce(p, lab, alpha)
    assert abs(a.value - b.value) <= 1e-12
    assert np.abs(a.grad - b.grad).max() <= 1e-12


# ---------------------------------------------------------------- distillation

def test_unbiased_kd_examples():
    teacher = probs_of([[0.5, 0.5]], (U, 1))
    student = probs_of([[0.0, 0.5, 0.5]], (U, 1, 3))
    assert L.unbiased_kd(student, teacher, U, (3,)).value == pytest.approx(math.log(2))
    one_hot = probs_of([[0.0, 1.0]], (U, 1))
    assert L.unbiased_kd(probs_of([[0.0, 1.0, 0.0]], (U, 1, 3)), one_hot, U, (3,)).value == 0.0


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_unbiased_kd_gibbs_bound(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng)
    s, t = inst.student(inst.logits), inst.teacher()
    for i in range(s.M):
        row = lambda q: L.ProbMap(q.values[i:i + 1], q.class_order)  # noqa: E731
        val = L.unbiased_kd(row(s), row(t), inst.background, inst.novel).value
        assert val >= L.entropy(t.values[i:i + 1])[0] - 1e-12


# ---------------------------------------------------------------- combined losses

def test_loss_base_is_sum_of_terms():
    rng = np.random.default_rng(2)
    p = softmax_of(rng.normal(size=(8, 3)), (U, *BASE))
    lab = rng.choice([U, *BASE], size=8)
    alpha = {U: 1.0, 1: 2.0, 2: 0.5}
    tot = L.loss_base(p, lab, alpha, (U, *BASE))
    ce, ls = L.weighted_ce(p, lab, alpha), L.lovasz_softmax(p, lab, (U, *BASE))
    assert tot.value == ce.value + ls.value
    assert np.abs(tot.grad - ce.grad - ls.grad).max() <= 1e-12
    perfect = probs_of(np.eye(3)[[0, 1, 2]], (U, *BASE))
    assert L.loss_base(perfect, [0, 1, 2], alpha, (U, *BASE)).value == 0.0


def test_loss_finetune_default_and_errors():
    rng = np.random.default_rng(3)
    inst = random_instance(rng)
    s, t = inst.student(inst.logits), inst.teacher()
    args = (s, t, inst.labels_novel, inst.alpha, inst.background, inst.base, inst.novel)
    tot = L.loss_finetune(*args)
    parts = [
        L.unbiased_ce(s, t, inst.labels_novel, inst.alpha, inst.background, inst.base, "paper"),
        L.lovasz_softmax(s, inst.labels_novel, inst.novel_stage),
        L.unbiased_kd(s, t, inst.background, inst.novel),
    ]
    assert tot.value == pytest.approx(sum(p.value for p in parts), abs=1e-12)
    assert np.abs(tot.grad - sum(p.grad for p in parts)).max() <= 1e-12
    with pytest.raises(L.LossError, match="no fine-tuning"):
        L.loss_finetune(*args, flags=L.AblationFlags("off", "off", False))


def test_original_ce_equals_current_model_without_base_mass():
    rng = np.random.default_rng(4)
    m = 10
    z = rng.normal(size=(m, 5))
    z[:, 1:3] = -1000.0  # softmax underflows to exactly zero mass on the base columns
    s = softmax_of(z)
    assert (s.values[:, 1:3] == 0).all()
    t = softmax_of(rng.normal(size=(m, 3)), (U, *BASE))
    lab = rng.choice([U, *NOVEL], size=m)
    alpha = {U: 1.0, 3: 2.0, 4: 3.0}
    orig = L.loss_finetune(s, t, lab, alpha, U, BASE, NOVEL, L.AblationFlags("original", "off", False))
    cur = L.loss_finetune(s, t, lab, alpha, U, BASE, NOVEL, L.AblationFlags("unbiased", "off", False, "current-model"))
    assert abs(orig.value - cur.value) <= 1e-12
    assert np.abs(orig.grad - cur.grad).max() <= 1e-12


def test_plain_regime_is_ce_plus_lovasz():
    rng = np.random.default_rng(5)
    inst = random_instance(rng)
    s, t = inst.student(inst.logits), inst.teacher()
    flags = L.AblationFlags("original", "off", True)
    tot = L.loss_finetune(s, t, inst.labels_novel, inst.alpha, inst.background, inst.base, inst.novel, flags)
    ref = L.weighted_ce(s, inst.labels_novel, inst.alpha) + L.lovasz_softmax(s, inst.labels_novel, inst.novel_stage)
    assert tot.value == ref.value and np.array_equal(tot.grad, ref.grad)


# ---------------------------------------------------------------- structural properties

ALL_LOSSES = {
    "weighted_ce": lambda i, s, t: L.weighted_ce(s, i.labels_novel, i.alpha),
    "unbiased_ce": lambda i, s, t: L.unbiased_ce(s, t, i.labels_novel, i.alpha, i.background, i.base),
    "unbiased_ce_cm": lambda i, s, t: L.unbiased_ce(s, t, i.labels_novel, i.alpha, i.background, i.base, "current-model"),
    "unbiased_kd": lambda i, s, t: L.unbiased_kd(s, t, i.background, i.novel),
    "original_kd": lambda i, s, t: L.original_kd(s, t),
    "lovasz": lambda i, s, t: L.lovasz_softmax(s, i.labels_novel, i.novel_stage),
}
CE_TYPE = ("weighted_ce", "unbiased_ce", "unbiased_ce_cm", "unbiased_kd", "original_kd")


@pytest.mark.parametrize("name", sorted(ALL_LOSSES))
@given(seed=st.integers(0, 2**32 - 1))
def test_permutation_invariance(name, seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng)
    fn = ALL_LOSSES[name]
    a = fn(inst, inst.student(inst.logits), inst.teacher())
    perm = rng.permutation(len(inst.logits))
    inst.logits, inst.base_logits = inst.logits[perm], inst.base_logits[perm]
    inst.labels_novel = inst.labels_novel[perm]
    b = fn(inst, inst.student(inst.logits), inst.teacher())
    assert b.value == pytest.approx(a.value, rel=1e-12, abs=1e-15)
    assert np.allclose(b.grad, a.grad[perm], rtol=1e-10, atol=1e-15)
    if name in CE_TYPE:
        assert np.abs(a.grad.sum(axis=1)).max() <= 1e-9


@pytest.mark.parametrize("name", sorted(ALL_LOSSES))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(6)
    fn = ALL_LOSSES[name]
    for _ in range(5):
        inst = random_instance(rng)
        t = inst.teacher()
        f = lambda z: fn(inst, inst.student(z), t)  # noqa: E731
        z = inst.logits.copy()
        assert rel_error(f(z).grad, central_difference(lambda q: f(q).value, z)) < 1e-4
