"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s`` to see only the verdicts.
"""

import itertools
import os
import time

import numpy as np
import pytest

from bgfss import losses as L
from bgfss.cli import main
from bgfss.config import load_config
from bgfss.evaluation import ConfusionMatrix, iou
from bgfss.experiments import REGIMES, run_seed, summarize
from bgfss.geometry import EMPTY, PointCloud, ProjectionConfig, backproject, pixel_coords, project, read_scan, write_scan
from bgfss.gradcheck import TOLERANCE, random_instance, run_all
from bgfss.protocol import Dataset, sample_shots
from bgfss.synth import write_corpus
from bgfss.taxonomy import IGNORE

from conftest import SYNTH_INI


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}")
        assert ok, detail

    return emit


def test_1_gradient_suite(verdict):
    t0 = time.time()
    results = run_all(instances=20, model_instances=3, seed=0)
    elapsed = time.time() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    names = {r.name for r in results}
    covered = {"weighted_ce", "lovasz_softmax", "unbiased_ce[paper]", "unbiased_ce[current-model]", "unbiased_kd",
               "loss_base", "model+loss_base"} <= names
    ok = covered and all(r.passed for r in results) and elapsed < 60
    verdict(1, "gradient suite", ok,
            f"{len(results)} checks, worst {worst.name} rel err {worst.max_rel_error:.1e} "
            f"(< {TOLERANCE:g}), {elapsed:.1f}s")


def _jaccard_loss(fg, wrong):
    gt = {i for i, f in enumerate(fg) if f}
    pred = gt ^ {i for i, w in enumerate(wrong) if w}
    union = pred | gt
    return 0.0 if not union else 1.0 - len(pred & gt) / len(union)


def test_2_lovasz_oracle(verdict):
    worst = 0.0
    vertices = 0
    for m in range(1, 9):
        for fg in itertools.product((0.0, 1.0), repeat=m):
            fg_arr = np.array(fg)
            for wrong in itertools.product((0, 1), repeat=m):
                value, _ = L.lovasz_extension(np.array(wrong, dtype=float), fg_arr)
                worst = max(worst, abs(value - _jaccard_loss(fg, wrong)))
                vertices += 1
    rng = np.random.default_rng(0)
    violations = 0
    for _ in range(100):
        m = int(rng.integers(1, 17))
        fg = (rng.random(m) < 0.5).astype(float)
        a, b = rng.random(m), rng.random(m)
        f = lambda e: L.lovasz_extension(e, fg)[0]  # noqa: E731
        violations += f((a + b) / 2) > (f(a) + f(b)) / 2 + 1e-9
    verdict(2, "Lovász oracle", worst <= 1e-9 and violations == 0,
            f"{vertices} vertices, max |err| {worst:.1e}; convexity violations {violations}/100")


def test_3_gibbs_bound(verdict):
    rng = np.random.default_rng(3)
    worst_gap, worst_eq = np.inf, 0.0
    for _ in range(1000):
        inst = random_instance(rng, min_gap=0.0)
        s, t = inst.student(inst.logits), inst.teacher()
        for i in range(s.M):
            si = L.ProbMap(s.values[i:i + 1], s.class_order)
            ti = L.ProbMap(t.values[i:i + 1], t.class_order)
            h = L.entropy(ti.values)[0]
            worst_gap = min(worst_gap, L.unbiased_kd(si, ti, inst.background, inst.novel).value - h)
        # equality case: aggregated student row equals the teacher row
        trow = t.values[0]
        split = rng.dirichlet(np.ones(len(inst.novel))) * trow[0]
        srow = np.concatenate([[0.0], trow[1:], split])
        val = L.unbiased_kd(L.ProbMap(srow[None], s.class_order), L.ProbMap(trow[None], t.class_order),
                            inst.background, inst.novel).value
        worst_eq = max(worst_eq, abs(val - L.entropy(trow[None])[0]))
    ok = worst_gap >= -1e-12 and worst_eq <= 1e-9
    verdict(3, "Gibbs bound", ok, f"min(KD - H) = {worst_gap:.2e} over 1000 instances; equality error {worst_eq:.1e}")


def test_4_reduction_identities(verdict):
    rng = np.random.default_rng(4)
    worst, nonzero = 0.0, 0
    for _ in range(500):
        inst = random_instance(rng, min_gap=0.0)
        order = inst.novel_stage
        p = L.softmax(L.LogitsMap(inst.logits[:, [0, *range(1 + len(inst.base), inst.logits.shape[1])]], order))
        empty = L.ProbMap(np.ones((p.M, 1)), (inst.background,))
        a = L.unbiased_ce(p, empty, inst.labels_novel, inst.alpha, inst.background, (), "current-model")
        b = L.weighted_ce(p, inst.labels_novel, inst.alpha)
        worst = max(worst, abs(a.value - b.value), float(np.abs(a.grad - b.grad).max()))
        res = L.unbiased_ce(inst.student(inst.logits), inst.teacher(), inst.labels_novel, inst.alpha,
                            inst.background, inst.base, "paper")
        nonzero += int(np.count_nonzero(res.grad[inst.labels_novel == inst.background]))
    verdict(4, "reduction identities", worst <= 1e-12 and nonzero == 0,
            f"current-model vs weighted_ce max diff {worst:.1e}; nonzero background-row grads {nonzero}")


def _projection_invariants(cloud: PointCloud, cfg: ProjectionConfig) -> list[str]:
    img = project(cloud, cfg)
    row, col = pixel_coords(cloud, cfg)
    rng_ = np.linalg.norm(cloud.xyz, axis=1)
    bad = []
    if not ((0 <= row).all() and (row < cfg.height).all() and (0 <= col).all() and (col < cfg.width).all()):
        bad.append("bounds")
    winners = img.point_index[img.valid]
    if img.M != len(np.unique(row * cfg.width + col)) or len(set(winners.tolist())) != img.M:
        bad.append("occupancy")
    for r, c in zip(*np.nonzero(img.valid)):
        members = np.flatnonzero((row == r) & (col == c))
        expect = members[np.lexsort((members, rng_[members]))[0]]
        if img.point_index[r, c] != expect:
            bad.append("nearest-wins")
            break
        want = np.concatenate([cloud.points[expect], [rng_[expect]]])
        if not np.array_equal(img.channels[r, c], want):
            bad.append("channels")
            break
    if (img.point_index[~img.valid] != EMPTY).any():
        bad.append("empty pixels")
    # round trip: the point-index grid read back per point names each point's pixel winner
    back = backproject(img.point_index, img, cloud)
    if not np.array_equal(back, img.point_index[row, col]) or not (back[winners] == winners).all():
        bad.append("backproject")
    return bad


def test_5_projection(verdict, tmp_path):
    kitti = ProjectionConfig.from_degrees(2048, 64, 3.0, 25.0)
    r1, c1 = pixel_coords(PointCloud(np.array([[10.0, 0, 0, 0], [3.0, 4.0, 0, 0]])), kitti)
    hand = (int(r1[0]), int(c1[0]), int(c1[1])) == (6, 1024, 721)
    rng = np.random.default_rng(5)
    small = ProjectionConfig.from_degrees(64, 16, 3.0, 25.0)
    failures = []
    for k in range(1000):
        n = int(rng.integers(1, 120))
        xyz = rng.normal(0, 10, size=(n, 3))
        xyz[rng.random(n) < 0.2] = xyz[0]  # force exact duplicates / range ties
        xyz[np.linalg.norm(xyz, axis=1) < 1e-3] = 1.0
        pts = np.column_stack([xyz, rng.random(n)]).astype(np.float32).astype(np.float64)
        cloud = PointCloud(pts)
        if k % 100 == 0:
            write_scan(tmp_path / "c.bin", cloud)
            if not np.array_equal(read_scan(tmp_path / "c.bin").points, cloud.points):
                failures.append(f"cloud {k}: file round trip")
        failures += [f"cloud {k}: {b}" for b in _projection_invariants(cloud, small)]
    verdict(5, "projection", hand and not failures,
            f"hand examples (6, 1024), 721 {'ok' if hand else 'WRONG'}; "
            f"1000 random clouds, {len(failures)} invariant failures {failures[:3]}")


def _set_iou(pred, truth, c):
    keep = truth != IGNORE
    p, t = set(np.flatnonzero(keep & (pred == c))), set(np.flatnonzero(keep & (truth == c)))
    return None if not p | t else 100.0 * len(p & t) / len(p | t)


def test_6_miou_oracle(verdict):
    rng = np.random.default_rng(6)
    classes = (0, 1, 2, 3, 4)
    mismatches = 0
    for _ in range(1000):
        m = int(rng.integers(0, 40))
        truth = rng.choice([IGNORE, *classes], size=m)
        pred = rng.choice(classes, size=m)
        conf = ConfusionMatrix(classes).accumulate(pred, truth)
        mismatches += sum(iou(conf, c) != _set_iou(pred, truth, c) for c in classes)
    verdict(6, "mIoU oracle", mismatches == 0, f"1000 random label vectors, {mismatches} mismatched IoUs")


def test_7_directional_reproduction(verdict, tmp_path):
    t0 = time.time()
    cfg = load_config(SYNTH_INI)
    assert (cfg.synth.n_base, cfg.finetune.shots) == (40, 5)
    write_corpus(tmp_path, cfg.synth)
    regimes = {"full": REGIMES["full"], "naive": REGIMES["naive"]}
    table = summarize([run_seed(str(tmp_path), cfg, seed, regimes) for seed in range(5)])
    elapsed = time.time() - t0
    full, naive = table["full"], table["naive"]
    margin_a = full["miou"] - naive["miou"]
    margin_b = naive["base_drop"] - full["base_drop"]
    verdict(7, "directional reproduction", margin_a > 0 and margin_b > 0 and elapsed < 300,
            f"mIoU full {full['miou']:.1f} vs naive {naive['miou']:.1f} (margin {margin_a:.1f}); "
            f"base drop full {full['base_drop']:.1f} vs naive {naive['base_drop']:.1f} (margin {margin_b:.1f}); "
            f"5 seeds in {elapsed:.0f}s")


def _snapshot(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            path = os.path.join(dirpath, f)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


def test_8_reproducibility(verdict, tmp_path):
    out = str(tmp_path / "out")
    corpus = os.path.join(out, "corpus")
    fast = ["--config", SYNTH_INI, "--out-dir", out, "--seed", "2",
            "--set", "synth.n_base=3", "--set", "synth.n_pool=4", "--set", "synth.n_eval=2",
            "--set", "base.epochs=2", "--set", "finetune.epochs=2"]
    commands = [
        ["synth-gen"],
        ["project", "--scan", os.path.join(corpus, "sequences/00/velodyne/000000.bin")],
        ["train-base", "--data", corpus],
        ["sample-shots", "--data", corpus, "--n", "2"],
        ["finetune", "--data", corpus, "--base", f"{out}/base.ckpt.json", "--shots", f"{out}/shots.json"],
        ["predict", "--data", corpus, "--checkpoint", f"{out}/finetuned.ckpt.json"],
        ["eval", "--data", corpus, "--checkpoint", f"{out}/finetuned.ckpt.json"],
        ["gradcheck", "--instances", "3", "--model-instances", "1"],
    ]
    codes, snaps = [], []
    for _ in range(2):
        codes.append([main(c + fast) for c in commands])
        snaps.append(_snapshot(out))
    differing = sorted(k for k in snaps[0].keys() | snaps[1].keys() if snaps[0].get(k) != snaps[1].get(k))
    ok = all(c == 0 for run in codes for c in run) and not differing
    verdict(8, "reproducibility", ok,
            f"{len(commands)} subcommands run twice, {len(snaps[0])} files compared, "
            f"{len(differing)} differ {differing[:3]}; exit codes {codes[0]}")


def test_9_shot_sampling(verdict, small_corpus, street_tax):
    pool = Dataset.from_kitti(small_corpus, ["01"])
    same = all(sample_shots(pool, street_tax, 2, s) == sample_shots(pool, street_tax, 2, s) for s in range(5))
    big = sample_shots(pool, street_tax, 50, 0)
    available = {c: [f.name for f in pool.frames
                     if c in street_tax.map_raw(np.fromfile(f.labels, dtype="<u4") & 0xFFFF)]
                 for c in street_tax.novel}
    full = all(big.frames[c] == available[c] and big.shortfall.get(c) == 50 - len(available[c])
               for c in street_tax.novel)
    verdict(9, "shot sampling", same and full,
            f"deterministic over 5 seeds: {same}; n=50 returns all of "
            f"{ {c: len(v) for c, v in available.items()} } with shortfall {big.shortfall}")
