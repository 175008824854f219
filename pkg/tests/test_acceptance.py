"""Acceptance criteria, one test per criterion.

Run ``pytest tests/test_acceptance.py`` to get a PASS/FAIL line per
criterion in the terminal summary. Criteria 6 and 9 train real models and
take a few minutes together.
"""

import json
import time

import numpy as np
import pytest

from dpscnn.checkpoint import CheckpointVersionError
from dpscnn.cli import main as cli_main
from dpscnn.core import Tensor, grad_check, weighted_sum
from dpscnn.interpret import one_vs_one, one_vs_one_scores, one_vs_rest, score_tensor, ScoreTensor
from dpscnn.locnet import KeypointAnnotation, loc_loss, parse_parts
from dpscnn.metrics import KeypointPrediction, apk, candidate_recall, pck
from dpscnn.netgeom import load_layers, stack_grid
from dpscnn.partstack import (
    FUSION_MODES,
    CropSpec,
    TwoStreamModel,
    fuse,
    fused_width,
    load_model,
    part_crop,
    part_crop_backward,
    part_crop_forward,
    save_model,
)
from dpscnn.pipeline import (
    ClsHyper,
    LocHyper,
    evaluate,
    images_nchw,
    labels_of,
    locate,
    location_array,
    train_classification,
    train_localization,
)
from dpscnn.synthdata import SynthConfig, generate, load, save, single_part_pairs
from oracles import ap_from_curve, disk_coverage_mc, fuse_loops, one_vs_one_enum, one_vs_rest_enum, pck_loops


def _measured(record_property, text):
    record_property("measured", text)


# ---------------------------------------------------------------- 1


def test_criterion_1_part_crop_gradients(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_adj = worst_fd = 0.0
    overlaps = clamps = 0
    for _ in range(20):
        c, h, w = int(rng.integers(1, 4)), int(rng.integers(8, 13)), int(rng.integers(8, 13))
        spec = CropSpec(int(rng.integers(2, 6)), int(rng.integers(2, 6)))
        m = int(rng.integers(3, 6))
        locs = np.stack([rng.integers(0, h, m), rng.integers(0, w, m)], axis=-1)
        locs[0] = (0, w - 1)  # always one clamped window
        locs[1] = np.clip(locs[0] + rng.integers(-1, 2, 2), 0, [h - 1, w - 1])  # and one overlap with it
        if rng.random() < 0.5:
            locs[-1] = -1
        x = rng.normal(size=(1, c, h, w))
        crops, mask, origins = part_crop_forward(x, locs[None], spec)
        nominal = locs - np.array([spec.rows // 2, spec.cols // 2])
        clamps += int((origins[0] != nominal).any(axis=1)[mask[0]].any())
        cover = np.zeros((h, w), int)
        for (oy, ox), on in zip(origins[0], mask[0]):
            if on:
                cover[oy:oy + spec.rows, ox:ox + spec.cols] += 1
        overlaps += int(cover.max() > 1)

        g = rng.normal(size=crops.shape)
        back = part_crop_backward(g, origins, mask, (h, w))
        lhs, rhs = float((crops * g).sum()), float((x * back).sum())
        worst_adj = max(worst_adj, abs(lhs - rhs) / max(1.0, abs(lhs)))

        weights = rng.normal(size=crops.shape)
        rep = grad_check(lambda t: weighted_sum(part_crop(t, locs[None], spec)[0], weights), Tensor(x))
        worst_fd = max(worst_fd, rep.max_rel_error)
    elapsed = time.perf_counter() - start
    _measured(record_property, f"adjoint {worst_adj:.1e}, fd {worst_fd:.1e}, {overlaps} overlapping, "
                               f"{clamps} clamped, {elapsed:.2f}s")
    assert overlaps == 20 and clamps == 20
    assert worst_adj <= 1e-12
    assert worst_fd <= 1e-6
    assert elapsed < 10.0


# ---------------------------------------------------------------- 2


def test_criterion_2_location_loss(record_property):
    worst = 0.0
    for m, h, w in [(15, 28, 28), (4, 7, 5), (1, 1, 1), (9, 14, 3)]:
        labels = np.random.default_rng(m).integers(0, m + 1, (h, w))
        loss = float(loc_loss(Tensor(np.zeros((m + 1, h, w))), labels).data)
        worst = max(worst, abs(loss - h * w * np.log(m + 1)))
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(2, 5, 6, 7)))
    labels = rng.integers(0, 5, (2, 6, 7))
    rep = grad_check(lambda t: loc_loss(t, labels), logits, tolerance=1e-5)
    _measured(record_property, f"closed-form error {worst:.1e}, gradient rel. error {rep.max_rel_error:.1e}")
    assert worst <= 1e-9
    assert rep.passed


# ---------------------------------------------------------------- 3


def test_criterion_3_candidate_recall(record_property):
    _, grid = stack_grid(load_layers("bn_to_4a"), (448, 448))
    y0, x0, y1, x1 = grid.hull()
    rng = np.random.default_rng(7)
    pts = np.stack([rng.uniform(y0, y1, 10_000), rng.uniform(x0, x1, 10_000)], axis=-1)
    gts = [KeypointAnnotation(i, p[None], [True], (448, 448)) for i, p in enumerate(pts)]
    r05 = candidate_recall(grid, gts, 0.05)[0]
    r01 = candidate_recall(grid, gts, 0.01)[0]
    oracle = disk_coverage_mc(grid.jump, 0.01 * 448)
    _measured(record_property, f"recall@0.05 {r05}, recall@0.01 {r01:.4f} vs oracle {oracle:.4f} "
                               f"(exact {np.pi * 4.48 ** 2 / 256:.4f})")
    assert r05 == 1.0
    assert abs(r01 - oracle) <= 0.01


# ---------------------------------------------------------------- 4


def test_criterion_4_receptive_fields(record_property, capsys):
    sizes = {}
    for name in ("bn_to_4a", "bn_to_4b", "bn_to_4c", "bn_to_4d"):
        assert cli_main(["rfcalc", "--layers", name, "--input-size", "448"]) == 0
        sizes[name] = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    _measured(record_property, ", ".join(f"{k[-2:]}={v['rf_size']}" for k, v in sizes.items()))
    assert [sizes[k]["rf_size"] for k in ("bn_to_4a", "bn_to_4b", "bn_to_4c")] == [107, 139, 171]
    assert sizes["bn_to_4d"]["rf_size"] == 203 and "204" in sizes["bn_to_4d"]["note"]
    assert all(v["jump"] == 16 and v["grid"] == [28, 28] for v in sizes.values())


# ---------------------------------------------------------------- 5


def _part_stream_time(model, images, locs, repeats=7):
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        model.part_features(model.trunk(Tensor(images)), locs)
        best = min(best, time.perf_counter() - t)
    return best


def test_criterion_5_shared_trunk(record_property):
    rng = np.random.default_rng(0)
    images = rng.random((8, 3, 112, 112))
    locs = rng.integers(0, 28, (8, 15, 2))
    for size in (0, 3, 5, 9, 15):
        model = TwoStreamModel(8, 15, list(range(size)), "SMM")
        model(Tensor(images), locs)
        assert model.trunk_calls == len(images)
    times = {}
    for size in (1, 15):
        model = TwoStreamModel(8, 15, list(range(size)), "SMM")
        model.part_features(model.trunk(Tensor(images[:1])), locs[:1])  # warm up
        times[size] = _part_stream_time(model, images, locs)
    ratio = times[15] / times[1]
    _measured(record_property, f"part stream 1 part {times[1] * 1e3:.1f} ms, 15 parts {times[15] * 1e3:.1f} ms, "
                               f"ratio {ratio:.2f}")
    assert ratio < 3.0


# ---------------------------------------------------------------- 6 and 9 share a localizer


@pytest.fixture(scope="module")
def pipeline_run():
    start = time.perf_counter()
    dataset = generate(SynthConfig(seed=0))
    loc_net, _ = train_localization(dataset, LocHyper())
    pck01 = evaluate(dataset, loc_net, None, [0.1])["pck"][0]["average"]
    smm, _ = train_classification(dataset, loc_net, "SMM", "all", ClsHyper())
    acc_smm = evaluate(dataset, loc_net, smm, [0.1])["accuracy"]
    base, _ = train_classification(dataset, loc_net, "SMM", "none", ClsHyper())
    acc_base = evaluate(dataset, loc_net, base, [0.1])["accuracy"]
    elapsed = time.perf_counter() - start
    return {"loc_net": loc_net, "pck": pck01, "smm": acc_smm, "base": acc_base, "seconds": elapsed}


@pytest.mark.slow
def test_criterion_6_end_to_end(record_property, pipeline_run):
    r = pipeline_run
    _measured(record_property, f"PCK@0.1 {r['pck']:.3f}, SMM acc {r['smm']:.3f}, object-only {r['base']:.3f}, "
                               f"{r['seconds']:.0f}s")
    assert r["pck"] >= 0.90
    assert r["smm"] >= 0.90
    assert r["smm"] - r["base"] >= 0.05
    assert r["seconds"] < 600


# ---------------------------------------------------------------- 7


def test_criterion_7_fusion(record_property):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        mode = FUSION_MODES[int(rng.integers(0, 4))]
        b, d = int(rng.integers(1, 17)), int(rng.integers(1, 9))
        x = rng.normal(size=(1, b, d))
        mask = rng.random((1, b)) < 0.5
        mask[0, 0] = True
        out = fuse(Tensor(x), mask, mode).data[0]
        worst = max(worst, float(np.abs(out - fuse_loops(x[0], mask[0], mode)).max()))
    for m in range(16):
        for d in range(1, 65):
            x = Tensor(np.zeros((1, m + 1, d)))
            for mode in FUSION_MODES:
                assert fuse(x, np.ones((1, m + 1), bool), mode).shape == (1, fused_width(mode, m + 1, d))
    x = Tensor(rng.normal(size=(3, 6, 5)))
    mask = rng.random((3, 6)) < 0.7
    mask[:, 0] = True
    rep = grad_check(lambda t: fuse(t, mask, "SM"), x)
    _measured(record_property, f"max brute-force gap {worst:.1e}, SM gradient rel. error {rep.max_rel_error:.1e}")
    assert worst <= 1e-12
    assert rep.passed


# ---------------------------------------------------------------- 8


def _random_metric_instance(rng):
    n, m = int(rng.integers(1, 10)), int(rng.integers(1, 4))
    size = int(rng.integers(40, 200))
    gts, preds = [], []
    for i in range(n):
        pts = rng.uniform(0, size, (m, 2))
        gts.append(KeypointAnnotation(i, pts, rng.random(m) < 0.8, (size, size)))
        guess = pts + rng.normal(0, size * 0.06, (m, 2))
        guess[rng.random(m) < 0.2] = np.nan
        preds.append(KeypointPrediction(i, guess, rng.random(m)))
    for _ in range(int(rng.integers(0, 4))):
        preds.append(KeypointPrediction(int(rng.integers(0, n)), rng.uniform(0, size, (m, 2)), rng.random(m)))
    return preds, gts


def test_criterion_8_metric_oracles(record_property):
    rng = np.random.default_rng(8)
    worst_pck = worst_ap = 0.0
    for _ in range(200):
        preds, gts = _random_metric_instance(rng)
        n = len(gts)
        aligned = preds[:n]
        for alpha in (0.02, 0.05, 0.1):
            got = pck(aligned, gts, alpha).per_part
            ref = pck_loops(np.stack([p.points for p in aligned]), np.stack([g.points for g in gts]),
                            np.stack([g.visible for g in gts]), np.array([max(g.image_size) for g in gts]), alpha)
            assert np.array_equal(np.isnan(got), np.isnan(ref))
            worst_pck = max(worst_pck, float(np.nan_to_num(np.abs(got - ref)).max()))
        prev = None
        for alpha in (0.01, 0.02, 0.05, 0.1, 0.2):
            c = pck(aligned, gts, alpha).correct
            assert prev is None or (c >= prev).all()
            prev = c
        res = apk(preds, gts, 0.1)
        for part in range(gts[0].n_parts):
            sel = [p for p in preds if p.present[part]]
            ref = ap_from_curve([p.image_id for p in sel], [p.points[part] for p in sel],
                                [p.confidence[part] for p in sel], {g.image_id: g.points[part] for g in gts},
                                {g.image_id: bool(g.visible[part]) for g in gts},
                                {g.image_id: max(g.image_size) for g in gts}, 0.1)
            if np.isnan(ref):
                assert np.isnan(res.per_part[part])
                continue
            worst_ap = max(worst_ap, abs(res.per_part[part] - ref))
            assert res.per_part[part] <= 1.0
        low = min(float(np.nanmin(p.confidence)) for p in preds) - 1.0
        fp = KeypointPrediction(0, np.full((gts[0].n_parts, 2), 1e9), np.full(gts[0].n_parts, low))
        after = apk(preds + [fp], gts, 0.1).per_part
        ok = ~np.isnan(res.per_part)
        assert (after[ok] <= res.per_part[ok]).all()
    _measured(record_property, f"PCK gap {worst_pck:.1e}, AP gap {worst_ap:.1e} over 200 instances")
    assert worst_pck == 0.0
    assert worst_ap <= 1e-12


# ---------------------------------------------------------------- 9


@pytest.mark.slow
def test_criterion_9_interpretation(record_property, pipeline_run):
    rng = np.random.default_rng(9)
    for _ in range(500):
        n, p, k = (int(v) for v in rng.integers([2, 1, 2], 7))
        probs = rng.dirichlet(np.ones(k), size=(n, p))
        labels = rng.integers(0, k, n)
        labels[:2] = [0, 1]
        S = ScoreTensor(probs, labels)
        assert one_vs_rest(S, 0) == one_vs_rest_enum(probs, labels, 0)
        part, conf = one_vs_one(S, 0, 1)
        ref_part, ref_conf = one_vs_one_enum(probs, labels, 0, 1)
        assert part == ref_part and abs(conf - ref_conf) <= 1e-12
        assert np.array_equal(one_vs_one_scores(S, 0, 1).scores, one_vs_one_scores(S, 1, 0).scores)
        assert one_vs_one(S, 0, 1) == one_vs_one(S, 1, 0)

    config = SynthConfig.one_part_difference(seed=0)
    dataset = generate(config)
    loc_net = pipeline_run["loc_net"]
    model, _ = train_classification(dataset, loc_net, "SMM", "all", ClsHyper(epochs=60, part_dropout=0.3))
    samples = dataset.test
    locs = location_array(locate(loc_net, samples))
    S = score_tensor(model, images_nchw(samples), locs, labels_of(samples))
    pairs = single_part_pairs(config.class_tokens)
    hits = 0
    for a, b, part in pairs:
        got = one_vs_one(S, a, b)
        assert got == one_vs_one(S, b, a)
        hits += got[0] == part
    frac = hits / len(pairs)
    _measured(record_property, f"{hits}/{len(pairs)} single-part pairs recovered")
    assert frac >= 0.90


# ---------------------------------------------------------------- 10


def test_criterion_10_reproducibility(record_property, tmp_path, capsys):
    reports = []
    for run in ("a", "b"):
        root = tmp_path / run
        steps = [
            ["gen-data", "--out", root / "data", "--n-classes", "3", "--train-per-class", "4", "--test-per-class", "2"],
            ["train-loc", "--data", root / "data", "--out", root / "loc", "--epochs", "2"],
            ["train-cls", "--data", root / "data", "--loc", root / "loc" / "loc.ckpt", "--out", root / "cls",
             "--epochs", "2"],
            ["eval", "--data", root / "data", "--loc", root / "loc" / "loc.ckpt", "--cls", root / "cls" / "cls.ckpt",
             "--out", root / "eval"],
        ]
        for argv in steps:
            assert cli_main([str(a) for a in argv]) == 0
        capsys.readouterr()
        reports.append(((root / "eval" / "report.json").read_bytes(), (root / "eval" / "report.csv").read_bytes(),
                        (root / "cls" / "cls.ckpt").read_bytes()))
    assert reports[0] == reports[1]

    dataset = load(tmp_path / "a" / "data")
    save(dataset, tmp_path / "copy")
    assert load(tmp_path / "copy") == dataset
    assert dataset == generate(dataset.config)

    model, manifest = load_model(tmp_path / "a" / "cls" / "cls.ckpt")
    save_model(tmp_path / "again.ckpt", model, {k: manifest[k] for k in ("data_hash", "hyper", "inference")})
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "a" / "cls" / "cls.ckpt").read_bytes()

    bad = tmp_path / "future.ckpt"
    import zipfile

    with zipfile.ZipFile(tmp_path / "again.ckpt") as src, zipfile.ZipFile(bad, "w") as dst:
        for name in src.namelist():
            blob = src.read(name)
            if name == "manifest.json":
                meta = json.loads(blob)
                meta["format_version"] = 2
                blob = json.dumps(meta).encode()
            dst.writestr(name, blob)
    with pytest.raises(CheckpointVersionError):
        load_model(bad)

    text = "1 1 10.0 20.0 1\n1 2 0 0 0\n2 1 5.5 6.5 1\n2 2 7 8 1\n3 1 0 0 0\n3 2 100 50 1\n"
    got = parse_parts(text, {1: (64, 128), 2: (64, 128), 3: (64, 128)}, order="xy")
    expect = [
        KeypointAnnotation(1, [[20.0, 10.0], [0, 0]], [True, False], (64, 128)),
        KeypointAnnotation(2, [[6.5, 5.5], [8.0, 7.0]], [True, True], (64, 128)),
        KeypointAnnotation(3, [[0, 0], [50.0, 100.0]], [False, True], (64, 128)),
    ]
    assert got == expect
    _measured(record_property, "reports and checkpoints byte-identical; round trips lossless; CUB fixture parsed")
