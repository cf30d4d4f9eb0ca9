"""Product acceptance gate.

Each test prints exactly one PASS/FAIL line with the measured value and its
bound, then asserts.  The end-to-end tests train a real detector on the
default synthetic scene through the command-line interface, so this module
takes several minutes; run it last (pytest orders by file name, so it runs
after the unit suites by default only when invoked explicitly — the full
`pytest` run includes it).
"""

import csv
import time

import numpy as np
import pytest

import htd.model
from htd.augment import extract_patch, sesa_pairs, sesa_view, sesa_weights
from htd.autodiff import Tensor, grad_check
from htd.cli import main
from htd.data import read_cube, read_mask, read_spectrum
from htd.detection import read_scores, suppress
from htd.evaluation import auc_all, pairwise_auc, roc
from htd.loss import batch_loss
from htd.model import ModelConfig, SpectralEncoder
from htd.scan import parallel_scan_states, sequential_scan_states


RESULTS: list[str] = []  # echoed by conftest in the terminal summary


def report(label: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
    RESULTS.append(line)
    print(f"[acceptance] {line}")
    return ok


# -- 1: gradient correctness of the full pipeline ------------------------------


def test_full_pipeline_gradients():
    started = time.monotonic()
    rng = np.random.default_rng(0)
    cube = rng.uniform(0.05, 1.0, (8, 8, 40))
    centers = np.array([[1, 1], [3, 6], [5, 2], [7, 7]])
    views, ys = sesa_pairs(cube, centers, 5)

    model = SpectralEncoder(
        ModelConfig(bands=40, group_length=8, embed_size=8,
                    state_size=8, feature_size=16),
        rng=np.random.default_rng(1),
        dtype=np.float64,
    )
    stacked = np.concatenate([views, ys])

    def f():
        feats = model.forward(Tensor(stacked))
        return batch_loss(feats[:4], feats[4:], 0.1)

    err = grad_check(
        f, list(model.parameters().values()), eps=1e-5,
        max_coords_per_tensor=8, rng=np.random.default_rng(2),
    )
    elapsed = time.monotonic() - started
    ok = err < 1e-4 and elapsed < 60.0
    assert report(
        "pipeline-gradients", ok,
        f"max rel err {err:.3e} (bound 1e-4), {elapsed:.1f}s (bound 60s)",
    )


# -- 2: parallel scan equivalence ------------------------------------------------


def test_scan_equivalence():
    started = time.monotonic()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        length = int(rng.integers(1, 257))
        c = int(rng.integers(1, 17))
        d = int(rng.integers(1, 9))
        gain = rng.uniform(0.0, 1.0, (length, c, d))
        drive = rng.standard_normal((length, c, d))
        h_seq = sequential_scan_states(gain, drive)
        h_par = parallel_scan_states(gain, drive)
        denom = max(float(np.abs(h_seq).max()), 1.0)
        worst = max(worst, float(np.abs(h_seq - h_par).max()) / denom)
    elapsed = time.monotonic() - started
    ok = worst < 1e-10 and elapsed < 30.0
    assert report(
        "scan-equivalence", ok,
        f"worst rel diff {worst:.3e} over 100 instances (bound 1e-10), "
        f"{elapsed:.1f}s (bound 30s)",
    )


# -- 3: linear scaling of the sequential scan -------------------------------------


def test_scan_linear_scaling():
    rng = np.random.default_rng(4)
    c, d = 16, 16
    medians = []
    for length in (256, 512, 1024):
        gain = rng.uniform(0.0, 1.0, (length, c, d))
        drive = rng.standard_normal((length, c, d))
        sequential_scan_states(gain, drive)  # warm up
        trials = []
        for _ in range(20):
            t0 = time.perf_counter()
            sequential_scan_states(gain, drive)
            trials.append(time.perf_counter() - t0)
        medians.append(float(np.median(trials)))
    r1 = medians[1] / medians[0]
    r2 = medians[2] / medians[1]
    ok = r1 < 2.5 and r2 < 2.5
    assert report(
        "scan-linear-scaling", ok,
        f"time ratios per doubling {r1:.2f}, {r2:.2f} (bound 2.5), "
        f"medians {[f'{m * 1e3:.2f}ms' for m in medians]}",
    )


# -- 4: pyramid level geometry audit ------------------------------------------------


@pytest.mark.parametrize("bands,m", [(60, 12), (102, 15), (189, 30)])
def test_pyramid_shape_audit(bands, m, monkeypatch):
    n = 16
    model = SpectralEncoder(
        ModelConfig(bands=bands, group_length=m, embed_size=n, state_size=16),
        rng=np.random.default_rng(5),
    )
    length = model.cfg.embedding.seq_len
    seen = []
    real = htd.model.s6_forward

    def spy(z, params, **kw):
        seen.append(z.shape)
        return real(z, params, **kw)

    monkeypatch.setattr(htd.model, "s6_forward", spy)
    s = Tensor(np.random.default_rng(6).standard_normal((2, length, n)).astype(np.float32))
    out = model.pyramid_block(s)

    expected = [
        (2, length // (2 ** k), 2 ** (k + 1) * n) for k in range(4)
    ]
    ok = seen == expected and out.shape == s.shape
    assert report(
        f"pyramid-shapes-B{bands}", ok,
        f"levels {seen} == {expected}, block out {out.shape} == {s.shape}",
    )


# -- 5: contrastive loss sanity -----------------------------------------------------


def test_loss_sanity():
    rng = np.random.default_rng(7)
    p, d = 80, 4096
    loss = batch_loss(
        Tensor(rng.standard_normal((p, d))), Tensor(rng.standard_normal((p, d))), 0.1
    ).item()
    ok_init = abs(loss - np.log(p)) <= 0.22

    single = batch_loss(Tensor(rng.standard_normal((1, 32))),
                        Tensor(rng.standard_normal((1, 32))), 0.1).item()
    ok_single = single == 0.0

    x = rng.standard_normal((16, 32))
    y = rng.standard_normal((16, 32))
    base = batch_loss(Tensor(x), Tensor(y), 0.1).item()
    scales = rng.uniform(0.1, 10.0, (16, 1))
    drift = abs(batch_loss(Tensor(x * scales), Tensor(y * 2.0), 0.1).item() - base)
    ok_scale = drift <= 1e-9

    ok = ok_init and ok_single and ok_scale
    assert report(
        "loss-sanity", ok,
        f"init loss {loss:.4f} vs log80 {np.log(80):.4f} (tol 0.22), "
        f"P=1 loss {single}, rescale drift {drift:.2e} (bound 1e-9)",
    )


# -- 6: ROC/AUC oracle ------------------------------------------------------------


def test_metric_oracle():
    rng = np.random.default_rng(8)
    worst = 0.0
    worst_nbs = 0.0
    for _ in range(200):
        size = int(rng.integers(10, 120))
        scores = rng.permutation(size).astype(np.float64)  # tie-free
        mask = np.zeros(size, dtype=int)
        mask[rng.choice(size, size=max(1, size // 5), replace=False)] = 1
        rep = auc_all(roc(scores, mask))
        worst = max(worst, abs(rep.auc_pf_pd - pairwise_auc(scores, mask)))
        # composite identities must hold exactly on every report
        assert rep.auc_oa == rep.auc_pf_pd + rep.auc_tau_pd - rep.auc_tau_pf
        assert rep.auc_snpr == rep.auc_tau_pd / rep.auc_tau_pf
        # suppression is strictly monotone, so the ranking AUC cannot move
        mu = scores / size * 2.0 - 1.0
        a = auc_all(roc(mu, mask)).auc_pf_pd
        b = auc_all(roc(suppress(mu), mask)).auc_pf_pd
        worst_nbs = max(worst_nbs, abs(a - b))
    ok = worst < 1e-12 and worst_nbs <= 1e-12
    assert report(
        "metric-oracle", ok,
        f"trapezoid vs pairwise worst {worst:.3e} (bound 1e-12) over 200 runs, "
        f"suppression invariance worst {worst_nbs:.3e} (bound 1e-12)",
    )


# -- 7 & 8: end-to-end synthetic detection and bit-exact replay ----------------------


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    scene = root / "scene"
    started = time.monotonic()
    assert main(["synth", "--out", str(scene)]) == 0
    for tag in ("a", "b"):
        run = root / f"run_{tag}"
        det = root / f"det_{tag}"
        assert main([
            "train", "--cube", str(scene / "cube.hsb"),
            "--epochs", "50", "--out", str(run), "--quiet",
        ]) == 0
        assert main([
            "detect", "--cube", str(scene / "cube.hsb"),
            "--target", str(scene / "target.txt"),
            "--ckpt", str(run / "model.ckpt"), "--out", str(det),
        ]) == 0
        if tag == "a":
            assert main([
                "eval", "--scores", str(det / "scores.htds"),
                "--mask", str(scene / "mask.hsm"), "--out", str(root / "eval_a"),
            ]) == 0
            elapsed_first = time.monotonic() - started
    return {"root": root, "scene": scene, "elapsed_first": elapsed_first}


def test_end_to_end_detection(e2e):
    with open(e2e["root"] / "eval_a" / "auc.csv") as fh:
        rows = list(csv.reader(fh))
    rep = dict(zip(rows[0], map(float, rows[1])))

    cube = read_cube(e2e["scene"] / "cube.hsb")
    mask = read_mask(e2e["scene"] / "mask.hsm", cube)
    target = read_spectrum(e2e["scene"] / "target.txt", cube)
    flat = cube.values.reshape(-1, cube.bands).astype(np.float64)
    cos = flat @ target / (np.linalg.norm(flat, axis=1) * np.linalg.norm(target))
    baseline = auc_all(roc(cos, mask)).auc_pf_pd

    elapsed = e2e["elapsed_first"]
    ok = (
        rep["auc_pf_pd"] >= 0.95
        and rep["auc_snpr"] >= 10.0
        and rep["auc_pf_pd"] >= baseline
        and elapsed < 1200.0
    )
    assert report(
        "end-to-end-detection", ok,
        f"AUC {rep['auc_pf_pd']:.6f} (bounds: >= 0.95 and >= plain-cosine "
        f"baseline {baseline:.6f}), SNPR {rep['auc_snpr']:.2f} (bound 10), "
        f"{elapsed / 60:.1f} min (bound 20)",
    )


def test_end_to_end_replay_bit_identical(e2e):
    root = e2e["root"]
    loss_same = (root / "run_a" / "loss.csv").read_bytes() == (
        root / "run_b" / "loss.csv"
    ).read_bytes()
    scores_same = (root / "det_a" / "scores.htds").read_bytes() == (
        root / "det_b" / "scores.htds"
    ).read_bytes()
    ok = loss_same and scores_same
    assert report(
        "replay-bit-identical", ok,
        f"loss.csv identical: {loss_same}, score map identical: {scores_same}",
    )


# -- 9: augmentation contracts ---------------------------------------------------------


def test_augmentation_contracts():
    rng = np.random.default_rng(9)

    flat = np.broadcast_to(rng.uniform(0.1, 1.0, 12), (7, 7, 12)).copy()
    patch = extract_patch(flat, 3, 3, 5)
    identical_exact = bool(np.array_equal(sesa_view(patch), patch.center))

    worst_sum = 0.0
    hull_ok = True
    for _ in range(1000):
        cube = rng.uniform(-1.0, 2.0, (9, 9, 8))
        r, c = int(rng.integers(0, 9)), int(rng.integers(0, 9))
        p = extract_patch(cube, r, c, 5)
        w = sesa_weights(p)
        worst_sum = max(worst_sum, abs(float(w.sum()) - 1.0))
        view = sesa_view(p)
        hull_ok = hull_ok and bool(
            (view >= p.pixels.min(axis=0)).all() and (view <= p.pixels.max(axis=0)).all()
        )
    ok = identical_exact and worst_sum < 1e-12 and hull_ok
    assert report(
        "augmentation-contracts", ok,
        f"identical-patch exact: {identical_exact}, worst |sum(w)-1| "
        f"{worst_sum:.3e} (bound 1e-12) over 1000 patches, hull bound exact: {hull_ok}",
    )
