"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with ``pytest -s`` to see them on passing runs)."""

import functools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from dsga import fileio
from dsga.adapter import (
    DsgaConfig,
    adaptive_k,
    build_graph,
    dsga_forward,
    init_dsga_params,
    init_rank_weights,
    rank_weights,
)
from dsga.cli import main
from dsga.config import PipelineConfig
from dsga.lora import LoraLayer, init_lora_layer, lora_apply
from dsga.losses import (
    LossWeights,
    boundary_loss,
    dice_loss,
    ema_update,
    focal_loss,
    signed_distance,
)
from dsga.metrics import DetectionSet, ap50, e_measure, evaluate_saliency, f_beta
from dsga.pipeline import audit_params, gradcheck_all
from dsga.prompts import (
    PromptConfig,
    ScoredInstance,
    dedup_instances,
    generate_prompts,
    grid_saliency,
    mask_iou,
)


def criterion(number, title):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"criterion {number} ({title}): FAIL")
                raise
            print(f"criterion {number} ({title}): PASS")

        return run

    return wrap


@criterion(1, "parameter audit")
def test_parameter_audit():
    start = time.perf_counter()
    report = audit_params(PipelineConfig())
    elapsed = time.perf_counter() - start
    assert report.dsga_params == 3_992_964
    assert abs(report.dsga_params / 1e6 - 4.00) / 4.00 <= 0.003
    assert report.dsga_matches_reference
    assert report.lora_params == 294_912
    assert report.lora_reference_discrepancy  # 0.33M reference does not match
    assert report.total_trainable == 4_287_876
    assert elapsed < 1.0


@criterion(2, "gradient suite")
def test_gradient_suite():
    start = time.perf_counter()
    results = gradcheck_all(seed=0, instances=10)
    elapsed = time.perf_counter() - start
    assert {r.op for r in results} == {"dsga_vjp", "lora_vjp", "loss_grads"}
    for r in results:
        assert r.instances == 10
        assert r.max_rel_err <= 1e-4, (r.op, r.max_rel_err)
    assert elapsed < 30.0


@criterion(3, "graph properties")
def test_graph_properties():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    weights = rank_weights(init_rank_weights(8, 2.0))
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        k = int(rng.integers(1, 9))
        s = np.tanh(rng.standard_normal((1, n, n)))
        s = (s + s.transpose(0, 2, 1)) / 2.0
        graph = build_graph(s, k, weights)
        dense = graph.to_dense()
        assert np.abs(dense.sum(axis=-1) - 1.0).max() <= 1e-6
        if graph.k > 1:
            ranked = np.take_along_axis(s[0], graph.neighbors[0], axis=1)
            assert np.all(np.diff(ranked, axis=1) < 0)  # strictly rank-ordered
    assert adaptive_k(np.log(4.0), 8) == 6
    assert time.perf_counter() - start < 10.0


@criterion(4, "residual identity")
def test_residual_identity():
    rng = np.random.default_rng(99)
    for trial in range(100):
        d = int(rng.integers(4, 17))
        cfg = DsgaConfig(
            embed_dim=d,
            k_max=int(rng.integers(1, 5)),
            dropout_prob=0.1,
            mode="eval",
            seed=trial,
        )
        params = init_dsga_params(cfg, precision="single" if trial % 2 else "double")
        params.up_w = np.zeros_like(params.up_w)
        params.up_b = np.zeros_like(params.up_b)
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), d)
        x = rng.standard_normal(shape)
        if trial % 2:
            x = x.astype(np.float32)
        out, _ = dsga_forward(x, params, cfg)
        assert out.dtype == x.dtype
        assert np.array_equal(out, x)


@criterion(5, "low-rank identity and equivalence")
def test_lora_identity_and_equivalence():
    rng = np.random.default_rng(123)
    for trial in range(100):
        d = int(rng.integers(2, 12))
        k_dim = int(rng.integers(2, 12))
        r = int(rng.integers(1, min(d, k_dim) + 1))
        x = rng.standard_normal((4, k_dim)).astype(np.float32)

        fresh = init_lora_layer(
            rng.standard_normal((d, k_dim)).astype(np.float32), rank=r, seed=trial
        )
        assert np.array_equal(lora_apply(fresh, x), x @ fresh.w0.T)

        layer = LoraLayer(
            w0=fresh.w0,
            a=(0.2 * rng.standard_normal((r, k_dim))).astype(np.float32),
            b=(0.2 * rng.standard_normal((d, r))).astype(np.float32),
            rank=r,
            alpha=float(rng.uniform(0.5, 2.0) * r),
        )
        factored = lora_apply(layer, x)
        dense = layer.w0 + layer.scaling * (layer.b @ layer.a)
        materialized = x @ dense.T
        rel = np.abs(factored - materialized).max() / max(np.abs(materialized).max(), 1e-12)
        assert rel <= 1e-5


@criterion(6, "prompt and dedup properties")
def test_prompt_dedup_properties():
    rng = np.random.default_rng(7)
    cfg = PromptConfig(grid_size=8, saliency_threshold=0.05, n_min=2, n_max=12)
    for _ in range(500):
        mask = np.zeros((40, 40), bool)
        for _ in range(int(rng.integers(1, 5))):
            h, w = int(rng.integers(3, 12)), int(rng.integers(3, 12))
            y, x = int(rng.integers(0, 40 - h)), int(rng.integers(0, 40 - w))
            mask[y : y + h, x : x + w] = True
        prompts = generate_prompts(mask, cfg)
        nonzero = int((grid_saliency(mask, cfg.grid_size) > 0).sum())
        assert min(cfg.n_min, nonzero) <= len(prompts) <= cfg.n_max

        candidates = []
        for p in prompts:
            m = mask.copy()
            if rng.random() < 0.5:  # near-duplicate: clip the topmost row
                ys = np.nonzero(m)[0]
                m[ys[0], :] = False
            if m.any():
                candidates.append(ScoredInstance(mask=m, score=float(rng.random())))
        kept = dedup_instances(candidates, tau_o=0.75)
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert mask_iou(kept[i].mask, kept[j].mask) <= 0.75

    # ranked hit/miss/hit fixture: precisions (1, 1/2, 2/3), recalls (.5, .5, 1)
    def block(y, x):
        m = np.zeros((12, 12), bool)
        m[y : y + 3, x : x + 3] = True
        return m

    g1, g2 = block(0, 0), block(8, 8)
    preds = [
        ScoredInstance(mask=g1, score=0.9),
        ScoredInstance(mask=block(4, 4), score=0.8),
        ScoredInstance(mask=g2, score=0.7),
    ]
    ap, _ = ap50(DetectionSet(preds, [g1, g2]))
    assert abs(ap - 5.0 / 6.0) <= 1e-9


@criterion(7, "loss fixtures")
def test_loss_fixtures():
    gt = np.zeros((4, 4), bool)
    gt[:, :2] = True
    assert dice_loss(gt.astype(float), gt, smooth=1.0) == 0.0

    rng = np.random.default_rng(31)
    pred = rng.uniform(0.05, 0.95, (6, 6))
    gt2 = rng.random((6, 6)) < 0.5
    bce = float(np.mean(np.where(gt2, -np.log(pred), -np.log(1.0 - pred))))
    assert abs(focal_loss(pred, gt2, gamma=0.0, alpha_bal=0.5) - 0.5 * bce) <= 1e-9

    strip = np.array([[0, 1, 0]], dtype=bool)
    assert boundary_loss(strip.astype(float), signed_distance(strip)) == -1.0 / 3.0

    beta = 0.9
    c = np.array([0.25, 1.5, 0.75])
    weights = LossWeights(ema_beta=beta)
    lam0 = np.array(weights.lams)
    for k in range(1, 1001):
        weights = ema_update(weights, tuple(c))
        closed_form = beta**k * lam0 + (1.0 - beta**k) * c
        assert np.abs(np.array(weights.lams) - closed_form).max() <= 1e-12


@criterion(8, "metric fixpoints")
def test_metric_fixpoints():
    gt = np.zeros((8, 8), bool)
    gt[2:6, 1:7] = True
    report = evaluate_saliency(gt.astype(float), gt)
    assert abs(report.s_measure - 1.0) <= 1e-6
    assert report.f_max == 1.0
    assert abs(report.e_max - 1.0) <= 1e-6
    assert report.mae == 0.0

    rng = np.random.default_rng(41)
    from dsga.metrics import threshold_sweep

    for _ in range(100):
        sal = np.round(rng.random((8, 8)) * 255) / 255.0
        gtb = rng.random((8, 8)) < 0.5
        curve = threshold_sweep(sal, gtb)
        for i in range(256):
            binar = sal > i / 255.0
            inter = int(np.logical_and(binar, gtb).sum())
            np_, ng = int(binar.sum()), int(gtb.sum())
            p = (1.0 if ng == 0 else 0.0) if np_ == 0 else inter / np_
            r = 1.0 if ng == 0 else inter / ng
            assert curve[i, 0] == p and curve[i, 1] == r
            den = 0.3 * p + r
            assert curve[i, 2] == (0.0 if den == 0 else 1.3 * p * r / den)
            assert abs(curve[i, 3] - e_measure(binar, gtb)) == 0.0

    assert f_beta(1.0, 0.5, beta_sq=0.3) == 0.8125


@criterion(9, "demo determinism")
def test_demo_determinism(tmp_path, capsys):
    assert main(["demo", "--seed", "7", "--out", str(tmp_path / "run1")]) == 0
    assert main(["demo", "--seed", "7", "--out", str(tmp_path / "run2")]) == 0
    capsys.readouterr()

    files1 = sorted(p.relative_to(tmp_path / "run1") for p in (tmp_path / "run1").rglob("*"))
    files2 = sorted(p.relative_to(tmp_path / "run2") for p in (tmp_path / "run2").rglob("*"))
    assert files1 == files2 and files1
    for rel in files1:
        a, b = tmp_path / "run1" / rel, tmp_path / "run2" / rel
        if a.is_file():
            assert a.read_bytes() == b.read_bytes(), rel
