"""Acceptance gate: one or more tests per criterion, summarised at the end of the run."""

import csv
import json
import math
import time

import numpy as np
import pytest
import torch

from sarfusion import cli, encoders, geosample, synthgen
from sarfusion.config import from_dict
from sarfusion.data_model import compute_band_stats
from sarfusion.finetune_eval import EvalReport, FinetuneConfig, confusion_matrix, finetune_run, iou_per_class
from sarfusion.nn_backend import grad_check
from sarfusion.pretrain import (
    CurriculumSchedule,
    PretrainConfig,
    kl_divergence,
    load_normalized,
    pretrain_run,
    triplet_distances,
    triplet_loss,
)
from test_encoders import HEADER_LAYERS, RESNET18_LAYERS, RESNET34_LAYERS
from test_finetune_eval import oracle_metrics
from test_geosample import brute_edges
from test_nn_backend import _block_cases
from test_pretrain import objective_checks

acceptance = pytest.mark.acceptance


@acceptance(1, "parameter counts exact")
def test_parameter_totals():
    totals = {"resnet18": 11_211_008, "resnet34": 21_319_168, "resnet18attn": 11_621_570}
    sums = {"resnet18": 13_477_639, "resnet34": 23_585_799, "resnet18attn": 13_888_201}
    header = encoders.count_parameters(encoders.build_deconv_header(7))
    assert header == 2_266_631
    for v, n in totals.items():
        assert encoders.count_parameters(encoders.build_encoder(v)) == n
        assert n + header == sums[v] == cli.header_plus_encoder_params(v, 7)
    assert encoders.count_parameters(encoders.build_attn_block(256)) == 82_241
    assert encoders.count_parameters(encoders.build_attn_block(512)) == 328_321


@acceptance(2, "per-layer counts (corrected where the printed tables do not reconcile)")
def test_per_layer_counts():
    assert encoders.layer_parameter_counts(encoders.build_encoder("resnet18")) == RESNET18_LAYERS
    assert encoders.layer_parameter_counts(encoders.build_encoder("resnet34")) == RESNET34_LAYERS
    attn = encoders.layer_parameter_counts(encoders.build_encoder("resnet18attn"))
    assert attn == {**RESNET18_LAYERS, "attn1": 82_241, "attn2": 328_321}
    assert encoders.layer_parameter_counts(encoders.build_deconv_header(7)) == HEADER_LAYERS
    assert RESNET18_LAYERS["layer1"] == 147_968


@acceptance(3, "gradient checks for every block and objective at 32x32, under 5 min")
def test_gradient_checks():
    t0 = time.perf_counter()
    failures = []
    for train_mode in (True, False):
        for name, m, x in _block_cases(0):
            m.train()
            m(x)
            m.train(train_mode)
            w = torch.randn(m(x).shape, generator=torch.Generator().manual_seed(100))
            r = grad_check(lambda t: (m(t) * w).sum(), x, eps=1e-3, tol=2e-2)
            assert x.dtype == torch.float32
            if not r.passed:
                failures.append(f"{name}/train={train_mode}: {r.message}")
    for name, r in objective_checks(0).items():
        if not r.passed:
            failures.append(f"{name}: {r.message}")
    assert not failures, failures
    assert time.perf_counter() - t0 < 300


@acceptance(4, "loss properties")
def test_loss_properties():
    g = torch.Generator().manual_seed(4)
    za, zn, zd = (torch.randn(10_000, 32, generator=g) for _ in range(3))
    dp = torch.linalg.vector_norm(za - zn, dim=1)
    dn = torch.linalg.vector_norm(za - zd, dim=1)
    per = [triplet_loss(za[i : i + 1], zn[i : i + 1], zd[i : i + 1]).item() for i in range(10_000)]
    assert min(per) >= 0
    gap = (dn - dp) >= 1.0
    assert gap.any() and all(per[i] == 0.0 for i in torch.nonzero(gap).ravel().tolist())
    assert kl_divergence(torch.zeros(4, 8), torch.zeros(4, 8)).item() == 0.0
    assert kl_divergence(torch.ones(1, 1), torch.zeros(1, 1)).item() == pytest.approx(0.5)
    assert kl_divergence(torch.randn(64, 16, generator=g), torch.randn(64, 16, generator=g)).item() >= 0
    s = CurriculumSchedule()
    assert [s.intensity(e) for e in (0, 4, 5, 14, 15, 20)] == pytest.approx([0, 0, 0.1, 1.0, 1.0, 1.0])


@acceptance(5, "metric oracle equivalence")
def test_metric_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        truth, pred = rng.integers(0, 6, (16, 16)), rng.integers(1, 6, (16, 16))
        cm, iou, wm = oracle_metrics(pred, truth)
        rep = EvalReport.from_confusion(confusion_matrix(pred, truth))
        assert np.array_equal(rep.confusion, cm)
        assert np.array_equal(rep.iou, iou, equal_nan=True)
        assert rep.weighted_miou == wm or (math.isnan(wm) and math.isnan(rep.weighted_miou))
    assert iou_per_class([[3, 1], [2, 4]]).tolist() == [0.5, 4 / 7]


@acceptance(6, "attention gate closed equals plain topology")
def test_attention_gate():
    attn = encoders.build_encoder("resnet18attn", seed=6).eval()
    plain = encoders.Encoder("resnet18").eval()
    plain.load_state_dict(attn.state_dict(), strict=False)
    x = torch.randn(2, 14, 128, 128, generator=torch.Generator().manual_seed(6))
    with torch.no_grad():
        assert (attn(x) - plain(x)).abs().max().item() <= 1e-5


@acceptance(7, "geospatial oracles")
def test_geospatial():
    pts = np.vstack([geosample.sample_sphere_uniform(7, 500), geosample.sample_clustered(8, 500, 20, 1.0)])
    assert geosample.build_neighbor_graph(pts).edges() == brute_edges(pts)
    assert abs(geosample.haversine_km((0, 0), (0, 1)) - 111.195) <= 0.001
    assert abs(geosample.haversine_km((0, 0), (180, 0)) - 20015.087) <= 0.01
    deg = lambda km: km / (geosample.EARTH_RADIUS_KM * math.pi / 180)  # noqa: E731
    g = geosample.build_neighbor_graph([(0, 0), (deg(5), 0), (deg(20), 0), (deg(60), 0), (90, 0), (0, 60)])
    p = geosample.neighbor_probabilities(g.neighbor_km(0), 25.0)
    n = 20_000
    picks = np.array([geosample.draw_triplet(g, 0, [77, s], 25.0).neighbor for s in range(n)])
    freq = np.array([np.mean(picks == j) for j in g.neighbor_ids(0)])
    assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n))


SMOKE_SECONDS = []  # criterion 8 budget is 20 CPU minutes across its three tests


@pytest.fixture
def smoke_clock():
    t0 = time.process_time()
    yield
    SMOKE_SECONDS.append(time.process_time() - t0)
    assert sum(SMOKE_SECONDS) < 20 * 60


@pytest.fixture(scope="module")
def smoke_data(tmp_path_factory):
    t0 = time.process_time()
    root = tmp_path_factory.mktemp("smoke")
    cfg = synthgen.SynthConfig(seed=0, n_samples=64, patch_size=128)
    m = synthgen.generate_dataset(cfg, geosample.sample_clustered(0, 64, 8), root / "data")
    SMOKE_SECONDS.append(time.process_time() - t0)
    return m, geosample.build_neighbor_graph(m.locations), compute_band_stats(m), root


@acceptance(8, "learning smoke tests, under 20 CPU min")
def test_smoke_vae(smoke_data, smoke_clock):
    m, _, stats, root = smoke_data
    r = pretrain_run(PretrainConfig(objective="vae", epochs=3, batch_size=16), m, None, root / "vae", stats)
    loss = [h["loss"] for h in r.history]
    print("vae epoch losses", loss)
    assert loss[2] < loss[0]


@acceptance(8, "learning smoke tests, under 20 CPU min")
def test_smoke_t2v(smoke_data, smoke_clock):
    m, g, stats, root = smoke_data
    r = pretrain_run(PretrainConfig(objective="t2v", epochs=3, batch_size=16), m, g, root / "t2v", stats)
    draws = [geosample.draw_triplet(g, int(a), [99, int(a)]) for a in g.anchors()]
    pos, neg = triplet_distances(r.encoder, load_normalized(m, stats, 128), draws)
    print(f"t2v mean distances pos={pos:.3f} neg={neg:.3f}")
    assert pos < neg


@acceptance(8, "learning smoke tests, under 20 CPU min")
def test_smoke_overfit(tmp_path, smoke_clock):
    # clean labels and clear skies: the point is capacity, not robustness
    cfg = synthgen.SynthConfig(seed=0, n_samples=8, patch_size=128, label_noise=0.0,
                               cloud_fraction=0.0, regional_strength=0.0)
    m = synthgen.generate_dataset(cfg, geosample.sample_clustered(0, 8, 2), tmp_path / "data")
    ft = FinetuneConfig(epochs=50, batch_size=8, lr=5e-4, split_mode="train_all")
    r = finetune_run(None, m, ft, tmp_path / "ft")
    print("overfit weighted mIoU", r.report.weighted_miou)
    assert r.report.weighted_miou >= 0.95


TINY = {
    "synth": {"n_samples": 10, "patch_size": 32, "seed": 3},
    "pretrain": {"epochs": 1, "batch_size": 5, "input_size": 32},
    "finetune": {"epochs": 1, "batch_size": 4, "input_size": 32},
}


def tiny_config(tmp_path, **sections):
    d = json.loads(json.dumps(TINY))
    d["data"] = {"root": str(tmp_path / "data")}
    for sec, vals in sections.items():
        d.setdefault(sec, {}).update(vals)
    return from_dict(d).with_overrides(deterministic=True)


@acceptance(9, "bit-identical reruns in deterministic mode")
def test_reproducibility(tmp_path):
    cfg = tiny_config(tmp_path)
    cli.cmd_synth(cfg)
    for objective in ("vae", "t2v", "csf"):
        c = tiny_config(tmp_path, pretrain={"objective": objective})
        outputs = []
        for rep in ("a", "b"):
            out = tmp_path / objective / rep
            cli.cmd_pretrain(c, out)
            cli.cmd_finetune(c, out)
            cli.cmd_evaluate(c, out)
            outputs.append([(out / f).read_bytes() for f in (
                "pretrain/pretrain_metrics.csv", "finetune/finetune_metrics.csv",
                "finetune/eval_report.json", "evaluate/eval_report.json")])
        assert outputs[0] == outputs[1], objective


@acceptance(10, "grid table complete and resumable")
def test_grid_resume(tmp_path):
    cli.cmd_synth(tiny_config(tmp_path))
    out = tmp_path / "grid"
    first = cli.cmd_grid(tiny_config(tmp_path, grid={"max_cells": 5}), out)
    assert len(first["executed"]) == 5 and not first["complete"]
    done = [cli.cell_dir(out, *c.split("/")) for c in first["executed"]]
    before = {d: (d / "finetune" / "eval_report.json").read_bytes() for d in done[:4]}
    # an interrupted cell has outputs but no completion marker
    (done[4] / cli.DONE_MARKER).unlink()
    second = cli.cmd_grid(tiny_config(tmp_path), out)
    assert len(second["executed"]) == 8 and len(second["skipped"]) == 4 and second["complete"]
    assert first["executed"][4] in second["executed"]
    assert all((d / "finetune" / "eval_report.json").read_bytes() == b for d, b in before.items())

    rows = list(csv.reader(second["grid_table"].open()))
    assert rows[0] == ["pretrain", "resnet18", "resnet34", "resnet18attn"]
    assert rows[1] == ["parameters", "13477639", "23585799", "13888201"]
    assert [r[0] for r in rows[2:]] == ["none", "vae", "t2v", "csf"]
    for r in rows[2:]:
        for enc, v in zip(rows[0][1:], r[1:]):
            rep = json.loads((cli.cell_dir(out, r[0], enc) / "finetune" / "eval_report.json").read_text())
            assert v != "" and float(v) == rep["weighted_miou"]
    third = cli.cmd_grid(tiny_config(tmp_path), out)
    assert third["executed"] == [] and len(third["skipped"]) == 12
