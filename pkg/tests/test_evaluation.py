import math

import numpy as np
import pytest
import torch
from torch import nn

from ssae import oracles
from ssae.data import PRESETS, make_synthetic_texture_set
from ssae.evaluation import (
    ConfusionCounts,
    EvaluationError,
    MetricsReport,
    MetricsRow,
    auroc,
    calibrate_threshold,
    confusion,
    evaluate_category,
    f1,
    pixel_auroc,
)
from ssae.inference import AnomalyHeatmap, DetectionResult, PostprocessConfig, largest_component
from ssae.model import ModelConfig


def _brute_force_threshold(maps, min_area):
    cands = sorted(set(np.concatenate([m.ravel() for m in maps]).tolist()))
    cands.append(np.nextafter(cands[-1], np.inf))
    for t in cands:
        if all(max((len(c) for c in oracles.oracle_components((m >= t).tolist())), default=0) < min_area for m in maps):
            return t
    raise AssertionError


def test_calibrate_all_zero_maps():
    t = calibrate_threshold([np.zeros((8, 8))], 5)
    assert t > 0 and t == np.nextafter(0.0, 1.0)


def test_calibrate_plateau():
    v = np.zeros((8, 8))
    v[2, 0:5] = 0.8
    v[3, 0:5] = 0.8
    t = calibrate_threshold([v], 5)
    assert t == _brute_force_threshold([v], 5)
    assert t == np.nextafter(0.8, np.inf)


def test_calibrate_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(30):
        maps = [np.round(rng.random((10, 10)), 2) for _ in range(2)]
        min_area = int(rng.integers(1, 12))
        t = calibrate_threshold(maps, min_area)
        assert t == _brute_force_threshold(maps, min_area)
        assert all(largest_component(m >= t) < min_area for m in maps)


def test_calibrate_monotone_in_min_area():
    rng = np.random.default_rng(1)
    maps = [rng.random((12, 12)) for _ in range(3)]
    ts = [calibrate_threshold(maps, a) for a in (1, 2, 4, 8, 16, 32)]
    assert all(a >= b for a, b in zip(ts, ts[1:]))


def test_calibrate_empty():
    with pytest.raises(EvaluationError):
        calibrate_threshold([], 4)


def _res(flag, mask=None):
    mask = np.zeros((2, 2), bool) if mask is None else mask
    return DetectionResult(mask, [], flag, 0.0)


def test_confusion_image_perfect():
    c = confusion([_res(True), _res(False)], [True, False])
    assert c.fp == 0 and c.fn == 0 and c.tp == 1 and c.tn == 1


def test_rates_arithmetic():
    c = ConfusionCounts(tp=3, fn=1, tn=4, fp=1)
    assert c.tpr == 0.75 and c.tnr == 0.8 and c.balanced == pytest.approx(0.775)


def test_all_negative_predictor():
    c = confusion([_res(False)] * 4, [True, True, False, False])
    assert c.tpr == 0 and c.tnr == 1 and c.balanced == 0.5


def test_confusion_pixel_pooled():
    pred = np.array([[True, False], [True, False]])
    gt = np.array([[True, True], [False, False]])
    c = confusion([_res(True, pred), _res(False)], [gt, None], "pixel")
    assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 5)


def test_confusion_length_mismatch():
    with pytest.raises(EvaluationError):
        confusion([_res(True)], [True, False])


@pytest.mark.parametrize("counts,expected", [((5, 0, 0), 1.0), ((1, 1, 1), 0.5), ((0, 3, 2), 0.0)])
def test_f1(counts, expected):
    tp, fp, fn = counts
    assert f1(ConfusionCounts(tp=tp, fp=fp, fn=fn)) == expected


def test_f1_degenerate():
    c = ConfusionCounts(tn=10)
    assert not c.f1_defined and f1(c) == 0.0


def test_auroc_perfect_and_ties():
    assert auroc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert auroc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5


def test_auroc_six_pixel_toy():
    scores = [0.9, 0.8, 0.4, 0.7, 0.3, 0.1]
    labels = [1, 1, 1, 0, 0, 0]
    assert oracles.oracle_auroc(scores, labels) == pytest.approx(8 / 9, abs=1e-15)
    assert auroc(scores, labels) == pytest.approx(8 / 9, abs=1e-12)


def test_auroc_matches_pairwise_oracle():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(2, 200))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        labels = rng.random(n) < 0.3
        labels[0], labels[1] = True, False
        assert abs(auroc(scores, labels) - oracles.oracle_auroc(scores.tolist(), labels.tolist())) <= 1e-12


def test_auroc_invariant_to_monotone_transform():
    rng = np.random.default_rng(4)
    s = rng.random(300)
    y = rng.random(300) < 0.4
    assert auroc(np.exp(3 * s) - 7, y) == auroc(s, y)


def test_auroc_single_class():
    with pytest.raises(EvaluationError):
        auroc([0.1, 0.2], [0, 0])


def test_pixel_auroc_pools_maps():
    h1 = AnomalyHeatmap(np.array([[0.9, 0.1]]))
    h2 = AnomalyHeatmap(np.array([[0.2, 0.3]]))
    got = pixel_auroc([h1, h2], [np.array([[1, 0]]), None])
    assert got == oracles.oracle_auroc([0.9, 0.1, 0.2, 0.3], [1, 0, 0, 0])


def test_random_predictor_balanced_accuracy():
    rng = np.random.default_rng(5)
    truth = rng.random(10_000) < 0.5
    flags = rng.random(10_000) < 0.5
    c = confusion([_res(bool(f)) for f in flags], truth.tolist())
    assert abs(c.balanced - 0.5) < 0.02


def test_report_averages_and_csv():
    rows = [
        MetricsRow("a", 1.0, 0.5, 0.75, 0.9, 0.8, 0.4, 0.1, 16),
        MetricsRow("b", 0.5, 1.0, 0.75, 0.7, 0.6, 0.2, 0.2, 16),
    ]
    rep = MetricsReport(rows)
    avg = rep.averages()
    assert avg["tpr"] == 0.75 and avg["pixel_auroc"] == pytest.approx(0.8)
    csv_text = rep.to_csv()
    lines = csv_text.strip().split("\n")
    assert lines[0].startswith("category,tpr,tnr") and len(lines) == 4
    assert "average" in rep.to_text()


class _Identity(nn.Module):
    def __init__(self, side):
        super().__init__()
        self.config = ModelConfig(side=side, width=1)
        self.forward_calls = 0

    def forward(self, x):
        self.forward_calls += 1
        return x


def test_identity_model_baseline(tmp_path):
    idx = make_synthetic_texture_set(PRESETS["stripes"], 10, 6, tmp_path, seed=0)
    ev = evaluate_category(_Identity(128), idx, PostprocessConfig.for_side(128, min_area=16))
    assert ev.row.pixel_auroc == 0.5
    assert not any(r.anomalous for r in ev.results)
    assert ev.row.tpr == 0 and ev.row.tnr == 1
