import json
import math

import numpy as np
import pytest

from cinegroup.anatomy import Contour
from cinegroup.evaluation import (bland_altman, dsc_metric, evaluate, hd, jacobian_stats, landmark_error, mcd,
                                  transfer_points)

import oracles


def random_polygon(rng, n):
    t = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = rng.uniform(3, 7, n)
    return np.column_stack([8 + r * np.cos(t), 8 + r * np.sin(t)])


# DSC

def test_dsc_cases():
    a = np.zeros((8, 8), np.uint8)
    a[:, :4] = 1
    b = np.zeros_like(a)
    b[:, 4:] = 1
    c = np.zeros_like(a)
    c[:, 2:6] = 1
    assert dsc_metric(a, a, 1) == 1.0
    assert dsc_metric(a, b, 1) == 0.0
    assert dsc_metric(a, c, "LV") == 0.5
    assert dsc_metric(a, b, 2) == 1.0  # both empty


def test_dsc_matches_set_oracle():
    rng = np.random.default_rng(0)
    for _ in range(25):
        a = rng.integers(0, 6, (16, 16))
        b = rng.integers(0, 6, (16, 16))
        for k in range(1, 6):
            assert dsc_metric(a, b, k) == oracles.dsc(a, b, k)


# contour distances

def test_parallel_segments():
    x = np.linspace(0, 100, 201)
    a = np.column_stack([x, np.zeros_like(x)])
    b = np.column_stack([x, np.full_like(x, 2.5)])
    assert mcd(a, b, closed=False) == pytest.approx(2.5, abs=1e-6)
    assert hd(a, b, closed=False) == pytest.approx(2.5, abs=1e-6)


def test_identical_contours():
    p = random_polygon(np.random.default_rng(1), 12)
    assert mcd(p, p) == 0.0
    assert hd(Contour(p), Contour(p)) == 0.0


def test_mcd_hd_match_dense_oracle():
    rng = np.random.default_rng(2)
    for _ in range(25):
        a = random_polygon(rng, rng.integers(5, 12))
        b = random_polygon(rng, rng.integers(5, 12))
        ref_mcd, ref_hd = oracles.contour_distances(a, b)
        assert mcd(a, b) == pytest.approx(ref_mcd, abs=1e-3)
        assert hd(a, b) == pytest.approx(ref_hd, abs=1e-3)
        assert hd(a, b) == hd(b, a)


def test_hd_outlier():
    t = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    a = np.column_stack([20 + 10 * np.cos(t), 20 + 10 * np.sin(t)])
    b = a.copy()
    b[7] = a[7] + 4.0 * np.array([np.cos(t[7]), np.sin(t[7])])  # pushed outward, so a[7] stays nearest
    assert hd(a, b) == pytest.approx(4.0, abs=1e-9)


def test_spacing_scales_distances():
    a = np.array([[0.0, 0.0], [10.0, 0.0]])
    b = a + [0.0, 1.0]
    assert mcd(a, b, spacing=(1.0, 2.0), closed=False) == pytest.approx(2.0)


def test_degenerate_contour():
    with pytest.raises(ValueError):
        mcd(np.zeros((1, 2)), np.zeros((3, 2)))


# landmarks

def test_landmarks_static_and_shift():
    lm = np.tile(np.array([[5.0, 5.0], [9.0, 5.0], [5.0, 12.0], [10.0, 11.0]]), (3, 1, 1))
    assert np.all(landmark_error(lm, np.zeros((3, 20, 20, 2))) == 0)
    fields = np.zeros((3, 20, 20, 2))
    fields[1:, ..., 0] = 2.0
    moved = lm.copy()
    moved[1:, :, 0] += 2.0
    assert landmark_error(moved, fields) == pytest.approx(np.zeros((3, 4)), abs=1e-8)


def test_landmarks_phantom(small_phantom):
    ph = small_phantom
    err = landmark_error(ph.landmarks, ph.fields.fields, ph.ed_index)
    assert err.mean() < 0.5
    assert err[ph.ed_index].max() < 1e-3  # inversion tolerance only


def test_transfer_clamps_with_warning(caplog):
    fields = np.zeros((2, 10, 10, 2))
    fields[1, ..., 0] = -5.0
    lm = np.tile([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]], (2, 1, 1))
    landmark_error(lm, fields)
    assert "outside the image" in caplog.text
    assert transfer_points([[1.0, 1.0]], fields, 0, 1)[0, 0] == pytest.approx(-4.0)


# Jacobian

def test_jacobian_stats_zero_and_fold():
    assert jacobian_stats(np.zeros((2, 8, 8, 2))) == (0.0, 0.0)
    f = np.zeros((1, 10, 10, 2))
    xs = np.arange(10.0)
    f[0, 3:5, :, 0] = -2 * xs  # det = -1 in these two rows
    std, frac = jacobian_stats(f)
    assert frac == pytest.approx(20 / 100)
    assert std > 0


# Bland-Altman

def test_bland_altman_closed_form():
    assert bland_altman([1.0, 2.0], [1.0, 2.0]) == (0.0, 0.0, 0.0)
    bias, lo, hi = bland_altman([1.0, 3.0], [0.0, 0.0])
    assert bias == 2.0
    assert lo == pytest.approx(2 - 1.96 * math.sqrt(2))
    assert hi == pytest.approx(2 + 1.96 * math.sqrt(2))


def test_bland_altman_oracle():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=30), rng.normal(size=30)
    d = [a - b for a, b in zip(x, y)]
    m = sum(d) / len(d)
    sd = math.sqrt(sum((v - m) ** 2 for v in d) / (len(d) - 1))
    for got, ref in zip(bland_altman(x, y), (m, m - 1.96 * sd, m + 1.96 * sd)):
        assert got == pytest.approx(ref, abs=1e-10)
    with pytest.raises(ValueError):
        bland_altman([1.0], [2.0])


# report

def test_report_on_identical_masks(tmp_path, small_phantom):
    ph = small_phantom
    r = evaluate(ph.masks.labels, ph.masks.labels, fields=ph.fields.fields, landmarks=ph.landmarks,
                 reference_frame=ph.ed_index, es_index=ph.es_index)
    for name, m in r.structures.items():
        assert np.all(np.asarray(m["dsc"]) == 1.0)
        assert np.all(np.asarray(m["mcd"]) == 0.0) and np.all(np.asarray(m["hd"]) == 0.0)
    assert r.folding_fraction == 0.0
    r.write_csv(tmp_path / "m.csv")
    r.write_json(tmp_path / "m.json")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "kind,name,metric,frames,mean,std"
    assert "structure,LV,dsc,es,1,0" in lines
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["es_index"] == ph.es_index and len(doc["landmarks"]["mitral_a"]) == 8
