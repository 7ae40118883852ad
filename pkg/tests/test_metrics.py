import csv
import json
import math

import numpy as np
import pytest

from ttnet.field import PlaneWaveSource, ShCoeffSet, plane_wave_coeffs, plane_wave_pressure
from ttnet.metrics import (
    REPORT_COLUMNS,
    SDR_CAP_DB,
    DiskSpec,
    FieldGrid,
    PlaneSpec,
    coss,
    edm,
    evaluate_suite,
    field_grid,
    item_metrics,
    sdr,
    sdr_from_fields,
    write_reports,
)

from oracles import naive_coss, naive_edm, naive_sdr


def _rand(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


# ---------------------------------------------------------------- EDM / COSS

def test_edm_examples(rng):
    a = _rand(rng, (3, 9))
    assert edm(a, a) == 0
    b = a.copy()
    b[1, 4] += 2 - 1j
    assert edm(b, a) == pytest.approx(5 / 27, abs=1e-15)
    with pytest.raises(ValueError):
        edm(a, a[:, :4])


def test_coss_examples(rng):
    a = _rand(rng, (3, 9))
    assert coss(a, a) == pytest.approx(1.0)
    assert coss(-a, a) == pytest.approx(-1.0)
    assert coss(2 * a, a) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        coss(np.zeros((3, 9)), a)


def test_metrics_against_loops(rng):
    for _ in range(100):
        a, b = _rand(rng, (4, 9)), _rand(rng, (4, 9))
        assert abs(edm(a, b) - naive_edm(a, b)) < 1e-12
        assert abs(coss(a, b) - naive_coss(a, b)) < 1e-12


def test_coss_joint_real_scaling(rng):
    a, b = _rand(rng, (2, 4)), _rand(rng, (2, 4))
    assert coss(3.7 * a, 3.7 * b) == pytest.approx(coss(a, b), abs=1e-14)


def test_metrics_accept_coeff_sets(rng):
    a = ShCoeffSet((0, 0, 0), 1, [100.0, 200.0], _rand(rng, (2, 4)))
    assert edm(a, a) == 0 and coss(a, a) == pytest.approx(1.0)


# ---------------------------------------------------------------- regions

def test_disk_node_count():
    nodes = DiskSpec().nodes()
    assert len(nodes) == 7845
    assert np.all(np.linalg.norm(nodes, axis=1) <= 1.0 + 1e-12)
    assert np.all(nodes[:, 2] == 0)


def test_disk_count_lattice_oracle():
    count = sum(1 for i in range(-50, 51) for j in range(-50, 51) if i * i + j * j <= 2500)
    assert count == len(DiskSpec(1.0, 0.02).nodes())


def test_ball_option():
    nodes = DiskSpec(0.1, 0.02, ball=True).nodes()
    count = sum(1 for i in range(-5, 6) for j in range(-5, 6) for k in range(-5, 6) if i * i + j * j + k * k <= 25)
    assert len(nodes) == count


def test_plane_spec_grid():
    spec = PlaneSpec(2.0, 0.02)
    assert spec.shape() == (101, 101)
    nodes = spec.nodes()
    assert nodes.shape == (101 * 101, 3)
    assert nodes[:, 0].min() == -1.0 and nodes[:, 1].max() == 1.0
    assert np.all(nodes[:, 2] == 0)
    xz = PlaneSpec(1.0, 0.5, axes="xz", offset=0.3).nodes()
    assert np.all(xz[:, 1] == 0.3)


# ---------------------------------------------------------------- grids

def test_constant_mode_grid_is_flat_near_origin():
    coeffs = ShCoeffSet((0, 0, 0), 0, [50.0], [[math.sqrt(4 * math.pi)]])
    grid = field_grid(coeffs, 0, PlaneSpec(0.02, 0.01))
    np.testing.assert_allclose(grid.pressure, 1.0, atol=1e-4)


@pytest.mark.parametrize("n_max,radius", [(28, 1.0), (20, 0.7)])
def test_plane_wave_grid_matches_exponential(n_max, radius):
    # order 20 reaches 1e-3 only out to kr ~ 13 at 1 kHz; the full 1 m disk needs ~kr + 10
    src = PlaneWaveSource.from_arrival(30.0, 10.0, 0.8)
    k = 2 * np.pi * 1000 / 343.0
    coeffs = ShCoeffSet((0, 0, 0), n_max, [1000.0], plane_wave_coeffs(src, k, (0, 0, 0), n_max))
    grid = field_grid(coeffs, 0, PlaneSpec())
    inside = np.linalg.norm(grid.nodes, axis=1) <= radius
    want = plane_wave_pressure(src, k, grid.nodes[inside])
    assert np.max(np.abs(grid.pressure[inside] - want) / np.abs(want)) < 1e-3


def test_grid_csv(tmp_path):
    coeffs = ShCoeffSet((0, 0, 0), 0, [100.0], [[1.0]])
    grid = field_grid(coeffs, 0, PlaneSpec(1.0, 0.5))
    path = tmp_path / "g.csv"
    grid.to_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["x", "y", "re", "im"] and len(rows) == 10
    with pytest.raises(ValueError):
        FieldGrid(PlaneSpec(), 100.0, np.zeros((2, 3)), np.zeros(3))


# ---------------------------------------------------------------- SDR

def _field_pair(rng, n_max=3):
    ref = ShCoeffSet((0, 0, 0), n_max, [300.0, 600.0], _rand(rng, (2, (n_max + 1) ** 2)))
    est = ShCoeffSet((0, 0, 0), n_max, [300.0, 600.0], ref.data + 0.3 * _rand(rng, ref.data.shape))
    return est, ref


def test_sdr_examples(rng):
    est, ref = _field_pair(rng)
    assert sdr(ref, ref, 0) == SDR_CAP_DB
    zero = ShCoeffSet((0, 0, 0), ref.n_max, ref.freqs, np.zeros_like(ref.data))
    assert sdr(zero, ref, 1) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        sdr(ref, zero, 0)


def test_sdr_scaling_law(rng):
    est, ref = _field_pair(rng)
    half = ShCoeffSet((0, 0, 0), ref.n_max, ref.freqs, ref.data + 0.5 * (est.data - ref.data))
    assert sdr(half, ref, 0) - sdr(est, ref, 0) == pytest.approx(20 * math.log10(2), abs=1e-9)


def test_sdr_phase_invariance(rng):
    est, ref = _field_pair(rng)
    rot = np.exp(0.83j)
    rotated = [ShCoeffSet((0, 0, 0), s.n_max, s.freqs, rot * s.data) for s in (est, ref)]
    assert sdr(*rotated, 1) == pytest.approx(sdr(est, ref, 1), abs=1e-9)


def test_sdr_against_loop(rng):
    for _ in range(100):
        u = _rand(rng, 30)
        u_hat = u + 0.2 * _rand(rng, 30)
        assert abs(sdr_from_fields(u_hat, u) - naive_sdr(u_hat, u)) < 1e-12


# ---------------------------------------------------------------- suites

def test_single_item_suite(rng):
    est, ref = _field_pair(rng)
    (rep,) = evaluate_suite([est], [ref], "m")
    e, c, s = item_metrics(est, ref)
    np.testing.assert_array_equal(rep.edm, e)
    np.testing.assert_array_equal(rep.coss, c)
    np.testing.assert_array_equal(rep.sdr, s)
    assert rep.edm[0] == edm(est.data[0], ref.data[0])


def test_suite_identical_items(rng):
    _, ref = _field_pair(rng)
    (rep,) = evaluate_suite([ref], [ref], "ideal")
    assert rep.mean_edm == 0 and rep.mean_coss == pytest.approx(1.0) and rep.mean_sdr == SDR_CAP_DB


def test_suite_row_count(tmp_path, rng):
    items = [_field_pair(rng) for _ in range(6)]
    reps = evaluate_suite([a for a, _ in items], [b for _, b in items], "m",
                          sweep_values=[10, 20, 30, 10, 20, 30], sweep_axis="snr", with_sdr=False)
    assert len(reps) == 3 and all(r.count == 2 for r in reps)
    rows = [row for r in reps for row in r.rows()]
    assert len(rows) == 3 * 2 + 3
    csv_path, json_path = tmp_path / "r.csv", tmp_path / "r.json"
    write_reports(reps, csv_path, json_path)
    lines = list(csv.reader(csv_path.open()))
    assert lines[0] == REPORT_COLUMNS and len(lines) == 1 + 9
    summary = json.loads(json_path.read_text())
    assert [s["sweep_value"] for s in summary] == [10, 20, 30]


def test_suite_misaligned(rng):
    est, ref = _field_pair(rng)
    with pytest.raises(ValueError):
        evaluate_suite([est, est], [ref])
    with pytest.raises(ValueError):
        evaluate_suite([est], [ref], sweep_values=[1, 2])


def test_lsm_clean_suite(rng):
    from ttnet.translation import RidgeConfig, build_translation_matrices, forward_translate, lsm_solve

    points = rng.standard_normal((8, 3))
    points = 0.5 * points / np.linalg.norm(points, axis=1, keepdims=True)
    freqs = [300.0, 800.0]
    mats = build_translation_matrices(freqs, points, 4, 8)
    truth = ShCoeffSet((0, 0, 0), 8, freqs, _rand(rng, (2, 81)))
    est, _ = lsm_solve(mats, forward_translate(mats, truth), RidgeConfig(lam=0.0))
    (rep,) = evaluate_suite([est], [truth], "lsm")
    assert rep.mean_coss > 0.999
    assert rep.mean_sdr > 150
