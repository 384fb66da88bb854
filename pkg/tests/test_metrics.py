"""Dice, TKV, MAPE, CSV reporting, and SVG plot determinism."""

import math

import numpy as np
import pytest

from voxseg.errors import ShapeError
from voxseg.metrics import (METRICS_CSV_HEADER, CaseRow, ConvergenceLog,
                            DiceReport, TkvResult, case_row, compute_tkv,
                            dice_report, dice_score, mape, read_metrics_csv,
                            summarize_tkv, tkv_percent_error,
                            write_metrics_csv)
from voxseg.phantom import PhantomSpec, generate_phantom_pair, \
    kidney_analytic_volumes_mm3
from voxseg.plots import convergence_svg, scatter_svg
from voxseg.volume import Volume


# ---------------------------------------------------------------------------
# dice
# ---------------------------------------------------------------------------

def _mask(shape, on):
    m = np.zeros(shape, dtype=np.uint8)
    for idx in on:
        m[idx] = 1
    return m


def test_dice_identical_masks_is_one():
    rng = np.random.default_rng(0)
    m = rng.integers(0, 3, size=(6, 6, 6)).astype(np.uint8)
    for cls in (0, 1, 2):
        assert dice_score(m, m, cls) == 1.0


def test_dice_disjoint_nonempty_is_zero():
    a = _mask((4, 4, 4), [(0, 0, 0)])
    b = _mask((4, 4, 4), [(3, 3, 3)])
    assert dice_score(a, b, 1) == 0.0


def test_dice_half_overlap_hand_value():
    # |P| = |G| = 100, overlap 50 -> dice = 2*50/200 = 0.5
    p = np.zeros((1, 10, 20), dtype=np.uint8)
    g = np.zeros((1, 10, 20), dtype=np.uint8)
    p[0, :, :10] = 1  # columns 0..9
    g[0, :, 5:15] = 1  # columns 5..14, overlap columns 5..9
    assert dice_score(p, g, 1) == 0.5


def test_dice_both_empty_is_one():
    z = np.zeros((3, 3, 3), dtype=np.uint8)
    assert dice_score(z, z, 2) == 1.0


def test_dice_one_empty_is_zero():
    z = np.zeros((3, 3, 3), dtype=np.uint8)
    assert dice_score(_mask((3, 3, 3), [(1, 1, 1)]), z, 1) == 0.0


def test_dice_symmetric():
    rng = np.random.default_rng(1)
    a = rng.integers(0, 2, size=(5, 5, 5)).astype(np.uint8)
    b = rng.integers(0, 2, size=(5, 5, 5)).astype(np.uint8)
    assert dice_score(a, b, 1) == dice_score(b, a, 1)


def test_dice_accepts_volumes_and_checks_dims():
    a = Volume(np.zeros((2, 2, 2), dtype=np.uint8), spacing=(1.0,) * 3)
    b = Volume(np.zeros((2, 2, 3), dtype=np.uint8), spacing=(1.0,) * 3)
    with pytest.raises(ShapeError):
        dice_score(a, b, 1)


def test_dice_report_mean_kidney():
    rep = DiceReport({0: 1.0, 1: 0.8, 2: 0.6})
    assert rep.mean_kidney == pytest.approx(0.7)
    with pytest.raises(ValueError):
        DiceReport({1: 1.5})


def test_dice_report_from_masks():
    p = np.zeros((2, 2, 2), dtype=np.uint8)
    g = np.zeros((2, 2, 2), dtype=np.uint8)
    p[0, 0, 0] = 1
    g[0, 0, 0] = 1
    rep = dice_report(p, g, class_ids=(0, 1, 2))
    assert rep.per_class[1] == 1.0
    assert rep.per_class[2] == 1.0  # both empty
    assert rep.mean_kidney == 1.0


# ---------------------------------------------------------------------------
# TKV
# ---------------------------------------------------------------------------

def test_tkv_forced_arithmetic():
    # 1000 left + 500 right voxels at 1.5 mm isotropic -> 1500 * 3.375
    m = np.zeros((20, 20, 20), dtype=np.uint8)
    m.flat[:1000] = 1
    m.flat[1000:1500] = 2
    assert compute_tkv(m, spacing=(1.5, 1.5, 1.5)) == pytest.approx(5062.5)


def test_tkv_empty_mask_is_zero():
    m = np.zeros((4, 4, 4), dtype=np.uint8)
    assert compute_tkv(m, spacing=(1.5, 1.5, 1.5)) == 0.0


def test_tkv_reads_volume_spacing():
    m = Volume(np.ones((2, 2, 2), dtype=np.uint8), spacing=(2.0, 1.0, 0.5))
    assert compute_tkv(m) == pytest.approx(8 * 1.0)


def test_tkv_additive_over_disjoint_regions():
    m = np.zeros((6, 6, 6), dtype=np.uint8)
    m[0] = 1
    m[3] = 2
    s = (1.5, 1.5, 1.5)
    total = compute_tkv(m, spacing=s)
    left = compute_tkv(m, class_ids=(1,), spacing=s)
    right = compute_tkv(m, class_ids=(2,), spacing=s)
    assert total == pytest.approx(left + right)


def test_tkv_on_phantom_within_3_percent_of_analytic():
    spec = PhantomSpec(seed=17, dims=(48, 48, 48), kidney_radii_mm=(9.0, 13.0),
                       liver_radii_mm=(10.0, 15.0), lumpiness=0.0)
    k, _ = generate_phantom_pair(spec)
    left_a, right_a = kidney_analytic_volumes_mm3(spec)
    tkv = compute_tkv(k.mask)
    assert abs(tkv - (left_a + right_a)) / (left_a + right_a) < 0.03


def test_percent_error_hand_values():
    assert tkv_percent_error(105.0, 100.0) == pytest.approx(5.0)
    assert tkv_percent_error(95.0, 100.0) == pytest.approx(-5.0)
    assert tkv_percent_error(123.0, 123.0) == 0.0
    with pytest.raises(ValueError):
        tkv_percent_error(10.0, 0.0)


def test_mape_hand_value():
    results = [TkvResult("a", 102.0, 100.0),   # +2%
               TkvResult("b", 96.0, 100.0),    # -4%
               TkvResult("c", 106.0, 100.0)]   # +6%
    assert mape(results) == pytest.approx(4.0)


def test_mape_perfect_predictions_zero():
    results = [TkvResult(f"c{i}", 50.0 * i + 10, 50.0 * i + 10)
               for i in range(5)]
    assert mape(results) == 0.0


def test_summarize_excludes_zero_gt_with_count():
    results = [TkvResult("ok", 110.0, 100.0),
               TkvResult("undefined", 5.0, 0.0)]
    summary = summarize_tkv(results)
    assert summary.mape == pytest.approx(10.0)
    assert summary.n_used == 1
    assert summary.n_excluded == 1
    with pytest.raises(ValueError):
        summarize_tkv([TkvResult("only-bad", 5.0, 0.0)])


def test_tkv_result_validation():
    with pytest.raises(ValueError):
        TkvResult("neg", -1.0, 100.0)


# ---------------------------------------------------------------------------
# convergence log and CSV
# ---------------------------------------------------------------------------

def test_convergence_log_appends_in_order(tmp_path):
    log = ConvergenceLog()
    assert log.points == []
    log.append(1, 0.42)
    log.append(2, 0.55)
    with pytest.raises(ValueError):
        log.append(2, 0.6)  # not strictly increasing
    path = tmp_path / "conv.csv"
    log.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,val_mean_kidney_dice"
    assert lines[1] == "1,0.42"


def test_metrics_csv_header_and_roundtrip(tmp_path):
    rows = [CaseRow("k0001", 0, 0.91, 0.88, 0.895, 150000.0, 148000.0,
                    tkv_percent_error(150000.0, 148000.0)),
            CaseRow("k0002", 1, 0.95, 0.97, 0.96, 90000.0, 90000.0, 0.0)]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(rows, path)
    text = path.read_text()
    assert text.splitlines()[0] == ",".join(METRICS_CSV_HEADER)
    back = read_metrics_csv(path)
    assert back == rows


def test_metrics_csv_byte_deterministic(tmp_path):
    rows = [CaseRow("x", 0, 1 / 3, 2 / 3, 0.5, 1e5 / 3, 1e5 / 7, 1.23456789)]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_metrics_csv(rows, a)
    write_metrics_csv(rows, b)
    assert a.read_bytes() == b.read_bytes()
    assert read_metrics_csv(a)[0].dice_left == 1 / 3  # repr round-trips


def test_case_row_builder():
    rep = DiceReport({0: 1.0, 1: 0.9, 2: 0.7})
    tkv = TkvResult("k1", 105.0, 100.0)
    row = case_row("k1", 2, rep, tkv)
    assert row.fold == 2
    assert row.dice_mean == pytest.approx(0.8)
    assert row.tkv_pct_err == pytest.approx(5.0)


def test_case_row_zero_gt_gives_nan_error():
    rep = DiceReport({1: 1.0, 2: 1.0})
    row = case_row("z", 0, rep, TkvResult("z", 5.0, 0.0))
    assert math.isnan(row.tkv_pct_err)


# ---------------------------------------------------------------------------
# SVG plots
# ---------------------------------------------------------------------------

def test_scatter_svg_deterministic_and_well_formed(tmp_path):
    results = [TkvResult(f"c{i}", 1000.0 * (i + 10) * 1.01, 1000.0 * (i + 10))
               for i in range(6)]
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    scatter_svg(results, a)
    scatter_svg(results, b)
    content = a.read_text()
    assert a.read_bytes() == b.read_bytes()
    assert content.startswith("<svg ")
    assert content.rstrip().endswith("</svg>")
    assert content.count("<circle ") == 6
    assert "percent error" in content


def test_scatter_svg_skips_zero_gt_and_rejects_empty(tmp_path):
    results = [TkvResult("good", 101.0, 100.0), TkvResult("bad", 5.0, 0.0)]
    path = tmp_path / "s.svg"
    scatter_svg(results, path)
    assert path.read_text().count("<circle ") == 1
    with pytest.raises(ValueError):
        scatter_svg([TkvResult("bad", 5.0, 0.0)], tmp_path / "none.svg")


def test_convergence_svg_polyline_per_series(tmp_path):
    series = {"dice-loss": [(1, 0.2), (2, 0.5), (3, 0.7)],
              "bootstrap": [(1, 0.3), (2, 0.6), (3, 0.8)]}
    path = tmp_path / "conv.svg"
    convergence_svg(series, path)
    content = path.read_text()
    assert content.count("<polyline ") == 2
    assert "dice-loss" in content and "bootstrap" in content
    with pytest.raises(ValueError):
        convergence_svg({}, tmp_path / "empty.svg")
