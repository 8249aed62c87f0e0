import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellspan.dataset import (
    SPLITS,
    CellRecord,
    DischargeCurve,
    SummaryTable,
    SyntheticSpec,
    capacity_loss_series,
    cell_to_dict,
    dumps_dataset,
    generate_synthetic,
    load_dataset,
    parse_dataset,
    save_dataset,
    save_truth,
    true_cycle_life,
)
from cellspan.errors import DataError


def _cell(cid="c0", split="train", qd=None, cycles=None, life=None, nominal=1.1):
    cycles = np.arange(1, 121) if cycles is None else np.asarray(cycles)
    qd = np.full(len(cycles), 1.05) if qd is None else np.asarray(qd, dtype=float)
    v = np.linspace(2.0, 3.6, 12)
    curve = DischargeCurve(v, np.linspace(1.0, 0.0, 12))
    return CellRecord(cid, split, nominal, "p", life, SummaryTable(cycles, qd), {10: curve, 100: curve})


def test_three_cell_roundtrip(tmp_path):
    cells = [_cell(f"c{i}", s, life=300 + i) for i, s in enumerate(SPLITS)]
    path = tmp_path / "d.json"
    save_dataset(cells, path)
    back = load_dataset(path)
    assert back == cells
    assert {c.split for c in back} == set(SPLITS)


def test_duplicate_cycle_names_cell_and_cycle():
    cell = cell_to_dict(_cell("b3c7"))
    cell["summaries"]["cycle"][57] = 57  # cycle 57 now appears twice
    with pytest.raises(DataError, match=r"b3c7.*duplicate cycle 57"):
        parse_dataset(json.dumps({"cells": [cell]}))


def test_parse_error_reports_position():
    with pytest.raises(DataError, match="line 2, column"):
        parse_dataset('{"cells": [\n  oops]}')


def test_missing_field_is_named():
    d = cell_to_dict(_cell())
    del d["nominal_capacity_ah"]
    with pytest.raises(DataError, match="nominal_capacity_ah"):
        parse_dataset(json.dumps({"cells": [d]}))


def test_duplicate_cell_id_rejected():
    d = cell_to_dict(_cell())
    with pytest.raises(DataError, match="duplicate cell_id"):
        parse_dataset(json.dumps({"cells": [d, d]}))


@pytest.mark.parametrize(
    "kwargs, msg",
    [
        ({"split": "validation"}, "split"),
        ({"nominal": 0.0}, "nominal_capacity"),
        ({"cycles": [0, 1, 2]}, ">= 1"),
        ({"qd": [-0.1] + [1.0] * 119}, ">= 0"),
        ({"cycles": np.arange(1, 51), "life": 40}, "cycle 100"),
        ({"life": 0}, "cycle_life"),
    ],
)
def test_invariant_violations(kwargs, msg):
    with pytest.raises(DataError, match=msg):
        _cell(**kwargs)


def test_curve_voltages_clipped_and_validated():
    c = DischargeCurve([1.9, 2.5, 3.0, 3.7], [1.0, 0.8, 0.5, 0.0])
    assert c.voltage.min() == 2.0 and c.voltage.max() == 3.6
    with pytest.raises(DataError):
        DischargeCurve([2.0, 2.5, 3.0, 3.5], [1.0, -0.1, 0.5, 0.0])
    with pytest.raises(DataError):
        DischargeCurve([2.0, 2.5, 3.0], [1.0, 0.1, 0.5, 0.0])


@pytest.mark.parametrize("qd, loss", [(1.1, 0.0), (0.88, 0.2), (1.12, 0.0)])
def test_capacity_loss_arithmetic(qd, loss):
    series = capacity_loss_series(_cell(qd=np.full(120, qd)))
    assert series.loss[0] == pytest.approx(loss, abs=1e-15)
    assert series.clamped == (120 if qd > 1.1 else 0)


def test_synthetic_loss_matches_law(small_synth):
    cells, truth = small_synth
    for cell in cells:
        t = truth[cell.cell_id]
        s = capacity_loss_series(cell)
        law = np.exp(t["A"]) * s.cycles.astype(float) ** t["B"] + t["C"]
        # 6 sd bound on N(0, 0.002) noise over a few thousand draws
        assert np.max(np.abs(s.loss - law)) < 6 * 0.002
        assert np.all((s.loss >= 0) & (s.loss < 1))


def test_noiseless_single_cell_exact():
    cells, truth = generate_synthetic(SyntheticSpec(n_cells=1, noise_sd=0.0, rng_seed=5))
    t = truth[cells[0].cell_id]
    s = capacity_loss_series(cells[0])
    law = np.exp(t["A"] + t["B"] * np.log(s.cycles.astype(float))) + t["C"]
    np.testing.assert_allclose(s.loss, law, rtol=0, atol=1e-15)


def test_cycle_life_label_is_first_crossing(noiseless_synth):
    cells, truth = noiseless_synth
    for cell in cells:
        life = truth[cell.cell_id]["cycle_life_true"]
        assert cell.cycle_life == math.ceil(life)
        s = capacity_loss_series(cell)
        assert s.loss[s.cycles == cell.cycle_life][0] >= 0.2 - 1e-15
        assert s.loss[s.cycles == cell.cycle_life - 1][0] < 0.2


def test_empty_synthetic(tmp_path):
    cells, truth = generate_synthetic(SyntheticSpec(n_cells=0))
    assert cells == [] and truth == {}
    save_dataset(cells, tmp_path / "d.json")
    assert load_dataset(tmp_path / "d.json") == []


def test_seed_gives_identical_bytes(tmp_path):
    out = []
    for k in range(2):
        cells, truth = generate_synthetic(SyntheticSpec(n_cells=6, rng_seed=42))
        save_truth(truth, tmp_path / f"t{k}.json")
        out.append(dumps_dataset(cells) + (tmp_path / f"t{k}.json").read_text())
    assert out[0] == out[1]


def test_split_counts():
    cells, _ = generate_synthetic(SyntheticSpec(n_cells=200, rng_seed=1))
    counts = {s: sum(c.split == s for c in cells) for s in SPLITS}
    assert counts == {"train": 160, "primary_test": 20, "secondary_test": 20}


@pytest.mark.parametrize(
    "kwargs",
    [{"n_cells": -1}, {"A_range": (1.0, 0.0)}, {"B_range": (0.0, 1.0)}, {"C_range": (0.0, 0.3)},
     {"noise_sd": -1.0}, {"split_fractions": (0.5, 0.2, 0.2)}],
)
def test_spec_validation(kwargs):
    with pytest.raises(DataError):
        generate_synthetic(SyntheticSpec(**kwargs))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 4))
def test_roundtrip_property(seed, n):
    cells, _ = generate_synthetic(SyntheticSpec(n_cells=n, rng_seed=seed, max_cycles=400))
    text = dumps_dataset(cells)
    back = parse_dataset(text)
    assert back == cells
    assert dumps_dataset(back) == text


def test_true_cycle_life_identity():
    assert true_cycle_life(0.0, 1.0, 0.0, 0.2) == pytest.approx(0.2)
