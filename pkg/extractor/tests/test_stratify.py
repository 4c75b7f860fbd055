"""Stratified selection bookkeeping over synthetic trace files."""

import json

import numpy as np
import pytest

from ckv_extract import TraceRecord, write_trace
from ckv_extract.stratify import stratify, trace_risks


def _make_trace(path, entropy_low: bool, ppl: float, seed: int) -> None:
    """One 1x1-head trace with controllable entropy and window perplexity."""
    rng = np.random.default_rng(seed)
    T, w = 16, 4
    att = np.zeros((1, 1, w, T))
    for r in range(w):
        q = T - w + r + 1
        if entropy_low:
            att[0, 0, r, 0] = 1.0  # all mass on one key
        else:
            att[0, 0, r, :q] = 1.0 / q
    logprobs = np.full(T, -np.log(ppl))
    record = TraceRecord(tokens=rng.integers(0, 64, T).astype(np.uint32),
                         logprobs=logprobs, attention=att,
                         value_norms=rng.uniform(0.5, 1.5, (1, 1, T)))
    write_trace(record, path, head_dim=8)


def _bins(tmp_path, e_edges, p_edges):
    path = tmp_path / "bins.json"
    path.write_text(json.dumps({"entropy_edges": e_edges,
                                "ppl_edges": p_edges}))
    return path


def test_trace_risks_closed_forms(tmp_path):
    _make_trace(tmp_path / "a.ckvt", entropy_low=True, ppl=5.0, seed=0)
    entropy, ppl = trace_risks(tmp_path / "a.ckvt")
    assert entropy == pytest.approx(0.0, abs=1e-9)
    assert ppl == pytest.approx(5.0, rel=1e-6)


def test_three_cells_per_cell_one(tmp_path):
    _make_trace(tmp_path / "a.ckvt", True, 2.0, 0)    # low ent, low ppl
    _make_trace(tmp_path / "b.ckvt", True, 20.0, 1)   # low ent, high ppl
    _make_trace(tmp_path / "c.ckvt", False, 20.0, 2)  # high ent, high ppl
    _make_trace(tmp_path / "d.ckvt", False, 21.0, 3)  # same cell as c
    manifest = stratify(tmp_path, _bins(tmp_path, [1.0], [10.0]), per_cell=1)
    assert len(manifest["selected"]) == 3
    assert manifest["occupancy"]["1,1"] == 1  # d capped out
    assert manifest["empty_cells"] == ["1,0"]


def test_single_cell_reports_remaining_empty(tmp_path):
    for i in range(3):
        _make_trace(tmp_path / f"t{i}.ckvt", True, 2.0, i)
    manifest = stratify(tmp_path, _bins(tmp_path, [1.0, 2.0], [10.0]),
                        per_cell=5)
    assert manifest["grid"] == [3, 2]
    assert len(manifest["empty_cells"]) == 3 * 2 - 1
    assert manifest["occupancy"]["0,0"] == 3


def test_occupancy_sums_to_selection_count(tmp_path):
    rng = np.random.default_rng(7)
    for i in range(10):
        _make_trace(tmp_path / f"t{i}.ckvt", bool(rng.integers(2)),
                    float(rng.uniform(1.5, 40.0)), i)
    manifest = stratify(tmp_path, _bins(tmp_path, [1.0], [10.0]), per_cell=2)
    assert sum(manifest["occupancy"].values()) == len(manifest["selected"])


def test_per_cell_must_be_positive(tmp_path):
    with pytest.raises(ValueError, match="per_cell"):
        stratify(tmp_path, _bins(tmp_path, [1.0], [10.0]), per_cell=0)
