import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mecam.errors import ConfigError
from mecam.model import ModelConfig, build, forward
from mecam.scoring import (
    BatchScores,
    calibrate_threshold,
    canonical_scorer,
    classify,
    energy_score,
    feature_shift,
    make_records,
    mask_label,
    mecam_score,
    mood_energy_score,
    msp_score,
    read_score_dump,
    score_images,
    write_score_dump,
)

CFG = ModelConfig(stage_widths=(4, 8, 8, 8), input_size=16)


@pytest.fixture(scope="module")
def model():
    return build(CFG, 11)


def images(n, seed=0):
    return np.random.default_rng(seed).random((n, 1, 16, 16)).astype(np.float32)


def test_feature_shift_arithmetic():
    assert feature_shift([1.0, 0.0], [0.0, 0.0]) == 0.5
    assert feature_shift([0.3, 0.2], [0.3, 0.2]) == 0.0


def test_msp_examples():
    assert msp_score([0.0, 0.0]) == 0.5
    assert msp_score([math.log(3), 0.0]) == pytest.approx(0.75)


def test_energy_examples():
    assert energy_score([0.0, 0.0]) == pytest.approx(math.log(2))
    assert energy_score([1000.0, 0.0]) == pytest.approx(1000.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.floats(-50, 50))
def test_msp_shift_invariant(logits, c):
    assert msp_score(logits) == pytest.approx(msp_score([v + c for v in logits]), abs=1e-9)
    assert 1 / len(logits) - 1e-12 <= msp_score(logits) <= 1.0


def test_mood_energy():
    logits = {1: np.zeros(3), 4: np.array([2.0, 0.0, -1.0])}
    assert mood_energy_score(logits) == energy_score(logits[4])
    assert mood_energy_score(logits, 1) == pytest.approx(math.log(3))
    with pytest.raises(ValueError):
        mood_energy_score(logits, 2)


def test_mood_differs_from_final_energy_on_model(model):
    out = forward(model, images(1))
    lg = out.logits_by_exit(0)
    assert mood_energy_score(lg, 1) != mood_energy_score(lg, 4)


def test_scorer_names():
    assert canonical_scorer("mood") == "mood_energy"
    with pytest.raises(ConfigError):
        canonical_scorer("odin")
    assert mask_label([1, 2, 3, 4], (1, 2, 3, 4)) == "mecam"
    assert mask_label([3, 1], (1, 2, 3, 4)) == "mecam@1+3"


def test_mecam_score_non_negative(model):
    for x in images(4, 1):
        assert mecam_score(model, x) >= 0.0


def test_mecam_zero_for_constant_cam():
    # zeroed heads give flat class maps, so the mask is empty and nothing shifts
    m = build(CFG, 5)
    for e in CFG.exit_stages:
        m.params[f"exit{e}.weight"].data[:] = 0
    assert mecam_score(m, images(1)[0]) == 0.0


def test_batch_scoring_matches_single(model):
    x = images(5, 2)
    batch = score_images(model, x, ["mecam", "msp", "energy", "mood"])
    assert list(batch.scores) == ["mecam", "msp", "energy", "mood_energy"]
    for i in range(5):
        assert batch.scores["mecam"][i] == pytest.approx(mecam_score(model, x[i]), rel=1e-6, abs=1e-12)


def test_batch_scoring_worker_independent(model):
    x = images(140, 3)
    a = score_images(model, x, ["mecam", "msp"], exit_masks=[(4,), (1, 2, 3, 4)], workers=1)
    b = score_images(model, x, ["mecam", "msp"], exit_masks=[(4,), (1, 2, 3, 4)], workers=3)
    assert set(a.scores) == {"mecam@4", "mecam", "msp"}
    for k in a.scores:
        assert a.scores[k].tobytes() == b.scores[k].tobytes()


def test_bad_exit_mask_rejected(model):
    with pytest.raises(ConfigError):
        score_images(model, images(1), ["mecam"], exit_masks=[(5,)])


def test_calibrate_examples():
    assert calibrate_threshold([6, 7, 8, 9, 10]).tau == 6
    assert calibrate_threshold(list(range(1, 101))).tau == 6
    assert calibrate_threshold([3.0, 1.0, 2.0], 1.0).tau == 1.0
    with pytest.raises(ValueError):
        calibrate_threshold([])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.integers(-20, 20).map(float), min_size=1, max_size=60),
    st.floats(0.01, 1.0),
)
def test_calibrate_is_tight(scores, tpr):
    t = calibrate_threshold(scores, tpr)
    s = np.asarray(scores)
    need = math.ceil(round(tpr * len(s), 9))
    assert np.count_nonzero(s >= t.tau) >= need
    larger = s[s > t.tau]
    if larger.size:
        assert np.count_nonzero(s >= larger.min()) < need


def test_classify_boundary():
    t = calibrate_threshold([1.0, 2.0, 3.0], 1.0)
    assert classify(1.0, t) == "ID"
    assert classify(np.nextafter(1.0, 0.0), t) == "OOD"
    assert classify(1e9, 0.5) == "ID"


def test_score_dump_round_trip(tmp_path):
    batch = BatchScores(np.array([1, 0]), {"msp": np.array([0.75, 0.1 + 0.2]), "energy": np.array([1.0, 2.0])})
    recs = make_records(["b.pgm", "a.pgm"], "OOD", batch)
    write_score_dump(tmp_path / "s.csv", recs)
    back = read_score_dump(tmp_path / "s.csv")
    assert [r.sample_id for r in back] == ["a.pgm", "a.pgm", "b.pgm", "b.pgm"]
    assert sorted(back, key=lambda r: (r.sample_id, r.scorer)) == sorted(recs, key=lambda r: (r.sample_id, r.scorer))
