import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from grdo.data import GroupedDataset, GroupedSample
from grdo.metrics import (MetricsReport, challenge_p_task1, challenge_p_task2, confusion_matrix,
                          evaluate, f1_per_class, macro_f1, predict, report_from_predictions)
from grdo.model import ModelConfig, init_params

BINARY = np.array([[8, 1], [2, 9]])  # positive class first: TP=8, FN=1, FP=2, TN=9


class TestF1:
    def test_perfect(self):
        np.testing.assert_array_equal(f1_per_class(np.diag([3, 4, 5])), [1.0, 1.0, 1.0])

    def test_binary_fixture(self):
        np.testing.assert_allclose(f1_per_class(BINARY), [16 / 19, 162 / 189], atol=1e-15)
        assert f1_per_class(BINARY)[0] == pytest.approx(0.842105, abs=1e-6)
        assert f1_per_class(BINARY)[1] == pytest.approx(0.857143, abs=1e-6)

    def test_absent_class_is_zero(self):
        assert f1_per_class([[3, 0], [0, 0]]).tolist() == [1.0, 0.0]

    def test_macro(self):
        assert macro_f1(BINARY) == pytest.approx((16 / 19 + 162 / 189) / 2, abs=1e-15)
        assert macro_f1(BINARY) == pytest.approx(0.849624, abs=1e-6)
        assert macro_f1(np.diag([2, 2])) == 1.0
        assert macro_f1([[0, 3], [4, 0]]) == 0.0

    @given(st.lists(st.integers(0, 20), min_size=9, max_size=9))
    def test_f1_in_unit_interval(self, counts):
        f = f1_per_class(np.array(counts).reshape(3, 3))
        assert np.all((f >= 0) & (f <= 1))


class TestChallengeScores:
    def test_task1_examples(self):
        assert challenge_p_task1([0.920, 0.955, 0.489, 0.977]) == pytest.approx(0.83525, abs=1e-12)
        assert challenge_p_task1([0.952, 0.742, 0.512, 0.909]) == pytest.approx(0.77875, abs=1e-12)
        assert challenge_p_task1([0.3] * 4) == pytest.approx(0.3, abs=1e-15)

    def test_task1_arity(self):
        with pytest.raises(ValueError):
            challenge_p_task1([0.5, 0.5, 0.5])

    def test_task2_examples(self):
        assert challenge_p_task2(0.8085, 0.8215) == pytest.approx(0.8150, abs=1e-12)
        assert challenge_p_task2(0.7952, 0.7579) == pytest.approx(0.77655, abs=1e-12)
        assert challenge_p_task2(0.42, 0.42) == 0.42


def test_argmax_ties_go_to_lowest_index():
    assert predict(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])).tolist() == [0, 1]


def test_hand_built_fixture():
    # four centres x five samples; expected values filled in by hand:
    # c0: F1 = [2/4, 4/6] -> 7/12;  c1: perfect -> 1;  c2: F1 = [0, 8/9] -> 4/9;  c3: all wrong -> 0
    y_true = [0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 0, 1, 0, 1, 0]
    y_pred = [0, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 0, 1, 1, 1, 0, 1, 0, 1]
    centres = [0] * 5 + [1] * 5 + [2] * 5 + [3] * 5
    r = report_from_predictions(y_true, y_pred, centres, 2, "site")
    expected = [Fraction(7, 12), Fraction(1), Fraction(4, 9), Fraction(0)]
    for g, e in enumerate(expected):
        assert r.macro()[g] == pytest.approx(float(e), abs=1e-15)
    assert r.challenge_p == pytest.approx(float(Fraction(73, 144)), abs=1e-15)
    assert r.challenge_p == pytest.approx(challenge_p_task1([float(e) for e in expected]), abs=1e-15)
    assert r.worst_group_macro_f1 == 0.0 and r.max_gap == 1.0


def test_permutation_invariance():
    rng = np.random.default_rng(0)
    y, p, g = rng.integers(0, 3, 50), rng.integers(0, 3, 50), rng.integers(0, 4, 50)
    perm = rng.permutation(50)
    a = report_from_predictions(y, p, g, 3).to_dict()
    b = report_from_predictions(y[perm], p[perm], g[perm], 3).to_dict()
    assert a == b


def test_confusion_is_additive():
    rng = np.random.default_rng(1)
    y, p = rng.integers(0, 4, 60), rng.integers(0, 4, 60)
    whole = confusion_matrix(y, p, 4)
    np.testing.assert_array_equal(whole, confusion_matrix(y[:25], p[:25], 4) + confusion_matrix(y[25:], p[25:], 4))
    assert whole.sum() == 60 and whole.min() >= 0


def test_report_serialisation(tmp_path):
    r = report_from_predictions([0, 1, 1, 0], [0, 1, 0, 0], [0, 0, 1, 1], 2, "gender")
    d = json.loads(r.to_json())
    assert MetricsReport.from_dict(d).to_dict() == r.to_dict()
    rows = r.to_csv().strip().splitlines()
    assert rows[0] == "kind,group,class,value"
    assert sum(1 for row in rows if row.startswith("class_f1")) == 4
    assert rows[-3].startswith("challenge_p")


def _dataset(features, labels, attr_values, name="site"):
    return GroupedDataset([GroupedSample(f, int(y), int(a), {name: int(a), "class": int(y)})
                           for f, y, a in zip(features, labels, attr_values)])


class TestEvaluate:
    def oracle_params(self):
        cfg = ModelConfig(input_dim=2, embed_dim=2, encoder_hidden=2, slices=1, num_classes=2,
                          aggregator="mean", dropout_p=0.3)
        p = init_params(cfg, 0)
        # encoder passes positive inputs through; head reads the two coordinates as logits
        p["encoder.fc1.weight"].data = np.eye(2)
        p["encoder.fc2.weight"].data = np.eye(2)
        p["head.ln.gain"].data = np.ones(2)
        p["head.fc.weight"].data = np.eye(2)
        return p

    def test_perfect_oracle(self):
        feats = np.array([[[5.0, 0.0]], [[0.0, 5.0]], [[4.0, 1.0]], [[1.0, 3.0]]])
        ds = _dataset(feats, [0, 1, 0, 1], [0, 0, 1, 1])
        r = evaluate(self.oracle_params(), ds)
        assert r.challenge_p == 1.0 and r.max_gap == 0.0

    def test_single_group(self):
        feats = np.array([[[5.0, 0.0]], [[0.0, 5.0]], [[4.0, 1.0]]])
        ds = _dataset(feats, [0, 1, 1], [2, 2, 2])
        r = evaluate(self.oracle_params(), ds)
        assert r.group_ids == [2] and r.challenge_p == r.macro()[2]

    def test_class_count_mismatch(self):
        ds = _dataset(np.zeros((1, 1, 2)), [3], [0])
        with pytest.raises(ValueError):
            evaluate(self.oracle_params(), ds)
