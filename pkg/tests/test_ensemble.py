import math

import numpy as np
import pytest

from gml_lt import (
    LinearHead,
    MlpBackbone,
    ModelBundle,
    TemperaturePair,
    ensemble_predict,
    evaluate,
    parse_grid,
    softmax,
    sweep_temperatures,
    temperature_softmax,
)
from gml_lt.ensemble import best_pair, default_grid, sweep_to_csv
from gml_lt.errors import InvalidStateError
from gml_lt.metrics import per_class_recall, summarize


class TestTemperatureSoftmax:
    def test_unit_temperature(self):
        o = np.random.default_rng(0).normal(size=(4, 5))
        np.testing.assert_array_equal(temperature_softmax(o, 1.0), softmax(o))

    def test_huge_temperature_is_uniform(self):
        o = np.random.default_rng(1).normal(size=(4, 5)) * 10
        np.testing.assert_allclose(temperature_softmax(o, 1e6), 0.2, atol=1e-4)

    def test_argmax_preserved(self):
        o = np.random.default_rng(2).normal(size=(50, 6))
        for t in (0.01, 0.5, 3.0, 1e3):
            assert np.array_equal(temperature_softmax(o, t).argmax(1), o.argmax(1))

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_nonpositive_rejected(self, t):
        with pytest.raises(ValueError):
            temperature_softmax(np.zeros((1, 2)), t)


class TestEnsemblePredict:
    def test_identical_heads(self):
        o = np.random.default_rng(3).normal(size=(6, 4))
        probs, _ = ensemble_predict(o, o, TemperaturePair(2.0, 2.0))
        np.testing.assert_allclose(probs, temperature_softmax(o, 2.0), atol=1e-15)

    def test_tie_breaks_to_lowest_class(self):
        probs, labels = ensemble_predict([[math.log(3), 0.0]], [[0.0, math.log(3)]], TemperaturePair(1, 1))
        np.testing.assert_allclose(probs, [[0.5, 0.5]], atol=1e-15)
        assert labels.tolist() == [0]

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        probs, _ = ensemble_predict(rng.normal(size=(20, 7)) * 5, rng.normal(size=(20, 7)) * 5, TemperaturePair(0.7, 2.3))
        np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-12)

    def test_uniform_head_defers_to_other(self):
        rng = np.random.default_rng(5)
        o = rng.normal(size=(30, 5))
        _, labels = ensemble_predict(np.full((30, 5), 0.4), o, TemperaturePair(1.3, 0.9))
        assert np.array_equal(labels, o.argmax(1))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ensemble_predict(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_pair_validation(self):
        with pytest.raises(ValueError):
            TemperaturePair(0.0, 1.0)


class TestGrid:
    def test_parse(self):
        grid = parse_grid("1,2,3x1,2,3")
        assert len(grid) == 9 and grid == default_grid()
        assert parse_grid("1x1") == [TemperaturePair(1.0, 1.0)]

    @pytest.mark.parametrize("spec", ["1,2", "1x2x3", "ax1", "1x0"])
    def test_malformed(self, spec):
        with pytest.raises(ValueError):
            parse_grid(spec)


@pytest.fixture
def two_head_bundle():
    rng = np.random.default_rng(6)
    c, d = 4, 3
    return ModelBundle(
        MlpBackbone.identity(d),
        LinearHead(rng.normal(size=(c, d)), rng.normal(size=c)),
        LinearHead(rng.normal(size=(c, d)), rng.normal(size=c)),
    )


@pytest.fixture
def balanced_set():
    from gml_lt import synthesize_gaussian, uniform_profile

    return synthesize_gaussian(uniform_profile(4, 25), 3, 2.0, seed=1)


class TestSweep:
    def test_single_pair_matches_direct_evaluation(self, two_head_bundle, balanced_set):
        pair = TemperaturePair(1.5, 0.5)
        ((p, rep),) = sweep_temperatures(two_head_bundle, balanced_set, [pair])
        x = balanced_set.features
        lo = x @ two_head_bundle.old_head.w.T + two_head_bundle.old_head.b
        ln = x @ two_head_bundle.new_head.w.T + two_head_bundle.new_head.b
        _, pred = ensemble_predict(lo, ln, pair)
        assert p == pair
        assert rep == summarize(per_class_recall(pred, balanced_set.labels, 4))

    def test_duplicate_pairs_identical(self, two_head_bundle, balanced_set):
        a, b = sweep_temperatures(two_head_bundle, balanced_set, [TemperaturePair(2, 3)] * 2)
        assert a == b

    def test_default_grid_and_best(self, two_head_bundle, balanced_set):
        table = sweep_temperatures(two_head_bundle, balanced_set)
        assert len(table) == 9
        best, rep = best_pair(table)
        assert rep.harmonic_mean == max(r.harmonic_mean for _, r in table)
        lines = sweep_to_csv(table).splitlines()
        assert lines[0] == "t_old,t_new,accuracy,gmean,hmean,lowest"
        assert len(lines) == 10

    def test_missing_old_head(self, two_head_bundle, balanced_set):
        single = ModelBundle(two_head_bundle.backbone, two_head_bundle.new_head)
        with pytest.raises(InvalidStateError):
            sweep_temperatures(single, balanced_set)
        with pytest.raises(InvalidStateError):
            evaluate(single, balanced_set, "ensemble")
