import math

import numpy as np
import pytest

from drm.baselines import dare_ties_merge, simple_average, task_arithmetic, ties_merge
from drm.bundle import DeltaSet
from drm.engine import MergeConfig
from drm.errors import ShapeMismatch


def make_ds(deltas, name="layer"):
    deltas = [np.asarray(d, dtype=np.float64) for d in deltas]
    return DeltaSet(name, deltas[0].shape, deltas, [f"t{i}" for i in range(len(deltas))])


class TestSimpleAverage:
    def test_two_values(self):
        np.testing.assert_allclose(
            simple_average([np.array([[2.0]]), np.array([[4.0]])]), [[3.0]]
        )

    def test_identical_inputs(self):
        w = np.random.default_rng(0).standard_normal((3, 2))
        np.testing.assert_allclose(simple_average([w, w.copy(), w.copy()]), w)

    def test_against_loop(self):
        rng = np.random.default_rng(1)
        weights = [rng.standard_normal((3, 4)) for _ in range(3)]
        expected = np.zeros((3, 4))
        for i in range(3):
            for j in range(4):
                expected[i, j] = sum(w[i, j] for w in weights) / 3
        np.testing.assert_allclose(simple_average(weights), expected, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            simple_average([np.zeros((2, 2)), np.zeros((2, 3))])


class TestTaskArithmetic:
    def test_shared_lambda(self):
        ds = make_ds([np.array([[1.0]]), np.array([[3.0]])])
        np.testing.assert_allclose(task_arithmetic(ds, 0.4), [[1.6]])

    def test_zero_deltas(self):
        ds = make_ds([np.zeros((2, 2)), np.zeros((2, 2))])
        np.testing.assert_array_equal(task_arithmetic(ds, 0.4), np.zeros((2, 2)))

    def test_against_loop(self):
        rng = np.random.default_rng(2)
        deltas = [rng.standard_normal((2, 3)) for _ in range(3)]
        lams = [0.2, 0.5, 1.1]
        expected = np.zeros((2, 3))
        for t in range(3):
            for i in range(2):
                for j in range(3):
                    expected[i, j] += lams[t] * deltas[t][i, j]
        np.testing.assert_allclose(task_arithmetic(make_ds(deltas), lams), expected, atol=1e-12)


def ties_oracle(deltas, retain, lambdas):
    """Literal position-wise script: per-task top-k pruning, dominant-sign
    election with +1 on ties, survivor-count averaging."""
    n_tasks = len(deltas)
    rows, cols = deltas[0].shape
    pruned = []
    for d in deltas:
        order = sorted(
            ((i, j) for i in range(rows) for j in range(cols)),
            key=lambda ij: (-abs(d[ij]), ij),
        )
        keep = set(order[: math.ceil(retain * d.size - 1e-9)])
        pruned.append(
            np.array([[d[i, j] if (i, j) in keep else 0.0 for j in range(cols)]
                      for i in range(rows)])
        )
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            total = sum(p[i, j] for p in pruned)
            sign = -1.0 if total < 0 else 1.0
            kept = [
                (lambdas[t], pruned[t][i, j])
                for t in range(n_tasks)
                if pruned[t][i, j] * sign > 0
            ]
            if kept:
                out[i, j] = sum(lam * v for lam, v in kept) / len(kept)
    return out


class TestTiesMerge:
    def test_single_task_neutral(self):
        ds = make_ds([np.random.default_rng(3).standard_normal((3, 3))])
        cfg = MergeConfig(method="ties", retain=1.0, lambdas=1.0)
        np.testing.assert_allclose(ties_merge(ds, cfg), ds.deltas[0], atol=1e-12)

    def test_sign_tie_keeps_positive(self):
        ds = make_ds([np.array([[5.0]]), np.array([[-5.0]])])
        cfg = MergeConfig(method="ties", retain=1.0, lambdas=1.0)
        np.testing.assert_allclose(ties_merge(ds, cfg), [[5.0]])

    def test_against_positionwise_oracle(self):
        rng = np.random.default_rng(5)
        for retain in (0.25, 0.5, 1.0):
            deltas = [rng.standard_normal((4, 4)) for _ in range(3)]
            cfg = MergeConfig(method="ties", retain=retain, lambdas=1.0)
            got = ties_merge(make_ds(deltas), cfg)
            want = ties_oracle(deltas, retain, [1.0] * 3)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_sign_agreeing_inputs_reduce_to_weighted_mean(self):
        rng = np.random.default_rng(7)
        signs = np.sign(rng.standard_normal((3, 3)))
        signs[signs == 0] = 1.0
        deltas = [signs * rng.uniform(0.5, 2.0, (3, 3)) for _ in range(3)]
        lams = [0.9, 1.0, 1.3]
        cfg = MergeConfig(method="ties", retain=1.0, lambdas=tuple(lams))
        got = ties_merge(make_ds(deltas), cfg)
        want = sum(l * d for l, d in zip(lams, deltas)) / 3
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestDareTies:
    def test_p_zero_reduces_to_unpruned_ties(self):
        rng = np.random.default_rng(11)
        deltas = [rng.standard_normal((4, 3)) for _ in range(3)]
        cfg = MergeConfig(method="dare_ties", dare_drop=0.0, lambdas=1.0)
        got = dare_ties_merge(make_ds(deltas), cfg)
        ties_cfg = MergeConfig(method="ties", retain=1.0, lambdas=1.0, enable_prune=False)
        want = ties_merge(make_ds(deltas), ties_cfg)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_same_seed_is_deterministic(self):
        rng = np.random.default_rng(13)
        deltas = [rng.standard_normal((5, 5)) for _ in range(2)]
        cfg = MergeConfig(method="dare_ties", dare_drop=0.5, seed=42)
        a = dare_ties_merge(make_ds(deltas), cfg)
        b = dare_ties_merge(make_ds(deltas), cfg)
        np.testing.assert_array_equal(a, b)

    def test_different_layer_different_stream(self):
        rng = np.random.default_rng(17)
        deltas = [rng.standard_normal((6, 6))]
        cfg = MergeConfig(method="dare_ties", dare_drop=0.5, seed=0)
        a = dare_ties_merge(make_ds(deltas, name="layer.a"), cfg)
        b = dare_ties_merge(make_ds([deltas[0]], name="layer.b"), cfg)
        assert not np.array_equal(a, b)

    def test_unbiased_estimator(self):
        # 20k trials of a single 1.0 entry; full 100k run lives in the
        # acceptance suite
        trials = 20_000
        ds = make_ds([np.ones((trials, 1))])
        cfg = MergeConfig(method="dare_ties", dare_drop=0.8, seed=1)
        merged = dare_ties_merge(ds, cfg)
        # per-trial variance is p/(1-p); 3 sigma of the mean
        band = 3.0 * math.sqrt(0.8 / 0.2 / trials)
        assert abs(merged.mean() - 1.0) <= band

    def test_survivors_rescaled(self):
        ds = make_ds([np.ones((10, 10))])
        cfg = MergeConfig(method="dare_ties", dare_drop=0.75, seed=2)
        merged = dare_ties_merge(ds, cfg)
        values = set(np.round(np.unique(merged), 12))
        assert values <= {0.0, 4.0}


class TestSingleTaskNeutrality:
    def test_all_baselines_reduce_to_delta(self):
        delta = np.random.default_rng(19).standard_normal((4, 4))
        ds = make_ds([delta])
        assert np.allclose(task_arithmetic(ds, 1.0), delta)
        cfg = MergeConfig(method="ties", retain=1.0, lambdas=1.0)
        assert np.allclose(ties_merge(ds, cfg), delta)
        dare_cfg = MergeConfig(method="dare_ties", dare_drop=0.0, lambdas=1.0)
        assert np.allclose(dare_ties_merge(ds, dare_cfg), delta)
        assert np.allclose(simple_average([delta]), delta)
