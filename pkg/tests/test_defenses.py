import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from evadelab import RandomizedClassifier, accuracy
from evadelab import defenses as D
from evadelab.errors import ConfigError, ParameterError
from evadelab.prng import KeyedStream

from conftest import TableClassifier, linear_model

images = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 8), st.integers(2, 8), st.integers(1, 3)),
                elements=st.floats(0, 1))
STREAMS = KeyedStream(bytes(range(32)))


class TestBitDepth:
    def test_one_bit_cutoff(self):
        assert D.reduce_bit_depth(np.array([0.4, 0.6, 0.5, 0.49999]), 1).tolist() == [0.0, 1.0, 1.0, 0.0]

    def test_grid_point(self):
        assert D.reduce_bit_depth(np.array([0.2]), 4)[0] == 3 / 15

    def test_rounding_example(self):
        assert D.reduce_bit_depth(np.array([0.33]), 4)[0] == 5 / 15

    def test_rejects_bits(self):
        with pytest.raises(ParameterError):
            D.reduce_bit_depth(np.zeros(3), 9)

    @pytest.mark.parametrize("bits", range(1, 9))
    def test_idempotent_and_levels(self, bits):
        x = np.random.default_rng(bits).random(100_000)
        s = D.reduce_bit_depth(x, bits)
        assert np.array_equal(D.reduce_bit_depth(s, bits), s)
        assert len(np.unique(s)) <= 2 ** bits
        L = 2 ** bits - 1
        assert np.array_equal(s, np.floor(x * L + 0.5) / L)


class TestMedian:
    def test_constant_fixed(self):
        x = np.full((1, 6, 6, 2), 0.37)
        assert np.array_equal(D.median_smooth(x, 3, 3), x)

    def test_center_is_fifth_order_statistic(self):
        vals = np.random.default_rng(0).permutation(9).astype(float) / 8
        x = np.zeros((1, 5, 5, 1))
        x[0, 1:4, 1:4, 0] = vals.reshape(3, 3)
        assert D.median_smooth(x, 3)[0, 2, 2, 0] == np.sort(vals)[4]

    def test_impulse_removed(self):
        x = np.zeros((1, 7, 7, 1))
        x[0, 3, 3, 0] = 1.0
        assert not D.median_smooth(x, 3).any()

    @settings(max_examples=40, deadline=None)
    @given(images, st.integers(1, 4), st.integers(1, 4))
    def test_outputs_come_from_window(self, x, kh, kw):
        out = D.median_smooth(x, kh, kw)
        vals = np.unique(x)
        mids = (vals[:, None] + vals[None, :]) / 2
        allowed = np.union1d(vals, mids.ravel())
        assert np.all(np.isin(out, allowed))
        assert out.min() >= 0 and out.max() <= 1


class TestNonLocalMeans:
    def test_constant_fixed(self):
        x = np.full((1, 9, 9, 1), 0.6)
        assert np.allclose(D.non_local_means(x, 5, 3, 4), x, atol=1e-15)

    def test_reduces_variance_on_repeated_noise(self):
        rng = np.random.default_rng(0)
        patch = 0.5 + 0.02 * rng.standard_normal((6, 6))
        img = np.clip(np.tile(patch, (2, 2)), 0, 1)[None, :, :, None]
        out = D.non_local_means(img, 7, 3, 10.0)
        assert out.var() < img.var()

    def test_tiny_strength_returns_self(self):
        x = np.random.default_rng(1).random((1, 8, 8, 1))
        assert np.allclose(D.non_local_means(x, 5, 3, 1e-3), x, atol=1e-12)

    def test_parameter_validation(self):
        with pytest.raises(ParameterError):
            D.nlmeans(3, 5, 1.0)


class TestRandomize:
    def test_zero_delta_identity(self):
        x = np.random.default_rng(0).random((4, 5, 5, 3))
        out = D.randomize_pixels(x, 0.0, STREAMS, np.arange(4))
        assert np.array_equal(out, x) and out is not x

    def test_clip(self):
        class Fixed:
            def symmetric(self, stream, shape, delta):
                return np.full(shape, 0.2)

        assert D.randomize_pixels(np.array([[[0.95]]]), 0.3, Fixed(), 0)[0, 0, 0] == 1.0

    def test_uniform_statistics(self):
        x = np.full((1, 100, 100, 1), 0.5)
        out = D.randomize_pixels(x, 0.1, STREAMS, [123])
        noise = out - 0.5
        sigma = 0.1 / np.sqrt(3) / np.sqrt(noise.size)
        assert abs(noise.mean()) <= 3 * sigma
        assert np.abs(noise).max() <= 0.1

    def test_reproducible_per_stream(self):
        x = np.random.default_rng(2).random((3, 4, 4, 1))
        a = D.randomize_pixels(x, 0.4, STREAMS, [1, 2, 3])
        b = D.randomize_pixels(x, 0.4, STREAMS, [1, 2, 3])
        c = D.randomize_pixels(x, 0.4, STREAMS, [1, 2, 4])
        assert a.tobytes() == b.tobytes()
        assert np.array_equal(a[:2], c[:2]) and not np.array_equal(a[2], c[2])

    def test_rejects_delta(self):
        with pytest.raises(ParameterError):
            D.randomize_pixels(np.zeros((1, 1, 1)), 1.5, STREAMS, 0)

    @settings(max_examples=40, deadline=None)
    @given(images, st.floats(0, 1))
    def test_bounded_and_closed(self, x, delta):
        out = D.randomize_pixels(x, delta, STREAMS, np.arange(x.shape[0]))
        assert out.min() >= 0 and out.max() <= 1
        assert np.all(np.abs(out - x) <= delta)


@settings(max_examples=30, deadline=None)
@given(images, st.sampled_from([D.bit_depth(1), D.bit_depth(3), D.median(2, 2), D.median(3, 3), D.nlmeans(3, 1, 8.0)]))
def test_squeezers_closed_and_pure(x, squeezer):
    before = x.copy()
    out = squeezer(x)
    assert np.array_equal(x, before)
    assert out.min() >= 0 and out.max() <= 1 + 1e-15


@pytest.mark.parametrize("sq", [D.bit_depth(2), D.median(3, 3), D.nlmeans(5, 3, 4.0)])
def test_constant_images_are_fixed_points(sq):
    x = np.full((2, 6, 6, 1), 2 / 3)
    assert np.allclose(sq(x), x, atol=1e-15)


def _model():
    rng = np.random.default_rng(0)
    return linear_model(rng.normal(size=(16, 3)), rng.normal(size=3), (4, 4, 1))


class TestPipelines:
    def test_zero_delta_equals_feature_squeezing(self):
        base = _model()
        x = np.random.default_rng(1).random((300, 4, 4, 1))
        for sq in (D.bit_depth(1), D.median(2, 2)):
            rs = RandomizedClassifier(base, D.RandomizedSqueezing(sq, 0.0), bytes(32))
            fs = RandomizedClassifier(base, D.FeatureSqueezing(sq), bytes(32))
            assert np.array_equal(rs.predict_probs(x), fs.predict_probs(x))
            assert np.array_equal(fs.predict_probs(x), base.predict_probs(sq(x)))

    def test_one_model_call_per_prediction(self):
        calls = []
        inner = _model()

        class Counting:
            spec, num_classes = inner.spec, inner.num_classes

            def predict_probs(self, x):
                calls.append(len(x))
                return inner.predict_probs(x)

        rc = RandomizedClassifier(Counting(), D.RandomizedSqueezing(D.median(3, 3), 0.3), bytes(32))
        rc.predict_probs(np.random.default_rng(0).random((7, 4, 4, 1)))
        assert calls == [7]

    def test_input_not_mutated(self):
        base = _model()
        x = np.random.default_rng(2).random((5, 4, 4, 1))
        before = x.copy()
        for d in (D.RandomizedSqueezing(D.median(3, 3), 0.5), D.RegionBased(0.2, 10), D.CroppingRescaling(3, 5)):
            RandomizedClassifier(base, d, bytes(32)).predict_probs(x)
        assert np.array_equal(x, before)


class TestRegion:
    def test_zero_radius_equals_base(self):
        base = _model()
        x = np.random.default_rng(3).random((200, 4, 4, 1))
        rc = RandomizedClassifier(base, D.RegionBased(0.0, 25), bytes(32))
        assert np.array_equal(rc.predict_label(x), base.predict_label(x))

    def test_single_member_is_one_perturbed_prediction(self):
        base = _model()
        x = np.random.default_rng(4).random((20, 4, 4, 1))
        d = D.RegionBased(0.3, 1)
        ids = np.arange(20, dtype=np.uint64)
        probs = d.probs(base, x, STREAMS, ids)
        noisy = np.clip(x + np.stack([STREAMS.symmetric(int(s), (1, 4, 4, 1), 0.3)[0] for s in ids]), 0, 1)
        assert np.array_equal(np.argmax(probs, axis=1), base.predict_label(noisy))

    def test_vote_split_binomial(self):
        # class 0 iff the perturbed pixel is below 0.52: P(vote 0) = P(u < 0.02) = 0.6 at x=0.5, r=0.1
        base = TableClassifier(lambda z: np.stack([(z[:, 0, 0, 0] < 0.52) * 1.0, (z[:, 0, 0, 0] >= 0.52) * 1.0], 1),
                               2, (1, 1, 1))
        m, trials = 25, 400
        d = D.RegionBased(0.1, m)
        x = np.full((trials, 1, 1, 1), 0.5)
        wins = (np.argmax(d.probs(base, x, STREAMS, np.arange(trials, dtype=np.uint64)), axis=1) == 0).mean()
        from math import comb

        p = 0.6
        expected = sum(comb(m, k) * p ** k * (1 - p) ** (m - k) for k in range(13, m + 1))
        assert abs(wins - expected) <= 3 * np.sqrt(expected * (1 - expected) / trials)

    def test_ties_go_to_lowest_class(self):
        base = TableClassifier(lambda z: np.tile([0.2, 0.4, 0.4], (len(z), 1)), 3, (1, 1, 1))
        d = D.RegionBased(0.1, 4)
        assert np.argmax(d.probs(base, np.full((1, 1, 1, 1), 0.5), STREAMS, np.array([0], np.uint64))) == 1

    def test_tune_radius(self, toy_model, synthetic):
        val = synthetic[1].head(60)
        r = D.tune_hypercube_radius(toy_model, val, 0.02, grid=(0.0, 0.05, 0.1, 0.2, 0.4, 0.8), m=15)
        assert r in (0.0, 0.05, 0.1, 0.2, 0.4, 0.8)
        if r > 0:
            rc = RandomizedClassifier(toy_model, D.RegionBased(r, 15), D.key_from_seed(("radius", 0)))
            ids = np.array([D.stream_id("tune", i) for i in range(len(val))], dtype=np.uint64)
            assert accuracy(rc, val, ids) >= accuracy(toy_model, val) - 0.02

    def test_tune_radius_warns_when_nothing_fits(self):
        base = TableClassifier(lambda z: np.stack([(z[:, 0, 0, 0] < 0.5) * 1.0, (z[:, 0, 0, 0] >= 0.5) * 1.0], 1),
                               2, (1, 1, 1))
        from evadelab import LabeledDataset

        val = LabeledDataset(np.full((30, 1, 1, 1), 0.49), np.zeros(30, int), 2)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            assert D.tune_hypercube_radius(base, val, 0.0, grid=(0.3, 0.5), m=9) == 0.0
        assert any("r=0" in str(w.message) for w in caught)


class TestCrop:
    def test_bilinear_ramp_oracle(self):
        ramp = np.arange(16, dtype=float).reshape(1, 4, 4, 1) / 15
        out = D.crop_rescale(ramp[0], 1, 1, 2)[:, :, 0]
        # half-pixel centres: source coords (-0.25, 0.25, 0.75, 1.25) clamp to (0, 0.25, 0.75, 1)
        crop = ramp[0, 1:3, 1:3, 0]
        w = np.array([[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])
        assert np.allclose(out, w @ crop @ w.T, atol=1e-15)
        assert out[0, 0] == ramp[0, 1, 1, 0] and out[3, 3] == ramp[0, 2, 2, 0]

    def test_full_size_crop_equals_base(self):
        base = _model()
        x = np.random.default_rng(5).random((30, 4, 4, 1))
        rc = RandomizedClassifier(base, D.CroppingRescaling(4, 5), bytes(32))
        assert np.array_equal(rc.predict_label(x), base.predict_label(x))
        assert np.allclose(D.random_crop_rescale(x[0], 4, STREAMS, 9), x[0], atol=1e-15)

    def test_constant_image_stays_constant(self):
        x = np.full((6, 6, 1), 0.3)
        assert np.allclose(D.random_crop_rescale(x, 3, STREAMS, 1), x, atol=1e-15)

    def test_vjp_is_adjoint(self):
        rng = np.random.default_rng(6)
        x, g = rng.random((7, 6, 2)), rng.random((7, 6, 2))
        lhs = np.sum(D.crop_rescale(x, 1, 2, 4) * g)
        rhs = np.sum(x * D.crop_rescale_vjp(g, x.shape, 1, 2, 4))
        assert abs(lhs - rhs) < 1e-12

    def test_crop_size_checked(self):
        with pytest.raises(ParameterError):
            D.random_crop_rescale(np.zeros((4, 4, 1)), 5, STREAMS, 0)

    def test_train_with_crops_runs(self, synthetic):
        from evadelab import TrainConfig, mlp_spec

        tr, te = synthetic
        m = D.train_with_crops(mlp_spec(tr.image_shape, hidden=(16,), num_classes=4), tr, 6,
                               TrainConfig(epochs=5, seed=0, learning_rate=0.1))
        assert accuracy(m, te) > 0.5


class TestDetector:
    def test_identical_predictions_are_legitimate(self):
        base = TableClassifier(lambda z: np.tile([0.3, 0.7], (len(z), 1)), 2, (2, 2, 1))
        x = np.random.default_rng(0).random((3, 2, 2, 1))
        assert not D.squeeze_discrepancy_detect(base, [D.bit_depth(1)], x, 1e-9).any()

    def test_maximal_discrepancy(self):
        base = TableClassifier(lambda z: np.stack([(z[:, 0, 0, 0] > 0.55) * 1.0, (z[:, 0, 0, 0] <= 0.55) * 1.0], 1),
                               2, (1, 1, 1))
        x = np.full((1, 1, 1, 1), 0.52)
        assert D.squeeze_discrepancy(base, [D.bit_depth(1)], x)[0] == 2.0
        assert D.squeeze_discrepancy_detect(base, [D.bit_depth(1)], x, 1.99)[0]

    def test_percentile_threshold_false_positives(self, toy_model, synthetic):
        fit, held = synthetic[1].split(60)
        sq = [D.bit_depth(1), D.median(2, 2)]
        t = D.fit_detection_threshold(toy_model, sq, fit, 95)
        assert np.mean(D.squeeze_discrepancy_detect(toy_model, sq, fit.images, t)) <= 0.05
        assert np.mean(D.squeeze_discrepancy_detect(toy_model, sq, held.images, t)) <= 0.15


class TestDescriptors:
    @pytest.mark.parametrize("text,cls", [
        ("bit_depth:1", D.FeatureSqueezing), ("median:3x3", D.FeatureSqueezing), ("nlmeans:11-3-4", D.FeatureSqueezing),
        ("randsqueeze:median:3x3:delta=0.5", D.RandomizedSqueezing), ("region:r=0.1:m=100", D.RegionBased),
        ("croprescale:s=24:n=30", D.CroppingRescaling), ("none", D.Defense),
    ])
    def test_parse(self, text, cls):
        d = D.parse_defense(text)
        assert isinstance(d, cls)
        assert D.parse_defense(d.describe()).describe() == d.describe()

    def test_values(self):
        d = D.parse_defense("randsqueeze:nlmeans:11-3-4:delta=0.25")
        assert d.squeezer.params == (11, 3, 4.0) and d.delta == 0.25
        r = D.parse_defense("region:r=0.1:m=100")
        assert (r.r, r.m) == (0.1, 100)

    @pytest.mark.parametrize("bad", ["median:3", "bit_depth:0", "randsqueeze:median:3x3", "region:q=1", "blur:3",
                                     "croprescale:n=3", "randsqueeze:bit_depth:1:delta=2"])
    def test_errors(self, bad):
        with pytest.raises(ConfigError):
            D.parse_defense(bad)
