import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evadelab import attacks as A
from evadelab.defenses import IDENTITY, NO_DEFENSE, FeatureSqueezing, RandomizedSqueezing, bit_depth, median
from evadelab.errors import ConfigError, ParameterError
from evadelab.prng import KeyedStream, key_from_seed, stream_id

from conftest import linear_model


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TestDistances:
    def test_direct_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.random((5, 4, 4, 1))
        xa = x.copy()
        xa[:, 0, 0, 0] = 1 - xa[:, 0, 0, 0]
        xa[:, 1, 2, 0] = 0.0
        d0, d2, dinf = A.distances(x, xa)
        for i in range(5):
            diffs = [abs(a - b) for a, b in zip(x[i].ravel(), xa[i].ravel())]
            assert d0[i] == sum(1 for d in diffs if d > 1e-12)
            assert abs(d2[i] - sum(d * d for d in diffs) ** 0.5) <= 1e-12
            assert dinf[i] == max(diffs)

    def test_single_image_scalars(self):
        assert A.distances(np.zeros((2, 2, 1)), np.zeros((2, 2, 1))) == (0.0, 0.0, 0.0)

    def test_targets(self):
        assert A.target_next(np.array([0, 9, 4]), 10).tolist() == [1, 0, 5]
        assert A.target_least_likely(np.array([[0.5, 0.2, 0.2, 0.1], [0.1, 0.1, 0.4, 0.4]])).tolist() == [3, 0]


class TestFgsm:
    def test_zero_eps_is_identity(self, toy_model, synthetic):
        x, y = synthetic[1].images[:10], synthetic[1].labels[:10]
        res = A.fgsm(toy_model, x, y, 0.0)
        assert np.array_equal(res.x_adv, x)

    def test_linear_closed_form(self):
        # for softmax cross-entropy on z = xW + b the input gradient is W (p - onehot)
        rng = np.random.default_rng(1)
        W, b = rng.normal(size=(6, 3)), rng.normal(size=3)
        model = linear_model(W, b, (1, 6, 1))
        x = rng.random((4, 1, 6, 1))
        y = np.array([0, 1, 2, 1])
        p = softmax(x.reshape(4, 6) @ W + b)
        grad = (p - np.eye(3)[y]) @ W.T
        expect = np.clip(x.reshape(4, 6) + 0.1 * np.sign(grad), 0, 1)
        assert np.array_equal(A.fgsm(model, x, y, 0.1).x_adv.reshape(4, 6), expect)
        expect_t = np.clip(x.reshape(4, 6) - 0.1 * np.sign(grad), 0, 1)
        assert np.array_equal(A.fgsm(model, x, y, 0.1, targeted=True).x_adv.reshape(4, 6), expect_t)

    def test_rejects_out_of_range(self, toy_model):
        with pytest.raises(ParameterError):
            A.fgsm(toy_model, np.full((1, 8, 8, 1), 1.5), [0], 0.1)
        with pytest.raises(ParameterError):
            A.fgsm(toy_model, np.zeros((1, 8, 8, 1)), [0], -0.1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), eps=st.floats(0, 1), targeted=st.booleans())
def test_bim_single_step_equals_fgsm(toy_model, seed, eps, targeted):
    rng = np.random.default_rng(seed)
    x = rng.random((3, 8, 8, 1))
    y = rng.integers(0, 4, 3)
    a = A.fgsm(toy_model, x, y, eps, targeted)
    b = A.bim(toy_model, x, y, eps, eps, 1, targeted)
    assert a.x_adv.tobytes() == b.x_adv.tobytes()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), eps=st.floats(0, 1), alpha=st.floats(0, 0.5), iters=st.integers(1, 6))
def test_linf_budget_and_range(toy_model, seed, eps, alpha, iters):
    rng = np.random.default_rng(seed)
    x = rng.random((3, 8, 8, 1))
    y = rng.integers(0, 4, 3)
    for res in (A.fgsm(toy_model, x, y, eps), A.bim(toy_model, x, y, eps, alpha, iters)):
        assert np.all(res.dinf <= eps + 1e-9)
        assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), eps=st.floats(0, 0.5), iters=st.integers(1, 4))
def test_untargeted_steps_never_decrease_linear_loss(seed, eps, iters):
    # cross-entropy is convex in the input of a linear model, so a signed ascent step cannot lower it
    rng = np.random.default_rng(seed)
    W, b = rng.normal(size=(5, 3)), rng.normal(size=3)
    model = linear_model(W, b, (1, 5, 1))
    x = rng.random((4, 1, 5, 1))
    y = rng.integers(0, 3, 4)

    def loss(z):
        return -np.log(softmax(z.reshape(4, 5) @ W + b)[np.arange(4), y])

    before = loss(x)
    assert np.all(loss(A.fgsm(model, x, y, eps).x_adv) >= before - 1e-12)
    assert np.all(loss(A.bim(model, x, y, eps, eps / iters, iters).x_adv) >= before - 1e-12)


class TestJsma:
    def test_zero_budget_leaves_input(self, toy_model, synthetic):
        x = synthetic[1].images[:4]
        res = A.jsma(toy_model, x, [1, 2, 3, 0], 0)
        assert np.array_equal(res.x_adv, x)
        assert np.all(res.d0 == 0)

    def test_toy_pair_choice(self):
        # features 0 and 1 raise class 1 and lower class 0; feature 2 only helps class 0
        W = np.array([[-0.5, 2.0], [-0.2, 1.5], [1.0, 0.0], [0.0, 0.1]])
        model = linear_model(W, [1.0, 0.0], (1, 4, 1))
        x = np.zeros((1, 1, 4, 1))
        res = A.jsma(model, x, [1], budget=4)
        assert res.x_adv.ravel().tolist() == [1.0, 1.0, 0.0, 0.0]
        assert res.success[0] and res.iterations[0] == 1

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**31), budget=st.integers(0, 12))
    def test_budget_respected(self, toy_model, seed, budget):
        rng = np.random.default_rng(seed)
        x = rng.random((2, 8, 8, 1))
        res = A.jsma(toy_model, x, rng.integers(0, 4, 2), budget)
        assert np.all(res.d0 <= budget)
        assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1


class TestDeepFool:
    def test_binary_linear_closed_form(self):
        w = np.array([0.3, -0.2, 0.1, 0.4])
        model = linear_model(np.stack([np.zeros(4), w], axis=1), [0.0, -0.45], (1, 4, 1))
        x = np.full((1, 1, 4, 1), 0.5)
        f = float(w @ x.ravel()) - 0.45  # class-1 margin, negative so class 0 wins
        assert f < 0
        res = A.deepfool(model, x, [0], overshoot=0.02)
        expect = x.ravel() + 1.02 * (-f / (w @ w)) * w
        assert np.allclose(res.x_adv.ravel(), expect, atol=1e-12)
        assert res.success[0] and res.iterations[0] == 1

    def test_already_misclassified_untouched(self, toy_model, synthetic):
        x = synthetic[1].images[:5]
        wrong = (toy_model.predict_label(x) + 1) % 4
        res = A.deepfool(toy_model, x, wrong)
        assert np.array_equal(res.x_adv, x)

    def test_toy_success_and_range(self, toy_model, synthetic):
        x, y = synthetic[1].images[:10], synthetic[1].labels[:10]
        res = A.deepfool(toy_model, x, y)
        assert res.success_rate >= 0.9
        assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1


class TestCw:
    def test_toy_linear_near_optimal(self):
        w = np.array([0.5, -0.3, 0.2, 0.4, -0.1, 0.3])
        model = linear_model(np.stack([np.zeros(6), w], axis=1), [0.0, -1.2], (1, 6, 1))
        x = np.random.default_rng(0).uniform(0.35, 0.65, (1, 1, 6, 1))
        margin = 1.2 - float(w @ x.ravel())
        assert margin > 0
        optimal = margin / np.linalg.norm(w)
        res = A.cw_l2(model, x, [1], iters=300)
        assert res.success[0]
        assert optimal * (1 - 1e-9) <= res.d2[0] <= 1.1 * optimal

    def test_already_at_target_returns_input(self, toy_model, synthetic):
        x = synthetic[1].images[:3]
        res = A.cw_l2(toy_model, x, toy_model.predict_label(x), iters=5)
        assert np.array_equal(res.x_adv, x) and np.all(res.success)

    def test_output_in_range(self, toy_model, synthetic):
        x = synthetic[1].images[:3]
        res = A.cw_l2(toy_model, x, (toy_model.predict_label(x) + 1) % 4, search_steps=2, iters=20)
        assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1


class TestWhitebox:
    @pytest.mark.parametrize("objective,f", [("prob", lambda p: p), ("logprob", np.log)])
    def test_bpda_without_defense_is_plain_gradient(self, toy_model, synthetic, objective, f):
        x = synthetic[1].images[:4]
        t = np.array([0, 1, 2, 3])
        g = A.bpda_gradient(NO_DEFENSE, toy_model, x, t, objective=objective)
        h = 1e-6
        for i, j in [(0, 5), (2, 20), (3, 40)]:
            e = np.zeros(x[i].size)
            e[j] = h
            e = e.reshape((1,) + x.shape[1:])
            fp = f(toy_model.predict_probs(x[i:i + 1] + e)[0, t[i]])
            fm = f(toy_model.predict_probs(x[i:i + 1] - e)[0, t[i]])
            assert abs(g[i].ravel()[j] - (fp - fm) / (2 * h)) < 1e-6

    def test_bpda_evaluates_at_squeezed_point(self, toy_model, synthetic):
        x = synthetic[1].images[:3]
        sq = FeatureSqueezing(bit_depth(1))
        g = A.bpda_gradient(sq, toy_model, x, [1, 1, 1])
        assert np.allclose(g, A.bpda_gradient(NO_DEFENSE, toy_model, sq.sample_transform(x, None, None)[0], [1, 1, 1]))

    def test_eot_single_draw_matches_bpda(self, toy_model, synthetic):
        x = synthetic[1].images[:2]
        d = RandomizedSqueezing(median(2), 0.3)
        s = KeyedStream(key_from_seed(4))
        a = A.eot_gradient(d, toy_model, x, [2, 3], 1, s, 17)
        b = A.bpda_gradient(d, toy_model, x, [2, 3], s, stream_id(17, 0))
        assert np.array_equal(a, b)

    def test_eot_deterministic_defense_ignores_m(self, toy_model, synthetic):
        x = synthetic[1].images[:2]
        d = FeatureSqueezing(bit_depth(2))
        assert np.array_equal(A.eot_gradient(d, toy_model, x, [0, 1], 1), A.eot_gradient(d, toy_model, x, [0, 1], 20))

    def test_eot_is_mean_of_independent_draws(self, toy_model, synthetic):
        x = synthetic[1].images[:1]
        d = RandomizedSqueezing(IDENTITY, 0.3)
        s = KeyedStream(key_from_seed(9))
        g = A.eot_gradient(d, toy_model, x, [1], 10, s, 77)
        draws = [A.bpda_gradient(d, toy_model, x, [1], s, stream_id(77, j)) for j in range(10)]
        assert np.allclose(g, np.mean(draws, axis=0), rtol=0, atol=1e-15)

    def test_eot_variance_scales_inverse_m(self, toy_model, synthetic):
        # the probability-weighted gradient is heavy tailed, so the scaling is checked on log p
        x = synthetic[1].images[:1]
        d = RandomizedSqueezing(IDENTITY, 0.3)
        s = KeyedStream(key_from_seed(9))

        def spread(M):
            gs = np.stack([A.eot_gradient(d, toy_model, x, [1], M, s, stream_id(M, r), objective="logprob")[0]
                           for r in range(400)])
            return gs.var(axis=0).sum()

        v1, v10, v100 = spread(1), spread(10), spread(100)
        assert 6.5 < v1 / v10 < 15
        assert 6.5 < v10 / v100 < 15

    def test_zero_gradient_model_gives_zero_estimate(self):
        flat = linear_model(np.zeros((4, 3)), [0.0, 1.0, 2.0], (2, 2, 1))
        x = np.full((2, 2, 2, 1), 0.5)
        g = A.eot_gradient(RandomizedSqueezing(IDENTITY, 0.2), flat, x, [0, 1], 10)
        assert not g.any()

    def test_loop_trace_and_determinism(self, toy_model, synthetic):
        x = synthetic[1].images[:4]
        t = (toy_model.predict_label(x) + 1) % 4
        d = RandomizedSqueezing(bit_depth(4), 0.1)
        r1 = A.whitebox_attack_loop(toy_model, d, x, t, iters=15, step=0.05, M=4, E=3, seed=2)
        r2 = A.whitebox_attack_loop(toy_model, d, x, t, iters=15, step=0.05, M=4, E=3, seed=2)
        assert r1.trace["target_prob"].shape == (16, 4)
        assert np.array_equal(r1.trace["target_prob"], r2.trace["target_prob"])
        assert np.all(r1.trace["norm_l2"][0] == 0)
        assert np.all(np.diff(r1.trace["norm_l2"], axis=0) >= -0.05 - 1e-12)
        assert r1.trace["target_prob"][-1].mean() > r1.trace["target_prob"][0].mean()

    def test_loop_eps_ball(self, toy_model, synthetic):
        x = synthetic[1].images[:3]
        r = A.whitebox_attack_loop(toy_model, NO_DEFENSE, x, [0, 1, 2], iters=10, step=0.05, M=1, E=1, eps=0.1)
        assert np.all(r.dinf <= 0.1 + 1e-12)

    def test_stop_at_freezes_samples(self, toy_model, synthetic):
        x = synthetic[1].images[:4]
        t = (toy_model.predict_label(x) + 1) % 4
        r = A.whitebox_attack_loop(toy_model, NO_DEFENSE, x, t, iters=200, step=0.02, M=1, E=1, stop_at=0.6)
        it = A.iterations_to_reach(r.trace["target_prob"], 0.6)
        assert np.all(np.isfinite(it))
        assert r.trace["target_prob"].shape[0] == it.max() + 1
        for i, k in enumerate(it.astype(int)):
            assert np.all(r.trace["target_prob"][k:, i] == r.trace["target_prob"][k, i])

    def test_iterations_to_reach(self):
        trace = np.array([[0.1, 0.7, 0.0], [0.5, 0.8, 0.0], [0.65, 0.1, 0.2]])
        assert A.iterations_to_reach(trace, 0.6).tolist() == [2.0, 0.0, np.inf]


class TestDescriptors:
    def test_defaults_and_overrides(self):
        s = A.parse_attack("bim:next:eps=0.1")
        assert (s.kind, s.mode, s.options["eps"], s.options["iters"]) == ("bim", "next", 0.1, 10)
        assert A.parse_attack("jsma").mode == "next"
        assert A.parse_attack("whitebox:bpda").options["M"] == 1
        assert A.parse_attack(A.parse_attack("cw2:ll:kappa=2").describe()) == A.parse_attack("cw2:ll:kappa=2")

    @pytest.mark.parametrize("text", ["pgd", "fgsm:eps=abc", "fgsm:rho=1", "deepfool:next", "jsma:untargeted",
                                      "fgsm:what"])
    def test_bad_descriptors(self, text):
        with pytest.raises(ConfigError):
            A.parse_attack(text)

    def test_run_attack_dispatch(self, toy_model, synthetic):
        x, y = synthetic[1].images[:3], synthetic[1].labels[:3]
        res = A.run_attack("fgsm:next:eps=0.2", toy_model, x, y)
        assert np.array_equal(res.target, (y + 1) % 4)
        assert res.x_adv.tobytes() == A.fgsm(toy_model, x, (y + 1) % 4, 0.2, targeted=True).x_adv.tobytes()
        with pytest.raises(ConfigError):
            A.run_attack("whitebox", toy_model, x, y)
