"""Recommender network: forward/backward correctness, training, ranking.

The gradient checks use central finite differences as the independent
oracle; ranking and accuracy checks use hand-built traces with planted
winners.
"""

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from aicons.domain import LabeledRecord, MonitoringSample, label_group
from aicons import recommender as rec
from aicons.recommender import (AccuracyEvaluator, DegenerateDataError,
                                ModelConfig, ModelParams, RecommenderError,
                                accuracy, cosine_similarity, embed,
                                embed_samples, fedavg, init_params,
                                margin_loss, margin_loss_and_grads,
                                rank_nodes, reference_embedding, train_local)


def make_sample(node_id=0, **overrides) -> MonitoringSample:
    fields = dict(node_id=node_id, cpu_tdp_w=65.0, cpu_usage=0.5,
                  mem_usage=0.4, cpi=1.2, bandwidth_kbps=10000.0,
                  cpu_time_s=2.0)
    fields.update(overrides)
    return MonitoringSample(**fields)


def planted_rounds(n_rounds, n_nodes=10, planted=2, seed=0, random_labels=False):
    """Labeled rounds where one node's samples are systematically superior."""
    rng = np.random.default_rng(seed)
    rounds = []
    for _ in range(n_rounds):
        samples = []
        for i in range(n_nodes):
            boosted = i == planted and not random_labels
            bw = (40000.0 if boosted else 6000.0) * rng.uniform(0.7, 1.3)
            usage = rng.uniform(0.05, 0.25) if boosted else rng.uniform(0.3, 0.95)
            tdp = 35.0 if boosted else float(rng.choice([65.0, 95.0, 125.0]))
            samples.append(MonitoringSample(
                node_id=i, cpu_tdp_w=tdp, cpu_usage=float(usage),
                mem_usage=float(rng.uniform(0.2, 0.8)),
                cpi=float(rng.uniform(0.5, 3.0)),
                bandwidth_kbps=float(bw),
                cpu_time_s=float(rng.uniform(0.5, 4.0))))
        if random_labels:
            winner = int(rng.integers(n_nodes))
        else:
            winner = label_group(samples)
        rounds.append([LabeledRecord(s, i == winner)
                       for i, s in enumerate(samples)])
    return rounds


class TestEmbed:
    def test_zero_weights_give_bias_determined_constant(self):
        cfg = ModelConfig(seed=1)
        p = init_params(cfg)
        zeroed = ModelParams(
            weights=tuple(np.zeros_like(w) for w in p.weights),
            biases=p.biases, feature_min=p.feature_min,
            feature_max=p.feature_max)
        z1 = embed(np.array(make_sample().features()), zeroed)
        z2 = embed(np.array(make_sample(bandwidth_kbps=99999.0).features()),
                   zeroed)
        npt.assert_array_equal(z1, z2)
        npt.assert_array_equal(z1, zeroed.biases[2])

    def test_deterministic(self):
        p = init_params(ModelConfig(seed=2))
        x = np.array(make_sample().features())
        npt.assert_array_equal(embed(x, p), embed(x, p))

    def test_dimension_mismatch_rejected(self):
        p = init_params(ModelConfig(seed=2))
        with pytest.raises(RecommenderError):
            embed(np.ones(4), p)

    def test_output_gradient_matches_finite_differences(self):
        # directional loss c.z(x): analytic grads via backward_pass vs
        # central differences on every weight entry
        cfg = ModelConfig(input_dim=4, hidden_dims=(5, 4), embed_dim=3, seed=3)
        params = init_params(cfg)
        rng = np.random.default_rng(4)
        x = rng.uniform(0.0, 1.0, size=(2, 4))
        c = rng.normal(size=(2, 3))

        def loss_of(p: ModelParams) -> float:
            z, _ = rec.forward_pass(p, rec.normalize_features(x, p))
            return float((z * c).sum())

        z, cache = rec.forward_pass(params, rec.normalize_features(x, params))
        grads_w, grads_b = rec.backward_pass(params, cache, c)
        for which, analytic in (("weights", grads_w), ("biases", grads_b)):
            for layer in range(3):
                arrays = getattr(params, which)
                grad = analytic[layer]
                it = np.ndindex(arrays[layer].shape)
                for idx in it:
                    eps = 1e-6
                    bumped = [a.copy() for a in arrays]
                    bumped[layer][idx] += eps
                    up = ModelParams(
                        weights=tuple(bumped) if which == "weights" else params.weights,
                        biases=tuple(bumped) if which == "biases" else params.biases,
                        feature_min=params.feature_min,
                        feature_max=params.feature_max)
                    bumped2 = [a.copy() for a in arrays]
                    bumped2[layer][idx] -= eps
                    down = ModelParams(
                        weights=tuple(bumped2) if which == "weights" else params.weights,
                        biases=tuple(bumped2) if which == "biases" else params.biases,
                        feature_min=params.feature_min,
                        feature_max=params.feature_max)
                    fd = (loss_of(up) - loss_of(down)) / (2 * eps)
                    scale = max(1.0, abs(fd))
                    assert abs(grad[idx] - fd) / scale < 1e-4


class TestCosine:
    def test_identical_vectors(self):
        assert cosine_similarity([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_derived_value(self):
        # dot = 4+10+18 = 32; |a| = sqrt(14), |b| = sqrt(77)
        expected = 32.0 / (math.sqrt(14.0) * math.sqrt(77.0))
        assert abs(cosine_similarity([1, 2, 3], [4, 5, 6]) - expected) < 1e-12
        assert abs(expected - 0.9746318) < 1e-7

    def test_zero_norm_rejected(self):
        with pytest.raises(RecommenderError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    def test_scale_invariance(self):
        a, b = np.array([0.3, -1.2, 0.7]), np.array([2.0, 0.1, -0.4])
        assert cosine_similarity(a, b) == pytest.approx(
            cosine_similarity(3.7 * a, 0.05 * b), abs=1e-12)

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=8),
           st.lists(st.floats(-100, 100), min_size=2, max_size=8))
    @settings(max_examples=200)
    def test_hypothesis_bounds(self, a, b):
        n = min(len(a), len(b))
        a, b = np.array(a[:n]), np.array(b[:n])
        if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
            return
        assert -1.0 <= cosine_similarity(a, b) <= 1.0


class TestMarginLoss:
    def test_hinge_inactive(self):
        anchor, pos, neg = [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]
        assert margin_loss(anchor, [pos], [neg], 0.1) == 0.0

    def test_worst_case_hinge(self):
        anchor = [1.0, 0.0]
        assert margin_loss(anchor, [[0.0, 1.0]], [[1.0, 0.0]], 0.1) == \
            pytest.approx(1.1)

    def test_derived_substitution(self):
        # construct exact cosine values 0.6 (positive) and 0.55 (negative)
        anchor = [1.0, 0.0]
        pos = [0.6, math.sqrt(1 - 0.6**2)]
        neg = [0.55, math.sqrt(1 - 0.55**2)]
        assert margin_loss(anchor, [pos], [neg], 0.1) == pytest.approx(0.05)

    def test_empty_sets_rejected(self):
        with pytest.raises(RecommenderError):
            margin_loss([1.0, 0.0], [], [[0.0, 1.0]], 0.1)
        with pytest.raises(RecommenderError):
            margin_loss([1.0, 0.0], [[0.0, 1.0]], [], 0.1)

    def test_non_negative_on_random_embeddings(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            vecs = rng.normal(size=(5, 4))
            assert margin_loss(vecs[0], [vecs[1], vecs[2]],
                               [vecs[3], vecs[4]], 0.2) >= 0.0


class TestMarginLossGradients:
    def test_analytic_gradients_match_finite_differences(self):
        cfg = ModelConfig(input_dim=3, hidden_dims=(4, 4), embed_dim=3,
                          margin=0.5, seed=11)
        params = init_params(cfg)
        rng = np.random.default_rng(12)
        x_raw = rng.uniform(0.0, 1.0, size=(8, 3))
        anchors = np.array([0, 1])
        pos = np.array([[2, 3], [4, 2]])
        neg = np.array([[5, 6], [7, 5]])

        loss, grads_w, grads_b = margin_loss_and_grads(
            params, x_raw, anchors, pos, neg, cfg.margin)
        assert loss > 1e-3  # hinge strictly active, finite differences valid

        def loss_of(p):
            value, _, _ = margin_loss_and_grads(p, x_raw, anchors, pos, neg,
                                                cfg.margin)
            return value

        for which, grads in (("weights", grads_w), ("biases", grads_b)):
            for layer in range(3):
                base = getattr(params, which)
                for idx in np.ndindex(base[layer].shape):
                    eps = 1e-6
                    up_arrays = [a.copy() for a in base]
                    up_arrays[layer][idx] += eps
                    down_arrays = [a.copy() for a in base]
                    down_arrays[layer][idx] -= eps
                    if which == "weights":
                        up = ModelParams(tuple(up_arrays), params.biases,
                                         params.feature_min, params.feature_max)
                        down = ModelParams(tuple(down_arrays), params.biases,
                                           params.feature_min, params.feature_max)
                    else:
                        up = ModelParams(params.weights, tuple(up_arrays),
                                         params.feature_min, params.feature_max)
                        down = ModelParams(params.weights, tuple(down_arrays),
                                           params.feature_min, params.feature_max)
                    fd = (loss_of(up) - loss_of(down)) / (2 * eps)
                    scale = max(1.0, abs(fd))
                    assert abs(grads[layer][idx] - fd) / scale < 1e-4, \
                        f"{which}[{layer}]{idx}"


class TestTraining:
    def flat(self, rounds):
        return [r for rnd in rounds for r in rnd]

    def test_zero_epochs_returns_init_unchanged(self):
        cfg = ModelConfig(seed=5, epochs=0)
        init = init_params(cfg)
        out = train_local(self.flat(planted_rounds(5)), init, cfg)
        assert out is init

    def test_deterministic_given_seed(self):
        cfg = ModelConfig(seed=6, epochs=5)
        data = self.flat(planted_rounds(10))
        a = train_local(data, init_params(cfg), cfg)
        b = train_local(data, init_params(cfg), cfg)
        for x, y in zip(a.arrays(), b.arrays()):
            npt.assert_array_equal(x, y)

    def test_loss_decreases_on_separable_trace(self):
        cfg = ModelConfig(seed=7, epochs=60, learning_rate=0.05)
        data = self.flat(planted_rounds(20, seed=3))  # 200 records
        init = init_params(cfg)
        first = rec.epoch_loss(data, init, cfg, seed=99)
        trained = train_local(data, init, cfg)
        last = rec.epoch_loss(data, trained, cfg, seed=99)
        assert last < first

    def test_degenerate_data_rejected(self):
        cfg = ModelConfig(seed=8, epochs=1)
        all_winners = [LabeledRecord(make_sample(i), True) for i in range(4)]
        no_winners = [LabeledRecord(make_sample(i), False) for i in range(4)]
        with pytest.raises(DegenerateDataError):
            train_local(all_winners, init_params(cfg), cfg)
        with pytest.raises(DegenerateDataError):
            train_local(no_winners, init_params(cfg), cfg)

    def test_normalization_constants_fitted_from_data(self):
        cfg = ModelConfig(seed=9, epochs=1)
        data = self.flat(planted_rounds(5, seed=4))
        trained = train_local(data, init_params(cfg), cfg)
        x = rec.features_matrix([r.sample for r in data])
        npt.assert_allclose(trained.feature_min, x.min(axis=0))
        npt.assert_allclose(trained.feature_max, x.max(axis=0))


class TestFedavg:
    def test_single_model_identity(self):
        p = init_params(ModelConfig(seed=10))
        out = fedavg([p])
        for a, b in zip(out.arrays(), p.arrays()):
            npt.assert_array_equal(a, b)

    def test_symmetric_models_cancel(self):
        p = init_params(ModelConfig(seed=11))
        negated = ModelParams(
            weights=tuple(-w for w in p.weights),
            biases=tuple(-b for b in p.biases),
            feature_min=p.feature_min, feature_max=p.feature_max)
        out = fedavg([p, negated])
        for w in out.weights:
            npt.assert_array_equal(w, np.zeros_like(w))
        for b in out.biases:
            npt.assert_array_equal(b, np.zeros_like(b))

    def test_elementwise_mean_value(self):
        base = init_params(ModelConfig(seed=12))

        def with_first_weight(value):
            w = [x.copy() for x in base.weights]
            w[0][0, 0] = value
            return ModelParams(tuple(w), base.biases, base.feature_min,
                               base.feature_max)

        out = fedavg([with_first_weight(1.0), with_first_weight(2.0),
                      with_first_weight(6.0)])
        assert out.weights[0][0, 0] == pytest.approx(3.0)

    def test_permutation_invariant_and_idempotent(self):
        models = [init_params(ModelConfig(seed=s)) for s in (1, 2, 3)]
        a = fedavg(models)
        b = fedavg(models[::-1])
        for x, y in zip(a.arrays(), b.arrays()):
            npt.assert_allclose(x, y, atol=1e-15)
        same = fedavg([models[0]] * 5)
        for x, y in zip(same.arrays(), models[0].arrays()):
            npt.assert_allclose(x, y)

    def test_empty_and_mismatched_rejected(self):
        with pytest.raises(RecommenderError):
            fedavg([])
        a = init_params(ModelConfig(seed=1))
        b = init_params(ModelConfig(seed=1, hidden_dims=(8, 8)))
        with pytest.raises(RecommenderError):
            fedavg([a, b])


class TestRankNodes:
    def test_singleton(self):
        p = init_params(ModelConfig(seed=13))
        sample = make_sample(node_id=4)
        ref = embed(np.array(sample.features()), p)
        ranked = rank_nodes(p, [sample], ref)
        assert ranked[0][0] == 4 and len(ranked) == 1

    def test_tie_breaks_to_lower_node_id(self):
        p = init_params(ModelConfig(seed=14))
        a = make_sample(node_id=7)
        b = make_sample(node_id=2)  # identical features, lower id
        ref = np.ones(p.embed_dim)
        ranked = rank_nodes(p, [a, b], ref)
        assert [nid for nid, _ in ranked] == [2, 7]

    def test_empty_rejected(self):
        p = init_params(ModelConfig(seed=15))
        with pytest.raises(RecommenderError):
            rank_nodes(p, [], np.ones(p.embed_dim))

    def test_output_permutation_and_sorted_scores(self):
        rng = np.random.default_rng(16)
        p = init_params(ModelConfig(seed=16))
        samples = [make_sample(node_id=i, bandwidth_kbps=float(b))
                   for i, b in enumerate(rng.uniform(100, 90000, 8))]
        ranked = rank_nodes(p, samples, np.ones(p.embed_dim))
        assert sorted(nid for nid, _ in ranked) == list(range(8))
        scores = [s for _, s in ranked]
        assert all(x >= y for x, y in zip(scores, scores[1:]))

    def test_planted_winner_ranks_first_after_training(self):
        rounds = planted_rounds(60, planted=2, seed=21)
        data = [r for rnd in rounds for r in rnd]
        cfg = ModelConfig(seed=21, epochs=120, learning_rate=0.05)
        model = train_local(data, init_params(cfg), cfg)
        winners = [next(r.sample for r in rnd if r.is_winner)
                   for rnd in rounds[-10:]]
        ref = reference_embedding(model, winners)
        probe = planted_rounds(10, planted=2, seed=77)
        hits = 0
        for rnd in probe:
            ranked = rank_nodes(model, [r.sample for r in rnd], ref)
            hits += ranked[0][0] == 2
        assert hits >= 8


class TestAccuracy:
    def test_perfect_predictor_scores_one(self):
        rounds = planted_rounds(40, planted=3, seed=31)
        data = [r for rnd in rounds for r in rnd]
        cfg = ModelConfig(seed=31, epochs=120, learning_rate=0.05)
        model = train_local(data, init_params(cfg), cfg)
        test = planted_rounds(15, planted=3, seed=32)
        winners = [next(r.sample for r in rnd if r.is_winner) for rnd in rounds]
        assert accuracy(model, test, winners) == 1.0

    def test_single_node_rounds_forced_choice(self):
        p = init_params(ModelConfig(seed=33))
        rounds = [[LabeledRecord(make_sample(node_id=0,
                                             bandwidth_kbps=float(b)), True)]
                  for b in (1000, 2000, 3000)]
        assert accuracy(p, rounds) == 1.0

    def test_random_model_on_random_labels_near_uniform_baseline(self):
        # winner labels drawn independently of features: any fixed model
        # matches the uniform-guess rate of 1/10
        rounds = planted_rounds(1000, seed=34, random_labels=True)
        p = init_params(ModelConfig(seed=35))
        acc = accuracy(p, rounds)
        assert abs(acc - 0.1) < 0.05

    def test_round_without_exactly_one_winner_rejected(self):
        bad = [[LabeledRecord(make_sample(0), True),
                LabeledRecord(make_sample(1), True)]]
        with pytest.raises(RecommenderError):
            AccuracyEvaluator(bad)

    def test_empty_test_set_rejected(self):
        with pytest.raises(RecommenderError):
            AccuracyEvaluator([])

    def test_batched_evaluator_matches_single(self):
        rounds = planted_rounds(12, seed=36)
        winners = [next(r.sample for r in rnd if r.is_winner) for rnd in rounds]
        evaluator = AccuracyEvaluator(rounds, winners)
        models = [init_params(ModelConfig(seed=s)) for s in range(6)]
        singles = [evaluator.evaluate(m) for m in models]
        x_norm, ref_norm = evaluator.normalized_inputs(models[0])
        stacked_w = [np.stack([m.weights[i] for m in models]) for i in range(3)]
        stacked_b = [np.stack([m.biases[i] for m in models]) for i in range(3)]
        batch = evaluator.evaluate_many(stacked_w, stacked_b, x_norm, ref_norm)
        npt.assert_allclose(batch, singles, atol=1e-12)


class TestSerializationRoundTrip:
    def test_bytes_round_trip(self):
        p = train_local([r for rnd in planted_rounds(5) for r in rnd],
                        init_params(ModelConfig(seed=40, epochs=2)),
                        ModelConfig(seed=40, epochs=2))
        again = ModelParams.from_bytes(p.to_bytes())
        for a, b in zip(p.arrays(), again.arrays()):
            npt.assert_array_equal(a, b)
        assert p.to_bytes() == again.to_bytes()

    def test_stream_is_little_endian_float64(self):
        p = init_params(ModelConfig(seed=41))
        blob = p.to_bytes()
        total = sum(a.size for a in p.arrays())
        assert blob.endswith(
            np.ascontiguousarray(p.feature_max, dtype="<f8").tobytes())
        assert len(blob) > total * 8
