import math

import numpy as np
import pytest

from altune.dataset import SynthConfig, make_pool, synth_pool, zscore_normalize
from altune.numerics import finite_diff_check
from altune.tapt import (
    Codebook,
    EncoderModel,
    TaptConfig,
    contrastive_loss,
    contrastive_loss_grad,
    make_mask,
    quantize,
    reconstruction_loss,
    save_encoder,
    load_encoder,
    tapt_batch_loss,
    tapt_train,
)


class TestMask:
    def test_ten_frames_mask_two(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            mask = make_mask(10, 0.15, rng)
            assert mask.size == 2  # round(1.5) = 2
            assert len(set(mask.tolist())) == 2
            assert (0 <= mask).all() and (mask < 10).all()

    def test_two_frames_mask_one(self):
        rng = np.random.default_rng(0)
        mask = make_mask(2, 0.15, rng)
        assert mask.size == 1

    def test_marginals_uniform_within_3_sigma(self):
        rng = np.random.default_rng(123)
        draws = 10_000
        counts = np.zeros(10, dtype=int)
        for _ in range(draws):
            counts[make_mask(10, 0.15, rng)] += 1
        p = 2 / 10
        sigma = math.sqrt(draws * p * (1 - p))
        assert (np.abs(counts - draws * p) < 3 * sigma).all()


class TestQuantize:
    def handmade_codebook(self):
        codewords = np.array(
            [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [0.0, 1.0 + 2.0]]
        )
        return Codebook(np.eye(2), codewords)

    def test_exact_codeword_hit(self):
        cb = self.handmade_codebook()
        code, zq = quantize(cb, np.array([-1.0, 0.0]))
        assert code == 2
        assert np.array_equal(zq, [-1.0, 0.0])

    def test_tie_breaks_to_lowest_index(self):
        codewords = np.array([[2.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 0.0 - 2.0], [1.0, 0.0 + 0.0]])
        # codewords 1 and 4 are NOT distinct -> use distinct set with a tie by geometry
        codewords = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 5.0], [0.0, -5.0]])
        cb = Codebook(np.eye(2), codewords)
        code, _ = quantize(cb, np.array([2.0, 0.0]))  # equidistant to 0 and 1
        assert code == 0

    def test_nearest_matches_brute_force(self):
        rng = np.random.default_rng(5)
        cb = Codebook.create(frame_dim=4, code_dim=3, size=16, rng=rng)
        for _ in range(50):
            frame = rng.standard_normal(4)
            code, zq = quantize(cb, frame)
            z = frame @ cb.projection
            dists = [float(((z - w) ** 2).sum()) for w in cb.codewords]
            assert dists[code] <= min(dists) + 1e-15
            assert np.array_equal(zq, cb.codewords[code])

    def test_distinct_codewords_enforced(self):
        with pytest.raises(ValueError, match="distinct"):
            Codebook(np.eye(2), np.array([[1.0, 0.0], [1.0, 0.0]]))


class TestContrastive:
    def test_single_pair_is_exactly_zero(self):
        zc = np.array([[0.3, 0.4]])
        zq = np.array([[1.0, -1.0]])
        assert contrastive_loss(zc, zq) == 0.0

    def test_two_pair_closed_form(self):
        zc = np.array([[1.0, 0.0], [0.0, 1.0]])
        zq = np.array([[1.0, 0.0], [0.0, 1.0]])
        # each position: sim to own target 1, to the other 0, temperature 0.1
        per_position = math.log(1.0 + math.exp(-10.0))
        assert contrastive_loss(zc, zq, 0.1) == pytest.approx(2 * per_position, abs=1e-12)
        assert per_position == pytest.approx(4.54e-5, abs=1e-7)

    def test_loss_decreases_as_positive_similarity_grows(self):
        # zq orthonormal; zc_0 rotates toward its target in a plane orthogonal
        # to every other target, so only the positive-pair similarity moves
        zq = np.eye(4)[:3]
        u = np.array([0.0, 0.0, 0.0, 1.0])
        losses = []
        for theta in (0.8, 0.6, 0.4, 0.2):
            zc0 = math.cos(theta) * zq[0] + math.sin(theta) * u
            zc = np.stack([zc0, zq[1], zq[2]])
            losses.append(contrastive_loss(zc, zq, 0.1))
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            contrastive_loss(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))

    def test_nonnegative_on_random_batches(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            n = int(rng.integers(1, 9))
            zc = rng.standard_normal((n, 5))
            zq = rng.standard_normal((n, 5))
            assert contrastive_loss(zc, zq) >= 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        zc = rng.standard_normal((6, 4))
        zq = rng.standard_normal((6, 4))
        _, grad = contrastive_loss_grad(zc, zq, 0.1)
        step = 1e-6
        for i in range(zc.shape[0]):
            for j in range(zc.shape[1]):
                zc[i, j] += step
                up = contrastive_loss(zc, zq, 0.1)
                zc[i, j] -= 2 * step
                down = contrastive_loss(zc, zq, 0.1)
                zc[i, j] += step
                numeric = (up - down) / (2 * step)
                assert abs(grad[i, j] - numeric) / max(1.0, abs(numeric)) < 1e-6


class TestReconstruction:
    def test_certain_prediction_is_zero(self):
        logits = np.array([[50.0, 0.0, 0.0]])
        assert reconstruction_loss(logits, np.array([0])) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_logits_over_eight_codes(self):
        logits = np.zeros((1, 8))
        assert reconstruction_loss(logits, np.array([3])) == pytest.approx(
            math.log(8), abs=1e-12
        )

    def test_hand_evaluated_two_positions(self):
        # softmax([ln 2, 0, 0]) = [0.5, 0.25, 0.25]
        row = np.array([math.log(2.0), 0.0, 0.0])
        logits = np.stack([row, row])
        targets = np.array([0, 1])  # probabilities 0.5 and 0.25
        expected = (-math.log(0.5) - math.log(0.25)) / 2
        assert reconstruction_loss(logits, targets) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(1.0397, abs=1e-4)

    def test_target_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            reconstruction_loss(np.zeros((1, 4)), np.array([4]))


def small_pool(seed=0, per_class=30):
    cfg = SynthConfig(
        classes=3, dim=16, per_class=per_class, separation=2.5, noise_rate=0.1, seed=seed
    )
    data, _ = synth_pool(cfg)
    pool, oracle = make_pool(data)
    pool, _ = zscore_normalize(pool)
    return pool, oracle


def small_tapt_config(**kw):
    base = dict(
        frames=8, code_dim=6, codebook_size=12, hidden=16, epochs=3, batch_size=16, seed=0
    )
    base.update(kw)
    return TaptConfig(**base)


class TestTaptTrain:
    def test_zero_epochs_leaves_weights_unchanged(self):
        pool, _ = small_pool()
        cfg = small_tapt_config(epochs=0)
        encoder = EncoderModel.create(pool.feature_dim, cfg)
        before = [p.copy() for p in encoder.params()]
        encoder, trace = tapt_train(encoder, pool, cfg)
        assert trace == []
        for p, b in zip(encoder.params(), before):
            assert np.array_equal(p, b)

    def test_loss_trace_nearly_monotone_over_first_epochs(self):
        # needs a pool large enough that epoch means average out mask noise
        cfg = SynthConfig(
            classes=4, dim=32, per_class=250, separation=2.5, noise_rate=0.1, seed=0
        )
        data, _ = synth_pool(cfg)
        pool, _ = make_pool(data)
        pool, _ = zscore_normalize(pool)
        tapt_cfg = TaptConfig(epochs=5, seed=0)
        encoder = EncoderModel.create(pool.feature_dim, tapt_cfg)
        _, trace = tapt_train(encoder, pool, tapt_cfg)
        assert len(trace) == 5
        for prev, nxt in zip(trace, trace[1:]):
            assert nxt <= prev * 1.05  # stochastic batching may tick up slightly

    def test_bit_identical_per_seed(self):
        pool, _ = small_pool()
        cfg = small_tapt_config(epochs=2, seed=11)
        enc_a, trace_a = tapt_train(EncoderModel.create(pool.feature_dim, cfg, seed=11), pool, cfg)
        enc_b, trace_b = tapt_train(EncoderModel.create(pool.feature_dim, cfg, seed=11), pool, cfg)
        assert trace_a == trace_b
        for pa, pb in zip(enc_a.params(), enc_b.params()):
            assert np.array_equal(pa, pb)

    def test_never_touches_the_oracle(self):
        pool, oracle = small_pool()
        cfg = small_tapt_config(epochs=2)
        tapt_train(EncoderModel.create(pool.feature_dim, cfg), pool, cfg)
        assert oracle.reveal_count == 0

    def test_combined_loss_gradient_passes_finite_diff(self):
        rng = np.random.default_rng(4)
        cfg = small_tapt_config(frames=4, code_dim=3, codebook_size=5, hidden=6)
        encoder = EncoderModel.create(8, cfg, seed=4)
        x = rng.standard_normal((5, 8))
        masks = [make_mask(4, 0.3, rng) for _ in range(5)]

        def loss_and_grad(_params):
            loss, grads, _ = tapt_batch_loss(encoder, x, masks, cfg.temperature)
            return loss, grads

        assert finite_diff_check(loss_and_grad, encoder.params()) < 1e-4


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path):
        pool, _ = small_pool()
        cfg = small_tapt_config(epochs=1, seed=6)
        encoder, _ = tapt_train(EncoderModel.create(pool.feature_dim, cfg, seed=6), pool, cfg)
        path = tmp_path / "enc.json"
        save_encoder(encoder, cfg, path)
        loaded, loaded_cfg = load_encoder(path)
        assert loaded_cfg == cfg
        for pa, pb in zip(encoder.params(), loaded.params()):
            assert np.array_equal(pa, pb)
        assert np.array_equal(loaded.codebook.projection, encoder.codebook.projection)
        assert np.array_equal(loaded.codebook.codewords, encoder.codebook.codewords)

    def test_rewrite_is_byte_identical(self, tmp_path):
        pool, _ = small_pool()
        cfg = small_tapt_config(epochs=1)
        encoder, _ = tapt_train(EncoderModel.create(pool.feature_dim, cfg), pool, cfg)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_encoder(encoder, cfg, p1)
        save_encoder(encoder, cfg, p2)
        assert p1.read_bytes() == p2.read_bytes()
