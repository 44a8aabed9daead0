import numpy as np
import pytest

from chanrank.tcn import (ChunkBatch, RankerConfig, RankerModel,
                          chunk_utterance, forward_chunk, infer_chunk_count,
                          load_checkpoint, parameter_census, save_checkpoint,
                          score_utterance, train_chunk_count)

TINY = RankerConfig(n_mels=8, input_proj=12, bottleneck=12, hidden=16,
                    blocks=1, sub_blocks=3, chunk_frames=24,
                    inference_overlap_factor=4)


def rand_feats(t, f=40, seed=0, loc=-5.0):
    return np.random.default_rng(seed).normal(loc, 2.0, (t, f))


class TestConfigAndCensus:
    def test_default_census_near_266k(self):
        census = parameter_census(RankerConfig())
        assert census["total"] == 266927
        assert abs(census["total"] - 266000) / 266000 <= 0.10

    def test_census_matches_live_parameters(self):
        for cfg in (RankerConfig(), TINY):
            model = RankerModel.build(cfg, seed=0)
            assert sum(p.size for p in model.params.values()) == \
                parameter_census(cfg)["total"]

    def test_census_per_group_breakdown(self):
        census = parameter_census(RankerConfig())
        assert census["in_norm"] == 80
        assert census["in_proj"] == 40 * 64 + 64
        assert census["block0"] == 17602
        assert census["out_norm"] == 128
        assert census["out_proj"] == 65

    def test_dilation_pattern(self):
        assert RankerConfig().dilations == (1, 2, 4, 8, 16)
        assert RankerConfig(sub_blocks=3,
                            chunk_frames=64).dilations == (1, 2, 4)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RankerConfig(kernel=2)
        with pytest.raises(ValueError):
            RankerConfig(input_proj=32, bottleneck=64)
        with pytest.raises(ValueError):
            RankerConfig(blocks=0)


class TestBuild:
    def test_same_seed_identical_parameters(self):
        a = RankerModel.build(RankerConfig(), seed=5)
        b = RankerModel.build(RankerConfig(), seed=5)
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name])

    def test_different_seed_differs(self):
        a = RankerModel.build(TINY, seed=1)
        b = RankerModel.build(TINY, seed=2)
        assert any(not np.array_equal(a.params[n], b.params[n])
                   for n in a.params)

    def test_norm_and_bias_init(self):
        m = RankerModel.build(TINY, seed=0)
        assert np.all(m.params["in_norm.gain"] == 1.0)
        assert np.all(m.params["in_norm.bias"] == 0.0)
        assert np.all(m.params["out_proj.bias"] == 0.0)
        assert np.all(m.params["block0.prelu1"] == 0.25)


class TestForward:
    def test_zero_chunk_zero_bias_scores_zero(self):
        model = RankerModel.build(TINY, seed=0)
        chunk = np.zeros((TINY.chunk_frames, TINY.n_mels))
        score, _ = forward_chunk(model, chunk)
        assert score == 0.0

    def test_identical_chunks_identical_scores(self):
        model = RankerModel.build(TINY, seed=1)
        chunk = rand_feats(TINY.chunk_frames, TINY.n_mels, seed=3)
        s1, _ = forward_chunk(model, chunk)
        s2, _ = forward_chunk(model, chunk.copy())
        assert s1 == s2

    def test_shape_mismatch_rejected(self):
        model = RankerModel.build(TINY, seed=1)
        with pytest.raises(ValueError):
            forward_chunk(model, np.zeros((TINY.chunk_frames, TINY.n_mels + 1)))

    def test_finite_scores_fuzz(self):
        # inputs in [-10, 10] through the full default architecture;
        # batched to keep activation memory modest
        model = RankerModel.build(RankerConfig(), seed=2)
        rng = np.random.default_rng(4)
        for lo in range(0, 1000, 50):
            chunks = rng.uniform(-10, 10, (50, 200, 40)).astype(np.float32)
            scores, _ = model.forward(chunks, np.full(50, 200),
                                      need_cache=False)
            assert np.all(np.isfinite(scores))

    def test_padding_does_not_change_score(self):
        model = RankerModel.build(TINY, seed=5)
        t_valid = 10
        frames = rand_feats(t_valid, TINY.n_mels, seed=6)
        padded = np.zeros((TINY.chunk_frames, TINY.n_mels))
        padded[:t_valid] = frames
        alone, _ = model.forward(padded[None], np.array([t_valid]))
        full = rand_feats(TINY.chunk_frames, TINY.n_mels, seed=7)
        both, _ = model.forward(np.stack([padded, full]),
                                np.array([t_valid, TINY.chunk_frames]))
        assert np.isclose(alone[0], both[0], atol=1e-6)

    def test_batch_matches_single(self):
        model = RankerModel.build(TINY, seed=8)
        chunks = np.stack([rand_feats(TINY.chunk_frames, TINY.n_mels, seed=s)
                           for s in range(4)])
        batch_scores, _ = model.forward(chunks, np.full(4, TINY.chunk_frames))
        for i in range(4):
            single, _ = model.forward(chunks[i:i + 1],
                                      np.array([TINY.chunk_frames]))
            assert np.isclose(batch_scores[i], single[0], atol=1e-6)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        model = RankerModel.build(TINY, seed=9, dtype=np.float64)
        chunks = rand_feats(TINY.chunk_frames, TINY.n_mels, seed=10)[None]
        _, cache = model.forward(chunks, np.array([TINY.chunk_frames]))
        grads, dx = model.backward(cache, np.zeros(1))
        assert all(np.all(g == 0.0) for g in grads.values())
        assert np.all(dx == 0.0)

    def test_padded_frames_get_zero_input_gradient(self):
        model = RankerModel.build(TINY, seed=11, dtype=np.float64)
        t_valid = 9
        chunk = np.zeros((1, TINY.chunk_frames, TINY.n_mels))
        chunk[0, :t_valid] = rand_feats(t_valid, TINY.n_mels, seed=12)
        _, cache = model.forward(chunk, np.array([t_valid]))
        _, dx = model.backward(cache, np.ones(1))
        assert np.all(dx[0, t_valid:, :] == 0.0)
        assert np.any(dx[0, :t_valid, :] != 0.0)

    def test_ten_parameter_subset_matches_fd(self):
        from chanrank.verify import ranker_gradient_check
        worst = ranker_gradient_check("pointwise_mse", dtype=np.float64,
                                      n_entries=10, cfg=TINY, seed=21)
        assert worst < 1e-4

    def test_input_gradient_matches_fd(self):
        model = RankerModel.build(TINY, seed=13, dtype=np.float64)
        chunk = rand_feats(TINY.chunk_frames, TINY.n_mels, seed=14)[None]
        valid = np.array([TINY.chunk_frames])
        _, cache = model.forward(chunk, valid)
        _, dx = model.backward(cache, np.ones(1))
        rng = np.random.default_rng(15)
        h = 1e-6
        for _ in range(10):
            t = int(rng.integers(0, TINY.chunk_frames))
            f = int(rng.integers(0, TINY.n_mels))
            up = chunk.copy(); up[0, t, f] += h
            dn = chunk.copy(); dn[0, t, f] -= h
            sp, _ = model.forward(up, valid)
            sm, _ = model.forward(dn, valid)
            numeric = (sp[0] - sm[0]) / (2 * h)
            assert abs(dx[0, t, f] - numeric) < 1e-5 * max(1.0, abs(numeric))


class TestChunking:
    def test_train_mode_spec_example(self):
        batch = chunk_utterance(rand_feats(450), "train")
        assert len(batch.valid) == 3
        assert list(batch.valid) == [200, 200, 50]

    def test_infer_mode_spec_example(self):
        batch = chunk_utterance(rand_feats(450), "infer")
        assert len(batch.valid) == 6
        assert list(batch.starts) == [0, 50, 100, 150, 200, 250]

    def test_short_utterance_single_padded_chunk(self):
        for mode in ("train", "infer"):
            batch = chunk_utterance(rand_feats(120), mode)
            assert len(batch.valid) == 1
            assert batch.valid[0] == 120
            assert np.all(batch.chunks[0, 120:, :] == 0.0)

    def test_count_formulas_random_lengths(self):
        rng = np.random.default_rng(16)
        for t in rng.integers(1, 5001, size=1000):
            t = int(t)
            assert train_chunk_count(t) == -(-t // 200)
            expect = max(1, (max(t, 200) - 200) // 50 + 1)
            assert infer_chunk_count(t) == expect

    def test_infer_tail_coverage(self):
        for t in (201, 349, 430, 999, 5000):
            batch = chunk_utterance(rand_feats(t), "infer")
            assert batch.starts[-1] + batch.valid[-1] == t

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError):
            chunk_utterance(rand_feats(100), "test")


class TestScoreUtterance:
    def test_single_chunk_equals_forward(self):
        model = RankerModel.build(TINY, seed=17)
        feats = rand_feats(TINY.chunk_frames, TINY.n_mels, seed=18)
        scores = score_utterance(model, [feats]).scores
        direct, _ = forward_chunk(model, feats)
        assert np.isclose(scores[0], direct, atol=1e-7)

    def test_duplicated_channel_same_score(self):
        model = RankerModel.build(TINY, seed=19)
        feats = rand_feats(60, TINY.n_mels, seed=20)
        scores = score_utterance(model, [feats, feats.copy()]).scores
        assert np.isclose(scores[0], scores[1], atol=1e-7)

    def test_permutation_equivariance(self):
        model = RankerModel.build(TINY, seed=21)
        feats = [rand_feats(50, TINY.n_mels, seed=30 + i) for i in range(4)]
        base = score_utterance(model, feats).scores
        perm = [2, 0, 3, 1]
        permuted = score_utterance(model, [feats[i] for i in perm]).scores
        assert np.allclose(permuted, base[perm], atol=1e-7)

    def test_empty_channels_rejected(self):
        model = RankerModel.build(TINY, seed=22)
        with pytest.raises(ValueError):
            score_utterance(model, [])


class TestCheckpoint:
    def test_roundtrip_byte_stable(self, tmp_path):
        model = RankerModel.build(TINY, seed=23)
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        save_checkpoint(p1, model)
        restored = load_checkpoint(p1)
        save_checkpoint(p2, restored)
        assert p1.read_bytes() == p2.read_bytes()
        assert restored.config == model.config
        for name in model.params:
            assert np.array_equal(restored.params[name], model.params[name])

    def test_scores_survive_roundtrip(self, tmp_path):
        model = RankerModel.build(TINY, seed=24)
        save_checkpoint(tmp_path / "m.bin", model)
        restored = load_checkpoint(tmp_path / "m.bin")
        feats = rand_feats(40, TINY.n_mels, seed=25)
        a = score_utterance(model, [feats]).scores
        b = score_utterance(restored, [feats]).scores
        assert np.array_equal(a, b)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_checkpoint(path)
