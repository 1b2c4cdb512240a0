import collections

import numpy as np
import pytest

from taskforge.codebook import (
    BalanceConfig,
    IdentityCodebook,
    KMeansCodebook,
    TrainConfig,
    balanced_stream,
    load_codebook,
    make_identity_codebook,
    save_codebook,
    train_codebook,
)
from taskforge.core import ImageRaster, generate_fixture
from taskforge.errors import CodecError, ConfigError, TrainingError
from taskforge.rng import RngState
from taskforge.task_ops import Boxes, Edges, Segmentation


def _img(side, seed=0):
    gen = np.random.default_rng(seed)
    return ImageRaster(gen.integers(0, 256, (side, side, 3)).astype(np.uint8))


def _flat(side, value):
    return ImageRaster(np.full((side, side, 3), value, np.uint8))


class TestIdentityCodebook:
    def test_round_trip_bit_exact(self):
        cb = make_identity_codebook(192, (12, 12))
        x = _img(192, 1)
        assert cb.decode(cb.encode(x)).same_pixels(x)

    def test_q_is_grid_product(self):
        cb = make_identity_codebook(192, (12, 12))
        assert cb.q == 144
        assert len(cb.encode(_img(192, 2))) == 144

    def test_non_dividing_grid_rejected(self):
        with pytest.raises(ConfigError):
            make_identity_codebook(192, (7, 7))

    def test_side_mismatch_rejected(self):
        cb = make_identity_codebook(64, (8, 8))
        with pytest.raises(CodecError):
            cb.encode(_img(48))

    def test_multiple_images_keep_distinct_ids(self):
        cb = make_identity_codebook(32, (4, 4))
        a, b = _img(32, 3), _img(32, 4)
        ta, tb = cb.encode(a), cb.encode(b)
        assert set(ta.tolist()).isdisjoint(tb.tolist())
        assert cb.decode(ta).same_pixels(a)
        assert cb.decode(tb).same_pixels(b)

    def test_reset_reclaims_ids(self):
        cb = make_identity_codebook(32, (4, 4), capacity_images=1)
        cb.encode(_img(32, 5))
        with pytest.raises(CodecError):
            cb.encode(_img(32, 6))
        cb.reset()
        cb.encode(_img(32, 6))


class TestKMeansTraining:
    def test_two_populations_recovered(self):
        stream = [_flat(32, 40), _flat(32, 200)] * 8
        cb = train_codebook(iter(stream), TrainConfig(N=2, patch_side=8, grid=(4, 4),
                                                      iterations=8, seed=0))
        means = sorted(np.rint(cb.centroids.mean(axis=1)).tolist())
        assert abs(means[0] - 40) <= 1 and abs(means[1] - 200) <= 1

    def test_single_centroid_decodes_to_mean_tiling(self):
        stream = [_flat(32, 60), _flat(32, 100)] * 4
        cb = train_codebook(iter(stream), TrainConfig(N=1, patch_side=8, grid=(4, 4),
                                                      iterations=4, seed=0))
        out = cb.decode(cb.encode(_img(32, 9)))
        assert len(np.unique(out.pixels)) == 1
        assert abs(int(out.pixels[0, 0, 0]) - 80) <= 1

    def test_deterministic_per_seed(self):
        stream = [_img(32, s) for s in range(12)]
        config = TrainConfig(N=8, patch_side=8, grid=(4, 4), iterations=6, seed=3)
        a = train_codebook(iter(stream), config)
        b = train_codebook(iter(stream), config)
        assert np.array_equal(a.centroids, b.centroids)

    def test_insufficient_patches_rejected(self):
        with pytest.raises(TrainingError):
            train_codebook(iter([_flat(32, 10)]), TrainConfig(N=64, patch_side=8, grid=(4, 4)))

    def test_empty_stream_rejected(self):
        with pytest.raises(TrainingError):
            train_codebook(iter([]), TrainConfig(N=2, patch_side=8, grid=(4, 4)))


class TestKMeansCodec:
    @pytest.fixture(scope="class")
    def codec(self):
        stream = [_flat(32, v) for v in (20, 90, 170, 240)] * 4
        return train_codebook(iter(stream), TrainConfig(N=4, patch_side=8, grid=(4, 4),
                                                        iterations=6, seed=1))

    def test_constant_image_hits_matching_centroid(self, codec):
        tokens = codec.encode(_flat(32, 90))
        assert len(set(tokens.tolist())) == 1
        decoded = codec.decode(tokens)
        assert (decoded.pixels == 90).all()

    def test_encode_deterministic(self, codec):
        x = _img(32, 7)
        assert np.array_equal(codec.encode(x), codec.encode(x))

    def test_decode_all_zero_tokens_tiles_centroid(self, codec):
        out = codec.decode(np.zeros(codec.q, dtype=np.int64))
        patch = out.pixels[:8, :8]
        assert (out.pixels.reshape(4, 8, 4, 8, 3).transpose(0, 2, 1, 3, 4) == patch).all()

    def test_out_of_range_token_rejected(self, codec):
        bad = np.zeros(codec.q, dtype=np.int64)
        bad[0] = codec.N
        with pytest.raises(CodecError):
            codec.decode(bad)

    def test_wrong_token_count_rejected(self, codec):
        with pytest.raises(CodecError):
            codec.decode(np.zeros(codec.q - 1, dtype=np.int64))

    def test_round_trip_is_projection(self, codec):
        x = _img(32, 8)
        once = codec.decode(codec.encode(x))
        twice = codec.decode(codec.encode(once))
        assert once.same_pixels(twice)


class TestCodebookFile:
    def test_round_trip_bit_exact(self, tmp_path):
        stream = [_img(32, s) for s in range(8)]
        cb = train_codebook(iter(stream), TrainConfig(N=8, patch_side=8, grid=(4, 4),
                                                      iterations=4, seed=2))
        path = tmp_path / "codec.tfcb"
        save_codebook(cb, path)
        loaded = load_codebook(path)
        assert np.array_equal(loaded.centroids, cb.centroids)
        assert (loaded.N, loaded.q, loaded.grid, loaded.patch_side) == (
            cb.N, cb.q, cb.grid, cb.patch_side)
        x = _img(32, 10)
        assert np.array_equal(loaded.encode(x), cb.encode(x))

    def test_magic_guard(self, tmp_path):
        bad = tmp_path / "junk.tfcb"
        bad.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(CodecError):
            load_codebook(bad)

    def test_identity_not_serializable(self, tmp_path):
        with pytest.raises(ConfigError):
            save_codebook(make_identity_codebook(32, (4, 4)), tmp_path / "x.tfcb")


class TestBalancedStream:
    def test_task_balancing_equalizes_buckets(self, small_records):
        tasks = [Segmentation(), Edges(1), Boxes(1)]
        samples = balanced_stream([small_records], tasks, BalanceConfig(), RngState(0), 4000)
        counts = collections.Counter(s.bucket for s in samples)
        assert set(counts) == {"image", "segmentation", "edges_w1", "boxes_w1"}
        sigma = (4000 * 0.25 * 0.75) ** 0.5
        for bucket, n in counts.items():
            assert abs(n - 1000) <= 3 * sigma, (bucket, n)

    def test_dataset_balancing_oversamples_small(self):
        big = generate_fixture(18, 1, side=32, rng=RngState(0), dataset_id="big")
        small = generate_fixture(2, 1, side=32, rng=RngState(1), dataset_id="small")
        on = balanced_stream([big, small], [], BalanceConfig(dataset_balancing=True),
                             RngState(2), 2000)
        counts = collections.Counter(s.dataset_id for s in on)
        sigma = (2000 * 0.25) ** 0.5
        assert abs(counts["big"] - 1000) <= 3 * sigma

    def test_no_dataset_balancing_follows_sizes(self):
        big = generate_fixture(18, 1, side=32, rng=RngState(0), dataset_id="big")
        small = generate_fixture(2, 1, side=32, rng=RngState(1), dataset_id="small")
        off = balanced_stream([big, small], [], BalanceConfig(dataset_balancing=False),
                              RngState(3), 2000)
        counts = collections.Counter(s.dataset_id for s in off)
        p = 0.9
        sigma = (2000 * p * (1 - p)) ** 0.5
        assert abs(counts["big"] - 2000 * p) <= 3 * sigma

    def test_recolor_changes_palettes(self, small_records):
        tasks = [Segmentation()]
        config = BalanceConfig(recolor=True)
        draws = [s for s in balanced_stream([small_records], tasks, config, RngState(4), 60)
                 if s.bucket == "segmentation"]
        rendered = {tuple(np.unique(d.image.pixels.reshape(-1, 3), axis=0).ravel().tolist())
                    for d in draws}
        assert len(rendered) > len(draws) // 2  # fresh colors almost every draw

    def test_no_recolor_is_stable_palette(self, small_records):
        tasks = [Segmentation()]
        config = BalanceConfig(recolor=False)
        draws = [s for s in balanced_stream([small_records], tasks, config, RngState(5), 60)
                 if s.bucket == "segmentation" and s.record_id == small_records[0].record_id]
        colors = {tuple(np.unique(d.image.pixels.reshape(-1, 3), axis=0).ravel().tolist())
                  for d in draws}
        assert len(colors) == 1

    def test_empty_dataset_list_rejected(self):
        with pytest.raises(ConfigError):
            list(balanced_stream([], [], BalanceConfig(), RngState(0), 1))

    def test_deterministic(self, small_records):
        tasks = [Segmentation(), Edges(1)]
        a = balanced_stream([small_records], tasks, BalanceConfig(), RngState(6), 40)
        b = balanced_stream([small_records], tasks, BalanceConfig(), RngState(6), 40)
        for sa, sb in zip(a, b):
            assert sa.bucket == sb.bucket and sa.record_id == sb.record_id
            assert sa.image.same_pixels(sb.image)
