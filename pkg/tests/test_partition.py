import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faxbev.errors import ConfigurationError, DimensionError
from faxbev.partition import PartitionSpec, fused_block, fused_grid, fused_unblock, fused_ungrid
from faxbev.tensor import Tensor

import oracles


def random_spec(rng):
    P = int(rng.choice([1, 2, 3, 4]))
    G = int(rng.choice([1, 2, 3, 4]))
    lcm = np.lcm(P, G)
    H = int(lcm * rng.integers(1, 4))
    W = int(lcm * rng.integers(1, 4))
    return PartitionSpec(P, G, int(rng.integers(1, 4)), H, W, int(rng.integers(1, 4)))


def random_specs(count, seed=0):
    rng = np.random.default_rng(seed)
    return [random_spec(rng) for _ in range(count)]


def rand(spec, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal((spec.N, spec.H, spec.W, spec.C)).astype(dtype)


class TestSpec:
    def test_derived_counts(self):
        s = PartitionSpec(4, 2, 3, 8, 8, 5)
        assert (s.num_windows, s.window_tokens, s.num_grid_groups, s.grid_tokens) == (4, 48, 16, 12)

    @pytest.mark.parametrize("P,G,H,W", [(3, 2, 8, 8), (2, 3, 8, 8), (4, 4, 8, 6)])
    def test_divisibility_rejected(self, P, G, H, W):
        with pytest.raises(ConfigurationError, match="divide"):
            PartitionSpec(P, G, 1, H, W, 1)

    def test_error_names_sizes(self):
        with pytest.raises(ConfigurationError, match=r"P=3.*H=8.*W=8"):
            PartitionSpec(3, 1, 1, 8, 8, 1)


class TestFusedBlock:
    def test_shape(self):
        s = PartitionSpec(4, 4, 2, 8, 8, 4)
        assert fused_block(Tensor(rand(s)), s).shape == (4, 32, 4)

    def test_single_window_is_flatten(self):
        s = PartitionSpec(6, 6, 2, 6, 6, 3)
        x = rand(s)
        y = fused_block(Tensor(x), s).data
        assert y.shape == (1, 72, 3) and np.array_equal(y[0], x.reshape(-1, 3))

    def test_arange_element(self):
        s = PartitionSpec(2, 2, 1, 4, 4, 1)
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        assert fused_block(Tensor(x), s).data[0, 3, 0] == x[0, 1, 1, 0]

    def test_index_map_oracle(self):
        for spec in random_specs(30, seed=1):
            x = rand(spec)
            ref = oracles.gather(x, oracles.block_sources(spec.N, spec.H, spec.W, spec.P))
            assert np.array_equal(fused_block(Tensor(x), spec).data, ref)

    def test_one_hot_unblock(self):
        s = PartitionSpec(2, 2, 2, 4, 6, 3)
        src = oracles.block_sources(2, 4, 6, 2)
        rng = np.random.default_rng(2)
        for _ in range(10):
            w, t, c = rng.integers(s.num_windows), rng.integers(s.window_tokens), rng.integers(3)
            y = np.zeros(s.blocked_shape)
            y[w, t, c] = 1.0
            x = fused_unblock(Tensor(y), s).data
            n, r, col = src[w][t]
            assert x[n, r, col, c] == 1.0 and x.sum() == 1.0

    def test_round_trip_random(self):
        s = PartitionSpec(2, 4, 3, 8, 4, 2)
        x = rand(s, 3, np.float32)
        assert np.array_equal(fused_unblock(fused_block(Tensor(x), s), s).data, x)

    def test_wrong_input_shape(self):
        s = PartitionSpec(2, 2, 1, 4, 4, 1)
        with pytest.raises(DimensionError):
            fused_block(Tensor(np.zeros((1, 4, 6, 1))), s)
        with pytest.raises(DimensionError):
            fused_unblock(Tensor(np.zeros((3, 4, 1))), s)


class TestFusedGrid:
    def test_g1_groups_are_agents_per_pixel(self):
        s = PartitionSpec(1, 1, 3, 4, 2, 2)
        x = rand(s)
        y = fused_grid(Tensor(x), s).data
        assert y.shape == (8, 3, 2)
        assert np.array_equal(y[5], x[:, 2, 1])

    def test_full_map_equals_block(self):
        s = PartitionSpec(4, 4, 1, 4, 4, 2)
        x = rand(s)
        assert np.array_equal(fused_grid(Tensor(x), s).data, fused_block(Tensor(x), s).data)

    def test_arange_group0(self):
        s = PartitionSpec(2, 2, 1, 4, 4, 1)
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        got = fused_grid(Tensor(x), s).data[0, :, 0]
        assert list(got) == [x[0, 0, 0, 0], x[0, 0, 2, 0], x[0, 2, 0, 0], x[0, 2, 2, 0]]

    def test_index_map_oracle(self):
        for spec in random_specs(30, seed=4):
            x = rand(spec)
            ref = oracles.gather(x, oracles.grid_sources(spec.N, spec.H, spec.W, spec.G))
            assert np.array_equal(fused_grid(Tensor(x), spec).data, ref)

    def test_one_hot_ungrid(self):
        s = PartitionSpec(1, 2, 2, 6, 4, 2)
        src = oracles.grid_sources(2, 6, 4, 2)
        for g in range(s.num_grid_groups):
            for t in range(s.grid_tokens):
                y = np.zeros(s.gridded_shape)
                y[g, t, 1] = 1.0
                x = fused_ungrid(Tensor(y), s).data
                n, r, c = src[g][t]
                assert x[n, r, c, 1] == 1.0 and x.sum() == 1.0

    def test_rectangular_grid(self):
        s = PartitionSpec((2, 1), (2, 3), 1, 4, 6, 1)
        x = rand(s)
        ref = oracles.gather(x, oracles.grid_sources(1, 4, 6, (2, 3)))
        assert np.array_equal(fused_grid(Tensor(x), s).data, ref)


class TestProperties:
    def test_round_trips_200_specs(self):
        for i, spec in enumerate(random_specs(200, seed=5)):
            x = rand(spec, i, np.float32 if i % 2 else np.float64)
            assert np.array_equal(fused_unblock(fused_block(Tensor(x), spec), spec).data, x)
            assert np.array_equal(fused_ungrid(fused_grid(Tensor(x), spec), spec).data, x)

    def test_disjoint_cover(self):
        for spec in random_specs(50, seed=6):
            for src in (oracles.block_sources(spec.N, spec.H, spec.W, spec.P),
                        oracles.grid_sources(spec.N, spec.H, spec.W, spec.G)):
                flat = [t for grp in src for t in grp]
                assert len(flat) == len(set(flat)) == spec.N * spec.H * spec.W
            # the library agrees with the cover: arange values appear exactly once each
            x = np.arange(spec.N * spec.H * spec.W * spec.C, dtype=np.float64).reshape(spec.N, spec.H, spec.W, spec.C)
            for y in (fused_block(Tensor(x), spec).data, fused_grid(Tensor(x), spec).data):
                assert np.array_equal(np.sort(y.ravel()), x.ravel())

    def test_leading_batch_axes(self):
        s = PartitionSpec(2, 2, 2, 4, 4, 3)
        x = np.random.default_rng(7).standard_normal((3, 2, 4, 4, 3))
        y = fused_block(Tensor(x), s).data
        assert y.shape == (3,) + s.blocked_shape
        assert np.array_equal(y[1], fused_block(Tensor(x[1]), s).data)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2))
    def test_round_trip_hypothesis(self, n, p, g, mult, c):
        side = int(np.lcm(p, g)) * mult
        s = PartitionSpec(p, g, n, side, side, c)
        x = np.random.default_rng(n * 100 + p * 10 + g).standard_normal((n, side, side, c))
        assert np.array_equal(fused_ungrid(fused_grid(Tensor(x), s), s).data, x)
        assert np.array_equal(fused_unblock(fused_block(Tensor(x), s), s).data, x)
