"""Prototype operations against brute-force oracles."""

import numpy as np
import pytest
import torch

from fewseg.errors import ConfigurationError, DegenerateMaskError
from fewseg.prototypes import (
    ChannelGate,
    LocalPrototypeGenerator,
    cosine_prior,
    downsample_mask,
    expand_global,
    expand_grid,
    grid_geometry,
    masked_average_pool,
    pool_local_grid,
)

# ---- oracles -----------------------------------------------------------------


def masked_pool_oracle(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel accumulation loop."""
    c, h, w = features.shape
    total = np.zeros(c, dtype=np.float64)
    count = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                total += features[:, y, x]
                count += 1
    return total / count


def prior_oracle(fq: np.ndarray, fs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Double loop over query locations and support foreground locations."""
    def cos(a, b):
        na = max(np.linalg.norm(a), 1e-8)
        nb = max(np.linalg.norm(b), 1e-8)
        return float(np.dot(a / na, b / nb))

    _, hq, wq = fq.shape
    _, hs, ws = fs.shape
    scores = np.full((hq, wq), -np.inf)
    for y in range(hq):
        for x in range(wq):
            for i in range(hs):
                for j in range(ws):
                    if ys[i, j]:
                        scores[y, x] = max(scores[y, x], cos(fq[:, y, x], fs[:, i, j]))
    lo, hi = scores.min(), scores.max()
    return (scores - lo) / (hi - lo + 1e-7)


def windowed_mean_oracle(features: np.ndarray, guidance: np.ndarray, m: int) -> np.ndarray:
    """Nested loops over adaptive-pooling windows."""
    c, h, w = features.shape
    out = np.zeros((c, m, m), dtype=np.float64)
    prod = features * guidance[None]
    for i in range(m):
        y0, y1 = (i * h) // m, int(np.ceil((i + 1) * h / m))
        for j in range(m):
            x0, x1 = (j * w) // m, int(np.ceil((j + 1) * w / m))
            out[:, i, j] = prod[:, y0:y1, x0:x1].mean(axis=(1, 2))
    return out


# ---- masked average pooling --------------------------------------------------


class TestMaskedAveragePool:
    def test_matches_oracle_on_random_instances(self, rng):
        for _ in range(20):
            c = int(rng.integers(1, 9))
            h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            feats = rng.standard_normal((c, h, w))
            mask = (rng.random((h, w)) < 0.5).astype(np.float64)
            if mask.sum() == 0:
                mask[0, 0] = 1
            got = masked_average_pool(torch.from_numpy(feats), torch.from_numpy(mask))
            want = masked_pool_oracle(feats, mask)
            np.testing.assert_allclose(got.numpy(), want, atol=1e-6)

    def test_all_ones_mask_is_plain_mean(self, rng):
        feats = torch.from_numpy(rng.standard_normal((4, 5, 5)))
        got = masked_average_pool(feats, torch.ones(5, 5))
        torch.testing.assert_close(got, feats.mean(dim=(-2, -1)))

    def test_two_by_two_diagonal(self):
        feats = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
        mask = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        assert masked_average_pool(feats, mask).item() == pytest.approx(2.5)

    def test_single_pixel_returns_that_feature(self, rng):
        feats = torch.from_numpy(rng.standard_normal((3, 4, 4)))
        mask = torch.zeros(4, 4)
        mask[2, 1] = 1
        torch.testing.assert_close(masked_average_pool(feats, mask), feats[:, 2, 1])

    def test_empty_mask_raises(self):
        with pytest.raises(DegenerateMaskError):
            masked_average_pool(torch.ones(2, 3, 3), torch.zeros(3, 3))


# ---- prior masks ---------------------------------------------------------------


class TestCosinePrior:
    def test_matches_double_loop_oracle(self, rng):
        for _ in range(10):
            c = int(rng.integers(2, 6))
            hq, wq = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            hs, ws = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            fq = rng.standard_normal((c, hq, wq))
            fs = rng.standard_normal((c, hs, ws))
            ys = (rng.random((hs, ws)) < 0.5).astype(np.float64)
            if ys.sum() == 0:
                ys[0, 0] = 1
            got = cosine_prior(torch.from_numpy(fq), torch.from_numpy(fs),
                               torch.from_numpy(ys)).map.numpy()
            np.testing.assert_allclose(got, prior_oracle(fq, fs, ys), atol=1e-5)

    def test_output_bounds(self, rng):
        fq = torch.from_numpy(rng.standard_normal((4, 6, 6)))
        fs = torch.from_numpy(rng.standard_normal((4, 5, 5)))
        out = cosine_prior(fq, fs, torch.ones(5, 5)).map
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_identical_features_collapse_to_zero(self, rng):
        feats = torch.from_numpy(rng.standard_normal((3, 4, 4)))
        out = cosine_prior(feats, feats, torch.ones(4, 4)).map
        # every location matches itself with cosine 1, so the map is constant
        # up to rounding and the epsilon guard collapses it to (almost) zero
        assert out.abs().max().item() < 1e-6

    def test_exactly_constant_scores_collapse_to_exact_zero(self):
        # a genuinely constant score map must hit the all-zeros convention
        feats = torch.ones(2, 3, 3, dtype=torch.float64)
        out = cosine_prior(feats, feats, torch.ones(3, 3)).map
        assert torch.all(out == 0)

    def test_orthogonal_location_scores_zero(self):
        # supports along e0; one query pixel along e1 (orthogonal), rest e0
        fs = torch.zeros(2, 2, 2)
        fs[0] = 1.0
        fq = torch.zeros(2, 2, 2)
        fq[0] = 1.0
        fq[:, 1, 1] = torch.tensor([0.0, 1.0])
        out = cosine_prior(fq, fs, torch.ones(2, 2)).map
        assert out[1, 1].item() == pytest.approx(0.0, abs=1e-7)
        assert out.max().item() <= 1.0

    def test_scale_invariance(self, rng):
        from fewseg.prototypes import cosine_scores

        fq = torch.from_numpy(rng.standard_normal((5, 6, 6)))
        fs = torch.from_numpy(rng.standard_normal((5, 4, 4)))
        mask = torch.from_numpy((rng.random((4, 4)) < 0.6).astype(np.float64))
        mask[0, 0] = 1
        base = cosine_prior(fq, fs, mask).map
        scaled = cosine_prior(3.7 * fq, fs, mask).map
        torch.testing.assert_close(scaled, base, atol=1e-6, rtol=0)
        # raw (pre-normalization) scores are scale-invariant too
        bank = fs.reshape(5, -1).T[mask.reshape(-1) > 0.5]
        raw = cosine_scores(fq, bank)
        raw_scaled = cosine_scores(3.7 * fq, bank)
        torch.testing.assert_close(raw_scaled, raw, atol=1e-6, rtol=0)

    def test_empty_support_raises(self):
        with pytest.raises(DegenerateMaskError):
            cosine_prior(torch.ones(2, 3, 3), torch.ones(2, 3, 3), torch.zeros(3, 3))


# ---- local prototype grids ------------------------------------------------------


class TestLocalPooling:
    def test_matches_windowed_mean_oracle(self, rng):
        feats = rng.standard_normal((1, 8, 8))
        guidance = rng.random((8, 8))
        got = pool_local_grid(torch.from_numpy(feats), torch.from_numpy(guidance), 2)
        np.testing.assert_allclose(got.numpy(), windowed_mean_oracle(feats, guidance, 2),
                                   atol=1e-6)

    def test_oracle_on_uneven_division(self, rng):
        feats = rng.standard_normal((3, 7, 5))
        guidance = rng.random((7, 5))
        got = pool_local_grid(torch.from_numpy(feats), torch.from_numpy(guidance), 3)
        np.testing.assert_allclose(got.numpy(), windowed_mean_oracle(feats, guidance, 3),
                                   atol=1e-6)

    @pytest.mark.parametrize("m", [1, 2, 4])
    def test_prototype_count_is_m_squared(self, m, rng):
        gen = LocalPrototypeGenerator(c_in=4, c_out=3, m=m)
        feats = torch.from_numpy(rng.standard_normal((4, 8, 8)).astype(np.float32))
        grid = gen(feats, torch.ones(8, 8))
        assert grid.count == m * m
        assert grid.grid.shape == (3, m, m)

    def test_constant_features_give_identical_prototypes(self):
        gen = LocalPrototypeGenerator(c_in=2, c_out=2, m=4)
        feats = torch.full((2, 8, 8), 1.5)
        grid = gen(feats, torch.ones(8, 8)).grid
        flat = grid.reshape(2, -1)
        assert torch.allclose(flat, flat[:, :1].expand_as(flat))

    def test_grid_too_large_raises(self):
        with pytest.raises(ConfigurationError):
            pool_local_grid(torch.ones(1, 3, 3), torch.ones(3, 3), 4)

    def test_geometry_covers_plane(self):
        for h, w, m in [(8, 8, 4), (7, 5, 3), (16, 16, 4)]:
            covered = np.zeros((h, w), dtype=int)
            for y0, y1, x0, x1 in grid_geometry(h, w, m):
                covered[y0:y1, x0:x1] += 1
            assert (covered >= 1).all()


class TestChannelGate:
    def test_gates_strictly_inside_unit_interval(self, rng):
        gate = ChannelGate(8, ratio=4).double()
        grid = torch.from_numpy(rng.standard_normal((8, 4, 4)))
        g = gate.gates(grid)
        assert torch.all(g > 0) and torch.all(g < 1)

    def test_disabled_gate_is_identity(self, rng):
        gen = LocalPrototypeGenerator(c_in=4, c_out=4, m=2, channel_attention=False)
        feats = torch.from_numpy(rng.standard_normal((4, 8, 8)).astype(np.float32))
        guidance = torch.from_numpy(rng.random((8, 8)).astype(np.float32))
        out = gen(feats, guidance).grid
        # with unit gates the output reduces to the 1x1-mapped pooled grid
        pooled = pool_local_grid(feats, guidance, 2)
        squeezed = gen.squeeze(pooled[None])[0]
        torch.testing.assert_close(out, squeezed)


# ---- expansion --------------------------------------------------------------------


class TestExpansion:
    def test_global_broadcast(self):
        vec = torch.tensor([1.0, -2.0, 0.5])
        out = expand_global(vec, (4, 4))
        assert out.shape == (3, 4, 4)
        for c, v in enumerate([1.0, -2.0, 0.5]):
            assert torch.all(out[c] == v)

    def test_grid_tiles_as_blocks(self):
        grid = torch.arange(4.0).reshape(1, 2, 2)
        out = expand_grid(grid, (4, 4))
        want = torch.tensor([[0.0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
        torch.testing.assert_close(out[0], want)

    def test_expand_pool_round_trip(self, rng):
        grid = torch.from_numpy(rng.standard_normal((5, 4, 4)))
        expanded = expand_grid(grid, (16, 16))
        back = torch.nn.functional.adaptive_avg_pool2d(expanded[None], 4)[0]
        torch.testing.assert_close(back, grid)


class TestMaskDownsampling:
    def test_nearest_keeps_binary(self, rng):
        mask = torch.from_numpy((rng.random((32, 32)) < 0.3).astype(np.float32))
        down = downsample_mask(mask, (8, 8))
        assert set(down.unique().tolist()) <= {0.0, 1.0}
