import io

import numpy as np
import pytest

from lpusim.arch import load_device_preset
from lpusim.errors import CapacityExceeded, IndexOutOfRange, InvalidDeviceCount
from lpusim.mapper import (map_device, matrix_to_stream, partition_model,
                           stream_to_matrix, tile_tensor)
from lpusim.model import load_model_preset, model_bytes


@pytest.fixture(scope="module")
def tiny_map():
    dev = load_device_preset("hbm3-x1")
    cfg = load_model_preset("tiny-2l")
    part = partition_model(cfg, 1)
    return map_device(part, cfg, dev, 0), cfg, dev


class TestTileTensor:
    @pytest.mark.parametrize("rows,cols,v,l,expect", [
        (2048, 8192, 64, 32, (32, 256)),     # 8192 tiles
        (64, 32, 64, 32, (1, 1)),
        (100, 100, 64, 32, (2, 4)),          # padded
    ])
    def test_grid(self, rows, cols, v, l, expect):
        assert tile_tensor(rows, cols, v, l) == expect

    def test_grid_covers(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            r, c = int(rng.integers(1, 5000)), int(rng.integers(1, 5000))
            rt, ct = tile_tensor(r, c, 64, 32)
            assert rt * 64 >= r > (rt - 1) * 64
            assert ct * 32 >= c > (ct - 1) * 32

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            tile_tensor(0, 5, 64, 32)


class TestPartition:
    def test_even_heads(self):
        part = partition_model(load_model_preset("opt-1.3b"), 4)
        assert [h1 - h0 for h0, h1 in part.head_ranges] == [8, 8, 8, 8]

    def test_identity(self):
        part = partition_model(load_model_preset("opt-1.3b"), 1)
        assert part.head_ranges == ((0, 32),)

    def test_66b_eight_way(self):
        part = partition_model(load_model_preset("opt-66b"), 8)
        assert [h1 - h0 for h0, h1 in part.head_ranges] == [9] * 8

    def test_head_padding(self):
        cfg = load_model_preset("tiny-2l")          # 2 heads
        part = partition_model(cfg, 4)
        assert part.padded_heads == 4
        assert [h1 - h0 for h0, h1 in part.head_ranges] == [1, 1, 1, 1]

    def test_ranges_disjoint_and_cover(self):
        for n in (1, 2, 4, 8):
            part = partition_model(load_model_preset("opt-30b"), n)
            seen = []
            for h0, h1 in part.head_ranges:
                seen.extend(range(h0, h1))
            assert seen == list(range(part.padded_heads))
            f = [c for c0, c1 in part.fc1_col_ranges for c in range(c0, c1)]
            assert f == list(range(28672))

    def test_bad_device_count(self):
        with pytest.raises(InvalidDeviceCount):
            partition_model(load_model_preset("opt-1.3b"), 3)


class TestMapDevice:
    def test_bijection_tiny(self, tiny_map):
        """Every logical weight element maps to exactly one address, and no
        two elements share one (full enumeration on the tiny model)."""
        mm, cfg, dev = tiny_map
        seen = set()
        for region in mm.weight_regions():
            for row in range(region.rows):
                for col in range(region.cols):
                    a = region.element_address(row, col)
                    assert a not in seen
                    seen.add(a)
        total_logical = sum(r.rows * r.cols for r in mm.weight_regions())
        assert len(seen) == total_logical

    def test_regions_disjoint(self, tiny_map):
        mm, _, _ = tiny_map
        spans = sorted((r.base, r.base + r.nbytes) for r in mm.regions.values())
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            assert a1 <= b0

    def test_round_robin_channels(self, tiny_map):
        mm, _, dev = tiny_map
        region = mm.region("fc1.0")
        chans = [region.tile_channel(t, dev.num_channels)
                 for t, _, _ in region.stream_tiles()]
        for a, b in zip(chans, chans[1:]):
            assert b == (a + 1) % dev.num_channels

    def test_stream_order_vertical(self, tiny_map):
        """All row tiles of one column set stream before the next set."""
        mm, _, _ = tiny_map
        region = mm.region("fc1.0")
        cols_seen = [tc for _, _, tc in region.stream_tiles()]
        assert cols_seen == sorted(cols_seen)
        rows_in_col = {}
        for _, tr, tc in region.stream_tiles():
            rows_in_col.setdefault(tc, []).append(tr)
        for rows in rows_in_col.values():
            assert rows == list(range(region.row_tiles))

    def test_30b_mapped_weight_bytes(self):
        dev = load_device_preset("hbm3-x4")
        cfg = load_model_preset("opt-30b")
        mm = map_device(partition_model(cfg, 1), cfg, dev, 0)
        # streamed weights exclude biases/norms/embeddings, include padding
        assert mm.total_weight_bytes == pytest.approx(60e9, rel=0.02)
        assert mm.total_weight_bytes == pytest.approx(model_bytes(cfg), rel=0.05)

    def test_capacity_guard(self):
        dev = load_device_preset("fpga-u55c")       # 16 GB
        cfg = load_model_preset("opt-30b")          # ~60 GB
        with pytest.raises(CapacityExceeded):
            map_device(partition_model(cfg, 1), cfg, dev, 0)

    def test_dump_csv(self, tiny_map):
        mm, _, _ = tiny_map
        buf = io.StringIO()
        mm.dump_csv(buf)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "tensor,tile_row,tile_col,device,channel,address"
        n_tiles = sum(r.n_tiles for r in mm.regions.values()
                      if r.kind not in ("vec", "io"))
        assert len(lines) == 1 + n_tiles


class TestKvAddressing:
    def test_transpose_round_trip(self, tiny_map):
        """Writing K row-vectors position by position then stream-reading the
        region yields the transpose, bit-exact."""
        mm, cfg, dev = tiny_map
        rng = np.random.default_rng(11)
        region = mm.region("kv_k.1.h1")
        hd, seq = cfg.head_dim, 45
        M = rng.standard_normal((seq, hd)).astype(np.float16)
        buf = np.zeros(region.n_tiles * region.v * region.l, dtype=np.float16)
        for pos in range(seq):
            for e in range(hd):
                addr = mm.kv_write_address(1, 1, pos, e, "k")
                buf[(addr - region.base) // 2] = M[pos, e]
        back = stream_to_matrix(region, buf)
        assert np.array_equal(back[:hd, :seq], M.T)

    def test_value_region_untransposed(self, tiny_map):
        mm, cfg, dev = tiny_map
        rng = np.random.default_rng(13)
        region = mm.region("kv_v.0.h0")
        hd, seq = cfg.head_dim, 30
        M = rng.standard_normal((seq, hd)).astype(np.float16)
        buf = np.zeros(region.n_tiles * region.v * region.l, dtype=np.float16)
        for pos in range(seq):
            for e in range(hd):
                addr = mm.kv_write_address(0, 0, pos, e, "v")
                buf[(addr - region.base) // 2] = M[pos, e]
        back = stream_to_matrix(region, buf)
        assert np.array_equal(back[:seq, :hd], M)

    def test_position_zero_at_region_base(self, tiny_map):
        mm, _, _ = tiny_map
        region = mm.region("kv_k.0.h0")
        assert mm.kv_write_address(0, 0, 0, 0, "k") == region.base

    def test_consecutive_positions_stride(self, tiny_map):
        """Within a column tile, consecutive positions sit one lane group
        apart (v elements), never adjacent."""
        mm, _, dev = tiny_map
        region = mm.region("kv_k.0.h0")
        l = region.l
        for e in (0, 3):
            addrs = [mm.kv_write_address(0, 0, p, e, "k") for p in range(l)]
            deltas = {b - a for a, b in zip(addrs, addrs[1:])}
            assert deltas == {region.v * 2}

    def test_index_errors(self, tiny_map):
        mm, cfg, _ = tiny_map
        with pytest.raises(IndexOutOfRange):
            mm.kv_write_address(0, 0, cfg.max_seq, 0, "k")
        with pytest.raises(IndexOutOfRange):
            mm.kv_write_address(0, 0, 0, cfg.head_dim, "k")
        with pytest.raises(IndexOutOfRange):
            mm.kv_write_address(5, 0, 0, 0, "k")


class TestPaddingNeutrality:
    def test_zero_padded_lanes_contribute_nothing(self):
        """A padded matrix streamed back and applied to a padded vector gives
        the same product as the unpadded operands."""
        dev = load_device_preset("hbm3-x4")
        cfg = load_model_preset("tiny-2l")
        mm = map_device(partition_model(cfg, 1), cfg, dev, 0)
        region = mm.region("fc2.0")                 # 256 x 64, padded 256 x 64->?
        rng = np.random.default_rng(5)
        M = rng.standard_normal((region.rows, region.cols)).astype(np.float16)
        x = rng.standard_normal(region.rows).astype(np.float16)
        buf = matrix_to_stream(region, M)
        P = stream_to_matrix(region, buf).astype(np.float64)
        xp = np.zeros(P.shape[0])
        xp[:region.rows] = x.astype(np.float64)
        got = (xp @ P)[:region.cols]
        want = x.astype(np.float64) @ M.astype(np.float64)
        assert np.array_equal(got, want)
