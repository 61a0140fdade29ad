import math

import numpy as np
import pytest

from lpusim.arch import (ClusterConfig, DeviceConfig, default_partition,
                         derive_mac_trees, list_device_presets,
                         load_device_preset, sxe_peak_bandwidth, validate_fit)
from lpusim.errors import CapacityExceeded, InvalidDeviceCount


class TestDeriveMacTrees:
    @pytest.mark.parametrize("bw,v,freq,expect", [
        (819e9, 64, 1e9, 8),
        (1.64e12, 64, 1e9, 16),
        (3.28e12, 64, 1e9, 32),
        (460e9, 64, 220e6, 16),
    ])
    def test_published_points(self, bw, v, freq, expect):
        assert derive_mac_trees(bw, v, freq) == expect

    def test_tie_rounds_up(self):
        # bw/(v*2*freq) = 2*sqrt(2) lies exactly between 2 and 4 in log space
        bw = 2 * math.sqrt(2) * 64 * 2 * 1e9
        assert derive_mac_trees(bw, 64, 1e9) == 4

    def test_monotone_in_bandwidth(self):
        rng = np.random.default_rng(42)
        bands = np.sort(rng.uniform(50e9, 8e12, size=200))
        trees = [derive_mac_trees(b, 64, 1e9) for b in bands]
        assert all(a <= b for a, b in zip(trees, trees[1:]))

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            derive_mac_trees(-1, 64, 1e9)
        with pytest.raises(ValueError):
            derive_mac_trees(1e12, 48, 1e9)


class TestSxePeak:
    def test_fpga_point(self):
        assert sxe_peak_bandwidth(16, 64, 220e6) == pytest.approx(450.56e9)

    def test_unit_case(self):
        assert sxe_peak_bandwidth(1, 1, 1) == 2

    def test_x4_point(self):
        assert sxe_peak_bandwidth(32, 64, 1e9) == pytest.approx(4.096e12)

    def test_no_preset_is_starved(self):
        for name in list_device_presets():
            dev = load_device_preset(name)
            assert dev.sxe_peak >= 0.95 * dev.hbm_bandwidth


class TestValidateFit:
    def _cluster(self, n, cap=96e9):
        dev = load_device_preset("hbm3-x4")
        assert dev.hbm_capacity == cap
        return ClusterConfig(dev, n)

    def test_two_devices_fit_66b(self):
        validate_fit(132e9, 5e9, self._cluster(2))

    def test_empty_model_fits(self):
        validate_fit(0, 0, self._cluster(1))

    def test_single_device_deficit(self):
        with pytest.raises(CapacityExceeded) as e:
            validate_fit(132e9, 5e9, self._cluster(1))
        assert e.value.deficit_bytes == pytest.approx(41e9)


class TestConfigs:
    def test_presets_load(self):
        names = list_device_presets()
        assert {"hbm3-x1", "hbm3-x2", "hbm3-x4", "fpga-u55c"} <= set(names)
        x4 = load_device_preset("hbm3-x4")
        assert x4.mac_trees == 32 and x4.vector_dim == 64
        assert x4.tile_bytes == 4096
        assert x4.channel_bandwidth == pytest.approx(102.4e9)

    def test_mac_trees_match_preset_bandwidths(self):
        for name in ("hbm3-x1", "hbm3-x2", "hbm3-x4", "fpga-u55c"):
            dev = load_device_preset(name)
            assert derive_mac_trees(dev.hbm_bandwidth, dev.vector_dim,
                                    dev.freq_hz) == dev.mac_trees

    def test_starved_config_rejected(self):
        with pytest.raises(ValueError, match="starved"):
            DeviceConfig(name="bad", hbm_bandwidth=3.2768e12, hbm_capacity=96e9,
                         num_channels=32, freq_hz=1e9, mac_trees=8)

    def test_device_count_domain(self):
        dev = load_device_preset("hbm3-x1")
        for n in (1, 2, 4, 8):
            ClusterConfig(dev, n)
        with pytest.raises(InvalidDeviceCount):
            ClusterConfig(dev, 3)

    def test_partition_must_cover(self):
        dev = load_device_preset("hbm3-x1")
        with pytest.raises(ValueError):
            ClusterConfig(dev, 8, "1x4")
        assert ClusterConfig(dev, 8).ring_partition == "1x8"
        assert default_partition(4) == "1x4"

    def test_json_round_trip(self):
        import json
        dev = load_device_preset("fpga-u55c")
        again = DeviceConfig.from_dict(json.loads(dev.to_json()))
        assert again == dev
