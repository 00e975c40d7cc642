import numpy as np
import pytest

from specfuse import synth
from specfuse.synth import scene as scene_mod
from specfuse.synth.dataset import DatasetError
from specfuse.synth.sensors import _even_inventory, ABSORPTION_GAPS


@pytest.fixture(scope="module")
def paper_suite():
    return synth.make_sensor_suite("paper")


@pytest.fixture(scope="module")
def desk_suite():
    return synth.make_sensor_suite("desk")


class TestSuite:
    def test_paper_enmap(self, paper_suite):
        enmap = synth.suite_by_id(paper_suite)["enmap"]
        assert enmap.crop_px == 128
        assert enmap.patch_stride == 2
        assert enmap.group_count == 15
        assert enmap.n_channels == 202

    def test_common_grid_64(self, paper_suite):
        assert {s.grid for s in paper_suite} == {64}

    def test_common_footprint(self, paper_suite):
        assert {s.footprint_m for s in paper_suite} == {3840.0}

    def test_desk_ratios(self, desk_suite):
        by_id = synth.suite_by_id(desk_suite)
        assert by_id["enmap"].crop_px == 16
        assert by_id["enmap"].patch_stride == 2
        assert {s.grid for s in desk_suite} == {8}
        assert len({s.footprint_m for s in desk_suite}) == 1

    def test_centers_increasing_and_gap_free(self, paper_suite):
        for s in paper_suite:
            c = s.band_centers
            if len(c) > 1:
                assert np.all(np.diff(c) > 0)
            for lo, hi in s.bands.gap_edges:
                assert not np.any((c > lo) & (c < hi))

    def test_inventory_rejects_center_in_gap(self):
        with pytest.raises(ValueError):
            synth.BandInventory(np.array([1000.0, 1400.0]), ABSORPTION_GAPS)

    def test_segments_split_at_gaps(self):
        inv = _even_inventory(420, 2450, 50, ABSORPTION_GAPS)
        segs = inv.segments()
        assert len(segs) == 3
        assert sum(len(s) for s in segs) == 50


class TestScene:
    def test_determinism(self, desk_suite):
        a = synth.generate_scene(3, desk_suite)
        b = synth.generate_scene(3, desk_suite)
        assert np.array_equal(a.material_maps, b.material_maps)
        assert np.array_equal(a.spectra_knots, b.spectra_knots)

    def test_abundances_sum_to_one(self, desk_suite):
        s = synth.generate_scene(0, desk_suite, n_materials=3)
        np.testing.assert_allclose(s.material_maps.sum(axis=0), 1.0, atol=1e-9)

    def test_spatial_autocorrelation(self, desk_suite):
        # empirical lag-1 autocorrelation over many scenes
        vals = []
        for seed in range(40):
            m = synth.generate_scene(seed, desk_suite).material_maps[0]
            x = m - m.mean()
            vals.append((x[:, :-1] * x[:, 1:]).mean() / (x * x).mean())
        assert np.mean(vals) > 0.5


class TestRender:
    def test_single_material_equals_spectrum(self, desk_suite):
        by_id = synth.suite_by_id(desk_suite)
        spec = by_id["enmap"]
        scn = synth.generate_scene(1, desk_suite, n_materials=2)
        scn.material_maps[0][:] = 1.0
        scn.material_maps[1][:] = 0.0
        r = synth.render_sensor(scn, spec, 0, noise_sigma=0.0)
        expected = scn.spectra_at(spec.band_centers)[0]
        for c in range(spec.n_channels):
            np.testing.assert_allclose(r[c], expected[c], atol=1e-12)

    def test_coarse_render_is_block_mean_of_fine(self, desk_suite):
        # EMIT at 60 m vs a synthetic 30 m sensor with identical bands
        by_id = synth.suite_by_id(desk_suite)
        emit = by_id["emit"]
        fine = synth.SensorSpec("fine", "HSI", emit.bands, 30,
                                emit.crop_px * 2, 2, 3, emit.group_count)
        scn = synth.generate_scene(2, desk_suite)
        r_coarse = synth.render_sensor(scn, emit, 0, noise_sigma=0.0)
        r_fine = synth.render_sensor(scn, fine, 0, noise_sigma=0.0)
        blocked = r_fine.reshape(r_fine.shape[0], emit.crop_px, 2,
                                 emit.crop_px, 2).mean(axis=(2, 4))
        np.testing.assert_allclose(r_coarse, blocked, atol=1e-12)

    def test_band_averaged_hsi_matches_msi(self, desk_suite):
        # affine spectra: sampling at the mean wavelength equals the mean of
        # samples, so group-averaged HSI must equal an MSI render whose band
        # centers sit at the group means
        by_id = synth.suite_by_id(desk_suite)
        hsi = by_id["desis"]
        scn = synth.generate_scene(5, desk_suite)
        slope = np.linspace(-1, 1, scn.n_materials)
        scn = scene_mod.LatentScene(
            scn.material_maps,
            np.array([0.5 + sl * (scn.knot_wavelengths - 1000) / 4000
                      for sl in slope]),
            scn.knot_wavelengths, scn.sar_texture, scn.lst_field)
        groups = np.array_split(np.arange(hsi.n_channels), 4)
        msi_centers = np.array([hsi.band_centers[g].mean() for g in groups])
        msi = synth.SensorSpec("msi-like", "MSI",
                               synth.BandInventory(msi_centers),
                               hsi.gsd, hsi.crop_px, hsi.patch_stride,
                               hsi.patch_kernel)
        r_hsi = synth.render_sensor(scn, hsi, 0, noise_sigma=0.0)
        r_msi = synth.render_sensor(scn, msi, 0, noise_sigma=0.0)
        for i, g in enumerate(groups):
            np.testing.assert_allclose(r_hsi[g].mean(axis=0), r_msi[i],
                                       atol=1e-9)

    def test_noise_sigma_calibration(self, desk_suite):
        by_id = synth.suite_by_id(desk_suite)
        spec = by_id["s2"]
        scn = synth.generate_scene(7, desk_suite)
        clean = synth.render_sensor(scn, spec, 0, noise_sigma=0.0)
        deltas = []
        for seed in range(5):
            noisy = synth.render_sensor(scn, spec, seed, noise_sigma=0.01)
            deltas.append((noisy - clean).ravel())
        sd = np.concatenate(deltas).std()
        assert abs(sd - 0.01) < 0.001

    def test_render_deterministic(self, desk_suite):
        spec = desk_suite[0]
        scn = synth.generate_scene(9, desk_suite)
        a = synth.render_sensor(scn, spec, 4)
        b = synth.render_sensor(scn, spec, 4)
        assert np.array_equal(a, b)


class TestDataset:
    def test_round_trip(self, desk_suite, tmp_path):
        samples = synth.make_samples(0, desk_suite, 10)
        synth.write_dataset(samples, tmp_path / "ds")
        back = synth.read_dataset(tmp_path / "ds")
        assert len(back) == 10
        for a, b in zip(samples, back):
            assert a.location_id == b.location_id
            assert a.available == b.available
            assert a.timestamps == b.timestamps
            for sid in a.available:
                assert np.array_equal(a.rasters[sid], b.rasters[sid])

    def test_availability_between_5_and_7(self, desk_suite):
        samples = synth.make_samples(1, desk_suite, 30)
        sizes = {len(s.available) for s in samples}
        assert sizes <= {5, 6, 7}
        assert len(sizes) > 1  # availability actually varies

    def test_index_consistent_with_payload(self, desk_suite, tmp_path):
        samples = synth.make_samples(2, desk_suite, 5)
        root = tmp_path / "ds"
        synth.write_dataset(samples, root)
        for entry, s in zip(synth.read_index(root), samples):
            assert set(entry["sensors"]) == set(s.available)
            assert entry["timestamps"] == s.timestamps

    def test_corruption_detected_with_location(self, desk_suite, tmp_path):
        samples = synth.make_samples(3, desk_suite, 3)
        root = tmp_path / "ds"
        synth.write_dataset(samples, root)
        target = root / f"{samples[1].location_id}.bin"
        raw = bytearray(target.read_bytes())
        raw[200] ^= 0xFF
        target.write_bytes(bytes(raw))
        with pytest.raises(DatasetError, match=samples[1].location_id):
            synth.read_dataset(root)
