import numpy as np
import pytest

from specfuse import backbone as bb
from specfuse import downstream as ds
from specfuse import numerics as nm
from specfuse import synth
from specfuse.configs import arch_preset
from specfuse.tokenizers import TokenGrid


@pytest.fixture(scope="module")
def desk_suite():
    return synth.make_sensor_suite("desk")


@pytest.fixture(scope="module")
def desk_model(desk_suite):
    arch = arch_preset("desk")
    params = {}
    groupings = bb.init_backbone(params, nm.stream(31, "init"), desk_suite,
                                 arch)
    return params, groupings, arch


def _eo1_like(n_bands=198, lo=430.0, hi=2400.0):
    return synth.BandInventory(np.linspace(lo, hi, n_bands))


class TestRemapSpectra:
    def test_constant_spectrum_both_modes(self, desk_suite):
        target = synth.suite_by_id(desk_suite)["enmap"].bands
        src = _eo1_like(50)
        x = np.full((50, 4, 4), 0.37)
        for mode in ("interpolate", "average"):
            out = ds.remap_spectra(x, src.centers, target, mode)
            assert out.shape == (len(target), 4, 4)
            np.testing.assert_allclose(out, 0.37, atol=1e-12)

    def test_linear_spectrum_interpolation_exact(self, desk_suite):
        target = synth.suite_by_id(desk_suite)["enmap"].bands
        src = _eo1_like(50)
        slope, intercept = 3e-4, 0.05
        x = (slope * src.centers + intercept)[:, None, None] * np.ones(
            (1, 3, 3))
        out = ds.remap_spectra(x, src.centers, target, "interpolate")
        want = np.clip(slope * target.centers + intercept,
                       slope * src.centers[0] + intercept,
                       slope * src.centers[-1] + intercept)
        np.testing.assert_allclose(out, want[:, None, None]
                                   * np.ones((1, 3, 3)), atol=1e-12)

    def test_eo1_to_enmap_matches_per_pixel_oracle(self, desk_suite):
        # brute-force oracle: np.interp per pixel over 10^3 random spectra
        target = synth.make_sensor_suite("paper")
        enmap = synth.suite_by_id(target)["enmap"].bands
        src = _eo1_like()
        rng = nm.stream(40, "spectra")
        x = rng.uniform(0, 1, size=(len(src), 25, 40))
        out = ds.remap_spectra(x, src.centers, enmap, "interpolate")
        flat = x.reshape(len(src), -1)
        for p in range(flat.shape[1]):
            ref = np.interp(enmap.centers, src.centers, flat[:, p])
            np.testing.assert_allclose(out.reshape(len(enmap), -1)[:, p],
                                       ref, atol=1e-12)

    def test_identity_when_source_is_target(self, desk_suite):
        enmap = synth.suite_by_id(desk_suite)["enmap"].bands
        x = nm.stream(41, "x").uniform(size=(len(enmap), 4, 4))
        out = ds.remap_spectra(x, enmap.centers, enmap, "interpolate")
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_average_empty_interval_falls_back_to_nearest(self):
        src = synth.BandInventory(np.array([400.0, 2400.0]))
        target = synth.BandInventory(np.array([500.0, 1000.0, 2300.0]))
        x = np.stack([np.full((2, 2), 0.2), np.full((2, 2), 0.8)])
        out = ds.remap_spectra(x, src.centers, target, "average")
        np.testing.assert_allclose(out[0], 0.2)   # only 400 in interval
        np.testing.assert_allclose(out[1], 0.2)   # empty -> nearest (400)
        np.testing.assert_allclose(out[2], 0.8)

    def test_errors(self, desk_suite):
        enmap = synth.suite_by_id(desk_suite)["enmap"].bands
        with pytest.raises(ValueError):
            ds.remap_spectra(np.zeros((1, 2, 2)), [500.0], enmap,
                             "interpolate")
        with pytest.raises(ValueError):
            ds.remap_spectra(np.zeros((2, 2, 2)), [500.0, 400.0], enmap,
                             "interpolate")


@pytest.fixture(scope="module")
def hsi_branches():
    by_id = synth.suite_by_id(synth.make_sensor_suite("paper"))
    return [by_id["enmap"], by_id["desis"]]


class TestSelectBranch:
    def test_identical_source_wins(self, hsi_branches):
        assert ds.select_branch(hsi_branches[0], hsi_branches) == "enmap"
        assert ds.select_branch(hsi_branches[1], hsi_branches) == "desis"

    def test_eo1_routes_to_enmap(self, hsi_branches):
        src = synth.SensorSpec("eo1", "HSI", _eo1_like(), 30, 128, 2, 3, 15)
        assert ds.select_branch(src, hsi_branches) == "enmap"

    def test_vnir_source_routes_to_desis(self, hsi_branches):
        vnir = synth.SensorSpec("vnir", "HSI",
                                synth.BandInventory(
                                    np.linspace(420, 1000, 60)),
                                30, 128, 2, 3, 6)
        choice = ds.select_branch(vnir, hsi_branches)
        # exhaustive score table
        scores = {b.id: ds._coverage_score(vnir, b) for b in hsi_branches}
        assert choice == max(scores, key=scores.get) == "desis"

    def test_scale_consistency(self, hsi_branches):
        src = synth.SensorSpec("eo1", "HSI", _eo1_like(), 30, 128, 2, 3, 15)
        base = ds.select_branch(src, hsi_branches)
        scaled_branches = [
            synth.SensorSpec(b.id, b.kind, b.bands, b.gsd * 7, b.crop_px,
                             b.patch_stride, b.patch_kernel, b.group_count)
            for b in hsi_branches]
        scaled_src = synth.SensorSpec("eo1", "HSI", _eo1_like(), 30 * 7,
                                      128, 2, 3, 15)
        assert ds.select_branch(scaled_src, scaled_branches) == base


class TestMultiBranch:
    def test_stage_widths_double(self, desk_model, desk_suite):
        params, groupings, arch = desk_model
        src = synth.suite_by_id(desk_suite)["enmap"]
        x = synth.render_sensor(synth.generate_scene(50, desk_suite), src,
                                50)
        plan = ds.RoutePlan("multi", ("enmap", "desis"),
                            ("interpolate", "interpolate"))
        pyr = ds.multi_branch_features(x, src, plan, params, desk_suite,
                                       groupings, arch)
        assert tuple(m.dim for m in pyr.maps) == (64, 128, 256)
        assert pyr.resolutions == (8, 4, 2)

    def test_no_cross_contamination(self, desk_model, desk_suite):
        params, groupings, arch = desk_model
        specs = synth.suite_by_id(desk_suite)
        src = specs["enmap"]
        x = synth.render_sensor(synth.generate_scene(51, desk_suite), src,
                                51)
        plan = ds.RoutePlan("multi", ("enmap", "desis"),
                            ("interpolate", "interpolate"))
        pyr = ds.multi_branch_features(x, src, plan, params, desk_suite,
                                       groupings, arch)
        for i, bid in enumerate(plan.target_branches):
            raster = ds._route_raster(x, src, specs[bid],
                                      plan.remap_modes[i])
            _, solo = bb.encode(params, desk_suite, groupings,
                                {bid: raster}, arch)
            for stage in range(3):
                w = solo.maps[stage].dim
                merged = pyr.maps[stage].data.data[:, i * w:(i + 1) * w]
                np.testing.assert_array_equal(merged,
                                              solo.maps[stage].data.data)

    def test_route_plan_validation(self):
        with pytest.raises(ValueError):
            ds.RoutePlan("single", ("a", "b"))
        with pytest.raises(ValueError):
            ds.RoutePlan("multi", ("a",))
        with pytest.raises(ValueError):
            ds.RoutePlan("both", ("a",))


def _fake_pyramid(rng, sides, dims):
    maps = tuple(TokenGrid(s, s, nm.tensor(rng.normal(size=(s * s, d))
                                           * 0.3))
                 for s, d in zip(sides, dims))
    from specfuse.backbone import FeaturePyramid
    return FeaturePyramid(maps)


class TestSegHead:
    def test_paper_shape(self):
        rng = nm.stream(60, "pyr")
        pyr = _fake_pyramid(rng, (64, 32, 16), (192, 384, 768))
        head = {}
        ds.init_seg_head(head, nm.stream(60, "head"), "head",
                         [192, 384, 768], 10)
        logits = ds.seg_head_forward(head, "head", pyr)
        assert (logits.height, logits.width, logits.dim) == (64, 64, 10)

    def test_single_stage(self):
        rng = nm.stream(61, "pyr")
        pyr = _fake_pyramid(rng, (8, 4, 2), (32, 64, 128))
        head = {}
        ds.init_seg_head(head, nm.stream(61, "head"), "head", [64], 4,
                         width=16)
        logits = ds.seg_head_forward(head, "head", pyr, stages=(1,))
        assert (logits.height, logits.width, logits.dim) == (4, 4, 4)

    def test_class_count_validation(self):
        with pytest.raises(ValueError):
            ds.init_seg_head({}, nm.stream(0, "h"), "head", [32], 1)

    def test_gradcheck(self):
        rng = nm.stream(62, "pyr")
        pyr = _fake_pyramid(rng, (4, 2), (8, 12))
        head = {}
        ds.init_seg_head(head, nm.stream(62, "head"), "head", [8, 12], 3,
                         width=8)
        labels = nm.stream(62, "lab").integers(0, 3, size=(8, 8))

        def f():
            logits = ds.seg_head_forward(head, "head", pyr)
            return ds._cross_entropy(logits, labels, 3)

        err = nm.grad_check(f, list(head.values()), max_coords_per_param=4)
        assert err < 1e-4


class TestMiou:
    def test_perfect(self):
        x = np.arange(16).reshape(4, 4) % 3
        per_class, mean = ds.miou(x, x, 3)
        assert mean == 1.0 and all(v == 1.0 for v in per_class.values())

    def test_disjoint(self):
        a = np.zeros((4, 4), int)
        b = np.ones((4, 4), int)
        _, mean = ds.miou(a, b, 2)
        assert mean == 0.0

    def test_counting_oracle(self):
        rng = nm.stream(70, "m")
        pred = rng.integers(0, 3, size=(16, 16))
        truth = rng.integers(0, 3, size=(16, 16))
        per_class, mean = ds.miou(pred, truth, 3)
        ref = []
        for c in range(3):
            inter = np.sum((pred == c) & (truth == c))
            union = np.sum((pred == c) | (truth == c))
            if union:
                ref.append(inter / union)
                assert per_class[c] == inter / union
        assert mean == pytest.approx(np.mean(ref))

    def test_random_binary_expectation(self):
        rng = nm.stream(71, "m")
        pred = rng.integers(0, 2, size=(512, 512))
        truth = rng.integers(0, 2, size=(512, 512))
        _, mean = ds.miou(pred, truth, 2)
        assert abs(mean - 1 / 3) < 0.01

    def test_shape_mismatch(self):
        with pytest.raises(nm.ShapeError):
            ds.miou(np.zeros((2, 2)), np.zeros((3, 3)), 2)


class TestTrainProbe:
    def test_probe_runs_and_freezes_encoder(self, desk_model, desk_suite):
        params, groupings, arch = desk_model
        data = ds.make_probe_dataset(80, desk_suite, count=3)
        before = {k: p.data.copy() for k, p in params.items()}
        head, report = ds.train_probe(data, params, desk_suite, groupings,
                                      arch, n_classes=6, epochs=3,
                                      head_width=16)
        for k in before:
            np.testing.assert_array_equal(params[k].data, before[k])
        assert 0.0 <= report["miou"] <= 1.0
        assert 0.0 <= report["pixel_accuracy"] <= 1.0
        text = ds.evaluation_report(report)
        assert "mean iou" in text and "pixel accuracy" in text

    def test_oracle_labels_give_perfect_miou(self, desk_model, desk_suite):
        params, groupings, arch = desk_model
        data = ds.make_probe_dataset(81, desk_suite, count=1)
        with nm.no_grad():
            _, pyr = bb.encode(params, desk_suite, groupings, data[0][0],
                               arch)
        head = {}
        ds.init_seg_head(head, nm.stream(81, "head"), "head",
                         [m.dim for m in pyr.maps], 6, width=16)
        with nm.no_grad():
            logits = ds.seg_head_forward(head, "head", pyr)
            up = ds.upsample_tokens(logits, 16)
        labels = up.data.data.argmax(axis=1).reshape(16, 16)
        _, mean = ds.miou(labels, labels, 6)
        assert mean == 1.0

    def test_empty_dataset(self, desk_model, desk_suite):
        params, groupings, arch = desk_model
        with pytest.raises(ValueError):
            ds.train_probe([], params, desk_suite, groupings, arch, 6)
