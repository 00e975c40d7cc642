import math

import numpy as np
import pytest

from specfuse import backbone as bb
from specfuse import numerics as nm
from specfuse import synth
from specfuse.configs import ArchConfig, arch_preset
from specfuse.tokenizers import TokenGrid


@pytest.fixture(scope="module")
def desk_suite():
    return synth.make_sensor_suite("desk")


@pytest.fixture(scope="module")
def desk_model(desk_suite):
    arch = arch_preset("desk")
    params = {}
    groupings = bb.init_backbone(params, nm.stream(7, "init"), desk_suite,
                                 arch)
    return params, groupings, arch


def _grid(rng, side, dim):
    return TokenGrid(side, side, nm.tensor(rng.normal(size=(side * side,
                                                            dim)) * 0.1))


class TestLocalBranch:
    def test_halving_doubling(self, desk_model, desk_suite):
        params, _, arch = desk_model
        g = _grid(nm.stream(0, "g"), 8, arch.d_token)
        out, stage1 = bb.local_branch_forward(params, "s1", g, arch)
        assert (out.height, out.width, out.dim) == (4, 4, 64)
        assert (stage1.height, stage1.width, stage1.dim) == (8, 8, 32)

    def test_unknown_sensor(self, desk_model):
        params, _, arch = desk_model
        g = _grid(nm.stream(1, "g"), 8, arch.d_token)
        with pytest.raises(KeyError):
            bb.local_branch_forward(params, "nosuch", g, arch)

    def test_wrong_width(self, desk_model):
        params, _, arch = desk_model
        g = _grid(nm.stream(2, "g"), 8, arch.d_token + 1)
        with pytest.raises(nm.ShapeError):
            bb.local_branch_forward(params, "s1", g, arch)

    def test_zero_input_matches_reference_interpreter(self, desk_suite):
        # a tiny global-attention config recomputed by a straight-line
        # numpy interpreter, fed a zero token grid so only the position
        # table and biases propagate
        arch = ArchConfig(d_token=8, d_branch=16, d_trunk=32, d_fusion=16,
                          depths=(1, 2, 1), heads=(2, 2, 2),
                          windows=(0, 0, 0), d_spec=8, spec_layers=1,
                          spec_heads=2, spec_fusion=8, agg_heads=2,
                          fusion_heads=2, proj_dim=8)
        params = {}
        bb.init_backbone(params, nm.stream(11, "init"), desk_suite, arch)
        side = desk_suite[0].grid
        zeros = TokenGrid(side, side,
                          nm.tensor(np.zeros((side * side, arch.d_token))))
        out, _ = bb.local_branch_forward(params, "enmap", zeros, arch)

        ref = _reference_branch(params, "branch/enmap",
                                params["pos"].data.copy(), side, arch)
        np.testing.assert_allclose(out.data.data, ref, atol=1e-12)


def _p(params, name):
    return params[name].data


def _ref_ln(params, name, x):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    return (xc / np.sqrt(var + 1e-12)) * _p(params, f"{name}/g") \
        + _p(params, f"{name}/b")


def _ref_lin(params, name, x):
    return x @ _p(params, f"{name}/w") + _p(params, f"{name}/b")


def _ref_gelu(x):
    c = math.sqrt(2.0 / math.pi)
    t = np.tanh(c * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t)


def _ref_softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _ref_mha(params, name, q_in, kv_in, heads):
    def split(x):
        l, d = x.shape
        return x.reshape(l, heads, d // heads).transpose(1, 0, 2)

    q = split(_ref_lin(params, f"{name}/wq", q_in))
    k = split(_ref_lin(params, f"{name}/wk", kv_in))
    v = split(_ref_lin(params, f"{name}/wv", kv_in))
    a = _ref_softmax(q @ k.transpose(0, 2, 1) / math.sqrt(q.shape[-1]))
    out = (a @ v).transpose(1, 0, 2).reshape(q_in.shape[0], -1)
    return _ref_lin(params, f"{name}/wo", out)


def _ref_maxpool(x, side):
    d = x.shape[-1]
    m = x.reshape(side // 2, 2, side // 2, 2, d)
    return m.max(axis=(1, 3)).reshape((side // 2) ** 2, d)


def _ref_block(params, name, x, side, heads, pool):
    d_out = _p(params, f"{name}/attn/wo/b").shape[0]
    xn = _ref_ln(params, f"{name}/ln1", x)
    if x.shape[-1] != d_out:
        shortcut = _ref_lin(params, f"{name}/shortcut", xn)
    else:
        shortcut = x
    q_in = xn
    if pool:
        shortcut = _ref_maxpool(shortcut, side)
        q_in = _ref_maxpool(xn, side)
        side //= 2
    x = shortcut + _ref_mha(params, f"{name}/attn", q_in, xn, heads)
    xn2 = _ref_ln(params, f"{name}/ln2", x)
    h = _ref_lin(params, f"{name}/mlp2",
                 _ref_gelu(_ref_lin(params, f"{name}/mlp1", xn2)))
    return x + h, side


def _reference_branch(params, name, x, side, arch):
    for i in range(arch.depths[0]):
        x, side = _ref_block(params, f"{name}/stage1/{i}", x, side,
                             arch.heads[0], pool=False)
    x, side = _ref_block(params, f"{name}/stage2/0", x, side, arch.heads[1],
                         pool=True)
    for i in range(1, arch.depths[1]):
        x, side = _ref_block(params, f"{name}/stage2/{i}", x, side,
                             arch.heads[1], pool=False)
    return x


class TestFusion:
    def test_order_invariance_bit_identical(self, desk_model):
        params, _, arch = desk_model
        rng = nm.stream(3, "g")
        grids = {sid: _grid(rng, 4, arch.d_branch)
                 for sid in ("s1", "s2", "oli", "lst")}
        a = bb.fuse_sensors(params, grids, arch)
        shuffled = {sid: grids[sid] for sid in ("lst", "s2", "s1", "oli")}
        b = bb.fuse_sensors(params, shuffled, arch)
        assert np.array_equal(a.data.data, b.data.data)
        assert (a.height, a.width, a.dim) == (4, 4, arch.d_branch)

    def test_single_sensor_closed_form(self, desk_model):
        params, _, arch = desk_model
        g = _grid(nm.stream(4, "g"), 4, arch.d_branch)
        out = bb.fuse_sensors(params, {"oli": g}, arch)
        # one sensor: attention weight is 1 at every position
        t = g.data.data @ _p(params, "fuse/proj/oli/w") \
            + _p(params, "fuse/proj/oli/b") + _p(params, "fuse/emb/oli")
        v = t @ _p(params, "fuse/wv/w") + _p(params, "fuse/wv/b")
        ref = v @ _p(params, "fuse/wo/w") + _p(params, "fuse/wo/b")
        np.testing.assert_allclose(out.data.data, ref, atol=1e-12)

    def test_empty_and_mismatched(self, desk_model):
        params, _, arch = desk_model
        with pytest.raises(ValueError):
            bb.fuse_sensors(params, {}, arch)
        g4 = _grid(nm.stream(5, "g"), 4, arch.d_branch)
        g8 = _grid(nm.stream(5, "h"), 8, arch.d_branch)
        with pytest.raises(nm.ShapeError):
            bb.fuse_sensors(params, {"s1": g4, "s2": g8}, arch)


class TestTrunk:
    def test_shapes(self, desk_model):
        params, _, arch = desk_model
        g = _grid(nm.stream(6, "g"), 4, arch.d_branch)
        z, pooled = bb.shared_trunk_forward(params, g, arch)
        assert (z.height, z.width, z.dim) == (2, 2, 128)
        assert pooled.shape == (128,)

    def test_constant_input_pooled_equals_token(self, desk_model):
        params, _, arch = desk_model
        data = np.broadcast_to(nm.stream(7, "g").normal(size=arch.d_branch),
                               (16, arch.d_branch)).copy() * 0.1
        z, pooled = bb.shared_trunk_forward(
            params, TokenGrid(4, 4, nm.tensor(data)), arch)
        np.testing.assert_allclose(pooled.data, z.data.data[0], atol=1e-12)

    def test_pooled_is_token_mean(self, desk_model):
        params, _, arch = desk_model
        g = _grid(nm.stream(8, "g"), 4, arch.d_branch)
        z, pooled = bb.shared_trunk_forward(params, g, arch)
        assert np.max(np.abs(pooled.data - z.data.data.mean(axis=0))) < 1e-12


class TestWindowIsolation:
    def test_gradient_footprint_stays_in_window(self, desk_model):
        params, _, arch = desk_model
        grid, window = 8, 4
        x = nm.parameter(nm.stream(9, "x").normal(size=(1, grid * grid,
                                                        arch.d_token)) * 0.1)
        from specfuse.layers import block
        out, _ = block(params, "branch/s1/stage1/0", x, grid, arch.heads[0],
                       window=window)
        # loss reads one token in the top-left window
        loss = nm.sum_(nm.square(out[0, 0]))
        nm.backward(loss)
        g = x.grad.reshape(grid, grid, arch.d_token)
        inside = np.zeros((grid, grid), dtype=bool)
        inside[:window, :window] = True
        assert np.any(np.abs(g[inside]) > 0)
        assert np.max(np.abs(g[~inside])) == 0.0


class TestEncode:
    def test_shapes_and_pyramid(self, desk_model, desk_suite):
        params, groupings, arch = desk_model
        scene = synth.generate_scene(3, desk_suite)
        rasters = {s.id: synth.render_sensor(scene, s, 3)
                   for s in desk_suite if s.id in ("enmap", "s2", "s1")}
        pooled, pyr = bb.encode(params, desk_suite, groupings, rasters, arch)
        assert pooled.shape == (arch.d_trunk,)
        assert pyr.resolutions == (8, 4, 2)
        assert tuple(m.dim for m in pyr.maps) == (32, 64, 128)

    def test_stage1_map_is_sensor_mean(self, desk_model, desk_suite):
        params, groupings, arch = desk_model
        scene = synth.generate_scene(4, desk_suite)
        ids = ("s2", "oli")
        rasters = {s.id: synth.render_sensor(scene, s, 4)
                   for s in desk_suite if s.id in ids}
        _, pyr = bb.encode(params, desk_suite, groupings, rasters, arch)
        singles = []
        for sid in sorted(ids):
            _, p1 = bb.encode(params, desk_suite, groupings,
                              {sid: rasters[sid]}, arch)
            singles.append(p1.maps[0].data.data)
        np.testing.assert_allclose(pyr.maps[0].data.data,
                                   np.mean(singles, axis=0), atol=1e-12)

    def test_unknown_sensor_rejected(self, desk_model, desk_suite):
        params, groupings, arch = desk_model
        with pytest.raises(KeyError):
            bb.encode(params, desk_suite, groupings,
                      {"bogus": np.zeros((1, 8, 8))}, arch)

    def test_gradcheck_sum_pooled(self, desk_model, desk_suite):
        params, groupings, arch = desk_model
        scene = synth.generate_scene(5, desk_suite)
        rasters = {s.id: synth.render_sensor(scene, s, 5)
                   for s in desk_suite if s.id in ("emit", "lst")}

        def f():
            pooled, _ = bb.encode(params, desk_suite, groupings, rasters,
                                  arch)
            return nm.sum_(pooled)

        # sample a spread of parameter tensors across all sub-modules
        names = sorted(params)
        picked = [params[n] for n in names[::9]]
        err = nm.grad_check(f, picked, eps=1e-5, max_coords_per_param=2)
        assert err < 1e-4


class TestAccounting:
    def test_paper_parameter_count_within_5pct(self):
        suite = synth.make_sensor_suite("paper")
        arch = arch_preset("paper")
        params = {}
        bb.init_backbone(params, nm.stream(0, "init"), suite, arch)
        counts = bb.describe(params, suite)
        total = counts["total"]
        assert abs(total - 156e6) / 156e6 < 0.05, f"total={total:,}"
        assert counts["total"] == sum(v for k, v in counts.items()
                                      if k != "total")
        report = bb.format_describe(counts)
        assert "total" in report and f"{total:,}" in report

    def test_desk_describe_covers_all_params(self, desk_model, desk_suite):
        params, _, _ = desk_model
        counts = bb.describe(params, desk_suite)
        assert counts["total"] == sum(p.size for p in params.values())
        assert counts["total"] == sum(v for k, v in counts.items()
                                      if k != "total")
