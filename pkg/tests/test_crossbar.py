import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rramdc import topologies as T
from rramdc.crossbar import (
    FaultMap,
    Geometry,
    QuantSpec,
    evaluate_seed,
    faulty_inference,
    faulty_logits,
    inject_sa1,
    map_network,
    monte_carlo_eval,
    quantized_model,
)
from rramdc.engine import LayerSpec, Model, NetworkSpec
from rramdc.transforms import plan_placement


def single_conv(c_in, c_out, hw=6):
    return NetworkSpec(
        "one-conv",
        (c_in, hw, hw),
        (
            LayerSpec("conv", "conv2d", in_channels=c_in, out_channels=c_out, kernel=3, padding=1),
            LayerSpec("pool", "avgpool", kernel=0),
            LayerSpec("fc", "fc", in_channels=c_out, out_channels=3, bias=True),
        ),
    )


@pytest.fixture(scope="module")
def desk_model():
    return Model(T.desk_resnet(), seed=1)


@pytest.fixture(scope="module")
def desk_arrays(desk_model):
    return map_network(desk_model)


class TestQuant:
    def test_round_half_away(self):
        q = QuantSpec()
        assert q.quantize(np.array([0.5, -0.5, 1.5, -2.5, 0.49]), 1.0).tolist() == [1, -1, 2, -3, 0]

    def test_scale_and_clip(self):
        q = QuantSpec()
        w = np.array([-2.54, 1.0, 2.54])
        s = q.scale_for(w)
        assert s == pytest.approx(0.02)
        assert q.quantize(w, s).tolist() == [-127, 50, 127]

    def test_zero_layer_scale_one(self):
        assert QuantSpec().scale_for(np.zeros((3, 3))) == 1.0

    def test_only_eight_bits(self):
        with pytest.raises(ValueError):
            QuantSpec(bits=4)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-10, 10, allow_nan=False)))
    def test_roundtrip_within_half_step(self, w):
        q = QuantSpec()
        s = q.scale_for(w)
        assert np.all(np.abs(q.roundtrip(w) - w) <= s / 2 + 1e-12)


class TestMapping:
    def test_72_rows_16_cols(self):
        arrs = map_network(Model(single_conv(8, 16), seed=0))
        m = arrs.layers["conv"]
        assert m.matrix_shape == (72, 16)
        assert (m.row_tiles, m.col_tiles) == (1, 1)
        assert arrs.shape == (1, 128, 128)

    def test_576_rows_span_five_tiles(self):
        arrs = map_network(Model(single_conv(64, 64, hw=4), seed=0))
        m = arrs.layers["conv"]
        assert m.matrix_shape == (576, 64)
        assert (m.row_tiles, m.col_tiles) == (5, 1)

    def test_column_spill(self):
        arrs = map_network(Model(single_conv(2, 40), seed=0), geometry=Geometry(16, 16))
        m = arrs.layers["conv"]
        assert (m.row_tiles, m.col_tiles) == (2, 3)

    def test_one_cell_per_weight(self, desk_arrays):
        seen = np.concatenate([m.cell_index.ravel() for m in desk_arrays.layers.values()])
        assert len(np.unique(seen)) == len(seen)

    def test_roundtrip_exact(self, desk_model, desk_arrays):
        q = QuantSpec()
        for lid, w in desk_arrays.read_weights().items():
            assert np.array_equal(w, q.roundtrip(desk_model.weight(lid)))

    def test_unmapped_cells_zero(self, desk_arrays):
        used = np.zeros(desk_arrays.n_cells, dtype=bool)
        for m in desk_arrays.layers.values():
            used[m.cell_index.ravel()] = True
        assert not desk_arrays.tiles.reshape(-1)[~used].any()

    def test_default_plan_maps_only_spatial_convs(self, desk_model, desk_arrays):
        spec = desk_model.spec
        assert set(desk_arrays.programmed_layers()) == {layer.id for layer in spec.conv_layers() if layer.kernel > 1}

    def test_layout_reserves_host_tiles(self, desk_model):
        full = plan_placement(desk_model.spec, "all-rram")
        shared = map_network(desk_model, plan_placement(desk_model.spec), layout=full.rram_layers())
        assert shared.shape == map_network(desk_model, full).shape
        assert "s2b1.short.conv" not in shared.programmed_layers()
        assert not shared.tiles.reshape(-1)[shared.layers["s2b1.short.conv"].cell_index].any()

    def test_layout_must_cover_rram_layers(self, desk_model):
        with pytest.raises(ValueError, match="layout"):
            map_network(desk_model, layout=["stem.conv"])


class TestFaults:
    def test_zero_rate_empty(self, desk_arrays):
        assert inject_sa1(desk_arrays, 0.0, 3).count == 0

    def test_count_on_one_tile(self):
        arrs = map_network(Model(single_conv(8, 16), seed=0))
        n = inject_sa1(arrs, 0.1, 0).count
        assert abs(n - 1638.4) <= 3 * math.sqrt(16384 * 0.1 * 0.9)

    def test_exact_mode(self, desk_arrays):
        fm = inject_sa1(desk_arrays, 0.2, 5, mode="exact")
        assert fm.count == round(0.2 * desk_arrays.n_cells)

    def test_same_seed_same_map(self, desk_arrays):
        a, b = inject_sa1(desk_arrays, 0.2, 17), inject_sa1(desk_arrays, 0.2, 17)
        assert np.array_equal(a.coordinates(), b.coordinates())
        assert a.to_text() == b.to_text()
        assert not np.array_equal(a.faulty, inject_sa1(desk_arrays, 0.2, 18).faulty)

    def test_file_roundtrip(self, desk_arrays, tmp_path):
        fm = inject_sa1(desk_arrays, 0.1, 4)
        fm.save(tmp_path / "a.txt")
        back = FaultMap.load(tmp_path / "a.txt")
        assert np.array_equal(back.faulty, fm.faulty)
        assert (back.fault_rate, back.seed, back.kind, back.mode) == (0.1, 4, "SA1", "iid")
        inject_sa1(desk_arrays, 0.1, 4).save(tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_bad_rate(self, desk_arrays):
        with pytest.raises(ValueError):
            inject_sa1(desk_arrays, 1.5, 0)

    def test_sa1_read_rule(self):
        arrs = map_network(Model(single_conv(2, 4), seed=0), geometry=Geometry(18, 4))
        fm = inject_sa1(arrs, 0.5, 2)
        read = arrs.read_cells(fm)
        assert not read[fm.faulty].any()
        assert np.array_equal(read[~fm.faulty], arrs.tiles[~fm.faulty])

    def test_geometry_mismatch(self, desk_model, desk_arrays):
        other = map_network(desk_model, plan_placement(desk_model.spec, "all-rram"))
        fm = inject_sa1(other, 0.1, 0)
        with pytest.raises(ValueError, match="geometry"):
            faulty_logits(desk_model, np.zeros((1, 1, 8, 8)), desk_arrays, fm)


class TestFaultyInference:
    def test_no_fault_equivalence(self, desk_model, desk_arrays, rng):
        x = rng.standard_normal((50, 1, 8, 8))
        host = quantized_model(desk_model, desk_arrays).forward(x)
        xbar = faulty_logits(desk_model, x, desk_arrays, inject_sa1(desk_arrays, 0.0, 0), scale_correction=False)
        assert np.array_equal(host, xbar)

    def test_host_weights_untouched(self, desk_model, desk_arrays, rng):
        before = desk_model.weights_hash()
        fm = inject_sa1(desk_arrays, 0.3, 1)
        faulty_inference(desk_model, rng.standard_normal((4, 1, 8, 8)), desk_arrays, fm, 0.3)
        assert desk_model.weights_hash() == before
        assert "s2b1.short.conv" not in desk_arrays.read_weights(fm)

    def test_single_fault_linear_closed_form(self, rng):
        spec = NetworkSpec("lin", (6, 1, 1), (LayerSpec("fc", "fc", in_channels=6, out_channels=3, bias=True),))
        model = Model(spec, seed=0)
        arrs = map_network(model, plan_placement(spec, "custom", {"fc": "rram"}))
        m = arrs.layers["fc"]
        i, j = 4, 1  # input row i of output column j
        faulty = np.zeros(arrs.shape, dtype=bool)
        faulty.reshape(-1)[m.cell_index[i, j]] = True
        fm = FaultMap(faulty, 0.0, 0)
        x = rng.standard_normal((5, 6, 1, 1))
        clean = faulty_logits(model, x, arrs)
        hit = faulty_logits(model, x, arrs, fm)
        w_ji = arrs.read_quantized("fc")[j, i] * m.scale
        expected = clean.copy()
        expected[:, j] -= x[:, i, 0, 0] * w_ji
        np.testing.assert_allclose(hit, expected, rtol=0, atol=1e-12)

    def test_scale_correction_flag(self, desk_model, desk_arrays, rng):
        x = rng.standard_normal((8, 1, 8, 8))
        on = faulty_logits(desk_model, x, desk_arrays, p_prime=0.2)
        off = faulty_logits(desk_model, x, desk_arrays, p_prime=0.2, scale_correction=False)
        assert not np.allclose(on, off)


@pytest.fixture(scope="module")
def small():
    model = Model(T.desk_resnet(), seed=2)
    g = np.random.default_rng(0)
    return model, g.standard_normal((40, 1, 8, 8)), g.integers(0, 10, 40)


class TestMonteCarlo:
    def test_zero_rate(self, small):
        model, x, y = small
        res = monte_carlo_eval(model, x, y, 0.0, n_crossbars=5)
        assert res.std == 0.0
        assert res.mean == np.mean(faulty_inference(model, x, map_network(model)) == y)

    def test_single_crossbar(self, small):
        model, x, y = small
        arrs = map_network(model)
        res = monte_carlo_eval(model, x, y, 0.2, n_crossbars=1, base_seed=9, arrays=arrs)
        assert res.correct == [evaluate_seed(model, x, y, arrs, 0.2, 9, 0.2, True, "iid")]

    def test_order_independent(self, small):
        model, x, y = small
        a = monte_carlo_eval(model, x, y, 0.3, seeds=[0, 1, 2, 3, 4])
        b = monte_carlo_eval(model, x, y, 0.3, seeds=[3, 1, 4, 0, 2])
        assert (a.mean, a.std, a.min, a.max) == (b.mean, b.std, b.min, b.max)

    def test_stats(self):
        from rramdc.crossbar import MCResult

        r = MCResult(0.1, [0.5, 1.0], [0, 1], [1, 2], 2)
        assert (r.mean, r.std, r.min, r.max, r.n) == (0.75, 0.25, 0.5, 1.0, 2)

    def test_needs_a_crossbar(self, small):
        model, x, y = small
        with pytest.raises(ValueError):
            monte_carlo_eval(model, x, y, 0.1, n_crossbars=0)


class TestTrainedDegradation:
    def test_monotone_in_fault_rate(self, trained, digits):
        model = trained("desk-resnet", p=0.3)
        arrs = map_network(model)
        res = [monte_carlo_eval(model, digits.x_test, digits.y_test, f, 100, arrays=arrs) for f in (0.1, 0.2, 0.3)]
        for lo, hi in zip(res, res[1:]):
            assert lo.mean >= hi.mean - hi.std

    def test_plain_model_collapses(self, trained, digits):
        plain, dc = trained("desk-resnet", p=0.0), trained("desk-resnet", p=0.3)
        a = monte_carlo_eval(plain, digits.x_test, digits.y_test, 0.3, 20)
        b = monte_carlo_eval(dc, digits.x_test, digits.y_test, 0.3, 20)
        assert a.seeds == b.seeds
        assert b.mean - a.mean > 0.2
