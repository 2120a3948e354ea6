import numpy as np
import pytest

from hqp.errors import GraphError, ShapeError
from hqp.graph import (
    FilterId,
    Layer,
    ModelGraph,
    bn_layer,
    build_mini_convnet,
    build_mini_resnet,
    check_shapes,
    conv_layer,
    count_filters,
    count_flops,
    count_params,
    dense_layer,
    fold_batchnorm,
    forward,
)


def conv_widths(model):
    return [model.layers[i].out_channels for i in model.conv_layers()]


def randomize_bn(model, seed=0):
    r = np.random.default_rng(seed)
    for layer in model.layers:
        if layer.kind == "batchnorm":
            c = layer.params["gamma"].size
            layer.params["gamma"][:] = r.uniform(0.5, 1.5, c)
            layer.params["beta"][:] = r.normal(0, 0.3, c)
            layer.params["mean"][:] = r.normal(0, 0.3, c)
            layer.params["var"][:] = r.uniform(0.5, 2.0, c)
    return model


class TestBuilders:
    def test_convnet_widths(self):
        assert conv_widths(build_mini_convnet(1.0)) == [16, 32, 64, 64]
        assert conv_widths(build_mini_convnet(0.5)) == [8, 16, 32, 32]

    def test_convnet_filter_count(self):
        assert count_filters(build_mini_convnet(1.0)) == 176

    def test_convnet_rejects_bad_multiplier(self):
        with pytest.raises(ValueError):
            build_mini_convnet(0)

    def test_deterministic_per_seed(self):
        assert build_mini_resnet(2, seed=5) == build_mini_resnet(2, seed=5)
        assert build_mini_resnet(2, seed=5) != build_mini_resnet(2, seed=6)

    def test_glorot_bounds(self):
        model = build_mini_convnet(1.0, seed=0)
        w = model.layers[0].params["weight"]
        limit = np.sqrt(6.0 / (1 * 9 + 16 * 9))
        assert np.abs(w).max() <= limit

    def test_resnet_one_block_has_one_add(self):
        model = build_mini_resnet(1)
        assert [l.kind for l in model.layers].count("residual_end") == 1

    @pytest.mark.parametrize("blocks", [1, 2, 3])
    def test_residual_groups_cover_add_inputs_once(self, blocks):
        model = build_mini_resnet(blocks, width=6)
        groups = model.residual_groups
        members = [f for g in groups for f in g]
        assert len(members) == len(set(members))
        adds = [i for i, l in enumerate(model.layers) if l.kind == "residual_end"]
        # stem plus the second conv of every block feed the adds
        producers = {0} | {i - 2 for i in adds}
        assert {f.layer_index for f in members} == producers
        assert len(groups) == 6
        for g in groups:
            assert len({f.channel_index for f in g}) == 1

    def test_resnet_forward_shape(self, rng):
        model = build_mini_resnet(2)
        x = rng.standard_normal((1, 1, 16, 16)).astype(np.float32)
        assert forward(model, x).shape == (1, 10)
        assert check_shapes(model) == (10,)

    def test_resnet_rejects_zero_blocks(self):
        with pytest.raises(ValueError):
            build_mini_resnet(0)


class TestShapeCheck:
    def test_mismatch_is_reported_with_layer(self):
        r = np.random.default_rng(0)
        model = ModelGraph([conv_layer(r, 1, 4), conv_layer(r, 3, 2)], (1, 8, 8))
        with pytest.raises(ShapeError, match="layer 1"):
            check_shapes(model)

    def test_accepts_iff_forward_succeeds(self, rng):
        r = np.random.default_rng(0)
        good = ModelGraph([conv_layer(r, 1, 4), Layer("pool"), dense_layer(r, 4, 3)], (1, 8, 8), 3)
        bad = ModelGraph([conv_layer(r, 1, 4), Layer("pool"), dense_layer(r, 5, 3)], (1, 8, 8), 3)
        x = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
        check_shapes(good)
        forward(good, x)
        with pytest.raises(ShapeError):
            check_shapes(bad)
        with pytest.raises(ShapeError):
            forward(bad, x)

    def test_residual_shape_mismatch(self):
        r = np.random.default_rng(0)
        layers = [conv_layer(r, 1, 4), Layer("residual_begin"), conv_layer(r, 4, 5),
                  Layer("residual_end")]
        with pytest.raises(ShapeError, match="residual"):
            check_shapes(ModelGraph(layers, (1, 8, 8)))

    def test_unmatched_residual(self):
        r = np.random.default_rng(0)
        with pytest.raises(GraphError):
            check_shapes(ModelGraph([conv_layer(r, 1, 4), Layer("residual_begin")], (1, 8, 8)))

    def test_unknown_kind(self):
        with pytest.raises(GraphError):
            Layer("softmax")


class TestFoldBatchNorm:
    def test_identity_bn_leaves_kernel(self):
        model = build_mini_convnet(0.25, seed=0)
        folded = fold_batchnorm(model)
        np.testing.assert_allclose(folded.layers[0].params["weight"],
                                   model.layers[0].params["weight"], rtol=1e-5)

    @pytest.mark.parametrize("builder", [lambda: build_mini_convnet(0.5, seed=3),
                                         lambda: build_mini_resnet(2, width=6, seed=3)])
    def test_outputs_unchanged(self, builder, rng):
        model = randomize_bn(builder())
        folded = fold_batchnorm(model)
        x = rng.standard_normal((4, 1, 16, 16)).astype(np.float32)
        np.testing.assert_allclose(forward(folded, x), forward(model, x), atol=1e-5)
        assert not any(l.kind == "batchnorm" for l in folded.layers)
        assert len(folded.layers) < len(model.layers)
        assert count_flops(folded) == count_flops(model)

    def test_folding_twice_is_error(self):
        with pytest.raises(GraphError):
            fold_batchnorm(fold_batchnorm(build_mini_convnet(0.25)))

    def test_orphan_bn(self):
        r = np.random.default_rng(0)
        model = ModelGraph([conv_layer(r, 1, 2), Layer("relu"), bn_layer(2)], (1, 4, 4))
        with pytest.raises(GraphError):
            fold_batchnorm(model)


class TestCounts:
    def test_dense_params(self):
        r = np.random.default_rng(0)
        model = ModelGraph([dense_layer(r, 7, 3)], (7,), 3)
        assert count_params(model) == 7 * 3 + 3

    def test_conv_flops_formula(self):
        r = np.random.default_rng(0)
        model = ModelGraph([conv_layer(r, 3, 5, k=3, stride=2, padding=1)], (3, 9, 9))
        ho = (9 + 2 - 3) // 2 + 1
        assert count_flops(model) == 2 * 5 * 3 * 9 * ho * ho

    def test_bn_running_stats_not_params(self):
        model = build_mini_convnet(0.25)
        bn = sum(2 * l.params["gamma"].size for l in model.layers if l.kind == "batchnorm")
        w = sum(l.params["weight"].size + l.params["bias"].size
                for l in model.layers if "weight" in l.params)
        assert count_params(model) == w + bn


class TestFilterId:
    def test_ordering(self):
        assert sorted([FilterId(2, 0), FilterId(1, 5), FilterId(1, 2)]) == [
            FilterId(1, 2), FilterId(1, 5), FilterId(2, 0)]
