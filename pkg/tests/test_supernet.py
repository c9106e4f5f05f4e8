"""
超网络组件测试
"""
import numpy as np
import pytest

from operations.base import OP_KINDS, OpKind
from operations.registry import get_operation
from services.autodiff import Tape, Tensor, backward, no_grad, parameter, sum_
from services.supernet import (
    EDGE_NAMES,
    CellArchitecture,
    ClashNetwork,
    ExtractorConfig,
    GemParams,
    batch_all_triplet_loss,
    cell_weights,
    cross_entropy,
    embedding_head,
    feature_extract,
    gem_pool,
    init_cell,
    init_extractor,
    init_head,
    md_cell_forward,
    mixed_op,
    strip_bounds,
    total_loss,
)
from utils.errors import ContractError

FEATURES = (2, 4, 4, 5, 4)


def tensors(params):
    return {k: Tensor(v) for k, v in params.items()}


def op_weights(rng):
    C, T = FEATURES[1], FEATURES[2]
    return {kind: tensors(get_operation(kind).init_params(C, T, rng)) for kind in OP_KINDS}


def run_op(kind, x, weights):
    return get_operation(kind).forward(Tensor(x), weights[kind]).data


class TestExtractor:

    def test_output_shape(self, rng):
        cfg = ExtractorConfig()
        weights = tensors(init_extractor(cfg, rng))
        out = feature_extract(Tensor(rng.standard_normal((2, 1, 8, 16, 12))), weights, cfg)
        assert out.shape == (2, 32, 8, 4, 3)

    def test_zero_input_gives_zero_features(self, rng):
        cfg = ExtractorConfig(channels=(4, 4))
        weights = tensors(init_extractor(cfg, rng))
        out = feature_extract(Tensor(np.zeros((1, 1, 4, 8, 8))), weights, cfg)
        assert (out.data == 0).all()

    def test_rejects_multi_channel_input(self, rng):
        cfg = ExtractorConfig(channels=(4,))
        with pytest.raises(ContractError):
            feature_extract(Tensor(np.zeros((1, 2, 4, 8, 8))), tensors(init_extractor(cfg, rng)), cfg)


class TestMixedOp:

    def test_uniform_alpha_averages_operations(self, rng):
        x = rng.standard_normal(FEATURES)
        weights = op_weights(rng)
        out = mixed_op(Tensor(x), Tensor(np.zeros(12)), weights).data
        expected = np.mean([run_op(kind, x, weights) for kind in OP_KINDS], axis=0)
        assert np.allclose(out, expected)

    def test_saturated_alpha_selects_operation(self, rng):
        x = rng.standard_normal(FEATURES)
        weights = op_weights(rng)
        alpha = np.full(12, -40.0)
        alpha[OpKind.MaxPool3.index] = 40.0
        out = mixed_op(Tensor(x), Tensor(alpha), weights).data
        assert np.max(np.abs(out - run_op(OpKind.MaxPool3, x, weights))) < 1e-9

    def test_non_finite_alpha(self, rng):
        alpha = np.zeros(12)
        alpha[0] = np.nan
        with pytest.raises(ContractError):
            mixed_op(Tensor(np.zeros(FEATURES)), Tensor(alpha), op_weights(rng))

    def test_alpha_receives_gradient(self, rng):
        weights = op_weights(rng)
        with Tape():
            alpha = parameter(np.zeros(12))
            out = mixed_op(Tensor(rng.standard_normal(FEATURES)), alpha, weights)
            grads = backward(sum_(out))
        assert np.abs(grads[alpha]).sum() > 0


class TestCell:

    def discrete_cell(self, kind):
        arch = CellArchitecture(discrete=[kind] * 5)
        weights = cell_weights(tensors(init_cell(arch, FEATURES[1], FEATURES[2], np.random.default_rng(0))))
        return arch, weights

    def test_all_zero_edges(self, rng):
        arch, weights = self.discrete_cell(OpKind.Zero)
        out = md_cell_forward(Tensor(rng.standard_normal(FEATURES)), Tensor(rng.standard_normal(FEATURES)), arch, weights)
        assert (out.data == 0).all()

    def test_all_skip_edges(self, rng):
        s, d = rng.standard_normal(FEATURES), rng.standard_normal(FEATURES)
        arch, weights = self.discrete_cell(OpKind.SkipConnect)
        out = md_cell_forward(Tensor(s), Tensor(d), arch, weights).data
        assert np.allclose(out, 3 * s + 3 * d)

    def test_shape_mismatch(self, rng):
        arch, weights = self.discrete_cell(OpKind.SkipConnect)
        with pytest.raises(ContractError):
            md_cell_forward(Tensor(np.zeros(FEATURES)), Tensor(np.zeros((1,) + FEATURES[1:])), arch, weights)

    def test_discrete_cell_only_creates_selected_params(self):
        arch = CellArchitecture(discrete=[OpKind.ChannelAttention] + [OpKind.Zero] * 4)
        names = list(init_cell(arch, 4, 4, np.random.default_rng(0)))
        assert names and all(n.startswith("cell.sil->n3.ChannelAttention.") for n in names)

    def test_relaxed_cell_output_shape(self, rng):
        arch = CellArchitecture.random(rng)
        weights = cell_weights(tensors(init_cell(arch, FEATURES[1], FEATURES[2], rng)))
        out = md_cell_forward(Tensor(rng.standard_normal(FEATURES)), Tensor(rng.standard_normal(FEATURES)), arch, weights)
        assert out.shape == FEATURES


class TestArchitecture:

    def test_document_round_trip(self, rng):
        arch = CellArchitecture(rng.standard_normal((5, 12)), discrete=[OpKind.AvgPool3] * 5)
        doc = arch.to_dict()
        assert doc["num_nodes"] == 5
        assert [e["edge"] for e in doc["edges"]] == EDGE_NAMES
        restored = CellArchitecture.from_dict(doc)
        assert np.array_equal(restored.alpha.data, arch.alpha.data)
        assert restored.discrete == arch.discrete

    def test_relaxed_document_has_no_ops(self):
        doc = CellArchitecture().to_dict()
        assert all(e["op"] is None for e in doc["edges"])
        assert not CellArchitecture.from_dict(doc).is_discrete

    def test_discrete_document_carries_operation_config(self):
        arch = CellArchitecture(discrete=[OpKind.AtrousConv3Rate2, OpKind.SkipConnect] + [OpKind.MaxPool3] * 3)
        edges = arch.to_dict()["edges"]
        assert edges[0]["op_config"] == {"kernel": 3, "dilation": 2}
        assert edges[1]["op_config"] == {}
        assert edges[2]["op_config"]["mode"] == "max"
        assert CellArchitecture.from_dict(arch.to_dict()).discrete == arch.discrete

    def test_relaxed_document_has_no_operation_config(self):
        assert all(e["op_config"] is None for e in CellArchitecture().to_dict()["edges"])

    def test_wrong_alpha_shape(self):
        with pytest.raises(ContractError):
            CellArchitecture(np.zeros((4, 12)))

    def test_edge_weights_sum_to_one(self, rng):
        weights = CellArchitecture.random(rng, scale=1.0).edge_weights()
        assert np.allclose(weights.sum(axis=1), 1.0)


class TestGem:

    def test_k_one_is_mean(self, rng):
        f = rng.uniform(0.1, 2.0, size=FEATURES)
        out = gem_pool(Tensor(f), GemParams(Tensor(np.ones(1))))
        assert out.shape == (2, 4, 1, 5, 4)
        assert np.allclose(out.data, f.mean(axis=2, keepdims=True))

    def test_large_k_approaches_max(self, rng):
        f = rng.uniform(0.1, 2.0, size=FEATURES)
        out = gem_pool(Tensor(f), GemParams(Tensor(np.array([64.0])))).data
        assert (out <= f.max(axis=2, keepdims=True) + 1e-9).all()
        assert (out >= f.mean(axis=2, keepdims=True) - 1e-12).all()

    def test_k_three_formula(self, rng):
        f = rng.uniform(0.1, 2.0, size=FEATURES)
        out = gem_pool(Tensor(f), GemParams(Tensor(np.array([3.0])))).data
        assert np.allclose(out, np.cbrt((f ** 3).mean(axis=2, keepdims=True)))

    def test_negative_features_clamped(self):
        f = np.full((1, 1, 3, 1, 1), -5.0)
        out = gem_pool(Tensor(f), GemParams(Tensor(np.ones(1)), eps=1e-6)).data
        assert out.item() == pytest.approx(1e-6)

    def test_enforce_keeps_exponent_at_least_one(self):
        gem = GemParams(parameter([0.3]))
        gem.enforce()
        assert gem.k.data.tolist() == [1.0]

    def test_single_peak_hits_lower_band_edge(self):
        f = np.array([1.0] + [0.1] * 7).reshape(1, 1, 8, 1, 1)
        out = gem_pool(Tensor(f), GemParams(Tensor(np.array([64.0])))).item()
        assert out == pytest.approx(8 ** (-1 / 64), rel=1e-12)
        assert out == pytest.approx(0.96803, abs=1e-5)

    def test_output_within_max_band(self, rng):
        f = rng.uniform(0.1, 2.0, size=(3, 2, 8, 2, 2))
        peak = f.max(axis=2, keepdims=True)
        out = gem_pool(Tensor(f), GemParams(Tensor(np.array([64.0])))).data
        assert (out >= peak * 8 ** (-1 / 64) * (1 - 1e-12)).all()
        assert (out <= peak * (1 + 1e-12)).all()

    def test_monotone_in_exponent(self, rng):
        f = rng.uniform(0.1, 2.0, size=FEATURES)
        ks = [1.0, 1.5, 2.0, 3.0, 5.0, 8.0, 16.0, 32.0, 64.0]
        outs = np.stack([gem_pool(Tensor(f), GemParams(Tensor(np.array([k])))).data for k in ks])
        assert (np.diff(outs, axis=0) >= -1e-12).all()
        assert np.allclose(outs[0], f.mean(axis=2, keepdims=True))


class TestHead:

    def test_strip_bounds_cover_height(self):
        assert strip_bounds(5, 2) == [(0, 2), (2, 5)]
        assert strip_bounds(4, 4) == [(0, 1), (1, 2), (2, 3), (3, 4)]

    def test_too_many_parts(self):
        with pytest.raises(ContractError):
            strip_bounds(3, 4)

    def test_embedding_shape(self, rng):
        weights = tensors(init_head(4, 2, 6, rng))
        out = embedding_head(Tensor(rng.standard_normal((3, 4, 1, 5, 4))), weights, parts=2)
        assert out.shape == (3, 2, 6)

    def test_batch_permutation_equivariant(self, rng):
        weights = tensors(init_head(4, 2, 6, rng))
        f = rng.standard_normal((3, 4, 1, 5, 4))
        perm = [2, 0, 1]
        a = embedding_head(Tensor(f), weights, parts=2).data
        b = embedding_head(Tensor(f[perm]), weights, parts=2).data
        assert np.allclose(a[perm], b)


class TestLosses:

    labels = np.array([0, 0, 1, 1])

    def distances(self, positive, negative):
        same = self.labels[:, None] == self.labels[None, :]
        dist = np.where(same, positive, negative)
        np.fill_diagonal(dist, 0.0)
        return Tensor(dist[None])

    def test_separated_clusters_have_zero_loss(self):
        loss, valid, active = batch_all_triplet_loss(self.distances(0.1, 1.0), self.labels, margin=0.2)
        assert valid
        assert loss.item() == 0.0
        assert active == 0.0

    def test_overlapping_clusters(self):
        loss, _, active = batch_all_triplet_loss(self.distances(1.0, 0.6), self.labels, margin=0.2)
        assert loss.item() == pytest.approx(0.6)
        assert active == 1.0

    def test_single_identity_has_no_triplets(self):
        loss, valid, _ = batch_all_triplet_loss(Tensor(np.ones((1, 3, 3))), np.zeros(3, dtype=int), margin=0.2)
        assert not valid
        assert loss.item() == 0.0

    def test_uniform_logits_cross_entropy(self):
        ce = cross_entropy(Tensor(np.zeros((4, 5))), np.array([0, 1, 2, 3]))
        assert ce.item() == pytest.approx(np.log(5))

    def test_total_loss_adds_parts(self, rng):
        f_final = Tensor(rng.standard_normal((4, 2, 3)))
        loss, stats = total_loss(f_final, Tensor(np.zeros((4, 2))), self.labels, margin=0.2)
        assert loss.item() == pytest.approx(stats.triplet + stats.ce)
        assert stats.ce == pytest.approx(np.log(2))
        assert stats.triplet_valid


class TestNetwork:

    def make(self, **kwargs):
        options = dict(
            extractor=ExtractorConfig(channels=(4, 4)), clip_length=4, num_classes=3,
            parts=2, embed_dim=5, seed=1
        )
        options.update(kwargs)
        if options.get("fusion", "cell") == "cell" and "arch" not in options:
            options["arch"] = CellArchitecture.random(np.random.default_rng(0))
        return ClashNetwork(**options)

    def test_forward_shapes(self, rng):
        net = self.make()
        x = rng.random((3, 1, 4, 16, 12))
        f_final, logits = net.forward(Tensor(x), Tensor(x))
        assert f_final.shape == (3, 2, 5)
        assert logits.shape == (3, 3)
        assert net.embed(x, x).shape == (3, 10)

    def test_same_seed_same_parameters(self):
        a, b = self.make(), self.make()
        assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)

    def test_add_fusion_has_no_architecture(self):
        net = self.make(fusion="add")
        assert not net.alpha_params()
        assert not any(n.startswith("cell.") for n in net.params)

    def test_cell_fusion_requires_architecture(self):
        with pytest.raises(ContractError):
            ClashNetwork(ExtractorConfig(channels=(4,)), 4, 3, fusion="cell")

    def test_state_dict_round_trip(self):
        source, target = self.make(seed=1), self.make(seed=2)
        target.load_state_dict(source.state_dict())
        assert all(np.array_equal(source.params[n].data, target.params[n].data) for n in source.params)

    def test_state_dict_shape_mismatch(self):
        state = self.make().state_dict()
        state["gem.k"] = np.ones(2)
        with pytest.raises(ContractError):
            self.make().load_state_dict(state)

    def test_loss_gradients_reach_both_parameter_groups(self, rng):
        net = self.make()
        x = rng.random((4, 1, 4, 16, 12))
        with Tape():
            loss, _ = net.loss([Tensor(x), Tensor(x)], np.array([0, 0, 1, 1]), margin=0.2)
            grads = backward(loss)
        assert np.abs(grads[net.params["extractor.conv1.weight"]]).sum() > 0
        assert np.abs(grads[net.arch.alpha]).sum() > 0

    def test_concat_fusion_projects_back_to_channels(self, rng):
        net = self.make(fusion="concat")
        assert net.params["fusion.concat.weight"].shape == (4, 8, 1, 1, 1)
        assert not net.alpha_params()
        x = rng.random((4, 1, 4, 16, 12))
        with Tape():
            loss, _ = net.loss([Tensor(x), Tensor(x[::-1].copy())], np.array([0, 0, 1, 1]), margin=0.2)
            grads = backward(loss)
        assert np.abs(grads[net.params["fusion.concat.weight"]]).sum() > 0

    def test_single_descriptor_network(self, rng):
        net = self.make(fusion="none", inputs=1)
        x = rng.random((3, 1, 4, 16, 12))
        f_final, logits = net.forward(Tensor(x))
        assert f_final.shape == (3, 2, 5)
        assert net.embed(x).shape == (3, 10)
        assert not any(n.startswith(("cell.", "fusion.")) for n in net.params)

    def test_input_count_must_match(self, rng):
        x = Tensor(rng.random((2, 1, 4, 16, 12)))
        with pytest.raises(ContractError):
            self.make().forward(x)
        with pytest.raises(ContractError):
            self.make(fusion="none", inputs=1).forward(x, x)

    @pytest.mark.parametrize("fusion,inputs", [("none", 2), ("add", 1), ("concat", 1), ("sum", 2)])
    def test_fusion_must_fit_descriptor_count(self, fusion, inputs):
        with pytest.raises(ContractError):
            ClashNetwork(ExtractorConfig(channels=(4,)), 4, 3, fusion=fusion, inputs=inputs)

    def test_forward_outside_tape_keeps_parameters_unrecorded(self, rng):
        net = self.make()
        x = rng.random((2, 1, 4, 16, 12))
        f_final, _ = net.forward(Tensor(x), Tensor(x))
        assert not f_final.requires_grad
        assert f_final.tape is None


class TestCompositeGradient:

    def test_matches_central_differences(self, rng):
        net = ClashNetwork(
            ExtractorConfig(channels=(4, 4)), clip_length=4, num_classes=2, parts=2, embed_dim=5,
            arch=CellArchitecture.random(np.random.default_rng(3), scale=1.0), seed=5
        )
        xs = [rng.random((4, 1, 4, 8, 8)) for _ in range(2)]
        labels = np.array([0, 0, 1, 1])

        def objective():
            with no_grad():
                loss, _ = net.loss([Tensor(x) for x in xs], labels, margin=0.2)
            return loss.item()

        with Tape():
            loss, _ = net.loss([Tensor(x) for x in xs], labels, margin=0.2)
            grads = backward(loss)

        eps = 1e-6
        for leaf in [net.arch.alpha, net.params["extractor.conv1.weight"], net.gem.k]:
            flat = leaf.data.reshape(-1)
            for c in rng.choice(leaf.size, size=min(4, leaf.size), replace=False):
                original = flat[c]
                flat[c] = original + eps
                plus = objective()
                flat[c] = original - eps
                minus = objective()
                flat[c] = original
                numeric = (plus - minus) / (2 * eps)
                analytic = grads[leaf].reshape(-1)[c]
                assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-7
