"""
架构搜索、离散化、重训练与评估测试
"""
from collections import OrderedDict
from types import SimpleNamespace

import numpy as np
import pytest

from config import SearchConfig
from operations.base import OP_KINDS, OpKind
from services.search import (
    GaitSample,
    PKSampler,
    build_network,
    clip_indices,
    compute_descriptor,
    discretize,
    evaluate_rank1,
    label_map,
    optimize_step,
    prepare_samples,
    retrain,
    search,
    split_dataset,
)
from services.optimizer import AdamState
from services.silhouette import build_corpus
from services.supernet import CellArchitecture
from utils.errors import ConfigError, ContractError, InputError, SplitError


def identities(counts):
    return [SimpleNamespace(subject_id=f"id{i:02d}", index=j) for i, n in enumerate(counts) for j in range(n)]


def corpus_samples(cfg, first_sequence=0, seqs_per_id=None):
    corpus = build_corpus(
        cfg.num_ids, seqs_per_id or cfg.seqs_per_id, cfg.frames, cfg.height, cfg.width,
        seed=cfg.seed, first_sequence=first_sequence
    )
    return prepare_samples(corpus, label_map(corpus), cfg.descriptor_names)


@pytest.fixture
def tiny_samples(tiny_config):
    return corpus_samples(tiny_config)


@pytest.fixture
def tiny_split(tiny_config, tiny_samples):
    return split_dataset(tiny_samples, tiny_config.val_fraction, tiny_config.seed)


class TestSplit:

    def test_half_split_per_identity(self):
        train, val = split_dataset(identities([4] * 8), 0.5, seed=0)
        assert len(train) == 16 and len(val) == 16
        for i in range(8):
            sid = f"id{i:02d}"
            assert sum(x.subject_id == sid for x in val) == 2

    def test_odd_count_floors(self):
        _, val = split_dataset(identities([3]), 0.5, seed=0)
        assert len(val) == 1

    def test_small_fraction_still_validates(self):
        train, val = split_dataset(identities([2, 2]), 0.1, seed=0)
        assert len(val) == 2 and len(train) == 2

    def test_deterministic_and_order_preserving(self):
        data = identities([5, 5, 5])
        a = split_dataset(data, 0.4, seed=9)
        b = split_dataset(data, 0.4, seed=9)
        assert a == b
        train_positions = [data.index(x) for x in a[0]]
        assert train_positions == sorted(train_positions)

    def test_single_sequence_identity(self):
        with pytest.raises(SplitError) as err:
            split_dataset(identities([3, 1]), 0.5, seed=0)
        assert err.value.identity == "id01"

    def test_fraction_out_of_range(self):
        with pytest.raises(ContractError):
            split_dataset(identities([2]), 1.0, seed=0)


class TestSampler:

    def test_clip_wraps_short_sequences(self):
        assert clip_indices(3, 5).tolist() == [0, 1, 2, 0, 1]
        assert clip_indices(8, 3, start=6).tolist() == [6, 7, 0]

    def test_batch_layout(self, tiny_samples):
        sampler = PKSampler(tiny_samples, p=2, k=3, clip_length=4, rng=np.random.default_rng(0))
        (sil, dstf), labels = sampler.sample()
        assert sil.shape == (6, 1, 4, 16, 12)
        assert dstf.shape == sil.shape
        assert sorted(np.unique(labels, return_counts=True)[1].tolist()) == [3, 3]

    def test_too_few_identities(self, tiny_samples):
        with pytest.raises(ContractError):
            PKSampler(tiny_samples, p=3, k=2, clip_length=4, rng=np.random.default_rng(0))


class TestSearch:

    @pytest.mark.parametrize("u", [1, 2, 5])
    def test_step_counters(self, tiny_config, tiny_split, u):
        tiny_config.u = u
        train, val = tiny_split
        _, state = search(tiny_config, train, val, num_classes=2)
        assert state.w_steps == u * tiny_config.search_iterations
        assert state.alpha_steps == tiny_config.search_iterations
        assert len(state.train_history) == state.w_steps
        assert len(state.alpha_history) == state.alpha_steps

    def test_zero_alpha_learning_rate_freezes_architecture(self, tiny_config, tiny_split):
        tiny_config.lr_alpha = 0.0
        train, val = tiny_split
        arch, _ = search(tiny_config, train, val, num_classes=2)
        initial = CellArchitecture.random(np.random.default_rng([tiny_config.seed, 1]))
        assert np.array_equal(arch.alpha.data, initial.alpha.data)

    def test_alpha_moves_when_learning(self, tiny_config, tiny_split):
        tiny_config.lr_alpha = 0.01
        train, val = tiny_split
        _, state = search(tiny_config, train, val, num_classes=2)
        assert not np.array_equal(state.alpha_history[0], CellArchitecture.random(
            np.random.default_rng([tiny_config.seed, 1])).alpha.data)

    def test_same_seed_same_architecture(self, tiny_config, tiny_split):
        train, val = tiny_split
        a, _ = search(tiny_config, train, val, num_classes=2)
        b, _ = search(tiny_config, train, val, num_classes=2)
        assert np.array_equal(a.alpha.data, b.alpha.data)

    def test_checkpoints_written(self, tiny_config, tiny_split, tmp_path):
        tiny_config.checkpoint_every = 1
        train, val = tiny_split
        search(tiny_config, train, val, num_classes=2, run_dir=str(tmp_path))
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["search_000001.ckpt", "search_000002.ckpt"]

    def test_add_fusion_cannot_search(self, tiny_config, tiny_split):
        tiny_config.fusion = "add"
        with pytest.raises(ContractError):
            search(tiny_config, *tiny_split, num_classes=2)


class TestDiscretize:

    def test_ties_pick_first_operation(self):
        arch = discretize(CellArchitecture(np.zeros((5, 12))))
        assert arch.discrete == [OP_KINDS[0]] * 5

    def test_argmax_per_edge(self):
        alpha = np.zeros((5, 12))
        alpha[2, OpKind.TemporalAttention.index] = 1.0
        alpha[4, OpKind.Zero.index] = 0.5
        arch = discretize(CellArchitecture(alpha))
        assert arch.discrete[2] == OpKind.TemporalAttention
        assert arch.discrete[4] == OpKind.Zero
        assert len(arch.discrete) == 5

    def test_idempotent(self, rng):
        once = discretize(CellArchitecture(rng.standard_normal((5, 12))))
        twice = discretize(once)
        assert once.discrete == twice.discrete
        assert np.array_equal(once.alpha.data, twice.alpha.data)


class TestRetrain:

    def arch(self):
        return CellArchitecture(discrete=[OpKind.SkipConnect, OpKind.ChannelAttention, OpKind.AvgPool3,
                                          OpKind.Zero, OpKind.DepthwiseSepConv3])

    def test_zero_iterations_is_initialisation(self, tiny_config, tiny_samples):
        tiny_config.retrain_iterations = 0
        network, history = retrain(self.arch(), tiny_samples, tiny_config, num_classes=2)
        fresh = build_network(tiny_config, 2, self.arch())
        assert history == []
        assert all(np.array_equal(network.params[n].data, fresh.params[n].data) for n in fresh.params)

    def test_deterministic(self, tiny_config, tiny_samples):
        a, ha = retrain(self.arch(), tiny_samples, tiny_config, num_classes=2)
        b, hb = retrain(self.arch(), tiny_samples, tiny_config, num_classes=2)
        assert ha == hb
        assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)

    def test_requires_discrete_architecture(self, tiny_config, tiny_samples):
        with pytest.raises(ContractError):
            retrain(CellArchitecture(), tiny_samples, tiny_config, num_classes=2)

    def test_add_fusion_without_architecture(self, tiny_config, tiny_samples):
        tiny_config.fusion = "add"
        network, history = retrain(None, tiny_samples, tiny_config, num_classes=2)
        assert len(history) == tiny_config.retrain_iterations
        assert network.arch is None

    def test_gem_exponent_stays_at_least_one(self, tiny_config, tiny_samples):
        tiny_config.lr_w = 0.2
        network, _ = retrain(self.arch(), tiny_samples, tiny_config, num_classes=2)
        assert network.gem.k.data[0] >= 1.0


class TestRank1:

    def network(self, cfg):
        return build_network(cfg, 2, discretize(CellArchitecture(np.zeros((5, 12)))))

    def test_gallery_reused_as_query_set(self, tiny_config, tiny_samples):
        assert evaluate_rank1(self.network(tiny_config), tiny_samples, tiny_samples, tiny_config.clip_length) == 1.0

    def test_empty_gallery(self, tiny_config, tiny_samples):
        with pytest.raises(InputError):
            evaluate_rank1(self.network(tiny_config), [], tiny_samples, tiny_config.clip_length)

    def test_query_identity_missing_from_gallery(self, tiny_config, tiny_samples):
        gallery = [s for s in tiny_samples if s.subject_id == "id00"]
        with pytest.raises(InputError):
            evaluate_rank1(self.network(tiny_config), gallery, tiny_samples, tiny_config.clip_length)


class TestDescriptors:

    @pytest.fixture
    def sequence(self):
        return build_corpus(2, 1, 6, 16, 12, seed=3)[0]

    def test_gei_repeats_over_time(self, sequence):
        g = compute_descriptor(sequence, "gei")
        assert g.shape == (6, 16, 12)
        assert np.array_equal(g, np.repeat(g[:1], 6, axis=0))
        assert np.allclose(g[0], sequence.to_array().mean(axis=0))

    def test_bidt_unsigned_dstf_signed(self, sequence):
        assert compute_descriptor(sequence, "bidt").min() >= 0.0
        dstf = compute_descriptor(sequence, "dstf")
        assert dstf.min() < 0.0 < dstf.max()

    def test_unknown_descriptor(self, sequence):
        with pytest.raises(ContractError):
            compute_descriptor(sequence, "geni")

    def test_samples_keep_descriptor_order(self, tiny_config):
        tiny_config.descriptors = "dstf+gei"
        samples = corpus_samples(tiny_config)
        assert list(samples[0].descriptors) == ["dstf", "gei"]
        assert len(samples[0].clip(np.arange(3))) == 2

    def test_mismatched_descriptor_shapes(self):
        with pytest.raises(ContractError):
            GaitSample("id00", "seq00", 0, OrderedDict(sil=np.zeros((2, 3, 3)), dstf=np.zeros((3, 3, 3))))

    def test_single_descriptor_batches(self, tiny_config):
        tiny_config.descriptors = "sil"
        sampler = PKSampler(corpus_samples(tiny_config), p=2, k=2, clip_length=4, rng=np.random.default_rng(0))
        inputs, labels = sampler.sample()
        assert len(inputs) == 1 and inputs[0].shape == (4, 1, 4, 16, 12)


class TestDescriptorVariants:

    @pytest.mark.parametrize("descriptors,fusion", [
        ("sil+dstf", "concat"),
        ("sil+bidt", "cell"),
        ("sil", "none"),
        ("dstf", "none"),
        ("sil+gei", "add"),
        ("dstf+gei", "cell"),
    ])
    def test_retrain_and_rank1(self, tiny_config, descriptors, fusion):
        tiny_config.descriptors = descriptors
        tiny_config.fusion = fusion
        assert tiny_config.validate()
        samples = corpus_samples(tiny_config)
        arch = TestRetrain().arch() if fusion == "cell" else None
        network, history = retrain(arch, samples, tiny_config, num_classes=2)
        assert len(history) == tiny_config.retrain_iterations
        assert np.isfinite(history).all()
        assert evaluate_rank1(network, samples, samples, tiny_config.clip_length) == 1.0

    @pytest.mark.parametrize("descriptors,fusion", [("sil", "cell"), ("sil+dstf", "none"), ("sil+sil", "add")])
    def test_invalid_combinations(self, tiny_config, descriptors, fusion):
        tiny_config.descriptors = descriptors
        tiny_config.fusion = fusion
        with pytest.raises(ConfigError):
            tiny_config.validate()

    def test_single_descriptor_cannot_search(self, tiny_config):
        tiny_config.descriptors = "sil"
        tiny_config.fusion = "none"
        with pytest.raises(ContractError):
            search(tiny_config, *split_dataset(corpus_samples(tiny_config), 0.5, 0), num_classes=2)


class TestStepFreezing:

    @pytest.mark.parametrize("updated", ["weights", "alpha"])
    def test_freezing_other_group_keeps_update(self, tiny_config, tiny_samples, updated):
        alpha = np.random.default_rng(0).standard_normal((5, 12))
        batch = PKSampler(tiny_samples, 2, 2, tiny_config.clip_length, np.random.default_rng(1)).sample()
        states = []
        for freeze_other in (False, True):
            network = build_network(tiny_config, 2, CellArchitecture(alpha.copy()))
            params, other = network.weight_params(), network.alpha_params()
            if updated == "alpha":
                params, other = other, params
            optimizer = AdamState(1e-2, (0.9, 0.999), 1e-8)
            frozen = list(other.values()) if freeze_other else ()
            optimize_step(network, params, optimizer, batch, 0.2, 1, "step", frozen=frozen)
            assert all(p.requires_grad for p in other.values())
            states.append(network.state_dict())
        for name in states[0]:
            assert np.allclose(states[0][name], states[1][name], rtol=1e-10, atol=1e-14), name


@pytest.mark.slow
class TestDeskRun:

    def test_default_configuration_learns(self):
        cfg = SearchConfig()
        samples = corpus_samples(cfg)
        train, val = split_dataset(samples, cfg.val_fraction, cfg.seed)
        arch, state = search(cfg, train, val, num_classes=cfg.num_ids)
        window = max(len(state.val_history) // 10, 1)
        assert np.mean(state.val_history[-window:]) <= 0.8 * np.mean(state.val_history[:window])

        discrete = discretize(arch)
        network, history = retrain(discrete, samples, cfg, num_classes=cfg.num_ids)
        assert np.mean(history[-window:]) < np.mean(history[:window])

        heldout = corpus_samples(cfg, first_sequence=cfg.seqs_per_id, seqs_per_id=cfg.eval_seqs_per_id)
        gallery, probe = split_dataset(heldout, 0.5, cfg.seed)
        assert evaluate_rank1(network, gallery, probe, cfg.clip_length) >= 0.8
