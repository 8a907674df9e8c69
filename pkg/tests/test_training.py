import gzip
import math
import struct

import numpy as np
import pytest

import sparseconv as sc
from sparseconv.data import SynthSpec, load_idx, synth_dataset
from sparseconv.errors import ConfigError, DataFormatError, TrainingDiverged
from sparseconv.layers import SparseConv
from sparseconv.presets import synth_arch, tiny_arch


def small_synth(count=256, seed=0):
    spec = SynthSpec(num_classes=4, size=16, count=count, noise=0.15)
    return synth_dataset(spec, seed=seed)


class TestSgd:
    def test_zero_lr_equivalent(self):
        # lr scales the applied velocity; grad bookkeeping aside, a step
        # with lr -> 0 must leave parameters unchanged
        p = np.array([1.0, -2.0])
        v = np.zeros(2)
        sc.sgd_update(p, np.array([3.0, 4.0]), v, lr=0.0, momentum=0.9)
        assert p.tolist() == [1.0, -2.0]

    def test_first_step_is_plain_descent(self):
        p = np.array([2.0])
        v = np.zeros(1)
        sc.sgd_update(p, np.array([0.5]), v, lr=0.1, momentum=0.9)
        assert p[0] == pytest.approx(2.0 - 0.1 * 0.5, abs=1e-12)

    def test_momentum_accumulates(self):
        p = np.array([0.0])
        v = np.zeros(1)
        sc.sgd_update(p, np.array([1.0]), v, lr=1.0, momentum=0.5)
        sc.sgd_update(p, np.array([1.0]), v, lr=1.0, momentum=0.5)
        # v: 1.0 then 1.5; p: -1.0 then -2.5
        assert p[0] == pytest.approx(-2.5, abs=1e-12)

    def test_identical_seeds_identical_traces(self):
        data = small_synth()
        arch = synth_arch()
        cfg = sc.TrainConfig(batch_size=32, lr=0.05, epochs=1, seed=5, eval_every=4)

        def trace():
            net = sc.Network.build(arch, seed=cfg.seed)
            tr = sc.Trainer(net, cfg)
            losses = []
            for _, idx in sc.training.batch_stream(len(data), 32, 1, cfg.seed):
                losses.append(tr.step(data.images[idx], data.labels[idx]))
            return losses

        a, b = trace(), trace()
        assert a == b
        assert len(a) == len(data) // 32

    def test_divergence_reports_layer_norms(self):
        arch = tiny_arch(in_shape=(1, 8, 8))
        net = sc.Network.build(arch, seed=0)
        trainer = sc.Trainer(net, sc.TrainConfig(batch_size=4, lr=0.1))
        net.conv_layers()[0].weights[:] = np.inf
        with pytest.raises(TrainingDiverged) as err, np.errstate(invalid="ignore"):
            trainer.step(np.ones((4, 1, 8, 8), dtype=np.float32), np.zeros(4, dtype=int))
        assert err.value.diagnostics
        assert "layer0" in err.value.diagnostics[0]

    def test_validation(self):
        with pytest.raises(ConfigError):
            sc.TrainConfig(lr=0.0).validate()
        with pytest.raises(ConfigError):
            sc.TrainConfig(momentum=1.0).validate()
        with pytest.raises(ConfigError):
            sc.TrainConfig(precision=16).validate()


class TestDensitySchedule:
    def test_paper_start_point(self):
        s = sc.DensifySchedule(initial_density=0.01, period=10000)
        assert sc.target_density(s, 0) == 0.01

    def test_caps_at_seventh_doubling(self):
        s = sc.DensifySchedule(initial_density=0.01, period=10000)
        assert sc.target_density(s, 70000) == 1.0
        assert sc.target_density(s, 69999) == pytest.approx(0.64)

    def test_full_start_stays_full(self):
        s = sc.DensifySchedule(initial_density=1.0, period=5)
        for step in (0, 3, 17, 900):
            assert sc.target_density(s, step) == 1.0

    def test_growth_none_is_flat(self):
        s = sc.DensifySchedule(initial_density=0.25, period=3, growth="none")
        assert sc.target_density(s, 10**6) == 0.25

    def test_doublings_to_full(self):
        assert sc.DensifySchedule(initial_density=0.01, period=1).doublings_to_full() == 7
        assert sc.DensifySchedule(initial_density=1.0, period=1).doublings_to_full() == 0


class TestApplyDensification:
    def _net(self, d0=0.05, seed=1):
        arch = tiny_arch(c1=8, c2=8, in_shape=(1, 8, 8))
        _, masks = sc.sparsify_arch(arch, d0, seed=seed)
        return sc.Network.build(arch, masks=masks, seed=seed)

    def test_below_first_doubling_no_change(self):
        net = self._net()
        s = sc.DensifySchedule(initial_density=0.05, period=100)
        assert not sc.apply_densification(net, s, step=50, rng=0)

    def test_after_final_doubling_full_then_noop(self):
        net = self._net()
        s = sc.DensifySchedule(initial_density=0.05, period=10)
        changed = sc.apply_densification(net, s, step=10 * 6, rng=0)
        assert changed
        assert net.density() == 1.0
        for layer in net.sparse_layers():
            if hasattr(layer, "last_growth_map"):
                del layer.last_growth_map
        assert not sc.apply_densification(net, s, step=10 * 9, rng=0)

    def test_preserves_old_entries_and_values(self):
        net = self._net()
        layer = net.sparse_layers()[1]
        old_mask = layer.mask.copy()
        old_dense = layer.dense_weights().copy()
        s = sc.DensifySchedule(initial_density=0.05, period=10)
        sc.apply_densification(net, s, step=20, rng=3)
        assert np.all(layer.mask.active >= old_mask.active)
        new_dense = layer.dense_weights()
        np.testing.assert_array_equal(new_dense[old_mask.active], old_dense[old_mask.active])

    def test_zero_init_mode(self):
        arch = tiny_arch(c1=6, c2=6, in_shape=(1, 8, 8))
        _, masks = sc.sparsify_arch(arch, 0.1, seed=4)
        net = sc.Network.build(arch, masks=masks, seed=4)
        layer = net.sparse_layers()[1]
        old_mask = layer.mask.copy()
        s = sc.DensifySchedule(initial_density=0.1, period=10, new_weights="zero")
        sc.apply_densification(net, s, step=15, rng=5)
        fresh = layer.mask.active & ~old_mask.active
        assert fresh.any()
        assert np.all(layer.dense_weights()[fresh] == 0.0)

    def test_aliveness_preserved_across_schedule(self):
        net = self._net(d0=0.02, seed=7)
        s = sc.DensifySchedule(initial_density=0.02, period=10)
        for step in range(0, 80, 10):
            sc.apply_densification(net, s, step=step, rng=step)
            for layer in net.sparse_layers():
                if hasattr(layer, "last_growth_map"):
                    del layer.last_growth_map
            assert sc.validate_aliveness(net.arch, net.current_masks()) == []

    def test_density_nondecreasing_and_saturating(self):
        d0 = 0.03
        s = sc.DensifySchedule(initial_density=d0, period=5)
        net = self._net(d0=d0)
        doublings = math.ceil(math.log2(1 / d0))
        last = 0.0
        trainer = sc.Trainer(net, sc.TrainConfig(batch_size=4, lr=0.01))
        for step in range(5 * doublings + 10):
            trainer.densify(s, step, rng=np.random.default_rng(step))
            d = net.density()
            assert d >= last - 1e-12
            last = d
        assert net.density() == 1.0

    def test_velocity_remap_keeps_momentum(self):
        net = self._net(d0=0.05, seed=2)
        trainer = sc.Trainer(net, sc.TrainConfig(batch_size=4, lr=0.05))
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 1, 8, 8)).astype(np.float32)
        y = rng.integers(0, 3, 4)
        trainer.step(x, y)
        layer_idx = None
        stack = net._stack()
        for idx, layer in enumerate(stack):
            if isinstance(layer, SparseConv) and layer.c_in > 1:
                layer_idx = idx
                break
        key = f"layer{layer_idx}.values"
        v_before = trainer.velocities[key].copy()
        nnz_before = stack[layer_idx].nnz
        s = sc.DensifySchedule(initial_density=0.05, period=10)
        assert trainer.densify(s, step=25, rng=np.random.default_rng(9))
        v_after = trainer.velocities[key]
        assert v_after.shape[0] == stack[layer_idx].nnz > nnz_before
        assert np.isclose(np.abs(v_after).sum(), np.abs(v_before).sum())


class TestIdxLoading:
    def test_real_mnist_shapes(self, mnist):
        train, test = mnist
        assert train.images.shape == (60000, 1, 28, 28)
        assert test.images.shape == (10000, 1, 28, 28)
        assert train.images.min() >= 0.0 and train.images.max() <= 1.0
        assert set(np.unique(train.labels)) == set(range(10))

    def test_bad_magic_names_offset(self, tmp_path):
        p = tmp_path / "bad.idx"
        p.write_bytes(struct.pack(">I", 0xDEADBEEF) + b"\x00" * 16)
        with pytest.raises(DataFormatError) as err:
            load_idx(p, p)
        assert "byte offset 0" in str(err.value)

    def test_truncated_file_names_offset(self, tmp_path):
        img = tmp_path / "img.idx"
        img.write_bytes(struct.pack(">IIII", 0x803, 10, 28, 28) + b"\x00" * 100)
        lab = tmp_path / "lab.idx"
        lab.write_bytes(struct.pack(">II", 0x801, 10) + b"\x00" * 10)
        with pytest.raises(DataFormatError) as err:
            load_idx(img, lab)
        assert err.value.offset == 116

    def test_gzip_transparent(self, tmp_path):
        img = tmp_path / "img.idx.gz"
        payload = struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(range(8))
        img.write_bytes(gzip.compress(payload))
        lab = tmp_path / "lab.idx.gz"
        lab.write_bytes(gzip.compress(struct.pack(">II", 0x801, 2) + b"\x01\x02"))
        ds = load_idx(img, lab)
        assert ds.images.shape == (2, 1, 2, 2)
        assert ds.labels.tolist() == [1, 2]

    def test_count_mismatch(self, tmp_path):
        img = tmp_path / "img.idx"
        img.write_bytes(struct.pack(">IIII", 0x803, 1, 2, 2) + b"\x00" * 4)
        lab = tmp_path / "lab.idx"
        lab.write_bytes(struct.pack(">II", 0x801, 2) + b"\x00\x01")
        with pytest.raises(DataFormatError):
            load_idx(img, lab)


class TestSynthData:
    def test_deterministic(self):
        a = synth_dataset(SynthSpec(4, 16, 128, 0.1), seed=3)
        b = synth_dataset(SynthSpec(4, 16, 128, 0.1), seed=3)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_pixel_range(self):
        ds = small_synth()
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_classes_present(self):
        ds = small_synth(count=400)
        assert set(np.unique(ds.labels)) == {0, 1, 2, 3}


class TestEvaluate:
    def test_perfect_oracle(self):
        ds = small_synth(count=64)

        class Oracle:
            def predict(self, batch):
                # match by nearest template: cheat by reading labels back
                return labels_for(batch)

        lookup = {ds.images[i].tobytes(): int(ds.labels[i]) for i in range(len(ds))}

        def labels_for(batch):
            return np.array([lookup[b.tobytes()] for b in batch])

        assert sc.evaluate(Oracle(), ds) == 1.0

    def test_uniform_predictor_near_chance(self):
        rng = np.random.default_rng(4)
        images = rng.random((10000, 1, 4, 4)).astype(np.float32)
        labels = rng.integers(0, 10, 10000)
        ds = sc.Dataset(images, labels.astype(np.int64), 10)

        class Uniform:
            def __init__(self):
                self.rng = np.random.default_rng(9)

            def predict(self, batch):
                return self.rng.integers(0, 10, len(batch))

        acc = sc.evaluate(Uniform(), ds)
        assert abs(acc - 0.1) < 0.02

    def test_invariant_under_permutation(self):
        ds = small_synth(count=128)
        arch = synth_arch()
        net = sc.Network.build(arch, seed=1)
        base = sc.evaluate(net, ds)
        twin = sc.permute_network(net, sc.random_permutation_set(net, rng=2))
        assert sc.evaluate(twin, ds) == base


class TestRunTraining:
    def test_synth_run_learns_and_records(self, tmp_path):
        train = small_synth(count=512, seed=1)
        test = small_synth(count=256, seed=2)
        arch = synth_arch()
        cfg = sc.TrainConfig(batch_size=32, lr=0.1, epochs=3, seed=0, eval_every=8)
        net, record = sc.run_training(
            arch, None, train, test, cfg, jsonl_path=tmp_path / "run.jsonl"
        )
        assert record.final.test_accuracy > 0.9
        assert record.points[0].step < record.final.step
        record.check_invariants()
        lines = (tmp_path / "run.jsonl").read_text().splitlines()
        assert len(lines) == len(record.points) + 2  # header + evals + summary

    def test_reproducible_records(self):
        train = small_synth(count=256, seed=1)
        test = small_synth(count=128, seed=2)
        arch = synth_arch()
        cfg = sc.TrainConfig(batch_size=32, lr=0.05, epochs=1, seed=3, eval_every=4)
        _, rec_a = sc.run_training(arch, None, train, test, cfg)
        _, rec_b = sc.run_training(arch, None, train, test, cfg)
        assert [p.to_json_dict() for p in rec_a.points] == [p.to_json_dict() for p in rec_b.points]

    def test_full_mask_sparse_tracks_dense_for_200_steps(self):
        # structural equivalence under training, float64 to keep rounding out
        arch = tiny_arch(c1=4, c2=4, in_shape=(1, 8, 8))
        train = sc.synth_dataset(SynthSpec(3, 8, 400, 0.2), seed=5)
        masks = [sc.full_mask(a, b) for a, b in arch.conv_interfaces()]
        cfg = sc.TrainConfig(batch_size=8, lr=0.05, epochs=4, seed=7, precision=64)

        dense = sc.Network.build(arch, seed=cfg.seed, precision=64)
        sparse = sc.Network.build(arch, masks=masks, seed=cfg.seed, precision=64,
                                  sparse_dense_fallback=2.0)
        for dl, slayer in zip(dense.conv_layers(), sparse.conv_layers()):
            slayer.load_dense_weights(dl.weights)
            slayer.bias = dl.bias.copy()
        for (n1, p1), (n2, p2) in zip(dense.param_blocks(), sparse.param_blocks()):
            if "weights" in n1 and p1.ndim == 2:  # fc layers share init
                p2[...] = p1

        td, ts = sc.Trainer(dense, cfg), sc.Trainer(sparse, cfg)
        steps = 0
        worst = 0.0
        for _, idx in sc.training.batch_stream(len(train), 8, 4, cfg.seed):
            ld = td.step(train.images[idx], train.labels[idx])
            ls = ts.step(train.images[idx], train.labels[idx])
            worst = max(worst, abs(ld - ls))
            steps += 1
        assert steps >= 200
        assert worst < 1e-5
