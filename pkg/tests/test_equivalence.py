import math

import numpy as np
import pytest

import sparseconv as sc
from sparseconv.errors import ShapeError
from sparseconv.presets import mnist_arch, tiny_arch

import oracles


def build_net(sparse_alpha=None, seed=0, precision=32, arch=None):
    arch = arch or tiny_arch(c1=5, c2=4, in_shape=(2, 8, 8), num_classes=3)
    masks = None
    if sparse_alpha is not None:
        _, masks = sc.sparsify_arch(arch, sparse_alpha, seed=seed)
    return sc.Network.build(arch, masks=masks, seed=seed, precision=precision)


def params_equal(a, b):
    blocks_a = a.param_blocks() + a.state_blocks()
    blocks_b = b.param_blocks() + b.state_blocks()
    return all(np.array_equal(x, y) for (_, x), (_, y) in zip(blocks_a, blocks_b))


class TestPermuteNetwork:
    def test_identity_is_bit_exact(self):
        net = build_net()
        perms = [np.arange(l.c_out) for l in net.conv_layers()]
        twin = sc.permute_network(net, perms)
        assert params_equal(net, twin)

    def test_inverse_round_trip_bit_exact(self):
        for alpha in (None, 0.5):
            net = build_net(sparse_alpha=alpha, seed=3)
            perms = sc.random_permutation_set(net, rng=7)
            back = sc.permute_network(
                sc.permute_network(net, perms), sc.inverse_permutations(perms)
            )
            assert params_equal(net, back)

    def test_dense_outputs_match_float32(self):
        net = build_net(seed=1, precision=32)
        twin = sc.permute_network(net, sc.random_permutation_set(net, rng=5))
        rep = sc.verify_equivalence(net, twin, trials=5, tol=1e-5, seed=2)
        assert rep.passed, rep

    def test_sparse_outputs_match_float32(self):
        net = build_net(sparse_alpha=0.4, seed=2, precision=32)
        twin = sc.permute_network(net, sc.random_permutation_set(net, rng=6))
        rep = sc.verify_equivalence(net, twin, trials=5, tol=1e-5, seed=3)
        assert rep.passed, rep

    def test_float64_is_tighter(self):
        net = build_net(seed=4, precision=64)
        twin = sc.permute_network(net, sc.random_permutation_set(net, rng=8))
        rep = sc.verify_equivalence(net, twin, trials=5, tol=1e-10, seed=4)
        assert rep.passed, rep

    def test_trained_network_still_equivalent(self):
        arch = tiny_arch(c1=5, c2=4, in_shape=(1, 8, 8), num_classes=3)
        net = sc.Network.build(arch, seed=0, precision=64)
        trainer = sc.Trainer(net, sc.TrainConfig(batch_size=8, lr=0.05))
        rng = np.random.default_rng(0)
        for _ in range(30):
            trainer.step(rng.standard_normal((8, 1, 8, 8)), rng.integers(0, 3, 8))
        twin = sc.permute_network(net, sc.random_permutation_set(net, rng=1))
        rep = sc.verify_equivalence(net, twin, trials=5, tol=1e-9, seed=5)
        assert rep.passed, rep

    def test_size_mismatch_rejected(self):
        net = build_net()
        with pytest.raises(ShapeError):
            sc.permute_network(net, [np.arange(3)])

    def test_non_bijection_rejected(self):
        net = build_net()
        perms = [np.zeros(l.c_out, dtype=int) for l in net.conv_layers()]
        with pytest.raises(ShapeError):
            sc.permute_network(net, perms)

    def test_mask_row_col_multisets_preserved(self):
        net = build_net(sparse_alpha=0.4, seed=9)
        twin = sc.permute_network(net, sc.random_permutation_set(net, rng=10))
        for a, b in zip(net.sparse_layers(), twin.sparse_layers()):
            assert sorted(a.mask.row_counts()) == sorted(b.mask.row_counts())
            assert sorted(a.mask.col_counts()) == sorted(b.mask.col_counts())


class TestVerifyEquivalence:
    def test_net_vs_itself(self):
        net = build_net(seed=11)
        rep = sc.verify_equivalence(net, net, trials=3, tol=1e-12, seed=0)
        assert rep.max_abs_diff == 0.0
        assert rep.passed

    def test_perturbed_weight_detected(self):
        net = build_net(seed=12)
        other = net.clone()
        other.conv_layers()[0].weights[0, 0, 0, 0] += 0.1
        rep = sc.verify_equivalence(net, other, trials=3, tol=1e-5, seed=1)
        assert not rep.passed
        assert rep.max_abs_diff > 0.0

    def test_report_shape(self):
        net = build_net(seed=13)
        rep = sc.verify_equivalence(net, net, trials=2, tol=1e-5, seed=2)
        d = rep.to_json_dict()
        assert set(d) == {"trials", "tol", "max_abs_diff", "pass"}


class TestEquivalenceClassSize:
    def test_lemma_arithmetic(self):
        assert sc.equivalence_class_size([3, 2]) == 12
        assert sc.equivalence_class_size([1]) == 1

    def test_arch_input(self):
        assert sc.equivalence_class_size(tiny_arch(c1=3, c2=2)) == 12

    def test_mnist_digit_count_vs_loggamma(self):
        sizes = mnist_arch().hidden_channel_counts()
        n = sc.equivalence_class_size(mnist_arch())
        assert n == math.factorial(32) * math.factorial(64) * math.factorial(64)
        assert len(str(n)) == oracles.logfactorial_digits(sizes)


class TestSparseDistinctness:
    def test_masks_rarely_permutation_invariant(self):
        arch = mnist_arch()
        _, masks = sc.sparsify_arch(arch, 0.1, seed=21)
        net = sc.Network.build(arch, masks=masks, seed=0)
        rng = np.random.default_rng(77)
        unchanged = 0
        for _ in range(100):
            perms = sc.random_permutation_set(net, rng=rng)
            if all(len(p) < 2 or np.array_equal(p, np.arange(len(p))) for p in perms):
                continue  # nontrivial permutations only
            twin = sc.permute_network(net, perms)
            same = all(
                a.mask.same_pattern(b.mask)
                for a, b in zip(net.sparse_layers(), twin.sparse_layers())
            )
            unchanged += int(same)
        assert unchanged <= 1
