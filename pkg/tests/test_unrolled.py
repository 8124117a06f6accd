"""Tests for fusion, the unrolled reconstructor, Adam and training."""

import numpy as np
import pytest
from testutil import gradcheck

from transem import autodiff as ad
from transem.autodiff import Tensor
from transem.recon import ReconConfig, osem_reconstruct
from transem.simulation import Dataset, SimulationSettings, generate_dataset
from transem.system import ScannerGeometry2D
from transem.unrolled import (
    Adam,
    TransEMConfig,
    TransEMModel,
    TrainingDiverged,
    adam_step,
    fusion_update,
    load_checkpoint,
    reconstruct,
    reconstruct_graph,
    save_checkpoint,
    train,
    transem_block,
)


def bisection_fusion_root(x_em, r, alpha_s):
    """Independent oracle: bisect F(x) = x^2/a + (1 - r/a) x - x_em on x >= 0."""
    x_em = np.asarray(x_em, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    a = np.asarray(alpha_s, dtype=np.float64)

    def f(x):
        return x * x / a + (1.0 - r / a) * x - x_em

    lo = np.zeros_like(x_em)
    hi = np.maximum(np.maximum(x_em, r), 1.0) * 4.0 + a
    for _ in range(40):  # make sure the bracket closes
        bad = f(hi) <= 0
        if not bad.any():
            break
        hi = np.where(bad, hi * 2.0, hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = f(mid) < 0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


class TestFusionUpdate:
    def test_equal_inputs_are_fixed_point(self):
        c = 1.7
        x = fusion_update(np.full((3, 3), c), np.full((3, 3), c), 0.8, np.full((3, 3), 2.0))
        np.testing.assert_allclose(x, c, rtol=1e-12)

    def test_sqrt_two_case(self):
        out = fusion_update(np.array([[2.0]]), np.array([[1.0]]), 1.0, np.array([[1.0]]))
        assert out[0, 0] == pytest.approx(np.sqrt(2.0), abs=1e-12)

    def test_large_alpha_degenerates_to_em(self):
        rng = np.random.default_rng(40)
        x_em = rng.uniform(0.5, 3.0, size=(5, 5))
        r = rng.uniform(-1.0, 3.0, size=(5, 5))
        out = fusion_update(x_em, r, 1e9, np.ones((5, 5)))
        np.testing.assert_allclose(out, x_em, rtol=1e-6)

    def test_small_alpha_approaches_positive_part_of_reference(self):
        x_em = np.array([[2.0, 2.0]])
        r = np.array([[1.5, -1.0]])
        out = fusion_update(x_em, r, 1e-9, np.ones((1, 2)))
        assert out[0, 0] == pytest.approx(1.5, rel=1e-4)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-6)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            fusion_update(np.ones((2, 2)), np.ones((2, 2)), 0.0, np.ones((2, 2)))
        with pytest.raises(ValueError):
            fusion_update(np.ones((2, 2)), np.ones((2, 2)), 1.0, np.zeros((2, 2)))

    def test_matches_bisection_oracle_on_random_triples(self):
        rng = np.random.default_rng(41)
        n = 10_000
        x_em = rng.uniform(0.0, 5.0, size=n)
        r = rng.uniform(-2.0, 5.0, size=n)
        alpha_s = rng.uniform(0.1, 10.0, size=n)
        ours = fusion_update(x_em, r, 1.0, alpha_s)
        oracle = bisection_fusion_root(x_em, r, alpha_s)
        scale = np.maximum(np.abs(oracle), 1e-12)
        assert (np.abs(ours - oracle) / scale).max() < 1e-10

    def test_nonnegative_output(self):
        rng = np.random.default_rng(42)
        out = fusion_update(
            rng.uniform(0, 2, size=(50,)),
            rng.uniform(-5, 5, size=(50,)),
            0.7,
            rng.uniform(0.2, 3.0, size=(50,)),
        )
        assert np.all(out >= 0)


class TestTransemBlock:
    def test_fixed_point_with_identity_regularizer(self, model16, phantom16):
        # exact data, identity regularizer: x_em = x_prev and the fusion of
        # two equal images returns that image
        x_true, _ = phantom16
        x_prev = (x_true + 0.1) * model16.pixel_mask
        y = model16.forward_project(x_prev)
        b = np.zeros_like(y)
        config = TransEMConfig(n_iterations=1, n_subsets=1, embed_dim=4, n_heads=2)
        tmodel = TransEMModel.create(config, seed=0)
        subset = model16.subsets(1)[0]
        out = transem_block(
            Tensor(x_prev), y, b, subset, tmodel.block_regularizer(0), tmodel.log_alpha[0]
        )
        np.testing.assert_allclose(out.data, x_prev, rtol=1e-9, atol=1e-12)

    def test_output_nonnegative(self, model16, scan16):
        config = TransEMConfig(n_iterations=1, n_subsets=2, embed_dim=4, n_heads=2)
        tmodel = TransEMModel.create(config, seed=1)
        rng = np.random.default_rng(43)
        for name, t in tmodel.named_parameters():
            t.data = t.data + rng.normal(scale=0.1, size=t.data.shape)
        x = Tensor(np.maximum(rng.uniform(size=(16, 16)), 0.05))
        subset = model16.subsets(2)[1]
        out = transem_block(
            x,
            scan16.counts,
            scan16.background,
            subset,
            tmodel.block_regularizer(0),
            tmodel.log_alpha[0],
        )
        assert np.all(out.data >= 0)

    def test_log_alpha_gradient_matches_finite_differences(self, model16, scan16):
        config = TransEMConfig(n_iterations=1, n_subsets=2, embed_dim=4, n_heads=2)
        tmodel = TransEMModel.create(config, seed=2)
        rng = np.random.default_rng(44)
        for name, t in tmodel.named_parameters():
            t.data = t.data + rng.normal(scale=0.05, size=t.data.shape)
        target = rng.uniform(size=(16, 16))
        subset = model16.subsets(2)[0]
        x0 = np.maximum(rng.uniform(size=(16, 16)), 0.1)

        def build():
            out = transem_block(
                Tensor(x0),
                scan16.counts,
                scan16.background,
                subset,
                tmodel.block_regularizer(0),
                tmodel.log_alpha[0],
            )
            diff = ad.sub(out, Tensor(target))
            return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / 256.0)

        gradcheck(build, [tmodel.log_alpha[0]], rtol=1e-4)


class TestReconstruct:
    def test_zero_init_em_only_equals_osem_bitwise(self, model16, scan16):
        config = TransEMConfig(n_iterations=10, n_subsets=6, embed_dim=4, n_heads=2)
        tmodel = TransEMModel.create(config, seed=3)
        ours = reconstruct(
            scan16.counts, scan16.background, model16, tmodel, em_only=True
        )
        baseline = osem_reconstruct(
            scan16.counts,
            scan16.background,
            model16,
            ReconConfig(n_iterations=10, n_subsets=6, beta=0.0),
        )
        assert ours.tobytes() == baseline.tobytes()

    def test_deterministic_and_batch_independent(self, model16, scan16, scan16_psf):
        config = TransEMConfig(n_iterations=2, n_subsets=3, embed_dim=4, n_heads=2)
        tmodel = TransEMModel.create(config, seed=4)
        rng = np.random.default_rng(45)
        for _, t in tmodel.named_parameters():
            t.data = t.data + rng.normal(scale=0.05, size=t.data.shape)
        first = reconstruct(scan16.counts, scan16.background, model16, tmodel)
        # reconstruct something else in between; the result must not change
        reconstruct(scan16_psf.counts, scan16_psf.background, model16, tmodel)
        second = reconstruct(scan16.counts, scan16.background, model16, tmodel)
        assert first.tobytes() == second.tobytes()

    def test_end_to_end_gradient_check_two_blocks(self, model16, scan16):
        config = TransEMConfig(n_iterations=1, n_subsets=2, embed_dim=4, n_heads=2)
        tmodel = TransEMModel.create(config, seed=5)
        rng = np.random.default_rng(46)
        for _, t in tmodel.named_parameters():
            t.data = t.data + rng.normal(scale=0.05, size=t.data.shape)
        target = rng.uniform(size=(16, 16))
        mask = model16.pixel_mask

        def build():
            out = reconstruct_graph(scan16.counts, scan16.background, model16, tmodel)
            diff = ad.mul(ad.sub(out, Tensor(target)), Tensor(mask))
            return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / mask.sum())

        tensors = [t for _, t in tmodel.named_parameters()]
        gradcheck(build, tensors, rtol=1e-3, atol=1e-8, max_entries=3)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        optimizer = Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        optimizer.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signed_learning_rate(self):
        lr = 0.05
        g = np.array([3.0, -0.5, 0.05])
        p = np.zeros(3)
        m = np.zeros(3)
        v = np.zeros(3)
        p1, _, _ = adam_step(p, g, m, v, t=1, lr=lr)
        np.testing.assert_allclose(p1, -lr * np.sign(g), atol=1e-6 * lr)

    def test_three_steps_match_hand_rolled_oracle(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        theta = 1.0
        m = v = 0.0
        expected = []
        for t in range(1, 4):
            g = 2.0 * theta
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
            expected.append(theta)

        p = np.array([1.0])
        m_arr, v_arr = np.zeros(1), np.zeros(1)
        got = []
        for t in range(1, 4):
            grad = 2.0 * p
            p, m_arr, v_arr = adam_step(p, grad, m_arr, v_arr, t, lr, b1, b2, eps)
            got.append(p[0])
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            adam_step(np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3), 1, 0.1)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    geometry = ScannerGeometry2D(12, 26, 2.0, 16, 2.0)
    root = tmp_path_factory.mktemp("train_ds") / "ds"
    settings = SimulationSettings(low_counts=3e5, desk_factor=0.1)
    generate_dataset(root, 3, (1, 1, 1), geometry, 55, settings)
    return Dataset.load(root)


class TestTrain:
    def test_zero_learning_rate_keeps_parameters(self, tiny_dataset):
        config = TransEMConfig(n_iterations=1, n_subsets=3, embed_dim=4, n_heads=2)
        tmodel = TransEMModel.create(config, seed=6)
        before = [t.data.copy() for t in tmodel.parameters()]
        train(tmodel, tiny_dataset, epochs=2, lr=0.0, batch_size=2, seed=0, val_every=10)
        for old, tensor in zip(before, tmodel.parameters()):
            np.testing.assert_array_equal(old, tensor.data)

    def test_overfit_single_sample(self, tiny_dataset):
        # start from a perturbed regularizer so the initial loss is dominated
        # by removable error; descent is then steep and steady
        config = TransEMConfig(n_iterations=1, n_subsets=6, embed_dim=4, n_heads=2)
        tmodel = TransEMModel.create(config, seed=7)
        rng = np.random.default_rng(107)
        for name, tensor in tmodel.named_parameters():
            if "log_alpha" not in name:
                tensor.data = tensor.data + rng.normal(scale=0.3, size=tensor.data.shape)
        result = train(
            tmodel, tiny_dataset, epochs=50, max_steps=50, lr=2e-3,
            batch_size=1, seed=0, val_every=1000,
        )
        losses = [loss for _, loss in result.loss_curve]
        assert len(losses) == 50
        running_min = losses[0]
        for value in losses[1:]:
            assert value <= 1.05 * running_min
            running_min = min(running_min, value)
        assert losses[-1] <= 0.5 * losses[0]

    def test_fixed_seed_bitwise_identical_loss_curve(self, tiny_dataset):
        def run():
            config = TransEMConfig(n_iterations=1, n_subsets=3, embed_dim=4, n_heads=2)
            tmodel = TransEMModel.create(config, seed=8)
            result = train(
                tmodel, tiny_dataset, epochs=3, lr=1e-3, batch_size=2, seed=3,
                val_every=1,
            )
            return np.array([loss for _, loss in result.loss_curve]).tobytes()

        assert run() == run()

    def test_nan_loss_aborts_with_dump(self, tiny_dataset, tmp_path):
        config = TransEMConfig(n_iterations=1, n_subsets=3, embed_dim=4, n_heads=2)
        tmodel = TransEMModel.create(config, seed=9)
        tmodel.log_alpha[0].data = np.asarray(np.nan)
        with pytest.raises(TrainingDiverged) as excinfo:
            train(tmodel, tiny_dataset, epochs=1, lr=1e-3, batch_size=1, seed=0,
                  dump_dir=tmp_path)
        assert excinfo.value.dump_path is not None
        assert (tmp_path / "diverged.tem1").is_file()


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        config = TransEMConfig(
            n_iterations=2, n_subsets=3, embed_dim=4, n_heads=2, share_weights=False
        )
        tmodel = TransEMModel.create(config, seed=10)
        rng = np.random.default_rng(47)
        for _, t in tmodel.named_parameters():
            t.data = t.data + rng.normal(scale=0.1, size=t.data.shape)
        path = tmp_path / "model.tem1"
        save_checkpoint(path, tmodel)
        loaded = load_checkpoint(path)
        assert loaded.config == tmodel.config
        originals = dict(tmodel.named_parameters())
        for name, tensor in loaded.named_parameters():
            assert tensor.data.tobytes() == originals[name].data.tobytes(), name

    def test_loaded_model_reconstructs_identically(self, model16, scan16, tmp_path):
        config = TransEMConfig(n_iterations=1, n_subsets=2, embed_dim=4, n_heads=2)
        tmodel = TransEMModel.create(config, seed=11)
        rng = np.random.default_rng(48)
        for _, t in tmodel.named_parameters():
            t.data = t.data + rng.normal(scale=0.1, size=t.data.shape)
        path = tmp_path / "model.tem1"
        save_checkpoint(path, tmodel)
        loaded = load_checkpoint(path)
        a = reconstruct(scan16.counts, scan16.background, model16, tmodel)
        b = reconstruct(scan16.counts, scan16.background, model16, loaded)
        assert a.tobytes() == b.tobytes()

    def test_cnn_regularizer_checkpoint(self, tmp_path):
        config = TransEMConfig(
            n_iterations=1, n_subsets=2, regularizer="cnn", embed_dim=4, n_heads=2
        )
        tmodel = TransEMModel.create(config, seed=12)
        path = tmp_path / "model.tem1"
        save_checkpoint(path, tmodel)
        loaded = load_checkpoint(path)
        assert loaded.config.regularizer == "cnn"
