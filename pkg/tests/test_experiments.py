"""Analysis procedures on a small trained model: traversal reproduction,
block-perturbation scoring, and the sign-gradient attack envelope."""

import numpy as np
import pytest

from auxvae import datagen as dg, experiments as ex, genmodel as gm, trainer as tr
from auxvae.tensor import no_grad
from tests.test_trainer import tiny_dataset, tiny_config


@pytest.fixture(scope="module")
def setup():
    ds = tiny_dataset(n=80, seed=4)
    ckpt, _ = tr.train(tiny_config(epochs=6, seed=2), dataset=ds)
    _, _, test = dg.split(ds, (7, 2, 1), seed=ckpt.config.seed)
    return ds, ckpt, test


class TestTraverse:
    def test_base_value_reproduces_reconstruction(self, setup):
        _, ckpt, test = setup
        base_value = tr.encode_means(ckpt, test.images[:1])[0, 1]
        spec = ex.TraversalSpec(latent_index=1, steps=1, base_index=0)
        result = ex.traverse(ckpt, test, spec, values=[base_value])
        recon = tr.reconstruct_images(ckpt, test.images[:1])
        np.testing.assert_array_equal(result.images, recon)

    def test_values_increase_along_strip(self, setup):
        _, ckpt, test = setup
        result = ex.traverse(ckpt, test, ex.TraversalSpec(latent_index=0, steps=6))
        assert np.all(np.diff(result.values) > 0)
        assert result.images.shape[0] == 6

    def test_dead_latent_gives_identical_frames(self, setup):
        _, ckpt, test = setup
        dead = tr.ModelCheckpoint(ckpt.arch, ckpt.store.copy(), ckpt.config,
                                  ckpt.final_epoch, ckpt.seed, ckpt.n_train)
        dead.store["dec0.weight"].data[:, 2] = 0.0  # decoder ignores z_2
        result = ex.traverse(dead, test, ex.TraversalSpec(latent_index=2, steps=5))
        for frame in result.images[1:]:
            np.testing.assert_array_equal(frame, result.images[0])
        assert ex.strip_sensitivity(result) == 0.0

    def test_index_guard(self, setup):
        _, ckpt, test = setup
        with pytest.raises(ValueError, match="latent index"):
            ex.traverse(ckpt, test, ex.TraversalSpec(latent_index=99))

    def test_pgm_and_csv_outputs(self, setup, tmp_path):
        _, ckpt, test = setup
        result = ex.traverse(ckpt, test, ex.TraversalSpec(latent_index=0, steps=4))
        pgm = tmp_path / "strip.pgm"
        ex.write_pgm_strip(result.images, pgm)
        raw = pgm.read_bytes()
        h, w = test.images.shape[2], test.images.shape[3]
        width = 4 * w + 3 * 2
        assert raw.startswith(f"P5\n{width} {h}\n255\n".encode())
        assert len(raw) == len(f"P5\n{width} {h}\n255\n") + width * h
        csv_path = tmp_path / "strip.csv"
        ex.write_traversal_csv(result, csv_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("step,value,z0")
        assert len(lines) == 5


class TestPerturbation:
    def test_none_target_equals_plain_reconstruction(self, setup):
        _, ckpt, test = setup
        spec = ex.PerturbationSpec(target="none", count=test.n)
        ssims = ex.perturb_study(ckpt, test, spec, seed=0)
        recon = tr.reconstruct_images(ckpt, test.images)
        from auxvae import metrics
        expected = [metrics.ssim(test.images[i, 0], recon[i, 0])
                    for i in range(test.n)]
        np.testing.assert_array_equal(ssims, expected)

    def test_zero_scale_equals_none(self, setup):
        _, ckpt, test = setup
        a = ex.perturb_study(ckpt, test,
                             ex.PerturbationSpec("aux", noise_scale=0.0,
                                                 count=test.n), seed=1)
        b = ex.perturb_study(ckpt, test,
                             ex.PerturbationSpec("none", count=test.n), seed=1)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_deterministic_in_seed(self, setup):
        _, ckpt, test = setup
        spec = ex.PerturbationSpec("recon", count=test.n)
        a = ex.perturb_study(ckpt, test, spec, seed=7)
        b = ex.perturb_study(ckpt, test, spec, seed=7)
        np.testing.assert_array_equal(a, b)

    def test_guards(self, setup):
        ds, ckpt, test = setup
        with pytest.raises(ValueError, match="exceeds"):
            ex.perturb_study(ckpt, test, ex.PerturbationSpec(count=10 ** 6), seed=0)
        beta_ckpt, _ = tr.train(tiny_config(case="none", factors=None,
                                            lambda1=0.0, lambda2=0.0, epochs=0),
                                dataset=ds)
        with pytest.raises(ValueError, match="d=0"):
            ex.perturb_study(beta_ckpt, test,
                             ex.PerturbationSpec("aux", count=4), seed=0)


class TestFgsm:
    def test_zero_epsilon_is_identity(self, setup):
        _, ckpt, test = setup
        u = test.factors[:, :2]
        out = ex.fgsm_attack(ckpt, test.images, u, 0.0)
        np.testing.assert_array_equal(out, test.images)

    def test_infinity_norm_envelope(self, setup):
        _, ckpt, test = setup
        rng = np.random.default_rng(11)
        u = test.factors[:, :2]
        for eps in rng.uniform(0.01, 0.2, 4):
            out = ex.fgsm_attack(ckpt, test.images, u, float(eps))
            assert np.max(np.abs(out - test.images)) <= eps + 1e-6
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_interior_pixels_move_exactly_epsilon(self, setup):
        _, ckpt, test = setup
        eps = 0.05
        x = test.images
        out = ex.fgsm_attack(ckpt, x, test.factors[:, :2], eps)
        delta = np.abs(out - x)
        interior = (x > eps) & (x < 1.0 - eps)
        moved = delta[interior]
        nonzero = moved[moved > 0]
        np.testing.assert_allclose(nonzero, eps, atol=1e-6)
        assert nonzero.size > 0.5 * moved.size

    def test_negative_epsilon_rejected(self, setup):
        _, ckpt, test = setup
        with pytest.raises(ValueError):
            ex.fgsm_attack(ckpt, test.images, test.factors[:, :2], -0.1)


class TestRobustnessCurve:
    def test_zero_epsilon_column_is_baseline(self, setup):
        _, ckpt, test = setup
        curve = ex.robustness_curve(ckpt, test, epsilons=(0.0, 0.05))
        spec = ex.PerturbationSpec("none", count=test.n)
        baseline = ex.perturb_study(ckpt, test, spec, seed=0)
        np.testing.assert_allclose(curve[0.0], baseline, atol=1e-12)

    def test_untrained_model_values_in_range(self):
        ds = tiny_dataset(n=60, seed=5)
        ckpt, _ = tr.train(tiny_config(epochs=0), dataset=ds)
        _, _, test = dg.split(ds, (7, 2, 1), seed=0)
        curve = ex.robustness_curve(ckpt, test, epsilons=(0.0, 0.1))
        for values in curve.values():
            assert np.all(values >= -1.0) and np.all(values <= 1.0)

    def test_distribution_csv(self, setup, tmp_path):
        _, ckpt, test = setup
        curve = ex.robustness_curve(ckpt, test, epsilons=(0.0,))
        path = tmp_path / "curve.csv"
        ex.write_distribution_csv(curve, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epsilon,image,ssim"
        assert len(lines) == 1 + test.n
