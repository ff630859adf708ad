import numpy as np
import pytest

from setflow.data import BagDataset, EmbeddingBag, Instance, Stream
from setflow.pca import (PcaModel, fit_pca, inverse_transform, load_pca,
                         save_pca, transform, transform_dataset)


def test_line_data_captures_all_variance():
    rng = np.random.default_rng(0)
    direction = np.array([1.0, 2.0, -1.0]) / np.sqrt(6.0)
    x = 5.0 + rng.standard_normal((200, 1)) * direction[None, :]
    model = fit_pca(x, 1)
    total = ((x - x.mean(axis=0)) ** 2).sum() / (x.shape[0] - 1)
    assert model.explained_variance[0] >= (1 - 1e-9) * total


def test_isotropic_gaussian_has_flat_spectrum():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((10000, 5))
    model = fit_pca(x, 5)
    ev = model.explained_variance
    assert ev.max() / ev.min() < 1.15
    assert np.all(np.diff(ev) <= 1e-12)


def test_rank_r_reconstruction():
    rng = np.random.default_rng(2)
    basis = np.linalg.qr(rng.standard_normal((6, 3)))[0]
    x = rng.standard_normal((50, 3)) @ basis.T + 2.0
    model = fit_pca(x, 3)
    rebuilt = inverse_transform(model, transform(model, x))
    assert np.abs(rebuilt - x).max() < 1e-6


def test_transform_centering_and_identity_projection():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((20, 4))
    model = fit_pca(x, 3)
    np.testing.assert_allclose(transform(model, x.mean(axis=0)[None, :]), 0.0,
                               atol=1e-12)
    ident = PcaModel(np.zeros(4), np.eye(4), np.ones(4))
    np.testing.assert_array_equal(transform(ident, x), x)


def test_projection_is_nonexpansive():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((100, 6))
    model = fit_pca(x, 3)
    z = transform(model, x)
    centered = x - model.mean
    assert (np.linalg.norm(z, axis=1)
            <= np.linalg.norm(centered, axis=1) + 1e-9).all()


def test_inverse_of_zero_is_mean():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((30, 4)) + 3.0
    model = fit_pca(x, 2)
    np.testing.assert_allclose(inverse_transform(model, np.zeros((2, 2))),
                               np.tile(model.mean, (2, 1)), atol=1e-12)


def test_projector_identities():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((60, 5))
    model = fit_pca(x, 3)
    z = rng.standard_normal((10, 3))
    # transform . inverse_transform is the identity on the subspace
    np.testing.assert_allclose(transform(model, inverse_transform(model, z)), z,
                               atol=1e-9)
    # inverse_transform . transform is an orthogonal projector (idempotent)
    once = inverse_transform(model, transform(model, x))
    twice = inverse_transform(model, transform(model, once))
    np.testing.assert_allclose(once, twice, atol=1e-8)
    # residual orthogonal to the component span
    residual = x - once
    assert np.abs(residual @ model.components).max() < 1e-8


def test_orthonormal_components_and_monotone_variance():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((80, 7)) * np.array([5, 4, 3, 2, 1, 0.5, 0.1])
    model = fit_pca(x, 5)
    gram = model.components.T @ model.components
    assert np.abs(gram - np.eye(5)).max() < 1e-8
    assert np.all(np.diff(model.explained_variance) <= 0)
    for j in range(5):
        k = int(np.argmax(np.abs(model.components[:, j])))
        assert model.components[k, j] > 0


def test_fit_rejects_bad_inputs():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((10, 4))
    with pytest.raises(ValueError, match="outside"):
        fit_pca(x, 5)
    with pytest.raises(ValueError, match="outside"):
        fit_pca(x, 0)
    with pytest.raises(ValueError, match="zero variance"):
        fit_pca(np.ones((10, 4)), 2)
    with pytest.raises(ValueError, match="2 rows"):
        fit_pca(x[:1], 1)
    with pytest.raises(ValueError, match="dim"):
        transform(fit_pca(x, 2), np.ones((3, 5)))


def test_standardize_flag_whitens_coordinates():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((5000, 4)) * np.array([4.0, 2.0, 1.0, 0.5])
    model = fit_pca(x, 4, standardize=True)
    z = transform(model, x)
    np.testing.assert_allclose(z.var(axis=0, ddof=1), 1.0, atol=0.1)
    rebuilt = inverse_transform(model, z)
    assert np.abs(rebuilt - x).max() < 1e-6


def test_serialization_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    model = fit_pca(rng.standard_normal((40, 6)), 3)
    path = tmp_path / "pca.json"
    save_pca(model, path)
    back = load_pca(path)
    np.testing.assert_array_equal(back.mean, model.mean)
    np.testing.assert_array_equal(back.components, model.components)
    np.testing.assert_array_equal(back.explained_variance, model.explained_variance)
    assert back.standardize == model.standardize


def test_transform_dataset_keeps_structure():
    rng = np.random.default_rng(11)
    bags = [EmbeddingBag([Instance(rng.standard_normal(5), Stream.GLOBAL),
                          Instance(rng.standard_normal(5), Stream.LOCAL)], 1)
            for _ in range(6)]
    ds = BagDataset(bags, dim=5)
    model = fit_pca(ds.instance_matrix(), 2)
    reduced = transform_dataset(model, ds)
    assert reduced.dim == 2 and len(reduced) == 6
    assert reduced.bags[0].instances[1].stream == Stream.LOCAL
    np.testing.assert_allclose(
        reduced.bags[3].instances[0].vector,
        transform(model, ds.bags[3].instances[0].vector[None, :])[0])
