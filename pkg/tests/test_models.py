import numpy as np
import pytest

import codedlf.autodiff as ad
from codedlf.autodiff import grad_check
from codedlf.models import (FeatNetConfig, ModelConfigError, NeRFNetConfig,
                            featnet_forward, init_params, nerfnet_forward,
                            nerfnet_query, positional_encoding)

SMALL_FEAT = FeatNetConfig(hidden_channels=6, n_blocks=1, depth_levels=4,
                           feature_channels=3)
SMALL_NERF = NeRFNetConfig(hidden_layers=2, hidden_width=16, feature_channels=3)


def test_zero_input_zero_projection_gives_zero_volume():
    store = init_params(SMALL_FEAT, SMALL_NERF, seed=0)
    vol = featnet_forward(store, SMALL_FEAT, np.zeros((6, 7)))
    assert vol.shape == (6, 7, 4, 3)
    np.testing.assert_array_equal(vol.data, 0.0)   # final projection zero-initialized


def test_nonzero_input_still_zero_volume_at_init():
    # the zeroed projection blanks the volume regardless of the input
    store = init_params(SMALL_FEAT, SMALL_NERF, seed=0)
    vol = featnet_forward(store, SMALL_FEAT, np.random.default_rng(0).random((5, 5)))
    np.testing.assert_array_equal(vol.data, 0.0)


def test_output_shape_paper_defaults():
    feat = FeatNetConfig()
    nerf = NeRFNetConfig()
    store = init_params(feat, nerf, seed=1)
    vol = featnet_forward(store, feat, np.random.default_rng(1).random((10, 9)))
    assert vol.shape == (10, 9, 13, 8)   # D=13, C=8


def test_featnet_gradcheck_small():
    store = init_params(SMALL_FEAT, SMALL_NERF, seed=2, dtype=np.float64)
    image = np.random.default_rng(3).random((5, 4))
    proj = ad.constant(np.random.default_rng(4).standard_normal((5, 4, 4, 3)))
    feat_params = [p for name, p in store.items() if name.startswith("featnet.")]

    def f():
        return ad.sum_(ad.mul(featnet_forward(store, SMALL_FEAT, image), proj))

    assert grad_check(f, feat_params, eps=1e-5, max_coords=8) < 1e-6


def test_nerfnet_output_ranges():
    store = init_params(SMALL_FEAT, SMALL_NERF, seed=5)
    rng = np.random.default_rng(6)
    n = 100_000
    coords = rng.uniform(-1, 1, (n, 3))
    angles = rng.uniform(-3, 3, (n, 2))
    feats = rng.standard_normal((n, 3))
    lum, density = nerfnet_forward(store, SMALL_NERF, coords, angles, feats)
    assert np.all(density.data >= 0.0)
    assert np.all((lum.data > 0.0) & (lum.data < 1.0))


def test_nerfnet_repeatable_bit_identical():
    store = init_params(SMALL_FEAT, SMALL_NERF, seed=7)
    rng = np.random.default_rng(8)
    coords = rng.uniform(-1, 1, (50, 3))
    angles = rng.uniform(-2, 2, (50, 2))
    feats = rng.standard_normal((50, 3))
    a = nerfnet_forward(store, SMALL_NERF, coords, angles, feats)
    b = nerfnet_forward(store, SMALL_NERF, coords, angles, feats)
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)


def test_nerfnet_batch_permutation_equivariance():
    store = init_params(SMALL_FEAT, SMALL_NERF, seed=9)
    rng = np.random.default_rng(10)
    coords = rng.uniform(-1, 1, (40, 3))
    angles = rng.uniform(-2, 2, (40, 2))
    feats = rng.standard_normal((40, 3))
    perm = rng.permutation(40)
    lum, density = nerfnet_forward(store, SMALL_NERF, coords, angles, feats)
    lum_p, density_p = nerfnet_forward(store, SMALL_NERF, coords[perm], angles[perm],
                                       feats[perm])
    np.testing.assert_allclose(lum_p.data, lum.data[perm], rtol=1e-6)
    np.testing.assert_allclose(density_p.data, density.data[perm], rtol=1e-6)


def test_nerfnet_continuity_in_inputs():
    # with PE off and f fixed, outputs move less as the query moves less
    store = init_params(SMALL_FEAT, SMALL_NERF, seed=11)
    rng = np.random.default_rng(12)
    # heads are zero at init (constant output); probe a non-degenerate net
    store["nerfnet.lum.w"].data[:] = rng.standard_normal((16, 1)) * 0.3
    store["nerfnet.density.w"].data[:] = rng.standard_normal((16, 1)) * 0.3
    q = rng.uniform(-0.5, 0.5, 5)
    f = rng.standard_normal(3)
    base = np.array(nerfnet_query(store, SMALL_NERF, *q, f))
    deltas = []
    for eps in (1e-1, 1e-2, 1e-3):
        direction = rng.standard_normal(5)
        direction /= np.linalg.norm(direction)
        moved = np.array(nerfnet_query(store, SMALL_NERF, *(q + eps * direction), f))
        deltas.append(float(np.abs(moved - base).sum()))
    assert deltas[0] > deltas[1] > deltas[2]


def test_init_deterministic_and_seed_sensitive():
    a = init_params(SMALL_FEAT, SMALL_NERF, seed=3)
    b = init_params(SMALL_FEAT, SMALL_NERF, seed=3)
    c = init_params(SMALL_FEAT, SMALL_NERF, seed=4)
    for name, p in a.items():
        assert np.array_equal(p.data, b[name].data)
    assert any(not np.array_equal(p.data, c[name].data) for name, p in a.items())


def test_density_bias_negative_and_projection_zero():
    store = init_params(SMALL_FEAT, SMALL_NERF, seed=0)
    assert store["nerfnet.density.b"].data[0] == -1.0
    np.testing.assert_array_equal(store["featnet.proj.w"].data, 0.0)
    np.testing.assert_array_equal(store["featnet.proj.b"].data, 0.0)


def test_hidden_preactivation_variance_near_unit():
    nerf = NeRFNetConfig(hidden_layers=4, hidden_width=64, feature_channels=8)
    store = init_params(FeatNetConfig(), nerf, seed=13, dtype=np.float64)
    rng = np.random.default_rng(14)
    x = rng.standard_normal((10_000, nerf.input_dim))
    h = x
    for i in range(nerf.hidden_layers):
        pre = h @ store[f"nerfnet.hidden{i}.w"].data + store[f"nerfnet.hidden{i}.b"].data
        assert 0.5 < float(pre.var()) < 2.0, f"layer {i} variance {pre.var():.3f}"
        h = np.where(pre >= 0, pre, 0.2 * pre)


def test_positional_encoding_shapes_and_default_off():
    q = np.random.default_rng(0).random((7, 5))
    assert positional_encoding(q, 0) is q
    enc = positional_encoding(q, 3)
    assert enc.shape == (7, 5 * (1 + 2 * 3))
    cfg = NeRFNetConfig(pe_frequencies=2, feature_channels=3)
    assert cfg.input_dim == 5 * 5 + 3


def test_config_validation():
    with pytest.raises(ModelConfigError):
        FeatNetConfig(depth_levels=1).validate()
    with pytest.raises(ModelConfigError):
        FeatNetConfig(kernel=4).validate()
    with pytest.raises(ModelConfigError):
        NeRFNetConfig(hidden_width=10, feature_channels=8).validate()  # < C+5
    with pytest.raises(ModelConfigError):
        init_params(FeatNetConfig(feature_channels=4),
                    NeRFNetConfig(feature_channels=8))


def test_shape_mismatch_errors():
    store = init_params(SMALL_FEAT, SMALL_NERF, seed=0)
    with pytest.raises(ModelConfigError):
        featnet_forward(store, SMALL_FEAT, np.zeros((4, 4, 4)))
    with pytest.raises(ModelConfigError):
        nerfnet_forward(store, SMALL_NERF, np.zeros((3, 3)), np.zeros((3, 2)),
                        np.zeros((3, 7)))   # wrong feature width
