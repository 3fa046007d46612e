import numpy as np
import pytest

from oracles import central_diff, rel_err
from unitok.autoencoder import Autoencoder, decode, encode, recon_loss
from unitok.data import gen_synthetic
from unitok.nn import Adam, Linear, make_rng, relu


def _zero(ae):
    for p in ae.params():
        p.value[...] = 0.0


def test_zero_params_give_zero_latent(rng):
    ae = Autoencoder(10, hidden=(6,), d_latent=3, rng=make_rng(0))
    _zero(ae)
    np.testing.assert_array_equal(encode(ae, rng.standard_normal(10)), 0.0)
    np.testing.assert_array_equal(decode(ae, rng.standard_normal(3)), 0.0)


def test_truncating_identity():
    ae = Autoencoder(5, hidden=(), d_latent=3)
    ae.encoder.layers[0].W.value[...] = np.eye(3, 5)
    x = np.array([1.0, -2.0, 3.0, 4.0, 5.0])
    np.testing.assert_array_equal(encode(ae, x), x[:3])
    ae.decoder.layers[0].W.value[...] = np.eye(5, 3)
    np.testing.assert_array_equal(decode(ae, x[:3]), [1.0, -2.0, 3.0, 0.0, 0.0])


def test_matches_manual_composition(rng):
    ae = Autoencoder(12, hidden=(9, 7), d_latent=4, rng=make_rng(1))
    x = rng.standard_normal(12)
    h = x
    for i, layer in enumerate(ae.encoder.layers):
        h = Linear.from_arrays(layer.W.value, layer.b.value).forward(h)
        if i < 2:
            h = relu(h)
    np.testing.assert_array_equal(encode(ae, x), h)
    z = rng.standard_normal(4)
    h = z
    for i, layer in enumerate(ae.decoder.layers):
        h = Linear.from_arrays(layer.W.value, layer.b.value).forward(h)
        if i < 2:
            h = relu(h)
    np.testing.assert_array_equal(decode(ae, z), h)


def test_batch_order_independent(rng):
    ae = Autoencoder(8, hidden=(6,), d_latent=3, rng=make_rng(2))
    X = rng.standard_normal((10, 8))
    perm = rng.permutation(10)
    np.testing.assert_allclose(encode(ae, X)[perm], encode(ae, X[perm]), rtol=0, atol=1e-15)


def test_recon_loss_examples():
    loss, grad = recon_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
    assert loss == 0.0
    loss, grad = recon_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]]))
    assert loss == 1.0
    np.testing.assert_array_equal(grad, [[-2.0, 0.0]])


def test_recon_loss_shape_mismatch():
    with pytest.raises(ValueError):
        recon_loss(np.ones((2, 3)), np.ones((3, 2)))


def test_recon_loss_gradient(rng):
    X = rng.standard_normal((5, 4))
    Xh = rng.standard_normal((5, 4))
    _, g = recon_loss(X, Xh)
    assert rel_err(g, central_diff(lambda: recon_loss(X, Xh)[0], Xh)) < 1e-6


def test_end_to_end_gradient_with_identity_quantizer(rng):
    ae = Autoencoder(7, hidden=(6,), d_latent=3, rng=make_rng(3))
    X = rng.standard_normal((4, 7))

    def f():
        return recon_loss(X, decode(ae, encode(ae, X)))[0]

    z, ec = encode(ae, X, return_cache=True)
    xh, dc = decode(ae, z, return_cache=True)
    _, g = recon_loss(X, xh)
    ae.encoder.backward(ec, ae.decoder.backward(dc, g))
    for p in ae.params():
        assert rel_err(p.grad, central_diff(f, p.value), floor=1e-8) < 1e-4, p.name


def test_autoencoder_alone_learns_low_rank_data():
    # rank-limited data: a 3-dim subspace of R^24 plus small noise
    rng = make_rng(0)
    intra_std = 0.05
    basis = rng.standard_normal((3, 24))
    X = rng.standard_normal((400, 3)) @ basis / np.sqrt(24) + intra_std / np.sqrt(24) * rng.standard_normal((400, 24))
    ds = gen_synthetic(1, 1, 24)  # only for the dim
    assert ds.d == 24
    ae = Autoencoder(24, hidden=(32,), d_latent=8, rng=rng)
    opt = Adam(ae.params(), lr=3e-3)
    for _ in range(200):
        for s in range(0, 400, 100):
            xb = X[s:s + 100]
            z, ec = encode(ae, xb, return_cache=True)
            xh, dc = decode(ae, z, return_cache=True)
            _, g = recon_loss(xb, xh, reduction="mean")
            ae.encoder.backward(ec, ae.decoder.backward(dc, g))
            opt.step()
    per_item = recon_loss(X, decode(ae, encode(ae, X)), reduction="mean")[0]
    assert per_item < intra_std ** 2 * 24
