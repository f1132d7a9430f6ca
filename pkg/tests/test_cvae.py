import numpy as np
import pytest

from transfusor import cvae as C
from transfusor import tensor as T
from transfusor.data import Normalizer
from transfusor.errors import ConfigurationError, StateError, UsageError
from transfusor.labels import ConditionLabel
from transfusor.training import TrainingConfig

SMALL = C.CvaeConfig(hidden=16, heads=2, ff_dim=32, latent=8, category_dim=8, time_dim=8)
LEFT = ConditionLabel("left", "car", "normal")
RIGHT = ConditionLabel("right", "truck", "over")


def small(seed=0, trained=False):
    return C.Cvae(SMALL, Normalizer(np.zeros(2), np.ones(2)), seed=seed, trained=trained)


def one_step(model, x0, labels):
    opt = T.Adam(model.parameters())
    C.cvae_loss(model, x0, labels, T.SeededRng(0)).backward()
    opt.step()


def test_kl_closed_forms():
    assert C.kl_divergence(np.zeros((1, 4)), np.zeros((1, 4))).data.tolist() == [0.0]
    assert C.kl_divergence(np.ones((1, 1)), np.zeros((1, 1))).data.tolist() == [0.5]


def test_encode_widths_and_determinism(np_rng):
    m = small()
    x = np_rng.normal(size=(3, 14, 2))
    mu, logvar = m.encode(x, LEFT)
    assert mu.shape == logvar.shape == (3, 8)
    mu2, _ = m.encode(x, LEFT)
    assert np.array_equal(mu, mu2)


def test_encode_shape_error():
    with pytest.raises(ConfigurationError):
        small().encode(np.zeros((2, 13, 2)), LEFT)


def test_distinct_inputs_give_distinct_means(np_rng):
    m = small()
    x = np_rng.normal(size=(4, 14, 2))
    one_step(m, x, [LEFT] * 4)
    mu, _ = m.encode(x[:2], LEFT)
    assert np.linalg.norm(mu[0] - mu[1]) > 0


def test_decode_shape_and_determinism(np_rng):
    m = small()
    z = np_rng.normal(size=(2, 8))
    out = m.decode(z, LEFT)
    assert out.shape == (2, 14, 2)
    assert np.array_equal(out, m.decode(z, LEFT))


def test_decode_width_mismatch():
    with pytest.raises(ConfigurationError):
        small().decode(np.zeros((1, 5)), LEFT)


def test_zero_latent_is_label_dependent_after_training(np_rng):
    m = small()
    x = np_rng.normal(size=(6, 14, 2))
    one_step(m, x, [LEFT, RIGHT] * 3)
    z = np.zeros((1, 8))
    assert np.linalg.norm(m.decode(z, LEFT) - m.decode(z, RIGHT)) > 0


def test_loss_parts(np_rng):
    m = small()
    x = np_rng.normal(size=(3, 14, 2))
    eps = np.zeros((3, 8))
    loss = C.cvae_loss(m, x, LEFT, None, eps=eps).item()
    mu, logvar = m.encode(x, LEFT)
    recon = m.decode(mu, LEFT)
    kl = 0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1 - logvar, axis=-1).mean()
    assert loss == pytest.approx(np.mean((recon - x) ** 2) + SMALL.kl_weight * kl, rel=1e-12)


def test_loss_empty_batch():
    with pytest.raises(UsageError):
        C.cvae_loss(small(), np.zeros((0, 14, 2)), [], T.SeededRng(0))


def test_training_reduces_loss(np_rng):
    m = small()
    base = np.sin(np.linspace(0, 3, 14))[:, None] * [1.0, 0.5]
    x = base + 0.1 * np_rng.normal(size=(64, 14, 2))
    hist = C.train(m, x, [LEFT] * 64, TrainingConfig(epochs=30, batch_size=32, seed=0))
    assert m.trained
    assert hist[-1] < 0.5 * hist[0]


def test_sample_requires_training():
    with pytest.raises(StateError):
        C.cvae_sample(small(), LEFT, 3, T.SeededRng(0))


def test_sample_zero_and_determinism():
    m = small(trained=True)
    assert C.cvae_sample(m, LEFT, 0, T.SeededRng(0)).shape == (0, 14, 2)
    a = C.cvae_sample(m, LEFT, 5, T.SeededRng(4))
    assert np.array_equal(a, C.cvae_sample(m, LEFT, 5, T.SeededRng(4)))
    assert a.shape == (5, 14, 2)


def test_sample_without_normalizer():
    m = small(trained=True)
    m.normalizer = None
    with pytest.raises(StateError):
        C.cvae_sample(m, LEFT, 2, T.SeededRng(0))


@pytest.mark.parametrize("field,value", [("latent", 0), ("kl_weight", 0.0), ("kl_weight", -1.0)])
def test_config_validation(field, value):
    kwargs = {field: value}
    with pytest.raises(ConfigurationError):
        C.CvaeConfig(**kwargs).validate()


def test_default_architecture():
    m = C.Cvae(seed=0)
    assert m.config.latent == 64 and m.config.kl_weight == 0.01
    assert m.net.to_mu.weight.shape == (128, 64)
    assert m.net.dec_fuse.w1.shape == (64, 128)
