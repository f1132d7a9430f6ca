"""Conditional VAE baseline built from the same blocks as the diffusion model."""

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigurationError, StateError, UsageError
from .labels import ConditionLabel
from .training import fit


@dataclass
class CvaeConfig:
    hidden: int = 128
    heads: int = 4
    ff_dim: int = 256
    latent: int = 64
    kl_weight: float = 0.01
    category_dim: int = 64
    time_dim: int = 64
    seq_len: int = 14

    @property
    def cond_dim(self):
        return self.category_dim + self.time_dim

    def validate(self):
        if self.latent < 1:
            raise ConfigurationError("latent width must be >= 1")
        if self.kl_weight <= 0:
            raise ConfigurationError("KL weight must be > 0")
        return self

    def to_dict(self):
        return asdict(self)


def kl_divergence(mu, logvar):
    """Per-sample ``KL(N(mu, exp(logvar)) || N(0, I))`` summed over latent dims."""
    mu, logvar = T.as_tensor(mu), T.as_tensor(logvar)
    terms = T.square(mu) + T.exp(logvar) - 1.0 - logvar
    return T.tsum(terms, axis=-1) * 0.5


class CvaeNet(nn.Module):
    def __init__(self, config, rng):
        self.config = config.validate()
        h = config.hidden
        self.categories = nn.CategoryTable(config.category_dim, rng)
        self.enc_embed = nn.Linear(2, h, rng)
        self.enc_fuse = nn.ConditionLinear(h, h, config.cond_dim, rng)
        self.enc_block = nn.TransformerBlock(h, config.heads, config.ff_dim, rng)
        self.to_mu = nn.Linear(h, config.latent, rng)
        self.to_logvar = nn.Linear(h, config.latent, rng)
        self.dec_fuse = nn.ConditionLinear(config.latent, h, config.cond_dim, rng)
        self.dec_block = nn.TransformerBlock(h, config.heads, config.ff_dim, rng)
        self.dec_out = nn.Linear(h, 2, rng)
        self._enc_positions = nn.positional_table(config.seq_len, h)
        self._dec_positions = nn.positional_table(config.seq_len, config.latent) if config.latent % 2 == 0 else \
            np.zeros((config.seq_len, config.latent))

    def condition(self, labels):
        # no diffusion clock: the time half of the condition is zero
        return nn.build_condition_embedding(self.categories, labels, np.zeros(len(labels)),
                                            self.config.time_dim, zero_time=True)

    def encode(self, x, labels):
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[1:] != (self.config.seq_len, 2):
            raise ConfigurationError(f"encoder expects [B, {self.config.seq_len}, 2], got {x.shape}")
        c = self.condition(labels)
        hidden = self.enc_embed(x) + T.Tensor(self._enc_positions)
        hidden = self.enc_block(self.enc_fuse(hidden, c))
        pooled = T.mean(hidden, axis=1)
        return self.to_mu(pooled), self.to_logvar(pooled)

    def decode(self, z, labels):
        z = T.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.config.latent:
            raise ConfigurationError(f"decoder expects [B, {self.config.latent}] latents, got {z.shape}")
        c = self.condition(labels)
        b = z.shape[0]
        spread = T.reshape(z, (b, 1, self.config.latent)) + T.Tensor(self._dec_positions)
        hidden = self.dec_block(self.dec_fuse(spread, c))
        return self.dec_out(hidden)


class Cvae:
    kind = "cvae"

    def __init__(self, config=None, normalizer=None, seed=0, net=None, trained=False):
        self.config = config or CvaeConfig()
        self.normalizer = normalizer
        self.seed = seed
        self.net = net if net is not None else CvaeNet(self.config, T.SeededRng(seed))
        self.trained = trained

    def parameters(self):
        return self.net.parameters()

    def encode(self, x0, labels):
        """Posterior ``(mean, logvar)`` arrays for normalized deltas ``[B, T, 2]``."""
        labels = _expand(labels, len(x0))
        with T.no_grad():
            mu, logvar = self.net.encode(np.asarray(x0, dtype=np.float64), labels)
        return mu.data, logvar.data

    def decode(self, z, labels):
        """Normalized deltas for latents ``[B, latent]``."""
        z = np.asarray(z, dtype=np.float64)
        labels = _expand(labels, len(z))
        with T.no_grad():
            return self.net.decode(z, labels).data


def _expand(labels, n):
    if labels is None or isinstance(labels, (ConditionLabel, int, np.integer)):
        return [labels] * n
    return list(labels)


def cvae_loss(model, x0, labels, rng, eps=None):
    """Reconstruction MSE plus ``kl_weight`` times the batch-mean KL."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 3 or x0.shape[0] == 0:
        raise UsageError("CVAE batch must be a nonempty [B, T, 2] array")
    labels = _expand(labels, len(x0))
    mu, logvar = model.net.encode(x0, labels)
    if eps is None:
        eps = rng.normal(mu.shape)
    z = mu + T.exp(logvar * 0.5) * T.Tensor(eps)
    recon = model.net.decode(z, labels)
    return T.mse_loss(recon, T.Tensor(x0)) + T.mean(kl_divergence(mu, logvar)) * model.config.kl_weight


def train(model, deltas, labels, config, rng=None, on_epoch=None):
    rng = rng or T.SeededRng(config.seed)

    def batch_loss(xb, lb, r):
        return cvae_loss(model, xb, lb, r)

    history = fit(model.net, batch_loss, np.asarray(deltas, dtype=np.float64), labels, config, rng, on_epoch)
    model.trained = True
    return history


def cvae_sample(model, label, n, rng):
    """``n`` delta trajectories (meters) decoded from prior draws."""
    if not model.trained:
        raise StateError("CVAE has not been trained or loaded")
    if model.normalizer is None:
        raise StateError("normalization statistics are missing")
    if n == 0:
        return np.zeros((0, model.config.seq_len, 2))
    z = rng.normal((n, model.config.latent))
    return model.normalizer.denormalize(model.decode(z, label))
