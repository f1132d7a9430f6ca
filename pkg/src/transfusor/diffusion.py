"""
Conditional DDPM over normalized trajectory increments.

The state is a ``[T-1, 2]`` array of standardized deltas. Noise is added with
a linear beta schedule; a transformer predicts the injected noise given the
noisy state, the step and the category; sampling runs the ancestral reverse
chain with optional classifier-free guidance.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigurationError, StateError, UsageError
from .labels import ConditionLabel
from .training import fit


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @classmethod
    def linear(cls, steps=100, beta_start=1e-3, beta_end=0.1):
        return build_schedule(steps, beta_start, beta_end)

    @property
    def K(self):
        return len(self.betas)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    def beta(self, k):
        return self.betas[k - 1]

    def alpha(self, k):
        return 1.0 - self.betas[k - 1]

    def alpha_bar(self, k):
        return self.alpha_bars[k - 1]

    def sigma(self, k):
        return np.sqrt(self.betas[k - 1])

    def check_step(self, k, low=1):
        k = np.asarray(k)
        if np.any(k < low) or np.any(k > self.K):
            raise UsageError(f"diffusion step {k.tolist()} outside {low}..{self.K}")


def build_schedule(K=100, beta_start=1e-3, beta_end=0.1):
    """Betas interpolated linearly from ``beta_start`` (k=1) to ``beta_end`` (k=K)."""
    if int(K) != K or K < 1:
        raise ConfigurationError(f"step count must be a positive integer, got {K}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(K)) if K > 1 else np.array([beta_start])
    return NoiseSchedule(np.asarray(betas, dtype=np.float64))


def forward_sample(x0, k, eps, schedule):
    """Closed-form corruption ``sqrt(abar_k) x0 + sqrt(1 - abar_k) eps``.

    ``k`` may be a scalar or one step per leading item of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise UsageError(f"noise shape {eps.shape} != data shape {x0.shape}")
    schedule.check_step(k)
    abar = schedule.alpha_bars[np.asarray(k) - 1]
    abar = np.reshape(abar, np.shape(abar) + (1,) * (x0.ndim - np.ndim(abar)))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def forward_step(x_prev, k, eps, schedule):
    """One corruption step ``sqrt(1 - beta_k) x_{k-1} + sqrt(beta_k) eps``."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x_prev.shape:
        raise UsageError(f"noise shape {eps.shape} != data shape {x_prev.shape}")
    schedule.check_step(k)
    beta = schedule.betas[np.asarray(k) - 1]
    beta = np.reshape(beta, np.shape(beta) + (1,) * (x_prev.ndim - np.ndim(beta)))
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps


OUTPUT_INIT_SCALE = 0.1


@dataclass
class ModelConfig:
    hidden: int = 128
    heads: int = 4
    layers: int = 4
    ff_dim: int = 256
    category_dim: int = 64
    time_dim: int = 64
    reduce_dim: int = 32
    seq_len: int = 14

    @property
    def cond_dim(self):
        return self.category_dim + self.time_dim

    def to_dict(self):
        return asdict(self)


class TransfusorNet(nn.Module):
    """Noise predictor.

    embed (2 -> hidden) + position encoding, condition fusion, ``layers``
    transformer blocks, then two condition-induced reductions
    (hidden -> reduce_dim -> 2).
    """

    def __init__(self, config, rng):
        self.config = config
        h = config.hidden
        self.embed = nn.Linear(2, h, rng)
        self.categories = nn.CategoryTable(config.category_dim, rng)
        self.fuse = nn.ConditionLinear(h, h, config.cond_dim, rng)
        self.blocks = [nn.TransformerBlock(h, config.heads, config.ff_dim, rng) for _ in range(config.layers)]
        self.reduce1 = nn.ConditionLinear(h, config.reduce_dim, config.cond_dim, rng)
        self.reduce2 = nn.ConditionLinear(config.reduce_dim, 2, config.cond_dim, rng)
        # near-zero initial prediction so the untrained loss sits at the noise variance
        self.reduce2.w1.data *= OUTPUT_INIT_SCALE
        self.reduce2.w3.data *= OUTPUT_INIT_SCALE
        self._positions = nn.positional_table(config.seq_len, h)

    def condition(self, labels, steps):
        return nn.build_condition_embedding(self.categories, labels, steps, self.config.time_dim)

    def __call__(self, x, steps, labels):
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != 2:
            raise ConfigurationError(f"expected a [B, T, 2] state, got {x.shape}")
        s = x.shape[1]
        positions = self._positions if s == self.config.seq_len else nn.positional_table(s, self.config.hidden)
        c = self.condition(labels, steps)
        hidden = self.embed(x) + T.Tensor(positions)
        hidden = self.fuse(hidden, c)
        for block in self.blocks:
            hidden = block(hidden)
        hidden = self.reduce1(hidden, c)
        return self.reduce2(hidden, c)


class Transfusor:
    """Network, schedule and normalization statistics bundled for training and sampling."""

    kind = "transfusor"

    def __init__(self, config=None, schedule=None, normalizer=None, seed=0, net=None):
        self.config = config or ModelConfig()
        self.schedule = schedule or build_schedule()
        self.normalizer = normalizer
        self.seed = seed
        self.net = net if net is not None else TransfusorNet(self.config, T.SeededRng(seed))

    def parameters(self):
        return self.net.parameters()

    def predict_noise(self, x_k, k, labels):
        """Noise estimate for a batch ``x_k`` of shape ``[B, T, 2]``.

        ``k`` is a step or one step per item; ``labels`` a label (or ``None``)
        or a list with one entry per item.
        """
        if self.net is None:
            raise StateError("model parameters are not initialized")
        x_k = np.asarray(x_k.data if isinstance(x_k, T.Tensor) else x_k, dtype=np.float64)
        single = x_k.ndim == 2
        if single:
            x_k = x_k[None]
        b = x_k.shape[0]
        steps = np.broadcast_to(np.asarray(k), (b,))
        if labels is None or isinstance(labels, (ConditionLabel, int, np.integer)):
            labels = [labels] * b
        out = self.net(x_k, steps, labels)
        return out.data[0] if single else out.data


def training_loss(model, x0, labels, rng, p_uncond=0.1):
    """Noise-prediction MSE on one batch of normalized deltas ``[B, T, 2]``."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 3 or x0.shape[0] == 0:
        raise UsageError("training batch must be a nonempty [B, T, 2] array")
    schedule = model.schedule
    b = x0.shape[0]
    k = rng.integers(1, schedule.K + 1, size=b)
    eps = rng.normal(x0.shape)
    drop = rng.random(b) < p_uncond
    labels = [None if d else lab for lab, d in zip(labels, drop)]
    x_k = forward_sample(x0, k, eps, schedule)
    pred = model.net(x_k, k, labels)
    return T.mse_loss(pred, T.Tensor(eps))


def train(model, deltas, labels, config, rng=None, on_epoch=None):
    """Fit ``model`` on normalized deltas. Returns the epoch loss history."""
    rng = rng or T.SeededRng(config.seed)

    def batch_loss(xb, lb, r):
        return training_loss(model, xb, lb, r, config.p_uncond)

    return fit(model.net, batch_loss, np.asarray(deltas, dtype=np.float64), labels, config, rng, on_epoch)


def guided_noise(model, x_k, k, labels, w=0.0):
    """``(1 + w) eps(x, k, c) - w eps(x, k, null)``; the null pass is skipped at w = 0."""
    cond = model.predict_noise(x_k, k, labels)
    if w == 0:
        return cond
    uncond = model.predict_noise(x_k, k, None)
    return (1.0 + w) * cond - w * uncond


def reverse_step(model, x_k, k, labels, rng, w=0.0, eps_hat=None):
    """Ancestral step ``x_k -> x_{k-1}`` with variance ``beta_k``; no noise at k = 1."""
    schedule = model.schedule
    if k < 1 or k > schedule.K:
        raise UsageError(f"reverse step index {k} outside 1..{schedule.K}")
    if eps_hat is None:
        eps_hat = guided_noise(model, x_k, k, labels, w)
    beta = schedule.beta(k)
    mu = (x_k - (beta / np.sqrt(1.0 - schedule.alpha_bar(k))) * eps_hat) / np.sqrt(schedule.alpha(k))
    if k > 1:
        return mu + schedule.sigma(k) * rng.normal(np.shape(x_k))
    return mu


def _run_chain(model, label, n, rng, w, record=()):
    if model.normalizer is None:
        raise StateError("normalization statistics are missing; load a trained checkpoint")
    K = model.schedule.K
    x = rng.normal((n, model.config.seq_len, 2))
    snapshots = {}
    if K in record:
        snapshots[K] = x.copy()
    with T.no_grad():
        for k in range(K, 0, -1):
            x = reverse_step(model, x, k, label, rng, w)
            if k - 1 in record:
                snapshots[k - 1] = x.copy()
    return x, snapshots


def sample_trajectories(model, label, n, rng, w=0.0):
    """Draw ``n`` delta trajectories (meters, ``[n, T, 2]``) for one category."""
    if n == 0:
        return np.zeros((0, model.config.seq_len, 2))
    x, _ = _run_chain(model, label, n, rng, w)
    return model.normalizer.denormalize(x)


def snapshot_diffusion(model, label, n, ks, rng, w=0.0):
    """Absolute (origin-anchored) trajectories at each requested step of one reverse run.

    Returns ``{k: [n, T+1, 2]}``.
    """
    from .data import from_deltas

    K = model.schedule.K
    ks = sorted({int(k) for k in ks})
    for k in ks:
        if not 0 <= k <= K:
            raise UsageError(f"snapshot step {k} outside 0..{K}")
    if n == 0:
        return {k: np.zeros((0, model.config.seq_len + 1, 2)) for k in ks}
    _, snaps = _run_chain(model, label, n, rng, w, record=set(ks))
    return {k: from_deltas(model.normalizer.denormalize(snaps[k])) for k in ks}
