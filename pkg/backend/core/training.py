# backend/core/training.py
# SGD-with-momentum fitting loops for the denoiser and the deterministic decoder,
# plus the toy tasks used to check them.

import logging
from dataclasses import dataclass

import numpy as np

from core.conditioning import ConditioningPair
from core.diffusion import MLPParams, make_rng
from core.errors import ConfigError

logger = logging.getLogger(__name__)


class SGDMomentum:
    def __init__(self, lr=0.02, momentum=0.9):
        if lr <= 0 or not 0 <= momentum < 1:
            raise ConfigError(f"Invalid optimizer settings lr={lr}, momentum={momentum}")
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def step(self, params, grads):
        g = grads.arrays()
        if self.velocity is None:
            self.velocity = {k: np.zeros_like(v) for k, v in g.items()}
        updated = {}
        for k, p in params.arrays().items():
            self.velocity[k] = self.momentum * self.velocity[k] + g[k]
            updated[k] = p - self.lr * self.velocity[k]
        return MLPParams(**updated)


def train_denoiser(model, draw_batch, steps=2000, lr=0.02, momentum=0.9, batch_size=64, seed=0, log_every=500):
    """Noise-prediction training. draw_batch(rng, n) -> (z0 batch, batched ConditioningPair)."""
    schedule = model.schedule
    if schedule is None:
        raise ConfigError("Denoiser needs a schedule to be trained")
    rng = make_rng(seed)
    opt = SGDMomentum(lr, momentum)
    history = []
    for step in range(steps):
        z0, cond = draw_batch(rng, batch_size)
        i = rng.integers(0, schedule.steps_train, size=len(z0))
        eps = rng.standard_normal(z0.shape)
        shape = (-1,) + (1,) * (z0.ndim - 1)
        z_i = schedule.alphas[i].reshape(shape) * z0 + schedule.sigmas[i].reshape(shape) * eps
        pred, cache = model.forward(z_i, cond, i)
        loss, grads = model.backward(cache, pred, eps)
        model.params = opt.step(model.params, grads)
        history.append(loss)
        if log_every and (step + 1) % log_every == 0:
            logger.info("denoiser step %d/%d loss %.5f", step + 1, steps, float(np.mean(history[-log_every:])))
    return history


def train_decoder(model, cond, targets, steps=2000, lr=0.02, momentum=0.9, batch_size=None, seed=0, log_every=500):
    """Pixel-MSE regression of target latents from conditioning (full batch unless batch_size)."""
    targets = np.asarray(targets, dtype=np.float64)
    n = len(targets)
    rng = make_rng(seed)
    opt = SGDMomentum(lr, momentum)
    history = []
    for step in range(steps):
        if batch_size and batch_size < n:
            sel = rng.choice(n, size=batch_size, replace=False)
            c = ConditioningPair(cond.context[sel], cond.live[sel])
            t = targets[sel]
        else:
            c, t = cond, targets
        pred, cache = model.forward(None, c, None)
        loss, grads = model.backward(cache, pred, t)
        model.params = opt.step(model.params, grads)
        history.append(loss)
        if log_every and (step + 1) % log_every == 0:
            logger.info("decoder step %d/%d loss %.5f", step + 1, steps, float(np.mean(history[-log_every:])))
    return history


# -------------------------------------------------------------------
# Toy tasks
# -------------------------------------------------------------------
@dataclass(frozen=True)
class ToyTask:
    latent_shape: tuple
    context_channels: int = 1
    live_channels: int = 1

    def cond(self, n, context_value=0.0):
        h, w, _ = self.latent_shape
        ctx = np.full((n, h, w, self.context_channels), float(context_value))
        live = np.zeros((n, h, w, self.live_channels))
        return ConditioningPair(ctx, live)


@dataclass(frozen=True)
class GaussianTask(ToyTask):
    mu: float = 0.5
    var: float = 0.25

    def draw(self, rng, n):
        z = self.mu + np.sqrt(self.var) * rng.standard_normal((n,) + tuple(self.latent_shape))
        return z, self.cond(n)


@dataclass(frozen=True)
class TwoTargetTask(ToyTask):
    """One conditioning value, two equally frequent targets a and b (plus optional spread)."""

    a: float = 1.0
    b: float = 2.0
    spread: float = 0.0

    def draw(self, rng, n):
        pick = rng.integers(0, 2, size=n)
        base = np.where(pick == 0, self.a, self.b).reshape((n,) + (1,) * len(self.latent_shape))
        z = base + self.spread * rng.standard_normal((n,) + tuple(self.latent_shape))
        return z, self.cond(n)

    def dataset(self, n):
        """Balanced set: n // 2 copies of each target."""
        half = n // 2
        targets = np.concatenate([np.full((half,) + tuple(self.latent_shape), self.a),
                                  np.full((n - half,) + tuple(self.latent_shape), self.b)])
        return self.cond(n), targets


def toy_task(kind, latent_shape=(1, 1, 4), **params):
    if kind == "gauss":
        return GaussianTask(tuple(latent_shape), **params)
    if kind == "mixture":
        return TwoTargetTask(tuple(latent_shape), **params)
    raise ConfigError(f"Unknown toy task '{kind}'")
