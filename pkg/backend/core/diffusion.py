# backend/core/diffusion.py
# Noise schedule, forward noising, reverse samplers, oracle denoisers, and the
# small two-layer denoiser / deterministic decoder with hand-written backprop.

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Protocol

import numpy as np
from scipy.special import logsumexp

from core.conditioning import DOWNSCALE, LATENT_CHANNELS, ConditioningPair, Latent
from core.errors import ConfigError, DataError
from core.tensorio import read_bundle, write_bundle

logger = logging.getLogger(__name__)

SAMPLERS = ("ddim", "ddpm")


def make_rng(seed):
    """Seeded PCG64 generator; every stochastic op takes one of these."""
    return np.random.Generator(np.random.PCG64(seed))


# -------------------------------------------------------------------
# Schedule
# -------------------------------------------------------------------
@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    sigmas: np.ndarray
    inference_steps: int = 10

    @property
    def steps_train(self):
        return len(self.alphas)

    def indices(self, inference_steps=None):
        """Evenly spaced descending step indices from steps_train-1 to 0."""
        n = self.inference_steps if inference_steps is None else int(inference_steps)
        if not 1 <= n <= self.steps_train:
            raise ConfigError(f"inference_steps must be in [1, {self.steps_train}], got {n}")
        idx = np.round(np.linspace(self.steps_train - 1, 0, n)).astype(np.int64)
        return np.unique(idx)[::-1]


def make_schedule(steps_train=1000, beta_start=1e-4, beta_end=0.02, inference_steps=10):
    if steps_train < 1:
        raise ConfigError("steps_train must be at least 1")
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise ConfigError(f"Betas must satisfy 0 <= start <= end < 1, got {beta_start}, {beta_end}")
    if not 1 <= inference_steps <= steps_train:
        raise ConfigError("inference_steps must lie in [1, steps_train]")
    betas = np.linspace(beta_start, beta_end, steps_train)
    alphas = np.sqrt(np.cumprod(1.0 - betas))
    sigmas = np.sqrt(np.maximum(1.0 - alphas ** 2, 0.0))
    for arr in (betas, alphas, sigmas):
        arr.setflags(write=False)
    return DiffusionSchedule(betas, alphas, sigmas, int(inference_steps))


def _check_index(i, schedule):
    i = np.asarray(i)
    if np.any(i < 0) or np.any(i >= schedule.steps_train):
        raise ConfigError(f"Diffusion index out of range [0, {schedule.steps_train})")
    return i


def _coef(values, i, ndim):
    """Per-sample coefficient broadcast over trailing latent axes."""
    c = values[i]
    return c.reshape(c.shape + (1,) * ndim) if np.ndim(c) else c


def add_noise(z, eps, i, schedule):
    data = z.data if isinstance(z, Latent) else np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != data.shape:
        raise ConfigError(f"Noise shape {eps.shape} does not match latent shape {data.shape}")
    i = _check_index(i, schedule)
    nd = data.ndim - np.ndim(i)
    out = _coef(schedule.alphas, i, nd) * data + _coef(schedule.sigmas, i, nd) * eps
    return Latent(out, z.source_resolution) if isinstance(z, Latent) else out


class Denoiser(Protocol):
    def __call__(self, z_i: np.ndarray, cond: ConditioningPair, i) -> np.ndarray: ...


def training_loss(denoiser, z, cond, i, eps, schedule=None):
    z_i = add_noise(z, eps, i, schedule or schedule_of(denoiser))
    data = z_i.data if isinstance(z_i, Latent) else z_i
    pred = np.asarray(denoiser(data, cond, i))
    eps = np.asarray(eps, dtype=np.float64)
    if pred.shape != eps.shape:
        raise ConfigError(f"Denoiser output {pred.shape} does not match noise {eps.shape}")
    return float(np.mean((eps - pred) ** 2))


def schedule_of(denoiser):
    sched = getattr(denoiser, "schedule", None)
    if sched is None:
        raise ConfigError("Denoiser carries no diffusion schedule")
    return sched


# -------------------------------------------------------------------
# Sampling
# -------------------------------------------------------------------
def _draw(seeds, shape, n_noise):
    """Per seed: initial latent first, then all ancestral noises in one draw."""
    init, noise = [], []
    for seed in seeds:
        rng = make_rng(seed)
        init.append(rng.standard_normal(shape))
        if n_noise:
            noise.append(rng.standard_normal((n_noise,) + tuple(shape)))
    return np.stack(init), (np.stack(noise, axis=1) if n_noise else None)


def reverse_process(denoiser, cond, schedule, z, inference_steps=None, sampler="ddim", noise=None, trajectory=None):
    """Run the reverse chain from z at the highest index; returns the final clean estimate."""
    if sampler not in SAMPLERS:
        raise ConfigError(f"Unknown sampler '{sampler}'")
    idx = schedule.indices(inference_steps)
    a, s = schedule.alphas, schedule.sigmas
    x0 = z
    for n, i in enumerate(idx):
        if s[i] > 0:
            eps_hat = np.asarray(denoiser(z, cond, int(i)), dtype=np.float64)
            x0 = (z - s[i] * eps_hat) / a[i]
        else:
            eps_hat = np.zeros_like(z)
            x0 = z / a[i]
        if n == len(idx) - 1:
            break
        j = idx[n + 1]
        if sampler == "ddim" or s[i] == 0:
            z = a[j] * x0 + s[j] * eps_hat
        else:
            a_ij = a[i] / a[j]
            var_ij = s[i] ** 2 - a_ij ** 2 * s[j] ** 2
            mean = (a_ij * s[j] ** 2 / s[i] ** 2) * z + (a[j] * var_ij / s[i] ** 2) * x0
            std = np.sqrt(max(var_ij * s[j] ** 2 / s[i] ** 2, 0.0))
            z = mean + std * noise[n]
        if trajectory is not None:
            trajectory.append(z)
    return x0


def _latent_shape(cond, latent_shape):
    if latent_shape is not None:
        return tuple(latent_shape)
    h, w = cond.spatial_shape
    return (h, w, LATENT_CHANNELS)


def sample_batch(denoiser, cond, schedule, seeds, latent_shape=None, inference_steps=None, sampler="ddim"):
    """Final clean latents for several seeds at once, shape (len(seeds), *latent_shape)."""
    shape = _latent_shape(cond, latent_shape)
    steps = len(schedule.indices(inference_steps))
    z, noise = _draw(list(seeds), shape, steps - 1 if sampler == "ddpm" else 0)
    return reverse_process(denoiser, cond, schedule, z, inference_steps, sampler, noise)


def sample(denoiser, cond, schedule, seed, latent_shape=None, inference_steps=None, sampler="ddim"):
    out = sample_batch(denoiser, cond, schedule, [seed], latent_shape, inference_steps, sampler)[0]
    h, w = out.shape[:2]
    return Latent(out, (h * DOWNSCALE, w * DOWNSCALE))


def sample_trajectory(denoiser, cond, schedule, seed, latent_shape=None, inference_steps=None, sampler="ddim"):
    """Initial latent, every intermediate latent, and the final clean estimate."""
    shape = _latent_shape(cond, latent_shape)
    steps = len(schedule.indices(inference_steps))
    z, noise = _draw([seed], shape, steps - 1 if sampler == "ddpm" else 0)
    traj = [z[0]]
    inner = []
    x0 = reverse_process(denoiser, cond, schedule, z, inference_steps, sampler, noise, inner)
    return traj + [t[0] for t in inner] + [x0[0]]


# -------------------------------------------------------------------
# Oracle denoisers
# -------------------------------------------------------------------
class GaussianOracleDenoiser:
    """Exact posterior noise estimate for data ~ N(mu, diag var)."""

    def __init__(self, mu, var, schedule):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.var = np.asarray(var, dtype=np.float64)
        if np.any(self.var <= 0):
            raise ConfigError("Oracle variance must be positive")
        self.schedule = schedule

    def posterior_mean(self, z, alpha, sigma):
        gain = alpha * self.var / (alpha ** 2 * self.var + sigma ** 2)
        return self.mu + gain * (z - alpha * self.mu)

    def predict(self, z, alpha, sigma):
        z = np.asarray(z, dtype=np.float64)
        if sigma == 0:
            return np.zeros_like(z)
        return (z - alpha * self.posterior_mean(z, alpha, sigma)) / sigma

    def __call__(self, z_i, cond, i):
        return self.predict(z_i, self.schedule.alphas[i], self.schedule.sigmas[i])


class MixtureOracleDenoiser:
    """Exact posterior noise estimate for a K-component diagonal Gaussian mixture.

    Component posteriors combine with responsibilities
    r_k ∝ w_k N(z; alpha mu_k, alpha^2 var_k + sigma^2). Weights may depend on the
    conditioning through `weight_fn(cond) -> (K,) or (B, K)`.
    """

    def __init__(self, means, variances, schedule, weights=None, weight_fn=None):
        self.means = np.asarray(means, dtype=np.float64)
        self.variances = np.broadcast_to(np.asarray(variances, dtype=np.float64), self.means.shape)
        if np.any(self.variances <= 0):
            raise ConfigError("Mixture variances must be positive")
        K = len(self.means)
        self.weights = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, dtype=np.float64)
        self.weight_fn = weight_fn
        self.schedule = schedule

    def mode_weights(self, cond):
        w = self.weights if self.weight_fn is None else np.asarray(self.weight_fn(cond), dtype=np.float64)
        return w / w.sum(axis=-1, keepdims=True)

    def responsibilities(self, z, alpha, sigma, cond=None):
        z = np.asarray(z, dtype=np.float64)
        ev = self.means.ndim - 1
        zk = np.expand_dims(z, axis=-ev - 1)
        s2 = alpha ** 2 * self.variances + sigma ** 2
        axes = tuple(range(-ev, 0))
        loglik = -0.5 * np.sum((zk - alpha * self.means) ** 2 / s2 + np.log(2 * np.pi * s2), axis=axes)
        logits = np.log(self.mode_weights(cond)) + loglik
        return np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))

    def posterior_mean(self, z, alpha, sigma, cond=None):
        z = np.asarray(z, dtype=np.float64)
        ev = self.means.ndim - 1
        zk = np.expand_dims(z, axis=-ev - 1)
        s2 = alpha ** 2 * self.variances + sigma ** 2
        comp = self.means + (alpha * self.variances / s2) * (zk - alpha * self.means)
        r = self.responsibilities(z, alpha, sigma, cond)
        r = r.reshape(r.shape + (1,) * ev)
        return np.sum(r * comp, axis=-ev - 1)

    def __call__(self, z_i, cond, i):
        a, s = self.schedule.alphas[i], self.schedule.sigmas[i]
        z_i = np.asarray(z_i, dtype=np.float64)
        if s == 0:
            return np.zeros_like(z_i)
        return (z_i - a * self.posterior_mean(z_i, a, s, cond)) / s


def oracle_gaussian_denoiser(mu, var, schedule=None):
    return GaussianOracleDenoiser(mu, var, schedule or make_schedule())


def oracle_mixture_denoiser(means, variances, weights=None, weight_fn=None, schedule=None):
    return MixtureOracleDenoiser(means, variances, schedule or make_schedule(), weights, weight_fn)


def gaussian_sampler_moments(mu, var, schedule, inference_steps=None, init_mean=0.0, init_var=1.0):
    """Mean and variance of the DDIM output under the Gaussian oracle (each step is affine in z)."""
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    m = np.broadcast_to(np.asarray(init_mean, dtype=np.float64), mu.shape).copy()
    v = np.broadcast_to(np.asarray(init_var, dtype=np.float64), mu.shape).copy()
    for gain, const in _ddim_affine_steps(mu, var, schedule, inference_steps):
        m = gain * m + const
        v = gain ** 2 * v
    return m, v


def gaussian_ddim_trajectory(z_init, mu, var, schedule, inference_steps=None):
    """Analytic reverse mean recursion for one starting latent; same layout as sample_trajectory."""
    z = np.asarray(z_init, dtype=np.float64)
    out = [z]
    for gain, const in _ddim_affine_steps(np.asarray(mu, float), np.asarray(var, float), schedule, inference_steps):
        z = gain * z + const
        out.append(z)
    return out


def _ddim_affine_steps(mu, var, schedule, inference_steps):
    idx = schedule.indices(inference_steps)
    a, s = schedule.alphas, schedule.sigmas
    for n, i in enumerate(idx):
        if s[i] > 0:
            g = a[i] * var / (a[i] ** 2 * var + s[i] ** 2)
            x_gain, x_const = g, mu * (1 - a[i] * g)
            e_gain, e_const = (1 - a[i] * g) / s[i], -a[i] * x_const / s[i]
        else:
            x_gain, x_const = 1.0 / a[i], np.zeros_like(mu)
            e_gain, e_const = 0.0, np.zeros_like(mu)
        if n == len(idx) - 1:
            yield x_gain, x_const
        else:
            j = idx[n + 1]
            yield a[j] * x_gain + s[j] * e_gain, a[j] * x_const + s[j] * e_const


# -------------------------------------------------------------------
# Two-layer network
# -------------------------------------------------------------------
@dataclass
class MLPParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def arrays(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self):
        return MLPParams(**{k: v.copy() for k, v in self.arrays().items()})

    @property
    def hidden(self):
        return self.w1.shape[1]


def init_mlp(d_in, hidden, d_out, seed=0, zero=False):
    if zero:
        return MLPParams(np.zeros((d_in, hidden)), np.zeros(hidden), np.zeros((hidden, d_out)), np.zeros(d_out))
    rng = make_rng(seed)
    return MLPParams(
        rng.standard_normal((d_in, hidden)) / np.sqrt(d_in),
        np.zeros(hidden),
        rng.standard_normal((hidden, d_out)) / np.sqrt(hidden) * 0.1,
        np.zeros(d_out),
    )


def mlp_forward(params, x):
    h = np.tanh(x @ params.w1 + params.b1)
    return h @ params.w2 + params.b2, (x, h)


def mlp_backward(params, cache, d_out):
    x, h = cache
    d_pre = (d_out @ params.w2.T) * (1.0 - h ** 2)
    return MLPParams(x.T @ d_pre, d_pre.sum(axis=0), h.T @ d_out, d_out.sum(axis=0))


def time_embedding(i, dim):
    """Sinusoidal embedding of diffusion indices, shape (*i.shape, dim)."""
    i = np.asarray(i, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = i[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class MLPDenoiser:
    """Two-layer tanh network over [z_i | G_context | G_live | emb(i)].

    pointwise=False flattens the whole latent into one input row per sample;
    pointwise=True applies the same weights at every latent pixel. With
    noise_input=False the network ignores z_i and i (the deterministic decoder).
    """

    params: MLPParams
    latent_shape: tuple
    context_channels: int
    live_channels: int
    embed_dim: int = 16
    pointwise: bool = False
    noise_input: bool = True
    schedule: Optional[DiffusionSchedule] = field(default=None, repr=False)

    @classmethod
    def create(cls, latent_shape, context_channels, live_channels, hidden=64, embed_dim=16,
               pointwise=False, noise_input=True, schedule=None, seed=0, zero=False):
        latent_shape = tuple(int(x) for x in latent_shape)
        h, w, c = latent_shape
        per_pixel = context_channels + live_channels + ((c + embed_dim) if noise_input else 0)
        if pointwise:
            d_in, d_out = per_pixel, c
        else:
            d_in = h * w * (context_channels + live_channels + (c if noise_input else 0)) + (embed_dim if noise_input else 0)
            d_out = h * w * c
        params = init_mlp(d_in, hidden, d_out, seed, zero)
        return cls(params, latent_shape, context_channels, live_channels, embed_dim, pointwise, noise_input, schedule)

    # inputs ---------------------------------------------------------
    def _inputs(self, z_i, cond, i):
        lat_nd = len(self.latent_shape)
        ctx = np.asarray(cond.context, dtype=np.float64)
        live = np.asarray(cond.live, dtype=np.float64)
        ref = z_i if self.noise_input else ctx
        batched = np.ndim(ref) == lat_nd + 1
        B = ref.shape[0] if batched else 1
        h, w, c = self.latent_shape
        ctx = np.broadcast_to(ctx, (B, h, w, self.context_channels))
        live = np.broadcast_to(live, (B, h, w, self.live_channels))
        parts = [ctx, live]
        if self.noise_input:
            z = np.asarray(z_i, dtype=np.float64).reshape(B, h, w, c)
            emb = np.broadcast_to(time_embedding(np.broadcast_to(np.asarray(i), (B,)), self.embed_dim), (B, self.embed_dim))
            parts = [z] + parts
        if self.pointwise:
            if self.noise_input:
                parts.append(np.broadcast_to(emb[:, None, None, :], (B, h, w, self.embed_dim)))
            x = np.concatenate(parts, axis=-1).reshape(B * h * w, -1)
        else:
            flat = [p.reshape(B, -1) for p in parts]
            if self.noise_input:
                flat.append(emb)
            x = np.concatenate(flat, axis=1)
        return x, B, batched

    def _shape_out(self, out, B, batched):
        out = out.reshape((B,) + self.latent_shape)
        return out if batched else out[0]

    # forward / backward ---------------------------------------------
    def forward(self, z_i, cond, i):
        x, B, batched = self._inputs(z_i, cond, i)
        out, cache = mlp_forward(self.params, x)
        return self._shape_out(out, B, batched), cache

    def backward(self, cache, pred, target):
        """Loss mean((pred - target)^2) and its exact gradients w.r.t. params."""
        target = np.asarray(target, dtype=np.float64)
        if pred.shape != target.shape:
            raise ConfigError(f"Prediction {pred.shape} does not match target {target.shape}")
        diff = pred - target
        loss = float(np.mean(diff ** 2))
        d_out = (2.0 / diff.size) * diff.reshape(cache[1].shape[0], -1)
        return loss, mlp_backward(self.params, cache, d_out)

    def __call__(self, z_i, cond, i):
        return self.forward(z_i, cond, i)[0]

    # persistence ----------------------------------------------------
    def meta(self):
        return {
            "kind": "mlp_denoiser" if self.noise_input else "mlp_decoder",
            "latent_shape": list(self.latent_shape),
            "context_channels": self.context_channels,
            "live_channels": self.live_channels,
            "embed_dim": self.embed_dim,
            "pointwise": self.pointwise,
            "noise_input": self.noise_input,
        }


def mlp_denoiser_forward(denoiser, z_i, cond, i):
    return denoiser.forward(z_i, cond, i)


def mlp_denoiser_backward(denoiser, cache, eps_hat, eps):
    return denoiser.backward(cache, eps_hat, eps)


def deterministic_decode(cond, decoder):
    """Single forward map from conditioning to a latent (no noise input)."""
    if decoder.noise_input:
        raise ConfigError("deterministic_decode needs a decoder built with noise_input=False")
    out = decoder(None, cond, None)
    if out.ndim == len(decoder.latent_shape):
        h, w = out.shape[:2]
        return Latent(out, (h * DOWNSCALE, w * DOWNSCALE))
    return out


def save_model(path, model, schedule_meta=None):
    meta = {**model.meta(), **(schedule_meta or {})}
    write_bundle(path, model.params.arrays(), meta)


def load_model(path, schedule=None):
    tensors, meta = read_bundle(path)
    try:
        params = MLPParams(*(tensors[k].astype(np.float64) for k in ("w1", "b1", "w2", "b2")))
        return MLPDenoiser(params, tuple(meta["latent_shape"]), int(meta["context_channels"]),
                           int(meta["live_channels"]), int(meta["embed_dim"]), bool(meta["pointwise"]),
                           bool(meta["noise_input"]), schedule)
    except KeyError as e:
        raise DataError(f"Model bundle {path} is missing {e}") from e


def sample_saved(params_path, cond, seed, inference_steps=10, sampler="ddim", defaults=None):
    """Sample from a saved parameter bundle; its schedule comes from the bundle meta, else `defaults`."""
    defaults = defaults or {}
    _, meta = read_bundle(params_path)
    schedule = make_schedule(int(meta.get("steps_train", defaults.get("steps_train", 1000))),
                             float(meta.get("beta_start", defaults.get("beta_start", 1e-4))),
                             float(meta.get("beta_end", defaults.get("beta_end", 0.02))), inference_steps)
    model = load_model(params_path, schedule)
    if model.pointwise:
        model = replace(model, latent_shape=tuple(cond.spatial_shape) + (model.latent_shape[-1],))
    return sample(model, cond, schedule, seed, model.latent_shape, inference_steps, sampler)
