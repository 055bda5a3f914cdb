"""Forward noising process, denoiser training, and DDPM/DDIM reverse steps.

Schedule math runs in float64 and preserves the caller's array dtype, so
float64 compositions (e.g. noising followed by the algebraic inversion)
stay exact while model I/O remains float32.

Index convention: alpha_bar has T+1 entries with alpha_bar[0] = 1 and
timesteps t in {1..T}; a reverse step may target t_prev = 0.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ArgumentError
from .nn import Adam, conv_param, linear_param, sinusoidal_embedding, zero_grads, zeros_param
from .seeds import rng_for


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray  # (T,) float64, beta[i] is for timestep i+1
    alpha: np.ndarray  # (T,)
    alpha_bar: np.ndarray  # (T+1,), alpha_bar[0] == 1

    def beta_at(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ArgumentError(f"timestep out of range 1..{self.T}")
        return self.beta[t - 1]

    def alpha_at(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ArgumentError(f"timestep out of range 1..{self.T}")
        return self.alpha[t - 1]

    def alpha_bar_at(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ArgumentError(f"timestep out of range 0..{self.T}")
        return self.alpha_bar[t]


def make_schedule(T: int, beta_min=1e-4, beta_max=0.02) -> NoiseSchedule:
    """Linear variance schedule; betas strictly inside (0, 1)."""
    if T < 1:
        raise ArgumentError("T must be >= 1")
    if not (0 < beta_min <= beta_max < 1):
        raise ArgumentError(f"require 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _bcast(coef, x):
    """Reshape a per-sample coefficient vector for broadcasting against x."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    if coef.shape[0] != x.shape[0]:
        raise ArgumentError("per-sample timestep count must match leading dimension")
    return coef.reshape((x.shape[0],) + (1,) * (x.ndim - 1))


def _out_dtype(*arrays):
    return np.float64 if any(a.dtype == np.float64 for a in arrays) else np.float32


def q_step(x_prev, t, noise, schedule: NoiseSchedule):
    """One forward kernel: sqrt(1-beta_t) x_prev + sqrt(beta_t) noise."""
    x_prev = np.asarray(x_prev)
    noise = np.asarray(noise)
    if x_prev.shape != noise.shape:
        raise ArgumentError(f"shape mismatch {x_prev.shape} vs {noise.shape}")
    b = _bcast(schedule.beta_at(t), x_prev)
    out = np.sqrt(1.0 - b) * x_prev.astype(np.float64) + np.sqrt(b) * noise.astype(np.float64)
    return out.astype(_out_dtype(x_prev, noise))


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Closed-form marginal: sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    t = 0 is the identity endpoint (abar_0 = 1), returning x0 exactly.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ArgumentError(f"shape mismatch {x0.shape} vs {eps.shape}")
    ab = _bcast(schedule.alpha_bar_at(t), x0)
    out = np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * eps.astype(np.float64)
    return out.astype(_out_dtype(x0, eps))


def estimate_x0(x_t, t, eps_pred, schedule: NoiseSchedule, clamp=False):
    """Posterior-expectation estimate of the clean sample from x_t and eps."""
    x_t = np.asarray(x_t)
    eps_pred = np.asarray(eps_pred)
    if x_t.shape != eps_pred.shape:
        raise ArgumentError(f"shape mismatch {x_t.shape} vs {eps_pred.shape}")
    if np.any(np.asarray(t) < 1):
        raise ArgumentError("estimate_x0 requires t >= 1")
    ab = _bcast(schedule.alpha_bar_at(t), x_t)
    out = (x_t.astype(np.float64) - np.sqrt(1.0 - ab) * eps_pred.astype(np.float64)) / np.sqrt(ab)
    if clamp:
        out = np.clip(out, -1.0, 1.0)
    return out.astype(_out_dtype(x_t, eps_pred))


@dataclass(frozen=True)
class StepPair:
    t: int
    t_prev: int

    def __post_init__(self):
        if not (0 <= self.t_prev < self.t):
            raise ArgumentError(f"invalid step pair ({self.t}, {self.t_prev})")


def ddim_step(x_t, pair: StepPair, eps_hat, schedule: NoiseSchedule, clamp=True):
    """Deterministic reverse step; the same eps_hat feeds the clean-sample
    estimate and the direction term.

    With clamping on, the noise estimate is recomputed from the clipped
    clean-sample estimate, so x0_hat == estimate_x0(x_t, t, eps_used) still
    holds exactly and off-manifold predictions cannot blow up the
    trajectory.
    """
    if pair.t > schedule.T:
        raise ArgumentError(f"step pair exceeds horizon T={schedule.T}")
    x0_hat = estimate_x0(x_t, pair.t, eps_hat, schedule, clamp=clamp).astype(np.float64)
    ab = float(schedule.alpha_bar_at(pair.t))
    ab_prev = float(schedule.alpha_bar_at(pair.t_prev))
    if clamp:
        eps_used = (np.asarray(x_t, dtype=np.float64) - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
    else:
        eps_used = np.asarray(eps_hat, dtype=np.float64)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_used
    return out.astype(_out_dtype(np.asarray(x_t), np.asarray(eps_hat)))


def ddim_timesteps(T: int, steps: int):
    """Uniform-stride step pairs from T down to 0."""
    if not (1 <= steps <= T):
        raise ArgumentError(f"steps must be in 1..{T}")
    ts = [int(round(T - i * T / steps)) for i in range(steps)]
    ts = sorted(set(t for t in ts if t >= 1), reverse=True)
    pairs = [StepPair(a, b) for a, b in zip(ts, ts[1:] + [0])]
    return pairs


def ddpm_step(x_t, t, eps_pred, schedule: NoiseSchedule, noise):
    """Ancestral step with the fixed beta_t variance; noise is suppressed at t=1."""
    x_t = np.asarray(x_t)
    eps_pred = np.asarray(eps_pred)
    noise = np.asarray(noise)
    if x_t.shape != eps_pred.shape or x_t.shape != noise.shape:
        raise ArgumentError("ddpm_step: shape mismatch")
    t = int(t)
    beta = float(schedule.beta_at(t))
    alpha = float(schedule.alpha_at(t))
    ab = float(schedule.alpha_bar_at(t))
    mu = (x_t.astype(np.float64) - beta / np.sqrt(1.0 - ab) * eps_pred.astype(np.float64)) / np.sqrt(alpha)
    sigma = 0.0 if t == 1 else np.sqrt(beta)
    out = mu + sigma * noise.astype(np.float64)
    return out.astype(_out_dtype(x_t, eps_pred, noise))


def ddpm_mu_posterior(x_t, t, eps_pred, schedule: NoiseSchedule):
    """Equivalent mean via the x0-posterior form; kept as an algebra oracle."""
    t = int(t)
    ab = float(schedule.alpha_bar_at(t))
    ab_prev = float(schedule.alpha_bar_at(t - 1))
    beta = float(schedule.beta_at(t))
    alpha = float(schedule.alpha_at(t))
    x0h = estimate_x0(x_t, t, eps_pred, schedule).astype(np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    return (np.sqrt(ab_prev) * beta * x0h + np.sqrt(alpha) * (1.0 - ab_prev) * x_t) / (1.0 - ab)


# ---------------------------------------------------------------------------
# denoiser


@dataclass
class DenoiserConfig:
    channels: int = 40
    temb_dim: int = 32
    thid: int = 48
    steps: int = 6000
    batch: int = 48
    lr: float = 2e-3


class DenoiserModel:
    """Small conv net eps(x, t) with sinusoidal time conditioning and one
    output head per category.

    Blocks: 5x5 conv at full resolution, two 3x3 convs at half resolution,
    then a 3x3 head back at full resolution over the upsampled features
    plus a skip from block 1, so the receptive field covers the image.
    """

    ARCH = "denoiser-conv4"

    def __init__(self, n_categories, channels=40, temb_dim=32, thid=48, params=None, rng=None):
        self.n_categories = n_categories
        self.channels = channels
        self.temb_dim = temb_dim
        self.thid = thid
        self.loss_history = []
        if params is not None:
            self.params = params
            return
        C = channels
        p = {}
        p["tw"] = linear_param(rng, temb_dim, thid)
        p["tb"] = zeros_param((thid,))
        p["c1w"] = conv_param(rng, C, 3, 5)
        p["c1b"] = zeros_param((C,))
        p["c2w"] = conv_param(rng, C, C, 3)
        p["c2b"] = zeros_param((C,))
        p["c3w"] = conv_param(rng, C, C, 3)
        p["c3b"] = zeros_param((C,))
        for i in range(3):
            p[f"t{i + 1}w"] = linear_param(rng, thid, C)
            p[f"t{i + 1}b"] = zeros_param((C,))
        for c in range(n_categories):
            p[f"h{c}w"] = conv_param(rng, 3, C, 3)
            p[f"h{c}b"] = zeros_param((3,))
        self.params = p

    def forward(self, x: ad.Tensor, t_ints, category: int) -> ad.Tensor:
        p = self.params
        tf = ad.Tensor(sinusoidal_embedding(t_ints, self.temb_dim))
        th = ad.relu(ad.affine(tf, p["tw"], p["tb"]))
        h1 = ad.conv2d(x, p["c1w"], p["c1b"])
        h1 = ad.relu(ad.add_chan(h1, ad.affine(th, p["t1w"], p["t1b"])))
        h = ad.avgpool2(h1)
        h = ad.conv2d(h, p["c2w"], p["c2b"])
        h = ad.relu(ad.add_chan(h, ad.affine(th, p["t2w"], p["t2b"])))
        h = ad.conv2d(h, p["c3w"], p["c3b"])
        h = ad.relu(ad.add_chan(h, ad.affine(th, p["t3w"], p["t3b"])))
        h = ad.add(ad.upsample2(h), h1)
        return ad.conv2d(h, p[f"h{category}w"], p[f"h{category}b"])

    def predict(self, x: np.ndarray, t, category: int) -> np.ndarray:
        """No-grad noise prediction on a float array batch."""
        x32 = np.asarray(x, dtype=np.float32)
        if x32.ndim != 4:
            raise ArgumentError("predict expects a (B,3,H,W) batch")
        t_arr = np.full(x32.shape[0], int(t)) if np.isscalar(t) else np.asarray(t)
        return self.forward(ad.Tensor(x32), t_arr, category).data

    def finalize(self):
        self.params = {k: v.detach() for k, v in self.params.items()}
        return self

    def tensors(self):
        return {k: v.data for k, v in self.params.items()}

    def meta(self):
        return {
            "n_categories": self.n_categories,
            "channels": self.channels,
            "temb_dim": self.temb_dim,
            "thid": self.thid,
        }

    @classmethod
    def from_checkpoint_payload(cls, meta, tensors):
        params = {k: ad.Tensor(v) for k, v in tensors.items()}
        return cls(
            n_categories=meta["n_categories"],
            channels=meta["channels"],
            temb_dim=meta["temb_dim"],
            thid=meta["thid"],
            params=params,
        )


def eps_loss(model: DenoiserModel, x_t, t_arr, eps, category) -> ad.Tensor:
    """Per-element mean squared error between true and predicted noise."""
    pred = model.forward(ad.Tensor(np.asarray(x_t, dtype=np.float32)), t_arr, category)
    d = ad.sub(pred, ad.Tensor(np.asarray(eps, dtype=np.float32)))
    return ad.mean_all(ad.mul(d, d))


def train_denoiser(dataset, schedule: NoiseSchedule, config: DenoiserConfig, seed: int):
    """Noise-prediction training; batches cycle categories so each head
    trains on its own class while the trunk sees everything."""
    if dataset.train_x.shape[0] == 0:
        raise ArgumentError("empty dataset")
    n_cats = len(dataset.categories)
    rng = rng_for(seed, "train-ddpm")
    model = DenoiserModel(
        n_categories=n_cats,
        channels=config.channels,
        temb_dim=config.temb_dim,
        thid=config.thid,
        rng=rng,
    )
    by_class = [dataset.images_of(c.id, "train") for c in dataset.categories]
    opt = Adam(list(model.params.values()), lr=config.lr)
    plist = list(model.params.values())
    for step in range(config.steps):
        cat = step % n_cats
        pool = by_class[cat]
        idx = rng.integers(0, pool.shape[0], size=config.batch)
        x0 = pool[idx]
        t_arr = rng.integers(1, schedule.T + 1, size=config.batch)
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        x_t = q_sample(x0, t_arr, eps, schedule)
        loss = eps_loss(model, x_t, t_arr, eps, cat)
        zero_grads(plist)
        ad.backward(loss)
        opt.step()
        model.loss_history.append(float(loss.data))
    model.finalize()
    return model


def validation_eps_loss(model: DenoiserModel, dataset, schedule: NoiseSchedule, seed: int,
                        n_per_class=32) -> float:
    """Held-out Eq-5-style loss; the zero-prediction baseline is 1.0."""
    rng = rng_for(seed, "ddpm-val")
    total, count = 0.0, 0
    for cat in dataset.categories:
        pool = dataset.images_of(cat.id, "test")
        take = min(n_per_class, pool.shape[0])
        x0 = pool[:take]
        t_arr = rng.integers(1, schedule.T + 1, size=take)
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        x_t = q_sample(x0, t_arr, eps, schedule)
        pred = model.predict(x_t, t_arr, cat.id)
        total += float(((pred - eps) ** 2).mean()) * take
        count += take
    return total / count
