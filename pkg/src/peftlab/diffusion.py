"""Small prompt-conditioned DDPM over an 8x8x3 latent grid.

The latent is a fixed linear function of the image (4x4 average pooling
mapped to [-1, 1]); decoding upsamples and clamps back to [0, 1]. The noise
predictor is a stack of attention/feed-forward residual blocks over the 64
latent positions, conditioned additively on timestep and prompt embeddings.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, InputError
from .lora import LoraConfig, inject
from .metrics import FeatureExtractor, GenReport, gen_report
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, sinusoidal_embedding
from .optim import Accumulator, AdamW, AdamWConfig, ScheduleConfig
from .tensor import Parameter, Tensor, no_grad
from .text import PromptEmbedder


@dataclass
class DiffusionConfig:
    timesteps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    latent_size: int = 8
    latent_channels: int = 3
    cond_dim: int = 32
    hidden: int = 32
    n_heads: int = 4
    n_blocks: int = 3

    def __post_init__(self):
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ConfigError(f"need 0 < beta_start < beta_end < 1, got {self.beta_start}, {self.beta_end}")
        if self.timesteps < 2:
            raise ConfigError("timesteps must be >= 2")

    @property
    def latent_shape(self):
        return (self.latent_size, self.latent_size, self.latent_channels)


class NoiseSchedule:
    def __init__(self, cfg: DiffusionConfig):
        self.timesteps = cfg.timesteps
        self.betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.timesteps)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def check(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.timesteps):
            raise ContractError(f"timestep outside [0, {self.timesteps})")
        return t


def q_sample(schedule: NoiseSchedule, x0, t, noise):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise, broadcasting a per-sample ``t``."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ContractError(f"noise shape {noise.shape} differs from x0 shape {x0.shape}")
    t = schedule.check(t)
    ab = schedule.alpha_bars[t]
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


# -- latent <-> image ------------------------------------------------------------


def encode_images(images, latent_size=8):
    """Average-pool to ``latent_size`` and map [0, 1] -> [-1, 1]."""
    x = np.asarray(images, dtype=np.float64)
    b, h, w, c = x.shape
    f = h // latent_size
    pooled = x.reshape(b, latent_size, f, latent_size, f, c).mean(axis=(2, 4))
    return 2.0 * pooled - 1.0


def decode_latents(latents, image_size=32):
    z = np.asarray(latents, dtype=np.float64)
    f = image_size // z.shape[1]
    up = np.repeat(np.repeat(z, f, axis=1), f, axis=2)
    return np.clip((up + 1.0) / 2.0, 0.0, 1.0)


# -- network -------------------------------------------------------------------


class DenoiseBlock(Module):
    def __init__(self, d, heads, rng):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, 2 * d, rng)

    def forward(self, x, cond):
        x = x + cond
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))


class NoisePredictor(Module):
    def __init__(self, cfg: DiffusionConfig, seed=0):
        rng = np.random.default_rng(seed)
        d = cfg.hidden
        n = cfg.latent_size**2
        self.cfg = cfg
        self.in_proj = Linear(cfg.latent_channels, d, rng)
        self.pos = Parameter(rng.normal(0.0, 0.1, size=(n, d)))
        self.time_proj = Linear(d, d, rng)
        self.cond_proj = Linear(cfg.cond_dim, d, rng)
        self.blocks = [DenoiseBlock(d, cfg.n_heads, rng) for _ in range(cfg.n_blocks)]
        self.ln_f = LayerNorm(d)
        self.out = Linear(d, cfg.latent_channels, rng)
        list(self.named_parameters())  # assigns parameter paths

    def forward(self, x_t, t, cond):
        """x_t: (B, S, S, C) array; t: (B,) ints; cond: (B, cond_dim) array."""
        b = x_t.shape[0]
        c = self.cfg.latent_channels
        tokens = Tensor(np.asarray(x_t).reshape(b, -1, c))
        temb = T.gelu(self.time_proj(Tensor(sinusoidal_embedding(t, self.cfg.hidden))))
        cemb = self.cond_proj(Tensor(cond))
        cond_vec = (temb + cemb).reshape(b, 1, self.cfg.hidden)
        h = self.in_proj(tokens) + self.pos
        for block in self.blocks:
            h = block(h, cond_vec)
        return self.out(self.ln_f(h)).reshape(np.shape(x_t))


class DiffusionModel:
    """Noise predictor, schedule and prompt embedder bundled together."""

    def __init__(self, cfg: DiffusionConfig, seed=0, image_size=32):
        self.cfg = cfg
        self.seed = seed
        self.image_size = image_size
        self.schedule = NoiseSchedule(cfg)
        self.net = NoisePredictor(cfg, seed)
        self.embedder = PromptEmbedder(cfg.cond_dim, seed=seed)
        self.adapters = {}

    def predict(self, x_t, t, cond):
        return self.net(x_t, t, cond)

    def add_lora(self, lora_cfg: LoraConfig, seed=0):
        self.adapters = inject(self.net, lora_cfg, np.random.default_rng([seed, 7]))
        return self.adapters


def denoise_loss(model: DiffusionModel, x0, prompts, rng):
    """Epsilon-prediction MSE at uniformly drawn timesteps."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 3:
        x0 = x0[None]
        prompts = [prompts] if isinstance(prompts, str) else prompts
    b = len(x0)
    t = rng.integers(0, model.cfg.timesteps, size=b)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(model.schedule, x0, t, eps)
    cond = model.embedder.batch(prompts)
    pred = model.predict(x_t, t, cond)
    return T.mse(pred, Tensor(eps))


def probe_loss(model: DiffusionModel, latents, prompts, seed=0, draws=4):
    """Denoising loss on a fixed set of (t, noise) draws; comparable across checkpoints."""
    rng = np.random.default_rng([seed, 3])
    x0 = np.repeat(np.asarray(latents, dtype=np.float64), draws, axis=0)
    reps = [p for p in prompts for _ in range(draws)]
    t = rng.integers(0, model.cfg.timesteps, size=len(x0))
    eps = rng.standard_normal(x0.shape)
    with no_grad():
        pred = model.predict(q_sample(model.schedule, x0, t, eps), t, model.embedder.batch(reps))
    return float(np.mean((pred.data - eps) ** 2))


def pretrain_base(model: DiffusionModel, images, prompts, steps, lr=3e-3, batch_size=16, seed=0):
    """Full-parameter denoising training; stands in for shipping pretrained weights."""
    latents = encode_images(images, model.cfg.latent_size)
    rng = np.random.default_rng([seed, 5])
    opt = AdamW(model.net.trainable_parameters(), AdamWConfig(learning_rate=lr, weight_decay=0.0),
                ScheduleConfig(lr, min(100, steps - 1), steps))
    for _ in range(steps):
        idx = rng.choice(len(latents), size=min(batch_size, len(latents)), replace=False)
        loss = denoise_loss(model, latents[idx], [prompts[i] for i in idx], rng)
        loss.backward()
        opt.step()
        opt.zero_grad()
    return probe_loss(model, latents[:32], prompts[:32], seed)


def p_sample_loop(model: DiffusionModel, prompts, seed, noise_scale=1.0, clip_denoised=True,
                  return_latents=False):
    """Ancestral sampling from t = T-1 down to 0, one RNG stream per sample.

    Each step forms the predicted clean latent from the noise estimate,
    optionally clips it to [-1, 1], and takes the posterior mean of
    q(x_{t-1} | x_t, x0) plus ``noise_scale * sqrt(beta_t) * z``. Without
    clipping this equals the usual (x_t - beta_t / sqrt(1 - abar_t) eps) /
    sqrt(alpha_t) update. Sample ``i`` draws all of its noise from
    ``default_rng([seed, i])``, so it does not depend on batch composition.
    """
    single = isinstance(prompts, str)
    prompts = [prompts] if single else list(prompts)
    s = model.schedule
    shape = model.cfg.latent_shape
    b = len(prompts)
    rngs = [np.random.default_rng([seed, i]) for i in range(b)]
    x = np.stack([r.standard_normal(shape) for r in rngs])
    cond = model.embedder.batch(prompts)
    with no_grad():
        for t in range(s.timesteps - 1, -1, -1):
            eps = model.predict(x, np.full(b, t), cond).data
            ab = s.alpha_bars[t]
            ab_prev = s.alpha_bars[t - 1] if t > 0 else 1.0
            if clip_denoised:
                x0 = np.clip((x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), -1.0, 1.0)
                x = (s.betas[t] * np.sqrt(ab_prev) * x0 + (1.0 - ab_prev) * np.sqrt(s.alphas[t]) * x) / (1.0 - ab)
            else:
                x = (x - s.betas[t] / np.sqrt(1.0 - ab) * eps) / np.sqrt(s.alphas[t])
            if t > 0 and noise_scale:
                z = np.stack([r.standard_normal(shape) for r in rngs])
                x = x + noise_scale * np.sqrt(s.betas[t]) * z
    images = decode_latents(x, model.image_size)
    if single:
        return (images[0], x[0]) if return_latents else images[0]
    return (images, x) if return_latents else images


# -- training ------------------------------------------------------------------


@dataclass
class DiffusionTrainConfig:
    epochs: int = 10
    batch_size: int = 4
    accumulation_steps: int = 1
    optim: AdamWConfig = field(default_factory=lambda: AdamWConfig.for_lora(learning_rate=5e-3, weight_decay=0.0))
    warmup_steps: int = 20
    min_lr: float = 0.0
    shuffle_seed: int = 0
    repeats: int = 8
    eval_samples: int = 64
    eval_seed: int = 1234


@dataclass
class GenEpoch:
    epoch: int
    loss: float
    report: GenReport | None
    probe: float


def evaluate_generation(model, real_images, prompts, extractor, n_samples, seed):
    """Sample ``n_samples`` images for cycled prompts and score them against ``real_images``."""
    use = [prompts[i % len(prompts)] for i in range(n_samples)]
    gen = p_sample_loop(model, use, seed)
    return gen_report(gen, real_images, use, extractor), gen


def train_diffusion(model: DiffusionModel, images, prompts, lora_cfg, cfg: DiffusionTrainConfig, extractor=None,
                    on_epoch=None):
    """LoRA fine-tuning on (image, prompt) pairs with per-epoch generation metrics.

    Adapters are injected if the model has none yet, which freezes the base
    network. Returns the evaluation of the starting point (epoch 0, loss
    NaN) followed by one :class:`GenEpoch` per epoch. ``probe`` on each
    record is the fixed-draw denoising loss, comparable across epochs.
    With ``eval_samples = 0`` no images are sampled and ``report`` is None.
    """
    if not prompts:
        raise InputError("prompt set is empty")
    if len(prompts) != len(images):
        raise InputError(f"{len(images)} images but {len(prompts)} prompts")
    if not model.adapters:
        model.add_lora(lora_cfg, seed=model.seed)
    extractor = extractor or FeatureExtractor(seed=0)
    images = np.asarray(images, dtype=np.float64)
    latents = encode_images(images, model.cfg.latent_size)
    prompts = list(prompts)

    per_epoch = -(-len(latents) * cfg.repeats // (cfg.batch_size * cfg.accumulation_steps))
    total = max(per_epoch * cfg.epochs, 1)
    warmup = min(cfg.warmup_steps, total - 1)
    opt = AdamW(model.net.trainable_parameters(), cfg.optim,
                ScheduleConfig(cfg.optim.learning_rate, warmup, total, cfg.min_lr))
    acc = Accumulator(opt, cfg.accumulation_steps)

    def record(epoch, loss):
        report = None
        if cfg.eval_samples:
            report, _ = evaluate_generation(model, images, prompts, extractor, cfg.eval_samples, cfg.eval_seed)
        rec = GenEpoch(epoch, loss, report, probe_loss(model, latents, prompts, cfg.shuffle_seed))
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)

    history = []
    record(0, float("nan"))
    for epoch in range(1, cfg.epochs + 1):
        order_rng = np.random.default_rng([cfg.shuffle_seed, epoch])
        order = np.concatenate([order_rng.permutation(len(latents)) for _ in range(cfg.repeats)])
        total_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = denoise_loss(model, latents[idx], [prompts[i] for i in idx], order_rng)
            total_loss += loss.item() * len(idx)
            acc.backward(loss, len(idx))
        acc.apply()
        record(epoch, total_loss / len(order))
    return history
