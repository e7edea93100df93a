"""AdamW with decoupled weight decay, warmup-cosine schedule, gradient accumulation."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError


@dataclass
class AdamWConfig:
    learning_rate: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float | None = None

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")

    @classmethod
    def for_lora(cls, **overrides):
        return cls(**{"learning_rate": 1e-4, **overrides})


@dataclass
class ScheduleConfig:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps} / {self.total_steps}"
            )


def cosine_lr(step, cfg: ScheduleConfig):
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``min_lr``."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(params, grads, state, cfg: AdamWConfig, lr):
    """One in-place AdamW update.

    ``params`` and ``grads`` are parallel lists of ndarrays, ``state`` holds
    ``step`` plus per-parameter ``m``/``v`` lists (created on first use).
    ``names`` in ``state`` is optional and only used for error messages.
    """
    names = state.get("names") or [f"param[{i}]" for i in range(len(params))]
    for name, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["step"] = 0
    state["step"] += 1
    t = state["step"]
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p -= lr * cfg.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


class AdamW:
    """Stateful optimizer over a module's trainable parameters.

    Frozen parameters are filtered out at construction and re-checked at
    every step, so freezing after construction is still honored.
    """

    def __init__(self, params, cfg: AdamWConfig, schedule: ScheduleConfig | None = None):
        self.params = [p for p in params if p.trainable]
        self.cfg = cfg
        self.schedule = schedule
        self.state = {"names": [p.name for p in self.params]}
        self.step_count = 0

    @property
    def lr(self):
        if self.schedule is None:
            return self.cfg.learning_rate
        return cosine_lr(min(self.step_count, self.schedule.total_steps), self.schedule)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        live = [p for p in self.params if p.trainable]
        if len(live) != len(self.params):
            raise ContractError("a parameter was frozen after the optimizer was built")
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in live]
        if self.cfg.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.cfg.grad_clip:
                grads = [g * (self.cfg.grad_clip / norm) for g in grads]
        lr = self.lr
        adamw_step([p.data for p in live], grads, self.state, self.cfg, lr)
        self.step_count += 1
        return lr

    def state_arrays(self):
        """Flat name -> array view of the moment buffers, for checkpoints."""
        out = {}
        if "m" in self.state:
            for p, m, v in zip(self.params, self.state["m"], self.state["v"]):
                out[f"m/{p.name}"] = m
                out[f"v/{p.name}"] = v
        return out

    def meta(self):
        return {"step_count": self.step_count, "adam_step": self.state.get("step", 0)}

    def load(self, arrays, meta):
        self.step_count = int(meta["step_count"])
        if meta["adam_step"]:
            self.state["m"] = [np.array(arrays[f"m/{p.name}"]) for p in self.params]
            self.state["v"] = [np.array(arrays[f"v/{p.name}"]) for p in self.params]
            self.state["step"] = int(meta["adam_step"])


class Accumulator:
    """Apply the optimizer once per window of ``steps`` micro-batches.

    Each micro-batch loss is back-propagated scaled by its item count; on
    apply the summed gradients are divided by the window's total count. For
    mean-reduced losses this reproduces the gradient of one large batch.
    """

    def __init__(self, optimizer: AdamW, steps=1):
        if steps < 1:
            raise ConfigError(f"accumulation steps must be >= 1, got {steps}")
        self.optimizer = optimizer
        self.steps = steps
        self._pending = 0
        self._weight = 0.0

    def backward(self, loss, n_items=1):
        (loss * float(n_items)).backward()
        self._pending += 1
        self._weight += n_items
        if self._pending == self.steps:
            return self.apply()
        return None

    def apply(self):
        if self._pending == 0:
            return None
        inv = 1.0 / self._weight
        for p in self.optimizer.params:
            if p.grad is not None:
                p.grad *= inv
        lr = self.optimizer.step()
        self.optimizer.zero_grad()
        self._pending = 0
        self._weight = 0.0
        return lr


def accumulate(micro_batch_losses, accumulation_steps, optimizer, sizes=None):
    """Run a sequence of loss thunks through an :class:`Accumulator`.

    ``micro_batch_losses`` yields callables returning a scalar loss; a
    trailing partial window is applied at the end.
    """
    acc = Accumulator(optimizer, accumulation_steps)
    sizes = sizes or [1] * len(micro_batch_losses)
    for make_loss, n in zip(micro_batch_losses, sizes):
        acc.backward(make_loss(), n)
    acc.apply()
    return acc
