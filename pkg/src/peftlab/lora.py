"""Low-rank adapters around frozen linear projections.

An adapted projection computes ``W0 x + (alpha / r) B (A x)`` where ``W0`` is
the frozen base weight (d x k), ``A`` is r x k and ``B`` is d x r. ``B``
starts at zero, so a freshly injected adapter leaves the layer unchanged.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Linear, Module, MultiHeadAttention
from .tensor import Parameter

DEFAULT_TARGETS = ("query", "key", "value", "output")


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float | None = None
    target_projections: tuple = DEFAULT_TARGETS
    init_std: float = 0.01

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.alpha is None:
            self.alpha = float(self.rank)
        if self.alpha <= 0:
            raise ConfigError(f"LoRA alpha must be positive, got {self.alpha}")
        self.target_projections = tuple(self.target_projections)
        unknown = set(self.target_projections) - set(MultiHeadAttention.projection_names)
        if unknown:
            raise ConfigError(f"unknown projection name(s): {sorted(unknown)}")

    @property
    def scaling(self):
        return self.alpha / self.rank


class LoraLinear(Module):
    def __init__(self, base: Linear, rank, alpha, rng, init_std=0.01):
        d, k = base.out_features, base.in_features
        if not 1 <= rank <= min(d, k):
            raise ConfigError(f"rank {rank} outside [1, min(d, k)={min(d, k)}] for a {d}x{k} matrix")
        base.freeze()
        self.base = base
        self.lora_a = Parameter(rng.normal(0.0, init_std, size=(rank, k)))
        self.lora_b = Parameter(np.zeros((d, rank)))
        self.rank = rank
        self.alpha = float(alpha)
        self.in_features = k
        self.out_features = d

    @property
    def scaling(self):
        return self.alpha / self.rank

    def delta(self):
        return self.scaling * (self.lora_b.data @ self.lora_a.data)

    def merge(self):
        """Dense ``W0 + (alpha/r) B A``."""
        return self.base.weight.data + self.delta()

    def forward(self, x):
        base = self.base(x)
        low = T.matmul(T.matmul(x, self.lora_a.transpose()), self.lora_b.transpose())
        return base + low * self.scaling

    def merged_linear(self):
        """A plain frozen :class:`Linear` carrying the merged weight."""
        out = Linear.__new__(Linear)
        out.weight = Parameter(self.merge(), frozen=True)
        bias = self.base.bias
        out.bias = None if bias is None else Parameter(bias.data.copy(), frozen=True)
        out.in_features, out.out_features = self.in_features, self.out_features
        return out


def merge(adapter: LoraLinear):
    return adapter.merge()


def inject(model: Module, cfg: LoraConfig, rng, freeze_base=True):
    """Wrap the configured projections of every attention block in ``model``.

    When ``freeze_base`` is set, every pre-existing parameter is frozen first,
    so afterwards only the adapter factors are trainable. Returns the adapters
    keyed by their module path.
    """
    attn_blocks = [(path, m) for path, m in model.named_modules() if isinstance(m, MultiHeadAttention)]
    if not attn_blocks:
        raise ConfigError("model has no attention projections to adapt")
    if freeze_base:
        model.freeze()
    adapters = {}
    for path, block in attn_blocks:
        for proj in cfg.target_projections:
            attr = MultiHeadAttention.projection_names[proj]
            current = getattr(block, attr, None)
            if isinstance(current, LoraLinear):
                raise ConfigError(f"{path}.{attr} is already adapted")
            if not isinstance(current, Linear):
                raise ConfigError(f"{path} has no {proj} projection")
            adapter = LoraLinear(current, cfg.rank, cfg.alpha, rng, cfg.init_std)
            setattr(block, attr, adapter)
            adapters[f"{path}.{attr}" if path else attr] = adapter
    list(model.named_parameters())  # refreshes Parameter.name paths
    return adapters


def adapters_of(model: Module):
    return {path: m for path, m in model.named_modules() if isinstance(m, LoraLinear)}


def merge_all(model: Module):
    """Replace every adapter in ``model`` by a merged dense projection."""
    for path, block in list(model.named_modules()):
        if not isinstance(block, MultiHeadAttention):
            continue
        for attr in MultiHeadAttention.projection_names.values():
            layer = getattr(block, attr)
            if isinstance(layer, LoraLinear):
                setattr(block, attr, layer.merged_linear())
    return model


class ParamCount(NamedTuple):
    full: int
    lora: int
    reduction: float

    @property
    def flagged(self):
        """True when the adapter is no smaller than the dense update."""
        return self.lora >= self.full


def param_count(d, k, r):
    full = d * k
    lora = r * (d + k)
    return ParamCount(full, lora, 1.0 - lora / full)


def expected_trainable(adapters):
    return sum(a.rank * (a.in_features + a.out_features) for a in adapters.values())


@dataclass
class RankSweepRow:
    rank: int
    trainable: int
    full: int
    reduction: float
    final_loss: float = field(default=float("nan"))
