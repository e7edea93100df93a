import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peftlab import tensor as T
from peftlab.errors import ConfigError
from peftlab.lora import LoraConfig, LoraLinear, adapters_of, expected_trainable, inject, merge, merge_all, param_count
from peftlab.nn import Linear, Module, MultiHeadAttention
from peftlab.optim import AdamW, AdamWConfig
from peftlab.tensor import Tensor


class TwoBlocks(Module):
    def __init__(self, rng, d=8):
        self.attn1 = MultiHeadAttention(d, 2, rng)
        self.attn2 = MultiHeadAttention(d, 2, rng)
        self.head = Linear(d, 3, rng)

    def forward(self, x):
        return self.head(self.attn2(self.attn1(x)))


def test_identity_at_init_every_projection(rng):
    base = Linear(6, 5, rng)
    x = Tensor(rng.normal(size=(4, 6)))
    before = base(x).data.copy()
    adapted = LoraLinear(base, 2, 2.0, rng)
    assert np.array_equal(adapted(x).data, before)

    model = TwoBlocks(rng)
    x = Tensor(rng.normal(size=(2, 3, 8)))
    ref = model(x).data.copy()
    adapters = inject(model, LoraConfig(rank=2), rng)
    assert len(adapters) == 8
    assert np.array_equal(model(x).data, ref)


@pytest.mark.parametrize("rank", [0, 6])
def test_rank_out_of_range(rng, rank):
    with pytest.raises(ConfigError):
        LoraLinear(Linear(6, 5, rng), rank, 1.0, rng)


def test_config_validation():
    with pytest.raises(ConfigError):
        LoraConfig(rank=0)
    with pytest.raises(ConfigError):
        LoraConfig(alpha=-1.0)
    with pytest.raises(ConfigError):
        LoraConfig(target_projections=("gate",))
    assert LoraConfig(rank=8).alpha == 8.0


def test_base_unchanged_after_step(rng):
    base = Linear(4, 4, rng)
    w0 = base.weight.data.tobytes()
    ad = LoraLinear(base, 2, 2.0, rng)
    opt = AdamW(ad.parameters(), AdamWConfig(learning_rate=0.1))
    assert {id(p) for p in opt.params} == {id(ad.lora_a), id(ad.lora_b)}
    (ad(Tensor(rng.normal(size=(3, 4)))) ** 2).sum().backward()
    opt.step()
    assert base.weight.data.tobytes() == w0
    assert np.any(ad.lora_b.data != 0)


def test_param_count_cases():
    assert param_count(64, 64, 4) == (4096, 512, 0.875)
    full, lora, red = param_count(768, 768, 4)
    assert (full, lora) == (589824, 6144)
    assert abs(red - (1 - 6144 / 589824)) < 1e-15 and red >= 0.899
    edge = param_count(16, 16, 16)
    assert edge.lora == 2 * 16 * 16 and edge.reduction < 0 and edge.flagged
    assert not param_count(16, 16, 4).flagged


def test_counted_trainables_match_formula(rng):
    model = TwoBlocks(rng)
    adapters = inject(model, LoraConfig(rank=3, target_projections=("query", "value")), rng)
    counted = sum(p.size for p in model.trainable_parameters())
    assert counted == expected_trainable(adapters) == 2 * 2 * 3 * (8 + 8)


def test_inject_twice_rejected(rng):
    model = TwoBlocks(rng)
    inject(model, LoraConfig(), rng)
    with pytest.raises(ConfigError):
        inject(model, LoraConfig(), rng)


def test_zero_b_merge_is_exact(rng):
    ad = LoraLinear(Linear(5, 4, rng), 2, 2.0, rng)
    assert np.array_equal(merge(ad), ad.base.weight.data)


def test_rank_one_outer_product(rng):
    ad = LoraLinear(Linear(3, 2, rng), 1, 0.5, rng)
    ad.lora_b.data = rng.normal(size=(2, 1))
    a, b = ad.lora_a.data[0], ad.lora_b.data[:, 0]
    oracle = np.array([[ad.base.weight.data[i, j] + 0.5 * b[i] * a[j] for j in range(3)] for i in range(2)])
    assert np.allclose(merge(ad), oracle, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_merge_equivalence_random(d, k, seed):
    g = np.random.default_rng(seed)
    r = int(g.integers(1, min(d, k) + 1))
    ad = LoraLinear(Linear(k, d, g), r, float(g.uniform(0.5, 16)), g)
    ad.lora_b.data = g.normal(size=ad.lora_b.shape)
    x = Tensor(g.normal(size=(8, k)))
    merged = ad.merged_linear()
    assert np.max(np.abs(merged(x).data - ad(x).data)) <= 1e-10


def test_merge_all_replaces_adapters(rng):
    model = TwoBlocks(rng)
    inject(model, LoraConfig(rank=2), rng)
    for ad in adapters_of(model).values():
        ad.lora_b.data = rng.normal(size=ad.lora_b.shape)
    x = Tensor(rng.normal(size=(2, 3, 8)))
    y = model(x).data
    merge_all(model)
    assert adapters_of(model) == {}
    assert np.max(np.abs(model(x).data - y)) <= 1e-10


def test_lora_forward_gradients_flow_only_to_factors(rng):
    model = TwoBlocks(rng)
    inject(model, LoraConfig(rank=2), rng)
    model(Tensor(rng.normal(size=(1, 2, 8)))).sum().backward()
    for name, p in model.named_parameters():
        if "lora_" in name:
            assert p.grad is not None, name
        else:
            assert p.grad is None, name
