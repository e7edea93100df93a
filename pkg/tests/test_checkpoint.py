import numpy as np
import pytest

from peftlab import checkpoint
from peftlab.diffusion import DiffusionConfig, DiffusionModel
from peftlab.errors import ParseError
from peftlab.experiments import memorization_config, small_vqa_corpus
from peftlab.lora import LoraConfig
from peftlab.vqa import VqaConfig, VqaModel, build_optimizer, train_vqa


def test_tensor_roundtrip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(3.5), "c": np.zeros((0, 2))}
    checkpoint.save_tensors(str(tmp_path / "x"), arrays, {"k": 1})
    back, meta = checkpoint.load_tensors(str(tmp_path / "x"))
    assert meta == {"k": 1}
    assert all(np.array_equal(arrays[k], back[k]) and arrays[k].shape == back[k].shape for k in arrays)


def test_truncated_and_missing(tmp_path):
    checkpoint.save_tensors(str(tmp_path / "x"), {"a": np.ones(10)})
    blob = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "x.bin").write_bytes(blob[:40])
    with pytest.raises(ParseError, match="truncated"):
        checkpoint.load_tensors(str(tmp_path / "x"))
    with pytest.raises(ParseError):
        checkpoint.load_tensors(str(tmp_path / "nothing"))


def test_resume_is_bit_identical(tmp_path):
    train, val, tok = small_vqa_corpus(20)
    cfg = memorization_config(4)

    def fresh():
        return VqaModel(VqaConfig(vocab_size=len(tok)), seed=0)

    full = fresh()
    hist_full = train_vqa(full, train, val, cfg)

    first = fresh()
    opt = build_optimizer(first, len(train), cfg)

    def stop_at_two(res, o):
        if res.epoch == 2:
            checkpoint.save_model(str(tmp_path / "ck"), first, o, {"epoch": 2})

    train_vqa(first, train, val, memorization_config(2), on_epoch=stop_at_two, optimizer=opt)

    resumed = fresh()
    opt2 = build_optimizer(resumed, len(train), cfg)
    meta = checkpoint.load_model(str(tmp_path / "ck"), resumed, opt2)
    hist_res = train_vqa(resumed, train, val, cfg, optimizer=opt2, start_epoch=meta["epoch"] + 1)
    assert [h.loss for h in hist_res] == [h.loss for h in hist_full[2:]]
    assert all(np.array_equal(a.data, b.data) for a, b in zip(full.parameters(), resumed.parameters()))


def test_adapter_roundtrip(tmp_path):
    m = DiffusionModel(DiffusionConfig(), seed=0)
    m.add_lora(LoraConfig(rank=2), seed=0)
    for a in m.adapters.values():
        a.lora_b.data = np.random.default_rng(0).normal(size=a.lora_b.shape)
    checkpoint.save_adapters(str(tmp_path / "ad"), m.adapters)
    m2 = DiffusionModel(DiffusionConfig(), seed=0)
    m2.add_lora(LoraConfig(rank=2), seed=1)
    checkpoint.load_adapters(str(tmp_path / "ad"), m2.adapters)
    for k in m.adapters:
        assert np.array_equal(m.adapters[k].delta(), m2.adapters[k].delta())
    m3 = DiffusionModel(DiffusionConfig(), seed=0)
    m3.add_lora(LoraConfig(rank=4), seed=0)
    with pytest.raises(ParseError, match="rank"):
        checkpoint.load_adapters(str(tmp_path / "ad"), m3.adapters)
