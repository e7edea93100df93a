"""Experiment harnesses shared by scripts/ and the test suite."""

import time
from dataclasses import asdict, dataclass

import numpy as np

from .data import build_prompts, build_tokenizer, generate_corpus, generic_images, split_80_20
from .errors import ContractError
from .diffusion import DiffusionConfig, DiffusionModel, DiffusionTrainConfig, pretrain_base, train_diffusion
from .lora import LoraConfig, RankSweepRow, expected_trainable, param_count
from .optim import AdamWConfig
from .vqa import EncodedSet, TrainConfig, VqaConfig, VqaModel, evaluate, train_vqa


def small_vqa_corpus(n_examples=50, seed=0, image_size=32):
    """The first ``n_examples`` QA pairs of a seeded corpus, split 80/20 by image."""
    n_images = max(5, -(-n_examples // 2))
    images, examples = generate_corpus(n_images, seed, image_size)
    examples = examples[:n_examples]
    used = {e.image_id for e in examples}
    pixels = {img.id: img.pixels for img in images if img.id in used}
    tok = build_tokenizer(examples)
    split = split_80_20(examples, seed)
    return (
        EncodedSet(split.train, pixels, tok),
        EncodedSet(split.validation, pixels, tok) if split.validation else None,
        tok,
    )


def memorization_config(epochs, lr=1e-3, seed=0):
    return TrainConfig(
        epochs=epochs,
        batch_size=8,
        optim=AdamWConfig(learning_rate=lr, weight_decay=0.0),
        warmup_steps=20,
        shuffle_seed=seed,
    )


def checksum(module):
    """Concatenated raw bytes of every parameter, for bit-identity checks."""
    return b"".join(p.data.tobytes() for _, p in module.named_parameters())


@dataclass
class AblationRow:
    mode: str
    trainable: int
    final_loss: float
    train_rougeL: float
    val_bleu: float
    val_rouge1: float
    val_rougeL: float
    val_meteor: float
    vision_unchanged: bool
    seconds: float


def freeze_ablation(epochs=30, seed=0, n_examples=50):
    """Train the same VQA model with the vision encoder frozen and unfrozen."""
    train, val, tok = small_vqa_corpus(n_examples, seed)
    rows = []
    for mode, frozen in (("frozen", True), ("unfrozen", False)):
        start = time.time()
        model = VqaModel(VqaConfig(vocab_size=len(tok), freeze_vision=frozen), seed=seed)
        before = checksum(model.vision)
        history = train_vqa(model, train, val, memorization_config(epochs, seed=seed))
        train_report, _ = evaluate(model, train)
        last = history[-1].report
        rows.append(
            AblationRow(
                mode=mode,
                trainable=sum(p.size for p in model.trainable_parameters()),
                final_loss=history[-1].loss,
                train_rougeL=train_report.rougeL,
                val_bleu=last.bleu,
                val_rouge1=last.rouge1,
                val_rougeL=last.rougeL,
                val_meteor=last.meteor,
                vision_unchanged=checksum(model.vision) == before,
                seconds=time.time() - start,
            )
        )
    return rows


def format_table(rows):
    """Markdown table of dataclass rows; floats to four decimals."""
    if not rows:
        return ""
    cols = list(asdict(rows[0]))
    fmt = lambda v: f"{v:.4f}" if isinstance(v, float) else str(v)  # noqa: E731
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(fmt(v) for v in asdict(r).values()) + " |")
    return "\n".join(lines)


def rank_sweep(ranks=(1, 2, 4, 8, 16), n_images=32, seed=0, pretrain_steps=300, epochs=3):
    """LoRA rank vs trainable count and fixed-draw denoising loss after short training."""
    cfg = DiffusionConfig()
    base = DiffusionModel(cfg, seed=seed)
    generic = generic_images(256, seed)
    pretrain_base(base, generic, ["generic image"] * len(generic), pretrain_steps, seed=seed)
    state = base.net.state_dict()

    images, _ = generate_corpus(n_images, seed)
    prompts = build_prompts(images)
    pixels = np.stack([img.pixels for img in images])
    rows = []
    for r in ranks:
        model = DiffusionModel(cfg, seed=seed)
        model.net.load_state_dict(state)
        lora = LoraConfig(rank=r, alpha=float(r))
        model.add_lora(lora, seed=seed)
        trainable = sum(p.size for p in model.net.trainable_parameters())
        if trainable != expected_trainable(model.adapters):
            raise ContractError(f"rank {r}: {trainable} trainables, expected {expected_trainable(model.adapters)}")
        history = train_diffusion(
            model, pixels, prompts, lora, DiffusionTrainConfig(epochs=epochs, eval_samples=0, shuffle_seed=seed)
        )
        full = sum(a.in_features * a.out_features for a in model.adapters.values())
        rows.append(RankSweepRow(r, trainable, full, 1.0 - trainable / full, history[-1].probe))
    return rows


def reduction_table(dims=(64, 768), ranks=(1, 2, 4, 8, 16)):
    return [(d, r, *param_count(d, d, r)) for d in dims for r in ranks]


__all__ = [
    "AblationRow",
    "checksum",
    "format_table",
    "freeze_ablation",
    "memorization_config",
    "rank_sweep",
    "reduction_table",
    "small_vqa_corpus",
]
