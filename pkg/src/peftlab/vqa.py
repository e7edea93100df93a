"""Encoder-decoder VQA model with a frozen patch vision encoder.

Layout:

* vision encoder: patch embedding + self-attention blocks, frozen by default;
* question encoder: token embedding, self-attention, then cross-attention
  whose queries are question states and whose keys/values are visual tokens;
* answer decoder: causal self-attention, cross-attention to the concatenated
  [question states; visual tokens] memory, feed-forward, vocabulary head.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .metrics import MetricReport, text_report
from .nn import (
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    causal_mask,
    padding_mask,
)
from .optim import Accumulator, AdamW, AdamWConfig, ScheduleConfig
from .tensor import Parameter, Tensor, no_grad
from .text import BOS_ID, EOS_ID, MEDVQA_ID, PAD_ID, UNK_ID

IGNORE = -100


@dataclass
class VqaConfig:
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    image_size: int = 32
    patch_size: int = 4
    vocab_size: int = 0
    max_answer_len: int = 8
    max_question_len: int = 24
    ff_mult: int = 2
    freeze_vision: bool = True
    vision_warmup_steps: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.max_answer_len < 1:
            raise ConfigError("max_answer_len must be >= 1")

    @property
    def d_k(self):
        return self.d_model // self.n_heads

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2


def patchify(images, patch):
    """(B, H, W, C) pixels -> (B, N, patch*patch*C) row-major patch vectors."""
    x = np.asarray(images, dtype=np.float64)
    b, h, w, c = x.shape
    x = x.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


class EncoderBlock(Module):
    def __init__(self, d, heads, ff, rng):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, ff, rng)

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.ff(self.ln2(x))


class CrossBlock(Module):
    """Self-attention, cross-attention to a memory, feed-forward (all pre-norm)."""

    def __init__(self, d, heads, ff, rng):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng)
        self.ln3 = LayerNorm(d)
        self.ff = FeedForward(d, ff, rng)

    def forward(self, x, memory, self_mask=None, memory_mask=None):
        x = x + self.self_attn(self.ln1(x), mask=self_mask)
        x = x + self.cross_attn(self.ln2(x), memory, mask=memory_mask)
        return x + self.ff(self.ln3(x))


class VisionEncoder(Module):
    def __init__(self, cfg: VqaConfig, rng):
        d = cfg.d_model
        self.patch = cfg.patch_size
        self.patch_embed = Linear(cfg.patch_size**2 * 3, d, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.n_patches, d)))
        self.layers = [EncoderBlock(d, cfg.n_heads, cfg.ff_mult * d, rng) for _ in range(cfg.encoder_layers)]
        self.ln_f = LayerNorm(d)

    def forward(self, images):
        x = self.patch_embed(Tensor(patchify(images, self.patch))) + self.pos
        for layer in self.layers:
            x = layer(x)
        return self.ln_f(x)


class QuestionEncoder(Module):
    def __init__(self, cfg: VqaConfig, rng):
        d = cfg.d_model
        self.embed = Embedding(cfg.vocab_size, d, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.max_question_len, d)))
        self.layers = [CrossBlock(d, cfg.n_heads, cfg.ff_mult * d, rng) for _ in range(cfg.encoder_layers)]
        self.ln_f = LayerNorm(d)

    def forward(self, ids, keep, vision):
        n = ids.shape[1]
        x = self.embed(ids) + self.pos[:n]
        mask = padding_mask(keep)
        for layer in self.layers:
            x = layer(x, vision, self_mask=mask)
        return self.ln_f(x)


class AnswerDecoder(Module):
    def __init__(self, cfg: VqaConfig, rng):
        d = cfg.d_model
        self.embed = Embedding(cfg.vocab_size, d, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.max_answer_len + 1, d)))
        self.layers = [CrossBlock(d, cfg.n_heads, cfg.ff_mult * d, rng) for _ in range(cfg.decoder_layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, cfg.vocab_size, rng, init_scale=0.02)

    def forward(self, ids, memory, memory_keep):
        n = ids.shape[1]
        x = self.embed(ids) + self.pos[:n]
        self_mask = causal_mask(n)[None, None]
        mem_mask = padding_mask(memory_keep)
        for layer in self.layers:
            x = layer(x, memory, self_mask=self_mask, memory_mask=mem_mask)
        return self.head(self.ln_f(x))


class VqaModel(Module):
    def __init__(self, cfg: VqaConfig, seed=0):
        if cfg.vocab_size <= UNK_ID:
            raise ConfigError("vocab_size must cover the special tokens")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.seed = seed
        self.vision = VisionEncoder(cfg, rng)
        self.text = QuestionEncoder(cfg, rng)
        self.decoder = AnswerDecoder(cfg, rng)
        list(self.named_parameters())  # assigns parameter paths
        if cfg.freeze_vision and cfg.vision_warmup_steps == 0:
            self.vision.freeze()

    def encode(self, images, question_ids, question_keep):
        if all(p.frozen for p in self.vision.parameters()):
            with no_grad():
                vision = self.vision(images)
        else:
            vision = self.vision(images)
        text = self.text(question_ids, question_keep, vision)
        memory = T.concat([text, vision], axis=1)
        keep = np.concatenate([question_keep, np.ones(vision.shape[:2], dtype=bool)], axis=1)
        return memory, keep

    def logits(self, images, question_ids, question_keep, decoder_in):
        memory, keep = self.encode(images, question_ids, question_keep)
        return self.decoder(decoder_in, memory, keep)


def _check_question(q):
    if not len(q) or q[0] != MEDVQA_ID:
        raise InputError("question must begin with the <MedVQA> token")


@dataclass
class Batch:
    images: np.ndarray
    q_ids: np.ndarray
    q_keep: np.ndarray
    dec_in: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.images)


def make_batch(images, questions, answers, cfg: VqaConfig):
    """Pad token sequences; decoder input is <bos>+answer, target is answer (ending in <eos>)."""
    for q in questions:
        _check_question(q)
        if len(q) > cfg.max_question_len:
            raise InputError(f"question of {len(q)} tokens exceeds max_question_len {cfg.max_question_len}")
    for a in answers:
        if len(a) == 0 or (len(a) == 1 and a[0] == EOS_ID):
            raise InputError("answer is empty")
        if a[-1] != EOS_ID:
            raise InputError("answer must end with <eos>")
        if len(a) > cfg.max_answer_len + 1:
            raise InputError(f"answer of {len(a)} tokens exceeds max_answer_len {cfg.max_answer_len}")
    b = len(questions)
    qn = max(len(q) for q in questions)
    an = max(len(a) for a in answers)
    q_ids = np.full((b, qn), PAD_ID, dtype=np.int64)
    q_keep = np.zeros((b, qn), dtype=bool)
    dec_in = np.full((b, an), PAD_ID, dtype=np.int64)
    targets = np.full((b, an), IGNORE, dtype=np.int64)
    for i, (q, a) in enumerate(zip(questions, answers)):
        q_ids[i, : len(q)] = q
        q_keep[i, : len(q)] = True
        dec_in[i, 0] = BOS_ID
        dec_in[i, 1 : len(a)] = a[:-1]
        targets[i, : len(a)] = a
    return Batch(np.asarray(images, dtype=np.float64), q_ids, q_keep, dec_in, targets)


def batch_loss(model: VqaModel, batch: Batch):
    logits = model.logits(batch.images, batch.q_ids, batch.q_keep, batch.dec_in)
    return T.cross_entropy(logits, batch.targets, ignore_index=IGNORE)


def vqa_loss(model: VqaModel, image, question_tokens, answer_tokens):
    """Teacher-forced mean token cross-entropy for a single example."""
    batch = make_batch([image], [list(question_tokens)], [list(answer_tokens)], model.cfg)
    return batch_loss(model, batch)


_NEVER_EMIT = (PAD_ID, BOS_ID, MEDVQA_ID)


def generate_batch(model: VqaModel, images, questions, max_len=None):
    """Greedy decoding; the first token may not be <eos>, so answers are never empty."""
    cfg = model.cfg
    max_len = cfg.max_answer_len if max_len is None else max_len
    for q in questions:
        _check_question(q)
    b = len(questions)
    qn = max(len(q) for q in questions)
    q_ids = np.full((b, qn), PAD_ID, dtype=np.int64)
    q_keep = np.zeros((b, qn), dtype=bool)
    for i, q in enumerate(questions):
        q_ids[i, : len(q)] = q
        q_keep[i, : len(q)] = True
    with no_grad():
        memory, keep = model.encode(np.asarray(images, dtype=np.float64), q_ids, q_keep)
        seq = np.full((b, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        out = [[] for _ in range(b)]
        for step in range(max_len):
            logits = model.decoder(seq, memory, keep).data[:, -1, :].copy()
            logits[:, list(_NEVER_EMIT)] = -np.inf
            if step == 0:
                logits[:, EOS_ID] = -np.inf
            nxt = logits.argmax(axis=1)
            for i in range(b):
                if done[i]:
                    continue
                if nxt[i] == EOS_ID:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all():
                break
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out


def generate_answer(model: VqaModel, image, question_tokens, max_len=None):
    return generate_batch(model, [image], [list(question_tokens)], max_len)[0]


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    accumulation_steps: int = 1
    optim: AdamWConfig = field(default_factory=lambda: AdamWConfig(learning_rate=1e-3))
    warmup_steps: int = 200
    min_lr: float = 0.0
    shuffle_seed: int = 0
    eval_batch_size: int = 64


@dataclass
class EpochResult:
    epoch: int
    loss: float
    report: MetricReport | None
    lr: float


class EncodedSet:
    """Examples converted to ids once, aligned with their pixel arrays."""

    def __init__(self, examples, images, tokenizer):
        if not examples:
            raise InputError("dataset is empty")
        self.examples = list(examples)
        self.pixels = np.stack([images[e.image_id] for e in self.examples])
        self.questions = [tokenizer.encode_question(e.question) for e in self.examples]
        self.answers = [tokenizer.encode_answer(e.answer) for e in self.examples]
        self.references = [list(e.answer) for e in self.examples]
        self.tokenizer = tokenizer

    def __len__(self):
        return len(self.examples)

    def batch(self, idx, cfg):
        return make_batch(
            self.pixels[idx], [self.questions[i] for i in idx], [self.answers[i] for i in idx], cfg
        )


def effective_warmup(warmup, total_steps):
    """Warmup capped below the run length so the schedule stays valid on short runs."""
    return min(warmup, max(total_steps - 1, 0))


def evaluate(model: VqaModel, data: EncodedSet, batch_size=64):
    """Greedy answers scored against references; returns (MetricReport, predictions)."""
    preds = []
    for start in range(0, len(data), batch_size):
        idx = list(range(start, min(start + batch_size, len(data))))
        preds.extend(generate_batch(model, data.pixels[idx], [data.questions[i] for i in idx]))
    candidates = [[w for w in data.tokenizer.decode(p)] for p in preds]
    return text_report(candidates, data.references), candidates


def warmup_vision(model: VqaModel, images, counts, steps, lr=1e-3, seed=0, n_classes=5):
    """Briefly train the vision encoder to predict polyp counts, then freeze it."""
    rng = np.random.default_rng(seed)
    head = Linear(model.cfg.d_model, n_classes, rng)
    model.vision.unfreeze()
    list(head.named_parameters())  # assigns names used in error messages
    params = model.vision.parameters() + head.parameters()
    opt = AdamW(params, AdamWConfig(learning_rate=lr, weight_decay=0.0))
    images = np.asarray(images)
    counts = np.asarray(counts, dtype=np.int64)
    for _ in range(steps):
        idx = rng.choice(len(images), size=min(16, len(images)), replace=False)
        pooled = model.vision(images[idx]).mean(axis=1)
        loss = T.cross_entropy(head(pooled), counts[idx])
        loss.backward()
        opt.step()
        opt.zero_grad()
    if model.cfg.freeze_vision:
        model.vision.freeze()


def build_optimizer(model: VqaModel, n_train, cfg: TrainConfig):
    steps_per_epoch = -(-n_train // (cfg.batch_size * cfg.accumulation_steps))
    total = max(steps_per_epoch * cfg.epochs, 1)
    schedule = ScheduleConfig(
        cfg.optim.learning_rate, effective_warmup(cfg.warmup_steps, total), total, cfg.min_lr
    )
    return AdamW(model.trainable_parameters(), cfg.optim, schedule)


def train_vqa(model: VqaModel, train: EncodedSet, validation: EncodedSet | None, cfg: TrainConfig,
              on_epoch=None, optimizer=None, start_epoch=1):
    """Mini-batch AdamW training with warmup-cosine schedule.

    Only trainable parameters are updated. After every epoch, validation
    answers are generated greedily and scored (skipped if ``validation`` is
    None). Shuffling is seeded per epoch, so passing a restored
    ``optimizer`` and ``start_epoch`` continues a run exactly.
    """
    if len(train) == 0:
        raise InputError("training set is empty")
    opt = optimizer or build_optimizer(model, len(train), cfg)
    acc = Accumulator(opt, cfg.accumulation_steps)
    history = []
    for epoch in range(start_epoch, cfg.epochs + 1):
        order = np.random.default_rng([cfg.shuffle_seed, epoch]).permutation(len(train))
        total_loss, seen = 0.0, 0
        last_lr = opt.lr
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = batch_loss(model, train.batch(idx, model.cfg))
            total_loss += loss.item() * len(idx)
            seen += len(idx)
            lr = acc.backward(loss, len(idx))
            last_lr = lr if lr is not None else last_lr
        lr = acc.apply()
        last_lr = lr if lr is not None else last_lr
        report = evaluate(model, validation, cfg.eval_batch_size)[0] if validation is not None else None
        result = EpochResult(epoch, total_loss / seen, report, last_lr)
        history.append(result)
        if on_epoch is not None:
            on_epoch(result, opt)
    return history
