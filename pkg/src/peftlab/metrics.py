"""Answer-quality and generation-quality metrics.

Text metrics operate on token lists (see :func:`peftlab.text.tokenize`) and
are sentence-level; corpus scores are their mean over examples. Image
metrics embed images with a fixed random-projection extractor.
"""

import math
from collections import Counter
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ContractError, InputError
from .linalg import jacobi_eigh, psd_sqrt
from .text import PromptEmbedder, tokenize


def _tokens(x):
    return tokenize(x) if isinstance(x, str) else list(x)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, max_n=4):
    """Unsmoothed sentence BLEU with brevity penalty.

    Orders run up to ``min(max_n, len(candidate))``; a zero clipped precision
    at any order gives 0.
    """
    c, r = _tokens(candidate), _tokens(reference)
    if not r:
        raise InputError("reference must be non-empty")
    if not c:
        return 0.0
    orders = min(max_n, len(c))
    log_p = 0.0
    for n in range(1, orders + 1):
        cand = _ngrams(c, n)
        ref = _ngrams(r, n)
        clipped = sum(min(k, ref[g]) for g, k in cand.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / sum(cand.values()))
    bp = 1.0 if len(c) >= len(r) else math.exp(1.0 - len(r) / len(c))
    return bp * math.exp(log_p / orders)


def _f1(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def rouge_1(candidate, reference):
    c, r = _tokens(candidate), _tokens(reference)
    if not r:
        raise InputError("reference must be non-empty")
    if not c:
        return 0.0
    overlap = sum((Counter(c) & Counter(r)).values())
    return _f1(overlap / len(c), overlap / len(r))


def lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference):
    c, r = _tokens(candidate), _tokens(reference)
    if not r:
        raise InputError("reference must be non-empty")
    if not c:
        return 0.0
    lcs = lcs_length(c, r)
    return _f1(lcs / len(c), lcs / len(r))


def _align(c, r):
    """Exact-match unigram alignment as (cand_idx, ref_idx) pairs.

    Each candidate word takes the unused reference position right after the
    previous match when possible, otherwise the first unused one.
    """
    used = [False] * len(r)
    pairs = []
    prev = None
    for i, w in enumerate(c):
        slots = [j for j, x in enumerate(r) if x == w and not used[j]]
        if not slots:
            continue
        j = prev + 1 if prev is not None and prev + 1 in slots else slots[0]
        used[j] = True
        pairs.append((i, j))
        prev = j
    return pairs


def meteor(candidate, reference, alpha=0.9, beta=3.0, gamma=0.5):
    """METEOR with exact matching only: Fmean * (1 - gamma * (chunks/m)^beta)."""
    c, r = _tokens(candidate), _tokens(reference)
    if not r:
        raise InputError("reference must be non-empty")
    if not c:
        return 0.0
    pairs = _align(c, r)
    m = len(pairs)
    if m == 0:
        return 0.0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    p, rec = m / len(c), m / len(r)
    fmean = p * rec / (alpha * p + (1 - alpha) * rec)
    return fmean * (1.0 - gamma * (chunks / m) ** beta)


@dataclass
class MetricReport:
    bleu: float
    rouge1: float
    rougeL: float
    meteor: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not 0.0 <= v <= 1.0 + 1e-12:
                raise ContractError(f"{f.name}={v} outside [0, 1]")

    def as_dict(self):
        return asdict(self)


def text_report(candidates, references):
    """Mean sentence-level scores over paired candidate/reference lists."""
    if len(candidates) != len(references):
        raise InputError("candidates and references differ in length")
    if not candidates:
        raise InputError("nothing to score")
    n = len(candidates)
    return MetricReport(
        bleu=sum(bleu(c, r) for c, r in zip(candidates, references)) / n,
        rouge1=sum(rouge_1(c, r) for c, r in zip(candidates, references)) / n,
        rougeL=sum(rouge_l(c, r) for c, r in zip(candidates, references)) / n,
        meteor=sum(meteor(c, r) for c, r in zip(candidates, references)) / n,
    )


# -- image-side metrics ------------------------------------------------------


def _check_sym(s, label):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractError(f"{label} must be square, got {s.shape}")
    if np.abs(s - s.T).max() > 1e-8 * max(1.0, np.abs(s).max()):
        raise ContractError(f"{label} is not symmetric")
    return 0.5 * (s + s.T)


def frechet_distance(mu1, sigma1, mu2, sigma2):
    """Frechet distance between two Gaussians.

    The cross term uses tr sqrt(S1^1/2 S2 S1^1/2), evaluated with the Jacobi
    solver and negative eigenvalues clamped to zero.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    s1, s2 = _check_sym(sigma1, "sigma1"), _check_sym(sigma2, "sigma2")
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape[0] != mu1.shape[0]:
        raise ContractError("mean/covariance dimensions disagree")
    root = psd_sqrt(s1)
    inner = root @ s2 @ root
    w, _ = jacobi_eigh(0.5 * (inner + inner.T))
    cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * cross)
    return max(value, 0.0)


class FeatureExtractor:
    """Fixed ``tanh(P (x - 0.5))`` image features plus a prompt projection.

    Projection matrices are drawn from seeds derived from ``seed`` and the
    input width, so any image size works and nothing is ever trained.
    """

    def __init__(self, seed=0, dim=16, gain=3.0, prompt_dim=32):
        self.seed = seed
        self.dim = dim
        self.gain = gain
        self.embedder = PromptEmbedder(prompt_dim, seed=seed)
        self._proj = {}

    def _matrix(self, width, tag):
        key = (width, tag)
        if key not in self._proj:
            rng = np.random.default_rng([self.seed, width, tag])
            self._proj[key] = rng.normal(0.0, self.gain / math.sqrt(width), size=(width, self.dim))
        return self._proj[key]

    def images(self, images):
        x = np.asarray(images, dtype=np.float64)
        flat = x.reshape(len(x), -1) - 0.5
        return np.tanh(flat @ self._matrix(flat.shape[1], 0))

    def prompts(self, prompts):
        emb = np.stack([self.embedder(p) if isinstance(p, str) else np.asarray(p, float) for p in prompts])
        return np.tanh(emb @ self._matrix(emb.shape[1], 1))


def feature_stats(features):
    return features.mean(axis=0), np.cov(features, rowvar=False, ddof=1)


def fbd(real_images, gen_images, extractor: FeatureExtractor):
    """Frechet distance between extractor features of two image sets."""
    if len(real_images) < 2 or len(gen_images) < 2:
        raise InputError("each image set needs at least 2 images")
    if np.shape(real_images)[1:] != np.shape(gen_images)[1:]:
        raise InputError("image sets have different dimensions")
    mu1, s1 = feature_stats(extractor.images(real_images))
    mu2, s2 = feature_stats(extractor.images(gen_images))
    return frechet_distance(mu1, s1, mu2, s2)


def _unit(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def fidelity(gen_images, real_images, extractor: FeatureExtractor):
    """Mean over generated images of the best cosine similarity to any real image."""
    if len(gen_images) == 0 or len(real_images) == 0:
        raise InputError("fidelity needs non-empty image sets")
    g = _unit(extractor.images(gen_images))
    r = _unit(extractor.images(real_images))
    return float((g @ r.T).max(axis=1).mean())


def agreement(gen_images, prompts, extractor: FeatureExtractor):
    """Mean cosine similarity between each image and its own prompt."""
    if len(gen_images) != len(prompts):
        raise InputError(f"{len(gen_images)} images but {len(prompts)} prompts")
    if len(prompts) == 0:
        raise InputError("agreement needs at least one image")
    g = _unit(extractor.images(gen_images))
    p = _unit(extractor.prompts(prompts))
    return float((g * p).sum(axis=1).mean())


def diversity(gen_images, extractor: FeatureExtractor):
    """Mean pairwise cosine distance among generated images (0 for one image)."""
    if len(gen_images) == 0:
        raise InputError("diversity needs at least one image")
    if len(gen_images) < 2:
        return 0.0
    g = _unit(extractor.images(gen_images))
    sim = g @ g.T
    iu = np.triu_indices(len(g), k=1)
    return float(np.clip(1.0 - sim[iu], 0.0, None).mean())


@dataclass
class GenReport:
    fidelity: float
    agreement: float
    diversity: float
    fbd: float

    def __post_init__(self):
        if self.fbd < 0:
            if self.fbd < -1e-8:
                raise ContractError(f"negative FBD {self.fbd}")
            self.fbd = 0.0
        for name in ("fidelity", "agreement"):
            v = getattr(self, name)
            if not -1.0 - 1e-12 <= v <= 1.0 + 1e-12:
                raise ContractError(f"{name}={v} outside [-1, 1]")
        if self.diversity < 0:
            raise ContractError(f"negative diversity {self.diversity}")

    def as_dict(self):
        return asdict(self)


def gen_report(gen_images, real_images, prompts, extractor: FeatureExtractor):
    return GenReport(
        fidelity=fidelity(gen_images, real_images, extractor),
        agreement=agreement(gen_images, prompts, extractor),
        diversity=diversity(gen_images, extractor),
        fbd=fbd(real_images, gen_images, extractor),
    )
