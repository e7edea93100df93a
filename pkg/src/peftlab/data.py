"""Procedural polyp-on-texture images with counting, yes/no and location QA.

Images are split into a 3x3 grid. Each polyp is an ellipse drawn strictly
inside one grid cell, so its centroid identifies the cell unambiguously and
a location answer can be recovered from the pixels alone.
"""

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .errors import InputError, ParseError
from .text import MEDVQA, Tokenizer, normalize, tokenize

GRID_LABELS = (
    "upper-left", "upper-central", "upper-right",
    "left", "central", "right",
    "lower-left", "lower-central", "lower-right",
)  # fmt: skip

DESCRIPTOR = "clinical colonoscopy image"
QUESTIONS = {
    "count": "How many polyps are in the image?",
    "yesno": "Is there a polyp in the image?",
    "location": "Where is the polyp located?",
}
POLYP_COLOR = np.array([0.96, 0.86, 0.55])
MAX_POLYPS = 4


@dataclass
class SyntheticImage:
    id: str
    pixels: np.ndarray
    polyp_count: int
    polyp_locations: list = field(default_factory=list)
    centers: list = field(default_factory=list)

    def __post_init__(self):
        if self.polyp_count != len(self.polyp_locations):
            raise InputError(f"{self.id}: count {self.polyp_count} != {len(self.polyp_locations)} locations")


@dataclass
class VqaExample:
    image_id: str
    question: list
    answer: list
    category: str

    def to_json(self):
        return {
            "image_id": self.image_id,
            "question": " ".join(self.question),
            "answer": " ".join(self.answer),
            "category": self.category,
        }

    @classmethod
    def from_json(cls, row):
        return cls(row["image_id"], tokenize(row["question"]), tokenize(row["answer"]), row["category"])


@dataclass
class CorpusSplit:
    train: list
    validation: list
    seed: int

    @property
    def train_ids(self):
        return sorted({e.image_id for e in self.train})

    @property
    def validation_ids(self):
        return sorted({e.image_id for e in self.validation})


def cell_of(y, x, size):
    """Grid cell index of a pixel-space point; boundary points go to the lower index."""
    edges = [size / 3, 2 * size / 3]

    def band(v):
        return 0 if v <= edges[0] else (1 if v <= edges[1] else 2)

    return 3 * band(y) + band(x)


def location_answer(cells):
    return " and ".join(GRID_LABELS[c] for c in sorted(cells))


def _background(rng, size):
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    field_ = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.5, 2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    field_ /= np.abs(field_).max() + 1e-12
    base = np.array([0.62, 0.30, 0.26])
    tint = np.array([0.10, 0.06, 0.05])
    img = base + field_[..., None] * tint
    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 0.8)


def _draw_polyp(img, rng, cell, size):
    cell_h = size / 3
    cy0, cx0 = (cell // 3) * cell_h, (cell % 3) * cell_h
    max_r = max(2.0, min(cell_h / 2 - 1.5, 0.12 * size))
    ry, rx = rng.uniform(2.0, max_r, 2)
    # keep the whole ellipse inside the cell, away from its edges
    cy = rng.uniform(cy0 + ry + 1, cy0 + cell_h - ry - 1)
    cx = rng.uniform(cx0 + rx + 1, cx0 + cell_h - rx - 1)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    shade = 1.0 - 0.08 * np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    polyp = POLYP_COLOR[None, None, :] * shade[..., None]
    img[inside] = np.clip(polyp[inside] + rng.normal(0, 0.01, size=(inside.sum(), 3)), 0.0, 1.0)
    ys, xs = np.nonzero(inside)
    return float(ys.mean() + 0.5), float(xs.mean() + 0.5)


def make_image(image_id, rng, size=32, count=None):
    if size < 24:
        raise InputError(f"image_size must be >= 24, got {size}")
    if count is None:
        count = int(rng.integers(0, MAX_POLYPS + 1))
    img = _background(rng, size)
    cells = sorted(rng.choice(9, size=count, replace=False).tolist())
    centers = [_draw_polyp(img, rng, c, size) for c in cells]
    return SyntheticImage(image_id, img, count, [GRID_LABELS[c] for c in cells], centers)


def generic_images(n, seed=0, size=32):
    """Out-of-domain images (smooth colour fields with random ellipses) for base pretraining."""
    rng = np.random.default_rng([seed, 99])
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((n, size, size, 3))
    for k in range(n):
        c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * xx + np.sin(angle) * yy)
        ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
        img = c0 + ramp[..., None] * (c1 - c0)
        for _ in range(int(rng.integers(0, 4))):
            cy, cx = rng.uniform(0, 1, 2)
            ry, rx = rng.uniform(0.05, 0.2, 2)
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            img[inside] = rng.uniform(0, 1, 3)
        out[k] = np.clip(img + rng.normal(0, 0.02, img.shape), 0.0, 1.0)
    return out


def questions_for(image: SyntheticImage):
    q = lambda cat: [MEDVQA] + tokenize(QUESTIONS[cat])  # noqa: E731
    out = [
        VqaExample(image.id, q("count"), [str(image.polyp_count)], "count"),
        VqaExample(image.id, q("yesno"), ["yes" if image.polyp_count else "no"], "yesno"),
    ]
    if image.polyp_count:
        cells = [GRID_LABELS.index(lbl) for lbl in image.polyp_locations]
        out.append(VqaExample(image.id, q("location"), tokenize(location_answer(cells)), "location"))
    return out


def generate_corpus(n_images, seed=0, image_size=32):
    """Deterministic images and QA examples; counts cycle through 0..4 before shuffling."""
    if n_images < 5:
        raise InputError(f"need at least 5 images, got {n_images}")
    rng = np.random.default_rng(seed)
    counts = np.arange(n_images) % (MAX_POLYPS + 1)
    rng.shuffle(counts)
    images, examples = [], []
    for i, count in enumerate(counts):
        img = make_image(f"img{i:05d}", np.random.default_rng([seed, i]), image_size, int(count))
        images.append(img)
        examples.extend(questions_for(img))
    return images, examples


def split_80_20(examples, seed=0, train_fraction=0.8):
    """Split by image id so no image appears on both sides."""
    ids = sorted({e.image_id for e in examples})
    if len(ids) < 5 or len(examples) < 5:
        raise InputError(f"need at least 5 examples from 5 images, got {len(examples)} / {len(ids)}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    train_ids = {ids[i] for i in perm[:n_train]}
    train = [e for e in examples if e.image_id in train_ids]
    val = [e for e in examples if e.image_id not in train_ids]
    return CorpusSplit(train, val, seed)


def build_prompts(images):
    prompts = []
    for img in images:
        if img.polyp_count == 0:
            clause = "with no polyp"
        elif img.polyp_count == 1:
            clause = f"with one polyp in the {img.polyp_locations[0]} region"
        else:
            clause = f"with {img.polyp_count} polyps"
        prompts.append(f"{DESCRIPTOR} {clause}")
    return prompts


def build_tokenizer(examples):
    words = set()
    for e in examples:
        words.update(e.question)
        words.update(e.answer)
    return Tokenizer(words)


# -- disk formats --------------------------------------------------------------


def to_uint8(pixels):
    return np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, pixels):
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path, size=None):
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64) / 255.0


def load_png_dir(directory):
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))
    if not names:
        raise InputError(f"no PNG files in {directory}")
    return names, np.stack([load_png(os.path.join(directory, n)) for n in names])


def save_corpus(out_dir, images, examples, tokenizer, split, seed, image_size):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    for img in images:
        save_png(os.path.join(out_dir, "images", f"{img.id}.png"), img.pixels)
    with open(os.path.join(out_dir, "qa.jsonl"), "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")
    tokenizer.save(os.path.join(out_dir, "vocab.txt"))
    meta = {
        "seed": seed,
        "image_size": image_size,
        "n_images": len(images),
        "n_examples": len(examples),
        "images": [
            {"id": i.id, "polyp_count": i.polyp_count, "polyp_locations": i.polyp_locations} for i in images
        ],
        "split": {"train": split.train_ids, "validation": split.validation_ids, "seed": split.seed},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


@dataclass
class Corpus:
    images: dict
    examples: list
    tokenizer: Tokenizer
    split: CorpusSplit
    manifest: dict

    def pixels(self, image_id):
        return self.images[image_id]


def load_corpus(corpus_dir):
    with open(os.path.join(corpus_dir, "manifest.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(os.path.join(corpus_dir, "qa.jsonl"), encoding="utf-8") as fh:
        examples = [VqaExample.from_json(json.loads(line)) for line in fh if line.strip()]
    tokenizer = Tokenizer.from_vocab_file(os.path.join(corpus_dir, "vocab.txt"))
    images = {
        rec["id"]: load_png(os.path.join(corpus_dir, "images", f"{rec['id']}.png")) for rec in meta["images"]
    }
    train_ids = set(meta["split"]["train"])
    split = CorpusSplit(
        [e for e in examples if e.image_id in train_ids],
        [e for e in examples if e.image_id not in train_ids],
        meta["split"]["seed"],
    )
    return Corpus(images, examples, tokenizer, split, meta)


def corpus_checksum(corpus_dir):
    """SHA-256 over every file in the corpus directory, in sorted path order."""
    h = hashlib.sha256()
    for root, dirs, files in os.walk(corpus_dir):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(root, name)
            h.update(os.path.relpath(path, corpus_dir).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


REQUIRED_COLUMNS = ("image_path", "question", "answer")


def load_external_metadata(path, image_size=None):
    """Read a Kvasir-style CSV (image_path,question,answer).

    Returns ``(examples, images)`` where ``images`` maps image ids (the
    path as written in the CSV) to pixel arrays. Image paths are resolved
    relative to the CSV's directory.
    """
    if not os.path.exists(path):
        raise ParseError(f"{path}: file not found")
    base = os.path.dirname(os.path.abspath(path))
    examples, images = [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: missing header", line=1)
        header = [h.strip() for h in header]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"{path}: missing column(s) {missing}", line=1)
        col = {c: header.index(c) for c in REQUIRED_COLUMNS}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(header):
                absent = [c for c in REQUIRED_COLUMNS if col[c] >= len(row)]
                raise ParseError(f"row {line_no - 1} is missing {absent}", line=line_no)
            rel, question, answer = (row[col[c]].strip() for c in REQUIRED_COLUMNS)
            if not answer:
                raise ParseError(f"row {line_no - 1} has an empty answer", line=line_no)
            if rel not in images:
                img_path = rel if os.path.isabs(rel) else os.path.join(base, rel)
                if not os.path.exists(img_path):
                    raise ParseError(f"image {rel} not found", line=line_no)
                images[rel] = load_png(img_path, image_size)
            q = tokenize(question)
            if not q or q[0] != MEDVQA:
                q = [MEDVQA] + q
            examples.append(VqaExample(rel, q, tokenize(answer), _guess_category(answer)))
    return examples, images


def _guess_category(answer):
    a = normalize(answer)
    if a in ("yes", "no"):
        return "yesno"
    if a.isdigit():
        return "count"
    return "location"
