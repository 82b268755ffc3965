"""Small aligned image/text encoder pairs: definition, training, serialization.

Image branch: patch means -> affine -> tanh -> affine -> L2 normalize.
Text branch: bag-of-words counts -> affine -> L2 normalize.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import (
    ContractError,
    DegenerateVectorError,
    IngestionError,
    ParseError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .numkit import Rng, Tape, backward
from .numkit.tape import NORM_FLOOR
from .vocab import VOCAB

log = logging.getLogger(__name__)

TAGS = ("domain", "general", "victim")
IMAGE_KEYS = ("W1", "b1", "W2", "b2")
TEXT_KEYS = ("W", "b")


@dataclass(frozen=True)
class EncoderArch:
    height: int = 32
    width: int = 32
    patch: int = 8
    hidden: int = 64
    embed_dim: int = 32
    vocab: tuple = VOCAB

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        if self.embed_dim < 2:
            raise ContractError("embedding dimension must be >= 2")
        if self.patch < 1 or self.height % self.patch or self.width % self.patch:
            raise ContractError(f"patch {self.patch} must divide {self.height}x{self.width}")
        if self.hidden < self.embed_dim:
            raise ContractError("hidden width must be >= embedding dimension")
        if len(set(self.vocab)) != len(self.vocab) or not self.vocab:
            raise ContractError("vocabulary must be nonempty with unique tokens")

    @property
    def n_patches(self):
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def vocab_size(self):
        return len(self.vocab)

    def weight_shapes(self):
        return {
            "W1": (self.hidden, self.n_patches),
            "b1": (self.hidden,),
            "W2": (self.embed_dim, self.hidden),
            "b2": (self.embed_dim,),
        }, {
            "W": (self.embed_dim, self.vocab_size),
            "b": (self.embed_dim,),
        }

    def to_dict(self):
        return {
            "height": self.height,
            "width": self.width,
            "patch": self.patch,
            "hidden": self.hidden,
            "embed_dim": self.embed_dim,
            "vocab": list(self.vocab),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            height=int(d["height"]),
            width=int(d["width"]),
            patch=int(d["patch"]),
            hidden=int(d["hidden"]),
            embed_dim=int(d["embed_dim"]),
            vocab=tuple(d["vocab"]),
        )


@dataclass(eq=False)
class EncoderPair:
    arch: EncoderArch
    image_weights: dict
    text_weights: dict
    seed: int
    tag: str = "domain"
    name: str = ""
    _token_index: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ContractError(f"tag must be one of {TAGS}, got {self.tag!r}")
        if not self.name:
            self.name = f"{self.tag}-{self.seed}"
        img_shapes, txt_shapes = self.arch.weight_shapes()
        for group, shapes in ((self.image_weights, img_shapes), (self.text_weights, txt_shapes)):
            for key, shape in shapes.items():
                if key not in group:
                    raise ContractError(f"missing weight {key!r}")
                arr = np.asarray(group[key], dtype=np.float64)
                if arr.shape != shape:
                    raise ShapeMismatchError(
                        f"weight {key!r} has shape {arr.shape}, arch needs {shape}", 0
                    )
                arr.setflags(write=False)
                group[key] = arr
        self._token_index = {t: i for i, t in enumerate(self.arch.vocab)}

    def __eq__(self, other):
        if not isinstance(other, EncoderPair):
            return NotImplemented
        return (
            self.arch == other.arch
            and self.seed == other.seed
            and self.tag == other.tag
            and self.name == other.name
            and all(np.array_equal(self.image_weights[k], other.image_weights[k]) for k in IMAGE_KEYS)
            and all(np.array_equal(self.text_weights[k], other.text_weights[k]) for k in TEXT_KEYS)
        )

    __hash__ = None

    def weight_vector(self):
        parts = [self.image_weights[k].ravel() for k in IMAGE_KEYS]
        parts += [self.text_weights[k].ravel() for k in TEXT_KEYS]
        return np.concatenate(parts)


# ---------------------------------------------------------------------------
# forward maps


def image_branch(tape, pair, x):
    """Record the image branch on ``tape``; ``x`` is a ``(B, H, W)`` node."""
    a = pair.arch
    w = pair.image_weights
    pooled = tape.reshape(tape.patch_mean(x, a.patch), (x.shape[0], a.n_patches))
    h = tape.tanh(tape.affine(pooled, w["W1"], w["b1"]))
    return tape.normalize(tape.affine(h, w["W2"], w["b2"]))


def _check_images(pair, pixels):
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[None]
    a = pair.arch
    if pixels.shape[1:] != (a.height, a.width):
        raise ContractError(
            f"image shape {pixels.shape[1:]} does not match encoder {(a.height, a.width)}"
        )
    return pixels


def encode_images(pair, pixels):
    """Unit-norm embeddings ``(B, d)`` for a stack of images ``(B, H, W)``."""
    pixels = _check_images(pair, pixels)
    a = pair.arch
    w = pair.image_weights
    pooled = kernels.patch_mean(pixels, a.patch).reshape(len(pixels), a.n_patches)
    h = np.tanh(pooled @ w["W1"].T + w["b1"])
    z = h @ w["W2"].T + w["b2"]
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(n <= NORM_FLOOR):
        raise DegenerateVectorError("image embedding collapsed to zero")
    return z / n


def encode_image(pair, image):
    px = image.pixels if hasattr(image, "pixels") else image
    return encode_images(pair, np.asarray(px)[None])[0]


def bag_of_words(pair, tokens):
    counts = np.zeros(pair.arch.vocab_size)
    for tok in tokens:
        i = pair._token_index.get(tok)
        if i is None:
            raise IngestionError(tok)
        counts[i] += 1.0
    return counts


def _bags(pair, reports):
    bags = np.stack([bag_of_words(pair, r.tokens) for r in reports])
    empty = [r.id for r, b in zip(reports, bags) if not b.any()]
    if empty:
        raise DegenerateVectorError(f"report {empty[0]!r} has no tokens")
    return bags


def encode_texts(pair, reports):
    bags = _bags(pair, list(reports))
    z = bags @ pair.text_weights["W"].T + pair.text_weights["b"]
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(n <= NORM_FLOOR):
        raise DegenerateVectorError("text embedding collapsed to zero")
    return z / n


def encode_text(pair, report):
    return encode_texts(pair, [report])[0]


# ---------------------------------------------------------------------------
# training


def init_pair(arch, seed, tag="domain", name=""):
    rng = Rng(seed).child("init")
    img_shapes, txt_shapes = arch.weight_shapes()

    def draw(shapes):
        out = {}
        for key, shape in shapes.items():
            if len(shape) == 2:
                out[key] = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), shape)
            else:
                out[key] = np.zeros(shape)
        return out

    return EncoderPair(arch, draw(img_shapes), draw(txt_shapes), seed, tag, name)


def alignment_loss(pair_weights, arch, pixels, bags, temperature, tape=None):
    """Image-to-text InfoNCE over in-batch negatives; returns (tape, loss, leaves)."""
    t = tape or Tape()
    leaves = {k: t.input(v) for k, v in pair_weights.items()}
    n = len(pixels)
    x = t.const(pixels)
    pooled = t.reshape(t.patch_mean(x, arch.patch), (n, arch.n_patches))
    h = t.tanh(t.affine(pooled, leaves["W1"], leaves["b1"]))
    e = t.normalize(t.affine(h, leaves["W2"], leaves["b2"]))
    k = t.normalize(t.affine(t.const(bags), leaves["W"], leaves["b"]))
    sims = t.dot(t.reshape(e, (n, 1, arch.embed_dim)), t.reshape(k, (1, n, arch.embed_dim)))
    lse = t.logsumexp(t.scale(sims, 1.0 / temperature))
    pos = t.scale(t.dot(e, k), 1.0 / temperature)
    loss = t.scale(t.sum(t.sub(lse, pos)), 1.0 / n)
    return t, loss, leaves


def label_accuracy(pair, images, reports):
    """Top-1 image->text retrieval; a hit when the retrieved report shares the label."""
    if not images:
        return 1.0
    v = encode_images(pair, np.stack([im.pixels for im in images]))
    t = encode_texts(pair, reports)
    top = kernels.topk_indices(v @ t.T, 1)[:, 0]
    hits = [images[i].label == reports[j].label for i, j in enumerate(top)]
    return float(np.mean(hits))


@dataclass
class TrainingInfo:
    final_loss: float
    heldout_accuracy: float
    epochs: int
    n_train: int
    n_heldout: int


def fit_aligned_pair(
    corpus,
    arch=None,
    seed=0,
    epochs=300,
    lr=0.01,
    *,
    tag="domain",
    name="",
    temperature=0.1,
    betas=(0.9, 0.999),
    holdout=0.2,
    min_accuracy=0.9,
):
    """Full-batch Adam on the alignment loss (whole corpus every step).

    ``corpus`` is a list of ``(Image, Report)`` pairs with matching labels.
    Returns ``(pair, TrainingInfo)``; raises TrainingDivergedError when the
    held-out label accuracy stays under ``min_accuracy``.
    """
    corpus = list(corpus)
    if not corpus:
        raise ContractError("training corpus is empty")
    for im, rep in corpus:
        if im.label != rep.label:
            raise ContractError(f"pair ({im.id}, {rep.id}) has mismatched labels")
    arch = arch or EncoderArch()
    n = len(corpus)
    n_held = int(round(holdout * n)) if n >= 5 else 0
    order = Rng(seed).child("split").permutation(n)
    held = [corpus[i] for i in sorted(order[:n_held])]
    train = [corpus[i] for i in sorted(order[n_held:])]

    pair = init_pair(arch, seed, tag, name)
    weights = {**{k: v.copy() for k, v in pair.image_weights.items()},
               **{k: v.copy() for k, v in pair.text_weights.items()}}
    pixels = np.stack([im.pixels for im, _ in train])
    if pixels.shape[1:] != (arch.height, arch.width):
        raise ContractError(f"corpus images {pixels.shape[1:]} do not match arch")
    bags = _bags(pair, [rep for _, rep in train])
    m1 = {k: np.zeros_like(v) for k, v in weights.items()}
    m2 = {k: np.zeros_like(v) for k, v in weights.items()}
    for step in range(1, epochs + 1):
        tape, loss, leaves = alignment_loss(weights, arch, pixels, bags, temperature)
        grads = backward(tape, loss, list(leaves.values()))
        for key, g in zip(leaves, grads):
            m1[key] = betas[0] * m1[key] + (1 - betas[0]) * g
            m2[key] = betas[1] * m2[key] + (1 - betas[1]) * g * g
            mhat = m1[key] / (1 - betas[0] ** step)
            vhat = m2[key] / (1 - betas[1] ** step)
            weights[key] = weights[key] - lr * mhat / (np.sqrt(vhat) + 1e-8)
    tape, loss, _ = alignment_loss(weights, arch, pixels, bags, temperature)
    loss_val = float(loss.value)

    pair = EncoderPair(
        arch,
        {k: weights[k] for k in IMAGE_KEYS},
        {k: weights[k] for k in TEXT_KEYS},
        seed,
        tag,
        name,
    )
    eval_set = held if held else train
    acc = label_accuracy(pair, [im for im, _ in eval_set], [rep for _, rep in eval_set])
    log.info("trained %s: loss=%.4f heldout_acc=%.3f", pair.name, loss_val, acc)
    if acc < min_accuracy:
        raise TrainingDivergedError(acc, min_accuracy)
    return pair, TrainingInfo(loss_val, acc, epochs, len(train), len(held))


def train_aligned_pair(corpus, arch=None, seed=0, epochs=300, lr=0.01, **kw):
    return fit_aligned_pair(corpus, arch, seed, epochs, lr, **kw)[0]


# ---------------------------------------------------------------------------
# surrogate sets


@dataclass(frozen=True)
class SurrogateSet:
    members: tuple
    train_idx: tuple
    test_idx: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "train_idx", tuple(self.train_idx))
        object.__setattr__(self, "test_idx", tuple(self.test_idx))
        if not self.train_idx:
            raise ContractError("F_train must be nonempty")
        if set(self.train_idx) & set(self.test_idx):
            raise ContractError("train and test surrogate subsets overlap")
        if sorted(self.train_idx + self.test_idx) != list(range(len(self.members))):
            raise ContractError("train/test indices must partition the members")
        if any(m.tag == "victim" for m in self.members):
            raise ContractError("a victim-tagged encoder cannot be a surrogate")

    @classmethod
    def split(cls, members, test_names=()):
        members = tuple(members)
        test = tuple(i for i, m in enumerate(members) if m.name in set(test_names))
        train = tuple(i for i in range(len(members)) if i not in test)
        return cls(members, train, test)

    @property
    def train(self):
        return [self.members[i] for i in self.train_idx]

    @property
    def test(self):
        return [self.members[i] for i in self.test_idx]

    @property
    def names(self):
        return [m.name for m in self.members]

    def assert_excludes(self, victim):
        if victim.name in self.names or any(m is victim for m in self.members):
            raise ContractError(f"victim {victim.name!r} is in the surrogate set")


# ---------------------------------------------------------------------------
# serialization


def _fmt(x):
    return format(float(x), ".17g")


def _array_json(arr):
    arr = np.asarray(arr, dtype=np.float64)
    data = ",".join(_fmt(v) for v in arr.ravel())
    return f'{{"shape":{json.dumps(list(arr.shape))},"data":[{data}]}}'


def dumps_pair(pair):
    img = ",".join(f'"{k}":{_array_json(pair.image_weights[k])}' for k in IMAGE_KEYS)
    txt = ",".join(f'"{k}":{_array_json(pair.text_weights[k])}' for k in TEXT_KEYS)
    return (
        "{"
        f'"arch":{json.dumps(pair.arch.to_dict())},\n'
        f'"image_weights":{{{img}}},\n'
        f'"text_weights":{{{txt}}},\n'
        f'"seed":{int(pair.seed)},"tag":{json.dumps(pair.tag)},"name":{json.dumps(pair.name)}'
        "}\n"
    )


def save_pair(pair, path):
    Path(path).write_text(dumps_pair(pair), encoding="ascii")


def _array_from(obj, key, expected):
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise ParseError(f"weight {key!r} lacks shape/data", 0)
    shape = tuple(int(s) for s in obj["shape"])
    data = obj["data"]
    if len(data) != int(np.prod(shape, dtype=np.int64)):
        raise ShapeMismatchError(
            f"weight {key!r}: {len(data)} values for shape header {list(shape)}", 0
        )
    if shape != expected:
        raise ShapeMismatchError(
            f"weight {key!r}: shape header {list(shape)} but arch needs {list(expected)}", 0
        )
    return np.asarray(data, dtype=np.float64).reshape(shape)


def loads_pair(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed encoder file: {exc.msg}", exc.pos) from None
    missing = [k for k in ("arch", "image_weights", "text_weights", "seed", "tag") if k not in doc]
    if missing:
        raise ParseError(f"missing top-level keys {missing}", 0)
    try:
        arch = EncoderArch.from_dict(doc["arch"])
    except (KeyError, TypeError, ContractError) as exc:
        raise ParseError(f"bad arch block: {exc}", 0) from None
    img_shapes, txt_shapes = arch.weight_shapes()
    img = {k: _array_from(doc["image_weights"].get(k), k, s) for k, s in img_shapes.items()}
    txt = {k: _array_from(doc["text_weights"].get(k), k, s) for k, s in txt_shapes.items()}
    return EncoderPair(arch, img, txt, int(doc["seed"]), doc["tag"], doc.get("name", ""))


def load_pair(path):
    return loads_pair(Path(path).read_text(encoding="ascii"))
