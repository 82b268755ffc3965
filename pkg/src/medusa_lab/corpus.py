"""Synthetic chest-film-like images, keyword reports, and their file formats."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, ParseError
from .numkit import Rng
from .records import Image, Report
from .vocab import FILLER, KEYWORDS


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    height: int = 32
    width: int = 32
    noise: float = 0.03
    base_range: tuple = (0.2, 0.5)
    n_texture: int = 4
    texture_amp: float = 0.03
    blob_count: tuple = (2, 4)
    blob_radius: tuple = (3.0, 5.0)
    blob_intensity: tuple = (0.4, 0.6)
    collimation: tuple = (0, 0)  # dark margin per side, pixels (inclusive); (0, 0) = off
    report_len: tuple = (8, 12)
    keywords_per_report: tuple = (3, 5)
    keyword_sets: dict = field(default_factory=lambda: {k: list(v) for k, v in KEYWORDS.items()})
    filler: tuple = FILLER
    seed: int = 0

    def __post_init__(self):
        for name in ("base_range", "blob_count", "blob_radius", "blob_intensity",
                     "collimation", "report_len", "keywords_per_report", "filler"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.height < 4 or self.width < 4:
            raise ConfigError("images must be at least 4x4")
        if not self.filler or not self.keyword_sets or any(not v for v in self.keyword_sets.values()):
            raise ConfigError("vocabulary is degenerate: empty keyword or filler set")
        if self.blob_count[0] < 1:
            raise ConfigError("disease images need at least one blob")
        if self.keywords_per_report[0] < 1 or self.report_len[0] < self.keywords_per_report[1]:
            raise ConfigError("report length must cover the keyword count")
        if self.noise < 0:
            raise ConfigError("noise level must be nonnegative")
        if self.collimation[0] < 0 or 2 * self.collimation[1] >= min(self.height, self.width):
            raise ConfigError("collimation margins must leave a visible field")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown corpus keys: {sorted(extra)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# image synthesis


def _grid(spec):
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    return yy.astype(np.float64), xx.astype(np.float64)


def _gauss(yy, xx, cy, cx, sy, sx):
    return np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))


def _background(rng, spec):
    yy, xx = _grid(spec)
    h, w = spec.height, spec.width
    img = np.full((h, w), rng.uniform(*spec.base_range))
    # darker lung fields either side of the midline
    for cx in (0.3 * w, 0.7 * w):
        img -= 0.12 * _gauss(yy, xx, 0.5 * h, cx, 0.3 * h, 0.14 * w)
    for _ in range(spec.n_texture):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(0.15, 0.3) * h
        img += rng.uniform(-spec.texture_amp, spec.texture_amp) * _gauss(yy, xx, cy, cx, s, s)
    return img


def _pneumonia(rng, spec, img):
    yy, xx = _grid(spec)
    h, w = spec.height, spec.width
    for _ in range(int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))):
        r = rng.uniform(*spec.blob_radius)
        cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
        img += rng.uniform(*spec.blob_intensity) * _gauss(yy, xx, cy, cx, r / 1.5, r / 1.5)
    return img


def _edema(rng, spec, img):
    yy, xx = _grid(spec)
    h, w = spec.height, spec.width
    amp = rng.uniform(*spec.blob_intensity) * 0.8
    for cx in (0.35 * w, 0.65 * w):
        img += amp * _gauss(yy, xx, 0.45 * h, cx + rng.uniform(-2, 2), 0.28 * h, 0.08 * w)
    return img


def _fracture(rng, spec, img):
    yy, xx = _grid(spec)
    h, w = spec.height, spec.width
    theta = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w)
    dist = np.abs((yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta))
    along = np.abs((yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta))
    # a long lucent (dark) line
    line = np.exp(-0.5 * (dist / 1.5) ** 2) * (along < 0.6 * h)
    img -= rng.uniform(0.4, 0.55) * line
    return img


def _cardiomegaly(rng, spec, img):
    yy, xx = _grid(spec)
    h, w = spec.height, spec.width
    img += rng.uniform(0.35, 0.5) * _gauss(yy, xx, 0.62 * h, 0.5 * w, 0.2 * h, 0.26 * w)
    return img


_RENDER = {
    "normal": lambda rng, spec, img: img,
    "pneumonia": _pneumonia,
    "edema": _edema,
    "fracture": _fracture,
    "cardiomegaly": _cardiomegaly,
}


def to_grid(pixels):
    """Clip to [0, 1] and snap onto the 8-bit grid."""
    return kernels.quantize(np.clip(pixels, 0.0, 1.0), 255)


def gen_image(rng, label, spec, id):
    if label not in _RENDER:
        raise ConfigError(f"no renderer for label {label!r}")
    img = _RENDER[label](rng, spec, _background(rng, spec))
    img = _collimate(rng, spec, img + rng.normal(0.0, spec.noise, img.shape))
    return Image(id, label, to_grid(img))


def _collimate(rng, spec, img):
    """Dark shutter margins of random width on each side."""
    lo, hi = spec.collimation
    if hi == 0:
        return img
    top, bottom, left, right = (int(m) for m in rng.integers(lo, hi + 1, 4))
    level = rng.uniform(0.0, 0.05)
    h, w = img.shape
    img[:top, :] = level
    img[h - bottom :, :] = level
    img[:, :left] = level
    img[:, w - right :] = level
    return img


def gen_report(rng, label, spec, id):
    if label not in spec.keyword_sets:
        raise ConfigError(f"no keywords for label {label!r}")
    keys = spec.keyword_sets[label]
    n_kw = int(rng.integers(spec.keywords_per_report[0], spec.keywords_per_report[1] + 1))
    n_tot = int(rng.integers(spec.report_len[0], spec.report_len[1] + 1))
    toks = [keys[i] for i in rng.integers(0, len(keys), n_kw)]
    toks += [spec.filler[i] for i in rng.integers(0, len(spec.filler), n_tot - n_kw)]
    order = rng.permutation(len(toks))
    return Report(id, label, tuple(toks[i] for i in order))


def gen_pairs(spec, counts, rng, prefix):
    """``counts`` maps label -> n; returns interleaved (Image, Report) pairs."""
    out = []
    for label, n in counts.items():
        for i in range(n):
            r = rng.child(label, i)
            ident = f"{prefix}-{label}-{i:04d}"
            out.append((gen_image(r.child("img"), label, spec, ident),
                        gen_report(r.child("txt"), label, spec, ident)))
    return out


@dataclass
class CorpusBundle:
    images: list  # attack images, all normal-labeled
    reports: list  # ground-truth report for each attack image
    kb: list
    target_pool: list


def gen_corpus(spec, labels=("normal", "pneumonia"), kb_per_class=100, n_attack=100,
               target_pool_size=20, rng=None):
    """Knowledge base, normal attack images with their reports, and target reports.

    Draws from ``rng`` when given, else from the spec's own seed.
    """
    normal, target = labels
    if kb_per_class < 1 or n_attack < 0 or target_pool_size < 1:
        raise ConfigError("corpus sizes must be positive")
    rng = rng if rng is not None else Rng(spec.seed).child("corpus")
    kb = []
    for label in labels:
        for i in range(kb_per_class):
            kb.append(gen_report(rng.child("kb", label, i), label, spec, f"kb-{label}-{i:04d}"))
    pool = [gen_report(rng.child("pool", i), target, spec, f"tgt-{target}-{i:04d}")
            for i in range(target_pool_size)]
    pairs = gen_pairs(spec, {normal: n_attack}, rng.child("attack"), "atk")
    return CorpusBundle([p[0] for p in pairs], [p[1] for p in pairs], kb, pool)


# ---------------------------------------------------------------------------
# file formats


def write_pgm(path, pixels):
    px = np.asarray(pixels, dtype=np.float64)
    h, w = px.shape
    data = np.floor(np.clip(px, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", pos)
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ParseError("not a binary PGM (P5)", 0)
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1
    body = raw[pos : pos + w * h]
    if len(body) != w * h or maxval != 255:
        raise ParseError("PGM body size does not match header", pos)
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w) / 255.0


def write_images(directory, images, stem="images"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for im in images:
        name = f"{im.id}.pgm"
        write_pgm(directory / name, im.pixels)
        manifest.append({"id": im.id, "label": im.label, "file": name})
    (directory / f"{stem}.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return directory / f"{stem}.json"


def read_images(manifest_path):
    manifest_path = Path(manifest_path)
    items = json.loads(manifest_path.read_text())
    return [Image(m["id"], m["label"], read_pgm(manifest_path.parent / m["file"])) for m in items]


def write_reports(path, reports):
    lines = [json.dumps({"id": r.id, "label": r.label, "text": r.text}) for r in reports]
    Path(path).write_text("\n".join(lines) + "\n")


def read_reports(path):
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(Report.from_text(obj["id"], obj["label"], obj["text"]))
        except (json.JSONDecodeError, KeyError) as exc:
            raise ParseError(f"bad report on line {lineno}: {exc}", 0) from None
    return out
