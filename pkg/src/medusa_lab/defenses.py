"""Closed-form input transformations applied before the victim encodes an image."""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError
from .records import Image

KINDS = ("none", "bit_reduce", "resize_pad")
# learned purifiers; names kept so result files stay schema-stable
RESERVED = ("comdefend", "diffpure")


@dataclass(frozen=True)
class DefenseConfig:
    """``resize_*``/``final`` left as None resolve against the image height:
    r in [H, ceil(1.1 H)], padded to ceil(1.1 H). The retriever's input
    adapter scales the result back to its native size."""

    kind: str = "none"
    bits: int = 4
    resize_min: int = None
    resize_max: int = None
    final: int = None
    seed: int = 0

    def __post_init__(self):
        if self.kind in RESERVED:
            raise ContractError(f"defense {self.kind!r} needs a trained network and is not available")
        if self.kind not in KINDS:
            raise ContractError(f"unknown defense kind {self.kind!r}")
        if not 1 <= int(self.bits) <= 8:
            raise ContractError(f"bits must be in 1..8, got {self.bits}")
        if None not in (self.resize_min, self.resize_max, self.final):
            self.sizes(self.final)

    @property
    def label(self):
        if self.kind == "bit_reduce":
            return f"bit_reduce{self.bits}"
        return self.kind

    def sizes(self, height):
        hi = self.resize_max if self.resize_max is not None else math.ceil(1.1 * height)
        lo = self.resize_min if self.resize_min is not None else height
        fin = self.final if self.final is not None else hi
        if not 1 <= lo <= hi <= fin:
            raise ContractError(f"need 1 <= resize_min <= resize_max <= final, got {lo}, {hi}, {fin}")
        return lo, hi, fin

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown defense keys: {sorted(unknown)}")
        return cls(**d)


def bit_depth_reduce(image, bits):
    if not isinstance(bits, (int, np.integer)) or not 1 <= bits <= 8:
        raise ContractError(f"bits must be an integer in 1..8, got {bits!r}")
    px = kernels.quantize(np.clip(image.pixels, 0.0, 1.0), 2**bits - 1)
    return Image(image.id, image.label, px)


def random_resize_pad(image, cfg, rng):
    """Bilinear resize to r x r, then zero-pad at a random offset to final x final."""
    lo, hi, fin = cfg.sizes(image.shape[0])
    r = int(rng.integers(lo, hi + 1))
    top = int(rng.integers(0, fin - r + 1))
    left = int(rng.integers(0, fin - r + 1))
    out = np.zeros((fin, fin))
    out[top : top + r, left : left + r] = kernels.bilinear_resize(image.pixels, r, r)
    return Image(image.id, image.label, np.clip(out, 0.0, 1.0))


def apply_defense(image, cfg, rng=None):
    if cfg.kind == "none":
        return image
    if cfg.kind == "bit_reduce":
        return bit_depth_reduce(image, int(cfg.bits))
    if cfg.kind == "resize_pad":
        if rng is None:
            raise ContractError("resize_pad needs an rng")
        return random_resize_pad(image, cfg, rng)
    raise ContractError(f"unknown defense kind {cfg.kind!r}")
