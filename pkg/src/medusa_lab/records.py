"""Plain records shared by every module."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Image:
    id: str
    label: str
    pixels: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"image {self.id}: expected 2-D pixels, got shape {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class Report:
    id: str
    label: str
    tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def text(self):
        return " ".join(self.tokens)

    @classmethod
    def from_text(cls, id, label, text):
        return cls(id, label, tuple(text.split()))
