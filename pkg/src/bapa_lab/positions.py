"""Position-id assignment for a ``[system | image | user]`` token sequence.

Two schemes are registered:

``sequential``
    Every token, image tokens included, gets the next integer id in raster
    order: ``0, 1, ..., i+j+k-1``.
``bapa``
    Balanced position assignment. All ``j`` image tokens share the id ``i``
    (the id the first image token would have had) and the user span continues
    from ``i+1``, so text-to-image relative distances no longer depend on which
    image token is involved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, SchemeError


@dataclass(frozen=True)
class ModalityLayout:
    system_len: int
    image_len: int
    user_len: int
    num_images: int = 1

    def __post_init__(self):
        if self.num_images != 1:
            raise ConfigError("only single-image layouts are supported")
        if self.system_len < 0:
            raise ConfigError("system_len must be >= 0")
        if self.image_len < 1:
            raise ConfigError("image_len must be >= 1")
        if self.user_len < 1:
            raise ConfigError("user_len must be >= 1")

    @property
    def total(self) -> int:
        return self.system_len + self.image_len + self.user_len

    @property
    def image_slice(self) -> slice:
        return slice(self.system_len, self.system_len + self.image_len)

    @property
    def user_slice(self) -> slice:
        return slice(self.system_len + self.image_len, self.total)


def assign_sequential(layout: ModalityLayout) -> np.ndarray:
    return np.arange(layout.total, dtype=np.int64)


def assign_bapa(layout: ModalityLayout) -> np.ndarray:
    i, j, k = layout.system_len, layout.image_len, layout.user_len
    p_img = i
    return np.concatenate(
        [
            np.arange(i, dtype=np.int64),
            np.full(j, p_img, dtype=np.int64),
            np.arange(p_img + 1, p_img + 1 + k, dtype=np.int64),
        ]
    )


SCHEMES: dict[str, Callable[[ModalityLayout], np.ndarray]] = {
    "sequential": assign_sequential,
    "bapa": assign_bapa,
}


def scheme_for(name: str) -> Callable[[ModalityLayout], np.ndarray]:
    try:
        return SCHEMES[name]
    except KeyError:
        raise SchemeError(
            f"unknown position scheme {name!r}; expected one of {sorted(SCHEMES)}"
        ) from None
