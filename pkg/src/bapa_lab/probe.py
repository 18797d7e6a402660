"""Synthetic 3x3 composite-grid probe.

Each "image" is one pattern from a :class:`PatternLibrary`, rendered as
``c x c`` patches (``c = 1`` by default). A composite holds a key pattern at one
grid slot and eight distractors elsewhere; the caption names a pattern, and
the answer is *yes* when that pattern appears in the grid. Slots are indexed
row-major, ``slot = 3 * row + col``.

For the eval split every key gets all nine slot variants with the same eight
distractors, plus a matched negative per slot in which the key cell holds a
substitute pattern instead. Each slot therefore sees exactly the same set of
(key, caption) pairs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import MultimodalInput
from .positions import ModalityLayout

GRID = 3
NUM_SLOTS = GRID * GRID
DATASET_FORMAT = "bapa-lab-probe"
DATASET_VERSION = 1
TRAIN, EVAL = 0, 1


@dataclass(frozen=True)
class PatternLibrary:
    vocab_size: int
    patch_dim: int
    seed: int
    patterns: np.ndarray  # (vocab_size, cell_size**2, patch_dim)

    @property
    def cell_size(self) -> int:
        return int(round(np.sqrt(self.patterns.shape[1])))


def gen_library(vocab_size: int, patch_dim: int, seed: int, cell_size: int = 1,
                min_distance: float = 1e-3) -> PatternLibrary:
    if vocab_size < NUM_SLOTS + 1:
        raise ConfigError(f"vocab_size must be >= {NUM_SLOTS + 1} (key + 8 distractors + substitute)")
    if patch_dim < 1 or cell_size < 1:
        raise ConfigError("patch_dim and cell_size must be >= 1")
    rng = np.random.default_rng(seed)
    pats = rng.standard_normal((vocab_size, cell_size * cell_size, patch_dim))
    flat = pats.reshape(vocab_size, -1)
    d2 = np.sum((flat[:, None] - flat[None]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    if np.sqrt(d2.min()) <= min_distance:
        raise ConfigError("generated patterns are not pairwise distinct; try another seed")
    pats.setflags(write=False)
    return PatternLibrary(vocab_size, patch_dim, seed, pats)


@dataclass(frozen=True)
class PromptFormat:
    """Token layout: ``[SYS_0..SYS_{i-1}] [image] [QUESTION, caption]``.

    Caption ids are the pattern ids ``0..vocab_size-1``; special tokens follow.
    """

    vocab_size: int
    system_len: int = 2

    @property
    def question_id(self) -> int:
        return self.vocab_size + self.system_len

    @property
    def text_vocab_size(self) -> int:
        return self.vocab_size + self.system_len + 1

    def layout(self, image_len: int) -> ModalityLayout:
        return ModalityLayout(self.system_len, image_len, 2)

    def system_tokens(self) -> np.ndarray:
        return np.arange(self.vocab_size, self.vocab_size + self.system_len)

    def user_tokens(self, caption_ids) -> np.ndarray:
        c = np.atleast_1d(np.asarray(caption_ids, dtype=np.int64))
        out = np.empty((c.size, 2), dtype=np.int64)
        out[:, 0] = self.question_id
        out[:, 1] = c
        return out


@dataclass(frozen=True)
class CompositeSample:
    key_id: int
    caption_id: int
    distractor_ids: tuple
    slot: int
    label: int  # 1 = yes
    cells: tuple  # pattern id per grid cell, row-major

    def patch_grid(self, lib: PatternLibrary) -> np.ndarray:
        return render_grids(lib, np.asarray(self.cells)[None])[0]


def render_grids(lib: PatternLibrary, cells: np.ndarray) -> np.ndarray:
    """Pattern ids per cell (N, 9) -> raster-order patches (N, 9*c*c, patch_dim)."""
    c = lib.cell_size
    P = lib.patch_dim
    n = cells.shape[0]
    g = lib.patterns[cells].reshape(n, GRID, GRID, c, c, P)
    return g.transpose(0, 1, 3, 2, 4, 5).reshape(n, NUM_SLOTS * c * c, P)


def cell_token_indices(slot: int, cell_size: int = 1) -> np.ndarray:
    """Raster token indices (within the image span) covered by grid cell ``slot``."""
    row, col = divmod(slot, GRID)
    side = GRID * cell_size
    rr, cc = np.meshgrid(np.arange(cell_size), np.arange(cell_size), indexing="ij")
    return ((row * cell_size + rr) * side + col * cell_size + cc).reshape(-1)


_COLUMNS = ("key_id", "caption_id", "distractors", "slot", "label", "cells", "split")


@dataclass
class ProbeDataset:
    library: PatternLibrary
    key_id: np.ndarray
    caption_id: np.ndarray
    distractors: np.ndarray  # (N, 8)
    slot: np.ndarray
    label: np.ndarray
    cells: np.ndarray  # (N, 9)
    split: np.ndarray  # TRAIN / EVAL
    manifest: dict

    def __len__(self):
        return int(self.key_id.shape[0])

    def indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def sample(self, idx: int) -> CompositeSample:
        return CompositeSample(
            int(self.key_id[idx]), int(self.caption_id[idx]),
            tuple(int(x) for x in self.distractors[idx]), int(self.slot[idx]),
            int(self.label[idx]), tuple(int(x) for x in self.cells[idx]),
        )

    def samples(self, split: int):
        return [self.sample(i) for i in self.indices(split)]

    @property
    def prompt(self) -> PromptFormat:
        return PromptFormat(self.library.vocab_size, int(self.manifest.get("system_len", 2)))

    @property
    def image_len(self) -> int:
        return NUM_SLOTS * self.library.cell_size ** 2

    @property
    def content_hash(self) -> str:
        return self.manifest["content_sha256"]

    def inputs(self, idx, cells: np.ndarray | None = None) -> MultimodalInput:
        """Batched model input for rows ``idx`` (optionally overriding the cells)."""
        idx = np.atleast_1d(np.asarray(idx))
        cells = self.cells[idx] if cells is None else cells
        return self.inputs_for(self.caption_id[idx], render_grids(self.library, cells))

    def inputs_for(self, caption_ids, patch_grids) -> MultimodalInput:
        pf = self.prompt
        caption_ids = np.atleast_1d(caption_ids)
        n = caption_ids.shape[0]
        return MultimodalInput(
            layout=pf.layout(self.image_len),
            system_tokens=np.tile(pf.system_tokens(), (n, 1)),
            patch_grid=patch_grids,
            user_tokens=pf.user_tokens(caption_ids),
        )

    def __eq__(self, other):
        if not isinstance(other, ProbeDataset):
            return NotImplemented
        return (
            self.manifest == other.manifest
            and np.array_equal(self.library.patterns, other.library.patterns)
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in _COLUMNS)
        )


def _hash_content(patterns, columns: dict, manifest: dict) -> str:
    h = hashlib.sha256()
    body = {k: v for k, v in manifest.items() if k != "content_sha256"}
    h.update(json.dumps(body, sort_keys=True).encode())
    h.update(np.ascontiguousarray(patterns, dtype="<f8").tobytes())
    for name in _COLUMNS:
        h.update(name.encode())
        h.update(np.ascontiguousarray(columns[name], dtype="<i8").tobytes())
    return h.hexdigest()


def _place(distractors, item, slot):
    cells = list(distractors)
    cells.insert(slot, item)
    return cells


def gen_probe(lib: PatternLibrary, num_keys: int, seed: int, train_size: int = 0,
              disjoint: bool = False, system_len: int = 2) -> ProbeDataset:
    """Eval split of ``num_keys * 9 * 2`` composites plus ``train_size`` random ones."""
    V = lib.vocab_size
    if num_keys < 1 or num_keys > V - NUM_SLOTS:
        raise ConfigError(f"num_keys must be in [1, {V - NUM_SLOTS}] for vocab_size {V}")
    if train_size < 0:
        raise ConfigError("train_size must be >= 0")
    if disjoint and V - num_keys < NUM_SLOTS + 1:
        raise ConfigError("not enough non-eval patterns for a disjoint train split")
    rng = np.random.default_rng(seed)
    rows = []
    keys = rng.choice(V, size=num_keys, replace=False)
    for key in keys:
        others = rng.permutation(np.delete(np.arange(V), key))[:NUM_SLOTS]
        distractors, substitute = others[:8], others[8]
        for slot in range(NUM_SLOTS):
            rows.append((key, key, distractors, slot, 1, _place(distractors, key, slot), EVAL))
            rows.append((key, key, distractors, slot, 0, _place(distractors, substitute, slot), EVAL))
    pool = np.setdiff1d(np.arange(V), keys) if disjoint else np.arange(V)
    for _ in range(train_size):
        key = int(rng.choice(pool))
        others = rng.permutation(np.delete(np.arange(V), key))[:NUM_SLOTS]
        distractors, substitute = others[:8], others[8]
        slot = int(rng.integers(NUM_SLOTS))
        label = int(rng.integers(2))
        item = key if label else substitute
        rows.append((key, key, distractors, slot, label, _place(distractors, item, slot), TRAIN))
    cols = {
        "key_id": np.array([r[0] for r in rows], dtype=np.int64),
        "caption_id": np.array([r[1] for r in rows], dtype=np.int64),
        "distractors": np.array([r[2] for r in rows], dtype=np.int64).reshape(-1, 8),
        "slot": np.array([r[3] for r in rows], dtype=np.int64),
        "label": np.array([r[4] for r in rows], dtype=np.int64),
        "cells": np.array([r[5] for r in rows], dtype=np.int64).reshape(-1, NUM_SLOTS),
        "split": np.array([r[6] for r in rows], dtype=np.int64),
    }
    n_eval = int((cols["split"] == EVAL).sum())
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": int(seed),
        "library_seed": int(lib.seed),
        "vocab_size": int(V),
        "patch_dim": int(lib.patch_dim),
        "cell_size": int(lib.cell_size),
        "num_keys": int(num_keys),
        "system_len": int(system_len),
        "disjoint": bool(disjoint),
        "counts": {
            "train": int(train_size),
            "eval": n_eval,
            "eval_positive": n_eval // 2,
            "eval_negative": n_eval // 2,
        },
        "negatives": "matched: key cell replaced by a substitute pattern, caption unchanged",
    }
    manifest["content_sha256"] = _hash_content(lib.patterns, cols, manifest)
    return ProbeDataset(library=lib, manifest=manifest, **cols)


def save_dataset(ds: ProbeDataset, path) -> Path:
    """Write ``ds`` as an ``.npz`` container.

    Members: ``__manifest__`` (UTF-8 JSON), ``patterns`` (float64, shape
    ``(vocab, c*c, patch_dim)``) and one int64 column per sample field:
    key_id, caption_id, distractors (N, 8), slot, label, cells (N, 9), split
    (0 = train, 1 = eval). The manifest carries a SHA-256 of the content which
    is verified on load.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {c: getattr(ds, c) for c in _COLUMNS}
    arrays["patterns"] = np.asarray(ds.library.patterns, dtype=np.float64)
    arrays["__manifest__"] = np.frombuffer(json.dumps(ds.manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_dataset(path) -> ProbeDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            manifest = json.loads(bytes(z["__manifest__"]).decode())
            cols = {c: z[c] for c in _COLUMNS}
            patterns = z["patterns"]
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"unreadable dataset {path}: {exc}") from exc
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise FormatError(
            f"unsupported dataset format {manifest.get('format')!r} v{manifest.get('version')!r}"
        )
    if _hash_content(patterns, cols, manifest) != manifest.get("content_sha256"):
        raise FormatError(f"dataset {path} failed its content check (manifest or data modified)")
    patterns.setflags(write=False)
    lib = PatternLibrary(manifest["vocab_size"], manifest["patch_dim"], manifest["library_seed"], patterns)
    return ProbeDataset(library=lib, manifest=manifest, **cols)
