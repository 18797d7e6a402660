"""Measurement harnesses: occlusion importance, encoder similarity, attention flow.

All three only read the model.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .model import Model, MultimodalInput
from .numeric import cosine
from .pgm import write_pgm
from .probe import EVAL, GRID, NUM_SLOTS, ProbeDataset, cell_token_indices

AGGREGATION = "per-sample min-max normalisation, then mean over samples"


# --- occlusion -----------------------------------------------------------------


@dataclass
class ImportanceMap:
    scores: np.ndarray  # (rows, cols): yes-logit drop when the region is masked
    reference_logit: float
    background: np.ndarray

    @property
    def argmax_region(self) -> int:
        return int(np.argmax(self.scores))


def region_tokens(side: int, rows: int, cols: int) -> list[np.ndarray]:
    """Raster token indices for each region of a ``rows x cols`` tiling of a ``side x side`` grid."""
    if rows < 1 or cols < 1 or side % rows or side % cols:
        raise ConfigError(f"a {rows}x{cols} region grid does not tile a {side}x{side} patch grid")
    rh, cw = side // rows, side // cols
    out = []
    for r in range(rows):
        for c in range(cols):
            rr, cc = np.meshgrid(np.arange(r * rh, (r + 1) * rh), np.arange(c * cw, (c + 1) * cw),
                                 indexing="ij")
            out.append((rr * side + cc).reshape(-1))
    return out


def occlusion_importance(model: Model, inp: MultimodalInput, regions=(GRID, GRID),
                         background=None) -> ImportanceMap:
    """Mask each region in turn with the background patch and record the yes-logit drop.

    ``inp`` is a single (unbatched) sample whose image span is a square patch grid.
    """
    patches = np.asarray(inp.patch_grid, dtype=np.float64)
    if patches.ndim != 2:
        raise ShapeError("occlusion expects a single sample")
    j, P = patches.shape
    side = int(round(np.sqrt(j)))
    if side * side != j:
        raise ShapeError(f"image span of {j} tokens is not a square grid")
    rows, cols = regions
    toks = region_tokens(side, rows, cols)
    bg = np.zeros(P) if background is None else np.asarray(background, dtype=np.float64)
    if bg.shape != (P,):
        raise ShapeError(f"background must be a patch of length {P}")
    n = len(toks)
    grids = np.repeat(patches[None], n + 1, axis=0)
    for r, t in enumerate(toks, start=1):
        grids[r, t] = bg
    batch = MultimodalInput(
        inp.layout,
        np.tile(np.asarray(inp.system_tokens), (n + 1, 1)),
        grids,
        np.tile(np.asarray(inp.user_tokens), (n + 1, 1)),
    )
    logit_yes = model.forward(batch).logit_yes.astype(np.float64)
    ref = float(logit_yes[0])
    scores = (ref - logit_yes[1:]).reshape(rows, cols)
    return ImportanceMap(scores=scores, reference_logit=ref, background=bg)


def sample_input(ds: ProbeDataset, idx: int) -> MultimodalInput:
    b = ds.inputs([idx])
    return MultimodalInput(b.layout, b.system_tokens[0], b.patch_grid[0], b.user_tokens[0])


def occlude_samples(model: Model, ds: ProbeDataset, idx, regions=(GRID, GRID), background=None):
    return [occlusion_importance(model, sample_input(ds, int(i)), regions, background) for i in idx]


def aggregate_importance(maps) -> np.ndarray:
    """Per-sample min-max normalisation, then the mean; constant maps contribute zeros."""
    out = []
    for m in maps:
        s = np.asarray(m.scores if isinstance(m, ImportanceMap) else m, dtype=np.float64)
        lo, hi = s.min(), s.max()
        out.append((s - lo) / (hi - lo) if hi > lo else np.zeros_like(s))
    if not out:
        raise ShapeError("no importance maps to aggregate")
    return np.mean(out, axis=0)


def key_region(slot: int, cell_size: int, regions=(GRID, GRID)) -> set[int]:
    """Regions overlapping grid cell ``slot``."""
    side = GRID * cell_size
    cell = set(cell_token_indices(slot, cell_size).tolist())
    return {r for r, t in enumerate(region_tokens(side, *regions)) if cell & set(t.tolist())}


def localization_rate(model: Model, ds: ProbeDataset, idx=None, regions=(GRID, GRID),
                      background=None) -> tuple[float, list[ImportanceMap]]:
    """Fraction of positive eval samples whose top region overlaps the key cell."""
    if idx is None:
        ev = ds.indices(EVAL)
        idx = ev[ds.label[ev] == 1]
    maps = occlude_samples(model, ds, idx, regions, background)
    c = ds.library.cell_size
    hits = [m.argmax_region in key_region(int(ds.slot[i]), c, regions) for i, m in zip(idx, maps)]
    return float(np.mean(hits)), maps


def importance_csv(scores) -> str:
    return matrix_csv(scores)


# --- similarity probe -------------------------------------------------------------


@dataclass(frozen=True)
class SimilarityRecord:
    slot: int
    score: float


def similarity_matrix(model: Model, ds: ProbeDataset, pattern_ids=None, slots=range(NUM_SLOTS),
                      background=None, caption_shift: int = 0) -> np.ndarray:
    """cos(mean_pool(g(f_v(grid))), E(caption)) for each (pattern, slot).

    The grid holds the pattern at the slot and the background patch elsewhere.
    With ``caption_shift != 0`` the caption is pattern ``(id + shift) % vocab``,
    which is absent from the grid.
    """
    lib = ds.library
    V = lib.vocab_size
    ids = np.arange(V) if pattern_ids is None else np.asarray(pattern_ids)
    slots = list(slots)
    bg = np.zeros(lib.patch_dim) if background is None else np.asarray(background, dtype=np.float64)
    c = lib.cell_size
    out = np.empty((ids.size, len(slots)))
    for s_i, slot in enumerate(slots):
        grids = np.broadcast_to(bg, (ids.size, ds.image_len, lib.patch_dim)).copy()
        grids[:, cell_token_indices(int(slot), c)] = lib.patterns[ids]
        pooled = model.encode_image(grids).astype(np.float64).mean(axis=1)
        captions = model.embed_text((ids + caption_shift) % V).astype(np.float64)
        for r in range(ids.size):
            out[r, s_i] = cosine(pooled[r], captions[r])
    return out


def similarity_probe(model: Model, ds: ProbeDataset, pattern_ids=None, slots=range(NUM_SLOTS),
                     background=None, caption_shift: int = 0) -> list[SimilarityRecord]:
    slots = list(slots)
    m = similarity_matrix(model, ds, pattern_ids, slots, background, caption_shift)
    return [SimilarityRecord(int(s), float(v)) for s, v in zip(slots, m.mean(axis=0))]


def similarity_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["slot", "score"])
    for r in records:
        w.writerow([r.slot, repr(r.score)])
    return buf.getvalue()


# --- attention information flow ------------------------------------------------------


@dataclass
class AttentionFlowMap:
    values: np.ndarray  # (j,) mean attention each image token receives from text queries
    total_mass: float  # mean over (samples, layers, heads, text queries) of text->image mass
    num_samples: int
    normalization: dict = field(default_factory=dict)

    @property
    def cv(self) -> float:
        return coefficient_of_variation(self.values)

    def grid(self) -> np.ndarray:
        side = int(round(np.sqrt(self.values.size)))
        if side * side != self.values.size:
            return self.values[None]
        return self.values.reshape(side, side)


def coefficient_of_variation(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = x.mean()
    return float(x.std() / m) if m > 0 else float("inf")


def flow_from_traces(traces, layout) -> AttentionFlowMap:
    """Average text->image attention from captured forward traces.

    Text queries are the user tokens; system tokens precede the image and cannot
    attend to it under the causal mask.
    """
    per_sample = []
    masses = []
    img, usr = layout.image_slice, layout.user_slice
    for tr in traces:
        if not tr.attention:
            raise ConfigError("forward traces were produced without attention capture")
        att = np.stack([np.asarray(a, dtype=np.float64) for a in tr.attention])  # (L, [B,] H, T, T)
        if att.ndim == 4:
            att = att[:, None]
        block = att[:, :, :, usr, img]  # (L, B, H, k, j)
        per_sample.append(block.mean(axis=(0, 2, 3)))
        masses.append(block.sum(axis=-1).mean(axis=(0, 2, 3)))
    per_sample = np.concatenate(per_sample, axis=0)
    masses = np.concatenate(masses, axis=0)
    return AttentionFlowMap(
        values=per_sample.mean(axis=0),
        total_mass=float(masses.mean()),
        num_samples=int(per_sample.shape[0]),
        normalization={
            "average_over": "samples, layers, heads, user-token queries",
            "queries": "user tokens",
            "keys": "image tokens",
        },
    )


def attention_flow(model: Model, ds: ProbeDataset, idx=None, batch_size: int = 256) -> AttentionFlowMap:
    idx = ds.indices(EVAL) if idx is None else np.asarray(idx)
    if idx.size == 0:
        raise ShapeError("no samples for flow analysis")
    traces = [model.forward(ds.inputs(idx[s:s + batch_size]), capture=True)
              for s in range(0, idx.size, batch_size)]
    return flow_from_traces(traces, ds.prompt.layout(ds.image_len))


# --- output helpers ---------------------------------------------------------------


def matrix_csv(m) -> str:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in m:
        w.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def write_matrix(out_dir, stem: str, m, comment: str) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    csv_path.write_text(matrix_csv(m))
    m2 = np.atleast_2d(np.asarray(m, dtype=np.float64))
    scale = max(1, 48 // max(m2.shape))
    pgm_path = write_pgm(out / f"{stem}.pgm", m2, scale=scale, comment=comment)
    return {"csv": csv_path, "pgm": pgm_path}
