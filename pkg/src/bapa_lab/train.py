"""Training: Adam on the yes/no cross-entropy, plus an optional alignment warm-up.

The warm-up is a contrastive stage that pulls the mean-pooled image embedding
of a grid holding one pattern towards the text embedding of that pattern's
caption id, in the spirit of the projector pre-alignment stage of LVLMs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import Model, loss_and_grads
from .probe import EVAL, NUM_SLOTS, TRAIN, ProbeDataset, cell_token_indices, render_grids

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1600
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    align_steps: int = 400
    align_temperature: float = 0.1
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.align_steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def alignment_loss_and_grads(model: Model, pooled_inputs: np.ndarray, caption_ids: np.ndarray,
                             temperature: float):
    """Symmetric InfoNCE between mean-pooled image embeddings and caption embeddings.

    ``pooled_inputs`` are patch grids (B, j, P); row ``b`` matches caption ``b``.
    Only encoder, projector and text-embedding parameters receive gradient.
    """
    p = model.params
    img, cache = model._encode(np.asarray(pooled_inputs, dtype=model.cfg.np_dtype))
    B, j, _ = img.shape
    u = img.mean(axis=1)
    e = p["tok.emb"][caption_ids]
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    ne = np.linalg.norm(e, axis=1, keepdims=True)
    uh, eh = u / nu, e / ne
    logits = (uh @ eh.T) / temperature
    loss = 0.0
    dlog = np.zeros_like(logits)
    for lg, sign in ((logits, 0), (logits.T, 1)):
        z = lg - lg.max(axis=1, keepdims=True)
        pz = np.exp(z)
        pz /= pz.sum(axis=1, keepdims=True)
        loss += -np.mean(np.log(pz[np.arange(B), np.arange(B)]))
        d = pz.copy()
        d[np.arange(B), np.arange(B)] -= 1.0
        d /= B
        dlog += d if sign == 0 else d.T
    loss *= 0.5
    dlog *= 0.5 / temperature
    duh = dlog @ eh
    deh = dlog.T @ uh
    du = (duh - uh * np.sum(duh * uh, axis=1, keepdims=True)) / nu
    de = (deh - eh * np.sum(deh * eh, axis=1, keepdims=True)) / ne
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    np.add.at(grads["tok.emb"], caption_ids, de)
    dimg = np.repeat(du[:, None, :] / j, j, axis=1)
    model._encode_backward(dimg, cache, grads)
    return float(loss), grads


def single_pattern_grids(ds: ProbeDataset, pattern_ids, slots, background: np.ndarray | None = None):
    """Grids with ``pattern_ids[b]`` at ``slots[b]`` and the background patch elsewhere."""
    lib = ds.library
    c = lib.cell_size
    n = len(pattern_ids)
    bg = np.zeros(lib.patch_dim) if background is None else np.asarray(background, dtype=np.float64)
    grids = np.broadcast_to(bg, (n, ds.image_len, lib.patch_dim)).copy()
    for b, (pid, slot) in enumerate(zip(pattern_ids, slots)):
        grids[b, cell_token_indices(int(slot), c)] = lib.patterns[pid]
    return grids


def train(model: Model, ds: ProbeDataset, tc: TrainConfig, callback=None) -> list[dict]:
    """Train ``model`` in place on the train split; returns the loss history."""
    train_idx = ds.indices(TRAIN)
    if train_idx.size == 0:
        raise ConfigError("dataset has no training samples")
    rng = np.random.default_rng(tc.seed)
    history: list[dict] = []
    if tc.align_steps:
        opt = Adam(model.params, tc.lr, tc.beta1, tc.beta2, tc.eps)
        V = ds.library.vocab_size
        bs = min(tc.batch_size, V)
        for step in range(tc.align_steps):
            ids = rng.choice(V, size=bs, replace=False)
            slots = rng.integers(NUM_SLOTS, size=bs)
            loss, grads = alignment_loss_and_grads(model, single_pattern_grids(ds, ids, slots), ids,
                                                   tc.align_temperature)
            clip_grads(grads, tc.clip_norm)
            opt.step(model.params, grads)
            if step % tc.log_every == 0 or step == tc.align_steps - 1:
                history.append({"stage": "align", "step": step, "loss": loss})
    opt = Adam(model.params, tc.lr, tc.beta1, tc.beta2, tc.eps)
    for step in range(tc.steps):
        idx = rng.choice(train_idx, size=tc.batch_size, replace=True)
        loss, grads = loss_and_grads(model, ds.inputs(idx), ds.label[idx])
        gnorm = clip_grads(grads, tc.clip_norm)
        opt.step(model.params, grads)
        if step % tc.log_every == 0 or step == tc.steps - 1:
            history.append({"stage": "task", "step": step, "loss": loss, "grad_norm": gnorm})
            log.debug("step %d loss %.4f", step, loss)
            if callback is not None:
                callback(step, loss)
    return history


def predict(model: Model, ds: ProbeDataset, idx, batch_size: int = 512) -> np.ndarray:
    """Logits ``(n, 2)`` for dataset rows ``idx``."""
    idx = np.asarray(idx)
    out = []
    for s in range(0, idx.size, batch_size):
        out.append(model.forward(ds.inputs(idx[s:s + batch_size])).logits)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 2))


__all__ = ["Adam", "TrainConfig", "train", "predict", "alignment_loss_and_grads",
           "single_pattern_grids", "EVAL", "TRAIN"]
