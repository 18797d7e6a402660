"""A tiny multimodal decoder with a 2-way (no/yes) answer head.

Sequence layout is ``[system tokens | image tokens | user tokens]``. Image
tokens come from a patch encoder ``f_v`` followed by a linear projector ``g``;
text tokens come from an embedding table ``E``. Each decoder block is pre-norm
(RMS) attention + GELU MLP. Queries and keys are rotated with RoPE at the ids
produced by the configured position scheme; the causal mask always follows
sequence order, whatever the ids are.

Forward and backward passes are written out by hand in numpy so that the
64-bit path can be checked against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .numeric import gelu_grad, gelu_with_tanh, rms_norm, rms_norm_backward, softmax
from .positions import ModalityLayout, scheme_for
from .rope import RopeParams, rotate

ENCODERS = ("per_patch", "mixing")
CHECKPOINT_FORMAT = "bapa-lab-checkpoint"
CHECKPOINT_VERSION = 1

# logits are ordered [no, yes] so that the class index equals the 0/1 label
NO, YES = 0, 1


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    head_dim: int = 16
    num_heads: int = 4
    num_layers: int = 2
    patch_dim: int = 16
    text_vocab_size: int = 70
    scheme: str = "bapa"
    rope_base: float = 10000.0
    seed: int = 0
    encoder: str = "per_patch"
    enc_hidden: int = 64
    mlp_hidden: int = 128
    grid_side: int = 3  # patches per image side; used by the mixing encoder
    dtype: str = "float64"

    def __post_init__(self):
        counts = (
            "embed_dim head_dim num_heads num_layers patch_dim text_vocab_size "
            "enc_hidden mlp_hidden grid_side"
        ).split()
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.embed_dim != self.num_heads * self.head_dim:
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) != num_heads ({self.num_heads}) x head_dim ({self.head_dim})"
            )
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embedding")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.encoder!r}; expected one of {ENCODERS}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        scheme_for(self.scheme)

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_dim, self.rope_base)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MultimodalInput:
    """One sample, or a batch when the token/patch arrays carry a leading axis."""

    layout: ModalityLayout
    system_tokens: np.ndarray  # (i,) or (B, i)
    patch_grid: np.ndarray  # (j, patch_dim) or (B, j, patch_dim), raster order
    user_tokens: np.ndarray  # (k,) or (B, k); the last one is the answer slot

    @property
    def batched(self) -> bool:
        return np.ndim(self.patch_grid) == 3


@dataclass
class ForwardTrace:
    logits: np.ndarray  # (B, 2) or (2,) ordered [no, yes]
    attention: list = field(default_factory=list)  # per layer (B, H, T, T)
    scores: list = field(default_factory=list)  # pre-softmax, masked entries are -inf
    hidden: list = field(default_factory=list)  # residual stream entering each layer + final
    positions: np.ndarray | None = None

    @property
    def logit_yes(self) -> np.ndarray:
        return self.logits[..., YES]


def sinusoid_2d(side: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal table for a ``side x side`` patch grid, raster order."""
    if dim % 4:
        raise ConfigError("mixing encoder width must be a multiple of 4")
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    rows, cols = np.divmod(np.arange(side * side), side)
    parts = []
    for coord in (rows, cols):
        ang = coord[:, None] * freqs
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def _uniform(rng, shape, fan_in):
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    D, F, P, M = cfg.embed_dim, cfg.enc_hidden, cfg.patch_dim, cfg.mlp_hidden
    p: dict[str, np.ndarray] = {}
    p["enc.w1"] = _uniform(rng, (P, F), P)
    p["enc.b1"] = np.zeros(F)
    p["enc.w2"] = _uniform(rng, (F, F), F)
    p["enc.b2"] = np.zeros(F)
    if cfg.encoder == "mixing":
        p["mix.ln"] = np.ones(F)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"mix.{name}"] = _uniform(rng, (F, F), F)
    p["proj.w"] = _uniform(rng, (F, D), F)
    p["proj.b"] = np.zeros(D)
    p["tok.emb"] = _uniform(rng, (cfg.text_vocab_size, D), D)
    for l in range(cfg.num_layers):
        p[f"b{l}.ln1"] = np.ones(D)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"b{l}.{name}"] = _uniform(rng, (D, D), D)
        p[f"b{l}.ln2"] = np.ones(D)
        p[f"b{l}.w1"] = _uniform(rng, (D, M), D)
        p[f"b{l}.b1"] = np.zeros(M)
        p[f"b{l}.w2"] = _uniform(rng, (M, D), M)
        p[f"b{l}.b2"] = np.zeros(D)
    p["lnf"] = np.ones(D)
    p["head.w"] = _uniform(rng, (D, 2), D)
    p["head.b"] = np.zeros(2)
    return {k: v.astype(cfg.np_dtype) for k, v in p.items()}


# --- attention ---------------------------------------------------------------


def _split_heads(x, H):
    B, T, D = x.shape
    return x.reshape(B, T, H, D // H).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * d)


def attention_forward(h, wq, wk, wv, wo, num_heads, positions=None, thetas=None, causal=True):
    """Multi-head self-attention on ``h`` of shape (B, T, D).

    Returns ``(out, cache)``; the cache holds the pre-softmax scores and the
    attention weights among the tensors needed by :func:`attention_backward`.
    """
    q = _split_heads(h @ wq, num_heads)
    k = _split_heads(h @ wk, num_heads)
    v = _split_heads(h @ wv, num_heads)
    if positions is not None:
        q = rotate(q, positions, thetas)
        k = rotate(k, positions, thetas)
    scale = 1.0 / np.sqrt(q.shape[-1])
    s = (q @ k.swapaxes(-1, -2)) * scale
    if causal:
        T = s.shape[-1]
        s = np.where(np.tril(np.ones((T, T), dtype=bool)), s, -np.inf)
    a = softmax(s, axis=-1)
    o = _merge_heads(a @ v)
    out = o @ wo
    cache = dict(h=h, q=q, k=k, v=v, a=a, s=s, o=o, scale=scale, positions=positions,
                 thetas=thetas, wq=wq, wk=wk, wv=wv, wo=wo, H=num_heads)
    return out, cache


def attention_backward(dout, c):
    B, T, _ = dout.shape
    o, a, v, q, k, h = c["o"], c["a"], c["v"], c["q"], c["k"], c["h"]
    dwo = o.reshape(B * T, -1).T @ dout.reshape(B * T, -1)
    do = _split_heads(dout @ c["wo"].T, c["H"])
    da = do @ v.swapaxes(-1, -2)
    dv = a.swapaxes(-1, -2) @ do
    ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) * c["scale"]
    dq = ds @ k
    dk = ds.swapaxes(-1, -2) @ q
    if c["positions"] is not None:
        neg = -np.asarray(c["positions"], dtype=np.float64)
        dq = rotate(dq, neg, c["thetas"])
        dk = rotate(dk, neg, c["thetas"])
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    h2 = h.reshape(B * T, -1)
    grads = {
        "wq": h2.T @ dq.reshape(B * T, -1),
        "wk": h2.T @ dk.reshape(B * T, -1),
        "wv": h2.T @ dv.reshape(B * T, -1),
        "wo": dwo,
    }
    dh = dq @ c["wq"].T + dk @ c["wk"].T + dv @ c["wv"].T
    return dh, grads


# --- model -------------------------------------------------------------------


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self.rope = cfg.rope
        self._thetas = self.rope.thetas
        self._assign = scheme_for(cfg.scheme)
        self._mix_pos = None
        if cfg.encoder == "mixing":
            self._mix_pos = sinusoid_2d(cfg.grid_side, cfg.enc_hidden).astype(cfg.np_dtype)

    def __repr__(self):
        n = sum(v.size for v in self.params.values())
        return f"Model({self.cfg.scheme}, layers={self.cfg.num_layers}, params={n})"

    def with_scheme(self, scheme: str) -> "Model":
        """Same weights, different position scheme (inference-time swap)."""
        cfg = ModelConfig.from_dict({**self.cfg.to_dict(), "scheme": scheme})
        return Model(cfg, self.params)

    def positions(self, layout: ModalityLayout) -> np.ndarray:
        return self._assign(layout)

    # encoder stack ---------------------------------------------------------

    def _encode(self, patches):
        """patches (B, j, P) -> image tokens (B, j, D) plus backward cache."""
        p = self.params
        pre1 = patches @ p["enc.w1"] + p["enc.b1"]
        h1, t1 = gelu_with_tanh(pre1)
        f = h1 @ p["enc.w2"] + p["enc.b2"]
        cache = dict(patches=patches, pre1=pre1, h1=h1, t1=t1)
        if self.cfg.encoder == "mixing":
            j = patches.shape[1]
            if j != self._mix_pos.shape[0]:
                raise ShapeError(f"mixing encoder expects {self._mix_pos.shape[0]} patches, got {j}")
            z = f + self._mix_pos
            hz, inv = rms_norm(z, p["mix.ln"])
            att, acache = attention_forward(hz, p["mix.wq"], p["mix.wk"], p["mix.wv"], p["mix.wo"],
                                            num_heads=1, causal=False)
            cache.update(z=z, inv=inv, acache=acache)
            f = z + att
        cache["f"] = f
        return f @ p["proj.w"] + p["proj.b"], cache

    def _encode_backward(self, dtok, cache, grads):
        p = self.params
        f = cache["f"]
        P = f.shape[-1]
        grads["proj.w"] += f.reshape(-1, P).T @ dtok.reshape(-1, dtok.shape[-1])
        grads["proj.b"] += dtok.sum(axis=(0, 1))
        df = dtok @ p["proj.w"].T
        if self.cfg.encoder == "mixing":
            dz = df.copy()
            dhz, ag = attention_backward(df, cache["acache"])
            for name, g in ag.items():
                grads[f"mix.{name}"] += g
            dz_n, dgain = rms_norm_backward(dhz, cache["z"], p["mix.ln"], cache["inv"])
            grads["mix.ln"] += dgain
            df = dz + dz_n
        h1 = cache["h1"]
        grads["enc.w2"] += h1.reshape(-1, h1.shape[-1]).T @ df.reshape(-1, df.shape[-1])
        grads["enc.b2"] += df.sum(axis=(0, 1))
        dpre1 = (df @ p["enc.w2"].T) * gelu_grad(cache["pre1"], cache["t1"])
        x = cache["patches"]
        grads["enc.w1"] += x.reshape(-1, x.shape[-1]).T @ dpre1.reshape(-1, dpre1.shape[-1])
        grads["enc.b1"] += dpre1.sum(axis=(0, 1))

    def encode_image(self, patch_grid) -> np.ndarray:
        """g(f_v(patches)): (j, P) -> (j, D), or batched (B, j, P) -> (B, j, D)."""
        x = np.asarray(patch_grid, dtype=self.cfg.np_dtype)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != self.cfg.patch_dim:
            raise ShapeError(f"patch grid must have trailing dim {self.cfg.patch_dim}, got {x.shape}")
        out, _ = self._encode(x)
        return out[0] if single else out

    def embed_text(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids)
        if np.any(ids < 0) or np.any(ids >= self.cfg.text_vocab_size):
            raise ShapeError("token id out of range")
        return self.params["tok.emb"][ids]

    # decoder -----------------------------------------------------------------

    def _check_input(self, inp: MultimodalInput):
        single = not inp.batched
        sys_t = np.asarray(inp.system_tokens, dtype=np.int64)
        usr_t = np.asarray(inp.user_tokens, dtype=np.int64)
        patches = np.asarray(inp.patch_grid, dtype=self.cfg.np_dtype)
        if single:
            sys_t, usr_t, patches = sys_t[None], usr_t[None], patches[None]
        lay = inp.layout
        B = patches.shape[0]
        if sys_t.shape != (B, lay.system_len):
            raise ShapeError(f"system tokens {sys_t.shape} do not match layout system_len={lay.system_len}")
        if usr_t.shape != (B, lay.user_len):
            raise ShapeError(f"user tokens {usr_t.shape} do not match layout user_len={lay.user_len}")
        if patches.shape[1:] != (lay.image_len, self.cfg.patch_dim):
            raise ShapeError(
                f"patch grid {patches.shape[1:]} does not match ({lay.image_len}, {self.cfg.patch_dim})"
            )
        if not np.all(np.isfinite(patches)):
            raise ShapeError("patch grid has non-finite entries")
        return single, sys_t, patches, usr_t

    def _forward(self, inp: MultimodalInput):
        single, sys_t, patches, usr_t = self._check_input(inp)
        p, cfg = self.params, self.cfg
        img, enc_cache = self._encode(patches)
        x = np.concatenate([self.embed_text(sys_t), img, self.embed_text(usr_t)], axis=1)
        pos = self.positions(inp.layout)
        caches = []
        hidden = [x]
        for l in range(cfg.num_layers):
            h, inv1 = rms_norm(x, p[f"b{l}.ln1"])
            att, acache = attention_forward(
                h, p[f"b{l}.wq"], p[f"b{l}.wk"], p[f"b{l}.wv"], p[f"b{l}.wo"],
                cfg.num_heads, positions=pos, thetas=self._thetas, causal=True,
            )
            x1 = x + att
            h2, inv2 = rms_norm(x1, p[f"b{l}.ln2"])
            pre = h2 @ p[f"b{l}.w1"] + p[f"b{l}.b1"]
            m, tm = gelu_with_tanh(pre)
            x2 = x1 + m @ p[f"b{l}.w2"] + p[f"b{l}.b2"]
            caches.append(dict(x=x, h=h, inv1=inv1, acache=acache, x1=x1, h2=h2, inv2=inv2, pre=pre, m=m, tm=tm))
            x = x2
            hidden.append(x)
        last = x[:, -1]
        hf, invf = rms_norm(last, p["lnf"])
        logits = hf @ p["head.w"] + p["head.b"]
        state = dict(enc_cache=enc_cache, caches=caches, last=last, hf=hf, invf=invf,
                     sys_t=sys_t, usr_t=usr_t, T=x.shape[1])
        trace = ForwardTrace(logits=logits, hidden=hidden, positions=pos)
        return single, trace, state

    def forward(self, inp: MultimodalInput, capture: bool = False) -> ForwardTrace:
        single, trace, state = self._forward(inp)
        if capture:
            trace.attention = [c["acache"]["a"] for c in state["caches"]]
            trace.scores = [c["acache"]["s"] for c in state["caches"]]
        else:
            trace.hidden = []
        if single:
            trace.logits = trace.logits[0]
            trace.attention = [a[0] for a in trace.attention]
            trace.scores = [s[0] for s in trace.scores]
            trace.hidden = [h[0] for h in trace.hidden]
        return trace

    def _backward(self, dlogits, state):
        p, cfg = self.params, self.cfg
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["head.w"] += state["hf"].T @ dlogits
        grads["head.b"] += dlogits.sum(axis=0)
        dhf = dlogits @ p["head.w"].T
        dlast, grads["lnf"] = rms_norm_backward(dhf, state["last"], p["lnf"], state["invf"])
        B = dlogits.shape[0]
        dx = np.zeros((B, state["T"], cfg.embed_dim), dtype=dlogits.dtype)
        dx[:, -1] = dlast
        for l in reversed(range(cfg.num_layers)):
            c = state["caches"][l]
            # MLP branch
            grads[f"b{l}.b2"] += dx.sum(axis=(0, 1))
            m = c["m"]
            grads[f"b{l}.w2"] += m.reshape(-1, m.shape[-1]).T @ dx.reshape(-1, cfg.embed_dim)
            dpre = (dx @ p[f"b{l}.w2"].T) * gelu_grad(c["pre"], c["tm"])
            grads[f"b{l}.b1"] += dpre.sum(axis=(0, 1))
            h2 = c["h2"]
            grads[f"b{l}.w1"] += h2.reshape(-1, cfg.embed_dim).T @ dpre.reshape(-1, dpre.shape[-1])
            dh2 = dpre @ p[f"b{l}.w1"].T
            dx1_n, dg2 = rms_norm_backward(dh2, c["x1"], p[f"b{l}.ln2"], c["inv2"])
            grads[f"b{l}.ln2"] += dg2
            dx1 = dx + dx1_n
            # attention branch
            dh, ag = attention_backward(dx1, c["acache"])
            for name, g in ag.items():
                grads[f"b{l}.{name}"] += g
            dx_n, dg1 = rms_norm_backward(dh, c["x"], p[f"b{l}.ln1"], c["inv1"])
            grads[f"b{l}.ln1"] += dg1
            dx = dx1 + dx_n
        i = state["sys_t"].shape[1]
        k = state["usr_t"].shape[1]
        j = dx.shape[1] - i - k
        D = cfg.embed_dim
        np.add.at(grads["tok.emb"], state["sys_t"].reshape(-1), dx[:, :i].reshape(-1, D))
        np.add.at(grads["tok.emb"], state["usr_t"].reshape(-1), dx[:, i + j:].reshape(-1, D))
        self._encode_backward(dx[:, i:i + j], state["enc_cache"], grads)
        return grads


def init_model(cfg: ModelConfig) -> Model:
    return Model(cfg, init_params(cfg))


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean 2-way cross-entropy and its gradient w.r.t. ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = logits.shape[0]
    loss = -logp[np.arange(B), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    return float(loss), dlogits / B


def loss_and_grads(model: Model, batch: MultimodalInput, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and exact gradients for every parameter."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.size == 0:
        raise ShapeError("empty batch")
    _, trace, state = model._forward(batch)
    if trace.logits.shape[0] != labels.size:
        raise ShapeError(f"{labels.size} labels for a batch of {trace.logits.shape[0]}")
    loss, dlogits = cross_entropy(trace.logits, labels)
    return loss, model._backward(dlogits.astype(trace.logits.dtype), state)


def loss_only(model: Model, batch: MultimodalInput, labels) -> float:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    trace = model.forward(batch)
    logits = np.atleast_2d(trace.logits)
    return cross_entropy(logits, labels)[0]


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: Model, path, extra: dict | None = None) -> Path:
    """Write ``model`` as an ``.npz`` archive.

    Layout: ``__meta__`` holds UTF-8 JSON ``{"format", "version", "config",
    "extra"}``; every other member is one parameter array keyed by name.
    """
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "extra": extra or {},
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    arrays.update(model.params)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            params = {k: z[k] for k in z.files if k != "__meta__"}
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"unsupported checkpoint format {meta.get('format')!r} v{meta.get('version')!r}"
        )
    cfg = ModelConfig.from_dict(meta["config"])
    expected = init_params(cfg)
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise FormatError("checkpoint parameters do not match its config")
    return Model(cfg, params), meta.get("extra", {})
