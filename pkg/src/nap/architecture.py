"""Transformer neural acquisition process: masked trunk, acquisition head, bucket head, value net.

Token layout used by every batched call: ``[history (padded to h_max) | queries (padded to q_max)]``.
History tokens are ``embed(x) + embed(y)``, query tokens ``embed(x)``; there is no positional
code. History rows attend to history columns, query rows to history columns and themselves.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .distribution import BucketSpec, make_buckets

ARGMAX = "argmax"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    embed_dim: int = 64
    ff_dim: int = 128
    layers: int = 2
    heads: int = 2
    dropout: float = 0.0
    bucket_count: int = 64
    softmax_temperature_train: float = 0.1
    value_hidden: int = 512
    bucket_margin: float = 0.1

    @classmethod
    def full_scale(cls, input_dim: int) -> "ModelConfig":
        return cls(input_dim=input_dim, embed_dim=512, ff_dim=1024, layers=6, heads=4, bucket_count=1000)

    def __post_init__(self):
        for name in ("input_dim", "embed_dim", "ff_dim", "layers", "heads", "bucket_count", "value_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.dropout != 0.0:
            raise ValueError("only dropout = 0.0 is supported")
        if self.softmax_temperature_train <= 0:
            raise ValueError("softmax_temperature_train must be positive")

    @property
    def bucket_spec(self) -> BucketSpec:
        # outputs are min-max normalised to [0, 1]
        return make_buckets([0.0, 1.0], self.bucket_count, self.bucket_margin)

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, e, f, k, h = cfg.input_dim, cfg.embed_dim, cfg.ff_dim, cfg.bucket_count, cfg.value_hidden
    shapes = {
        "x_embed.w": (d, e), "x_embed.b": (e,),
        "y_embed.w": (1, e), "y_embed.b": (e,),
    }
    for i in range(cfg.layers):
        p = f"layer{i}."
        for m in "qkvo":
            shapes[p + f"attn.w{m}"] = (e, e)
            shapes[p + f"attn.b{m}"] = (e,)
        shapes.update({
            p + "ln1.g": (e,), p + "ln1.b": (e,),
            p + "ff.w1": (e, f), p + "ff.b1": (f,),
            p + "ff.w2": (f, e), p + "ff.b2": (e,),
            p + "ln2.g": (e,), p + "ln2.b": (e,),
        })
    shapes.update({
        "tT_embed.w": (2, e), "tT_embed.b": (e,),
        "acq.w1": (e, f), "acq.b1": (f,), "acq.w2": (f, 1), "acq.b2": (1,),
        "dist.w1": (e, f), "dist.b1": (f,), "dist.w2": (f, k), "dist.b2": (k,),
        "value.w1": (2, h), "value.b1": (h,), "value.w2": (h, 1), "value.b2": (1,),
    })
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))


def parameter_group(name: str) -> str:
    """Coarse grouping used for freezing and gradient diagnostics."""
    head = name.split(".", 1)[0]
    if head.startswith("layer"):
        return "trunk"
    return {"x_embed": "embed", "y_embed": "embed", "tT_embed": "budget"}.get(head, head)


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    arrays: Mapping[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        if list(self.arrays) != list(expected):
            missing = set(expected) ^ set(self.arrays)
            raise ValueError(f"parameter names do not match config (difference: {sorted(missing)[:5]})")
        for k, s in expected.items():
            if self.arrays[k].shape != s:
                raise ValueError(f"parameter {k} has shape {self.arrays[k].shape}, expected {s}")

    def tensors(self, requires_grad: bool = False, names: Iterable[str] | None = None) -> dict[str, dc.Tensor]:
        trainable = set(self.arrays if names is None else names)
        return {
            k: dc.Tensor(v, requires_grad=requires_grad and k in trainable, name=k)
            for k, v in self.arrays.items()
        }

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ModelParams":
        arrays = dict(self.arrays)
        arrays.update(updates)
        return ModelParams(self.config, arrays)

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


def init_params(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for affine maps; unit/zero layer norms."""
    rng = np.random.default_rng(rng)
    shapes = parameter_shapes(cfg)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if ".ln" in name:
            arrays[name] = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
            continue
        fan_in = shape[0] if len(shape) == 2 else _fan_in_for_bias(name, shapes)
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(cfg, arrays)


def _fan_in_for_bias(name: str, shapes: Mapping[str, tuple[int, ...]]) -> int:
    prefix, last = name.rsplit(".", 1)
    return shapes[f"{prefix}.w{last[1:]}"][0]


# ----------------------------------------------------------------------------
# masks and packing


def build_mask(n_hist: int, n_pred: int) -> np.ndarray:
    if n_pred < 1 or n_hist < 0:
        raise ValueError("build_mask needs n_pred >= 1 and n_hist >= 0")
    n = n_hist + n_pred
    mask = np.zeros((n, n), dtype=bool)
    mask[:, :n_hist] = True
    idx = np.arange(n_hist, n)
    mask[idx, idx] = True
    return mask


@dataclass
class TokenBatch:
    x: np.ndarray  # (B, h_max + q_max, D)
    y: np.ndarray  # (B, h_max)
    mask: np.ndarray  # (B, 1, L, L)
    n_hist: np.ndarray
    n_query: np.ndarray
    h_max: int
    q_max: int
    budget: np.ndarray  # (B, 2) = (t/T, (T-t)/T)

    @property
    def query_valid(self) -> np.ndarray:
        return np.arange(self.q_max)[None, :] < self.n_query[:, None]

    @property
    def hist_valid(self) -> np.ndarray:
        return np.arange(self.h_max)[None, :] < self.n_hist[:, None]


def pack(states: Sequence[tuple], input_dim: int) -> TokenBatch:
    """Pack ``(hist_x, hist_y, query_x, t, T)`` tuples into one padded batch."""
    if not states:
        raise ValueError("pack needs at least one state")
    hs = np.array([len(s[1]) for s in states], dtype=int)
    qs = np.array([len(s[2]) for s in states], dtype=int)
    if (qs < 1).any():
        raise ValueError("every state needs at least one query")
    h_max, q_max = int(hs.max()), int(qs.max())
    b, L = len(states), h_max + q_max
    x = np.zeros((b, L, input_dim))
    y = np.zeros((b, h_max))
    mask = np.zeros((b, 1, L, L), dtype=bool)
    budget = np.zeros((b, 2))
    diag = np.arange(L)
    for i, (hx, hy, qx, t, T) in enumerate(states):
        h, q = hs[i], qs[i]
        hx = np.asarray(hx, dtype=np.float64).reshape(h, -1) if h else np.zeros((0, input_dim))
        qx = np.asarray(qx, dtype=np.float64).reshape(q, -1)
        if hx.shape[1] != input_dim or qx.shape[1] != input_dim:
            raise ValueError(f"input dimension mismatch: model expects {input_dim}, got {hx.shape[1]}/{qx.shape[1]}")
        x[i, :h] = hx
        y[i, :h] = hy
        x[i, h_max:h_max + q] = qx
        m = mask[i, 0]
        m[diag, diag] = True
        m[:h, :h] = True
        m[h_max:, :h] = True
        if not 1 <= t <= T:
            raise ValueError(f"need 1 <= t <= T, got t={t}, T={T}")
        budget[i] = (t / T, (T - t) / T)
    return TokenBatch(x, y, mask, hs, qs, h_max, q_max, budget)


# ----------------------------------------------------------------------------
# network


def _affine(x, w, b):
    return dc.linear(x, w, b)


def _embed(w: Mapping[str, dc.Tensor], batch: TokenBatch) -> dc.Tensor:
    tokens = _affine(batch.x, w["x_embed.w"], w["x_embed.b"])
    if batch.h_max == 0:
        return tokens
    y_tok = _affine(batch.y[..., None], w["y_embed.w"], w["y_embed.b"])
    return dc.concat([tokens[:, : batch.h_max] + y_tok, tokens[:, batch.h_max:]], axis=1)


def _trunk(w: Mapping[str, dc.Tensor], tokens: dc.Tensor, batch: TokenBatch, cfg: ModelConfig,
           dense: bool = False) -> dc.Tensor:
    b, L, e = tokens.shape
    hist_valid = batch.hist_valid
    nh, dh = cfg.heads, cfg.embed_dim // cfg.heads
    h = tokens
    for i in range(cfg.layers):
        p = f"layer{i}."

        def split(t):
            return t.reshape(b, L, nh, dh).transpose(0, 2, 1, 3)

        q = split(_affine(h, w[p + "attn.wq"], w[p + "attn.bq"]))
        k = split(_affine(h, w[p + "attn.wk"], w[p + "attn.bk"]))
        v = split(_affine(h, w[p + "attn.wv"], w[p + "attn.bv"]))
        if dense:
            a = dc.attention(q, k, v, batch.mask)
        else:
            a = dc.history_attention(q, k, v, batch.h_max, hist_valid)
        a = a.transpose(0, 2, 1, 3).reshape(b, L, e)
        a = _affine(a, w[p + "attn.wo"], w[p + "attn.bo"])
        h = dc.layer_norm(h + a, w[p + "ln1.g"], w[p + "ln1.b"])
        f = _affine(dc.relu(_affine(h, w[p + "ff.w1"], w[p + "ff.b1"])), w[p + "ff.w2"], w[p + "ff.b2"])
        h = dc.layer_norm(h + f, w[p + "ln2.g"], w[p + "ln2.b"])
    return h


def query_features(w: Mapping[str, dc.Tensor], batch: TokenBatch, cfg: ModelConfig,
                   dense: bool = False) -> dc.Tensor:
    """Trunk outputs at query positions, ``(B, q_max, E)``.

    ``dense=True`` runs the generic masked attention over the full token matrix instead of
    the structured kernel; both compute the same function.
    """
    out = _trunk(w, _embed(w, batch), batch, cfg, dense)
    return out[:, batch.h_max:]


def acquisition_head(w, feats: dc.Tensor, batch: TokenBatch) -> dc.Tensor:
    budget = _affine(batch.budget, w["tT_embed.w"], w["tT_embed.b"])
    z = feats + budget.reshape(budget.shape[0], 1, budget.shape[1])
    hidden = dc.relu(_affine(z, w["acq.w1"], w["acq.b1"]))
    out = _affine(hidden, w["acq.w2"], w["acq.b2"])
    return out.reshape(out.shape[:2])


def distribution_head(w, feats: dc.Tensor) -> dc.Tensor:
    hidden = dc.relu(_affine(feats, w["dist.w1"], w["dist.b1"]))
    return _affine(hidden, w["dist.w2"], w["dist.b2"])


def value_head(w, features: np.ndarray) -> dc.Tensor:
    """``features`` is ``(B, 2)`` = (t/T, best_y)."""
    hidden = dc.tanh(_affine(features, w["value.w1"], w["value.b1"]))
    out = _affine(hidden, w["value.w2"], w["value.b2"])
    return out.reshape(out.shape[0])


def forward_batch(params: ModelParams, batch: TokenBatch, acq: bool = True, dist: bool = True):
    """Gradient-free batched forward; returns numpy arrays (padded query slots included)."""
    w = params.tensors()
    feats = query_features(w, batch, params.config)
    a = acquisition_head(w, feats, batch).data if acq else None
    d = distribution_head(w, feats).data if dist else None
    return a, d


# ----------------------------------------------------------------------------
# single-state API


def _as_history(history_x, history_y, dim: int) -> tuple[np.ndarray, np.ndarray]:
    hy = np.asarray(history_y if history_y is not None else [], dtype=np.float64).ravel()
    hx = np.asarray(history_x if history_x is not None else np.zeros((0, dim)), dtype=np.float64)
    hx = hx.reshape(len(hy), -1) if hy.size else np.zeros((0, dim))
    if hy.size and hx.shape[1] != dim:
        raise ValueError(f"history inputs have dimension {hx.shape[1]}, model expects {dim}")
    if not np.isfinite(hy).all():
        raise ValueError("history outputs must be finite")
    return hx, hy


def embed_tokens(params: ModelParams, history_x, history_y, queries) -> np.ndarray:
    """Embedded token matrix ``(n_hist + n_pred, E)`` before the trunk."""
    cfg = params.config
    hx, hy = _as_history(history_x, history_y, cfg.input_dim)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, cfg.input_dim)
    batch = pack([(hx, hy, q, 1, 1)], cfg.input_dim)
    return _embed(params.tensors(), batch).data[0]


def forward(params: ModelParams, history_x, history_y, queries, t: int, T: int):
    """Acquisition values ``(n_pred,)`` and bucket logits ``(n_pred, bucket_count)``."""
    cfg = params.config
    hx, hy = _as_history(history_x, history_y, cfg.input_dim)
    q = np.asarray(queries, dtype=np.float64)
    if q.size == 0:
        raise ValueError("forward needs at least one query")
    q = q.reshape(-1, cfg.input_dim)
    batch = pack([(hx, hy, q, t, T)], cfg.input_dim)
    a, d = forward_batch(params, batch)
    return a[0], d[0]


def policy_probs(acq_values, temperature) -> np.ndarray:
    """Softmax of ``acq_values / temperature``; ``temperature="argmax"`` gives a one-hot vector."""
    a = np.asarray(acq_values, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("policy_probs needs at least one value")
    if temperature == ARGMAX or temperature is None:
        p = np.zeros_like(a)
        p[int(np.argmax(a))] = 1.0
        return p
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = (a - a.max()) / temperature
    e = np.exp(z)
    return e / e.sum()


def value_features(t, T, best_y) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    T = np.broadcast_to(np.asarray(T, dtype=np.float64), t.shape)
    best = np.broadcast_to(np.asarray(best_y, dtype=np.float64), t.shape)
    return np.stack([t / T, best], axis=1)


def value_estimate(params: ModelParams, t: int, T: int, best_y: float) -> float:
    if not 0 <= t <= T:
        raise ValueError(f"need 0 <= t <= T, got t={t}, T={T}")
    return float(value_head(params.tensors(), value_features(t, T, best_y)).data[0])
