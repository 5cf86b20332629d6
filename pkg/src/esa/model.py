"""Edge/node-set attention model: masked attention blocks, encoder and PMA pooling.

The model is a pure function of a parameter dict; `ESA` bundles a config
with its parameters. Token layout is ``B x L x d``; padded token slots are
kept out of every attention row through the masks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import kernels
from . import tensor as T
from .graph import BatchedGraph, TokenSet, build_edge_tokens, build_node_tokens
from .masking import AttnMask, edge_mask_for, node_mask_for, padding_mask
from .tensor import Parameter, Tensor


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass
class ModelConfig:
    layer_string: str = "MSMSP"
    d_in: int = 1
    d_out: int = 1
    d_model: int = 32
    heads: int = 4
    mlp_hidden: int = 64
    mlp_kind: str = "standard"  # standard | gated
    norm_placement: str = "pre"  # pre | post
    seeds: int = 32
    dropout: float = 0.0
    readout: str = "mean"  # mean | sum
    tokens: str = "edge"  # edge (ESA) | node (NSA)
    level: str = "graph"  # graph | token
    mask_layout: str = "dense"  # dense | sparse, for masked blocks
    dtype: str = "float32"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.layer_string = "".join(self.layer_string.split()).upper()

    @property
    def encoder_layers(self) -> str:
        return self.layer_string.split("P")[0]

    @property
    def pma_sabs(self) -> int:
        return len(self.layer_string.split("P", 1)[1]) if "P" in self.layer_string else 0

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> "ModelConfig":
        s = self.layer_string
        if not s or set(s) - set("MSP"):
            raise ConfigError(f"layer_string must use only M, S, P: {s!r}")
        n_p = s.count("P")
        if self.level == "graph":
            if n_p != 1:
                raise ConfigError(f"graph-level configs need exactly one P, got {s!r}")
            if s[0] == "P":
                raise ConfigError(f"P cannot be the first layer: {s!r}")
            if "M" in s.split("P")[1]:
                raise ConfigError(f"only S blocks may follow P: {s!r}")
        elif self.level == "token":
            if n_p:
                raise ConfigError(f"token-level configs cannot contain P: {s!r}")
        else:
            raise ConfigError(f"level must be 'graph' or 'token', got {self.level!r}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if self.mlp_kind not in ("standard", "gated"):
            raise ConfigError(f"unknown mlp_kind {self.mlp_kind!r}")
        if self.norm_placement not in ("pre", "post"):
            raise ConfigError(f"unknown norm_placement {self.norm_placement!r}")
        if self.readout not in ("mean", "sum"):
            raise ConfigError(f"unknown readout {self.readout!r}")
        if self.tokens not in ("edge", "node"):
            raise ConfigError(f"unknown token kind {self.tokens!r}")
        if self.mask_layout not in ("dense", "sparse"):
            raise ConfigError(f"unknown mask_layout {self.mask_layout!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        return self

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise ConfigError(f"unknown model option {k!r}")
            kind = kinds[k]
            if isinstance(v, str):
                v = v.strip()
                if kind == "int":
                    v = int(v)
                elif kind == "float":
                    v = float(v)
            out[k] = v
        return cls(**out)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        d = {}
        for line in text.splitlines():
            if line.strip():
                k, v = line.split("=", 1)
                d[k.strip()] = v.strip()
        return cls.from_dict(d)


# -- parameters -----------------------------------------------------------------


def _linear(params, name, d_in, d_out, rng, dtype):
    bound = 1.0 / math.sqrt(d_in)
    params[f"{name}.w"] = Parameter(rng.uniform(-bound, bound, (d_in, d_out)).astype(dtype), f"{name}.w")
    params[f"{name}.b"] = Parameter(rng.uniform(-bound, bound, (d_out,)).astype(dtype), f"{name}.b")


def _norm(params, name, d, dtype):
    params[f"{name}.scale"] = Parameter(np.ones(d, dtype=dtype), f"{name}.scale")
    params[f"{name}.shift"] = Parameter(np.zeros(d, dtype=dtype), f"{name}.shift")


def _attention_params(params, name, d, rng, dtype):
    for proj in ("q", "k", "v", "o"):
        _linear(params, f"{name}.{proj}", d, d, rng, dtype)


def _mlp_params(params, name, cfg, rng, dtype):
    d, h = cfg.d_model, cfg.mlp_hidden
    _linear(params, f"{name}.up", d, h, rng, dtype)
    if cfg.mlp_kind == "gated":
        _linear(params, f"{name}.gate", d, h, rng, dtype)
    _linear(params, f"{name}.down", h, d, rng, dtype)


def _block_params(params, name, cfg, rng, dtype):
    _norm(params, f"{name}.ln1", cfg.d_model, dtype)
    _attention_params(params, f"{name}.attn", cfg.d_model, rng, dtype)
    _norm(params, f"{name}.ln2", cfg.d_model, dtype)
    _mlp_params(params, f"{name}.mlp", cfg, rng, dtype)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Parameter]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    dtype = cfg.np_dtype
    params: dict[str, Parameter] = {}
    _linear(params, "input", cfg.d_in, cfg.d_model, rng, dtype)
    for i, kind in enumerate(cfg.encoder_layers):
        _block_params(params, f"enc.{i}", cfg, rng, dtype)
    if cfg.level == "graph":
        seeds = rng.standard_normal((1, cfg.seeds, cfg.d_model)) * 0.02
        params["pma.seeds"] = Parameter(seeds.astype(dtype), "pma.seeds")
        _attention_params(params, "pma.attn", cfg.d_model, rng, dtype)
        _norm(params, "pma.ln", cfg.d_model, dtype)
        _mlp_params(params, "pma.mlp", cfg, rng, dtype)
        for i in range(cfg.pma_sabs):
            _block_params(params, f"pma.sab.{i}", cfg, rng, dtype)
    _linear(params, "head", cfg.d_model, cfg.d_out, rng, dtype)
    return params


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# -- attention ------------------------------------------------------------------


class SparsePlan:
    """Row-sorted allowed pairs of a square mask, expanded over heads."""

    def __init__(self, mask: AttnMask, heads: int):
        coords = mask.to_sparse().allowed
        B, L = mask.B, mask.L
        b, i, j = coords.T
        h = np.arange(heads, dtype=np.int64)
        # (b, h, i, j) ordering keeps rows contiguous
        base = (b[None, :] * heads + h[:, None]) * L
        rows = (base + i[None, :]).reshape(heads, -1)
        cols = (base + j[None, :]).reshape(heads, -1)
        key = rows.ravel() * (B * heads * L) + cols.ravel()
        order = np.argsort(key, kind="stable")
        self.rows = rows.ravel()[order]
        self.cols = cols.ravel()[order]
        self.n_rows = B * heads * L
        self.indptr = np.concatenate(
            [[0], np.cumsum(np.bincount(self.rows, minlength=self.n_rows))]
        ).astype(np.int64)
        self.shape = (B, heads, L, L)

    def csr(self, values):
        return sp.csr_matrix((values, self.cols, self.indptr), shape=(self.n_rows, self.n_rows))

    def densify(self, values) -> np.ndarray:
        B, H, L, _ = self.shape
        out = np.zeros((B * H, L, L), dtype=values.dtype)
        out[self.rows // L, self.rows % L, self.cols % L] = values
        return out.reshape(B, H, L, L)


def _sparse_attention(q: Tensor, k: Tensor, v: Tensor, plan: SparsePlan, trace=None):
    """softmax(QK^T/sqrt(d_k)) V restricted to the plan's allowed entries."""
    d_k = q.shape[-1]
    c = q.dtype.type(1.0 / math.sqrt(d_k))
    qf = q.data.reshape(-1, d_k)
    kf = k.data.reshape(-1, d_k)
    vf = v.data.reshape(-1, d_k)
    rows, cols, ptr = plan.rows, plan.cols, plan.indptr
    s = np.einsum("ij,ij->i", qf[rows], kf[cols]) * c
    p = kernels.segment_softmax(s, ptr).astype(q.dtype, copy=False)
    out = np.asarray(plan.csr(p) @ vf).reshape(q.shape)
    if trace is not None:
        trace.append(plan.densify(p))

    def grad_fn(g):
        gf = g.reshape(-1, d_k)
        dp = np.einsum("ij,ij->i", gf[rows], vf[cols])
        gv = np.asarray(plan.csr(p).T @ gf).reshape(v.shape)
        ds = kernels.segment_softmax_backward(p, dp, ptr).astype(q.dtype, copy=False) * c
        m = plan.csr(ds)
        gq = np.asarray(m @ kf).reshape(q.shape)
        gk = np.asarray(m.T @ qf).reshape(k.shape)
        return gq, gk, gv

    return T.record(out, (q, k, v), grad_fn)


def sdpa(q, k, v, mask=None, *, floor=None, trace=None, dropout=0.0, rng=None) -> Tensor:
    """Masked scaled dot-product attention.

    `mask` is an additive array broadcastable to ``B x H x Lq x Lk``, a
    `SparsePlan`, or None. Fully blocked rows produce zero outputs.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"sdpa: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    if isinstance(mask, SparsePlan):
        if dropout:
            raise NotImplementedError("dropout on sparse attention")
        return _sparse_attention(q, k, v, mask, trace)
    scores = T.scale(q @ T.transpose_last2(k), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + T.Tensor(np.asarray(mask, dtype=q.dtype))
    attn = T.softmax_lastdim(scores, floor=floor)
    if trace is not None:
        trace.append(attn.data)
    if dropout and rng is not None:
        keep = (rng.random(attn.shape) >= dropout).astype(attn.dtype) / (1 - dropout)
        attn = attn * keep
    return attn @ v


def _proj(x, p, name):
    return x @ p[f"{name}.w"] + p[f"{name}.b"]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, d = x.shape
    return T.swapaxes(x.reshape(B, L, heads, d // heads), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, L, dk = x.shape
    return T.swapaxes(x, 1, 2).reshape(B, L, H * dk)


def multi_head(xq, xkv, mask, p, heads: int, *, trace=None, dropout=0.0, rng=None) -> Tensor:
    """Project, attend per head, concatenate and project back."""
    q = _split_heads(_proj(xq, p, "q"), heads)
    k = _split_heads(_proj(xkv, p, "k"), heads)
    v = _split_heads(_proj(xkv, p, "v"), heads)
    out = sdpa(q, k, v, mask, trace=trace, dropout=dropout, rng=rng)
    return _proj(_merge_heads(out), p, "o")


def mlp(x, p, cfg: ModelConfig, *, rng=None, training=False) -> Tensor:
    if cfg.mlp_kind == "gated":
        h = T.silu(_proj(x, p, "gate")) * _proj(x, p, "up")
    else:
        h = T.gelu(_proj(x, p, "up"))
    if training and cfg.dropout and rng is not None:
        keep = (rng.random(h.shape) >= cfg.dropout).astype(h.dtype) / (1 - cfg.dropout)
        h = h * keep
    return _proj(h, p, "down")


def _ln(x, p, name, eps):
    return T.layer_norm(x, p[f"{name}.scale"], p[f"{name}.shift"], eps)


def mab(x, mask, p, cfg: ModelConfig, *, trace=None, rng=None, training=False) -> Tensor:
    """Masked attention block.

    pre-LN:  Xn = LN(X);  H = Xn + MH(Xn, Xn, Xn, M);  out = H + MLP(LN(H))
    post-LN: H = LN(X + MH(X, X, X, M));  out = LN(H + MLP(H))
    """
    drop = cfg.dropout if training else 0.0
    attn = _sub(p, "attn")
    mp = _sub(p, "mlp")
    if cfg.norm_placement == "pre":
        xn = _ln(x, p, "ln1", cfg.ln_eps)
        h = xn + multi_head(xn, xn, mask, attn, cfg.heads, trace=trace, dropout=drop, rng=rng)
        return h + mlp(_ln(h, p, "ln2", cfg.ln_eps), mp, cfg, rng=rng, training=training)
    h = _ln(x + multi_head(x, x, mask, attn, cfg.heads, trace=trace, dropout=drop, rng=rng),
            p, "ln1", cfg.ln_eps)
    return _ln(h + mlp(h, mp, cfg, rng=rng, training=training), p, "ln2", cfg.ln_eps)


def additive(mask: AttnMask | None, dtype) -> np.ndarray | None:
    """``B x 1 x L x L`` additive form of a boolean mask, ready for heads."""
    if mask is None:
        return None
    blocked = mask.blocked_array()
    return np.where(blocked, T.mask_floor(dtype), 0.0).astype(dtype)[:, None]


def sab(x, pad_mask, p, cfg: ModelConfig, **kw) -> Tensor:
    """Self-attention block: MAB whose mask only blocks padded slots."""
    return mab(x, additive(padding_mask(pad_mask), cfg.np_dtype), p, cfg, **kw)


def _block_mask(kind, mask: AttnMask, pad_mask, cfg: ModelConfig, cache: dict):
    if kind == "S":
        if "S" not in cache:
            cache["S"] = additive(padding_mask(pad_mask), cfg.np_dtype)
        return cache["S"]
    if "M" not in cache:
        if cfg.mask_layout == "sparse":
            cache["M"] = SparsePlan(mask, cfg.heads)
        else:
            cache["M"] = additive(mask, cfg.np_dtype)
    return cache["M"]


def encoder(x, mask: AttnMask, pad_mask, cfg: ModelConfig, params, *, trace=None,
            rng=None, training=False) -> Tensor:
    """Apply the M/S blocks of ``cfg.layer_string`` (up to P) in order.

    With `trace` (a list), appends one ``(layer_name, scores)`` pair per
    block, scores being ``B x H x L x L`` post-softmax weights.
    """
    cache: dict = {}
    for i, kind in enumerate(cfg.encoder_layers):
        m = _block_mask(kind, mask, pad_mask, cfg, cache)
        scores = [] if trace is not None else None
        x = mab(x, m, _sub(params, f"enc.{i}"), cfg, trace=scores, rng=rng, training=training)
        if trace is not None:
            trace.append((f"enc.{i}.{kind}", scores[0]))
    return x


def pma(z, pad_mask, cfg: ModelConfig, params, *, trace=None, rng=None, training=False) -> Tensor:
    """Pool tokens into ``cfg.seeds`` vectors: seeds cross-attend over real tokens,
    then LN, a residual MLP and ``cfg.pma_sabs`` self-attention blocks."""
    B = z.shape[0]
    dtype = cfg.np_dtype
    seeds = T.Tensor(np.zeros((B, cfg.seeds, cfg.d_model), dtype=dtype)) + params["pma.seeds"]
    cols = np.asarray(pad_mask, dtype=bool)[:, None, None, :]
    cross = np.where(cols, 0.0, T.mask_floor(dtype)).astype(dtype)
    scores = [] if trace is not None else None
    drop = cfg.dropout if training else 0.0
    s = multi_head(seeds, z, cross, _sub(params, "pma.attn"), cfg.heads,
                   trace=scores, dropout=drop, rng=rng)
    if trace is not None:
        trace.append(("pma.cross", scores[0]))
    s = _ln(s, params, "pma.ln", cfg.ln_eps)
    s = s + mlp(s, _sub(params, "pma.mlp"), cfg, rng=rng, training=training)
    all_real = np.ones((B, cfg.seeds), dtype=bool)
    for i in range(cfg.pma_sabs):
        s = sab(s, all_real, _sub(params, f"pma.sab.{i}"), cfg, rng=rng, training=training)
    return s


def forward_tokens(tokens: TokenSet, mask: AttnMask, cfg: ModelConfig, params, *,
                   trace=None, rng=None, training=False) -> Tensor:
    """Model output from prepared tokens and mask.

    Graph level returns ``B x d_out``; token level returns ``n_real x d_out``
    with rows in (graph, slot) order and padded slots dropped.
    """
    x = T.Tensor(tokens.tokens.astype(cfg.np_dtype, copy=False))
    x = _proj(x, params, "input")
    z = encoder(x, mask, tokens.pad_mask, cfg, params, trace=trace, rng=rng, training=training)
    if cfg.level == "graph":
        pooled = pma(z + x, tokens.pad_mask, cfg, params, trace=trace, rng=rng, training=training)
        pooled = pooled.sum(axis=1) if cfg.readout == "sum" else pooled.mean(axis=1)
        return _proj(pooled, params, "head")
    out = _proj(z, params, "head")
    B, L, d = out.shape
    flat = out.reshape(B * L, d)
    return flat[np.flatnonzero(tokens.pad_mask.ravel())]


def prepare(bg: BatchedGraph, cfg: ModelConfig, L: int | None = None):
    """Tokens and structural mask for a batch, per the config's token kind."""
    if cfg.tokens == "edge":
        tokens = build_edge_tokens(bg, L)
        mask = edge_mask_for(bg, tokens.L, layout=cfg.mask_layout)
    else:
        tokens = build_node_tokens(bg, L)
        mask = node_mask_for(bg, tokens.L, layout=cfg.mask_layout)
    if tokens.tokens.shape[2] != cfg.d_in:
        raise ConfigError(f"token width {tokens.tokens.shape[2]} does not match d_in {cfg.d_in}")
    return tokens, mask


def esa_forward(bg: BatchedGraph, cfg: ModelConfig, params, *, L: int | None = None,
                trace=None, rng=None, training=False) -> Tensor:
    tokens, mask = prepare(bg, cfg, L)
    return forward_tokens(tokens, mask, cfg, params, trace=trace, rng=rng, training=training)


class ESA:
    """A config plus its parameters."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None, seed: int = 0):
        self.cfg = cfg.validate()
        self.params = params if params is not None else init_params(cfg, seed)

    def __call__(self, bg: BatchedGraph, **kw) -> Tensor:
        return esa_forward(bg, self.cfg, self.params, **kw)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = state[k].astype(p.data.dtype).copy()

    def save(self, path) -> None:
        save_checkpoint(path, self.cfg, self.params)

    @classmethod
    def load(cls, path) -> "ESA":
        cfg, params = load_checkpoint(path)
        return cls(cfg, params)


# -- checkpoint format ------------------------------------------------------------
#
#   ESA-CHECKPOINT v1\n
#   <ModelConfig as "key = value" lines>\n
#   \n
#   for each parameter:
#     param <name> <dtype> <d0,d1,...>\n
#     <raw little-endian bytes>\n
#   end\n

MAGIC = b"ESA-CHECKPOINT v1\n"


def save_checkpoint(path, cfg: ModelConfig, params: dict) -> None:
    parts = [MAGIC, cfg.to_text().encode(), b"\n"]
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data)
        dt = arr.dtype.newbyteorder("<")
        shape = ",".join(map(str, arr.shape))
        parts.append(f"param {name} {dt.str} {shape}\n".encode())
        parts.append(arr.astype(dt, copy=False).tobytes())
        parts.append(b"\n")
    parts.append(b"end\n")
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Parameter]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not an ESA checkpoint (bad magic)")
    head_end = raw.index(b"\n\n", len(MAGIC))
    cfg = ModelConfig.from_text(raw[len(MAGIC):head_end].decode()).validate()
    pos = head_end + 2
    params = {}
    while True:
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode()
        pos = nl + 1
        if line == "end":
            break
        _, name, dt, shape = line.split(" ")
        shape = tuple(int(s) for s in shape.split(",") if s)
        dtype = np.dtype(dt)
        n = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype=dtype, count=n // dtype.itemsize, offset=pos).reshape(shape)
        params[name] = Parameter(arr.astype(dtype.newbyteorder("=")), name)
        pos += n + 1
    expected = set(init_params(cfg, 0))
    if set(params) != expected:
        raise ValueError(f"{path}: parameters do not match the stored config")
    return cfg, params


__all__ = [
    "ConfigError",
    "ModelConfig",
    "ESA",
    "SparsePlan",
    "init_params",
    "sdpa",
    "multi_head",
    "mlp",
    "mab",
    "sab",
    "encoder",
    "pma",
    "additive",
    "forward_tokens",
    "prepare",
    "esa_forward",
    "save_checkpoint",
    "load_checkpoint",
]
