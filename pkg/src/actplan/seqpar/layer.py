"""One pre-LN transformer layer, single-rank and split over simulated ranks.

Tensors use the ``(s, b, h)`` layout. The reference implementation runs on
one rank; :func:`parallel_block_forward` runs the same layer with the
weights split Megatron-style over ``t`` ranks, either with the layer-norm
and dropout regions replicated (plain tensor parallelism) or sharded along
the sequence (tensor + sequence parallelism). Both record everything they
keep for the backward pass in a byte ledger.

Dropout masks come from a Philox stream keyed by (seed, layer, op,
microbatch), so any rank, and any recomputation, regenerates identical
masks.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from ..config import ByteConvention
from .collectives import CommLog, RankShardedTensor, all_gather, all_reduce, reduce_scatter

_MASK_OPS = {"attention_probs": 1, "attention_output": 2, "mlp_output": 3}
_GELU_K = math.sqrt(2.0 / math.pi)

# Tensors of the attention core; dropped and recomputed under selective recomputation.
ATTENTION_CORE = ("softmax_output", "softmax_dropout_mask", "softmax_dropout_output")


class RecomputeMismatchError(RuntimeError):
    """Recomputed attention tensors differ from the ones produced in the forward pass."""


@dataclass(frozen=True)
class HarnessConfig:
    a: int
    h: int
    s: int
    b: int = 1
    dropout: float = 0.0
    causal: bool = False
    activation: str = "gelu"  # or "identity"
    eps: float = 1e-5
    seed: int = 42
    layer: int = 0
    microbatch: int = 0
    selective: bool = False
    bytes: ByteConvention = field(default_factory=ByteConvention)

    def __post_init__(self) -> None:
        if self.h % self.a:
            raise ValueError("h must be divisible by a")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation not in ("gelu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.h // self.a

    @property
    def keep_scale(self) -> float:
        return 1.0 / (1.0 - self.dropout)


@dataclass
class LayerParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_qkv: np.ndarray  # (h, 3h): [query | key | value] columns
    b_qkv: np.ndarray
    w_proj: np.ndarray  # (h, h)
    b_proj: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_fc1: np.ndarray  # (h, 4h)
    b_fc1: np.ndarray
    w_fc2: np.ndarray  # (4h, h)
    b_fc2: np.ndarray

    def names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def items(self):
        return [(name, getattr(self, name)) for name in self.names()]

    def copy(self) -> "LayerParams":
        return LayerParams(**{name: value.copy() for name, value in self.items()})


REPLICATED_PARAMS = ("ln1_g", "ln1_b", "b_proj", "ln2_g", "ln2_b", "b_fc2")


def init_params(cfg: HarnessConfig, rng: np.random.Generator) -> LayerParams:
    h = cfg.h
    scale = 1.0 / math.sqrt(h)

    def mat(rows, cols, s=scale):
        return rng.normal(0.0, s, size=(rows, cols))

    def vec(n, mean=0.0):
        return mean + 0.1 * rng.normal(size=n)

    return LayerParams(
        ln1_g=vec(h, 1.0), ln1_b=vec(h),
        w_qkv=mat(h, 3 * h), b_qkv=vec(3 * h),
        w_proj=mat(h, h), b_proj=vec(h),
        ln2_g=vec(h, 1.0), ln2_b=vec(h),
        w_fc1=mat(h, 4 * h), b_fc1=vec(4 * h),
        w_fc2=mat(4 * h, h, 1.0 / math.sqrt(4 * h)), b_fc2=vec(h),
    )


# -- byte ledger ----------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    name: str
    shape: tuple[int, ...]
    kind: str
    bytes: int


@dataclass
class Ledger:
    """What a rank keeps for the backward pass, sized under a byte convention."""

    conv: ByteConvention
    entries: list[LedgerEntry] = field(default_factory=list)
    discarded: list[LedgerEntry] = field(default_factory=list)

    def _entry(self, name: str, array: np.ndarray) -> LedgerEntry:
        kind = "mask" if array.dtype == np.uint8 else "activation"
        elem = self.conv.mask_elem if kind == "mask" else self.conv.activation_elem
        return LedgerEntry(name, tuple(array.shape), kind, int(array.size) * elem)

    @property
    def total_bytes(self) -> int:
        return sum(e.bytes for e in self.entries)

    @property
    def discarded_bytes(self) -> int:
        return sum(e.bytes for e in self.discarded)

    def by_name(self) -> dict[str, int]:
        return {e.name: e.bytes for e in self.entries}


class _Store:
    def __init__(self, conv: ByteConvention):
        self.ledger = Ledger(conv)
        self.tensors: dict[str, np.ndarray] = {}
        self.fingerprint: str | None = None

    def save(self, name: str, array: np.ndarray) -> None:
        self.tensors[name] = array
        self.ledger.entries.append(self.ledger._entry(name, array))

    def discard(self, name: str, array: np.ndarray) -> None:
        self.ledger.discarded.append(self.ledger._entry(name, array))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise RuntimeError(f"missing saved tensor {name!r}; run the forward pass first") from None


# -- primitives -------------------------------------------------------------------


def dropout_mask(cfg: HarnessConfig, op: str, shape: tuple[int, ...]) -> np.ndarray:
    """Keep-mask (1 = keep) for one dropout op, identical on every call with the same key."""
    if cfg.dropout == 0.0:
        return np.ones(shape, dtype=np.uint8)
    seq = np.random.SeedSequence([cfg.seed, cfg.layer, _MASK_OPS[op], cfg.microbatch])
    rng = np.random.Generator(np.random.Philox(seq))
    return (rng.random(shape) >= cfg.dropout).astype(np.uint8)


def _dropout(x: np.ndarray, mask: np.ndarray, cfg: HarnessConfig) -> np.ndarray:
    return x * mask * cfg.keep_scale


def layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * rstd * g + b


def layer_norm_backward(dy, x, g, eps):
    """Return (dx, dg, db); mean and variance are recomputed from the saved input."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _act(u, cfg):
    if cfg.activation == "identity":
        return u.copy()
    return 0.5 * u * (1.0 + np.tanh(_GELU_K * (u + 0.044715 * u ** 3)))


def _act_backward(dz, u, cfg):
    if cfg.activation == "identity":
        return dz.copy()
    th = np.tanh(_GELU_K * (u + 0.044715 * u ** 3))
    deriv = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * _GELU_K * (1.0 + 3 * 0.044715 * u * u)
    return dz * deriv


def _to_heads(x, heads):
    s, b, width = x.shape
    return x.reshape(s, b, heads, width // heads).transpose(1, 2, 0, 3).copy()


def _from_heads(x):
    b, heads, s, d = x.shape
    return x.transpose(2, 0, 1, 3).reshape(s, b, heads * d)


def _weight_grad(inp, dout):
    return inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])


def attention_core(q, k, v, mask, cfg):
    """Scores, softmax, softmax dropout and attention over values for a set of heads."""
    scores = (q @ np.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(cfg.head_dim))
    if cfg.causal:
        s = scores.shape[-1]
        scores = np.where(np.tril(np.ones((s, s), dtype=bool)), scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    dropped = _dropout(probs, mask, cfg)
    return probs, dropped, dropped @ v


def attention_core_backward(dctx, q, k, v, probs, mask, dropped, cfg):
    ddropped = dctx @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(dropped, -1, -2) @ dctx
    dprobs = _dropout(ddropped, mask, cfg)
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores = dscores * (1.0 / math.sqrt(cfg.head_dim))
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    return dq, dk, dv


def _fingerprint(*arrays: np.ndarray) -> str:
    digest = hashlib.sha256()
    for x in arrays:
        digest.update(x.tobytes())
    return digest.hexdigest()


@dataclass(frozen=True)
class AttentionInterior:
    probs: np.ndarray
    mask: np.ndarray
    dropped: np.ndarray

    @property
    def arrays(self):
        return self.probs, self.mask, self.dropped


def selective_recompute_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, cfg: HarnessConfig,
                                  heads: slice | None = None,
                                  fingerprint: str | None = None) -> AttentionInterior:
    """Rebuild the attention-core tensors from the stored query, key and value.

    ``heads`` selects this rank's heads out of the full mask. With a
    ``fingerprint`` from the forward pass, any difference from the original
    tensors raises :class:`RecomputeMismatchError`.
    """
    full_mask = dropout_mask(cfg, "attention_probs", (cfg.b, cfg.a, cfg.s, cfg.s))
    mask = full_mask[:, heads if heads is not None else slice(None)]
    probs, dropped, _ = attention_core(q, k, v, mask, cfg)
    if fingerprint is not None and _fingerprint(probs, mask, dropped) != fingerprint:
        raise RecomputeMismatchError("recomputed attention tensors differ from the forward pass")
    return AttentionInterior(probs, mask, dropped)


def _keep_core(store: _Store, cfg: HarnessConfig, probs, mask, dropped) -> None:
    if cfg.selective:
        for name, x in zip(ATTENTION_CORE, (probs, mask, dropped)):
            store.discard(name, x)
        store.fingerprint = _fingerprint(probs, mask, dropped)
    else:
        for name, x in zip(ATTENTION_CORE, (probs, mask, dropped)):
            store.save(name, x)


def _core_tensors(store: _Store, cfg: HarnessConfig, heads: slice | None):
    if store.fingerprint is None:
        return tuple(store[name] for name in ATTENTION_CORE)
    return selective_recompute_attention(
        store["query"], store["key"], store["value"], cfg, heads, store.fingerprint).arrays


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


# -- reference (single rank) ---------------------------------------------------------


@dataclass
class ReferenceState:
    store: _Store
    params: LayerParams
    cfg: HarnessConfig

    @property
    def ledger(self) -> Ledger:
        return self.store.ledger


def reference_block_forward(x: np.ndarray, params: LayerParams, cfg: HarnessConfig):
    """Run the layer on one rank. Returns ``(y, state)``; ``state.ledger`` lists what was kept."""
    s, b, h, a = cfg.s, cfg.b, cfg.h, cfg.a
    if x.shape != (s, b, h):
        raise ValueError(f"input shape {x.shape} != {(s, b, h)}")
    _check_finite(x, "input")
    st = _Store(cfg.bytes)

    st.save("ln1_input", x)
    ln1 = layer_norm(x, params.ln1_g, params.ln1_b, cfg.eps)
    st.save("qkv_input", ln1)
    qkv = ln1 @ params.w_qkv + params.b_qkv
    q, k, v = (_to_heads(qkv[..., i * h:(i + 1) * h], a) for i in range(3))
    st.save("query", q)
    st.save("key", k)
    mask = dropout_mask(cfg, "attention_probs", (b, a, s, s))
    probs, dropped, ctx = attention_core(q, k, v, mask, cfg)
    _keep_core(st, cfg, probs, mask, dropped)
    st.save("value", v)
    ctx = _from_heads(ctx)
    st.save("proj_input", ctx)
    o = ctx @ params.w_proj
    o = o + params.b_proj
    m1 = dropout_mask(cfg, "attention_output", (s, b, h))
    st.save("attn_dropout_mask", m1)
    x2 = x + _dropout(o, m1, cfg)

    st.save("ln2_input", x2)
    ln2 = layer_norm(x2, params.ln2_g, params.ln2_b, cfg.eps)
    st.save("fc1_input", ln2)
    u = ln2 @ params.w_fc1 + params.b_fc1
    st.save("gelu_input", u)
    z = _act(u, cfg)
    st.save("fc2_input", z)
    w = z @ params.w_fc2
    w = w + params.b_fc2
    m2 = dropout_mask(cfg, "mlp_output", (s, b, h))
    st.save("mlp_dropout_mask", m2)
    y = x2 + _dropout(w, m2, cfg)
    _check_finite(y, "output")
    return y, ReferenceState(st, params, cfg)


def reference_block_backward(dy: np.ndarray, state: ReferenceState):
    """Gradients of ``sum(y * dy)``: returns ``(dx, grads)`` with ``grads`` a :class:`LayerParams`."""
    st, p, cfg = state.store, state.params, state.cfg
    h = cfg.h

    dx2 = dy
    dw = _dropout(dy, st["mlp_dropout_mask"], cfg)
    g_b_fc2 = dw.sum(axis=(0, 1))
    g_w_fc2 = _weight_grad(st["fc2_input"], dw)
    dz = dw @ p.w_fc2.T
    du = _act_backward(dz, st["gelu_input"], cfg)
    g_w_fc1 = _weight_grad(st["fc1_input"], du)
    g_b_fc1 = du.sum(axis=(0, 1))
    dln2 = du @ p.w_fc1.T
    d, g_ln2_g, g_ln2_b = layer_norm_backward(dln2, st["ln2_input"], p.ln2_g, cfg.eps)
    dx2 = dx2 + d

    do = _dropout(dx2, st["attn_dropout_mask"], cfg)
    g_b_proj = do.sum(axis=(0, 1))
    g_w_proj = _weight_grad(st["proj_input"], do)
    dctx = _to_heads(do @ p.w_proj.T, cfg.a)
    probs, mask, dropped = _core_tensors(st, cfg, None)
    dq, dk, dv = attention_core_backward(dctx, st["query"], st["key"], st["value"],
                                         probs, mask, dropped, cfg)
    dqkv = np.concatenate([_from_heads(dq), _from_heads(dk), _from_heads(dv)], axis=-1)
    g_w_qkv = _weight_grad(st["qkv_input"], dqkv)
    g_b_qkv = dqkv.sum(axis=(0, 1))
    dln1 = dqkv @ p.w_qkv.T
    d, g_ln1_g, g_ln1_b = layer_norm_backward(dln1, st["ln1_input"], p.ln1_g, cfg.eps)
    dx = dx2 + d
    assert g_w_qkv.shape == (h, 3 * h)
    grads = LayerParams(
        ln1_g=g_ln1_g, ln1_b=g_ln1_b, w_qkv=g_w_qkv, b_qkv=g_b_qkv,
        w_proj=g_w_proj, b_proj=g_b_proj, ln2_g=g_ln2_g, ln2_b=g_ln2_b,
        w_fc1=g_w_fc1, b_fc1=g_b_fc1, w_fc2=g_w_fc2, b_fc2=g_b_fc2,
    )
    return dx, grads


# -- parallel ------------------------------------------------------------------------


@dataclass
class RankParams:
    """Weights local to one tensor-parallel rank; replicated ones are shared with the full params."""

    w_qkv: np.ndarray  # columns of this rank's heads: (h, 3h/t)
    b_qkv: np.ndarray
    w_proj: np.ndarray  # rows: (h/t, h)
    w_fc1: np.ndarray  # columns: (h, 4h/t)
    b_fc1: np.ndarray
    w_fc2: np.ndarray  # rows: (4h/t, h)


def _qkv_columns(h: int, t: int, rank: int) -> np.ndarray:
    width = h // t
    cols = np.arange(rank * width, (rank + 1) * width)
    return np.concatenate([cols, cols + h, cols + 2 * h])


def shard_params(params: LayerParams, t: int) -> list[RankParams]:
    h = params.w_proj.shape[0]
    if h % t:
        raise ValueError("h not divisible by t")
    hw, fw = h // t, 4 * h // t
    out = []
    for r in range(t):
        cols = _qkv_columns(h, t, r)
        out.append(RankParams(
            w_qkv=params.w_qkv[:, cols].copy(),
            b_qkv=params.b_qkv[cols].copy(),
            w_proj=params.w_proj[r * hw:(r + 1) * hw].copy(),
            w_fc1=params.w_fc1[:, r * fw:(r + 1) * fw].copy(),
            b_fc1=params.b_fc1[r * fw:(r + 1) * fw].copy(),
            w_fc2=params.w_fc2[r * fw:(r + 1) * fw].copy(),
        ))
    return out


def unshard_grads(rank_grads: list[RankParams], replicated: dict[str, np.ndarray]) -> LayerParams:
    """Reassemble full-size gradients from rank-local pieces."""
    t = len(rank_grads)
    h = rank_grads[0].w_proj.shape[1]
    w_qkv = np.empty((h, 3 * h))
    b_qkv = np.empty(3 * h)
    for r, g in enumerate(rank_grads):
        cols = _qkv_columns(h, t, r)
        w_qkv[:, cols] = g.w_qkv
        b_qkv[cols] = g.b_qkv
    return LayerParams(
        w_qkv=w_qkv, b_qkv=b_qkv,
        w_proj=np.concatenate([g.w_proj for g in rank_grads], axis=0),
        w_fc1=np.concatenate([g.w_fc1 for g in rank_grads], axis=1),
        b_fc1=np.concatenate([g.b_fc1 for g in rank_grads]),
        w_fc2=np.concatenate([g.w_fc2 for g in rank_grads], axis=0),
        **replicated,
    )


@dataclass
class ParallelState:
    stores: list[_Store]
    params: LayerParams
    rank_params: list[RankParams]
    cfg: HarnessConfig
    sequence_parallel: bool
    log: CommLog

    @property
    def t(self) -> int:
        return len(self.stores)

    @property
    def ledgers(self) -> list[Ledger]:
        return [st.ledger for st in self.stores]


def _split(x: np.ndarray, t: int) -> list[np.ndarray]:
    return [c.copy() for c in np.split(x, t, axis=0)]


def parallel_block_forward(x: RankShardedTensor, params: LayerParams, cfg: HarnessConfig,
                           sequence_parallel: bool = True, log: CommLog | None = None):
    """Run the layer split over ``x.ranks`` simulated tensor-parallel ranks.

    With ``sequence_parallel`` the input must be sharded on the sequence and
    layer-norm/dropout regions stay sharded: the tensor-parallel entry is an
    all-gather and the exit a reduce-scatter. Without it the input is
    replicated and the exit is an all-reduce. Returns ``(y, state)``.
    """
    t = x.ranks
    s, b, h, a = cfg.s, cfg.b, cfg.h, cfg.a
    sp = sequence_parallel
    if sp and x.shard_axis != "sequence" and t > 1:
        raise ValueError("sequence-parallel input must be sharded on the sequence axis")
    if not sp and x.shard_axis != "none" and t > 1:
        raise ValueError("tensor-parallel input must be replicated")
    if x.logical_shape != (s, b, h):
        raise ValueError(f"input shape {x.logical_shape} != {(s, b, h)}")
    if s % t or h % t or a % t:
        raise ValueError(f"s, h and a must be divisible by t={t}")
    for xs in x.shards:
        _check_finite(xs, "input")
    log = CommLog() if log is None else log
    rp = shard_params(params, t)
    st = [_Store(cfg.bytes) for _ in range(t)]
    hl, al = h // t, a // t
    xs = x.shards

    def enter(parts):  # sequence-sharded -> full copy on each rank
        return all_gather(parts, 0, log) if sp else parts

    def leave(partials):  # partial sums -> sequence-sharded (or replicated) sums
        return reduce_scatter(partials, 0, log) if sp else all_reduce(partials, log)

    def local(mask):
        return _split(mask, t) if sp else [mask] * t

    ln1 = [layer_norm(xi, params.ln1_g, params.ln1_b, cfg.eps) for xi in xs]
    for r in range(t):
        st[r].save("ln1_input", xs[r])
        st[r].save("qkv_input", ln1[r])
    ln1_full = enter(ln1)
    attn_mask = dropout_mask(cfg, "attention_probs", (b, a, s, s))
    partial_o = []
    for r in range(t):
        qkv = ln1_full[r] @ rp[r].w_qkv + rp[r].b_qkv
        q, k, v = (_to_heads(qkv[..., i * hl:(i + 1) * hl], al) for i in range(3))
        st[r].save("query", q)
        st[r].save("key", k)
        mask = attn_mask[:, r * al:(r + 1) * al].copy()
        probs, dropped, ctx = attention_core(q, k, v, mask, cfg)
        _keep_core(st[r], cfg, probs, mask, dropped)
        st[r].save("value", v)
        ctx = _from_heads(ctx)
        st[r].save("proj_input", ctx)
        partial_o.append(ctx @ rp[r].w_proj)
    o = leave(partial_o)
    m1 = local(dropout_mask(cfg, "attention_output", (s, b, h)))
    x2 = []
    for r in range(t):
        st[r].save("attn_dropout_mask", m1[r])
        x2.append(xs[r] + _dropout(o[r] + params.b_proj, m1[r], cfg))

    ln2 = [layer_norm(xi, params.ln2_g, params.ln2_b, cfg.eps) for xi in x2]
    for r in range(t):
        st[r].save("ln2_input", x2[r])
        st[r].save("fc1_input", ln2[r])
    ln2_full = enter(ln2)
    partial_w = []
    for r in range(t):
        u = ln2_full[r] @ rp[r].w_fc1 + rp[r].b_fc1
        st[r].save("gelu_input", u)
        z = _act(u, cfg)
        st[r].save("fc2_input", z)
        partial_w.append(z @ rp[r].w_fc2)
    w = leave(partial_w)
    m2 = local(dropout_mask(cfg, "mlp_output", (s, b, h)))
    ys = []
    for r in range(t):
        st[r].save("mlp_dropout_mask", m2[r])
        ys.append(x2[r] + _dropout(w[r] + params.b_fc2, m2[r], cfg))
    for yr in ys:
        _check_finite(yr, "output")
    y = RankShardedTensor(ys, "sequence" if sp and t > 1 else "none")
    return y, ParallelState(st, params, rp, cfg, sp, log)


def parallel_block_backward(dy: RankShardedTensor, state: ParallelState):
    """Backward of :func:`parallel_block_forward`.

    Returns ``(dx, grads, rank_grads)``: ``dx`` laid out like the input,
    ``grads`` the reassembled full-size :class:`LayerParams` and
    ``rank_grads`` the per-rank pieces of the split weights. Under sequence
    parallelism only each rank's shard of the layer-norm outputs was kept,
    so they are all-gathered again before the weight gradients that need them.
    """
    st, p, rp, cfg, sp, log = (state.stores, state.params, state.rank_params, state.cfg,
                               state.sequence_parallel, state.log)
    t = state.t
    if dy.ranks != t:
        raise ValueError(f"gradient has {dy.ranks} ranks, forward had {t}")
    al = cfg.a // t

    def enter_bwd(parts):  # conjugate of the exit collective
        return all_gather(parts, 0, log) if sp else parts

    def leave_bwd(partials):  # conjugate of the entry collective
        return reduce_scatter(partials, 0, log) if sp else all_reduce(partials, log)

    def regather(name):
        parts = [s[name] for s in st]
        return all_gather(parts, 0, log, category="regather") if sp else parts

    def replicated_sum(parts):
        return all_reduce(parts, log, category="param_grad")[0] if sp else parts[0]

    dys = dy.shards
    dw_local = [_dropout(dys[r], st[r]["mlp_dropout_mask"], cfg) for r in range(t)]
    g_b_fc2 = replicated_sum([d.sum(axis=(0, 1)) for d in dw_local])
    dw = enter_bwd(dw_local)
    ln2_full = regather("fc1_input")
    grads = [dict() for _ in range(t)]
    partial_dln2 = []
    for r in range(t):
        grads[r]["w_fc2"] = _weight_grad(st[r]["fc2_input"], dw[r])
        dz = dw[r] @ rp[r].w_fc2.T
        du = _act_backward(dz, st[r]["gelu_input"], cfg)
        grads[r]["w_fc1"] = _weight_grad(ln2_full[r], du)
        grads[r]["b_fc1"] = du.sum(axis=(0, 1))
        partial_dln2.append(du @ rp[r].w_fc1.T)
    dln2 = leave_bwd(partial_dln2)
    dx2, dg, db = [], [], []
    for r in range(t):
        d, g_, b_ = layer_norm_backward(dln2[r], st[r]["ln2_input"], p.ln2_g, cfg.eps)
        dx2.append(dys[r] + d)
        dg.append(g_)
        db.append(b_)
    g_ln2_g, g_ln2_b = replicated_sum(dg), replicated_sum(db)

    do_local = [_dropout(dx2[r], st[r]["attn_dropout_mask"], cfg) for r in range(t)]
    g_b_proj = replicated_sum([d.sum(axis=(0, 1)) for d in do_local])
    do = enter_bwd(do_local)
    ln1_full = regather("qkv_input")
    partial_dln1 = []
    for r in range(t):
        grads[r]["w_proj"] = _weight_grad(st[r]["proj_input"], do[r])
        dctx = _to_heads(do[r] @ rp[r].w_proj.T, al)
        probs, mask, dropped = _core_tensors(st[r], cfg, slice(r * al, (r + 1) * al))
        dq, dk, dv = attention_core_backward(dctx, st[r]["query"], st[r]["key"], st[r]["value"],
                                             probs, mask, dropped, cfg)
        dqkv = np.concatenate([_from_heads(dq), _from_heads(dk), _from_heads(dv)], axis=-1)
        grads[r]["w_qkv"] = _weight_grad(ln1_full[r], dqkv)
        grads[r]["b_qkv"] = dqkv.sum(axis=(0, 1))
        partial_dln1.append(dqkv @ rp[r].w_qkv.T)
    dln1 = leave_bwd(partial_dln1)
    dxs, dg, db = [], [], []
    for r in range(t):
        d, g_, b_ = layer_norm_backward(dln1[r], st[r]["ln1_input"], p.ln1_g, cfg.eps)
        dxs.append(dx2[r] + d)
        dg.append(g_)
        db.append(b_)
    g_ln1_g, g_ln1_b = replicated_sum(dg), replicated_sum(db)

    rank_grads = [RankParams(**g) for g in grads]
    full = unshard_grads(rank_grads, dict(
        ln1_g=g_ln1_g, ln1_b=g_ln1_b, b_proj=g_b_proj,
        ln2_g=g_ln2_g, ln2_b=g_ln2_b, b_fc2=g_b_fc2,
    ))
    dx = RankShardedTensor(dxs, "sequence" if sp and t > 1 else "none")
    return dx, full, rank_grads


def seqpar_block_forward(x: RankShardedTensor, params: LayerParams, cfg: HarnessConfig,
                         log: CommLog | None = None):
    """Tensor + sequence parallel forward; ``x`` is sharded on the sequence axis."""
    return parallel_block_forward(x, params, cfg, sequence_parallel=True, log=log)


def seqpar_block_backward(dy: RankShardedTensor, state: ParallelState):
    if not state.sequence_parallel:
        raise ValueError("state comes from a tensor-parallel-only forward")
    return parallel_block_backward(dy, state)


def with_selective(cfg: HarnessConfig, selective: bool = True) -> HarnessConfig:
    return replace(cfg, selective=selective)
