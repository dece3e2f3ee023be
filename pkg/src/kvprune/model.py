"""Deterministic toy decoder-only transformer with a per-head KV cache.

Weights are drawn in float32 (held as float32-exact float64 arrays) and cached
keys/values are stored as float32; activations and every reduction are float64. Rotary phases are applied to keys when they are written
to the cache, using absolute position ids, so evicting entries never shifts
the positions of the survivors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from kvprune.tensor import DimensionError, masked_softmax


class ConfigError(ValueError):
    """Invalid model or cache configuration."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    n_q_heads: int = 8
    n_kv_heads: int = 4
    head_dim: int = 32
    vocab_size: int = 512
    max_seq: int = 1024
    seed: int = 0
    mlp_ratio: int = 4
    # Correlation between each query projection and its kv head's key projection.
    # Higher values make tokens attend to earlier copies of themselves.
    qk_align: float = 0.95
    qk_gain: float = 0.9
    rope_base: float = 10000.0
    # leading dims of each head that get rotary phases; the rest carry no position
    rotary_dim: int = 8
    # strength of a fixed token -> next-token map folded into the unembedding;
    # widens greedy logit margins so generations are stable to small perturbations
    next_token_bias: float = 1.0
    # scale of the attention and MLP output projections; small values keep
    # token identity dominant in the residual stream through depth
    branch_gain: float = 0.4

    def __post_init__(self):
        for name in ("n_layers", "n_q_heads", "n_kv_heads", "head_dim", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for rotary embedding, got {self.head_dim}")
        if self.n_q_heads % self.n_kv_heads:
            raise ConfigError(
                f"n_q_heads={self.n_q_heads} is not a multiple of n_kv_heads={self.n_kv_heads}"
            )
        if self.rotary_dim % 2 or not 0 <= self.rotary_dim <= self.head_dim:
            raise ConfigError(f"rotary_dim must be even and in [0, head_dim], got {self.rotary_dim}")
        if not 0.0 <= self.qk_align <= 1.0:
            raise ConfigError(f"qk_align must lie in [0, 1], got {self.qk_align}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 bits, got {self.seed}")

    @property
    def d_model(self) -> int:
        return self.n_q_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class Model:
    config: ModelConfig
    embed: np.ndarray
    unembed: np.ndarray
    layers: list[LayerWeights]
    # kv head serving each query head
    kv_of_q: np.ndarray = field(init=False)

    def __post_init__(self):
        self.kv_of_q = np.arange(self.config.n_q_heads) // self.config.group_size


def _rng(seed: int, tag: int) -> np.random.Generator:
    # Philox is counter-based: each tensor gets its own key, so weights do not
    # depend on generation order.
    return np.random.Generator(np.random.Philox(key=np.array([seed, tag], dtype=np.uint64)))


def _normal(seed, tag, shape, std) -> np.ndarray:
    w = _rng(seed, tag).standard_normal(shape, dtype=np.float32)
    return (w * np.float32(std)).astype(np.float32)


def build_model(config: ModelConfig) -> Model:
    c = config
    d, hd = c.d_model, c.head_dim
    d_ff = c.mlp_ratio * d
    s = c.seed
    embed = _normal(s, 0, (c.vocab_size, d), 1.0)
    unembed = _normal(s, 1, (d, c.vocab_size), 1.0 / np.sqrt(d))
    if c.next_token_bias:
        succ = _rng(s, 2).permutation(c.vocab_size)
        unembed = (unembed + np.float32(c.next_token_bias / np.sqrt(d)) * embed[succ].T).astype(np.float32)
    layers = []
    mix = np.float32(np.sqrt(1.0 - c.qk_align**2))
    for li in range(c.n_layers):
        base = 100 + 16 * li
        wk = _normal(s, base + 1, (d, c.n_kv_heads, hd), c.qk_gain / np.sqrt(d))
        noise = _normal(s, base + 0, (d, c.n_q_heads, hd), c.qk_gain / np.sqrt(d))
        kv_of_q = np.arange(c.n_q_heads) // c.group_size
        wq = (np.float32(c.qk_align) * wk[:, kv_of_q, :] + mix * noise).astype(np.float32)
        layers.append(
            LayerWeights(
                wq=wq.reshape(d, c.n_q_heads * hd),
                wk=wk.reshape(d, c.n_kv_heads * hd),
                wv=_normal(s, base + 2, (d, c.n_kv_heads * hd), 1.0 / np.sqrt(d)),
                wo=_normal(s, base + 3, (c.n_q_heads * hd, d), c.branch_gain / np.sqrt(c.n_q_heads * hd)),
                w1=_normal(s, base + 4, (d, d_ff), 1.0 / np.sqrt(d)),
                w2=_normal(s, base + 5, (d_ff, d), 0.5 * c.branch_gain / np.sqrt(d_ff)),
            )
        )
    # float32-exact values held as float64 so matmuls skip a cast on every call
    for lw in layers:
        for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
            setattr(lw, name, getattr(lw, name).astype(np.float64))
    return Model(config=c, embed=embed.astype(np.float64), unembed=unembed.astype(np.float64), layers=layers)


def rms_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def rope(x: np.ndarray, positions: np.ndarray, base: float, rotary_dim: int | None = None) -> np.ndarray:
    """Rotary embedding on the first ``rotary_dim`` entries of the last axis.

    ``positions`` broadcasts against ``x[..., 0]``.
    """
    rd = x.shape[-1] if rotary_dim is None else rotary_dim
    if rd == 0:
        return x
    half = rd // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv_freq
    cos, sin = np.cos(ang), np.sin(ang)
    x1, x2 = x[..., :half], x[..., half:rd]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos, x[..., rd:]], axis=-1)


def _mlp(x: np.ndarray, lw: LayerWeights) -> np.ndarray:
    return gelu(rms_norm(x) @ lw.w1) @ lw.w2


@dataclass
class StepOutput:
    logits: np.ndarray
    # per layer (n_q_heads, k, cache_len) float64, zeros on invalid/masked slots;
    # prefill stacks them into one array, decode keeps a list since pruned
    # layers can differ in length
    last_attention_rows: np.ndarray | list[np.ndarray]


@dataclass
class KvCache:
    """Per-layer cache; each array has a leading kv-head axis.

    keys/values: (n_kv_heads, L, head_dim) float32, already rotary-encoded.
    position_ids: (n_kv_heads, L) original absolute positions (-1 on pad slots).
    valid: (n_kv_heads, L) bool.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    position_ids: list[np.ndarray]
    valid: list[np.ndarray]
    n_seen: int

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def n_kv_heads(self) -> int:
        return self.keys[0].shape[0]

    def length(self, layer: int) -> int:
        return self.keys[layer].shape[1]

    def n_valid(self, layer: int, head: int) -> int:
        return int(self.valid[layer][head].sum())

    def retained_positions(self, layer: int, head: int) -> np.ndarray:
        return self.position_ids[layer][head][self.valid[layer][head]]

    def copy(self) -> "KvCache":
        return KvCache(
            keys=[a.copy() for a in self.keys],
            values=[a.copy() for a in self.values],
            position_ids=[a.copy() for a in self.position_ids],
            valid=[a.copy() for a in self.valid],
            n_seen=self.n_seen,
        )

    def check(self) -> None:
        for li in range(self.n_layers):
            h, length = self.valid[li].shape
            if self.keys[li].shape[:2] != (h, length) or self.values[li].shape[:2] != (h, length):
                raise ConfigError(f"layer {li}: key/value/valid lengths disagree")
            if self.position_ids[li].shape != (h, length):
                raise ConfigError(f"layer {li}: position_ids shape mismatch")
            for hi in range(h):
                pos = self.retained_positions(li, hi)
                if np.any(np.diff(pos) <= 0):
                    raise ConfigError(f"layer {li} head {hi}: position ids not increasing")

    # batched-view protocol used by the shared decode core
    def _layer_arrays(self, li):
        return (self.keys[li][None], self.values[li][None], self.valid[li][None])

    def _append(self, li, k_new, v_new, positions):
        # k_new, v_new: (1, n_kv_heads, head_dim)
        h = self.n_kv_heads
        self.keys[li] = np.concatenate([self.keys[li], k_new[0][:, None, :]], axis=1)
        self.values[li] = np.concatenate([self.values[li], v_new[0][:, None, :]], axis=1)
        pos = np.full((h, 1), positions[0], dtype=np.int64)
        self.position_ids[li] = np.concatenate([self.position_ids[li], pos], axis=1)
        self.valid[li] = np.concatenate([self.valid[li], np.ones((h, 1), dtype=bool)], axis=1)

    def _positions(self):
        return np.array([self.n_seen], dtype=np.int64)

    def _advance(self):
        self.n_seen += 1


@dataclass
class BatchKvCache:
    """Padded batch of caches; arrays carry a leading batch axis.

    Slots with ``valid == False`` are either evicted entries or padding; both
    are masked out of attention.
    """

    keys: list[np.ndarray]  # (B, n_kv_heads, L, head_dim)
    values: list[np.ndarray]
    position_ids: list[np.ndarray]  # (B, n_kv_heads, L)
    valid: list[np.ndarray]
    n_seen: np.ndarray  # (B,)

    @property
    def batch_size(self) -> int:
        return len(self.n_seen)

    def length(self, layer: int) -> int:
        return self.keys[layer].shape[2]

    def sample(self, b: int) -> KvCache:
        return KvCache(
            keys=[a[b].copy() for a in self.keys],
            values=[a[b].copy() for a in self.values],
            position_ids=[a[b].copy() for a in self.position_ids],
            valid=[a[b].copy() for a in self.valid],
            n_seen=int(self.n_seen[b]),
        )

    def _layer_arrays(self, li):
        return self.keys[li], self.values[li], self.valid[li]

    def _append(self, li, k_new, v_new, positions):
        b, h = self.valid[li].shape[:2]
        self.keys[li] = np.concatenate([self.keys[li], k_new[:, :, None, :]], axis=2)
        self.values[li] = np.concatenate([self.values[li], v_new[:, :, None, :]], axis=2)
        pos = np.broadcast_to(positions[:, None, None], (b, h, 1)).astype(np.int64)
        self.position_ids[li] = np.concatenate([self.position_ids[li], pos], axis=2)
        self.valid[li] = np.concatenate([self.valid[li], np.ones((b, h, 1), dtype=bool)], axis=2)

    def _positions(self):
        return self.n_seen.copy()

    def _advance(self):
        self.n_seen = self.n_seen + 1


def _check_tokens(model: Model, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise DimensionError(f"token sequence must be 1-D, got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise ConfigError(f"token id outside [0, {model.config.vocab_size})")
    return tokens


def prefill(model: Model, tokens, keep_rows: int = 1) -> tuple[KvCache, StepOutput]:
    """Run the prompt through the model and build its KV cache.

    ``keep_rows`` selects how many trailing query rows of each head's attention
    matrix are returned (the last row alone suffices for k = 1).
    """
    c = model.config
    tokens = _check_tokens(model, tokens)
    n = tokens.size
    if n == 0:
        raise ConfigError("cannot prefill an empty token sequence")
    if n > c.max_seq:
        raise ConfigError(f"prompt length {n} exceeds max_seq={c.max_seq}")
    if not 1 <= keep_rows <= n:
        raise DimensionError(f"keep_rows={keep_rows} outside [1, {n}]")
    hd = c.head_dim
    pos = np.arange(n)
    causal = pos[None, :] <= pos[:, None]
    x = model.embed[tokens].astype(np.float64)
    keys, values, rows = [], [], []
    for lw in model.layers:
        h = rms_norm(x)
        q = (h @ lw.wq).reshape(n, c.n_q_heads, hd).transpose(1, 0, 2)
        k = (h @ lw.wk).reshape(n, c.n_kv_heads, hd).transpose(1, 0, 2)
        v = (h @ lw.wv).reshape(n, c.n_kv_heads, hd).transpose(1, 0, 2)
        q = rope(q, pos, c.rope_base, c.rotary_dim)
        k32 = rope(k, pos, c.rope_base, c.rotary_dim).astype(np.float32)
        v32 = v.astype(np.float32)
        keys.append(k32)
        values.append(v32)
        kq = k32[model.kv_of_q].astype(np.float64)
        vq = v32[model.kv_of_q].astype(np.float64)
        probs = masked_softmax(q @ kq.transpose(0, 2, 1) / np.sqrt(hd), causal)
        rows.append(probs[:, n - keep_rows :, :])
        attn = (probs @ vq).transpose(1, 0, 2).reshape(n, c.n_q_heads * hd)
        x = x + attn @ lw.wo
        x = x + _mlp(x, lw)
    logits = rms_norm(x[-1]) @ model.unembed
    cache = KvCache(
        keys=keys,
        values=values,
        position_ids=[np.tile(pos, (c.n_kv_heads, 1)) for _ in model.layers],
        valid=[np.ones((c.n_kv_heads, n), dtype=bool) for _ in model.layers],
        n_seen=n,
    )
    return cache, StepOutput(logits=logits, last_attention_rows=np.stack(rows))


def _decode_core(model: Model, cache, tokens: np.ndarray):
    """One decode step for a (possibly padded) batch. Returns logits (B, V) and rows."""
    c = model.config
    hd = c.head_dim
    positions = cache._positions()
    if np.any(positions >= c.max_seq):
        raise ConfigError(f"decoding past max_seq={c.max_seq}")
    bsz = tokens.shape[0]
    x = model.embed[tokens].astype(np.float64)  # (B, D)
    rows = []
    for li, lw in enumerate(model.layers):
        h = rms_norm(x)
        q = (h @ lw.wq).reshape(bsz, c.n_q_heads, hd)
        k = (h @ lw.wk).reshape(bsz, c.n_kv_heads, hd)
        v = (h @ lw.wv).reshape(bsz, c.n_kv_heads, hd)
        q = rope(q, positions[:, None], c.rope_base, c.rotary_dim)
        k32 = rope(k, positions[:, None], c.rope_base, c.rotary_dim).astype(np.float32)
        cache._append(li, k32, v.astype(np.float32), positions)
        keys, vals, valid = cache._layer_arrays(li)
        kq = keys[:, model.kv_of_q].astype(np.float64)  # (B, Hq, L, hd)
        vq = vals[:, model.kv_of_q].astype(np.float64)
        scores = np.einsum("bhd,bhld->bhl", q, kq)[:, :, None, :] / np.sqrt(hd)
        probs = masked_softmax(scores, valid[:, model.kv_of_q][:, :, None, :])
        rows.append(probs)
        attn = np.einsum("bhl,bhld->bhd", probs[:, :, 0, :], vq).reshape(bsz, c.n_q_heads * hd)
        x = x + attn @ lw.wo
        x = x + _mlp(x, lw)
    cache._advance()
    logits = rms_norm(x) @ model.unembed
    return logits, rows


def decode_step(model: Model, cache: KvCache, token: int) -> StepOutput:
    """Append ``token`` to ``cache`` (in place) and return next-token logits.

    Attention runs only over valid cache entries; the new entry is always valid.
    """
    tok = _check_tokens(model, [token])
    logits, rows = _decode_core(model, cache, tok)
    return StepOutput(logits=logits[0], last_attention_rows=[r[0] for r in rows])


def decode_batch(model: Model, cache: BatchKvCache, tokens) -> np.ndarray:
    """Batched decode step over a padded cache. Returns logits of shape (B, V)."""
    tok = _check_tokens(model, tokens)
    if tok.shape[0] != cache.batch_size:
        raise DimensionError(f"{tok.shape[0]} tokens for batch of {cache.batch_size}")
    logits, _ = _decode_core(model, cache, tok)
    return logits


def greedy_decode(model: Model, cache, first_logits: np.ndarray, steps: int):
    """Greedy generation continuing from ``first_logits``.

    Returns ``(tokens, logits)`` where ``logits[t]`` produced ``tokens[t]``.
    ``cache`` is advanced in place (a KvCache or a BatchKvCache).
    """
    batched = isinstance(cache, BatchKvCache)
    cur = np.atleast_2d(first_logits)
    toks, logs = [], []
    for t in range(steps):
        nxt = np.argmax(cur, axis=-1)
        toks.append(nxt)
        logs.append(cur)
        if t == steps - 1:
            break
        if batched:
            cur = decode_batch(model, cache, nxt)
        else:
            cur = decode_step(model, cache, int(nxt[0])).logits[None]
    if not toks:
        shape = (cache.batch_size, 0) if batched else (0,)
        return np.zeros(shape, dtype=np.int64), np.zeros(shape + (model.config.vocab_size,))
    tokens = np.stack(toks, axis=-1)
    logits = np.stack(logs, axis=1)
    if not batched:
        return tokens[0], logits[0]
    return tokens, logits
