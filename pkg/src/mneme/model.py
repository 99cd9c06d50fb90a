"""Recurrence-cache transformer LM with an optional entity memory.

Three variants share one implementation:

``vanilla``
    pre-norm transformer layers whose self-attention also sees a cache of
    earlier (detached) layer inputs, with learned relative-position biases.
``static``
    adds a cross-attention block per layer, run in parallel with
    self-attention and merged through a per-dimension sigmoid gate.  Memory
    slots are initialised from the prompt and never change.
``dynamic``
    like ``static``, plus a gated convex write to the slot values after every
    chunk, driven by the final layer's cross-attention weights.

Memory slots hold a static key (used for scoring) and a value (aggregated by
the read).  In the static variant both roles are played by the key.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tt
from .errors import ContractError, FormatError, InputError, StateError
from .tensor import Tensor

VARIANTS = ("vanilla", "static", "dynamic")
CLOSED_GATE_BIAS = -1.0e4  # sigmoid underflows to exactly 0.0
_MASK_VALUE = -1.0e30


@dataclass
class ModelConfig:
    variant: str = "dynamic"
    vocab_size: int = 256
    num_layers: int = 2
    self_heads: int = 2
    cross_heads: int = 4
    hidden_dim: int = 64
    memory_dim: int | None = None
    ffn_dim: int | None = None
    seq_len: int = 512
    cache_size: int = 500
    chunk_size: int = 64
    tau: float = 0.1
    max_entities: int = 32
    rel_buckets: int = 32
    rel_max_distance: int = 1024
    init_std: float = 0.02
    detach_memory_values: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.memory_dim is None:
            self.memory_dim = self.hidden_dim
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden_dim
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise InputError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.hidden_dim % self.self_heads or self.hidden_dim % self.cross_heads:
            raise InputError("hidden_dim must be divisible by self_heads and cross_heads")
        if self.memory_dim != self.hidden_dim:
            raise InputError("memory_dim must equal hidden_dim: slots are LM output embeddings")
        if not 0 < self.chunk_size <= self.seq_len:
            raise InputError("need 0 < chunk_size <= seq_len")
        if self.cache_size < 0:
            raise InputError("cache_size must be >= 0")
        if self.tau <= 0:
            raise InputError("tau must be positive")
        if self.max_entities < 1:
            raise InputError("max_entities must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise InputError("dtype must be float64 or float32")

    @property
    def has_memory(self) -> bool:
        return self.variant != "vanilla"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EntityMemoryState:
    """Z slots; the last one is the non-entity slot."""

    keys: Tensor
    values: Tensor
    static: bool = False

    @property
    def num_slots(self) -> int:
        return self.keys.shape[0]

    def to_bytes(self) -> bytes:
        return self.keys.data.tobytes() + self.values.data.tobytes()


@dataclass
class RecurrenceCache:
    """Detached per-layer inputs of the most recent ``<= cache_size`` tokens."""

    states: list[np.ndarray]
    cache_size: int

    @classmethod
    def empty(cls, num_layers: int, dim: int, cache_size: int, dtype=np.float64) -> "RecurrenceCache":
        return cls([np.zeros((0, dim), dtype=dtype) for _ in range(num_layers)], cache_size)

    def __len__(self) -> int:
        return self.states[0].shape[0]

    def extended(self, new_states: Sequence[np.ndarray]) -> "RecurrenceCache":
        keep = self.cache_size
        out = []
        for old, new in zip(self.states, new_states):
            joined = np.concatenate([old, new], axis=0)
            out.append(joined[max(0, len(joined) - keep):])
        return RecurrenceCache(out, keep)

    def with_size(self, cache_size: int) -> "RecurrenceCache":
        return RecurrenceCache([s[max(0, len(s) - cache_size):] for s in self.states], cache_size)


@dataclass
class ChunkOutput:
    logits: Tensor
    cache: RecurrenceCache
    final_hidden: Tensor
    cross_weights: list[Tensor] | None = None  # per layer, [H, T, Z]
    gates: list[np.ndarray] | None = None  # per layer, [T, d]


@dataclass
class MemoryWrite:
    memory: EntityMemoryState
    slot_summary: Tensor  # h_j, [Z, d]
    strength: np.ndarray  # w_j, [Z]
    gate: np.ndarray  # g_j, [Z, d]


def relative_buckets(distance: np.ndarray, num_buckets: int, max_distance: int) -> np.ndarray:
    """Causal log-spaced bucketing of non-negative query-key distances."""
    d = np.maximum(distance, 0)
    exact = max(num_buckets // 2, 1)
    scaled = np.log(np.maximum(d, 1) / exact) / math.log(max(max_distance / exact, 1.0 + 1e-9))
    large = exact + (scaled * (num_buckets - exact)).astype(np.int64)
    return np.where(d < exact, d, np.minimum(large, num_buckets - 1))


class MnemeLM:
    """Language model; parameters live in the ordered dict ``params``."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.dtype = np.dtype(config.dtype).type
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.checkpoint_extra: dict = {}
        self._build(rng)

    # -- parameters -------------------------------------------------------
    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr, requires_grad=True, dtype=self.dtype)

    def _build(self, rng: np.random.Generator) -> None:
        c = self.config
        d, f, std = c.hidden_dim, c.ffn_dim, c.init_std

        def normal(*shape):
            return rng.normal(0.0, std, shape)

        self._add("embed", rng.normal(0.0, 1.0, (c.vocab_size, d)))
        for l in range(c.num_layers):
            p = f"layers.{l}."
            self._add(p + "ln1.g", np.ones(d))
            self._add(p + "ln1.b", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                self._add(p + "attn." + w, normal(d, d))
            self._add(p + "attn.rel_bias", np.zeros((c.self_heads, c.rel_buckets)))
            self._add(p + "ln2.g", np.ones(d))
            self._add(p + "ln2.b", np.zeros(d))
            self._add(p + "ffn.w1", normal(d, f))
            self._add(p + "ffn.b1", np.zeros(f))
            self._add(p + "ffn.w2", normal(f, d))
            self._add(p + "ffn.b2", np.zeros(d))
            if c.has_memory:
                H = c.cross_heads
                dc = d // H
                self._add(p + "cross.wq", normal(d, H * dc))
                self._add(p + "cross.wk", normal(c.memory_dim, H * dc))
                self._add(p + "cross.wm", normal(H, c.memory_dim, dc))
                self._add(p + "cross.we", normal(H * dc, d))
                self._add(p + "gate.w", normal(2 * d, d))
                self._add(p + "gate.b", np.zeros(d))
        self._add("ln_f.g", np.ones(d))
        self._add("ln_f.b", np.zeros(d))
        self._add("out.w", normal(d, c.vocab_size))
        self._add("out.b", np.zeros(c.vocab_size))
        if c.has_memory:
            self._add("memory.null_slot", rng.normal(0.0, 1.0, d))
        if c.variant == "dynamic":
            self._add("update.w", normal(2 * d, d))
            self._add("update.b", np.zeros(d))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))

    def copy_shared_from(self, other: "MnemeLM") -> None:
        """Copy every identically named, identically shaped parameter from ``other``."""
        for name, p in self.params.items():
            q = other.params.get(name)
            if q is not None and q.shape == p.shape:
                p.data = q.data.copy()

    def close_gates(self) -> None:
        """Force every read gate to exactly 0 (memory variants reduce to vanilla)."""
        for l in range(self.config.num_layers):
            key = f"layers.{l}.gate."
            if key + "w" in self.params:
                self.params[key + "w"].data[...] = 0.0
                self.params[key + "b"].data[...] = CLOSED_GATE_BIAS

    def empty_cache(self, cache_size: int | None = None) -> RecurrenceCache:
        c = self.config
        size = c.cache_size if cache_size is None else cache_size
        return RecurrenceCache.empty(c.num_layers, c.hidden_dim, size, self.dtype)

    # -- building blocks ----------------------------------------------------
    def _affine_ln(self, x: Tensor, prefix: str) -> Tensor:
        n = x.shape[0]
        y = tt.layer_norm(x)
        return tt.expand_rows(self.params[prefix + ".g"], n) * y + tt.expand_rows(self.params[prefix + ".b"], n)

    def _linear(self, x: Tensor, w: str, b: str | None = None) -> Tensor:
        y = x @ self.params[w]
        if b is not None:
            y = y + tt.expand_rows(self.params[b], x.shape[0])
        return y

    def _self_attention(self, l: int, u_ctx: Tensor, n_new: int) -> Tensor:
        c = self.config
        p = f"layers.{l}.attn."
        S, d = u_ctx.shape
        H = c.self_heads
        dh = d // H
        offset = S - n_new
        u = u_ctx[offset:] if offset else u_ctx
        q = tt.transpose(tt.reshape(u @ self.params[p + "wq"], (n_new, H, dh)), (1, 0, 2))
        k = tt.transpose(tt.reshape(u_ctx @ self.params[p + "wk"], (S, H, dh)), (1, 2, 0))
        v = tt.transpose(tt.reshape(u_ctx @ self.params[p + "wv"], (S, H, dh)), (1, 0, 2))
        dist = (offset + np.arange(n_new))[:, None] - np.arange(S)[None, :]
        buckets = relative_buckets(dist, c.rel_buckets, c.rel_max_distance)
        scores = tt.scale(q @ k, 1.0 / math.sqrt(dh)) + self.params[p + "rel_bias"][:, buckets]
        mask = np.broadcast_to(dist < 0, (H, n_new, S))
        attn = tt.softmax(tt.masked_fill(scores, mask, _MASK_VALUE), axis=-1)
        ctx = tt.reshape(tt.transpose(attn @ v, (1, 0, 2)), (n_new, d))
        return ctx @ self.params[p + "wo"]

    def cross_attend(self, x: Tensor, memory: EntityMemoryState | None, layer: int) -> tuple[Tensor, Tensor]:
        """Read the entity memory; returns ``(e [T, d], a [H, T, Z])``."""
        if memory is None or memory.keys is None:
            raise StateError("entity memory is not initialised")
        c = self.config
        p = f"layers.{layer}.cross."
        T, d = x.shape
        H = c.cross_heads
        dc = d // H
        Z, dm = memory.keys.shape
        values = memory.keys if memory.static else memory.values
        q = tt.transpose(tt.reshape(x @ self.params[p + "wq"], (T, H, dc)), (1, 0, 2))
        k = tt.transpose(tt.reshape(memory.keys @ self.params[p + "wk"], (Z, H, dc)), (1, 2, 0))
        a = tt.softmax(tt.scale(q @ k, 1.0 / math.sqrt(dm)), axis=-1)
        read = a @ tt.expand(tt.reshape(values, (1, Z, dm)), (H, Z, dm))
        heads = read @ self.params[p + "wm"]
        e = tt.reshape(tt.transpose(heads, (1, 0, 2)), (T, H * dc)) @ self.params[p + "we"]
        return e, a

    def gate_combine(self, h: Tensor, e: Tensor, layer: int) -> tuple[Tensor, Tensor]:
        """``g = sigmoid(W[h; e] + b)``, ``h' = (1-g) h + g e``; returns ``(h', g)``."""
        p = f"layers.{layer}.gate."
        g = tt.sigmoid(self._linear(tt.concat([h, e], axis=1), p + "w", p + "b"))
        return tt.one_minus(g) * h + g * e, g

    def _layer(self, l: int, x: Tensor, cached: np.ndarray, memory: EntityMemoryState | None):
        p = f"layers.{l}."
        n = x.shape[0]
        ctx = tt.concat([Tensor(cached, dtype=self.dtype), x], axis=0) if len(cached) else x
        u_ctx = self._affine_ln(ctx, p + "ln1")
        h = self._self_attention(l, u_ctx, n)
        a = g = None
        if memory is not None and self.config.has_memory:
            u = u_ctx[len(cached):] if len(cached) else u_ctx
            e, a = self.cross_attend(u, memory, l)
            h, g = self.gate_combine(h, e, l)
        x = x + h
        f = tt.gelu(self._linear(self._affine_ln(x, p + "ln2"), p + "ffn.w1", p + "ffn.b1"))
        x = x + self._linear(f, p + "ffn.w2", p + "ffn.b2")
        return x, a, g

    # -- forward --------------------------------------------------------------
    def forward_chunk(
        self,
        tokens: Sequence[int],
        cache: RecurrenceCache | None = None,
        memory: EntityMemoryState | None = None,
    ) -> ChunkOutput:
        c = self.config
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or len(ids) == 0:
            raise InputError("forward_chunk needs a non-empty 1-D token sequence")
        if len(ids) > c.seq_len:
            raise InputError(f"chunk of {len(ids)} tokens exceeds seq_len={c.seq_len}")
        if ids.min() < 0 or ids.max() >= c.vocab_size:
            raise InputError(f"token id out of range [0, {c.vocab_size})")
        if cache is None:
            cache = self.empty_cache()
        x = self.params["embed"][ids]
        inputs, weights, gates = [], [], []
        for l in range(c.num_layers):
            inputs.append(x.data)
            x, a, g = self._layer(l, x, cache.states[l], memory)
            weights.append(a)
            gates.append(None if g is None else g.data)
        y = self._affine_ln(x, "ln_f")
        logits = self._linear(y, "out.w", "out.b")
        has_read = memory is not None and c.has_memory
        return ChunkOutput(
            logits=logits,
            cache=cache.extended(inputs),
            final_hidden=y,
            cross_weights=weights if has_read else None,
            gates=gates if has_read else None,
        )

    def prompt_pass(self, prompt_ids: Sequence[int], cache: RecurrenceCache | None = None) -> ChunkOutput:
        """Run the prompt (no memory) in ``seq_len`` segments; concatenates the outputs."""
        c = self.config
        prompt_ids = list(prompt_ids)
        if not prompt_ids:
            raise InputError("empty prompt")
        if len(prompt_ids) > c.seq_len + c.cache_size:
            raise InputError(f"prompt of {len(prompt_ids)} tokens exceeds seq_len + cache_size")
        cache = self.empty_cache() if cache is None else cache
        outs = []
        for s in range(0, len(prompt_ids), c.seq_len):
            out = self.forward_chunk(prompt_ids[s:s + c.seq_len], cache)
            cache = out.cache
            outs.append(out)
        if len(outs) == 1:
            return outs[0]
        return ChunkOutput(
            logits=tt.concat([o.logits for o in outs]),
            cache=cache,
            final_hidden=tt.concat([o.final_hidden for o in outs]),
        )

    # -- memory ---------------------------------------------------------------
    def memory_from_hidden(self, hidden: Tensor, groups: Sequence[tuple[int, int]]) -> EntityMemoryState:
        """Slot j = mean of the prompt outputs in ``groups[j]``; the last slot
        averages every prompt position outside the groups."""
        c = self.config
        if not c.has_memory:
            raise ContractError("vanilla model has no entity memory")
        if len(groups) + 1 > c.max_entities:
            raise InputError(f"{len(groups)} entities exceed max_entities={c.max_entities} slots")
        P = hidden.shape[0]
        covered = np.zeros(P, dtype=bool)
        rows = []
        for start, end in groups:
            if not 0 <= start < end <= P:
                raise InputError(f"empty or out-of-range entity group ({start}, {end})")
            covered[start:end] = True
            rows.append(tt.mean(hidden[start:end], axis=0, keepdims=True))
        rest = np.flatnonzero(~covered)
        if len(rest):
            rows.append(tt.mean(hidden[rest], axis=0, keepdims=True))
        else:
            rows.append(tt.reshape(self.params["memory.null_slot"], (1, c.hidden_dim)))
        keys = tt.concat(rows, axis=0)
        return EntityMemoryState(keys=keys, values=keys, static=c.variant == "static")

    def init_memory(self, prompt_ids: Sequence[int], groups: Sequence[tuple[int, int]]) -> EntityMemoryState:
        return self.memory_from_hidden(self.prompt_pass(prompt_ids).final_hidden, groups)

    def random_memory(self, num_entities: int, rng: np.random.Generator) -> EntityMemoryState:
        """Memory for the no-initialisation ablation: N(0, 1) slots."""
        c = self.config
        if num_entities + 1 > c.max_entities:
            raise InputError(f"{num_entities} entities exceed max_entities={c.max_entities} slots")
        keys = Tensor(rng.normal(0.0, 1.0, (num_entities + 1, c.hidden_dim)), dtype=self.dtype)
        return EntityMemoryState(keys=keys, values=keys, static=c.variant == "static")

    def write_memory(self, memory: EntityMemoryState, final_hidden: Tensor, weights: Tensor) -> MemoryWrite:
        """Gated convex update of the slot values from one chunk.

        ``weights`` are the final layer's cross-attention weights ``[H, T, Z]``.
        """
        c = self.config
        if c.variant != "dynamic":
            raise ContractError(f"memory updates need the dynamic variant, not {c.variant!r}")
        H, T, Z = weights.shape
        d = c.hidden_dim
        per_token = tt.max_over_axis(weights, axis=0)  # [T, Z]
        over_tokens = tt.softmax(tt.scale(per_token, 1.0 / c.tau), axis=0)
        summary = tt.transpose(over_tokens) @ final_hidden  # [Z, d]
        strength = tt.max_over_axis(per_token, axis=0)  # [Z]
        old = memory.values.detach() if c.detach_memory_values else memory.values
        g = tt.sigmoid(self._linear(tt.concat([summary, old], axis=1), "update.w", "update.b"))
        wg = tt.expand(tt.reshape(strength, (Z, 1)), (Z, d)) * g
        new_values = tt.one_minus(wg) * old + wg * summary
        new = EntityMemoryState(keys=memory.keys, values=new_values, static=False)
        return MemoryWrite(new, summary, strength.data.copy(), g.data.copy())

    def update_memory(self, memory: EntityMemoryState, final_hidden: Tensor, weights: Tensor) -> EntityMemoryState:
        return self.write_memory(memory, final_hidden, weights).memory


# -- checkpoints ----------------------------------------------------------------
MAGIC = b"MNEME1"
_U64 = struct.Struct("<Q")


def save_checkpoint(model: MnemeLM, path, extra: dict | None = None) -> None:
    """Binary layout: magic, u64-prefixed JSON config, then per weight
    (u64 name length, name, u64 rank, rank x u64 dims, little-endian f64 data)."""
    header = {"format": 1, "config": model.config.to_dict()}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U64.pack(len(blob)))
        fh.write(blob)
        for name, p in model.params.items():
            raw = name.encode("utf-8")
            fh.write(_U64.pack(len(raw)))
            fh.write(raw)
            fh.write(_U64.pack(p.ndim))
            for dim in p.shape:
                fh.write(_U64.pack(dim))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated checkpoint")
    return buf


def load_checkpoint(path) -> MnemeLM:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            if magic[:5] == MAGIC[:5]:
                raise FormatError(f"unsupported checkpoint version {magic!r}")
            raise FormatError("not a checkpoint (bad magic)")
        (n,) = _U64.unpack(_read_exact(fh, 8))
        try:
            header = json.loads(_read_exact(fh, n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt config block: {exc}") from None
        if header.get("format") != 1:
            raise FormatError(f"unsupported checkpoint format {header.get('format')!r}")
        model = MnemeLM(ModelConfig.from_dict(header["config"]))
        seen = set()
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise FormatError("truncated checkpoint")
            (ln,) = _U64.unpack(head)
            name = _read_exact(fh, ln).decode("utf-8")
            (rank,) = _U64.unpack(_read_exact(fh, 8))
            dims = tuple(_U64.unpack(_read_exact(fh, 8))[0] for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(dims)
            if name not in model.params or model.params[name].shape != dims:
                raise FormatError(f"unexpected weight record {name!r} {dims}")
            model.params[name].data = data.astype(model.dtype)
            seen.add(name)
        missing = set(model.params) - seen
        if missing:
            raise FormatError(f"checkpoint lacks weights: {sorted(missing)[:5]}")
    model.checkpoint_extra = header.get("extra", {})
    return model
