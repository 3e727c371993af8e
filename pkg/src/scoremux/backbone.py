"""Frozen shared transformer encoder: tokenizer, forward pass, MLM pretraining.

A Backbone is a small post-LN transformer encoder (BERT-style) whose
parameters live in a single name-keyed table. Once frozen it is immutable
and shareable; task adaptation only ever touches external adapter/head
parameters. Sequences are processed one at a time (no padding, no masks),
which keeps every activation a plain 2-D matrix.

Tokenization is a deterministic surrogate for a learned subword vocabulary:
lowercase, split on whitespace/punctuation, then FNV-1a-64 hash each token
into the non-reserved id space.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FrozenViolationError, ShapeError
from .numerics import (
    Matrix,
    P32,
    Precision,
    Rng,
    add,
    add_row,
    concat_cols,
    cross_entropy,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    scale as scale_op,
    slice_cols,
    softmax,
    transpose,
)
from .serialize import Reader, Writer

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
UNK_ID = 3
RESERVED_IDS = 4

MASK_FRACTION = 0.15
LN_EPS = 1e-5

CHECKPOINT_MAGIC = b"MTBB"
CHECKPOINT_VERSION = 1

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; the tokenizer's word-to-id map."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 1000
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size <= RESERVED_IDS:
            raise ContractError(f"vocab_size must exceed {RESERVED_IDS} reserved ids")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    truncated: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not self.ids or self.ids[0] != CLS_ID:
            raise ContractError("token sequence must start with CLS")

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(text: str, config: BackboneConfig) -> TokenSeq:
    """Hash-tokenize text: CLS + FNV-1a word ids, truncated to max_seq_len."""
    span = config.vocab_size - RESERVED_IDS
    words = _TOKEN_RE.findall(text.lower())
    kept = words[: config.max_seq_len - 1]
    ids = [CLS_ID] + [RESERVED_IDS + fnv1a64(w.encode("utf-8")) % span for w in kept]
    return TokenSeq(tuple(ids), truncated=len(kept) < len(words))


def param_order(config: BackboneConfig) -> list[tuple[str, int, int]]:
    """Canonical (name, rows, cols) listing; fixes checkpoint and hash order."""
    order = [
        ("tok_emb", config.vocab_size, config.d_model),
        ("pos_emb", config.max_seq_len, config.d_model),
    ]
    d, f = config.d_model, config.d_ff
    for i in range(config.n_layers):
        p = f"layer{i}."
        order += [
            (p + "wq", d, d), (p + "bq", 1, d),
            (p + "wk", d, d), (p + "bk", 1, d),
            (p + "wv", d, d), (p + "bv", 1, d),
            (p + "wo", d, d), (p + "bo", 1, d),
            (p + "ln1.gain", 1, d), (p + "ln1.bias", 1, d),
            (p + "w1", d, f), (p + "b1", 1, f),
            (p + "w2", f, d), (p + "b2", 1, d),
            (p + "ln2.gain", 1, d), (p + "ln2.bias", 1, d),
        ]
    order.append(("mlm_head", config.d_model, config.vocab_size))
    return order


class Backbone:
    """Transformer encoder with a name-keyed parameter table.

    Weight matrices act by right-multiplication (x @ W). Every parameter is
    initialized from a label-addressed substream of the config seed, so the
    initialization is independent of construction order elsewhere.
    """

    def __init__(self, config: BackboneConfig, precision: Precision = P32):
        self.config = config
        self.precision = precision
        self.frozen = False
        self.frozen_fingerprint: str | None = None
        rng = Rng(config.seed).split("backbone")
        self.params: dict[str, Matrix] = {}
        for name, rows, cols in param_order(config):
            if name.endswith(".gain"):
                m = Matrix(np.ones((rows, cols), dtype=precision.dtype))
            elif name.startswith(("layer",)) and name.split(".")[-1].startswith("b"):
                m = Matrix.zeros(rows, cols, precision)
            else:
                m = rng.split(name).normal_matrix(rows, cols, std=0.02, precision=precision)
            self.params[name] = m

    def param(self, name: str) -> Matrix:
        return self.params[name]

    def set_param(self, name: str, value: Matrix) -> None:
        if self.frozen:
            raise FrozenViolationError("backbone is frozen; parameters are immutable")
        current = self.params[name]
        if value.shape != current.shape:
            raise ShapeError(f"parameter {name}: expected {current.shape}, got {value.shape}")
        self.params[name] = value

    def fingerprint(self) -> str:
        """SHA-256 over all parameter bytes in canonical order."""
        h = hashlib.sha256()
        for name, _, _ in param_order(self.config):
            h.update(self.params[name].tobytes())
        return h.hexdigest()

    def param_count(self, include_mlm_head: bool = True) -> int:
        return sum(
            rows * cols
            for name, rows, cols in param_order(self.config)
            if include_mlm_head or name != "mlm_head"
        )

    def param_bytes(self, include_mlm_head: bool = True) -> int:
        return self.param_count(include_mlm_head) * self.precision.itemsize

    # -- forward -------------------------------------------------------------

    def hidden_states(self, tokens: TokenSeq, adapter=None) -> Matrix:
        """Full final hidden matrix (seq_len x d_model) for one sequence."""
        cfg = self.config
        ids = tokens.ids
        if len(ids) > cfg.max_seq_len:
            raise ContractError(f"sequence length {len(ids)} exceeds max_seq_len {cfg.max_seq_len}")
        for t in ids:
            if not (0 <= t < cfg.vocab_size):
                raise ContractError(f"token id {t} out of range [0, {cfg.vocab_size})")
        p = self.params
        n = len(ids)
        x = add(gather_rows(p["tok_emb"], list(ids)), gather_rows(p["pos_emb"], list(range(n))))
        dh = cfg.d_model // cfg.n_heads
        inv_sqrt_dh = 1.0 / math.sqrt(dh)
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            q = self._project(x, p[pre + "wq"], p[pre + "bq"], adapter, i, "q")
            k = add_row(matmul(x, p[pre + "wk"]), p[pre + "bk"])
            v = self._project(x, p[pre + "wv"], p[pre + "bv"], adapter, i, "v")
            ctx = []
            for h in range(cfg.n_heads):
                lo, hi = h * dh, (h + 1) * dh
                qh, kh, vh = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
                attn = softmax(scale_op(matmul(qh, transpose(kh)), inv_sqrt_dh))
                ctx.append(matmul(attn, vh))
            attended = add_row(matmul(concat_cols(ctx), p[pre + "wo"]), p[pre + "bo"])
            x = layer_norm(add(x, attended), p[pre + "ln1.gain"], p[pre + "ln1.bias"], LN_EPS)
            ff = add_row(matmul(gelu(add_row(matmul(x, p[pre + "w1"]), p[pre + "b1"])), p[pre + "w2"]), p[pre + "b2"])
            x = layer_norm(add(x, ff), p[pre + "ln2.gain"], p[pre + "ln2.bias"], LN_EPS)
        return x

    def _project(self, x: Matrix, w: Matrix, b: Matrix, adapter, layer: int, kind: str) -> Matrix:
        out = add_row(matmul(x, w), b)
        if adapter is not None:
            patch = adapter.patch_for(layer, kind)
            if patch is not None:
                low = matmul(matmul(x, patch.a), patch.b)
                out = add(out, scale_op(low, adapter.delta_scale()))
        return out

    def encode(self, tokens: TokenSeq, adapter=None) -> Matrix:
        """CLS-position final hidden vector (1 x d_model)."""
        return gather_rows(self.hidden_states(tokens, adapter), [0])

    def clone(self) -> "Backbone":
        """Unfrozen copy sharing the (immutable) parameter matrices."""
        c = object.__new__(Backbone)
        c.config = self.config
        c.precision = self.precision
        c.frozen = False
        c.frozen_fingerprint = None
        c.params = dict(self.params)
        return c

    # -- freezing ------------------------------------------------------------

    def freeze(self) -> "Backbone":
        self.frozen = True
        self.frozen_fingerprint = self.fingerprint()
        return self


def encode(backbone: Backbone, tokens: TokenSeq) -> Matrix:
    return backbone.encode(tokens)


def freeze(backbone: Backbone) -> Backbone:
    return backbone.freeze()


def mask_positions(tokens: TokenSeq, rng: Rng) -> list[int]:
    """Positions to mask: ceil(15%) of non-reserved positions, at least one."""
    candidates = [i for i, t in enumerate(tokens.ids) if t >= RESERVED_IDS]
    if not candidates:
        return []
    n_mask = max(1, math.ceil(MASK_FRACTION * len(candidates)))
    picked = rng.choice(candidates, size=n_mask, replace=False)
    return sorted(int(i) for i in picked)


def mlm_step(backbone: Backbone, batch: list[TokenSeq], rng: Rng) -> Matrix:
    """Masked-token cross-entropy, averaged over all masked positions.

    Differentiable through every backbone parameter when a tape is active;
    the optimizer update is the caller's job (see trainer.pretrain_backbone).
    """
    if backbone.frozen:
        raise FrozenViolationError("cannot run MLM on a frozen backbone")
    if not batch:
        raise ContractError("mlm_step: empty batch")
    losses = []
    total_masked = 0
    head = backbone.params["mlm_head"]
    vocab = backbone.config.vocab_size
    for tokens in batch:
        positions = mask_positions(tokens, rng)
        if not positions:
            continue
        masked_ids = list(tokens.ids)
        targets = []
        for pos in positions:
            targets.append(masked_ids[pos])
            masked_ids[pos] = MASK_ID
        hidden = backbone.hidden_states(TokenSeq(tuple(masked_ids)))
        logits = matmul(gather_rows(hidden, positions), head)
        onehot = np.zeros((len(positions), vocab), dtype=backbone.precision.dtype)
        onehot[np.arange(len(positions)), targets] = 1.0
        losses.append(cross_entropy(softmax(logits), Matrix(onehot), reduction="sum"))
        total_masked += len(positions)
    if not losses:
        raise ContractError("mlm_step: no maskable (non-reserved) positions in batch")
    total = losses[0]
    for extra in losses[1:]:
        total = add(total, extra)
    return scale_op(total, 1.0 / total_masked)


# -- checkpoint I/O -----------------------------------------------------------


def save_backbone(bb: Backbone, path: str) -> None:
    """MTBB checkpoint: config block, parameters in canonical order, CRC32."""
    w = Writer(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    cfg = bb.config
    for v in (cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_seq_len):
        w.u32(v)
    w.u64(cfg.seed)
    w.u8(1 if bb.frozen else 0)
    w.u8(32 if bb.precision is P32 else 64)
    dtype = "<f4" if bb.precision is P32 else "<f8"
    for name, _, _ in param_order(cfg):
        w.array(bb.params[name].data, dtype)
    with open(path, "wb") as fh:
        fh.write(w.finish())


def load_backbone(path: str) -> Backbone:
    with open(path, "rb") as fh:
        data = fh.read()
    r = Reader(data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    vocab, d_model, n_layers, n_heads, d_ff, max_seq = (r.u32() for _ in range(6))
    cfg = BackboneConfig(
        vocab_size=vocab, d_model=d_model, n_layers=n_layers,
        n_heads=n_heads, d_ff=d_ff, max_seq_len=max_seq, seed=r.u64(),
    )
    frozen = r.u8() == 1
    bits = r.u8()
    if bits not in (32, 64):
        raise ContractError(f"checkpoint precision byte must be 32 or 64, got {bits}")
    precision = P32 if bits == 32 else Precision.P64
    dtype = "<f4" if bits == 32 else "<f8"
    bb = Backbone(cfg, precision)
    for name, rows, cols in param_order(cfg):
        arr = r.array(rows * cols, dtype).reshape(rows, cols).astype(precision.dtype)
        bb.params[name] = Matrix(arr)
    r.finish()
    if frozen:
        bb.freeze()
    return bb
