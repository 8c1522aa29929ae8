"""Tiny decoder-only transformer over mixed token and latent-vector inputs.

Inputs are a sequence whose elements are either vocabulary ids or raw
d_model vectors. Ids go through the embedding table; vectors are used
as-is. Both receive the learned positional embedding, so injecting the
embedding row of token v as a vector reproduces feeding token v exactly.

Two forward paths share the same numpy kernels: :func:`forward` builds
the gradient tape, :func:`forward_arrays` is the tape-free inference
path used by rollout and evaluation. They agree bit-for-bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

CHECKPOINT_MAGIC = b"LASRCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    max_seq: int
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1 or self.d_model < 1 or self.n_layers < 0:
            raise ValueError("config dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_seq < 1:
            raise ValueError("max_seq must be positive")


@dataclass
class HiddenTrace:
    """Per-position final hidden states and their unembedded logits."""
    hidden: Tensor   # (L, d_model)
    logits: Tensor   # (L, vocab_size)


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.n_layers):
        names += [f"l{i}.attn_norm", f"l{i}.wq", f"l{i}.wk", f"l{i}.wv", f"l{i}.wo",
                  f"l{i}.mlp_norm", f"l{i}.w1", f"l{i}.w2"]
    names += ["final_norm", "unemb"]
    return names


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Zero-mean gaussian init scaled by 1/sqrt(fan-in), deterministic per seed.

    The unembedding starts as the transpose of the embedding (separate
    parameter, free to drift apart).
    Starting the two maps coherently means a hidden state whose logits favor
    some tokens is itself close to a blend of those tokens' embedding rows,
    so feeding hidden states back as inputs lands near the embedding
    manifold the layers were trained on. A pretrained backbone gets this
    geometry for free; a from-scratch model has to start with it.
    """
    rng = np.random.default_rng(cfg.seed)
    d, v = cfg.d_model, cfg.vocab_size

    def mat(rows, cols_):
        return rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols_))

    out: dict[str, Tensor] = {}
    emb = rng.normal(0.0, 1.0 / np.sqrt(d), size=(v, d))
    out["tok_emb"] = Tensor(emb.copy(), requires_grad=True)
    out["pos_emb"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(cfg.max_seq, d)), requires_grad=True)
    for i in range(cfg.n_layers):
        out[f"l{i}.attn_norm"] = Tensor(np.ones(d), requires_grad=True)
        out[f"l{i}.wq"] = Tensor(mat(d, d), requires_grad=True)
        out[f"l{i}.wk"] = Tensor(mat(d, d), requires_grad=True)
        out[f"l{i}.wv"] = Tensor(mat(d, d), requires_grad=True)
        out[f"l{i}.wo"] = Tensor(mat(d, d), requires_grad=True)
        out[f"l{i}.mlp_norm"] = Tensor(np.ones(d), requires_grad=True)
        out[f"l{i}.w1"] = Tensor(mat(d, 4 * d), requires_grad=True)
        out[f"l{i}.w2"] = Tensor(mat(4 * d, d), requires_grad=True)
    out["final_norm"] = Tensor(np.ones(d), requires_grad=True)
    out["unemb"] = Tensor(np.ascontiguousarray(emb.T), requires_grad=True)
    return out


def _check_inputs(cfg: ModelConfig, inputs: Sequence) -> None:
    if len(inputs) == 0:
        raise ValueError("empty input sequence")
    if len(inputs) > cfg.max_seq:
        raise ValueError(f"sequence length {len(inputs)} exceeds max_seq {cfg.max_seq}")
    for x in inputs:
        if isinstance(x, (int, np.integer)):
            if not 0 <= int(x) < cfg.vocab_size:
                raise ValueError(f"token id {int(x)} outside vocabulary")
        else:
            arr = np.asarray(x)
            if arr.shape != (cfg.d_model,):
                raise ValueError(f"latent vector shape {arr.shape} != ({cfg.d_model},)")


def _assemble_taped(params: dict[str, Tensor], cfg: ModelConfig, inputs: Sequence) -> Tensor:
    # group consecutive token ids into one embedding gather each
    parts: list[Tensor] = []
    run: list[int] = []
    for x in inputs:
        if isinstance(x, (int, np.integer)):
            run.append(int(x))
        else:
            if run:
                parts.append(ag.embed_rows(params["tok_emb"], run))
                run = []
            parts.append(Tensor(np.asarray(x, dtype=np.float64)))
    if run:
        parts.append(ag.embed_rows(params["tok_emb"], run))
    x = parts[0] if len(parts) == 1 and parts[0].data.ndim == 2 else ag.concat_rows(parts)
    return ag.add(x, ag.rows(params["pos_emb"], 0, len(inputs)))


def forward(params: dict[str, Tensor], inputs: Sequence, cfg: ModelConfig) -> HiddenTrace:
    """Causal forward pass building the gradient tape.

    Args:
        params: tensor dict from :func:`init_params`.
        inputs: sequence of vocabulary ids and/or (d_model,) vectors.
        cfg: model shape description.

    Returns:
        HiddenTrace with hidden (L, d_model) and logits (L, vocab_size),
        where logits is exactly hidden @ unemb.
    """
    _check_inputs(cfg, inputs)
    d, h = cfg.d_model, cfg.n_heads
    hd = d // h
    inv = 1.0 / np.sqrt(hd)
    x = _assemble_taped(params, cfg, inputs)
    for i in range(cfg.n_layers):
        a_in = ag.rmsnorm(x, params[f"l{i}.attn_norm"])
        q = ag.matmul(a_in, params[f"l{i}.wq"])
        k = ag.matmul(a_in, params[f"l{i}.wk"])
        v = ag.matmul(a_in, params[f"l{i}.wv"])
        heads = []
        for j in range(h):
            lo, hi = j * hd, (j + 1) * hd
            qj, kj, vj = ag.cols(q, lo, hi), ag.cols(k, lo, hi), ag.cols(v, lo, hi)
            att = ag.causal_softmax(ag.scale(ag.matmul(qj, ag.transpose(kj)), inv))
            heads.append(ag.matmul(att, vj))
        merged = heads[0] if h == 1 else ag.concat_cols(heads)
        x = ag.add(x, ag.matmul(merged, params[f"l{i}.wo"]))
        m_in = ag.rmsnorm(x, params[f"l{i}.mlp_norm"])
        x = ag.add(x, ag.matmul(ag.relu(ag.matmul(m_in, params[f"l{i}.w1"])), params[f"l{i}.w2"]))
    hidden = ag.rmsnorm(x, params["final_norm"])
    logits = ag.matmul(hidden, params["unemb"])
    return HiddenTrace(hidden=hidden, logits=logits)


def forward_arrays(arrays: dict[str, np.ndarray], inputs: Sequence, cfg: ModelConfig
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Tape-free forward over raw arrays; same kernels, same results.

    Returns (hidden, logits) numpy matrices.
    """
    _check_inputs(cfg, inputs)
    d, h = cfg.d_model, cfg.n_heads
    hd = d // h
    inv = 1.0 / np.sqrt(hd)
    rows = []
    run: list[int] = []
    for tok in inputs:
        if isinstance(tok, (int, np.integer)):
            run.append(int(tok))
        else:
            if run:
                rows.append(arrays["tok_emb"][run])
                run = []
            rows.append(np.asarray(tok, dtype=np.float64).reshape(1, -1))
    if run:
        rows.append(arrays["tok_emb"][run])
    x = rows[0] if len(rows) == 1 else np.vstack(rows)
    x = x + arrays["pos_emb"][:len(inputs)]
    for i in range(cfg.n_layers):
        a_in, _ = ag.rmsnorm_array(x, arrays[f"l{i}.attn_norm"])
        q = a_in @ arrays[f"l{i}.wq"]
        k = a_in @ arrays[f"l{i}.wk"]
        v = a_in @ arrays[f"l{i}.wv"]
        heads = []
        for j in range(h):
            lo, hi = j * hd, (j + 1) * hd
            att = ag.causal_softmax_array((q[:, lo:hi] @ k[:, lo:hi].T) * inv)
            heads.append(att @ v[:, lo:hi])
        merged = heads[0] if h == 1 else np.hstack(heads)
        x = x + merged @ arrays[f"l{i}.wo"]
        m_in, _ = ag.rmsnorm_array(x, arrays[f"l{i}.mlp_norm"])
        x = x + np.maximum(m_in @ arrays[f"l{i}.w1"], 0.0) @ arrays[f"l{i}.w2"]
    hidden, _ = ag.rmsnorm_array(x, arrays["final_norm"])
    return hidden, hidden @ arrays["unemb"]


def as_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data for k, t in params.items()}


def param_count(params: dict[str, Tensor]) -> int:
    return sum(t.data.size for t in params.values())


# --------------------------------------------------------------------------
# checkpoint format: magic, version, config, then named raw-float64 tensors

class CheckpointError(Exception):
    pass


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, Tensor]) -> None:
    """Write magic, version u32, config as i64 fields, then each tensor as
    (name length u32, name, rank u32, extents u32..., row-major float64 LE),
    sorted by name for byte-stable output."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for f in fields(ModelConfig):
            fh.write(struct.pack("<q", getattr(cfg, f.name)))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f8")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", data.ndim))
            for ext in data.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(data.tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    try:
        if blob[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        off = 8
        (version,) = struct.unpack_from("<I", blob, off)
        off += 4
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        vals = []
        for _ in fields(ModelConfig):
            (v,) = struct.unpack_from("<q", blob, off)
            off += 8
            vals.append(int(v))
        cfg = ModelConfig(*vals)
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = []
            for _ in range(rank):
                (ext,) = struct.unpack_from("<I", blob, off)
                off += 4
                shape.append(ext)
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
            off += n * 8
            params[name] = Tensor(data.copy(), requires_grad=True)
        if off != len(blob):
            raise CheckpointError("trailing bytes in checkpoint")
        expected = set(param_names(cfg))
        if set(params) != expected:
            raise CheckpointError("checkpoint parameter names do not match config")
        return cfg, params
    except (struct.error, IndexError, UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from e
