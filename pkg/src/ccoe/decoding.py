"""Incremental greedy decoding with a per-sequence KV cache.

The cache preallocates key/value buffers for the full context window; each
decode step appends exactly one position per layer, so cache length always
equals the number of tokens processed. The no-cache path recomputes the full
forward every step and must produce identical token sequences; tests hold the
cached path to that oracle.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import SequenceLengthError
from .kernels import gelu
from .model import BackboneModel, ExpertSubnetwork
from .net import _ln_fwd, ffn_sources, forward_batch
from .tokenizer import EOS


class KvCache:
    """Per-layer cached keys/values for one in-flight decode."""

    def __init__(self, model: BackboneModel):
        c = model.config
        hd = c.d_model // c.n_heads
        dt = model.params["embed"].dtype
        self.k = [np.empty((c.n_heads, c.max_seq, hd), dtype=dt) for _ in range(c.n_layers)]
        self.v = [np.empty((c.n_heads, c.max_seq, hd), dtype=dt) for _ in range(c.n_layers)]
        self.length = 0

    def __len__(self) -> int:
        return self.length


def decode_step(
    model: BackboneModel,
    expert: ExpertSubnetwork | None,
    token: int,
    cache: KvCache,
) -> np.ndarray:
    """Process one token at position len(cache); returns next-token logits [vocab]."""
    c = model.config
    p = model.params
    pos = cache.length
    if pos >= c.max_seq:
        raise SequenceLengthError(f"decode position {pos} exceeds max_seq {c.max_seq}")
    n_heads = c.n_heads
    hd = c.d_model // n_heads
    scale = 1.0 / math.sqrt(hd)
    srcs = ffn_sources(model, expert)

    x = p["embed"][token] + p["pos"][pos]
    for i in range(c.n_layers):
        pre = f"layers.{i}."
        h1, _ = _ln_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = (h1 @ p[pre + "attn.wq"]).reshape(n_heads, hd)
        k = (h1 @ p[pre + "attn.wk"]).reshape(n_heads, hd)
        v = (h1 @ p[pre + "attn.wv"]).reshape(n_heads, hd)
        cache.k[i][:, pos, :] = k
        cache.v[i][:, pos, :] = v
        keys = cache.k[i][:, : pos + 1, :]
        vals = cache.v[i][:, : pos + 1, :]
        scores = (keys * q[:, None, :]).sum(axis=-1) * scale  # [h, pos+1]
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
        probs = e / e.sum(axis=-1, keepdims=True)
        ctx = (probs[:, :, None] * vals).sum(axis=1).reshape(c.d_model)
        x = x + ctx @ p[pre + "attn.wo"]

        comp, fp, fpre = srcs[i]
        ln_g, ln_b = (fpre + "ln.g", fpre + "ln.b") if comp == "expert" else (pre + "ln2.g", pre + "ln2.b")
        h2, _ = _ln_fwd(x, fp[ln_g], fp[ln_b])
        act = gelu(h2 @ fp[fpre + "w1"] + fp[fpre + "b1"])
        x = x + act @ fp[fpre + "w2"] + fp[fpre + "b2"]

    cache.length = pos + 1
    hf, _ = _ln_fwd(x, p["ln_f.g"], p["ln_f.b"])
    return hf @ p["head"]


def greedy_decode(
    model: BackboneModel,
    expert: ExpertSubnetwork | None,
    prompt: list[int],
    max_new: int,
    use_cache: bool = True,
    stop_token: int | None = EOS,
) -> list[int]:
    """Greedy continuation of ``prompt``; returns only the generated tokens.

    Argmax ties break toward the lowest token id. Stops early when
    ``stop_token`` is produced (the stop token is included in the output).
    """
    if not prompt:
        raise SequenceLengthError("prompt must be nonempty")
    if max_new < 1:
        raise SequenceLengthError("max_new must be >= 1")
    if len(prompt) + max_new > model.config.max_seq:
        raise SequenceLengthError(
            f"prompt ({len(prompt)}) + max_new ({max_new}) exceeds max_seq {model.config.max_seq}"
        )
    out: list[int] = []
    if use_cache:
        cache = KvCache(model)
        logits = None
        for tok in prompt:
            logits = decode_step(model, expert, tok, cache)
        for _ in range(max_new):
            nxt = int(np.argmax(logits))  # first max wins: lowest id on ties
            out.append(nxt)
            if stop_token is not None and nxt == stop_token:
                break
            logits = decode_step(model, expert, nxt, cache)
    else:
        ids = list(prompt)
        for _ in range(max_new):
            logits, _, _ = forward_batch(model, np.asarray([ids], dtype=np.int64), expert=expert)
            nxt = int(np.argmax(logits[0, -1]))
            out.append(nxt)
            if stop_token is not None and nxt == stop_token:
                break
            ids.append(nxt)
    return out
