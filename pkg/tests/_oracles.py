"""Independent reference computations used by the test-suite.

Nothing here imports the package's math; each oracle is written with plain
loops or direct numpy so it cannot share a bug with the code it checks.
"""
from __future__ import annotations

import math
from collections import Counter

import numpy as np


def matmul_loops(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_rows(x):
    x = np.asarray(x, float)
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        e = [math.exp(v - max(row)) for v in row]
        s = math.fsum(e)
        out[idx] = [v / s for v in e]
    return out


def layer_norm_two_pass(x, gain, bias, eps):
    x = np.asarray(x, float)
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        mu = math.fsum(row) / len(row)
        var = math.fsum((v - mu) ** 2 for v in row) / len(row)
        out[idx] = [(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gain, bias)]
    return out


def attention_rows(q, k, v, allowed=None):
    """Per-query-row exp/normalise attention with masked keys skipped."""
    q, k, v = (np.asarray(a, float) for a in (q, k, v))
    dk = q.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    weights = np.zeros((q.shape[0], k.shape[0]))
    for i in range(q.shape[0]):
        keys = [j for j in range(k.shape[0]) if allowed is None or allowed[i][j]]
        scores = {j: sum(q[i, t] * k[j, t] for t in range(dk)) / math.sqrt(dk) for j in keys}
        top = max(scores.values())
        ex = {j: math.exp(s - top) for j, s in scores.items()}
        z = math.fsum(ex.values())
        for j in keys:
            weights[i, j] = ex[j] / z
            out[i] += weights[i, j] * v[j]
    return out, weights


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to array ``x`` (mutated in place and restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / denom)


def adam_scalar(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-9, p0=0.0):
    """Published Adam update on one scalar, plain floats."""
    p, m, v = p0, 0.0, 0.0
    trace = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(p)
    return trace


def kl_scalar(logits, gold, eps, vocab):
    """KL(smoothed one-hot || softmax(logits)) for one position with mpmath-free fsum arithmetic."""
    top = max(logits)
    lse = top + math.log(math.fsum(math.exp(z - top) for z in logits))
    total = []
    for i, z in enumerate(logits):
        t = (1 - eps) if i == gold else eps / (vocab - 1)
        if t > 0:
            total.append(t * (math.log(t) - (z - lse)))
    return math.fsum(total)


def bleu_oracle(cands, refs, max_n=4):
    """Corpus BLEU counted from scratch with joined-string n-gram keys."""
    clipped = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for c, r in zip(cands, refs):
        ct, rt = c.split(), r.split()
        c_len += len(ct)
        r_len += len(rt)
        for n in range(1, max_n + 1):
            cc = Counter(" ".join(ct[i:i + n]) for i in range(len(ct) - n + 1))
            rc = Counter(" ".join(rt[i:i + n]) for i in range(len(rt) - n + 1))
            for gram, cnt in cc.items():
                clipped[n - 1] += min(cnt, rc.get(gram, 0))
                totals[n - 1] += cnt
    if c_len == 0 or any(t == 0 for t in totals) or any(c == 0 for c in clipped):
        return 0.0
    logp = sum(math.log(c / t) for c, t in zip(clipped, totals)) / max_n
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(logp)


# --- composed layer oracles ---------------------------------------------
# These take plain numpy weight arrays and rebuild each block from the loop
# oracles above, one sentence at a time.

LN_EPS = 1e-6


def arrays_of(layer):
    """name → ndarray copy for any object exposing ``parameters()`` as (name, tensor) pairs."""
    return {n: t.data.copy() for n, t in layer.parameters()}


def mha_oracle(xq, xkv, w, prefix, heads, allowed=None):
    q, k, v = xq @ w[f"{prefix}.w_q"], xkv @ w[f"{prefix}.w_k"], xkv @ w[f"{prefix}.w_v"]
    dk = q.shape[1] // heads
    outs = []
    for h in range(heads):
        cols = slice(h * dk, (h + 1) * dk)
        outs.append(attention_rows(q[:, cols], k[:, cols], v[:, cols], allowed)[0])
    return np.concatenate(outs, axis=1) @ w[f"{prefix}.w_o"]


def ffn_oracle(x, w):
    return np.maximum(x @ w["ffn.w1"] + w["ffn.b1"], 0.0) @ w["ffn.w2"] + w["ffn.b2"]


def _ln(x, w, name):
    return layer_norm_two_pass(x, w[f"{name}.gain"], w[f"{name}.bias"], LN_EPS)


def encoder_layer_oracle(x, w, heads, allowed=None):
    y = _ln(x + mha_oracle(x, x, w, "self_attn", heads, allowed), w, "norm1")
    return _ln(y + ffn_oracle(y, w), w, "norm2")


def decoder_layer_oracle(y, enc, w, heads, cross_allowed=None):
    t = y.shape[0]
    causal = [[j <= i for j in range(t)] for i in range(t)]
    h1 = _ln(y + mha_oracle(y, y, w, "self_attn", heads, causal), w, "norm1")
    cross = None if cross_allowed is None else [list(cross_allowed)] * t
    h2 = _ln(h1 + mha_oracle(h1, enc, w, "cross_attn", heads, cross), w, "norm2")
    return _ln(h2 + ffn_oracle(h2, w), w, "norm3")


def positional_oracle(max_len, d_model):
    pe = np.zeros((max_len, d_model))
    for pos in range(max_len):
        for i in range(0, d_model, 2):
            angle = pos / (10000.0 ** (i / d_model))
            pe[pos, i] = math.sin(angle)
            pe[pos, i + 1] = math.cos(angle)
    return pe


def embed_oracle(ids, table, max_len):
    d = table.shape[1]
    pe = positional_oracle(max_len, d)
    return np.array([table[t] * math.sqrt(d) + pe[p] for p, t in enumerate(ids)])


def model_oracle(model, src_ids, tgt_in):
    """Logits for one sentence pair rebuilt from the block oracles and raw weight arrays."""
    c = model.config
    heads = c.heads
    allowed = [int(t) != 0 for t in src_ids]
    src_allowed = [allowed] * len(src_ids)
    x = embed_oracle(src_ids, model.src_embed.data, c.max_len)
    topo = model.encoder

    def chain(h, layers):
        for layer in layers:
            h = encoder_layer_oracle(h, arrays_of(layer), heads, src_allowed)
        return h

    if c.variant == "stacked":
        memory = chain(x, topo.branch_layers[0])
    else:
        outs = [chain(x, layers) for layers in topo.branch_layers]
        if c.variant == "apa":
            memory = sum(outs)
            if topo.normalize_sum:
                memory = layer_norm_two_pass(memory, np.ones(c.d_model), np.zeros(c.d_model), LN_EPS)
        elif c.variant == "aapa":
            memory = chain(sum(outs), [topo.final_layer])
        else:
            r = np.maximum(np.concatenate(outs, axis=1) @ topo.reducer.w.data + topo.reducer.b.data, 0.0)
            memory = chain(r, [topo.final_layer])
    y = embed_oracle(tgt_in, model.tgt_embed.data, c.max_len)
    for layer in model.decoder:
        y = decoder_layer_oracle(y, memory, arrays_of(layer), heads, allowed)
    return y @ model.out_w.data + model.out_b.data
