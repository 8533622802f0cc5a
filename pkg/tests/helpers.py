"""Independent reference implementations used as test oracles."""
import math

import numpy as np
import torch

from xjac.encoder import TokenSequence


def rand_seq(model, length, gen):
    ids = torch.randint(2, len(model.vocab), (length,), generator=gen)
    return TokenSequence(tuple(int(i) for i in ids))


def _np(t):
    return t.detach().numpy()


def _gelu_tanh(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def _layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def transformer_block_oracle(block, x):
    """Loop-over-heads numpy forward pass of one pre-norm transformer block."""
    lin = {name: (_np(getattr(block, name).weight), _np(getattr(block, name).bias))
           for name in ("q", "k", "v", "o", "fc_in", "fc_out")}
    h = _layer_norm(x, _np(block.norm_attn.weight), _np(block.norm_attn.bias))
    q, k, v = (h @ lin[n][0].T + lin[n][1] for n in ("q", "k", "v"))
    s, d = x.shape
    hd = d // block.heads
    heads = []
    for j in range(block.heads):
        sl = slice(j * hd, (j + 1) * hd)
        logits = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        heads.append(w @ v[:, sl])
    x = x + np.concatenate(heads, axis=1) @ lin["o"][0].T + lin["o"][1]
    h = _layer_norm(x, _np(block.norm_ff.weight), _np(block.norm_ff.bias))
    return x + _gelu_tanh(h @ lin["fc_in"][0].T + lin["fc_in"][1]) @ lin["fc_out"][0].T + lin["fc_out"][1]


def average_ranks(values):
    """1-based ranks by brute force: each value's rank is the mean of the positions it ties over."""
    values = list(values)
    ranks = []
    for v in values:
        below = sum(1 for u in values if u < v)
        equal = sum(1 for u in values if u == v)
        ranks.append(below + (equal + 1) / 2)
    return ranks


def pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)
