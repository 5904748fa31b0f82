"""Independent reference implementations used by the tests.

Nothing here touches the autodiff tensor type: every oracle is written with
plain Python loops or plain numpy on raw arrays.
"""

from __future__ import annotations

import math

import numpy as np

from flowadapt.numerics import Tensor, concat, layer_norm, relu, softmax, tabs


# -- randomized compositions covering every primitive -----------------------------------

PRIMITIVES = ("add", "sub", "mul", "matmul", "relu", "softmax", "layer_norm", "sum", "mean",
              "concat", "slice", "gather", "reshape", "transpose", "abs", "broadcast")


def random_composition(seed: int):
    """A scalar function of six parameters exercising every primitive, with random shapes/axes."""
    rng = np.random.default_rng(seed)
    b, t, d = (int(v) for v in rng.integers(2, 5, size=3))
    h = int(rng.integers(3, 6))  # a width-2 layer norm is saturated (outputs +-1)
    params = [
        Tensor(rng.normal(size=(b, t, d))),       # x
        Tensor(rng.normal(size=(d, h))),          # weight
        Tensor(rng.normal(size=(h,))),            # bias (broadcast)
        Tensor(1.0 + 0.1 * rng.normal(size=(h,))),  # layer-norm gain
        Tensor(0.1 * rng.normal(size=(h,))),      # layer-norm shift
        Tensor(rng.normal(size=(b, t, h))),       # second input
    ]
    sm_axis = int(rng.integers(0, 3))
    cat_axis = int(rng.integers(0, 3))
    gather = rng.integers(0, t, size=int(rng.integers(2, 6)))
    perm = tuple(int(i) for i in rng.permutation(3))
    w_sum, w_mean = rng.uniform(0.5, 1.5, size=2) * rng.choice([-1.0, 1.0], size=2)

    def f(x, weight, bias, gain, shift, y):
        z = x @ weight + bias
        z = layer_norm(z, gain, shift)
        z = relu(z) * y - tabs(y) * 0.5
        s = softmax(z * 2.0, axis=sm_axis)
        c = concat([s, z], axis=cat_axis)
        c = c.transpose(*perm)
        flat = c.reshape(-1)
        part = flat[1:flat.shape[0] - 1]
        picked = (z[:, gather, :] * y[:, gather, :]).sum(axis=1)
        return (part * part).mean() * w_mean + picked.sum() * w_sum * 0.1

    return f, params


# -- attention and backbone ---------------------------------------------------------------

def _dense_linear(x, weight, bias):
    out = []
    for row_w, b_i in zip(weight, bias):
        out.append(sum(float(w) * float(v) for w, v in zip(row_w, x)) + float(b_i))
    return out


def _softmax_list(scores):
    m = max(scores)
    e = [math.exp(s - m) for s in scores]
    z = sum(e)
    return [v / z for v in e]


def dense_attention(xq, xkv, q, k, v, o, n_heads: int, head_dim: int, key_valid=None):
    """Loop implementation of multi-head attention on one (unbatched) sequence.

    ``q``, ``k``, ``v``, ``o`` are (weight, bias) pairs of plain arrays.
    """
    queries = [_dense_linear(row, *q) for row in xq]
    keys = [_dense_linear(row, *k) for row in xkv]
    values = [_dense_linear(row, *v) for row in xkv]
    valid = [True] * len(xkv) if key_valid is None else list(key_valid)
    out = []
    for qi in queries:
        merged = []
        for hd in range(n_heads):
            sl = slice(hd * head_dim, (hd + 1) * head_dim)
            scores = [sum(a * b for a, b in zip(qi[sl], kj[sl])) / math.sqrt(head_dim)
                      if ok else -1e9 for kj, ok in zip(keys, valid)]
            w = _softmax_list(scores)
            for c in range(head_dim):
                merged.append(sum(wj * vj[sl][c] for wj, vj in zip(w, values)))
        out.append(_dense_linear(merged, *o))
    return np.array(out)


def dense_layer_norm(x, gain, shift, eps: float = 1e-5):
    out = []
    for row in x:
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        out.append([(r - mu) / math.sqrt(var + eps) * g + s for r, g, s in zip(row, gain, shift)])
    return np.array(out)


def _pair(lin):
    return lin.weight.data, lin.bias.data


def dense_backbone(model, psi, masked, symbols, t):
    """Plain-loop forward pass of an un-adapted vector-field model on one sequence."""
    from flowadapt.transformer import sinusoidal_time_embedding

    cfg = model.config
    t_emb = sinusoidal_time_embedding(t, cfg.time_dim)
    rows = []
    for i in range(len(psi)):
        feat = list(t_emb) + list(model.symbol_embed.weight.data[symbols[i]]) + list(masked[i]) + list(psi[i])
        proj = _dense_linear(feat, *_pair(model.input_proj))
        rows.append([a + b for a, b in zip(proj, model.pos_embed.weight.data[i])])
    h = np.array(rows)
    for layer in model.layers:
        att = layer.self_attn
        n1 = dense_layer_norm(h, layer.ln1.weight.data, layer.ln1.bias.data)
        h = h + dense_attention(n1, n1, _pair(att.q), _pair(att.k), _pair(att.v), _pair(att.o),
                                att.n_heads, att.head_dim)
        n2 = dense_layer_norm(h, layer.ln2.weight.data, layer.ln2.bias.data)
        hidden = [[max(0.0, v) for v in _dense_linear(row, *_pair(layer.ff.ff1))] for row in n2]
        h = h + np.array([_dense_linear(row, *_pair(layer.ff.ff2)) for row in hidden])
    h = dense_layer_norm(h, model.final_ln.weight.data, model.final_ln.bias.data)
    return np.array([_dense_linear(row, *_pair(model.head)) for row in h])


# -- losses ----------------------------------------------------------------------------------

def loop_cfm_loss(pred, x0, x1, selected, sigma_min: float) -> float:
    """Mean over selected frames and feature channels of (pred - (x1 - (1 - sigma) x0))^2."""
    total, count = 0.0, 0
    for i in range(len(x1)):
        if not selected[i]:
            continue
        for j in range(len(x1[i])):
            target = x1[i][j] - (1.0 - sigma_min) * x0[i][j]
            total += (pred[i][j] - target) ** 2
            count += 1
    return total / count


def loop_l1(pred, gold) -> float:
    return sum(abs(float(p) - float(g)) for p, g in zip(pred, gold)) / len(gold)


def euler_closed_form(x0: float, n_steps: int) -> float:
    return x0 * (1.0 + 1.0 / n_steps) ** n_steps


def expected_annotated_fraction(rate: float, lengths) -> float:
    """P(at least one annotation) for per-symbol Bernoulli(rate), length uniform over ``lengths``."""
    lengths = list(lengths)
    return sum(1.0 - (1.0 - rate) ** n for n in lengths) / len(lengths)
