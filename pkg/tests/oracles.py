"""Naive loop-based references used by the test suite.

Everything here is written from the definitions with explicit Python
loops over windows, token pairs and heads; nothing calls the library's
partition or attention code.
"""
from __future__ import annotations

import math

import numpy as np


# -- partition index maps ----------------------------------------------------

def block_sources(N, H, W, P):
    """windows[w][t] = (n, row, col) in (n, p, q) token order."""
    ph, pw = (P, P) if np.isscalar(P) else P
    windows = []
    for i in range(H // ph):
        for j in range(W // pw):
            windows.append([(n, i * ph + p, j * pw + q) for n in range(N) for p in range(ph) for q in range(pw)])
    return windows


def grid_sources(N, H, W, G):
    """groups[g][t] = (n, row, col): group (u, v) samples rows a*(H/G)+u, cols b*(W/G)+v."""
    gh, gw = (G, G) if np.isscalar(G) else G
    sh, sw = H // gh, W // gw
    groups = []
    for u in range(sh):
        for v in range(sw):
            groups.append([(n, a * sh + u, b * sw + v) for n in range(N) for a in range(gh) for b in range(gw)])
    return groups


def gather(x, sources):
    """[N, H, W, C] -> [groups, tokens, C] following an index map."""
    return np.array([[x[n, r, c] for (n, r, c) in grp] for grp in sources])


def scatter(y, sources, shape):
    out = np.zeros(shape, dtype=y.dtype)
    for g, grp in enumerate(sources):
        for t, (n, r, c) in enumerate(grp):
            out[n, r, c] = y[g, t]
    return out


# -- elementary pieces ---------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        v = x[idx]
        mu = sum(v) / len(v)
        var = sum((a - mu) ** 2 for a in v) / len(v)
        out[idx] = (v - mu) / math.sqrt(var + eps) * gamma + beta
    return out


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def mlp(x, w1, w2):
    return gelu(x @ w1) @ w2


def attention(q, k, v, bias, heads, key_valid=None):
    """Per-pair loop softmax(q k^T / sqrt(d) + bias) v for one group.  q: [Tq, C]; bias: [heads, Tq, Tk]."""
    tq, c = q.shape
    tk = k.shape[0]
    d = c // heads
    out = np.zeros((tq, c))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(tq):
            scores = []
            for j in range(tk):
                if key_valid is not None and not key_valid[j]:
                    scores.append(-np.inf)
                    continue
                s = sum(q[i, sl][e] * k[j, sl][e] for e in range(d)) / math.sqrt(d)
                scores.append(s + (0.0 if bias is None else bias[h, i, j]))
            m = max(scores)
            ex = [0.0 if s == -np.inf else math.exp(s - m) for s in scores]
            z = sum(ex)
            for j in range(tk):
                out[i, sl] += ex[j] / z * v[j, sl]
    return out


def rel_bias(table, n_tokens_dims, table_dims):
    """[heads, T, T] bias for tokens ordered (n, p, q) from a (2N0-1, 2P0-1, 2Q0-1) flattened table."""
    n, ph, pw = n_tokens_dims
    n0, ph0, pw0 = table_dims
    coords = [(a, b, c) for a in range(n) for b in range(ph) for c in range(pw)]
    heads = table.shape[0]
    t3 = table.reshape(heads, 2 * n0 - 1, 2 * ph0 - 1, 2 * pw0 - 1)
    out = np.zeros((heads, len(coords), len(coords)))
    for i, (a1, b1, c1) in enumerate(coords):
        for j, (a2, b2, c2) in enumerate(coords):
            out[:, i, j] = t3[:, a1 - a2 + n0 - 1, b1 - b2 + ph0 - 1, c1 - c2 + pw0 - 1]
    return out


# -- FAX self-attention --------------------------------------------------------

def fax_sa_sub(x, sub, mode, P, valid=None):
    """One FAX-SA sub-block on x: [N, H, W, C] with numpy copies of the sub-block parameters."""
    N, H, W, C = x.shape
    ph, pw = (P, P) if np.isscalar(P) else P
    src = block_sources(N, H, W, P) if mode == "block" else grid_sources(N, H, W, P)
    a = sub.attn
    wq, wk, wv, wo, bo = (np.asarray(t.data, np.float64) for t in (a.wq, a.wk, a.wv, a.wo, a.bo))
    heads = sub.rel_bias.table.shape[0]
    bias = rel_bias(np.asarray(sub.rel_bias.table.data, np.float64), (N, ph, pw), sub.rel_bias.dims)
    ln = layer_norm(x, sub.ln1.gamma.data, sub.ln1.beta.data)
    y = np.zeros_like(x)
    for grp in src:
        tok = np.array([ln[n, r, c] for (n, r, c) in grp])
        kv_valid = None if valid is None else [bool(valid[n]) for (n, _, _) in grp]
        o = attention(tok @ wq, tok @ wk, tok @ wv, bias, heads, kv_valid) @ wo + bo
        for t, (n, r, c) in enumerate(grp):
            y[n, r, c] = o[t]
    x = x + y
    return x + mlp(layer_norm(x, sub.ln2.gamma.data, sub.ln2.beta.data), sub.mlp.w1.data, sub.mlp.w2.data)


def fax_sa_block(x, block, P, G, valid=None):
    x = fax_sa_sub(x, block.local, "block", P, valid)
    return fax_sa_sub(x, block.glob, "grid", G, valid)


def fusebevt(stack, valid, fuse, P, G):
    x = stack
    for blk in fuse.blocks:
        x = fax_sa_block(x, blk, P, G, valid)
    return x[0]


# -- FAX cross-attention ---------------------------------------------------------

def fax_ca_sub(bev, cams, pe, sub, mode, Pb, Pf):
    """bev: [Hb, Wb, C]; cams/pe: [M, hf, wf, Cf]."""
    hb, wb, c = bev.shape
    m, hf, wf, cf = cams.shape
    if mode == "block":
        qsrc = block_sources(1, hb, wb, Pb)
        ksrc = block_sources(m, hf, wf, Pf)
    else:
        qsrc = grid_sources(1, hb, wb, Pb)
        ksrc = grid_sources(m, hf, wf, Pf)
    assert len(qsrc) == len(ksrc)
    a = sub.attn
    wq, wk, wv, wo, bo = (np.asarray(t.data, np.float64) for t in (a.wq, a.wk, a.wv, a.wo, a.bo))
    cb = np.asarray(sub.cross_bias.data, np.float64)  # [heads, Tq, per-camera tokens]
    heads, _, per_cam = cb.shape
    lnq = layer_norm(bev[None], sub.ln_q.gamma.data, sub.ln_q.beta.data)[0]
    lnk = layer_norm(cams, sub.ln_kv.gamma.data, sub.ln_kv.beta.data)
    y = np.zeros_like(bev)
    for qg, kg in zip(qsrc, ksrc):
        q = np.array([lnq[r, cc] for (_, r, cc) in qg]) @ wq
        kin = np.array([lnk[n, r, cc] + pe[n, r, cc] for (n, r, cc) in kg]) @ wk
        vin = np.array([lnk[n, r, cc] for (n, r, cc) in kg]) @ wv
        bias = np.zeros((heads, len(qg), len(kg)))
        for j in range(len(kg)):
            bias[:, :, j] = cb[:, :, j % per_cam]
        o = attention(q, kin, vin, bias, heads) @ wo + bo
        for t, (_, r, cc) in enumerate(qg):
            y[r, cc] = o[t]
    x = bev + y
    return x + mlp(layer_norm(x, sub.ln2.gamma.data, sub.ln2.beta.data), sub.mlp.w1.data, sub.mlp.w2.data)


def fax_ca_block(bev, cams, pe, block, Pb, Gb, Pf, Gf):
    x = fax_ca_sub(bev, cams, pe, block.local, "block", Pb, Pf)
    return fax_ca_sub(x, cams, pe, block.glob, "grid", Gb, Gf)


# -- geometry ----------------------------------------------------------------------

def bilinear_sample(feat, r, c):
    """Zero-padded bilinear sample of feat [H, W, C] at continuous pixel-centre coords (r, c)."""
    h, w, ch = feat.shape
    r0, c0 = math.floor(r), math.floor(c)
    out = np.zeros(ch)
    for dr in (0, 1):
        for dc in (0, 1):
            rr, cc = r0 + dr, c0 + dc
            wt = (1 - abs(r - rr)) * (1 - abs(c - cc))
            if 0 <= rr < h and 0 <= cc < w and wt > 0:
                out += wt * feat[rr, cc]
    return out
