"""Attention cost measurements: FAX self-attention vs dense attention over all tokens.

Pair counts come from the instrumented score counter inside
``relative_attention``, so they reflect what was actually computed.  Dense
attention is evaluated in query chunks to bound memory; chunking does not
change the number of score entries.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from faxbev.attention import AttentionConfig, FaxSABlock, fax_sa_block, relative_attention
from faxbev.errors import ConfigurationError
from faxbev.tensor import Tensor, no_grad

CSV_HEADER = ("H", "W", "N", "variant", "pair_count", "wall_ms")


@dataclass(frozen=True)
class BenchRow:
    H: int
    W: int
    N: int
    variant: str
    pair_count: int
    wall_ms: float

    def csv(self) -> str:
        return f"{self.H},{self.W},{self.N},{self.variant},{self.pair_count},{self.wall_ms:.3f}"


def dense_attention(x: Tensor, num_heads: int, counter: dict | None = None, chunk: int = 1024) -> Tensor:
    """Plain multi-head self-attention over every token of ``x: [N, H, W, C]`` (no projections)."""
    c = x.shape[-1]
    tokens = x.data.reshape(1, -1, c)
    kv = Tensor(tokens)
    outs = []
    for s in range(0, tokens.shape[1], chunk):
        q = Tensor(tokens[:, s:s + chunk])
        outs.append(relative_attention(q, kv, kv, None, num_heads, counter=counter).data)
    return Tensor(np.concatenate(outs, axis=1).reshape(x.shape))


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def bench_attention(sizes=(16, 32, 64), agents: int = 2, P: int = 8, G: int = 8, heads: int = 4,
                    dim: int = 8, repeats: int = 3, seed: int = 0, variants=("fax", "dense")) -> list[BenchRow]:
    """One row per (size, variant); ``pair_count`` is the number of attention scores formed."""
    for s in sizes:
        if s % P or s % G:
            raise ConfigurationError(f"size {s} is not divisible by P={P} and G={G}")
    cfg = AttentionConfig(dim, heads, P, G)
    rng = np.random.default_rng(seed)
    block = FaxSABlock(rng, cfg, agents)
    rows = []
    with no_grad():
        for s in sizes:
            x = Tensor(rng.standard_normal((agents, s, s, dim)).astype(np.float32))
            for variant in variants:
                if variant == "fax":
                    def run(counter=None):
                        return fax_sa_block(x, block, cfg, counter=counter)
                elif variant == "dense":
                    def run(counter=None):
                        return dense_attention(x, heads, counter)
                else:
                    raise ConfigurationError(f"unknown variant {variant!r}")
                counter: dict = {}
                run(counter)
                ms = _median_ms(run, repeats)
                rows.append(BenchRow(s, s, agents, variant, counter["pairs"], ms))
    return rows


def fit_slopes(rows: list[BenchRow], key: str = "pair_count") -> dict[str, float]:
    """Least-squares slope of log(key) against log(H*W), per variant."""
    out = {}
    for variant in sorted({r.variant for r in rows}):
        pts = [(math.log(r.H * r.W), math.log(max(getattr(r, key), 1e-12))) for r in rows if r.variant == variant]
        if len(pts) < 2:
            continue
        xs, ys = np.array(pts).T
        out[variant] = float(np.polyfit(xs, ys, 1)[0])
    return out
