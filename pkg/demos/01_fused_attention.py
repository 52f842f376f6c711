"""Fused axial attention: how the partitions work and why the cost stays linear.

A BEV stack of N agents is viewed two ways.  The block partition gathers
P x P windows from every agent into one attention group (local detail); the
grid partition gathers a sparse G x G lattice spanning the whole map (global
context).  Alternating the two gives every cell a path to every other cell
in two hops while each attention group stays a fixed size.
"""
import numpy as np

from faxbev.attention import AttentionConfig, FaxSABlock, fax_sa_block
from faxbev.bench import bench_attention, fit_slopes
from faxbev.partition import PartitionSpec, fused_block, fused_grid, fused_ungrid
from faxbev.tensor import Tensor, no_grad

# A 2-agent 8x8 map whose value at each cell records (agent, row, col).
n, h, w = 2, 8, 8
coords = np.stack(np.meshgrid(np.arange(n), np.arange(h), np.arange(w), indexing="ij"), -1)
x = Tensor(coords.astype(float))
spec = PartitionSpec(P=4, G=4, N=n, H=h, W=w, C=3)

blocks = fused_block(x, spec).data
print("block view", blocks.shape, "-> (windows, N*P*P tokens, C)")
print("window 0 tokens (agent, row, col):", [tuple(t) for t in blocks[0].astype(int)[[0, 1, 4, 16]].tolist()])

grid = fused_grid(x, spec).data
print("grid view ", grid.shape, "-> (groups, N*G*G tokens, C)")
print("group 0 tokens (agent, row, col):", [tuple(t) for t in grid[0].astype(int)[[0, 1, 4, 16]].tolist()], "stride 2")
assert np.array_equal(fused_ungrid(Tensor(grid), spec).data, x.data)
print("ungrid(grid(x)) == x\n")

# One self-attention block keeps the shape of the input.
cfg = AttentionConfig(dim=16, num_heads=2, P=4, G=4)
rng = np.random.default_rng(0)
block = FaxSABlock(rng, cfg, n)
feat = Tensor(rng.standard_normal((n, h, w, 16)))
with no_grad():
    out = fax_sa_block(feat, block, cfg)
print("attention block", feat.shape, "->", out.shape)

# Pair counts: fused axial grows like H*W, dense attention like (H*W)^2.
rows = bench_attention(sizes=(16, 32, 64), agents=2, repeats=1)
print("\n   H  variant      pairs   wall ms")
for r in rows:
    print(f"{r.H:4d}  {r.variant:7s} {r.pair_count:10d} {r.wall_ms:9.1f}")
slopes = fit_slopes(rows)
print("log-log slope of pairs vs H*W:", {k: round(v, 3) for k, v in slopes.items()})
