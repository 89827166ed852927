"""Mask size per length bracket and the fitted growth exponent.

Run: python3 demos/mask_scaling.py
"""

from drdiff.hsa import HSAConfig, build_hsa_mask, nnz_scaling_fit

cfg = HSAConfig()
print(f"{'n':>6} {'mode':>5} {'nnz':>11} {'nnz/n':>8}")
for n in (256, 512, 1024, 2048, 4096, 6144, 8192, 9000, 12000, 16384, 24576):
    m = build_hsa_mask(cfg, n, 0)
    print(f"{n:>6} {m.mode:>5} {m.nnz:>11} {m.nnz / n:>8.1f}")

# 0.05 n anchors reach the 512 cap at n = 10240; below that the anchor rows grow with n
print("exponent over 9k..24k:     ", round(nnz_scaling_fit(cfg, [9000, 12000, 16384, 24576]), 4))
print("exponent over 12k..32k:    ", round(nnz_scaling_fit(cfg, [12288, 16384, 24576, 32768]), 4))
