"""Parameter and FLOPs bookkeeping for the base-size model before and after cutting to 2 heads."""

from ghalab.metrics import attention_params, closed_form_params, estimate_flops
from ghalab.model import preset

cfg = preset("paper-base")
n_attn = 3 * cfg.n_layers
base = closed_form_params(cfg)
pruned = closed_form_params(cfg, [2] * n_attn)
print(f"non-embedding parameters: {base:,} -> {pruned:,} ({1 - pruned / base:.2%} fewer)")

full = attention_params(cfg.d_model, 8, 64, bias=False)
kept = attention_params(cfg.d_model, 2, 64, bias=False)
print(f"one attention layer, projection weights: {full:,} -> {kept:,}")

for length in (10, 30, 100):
    f0 = estimate_flops(cfg, length)
    f1 = estimate_flops(cfg, length, [2] * n_attn)
    print(f"input length {length:>3}: {f0 / 1e9:.2f} -> {f1 / 1e9:.2f} GFLOPs (ratio {f1 / f0:.4f})")
