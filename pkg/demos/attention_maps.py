"""What the attention blocks see: reverse, edge and uncertainty maps for a coarse prediction.

Writes PGM images of each map to ./attention_demo/.
"""
import os

import numpy as np

from uegan import tensor as T
from uegan.attention import edge_attention, reverse_attention, uncertainty_map
from uegan.io import save_gray, save_mask
from uegan.training import synth_dataset

out_dir = "attention_demo"
os.makedirs(out_dir, exist_ok=True)

sample = synth_dataset(1, 64, seed=3)[0]
save_mask(os.path.join(out_dir, "mask.pgm"), sample.mask)

# a blurry half-resolution guess at the mask, as a coarser decoder stage would produce
coarse = sample.mask.reshape(32, 2, 32, 2).mean(axis=(1, 3))
logits = T.Tensor((4.0 * (coarse - 0.5) + np.random.default_rng(0).normal(0, 0.8, coarse.shape))[None, None])
feats = T.Tensor(np.ones((1, 1, 64, 64), dtype=np.float32))

a_r, _ = reverse_attention(logits, feats)
a_e, _ = edge_attention(logits, feats)
unc = uncertainty_map(T.bilinear_upsample(logits, 2))

for name, m in (("reverse", a_r), ("edge", a_e), ("uncertainty", unc)):
    data = m.data[0, 0]
    save_gray(os.path.join(out_dir, f"{name}.pgm"), data)
    print(f"{name:<12} mean {data.mean():.3f}  max {data.max():.3f}  nonzero {np.mean(data > 0):.0%}")

# edge attention lives only in a band around the predicted outline
edge_frac = np.mean(a_e.data > 0)
print(f"edge attention covers {edge_frac:.0%} of the image; building fraction is {sample.mask.mean():.0%}")
print(f"maps written to {out_dir}/")
