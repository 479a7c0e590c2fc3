"""Show what the inner attention does to a correlation map.

Setting the inner output transform to minus the identity cancels the
refinement exactly, so the block reduces to plain multi-head attention.
With random inner weights each key column is reshaped by the columns it
agrees with.
"""
import numpy as np

from aiatrack.attention import AttentionConfig, MultiHeadAttention, attend
from aiatrack.autograd import Tensor

rng = np.random.default_rng(0)
side = 4
cfg = AttentionConfig(model_dim=8, num_heads=2, inner_dim=4)
block = MultiHeadAttention(rng, cfg, corr_len=side * side)
x = Tensor(rng.normal(size=(side * side, 8)))

plain = attend(x, x, x, block.w_q, block.w_k, block.w_v, block.w_o, num_heads=2).data
block.aia.w_o.assign(-np.eye(side * side))
print("negated identity gives plain attention bit for bit:",
      np.array_equal(block(x, x, x, key_grid=(1, side, side)).data, plain))

for _, p in block.aia.named_parameters():
    p.assign(p.data + rng.normal(scale=0.5, size=p.shape))
block.observe()
block(x, x, x, key_grid=(1, side, side))
corr, res = block.last["corr"][0], block.last["residual"][0]
col = 5
before = np.exp(corr[:, col] - corr[:, col].max())
after = np.exp(corr[:, col] + res[:, col] - (corr[:, col] + res[:, col]).max())
print(f"key {col}: query weights before\n{np.round((before / before.sum()).reshape(side, side), 3)}")
print(f"after refinement\n{np.round((after / after.sum()).reshape(side, side), 3)}")
