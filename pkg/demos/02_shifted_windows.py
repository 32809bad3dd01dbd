"""
Shifted-window attention, looked at directly
============================================

Tokens attend only inside their window.  Odd blocks roll the grid by half a
window first, and a mask stops tokens that were not neighbours before the
roll from seeing each other.
"""

import numpy as np

from moby.backbone import WindowAttention, shift_region_ids, window_attention
from moby.tensor import Tensor

rng = np.random.default_rng(0)
H = W = 8
window, shift = 4, 2

# region labels of the rolled grid; equal labels may attend to each other
ids = shift_region_ids(H, W, window, shift)
print("region ids after the roll:")
print(ids)

attn = WindowAttention(dim=6, num_heads=2, window=window, rng=rng)
grid = Tensor(rng.standard_normal((1, H, W, 6)))
out, probs = window_attention(grid, attn, shift=shift, return_attention=True)
print("output", out.shape, "attention", probs.shape)

# the bottom-right window mixes four regions; its row 0 only reaches its own region
row = probs.data[-1, 0, 0].reshape(window, window)
np.set_printoptions(precision=3, suppress=True)
print("attention of the window's first token:")
print(row)
# same region labels, grouped by window like the tokens are
win_ids = ids.reshape(H // window, window, W // window, window).transpose(0, 2, 1, 3).reshape(-1, window * window)
crossing = win_ids[:, :, None] != win_ids[:, None, :]
print("largest probability across a region boundary:", probs.data.transpose(1, 0, 2, 3)[:, crossing].max())
