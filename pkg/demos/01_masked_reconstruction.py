#!/usr/bin/env python3
"""Walk through the generative half of the base objective.

A feature group is a small stack of token vectors. We hide most of the
tokens, let the decoder rebuild the full group from the survivors plus a
learned fill vector, and watch the blend weight alpha hand influence over
from reconstruction to classification as epochs pass.
"""

import numpy as np

from gcmr import (LossConfig, alpha_schedule, init_decoder, mask_features,
                  reconstruct)

rng = np.random.default_rng(0)

# an 8-token group of 6-dimensional features
group = rng.normal(size=(8, 6))
print("feature group:", group.shape)

visible, plan = mask_features(group, ratio=0.75, seed=42)
print(f"masked {len(plan.masked_indices)} of {plan.n_tokens} tokens "
      f"(indices {plan.masked_indices}), {visible.shape[0]} visible")

# the same seed always hides the same tokens
_, plan_again = mask_features(group, ratio=0.75, seed=42)
assert plan_again == plan

# an identity decoder reproduces the visible rows exactly; masked rows can
# only come from the fill vector, so their error stays large
dec = init_decoder(6)
recon = reconstruct(visible, plan, dec)
masked = np.zeros(8, dtype=bool)
masked[list(plan.masked_indices)] = True
err_visible = float(((recon - group)[~masked] ** 2).mean())
err_masked = float(((recon - group)[masked] ** 2).mean())
print(f"reconstruction error: visible rows {err_visible:.3e}, "
      f"masked rows {err_masked:.3f}")

# alpha starts at c and decays by a factor e every two epochs, so early
# training is reconstruction-heavy and late training is classification-heavy
cfg = LossConfig(c=0.3)
print("\nepoch  alpha    1-alpha")
for epoch in (0, 2, 4, 8, 16):
    a = alpha_schedule(cfg, epoch)
    print(f"{epoch:>5}  {a:.5f}  {1 - a:.5f}")
