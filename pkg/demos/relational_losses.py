"""How the relational alignment losses behave on random token grids.

Run: python demos/relational_losses.py
"""
import numpy as np

from moalign import align

rng = np.random.default_rng(0)
M = rng.standard_normal((3, 4, 6, 16))  # motion features: frames x H x W x channels
Z = rng.standard_normal((3, 4, 6, 16))  # projected denoiser features

print("soft relational loss, random Z:", align.soft_trd_loss(Z, M, tau=10.0).item())

# the loss only sees cosine structure, so per-token rescaling changes nothing
D = rng.uniform(0.1, 10.0, (3, 4, 6, 1))
print("after per-token rescaling     :", align.soft_trd_loss(D * Z, M, tau=10.0).item())
print("Z = 4 * M                     :", align.soft_trd_loss(4.0 * M, M).item())

# frame-distance weights: zero within a frame, exp(-distance / tau) across frames
W = align.temporal_weights(3, 1, 2, tau=1.0)
print("weights for a 3x1x2 grid, tau=1:\n", np.round(W, 4))

# large tau recovers the unweighted loss
for tau in (1.0, 10.0, 100.0, 1e12):
    print(f"tau={tau:<8g} soft={align.soft_trd_loss(Z, M, tau).item():.6f}")
print(f"unweighted      trd ={align.trd_loss(Z, M).item():.6f}")
