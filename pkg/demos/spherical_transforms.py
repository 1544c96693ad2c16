"""Transforms, spectral resampling and the low-rank operator on small grids."""

import numpy as np

from mdemu.checks import random_bandlimited
from mdemu.sht import GridSpec, grid_energy, sht_forward, sht_inverse, spectral_energy, spectral_resample
from mdemu.spectral import S2Conv, S2ConvConfig
from mdemu.tensor import Tensor

rng = np.random.default_rng(0)

# a random field with degrees up to 17 on the 5-degree grid
grid = GridSpec(36, 72)
f, _ = random_bandlimited(1, grid, 17, rng)
c = sht_forward(f, grid, 17, 17)
back = sht_inverse(c, grid).data
print("roundtrip error", np.linalg.norm(back - f) / np.linalg.norm(f))
print("energy  grid %.6f  spectrum %.6f" % (grid_energy(f, grid)[0], spectral_energy(c)[0]))

# truncating to a coarser grid keeps only the large scales
coarse = GridSpec(12, 24)
low = sht_inverse(spectral_resample(c, *coarse.default_band()), coarse).data
print("coarse field", low.shape, "std %.3f vs %.3f" % (low.std(), f.std()))

# one learned spectral layer from the fine grid to the coarse one
layer = S2Conv(S2ConvConfig(grid, coarse, c_in=1, c_out=4, rank=3), rng)
y = layer(Tensor(f[None]))
print("S2 layer", f.shape, "->", y.shape, "parameters", layer.num_parameters())
