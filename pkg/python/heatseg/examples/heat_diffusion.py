"""
Heat diffusion in the frequency domain
======================================

Diffuses a square of heat with a uniform conductivity and compares the result with an explicit
finite-difference solver.
"""
from __future__ import annotations

import numpy as np

from heatseg import DiffusivityField, FeatureField, diffuse, explicit_heat_steps

field = np.zeros((1, 32, 32))
field[0, 12:20, 12:20] = 1.0
x = FeatureField(field)

k = DiffusivityField.uniform(0.5, x.spatial_shape, time=2.0)
spectral = diffuse(x, k, discrete=True)
explicit = explicit_heat_steps(x, 0.5, dt=0.01, steps=200)

# Total heat is conserved and the peak flattens out
assert np.isclose(spectral.data.sum(), field.sum())
assert spectral.data.max() < field.max()
assert np.max(np.abs(spectral.data - explicit.data)) < 2e-2
spectral
