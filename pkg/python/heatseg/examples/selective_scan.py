"""
Selective scan over a flattened feature map
===========================================

Flattens a feature map into a token sequence, mixes it with a state-space block and folds it back.
"""
from __future__ import annotations

import numpy as np

from heatseg import FeatureField, SsmBlock, flatten_spatial, scan_chunked, scan_sequential, ssm_forward

rng = np.random.default_rng(0)

# The chunked scan is an exact reformulation of the recurrence h_t = a * h_{t-1} + b_t
a = rng.uniform(0.5, 0.95, size=4)
b = rng.standard_normal((1, 500, 4))
assert np.allclose(scan_chunked(a, b), scan_sequential(a, b))

field = FeatureField(rng.standard_normal((6, 8, 8)))
sequence, flattening = flatten_spatial(field)
block = SsmBlock.create(6, rng, "ssm.0", state_dim=4)
mixed = flattening.unflatten(ssm_forward(block, sequence))
assert mixed.shape == field.shape
mixed
