"""
Fitting a diffusivity field
===========================

Trains a single heat conduction layer to reproduce the blur of a fixed, stronger conductivity, by gradient descent
through the DCT.
"""
from __future__ import annotations

import numpy as np

from heatseg import (
    AdamState,
    DiffusivityField,
    FeatureField,
    HcoLayer,
    adam_step,
    backward,
    diffuse,
    predict_diffusivity,
)

rng = np.random.default_rng(0)
images = rng.standard_normal((4, 1, 16, 16))
target = np.stack([diffuse(FeatureField(image), DiffusivityField.uniform(1.0, (16, 16))).data for image in images])

layer = HcoLayer.create((16, 16), rng, embed_dim=4)
state = AdamState()
losses = []
for _ in range(60):
    error = layer(images) - target
    loss = (error * error).mean()
    backward(loss)
    adam_step(layer.parameters(), state, lr=0.05)
    losses.append(float(loss.value))

assert losses[-1] < losses[0]
predict_diffusivity(layer).values.mean()
