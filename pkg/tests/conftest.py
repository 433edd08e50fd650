from __future__ import annotations

import numpy as np
import pytest

from layersep.imaging import LayerStack


def random_masked_stack(
    rng: np.random.Generator, shape: tuple[int, int] = (8, 8), n_bones: int = 2
) -> LayerStack:
    """Random valid stack: free soft-tissue layer, bones on random blob masks."""
    h, w = shape
    layers = [rng.uniform(0.0, 1.0, size=shape)]
    masks = [np.ones(shape)]
    for _ in range(n_bones):
        mask = (rng.uniform(size=shape) < 0.6).astype(np.float64)
        layers.append(rng.uniform(0.0, 1.0, size=shape) * mask)
        masks.append(mask)
    return LayerStack(layers, masks)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
