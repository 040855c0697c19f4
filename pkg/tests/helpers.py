import numpy as np
import torch

from functools import lru_cache
from dsolocate.model import INPUT_SHAPE, ModelParams, TrainingConfig, train
from dsolocate.synthgen import InstrumentProfile, build_dataset

TINY_PROFILE = InstrumentProfile(name="tiny", width=256, height=256)

# few hundred parameters, trains in seconds
TINY_ARCHITECTURE = (
    {"type": "conv", "channels": 4, "kernel": 5, "stride": 4, "norm": False},
    {"type": "max_pool", "kernel": 4},
    {"type": "global_pool"},
    {"type": "dense", "units": 1},
)

LINEAR_ARCHITECTURE = (
    {"type": "flatten"},
    {"type": "dense", "units": 1},
)

@lru_cache(maxsize=None)
def tiny_split(n: int = 20, seed: int = 3):
    return build_dataset(n, TINY_PROFILE, seed=seed, crops_per_frame=6)

@lru_cache(maxsize=None)
def tiny_model(epochs: int = 2, seed: int = 5):
    return train(tiny_split(), TrainingConfig(epochs=epochs, batch_size=8, seed=seed, architecture=TINY_ARCHITECTURE))

def linear_model(weights: np.ndarray = None, bias: float = 0.0, dtype: torch.dtype = torch.float64) -> ModelParams:

    """
        logit(x) = sum(weights * x) + bias, weights given as a 224 x 224 x 3
        grid (zeros when omitted).
    """

    params = ModelParams.initialize(LINEAR_ARCHITECTURE).astype(dtype)
    if weights is None:
        weights = np.zeros(INPUT_SHAPE)
    state = params.state_dict()
    # the network flattens channels first
    state["layers.1.weight"] = torch.as_tensor(np.transpose(weights, (2, 0, 1)).reshape(1, -1), dtype=dtype)
    state["layers.1.bias"] = torch.tensor([bias], dtype=dtype)
    return params.with_state(state)

def brightness_model(gain: float = 40.0, level: float = 0.25) -> ModelParams:
    """
        logit = gain * (mean intensity - level): bright patches are present.
    """
    n = int(np.prod(INPUT_SHAPE))
    return linear_model(np.full(INPUT_SHAPE, gain / n), bias=-gain * level)

def flat_patch(value: float) -> np.ndarray:
    return np.full(INPUT_SHAPE, value, dtype=np.float32)

def disc(shape, center, radius) -> np.ndarray:
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius ** 2
