import numpy as np

from flowseg.net import init_params


def perturbed(cfg, seed=0, scale=0.1):
    """Init params plus Gaussian noise, so the output layer is not identically zero."""
    p = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for k, v in p.tensors.items():
        p.tensors[k] = v + scale * rng.standard_normal(v.shape)
    return p
