import sys
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.manual_seed(0)


def random_seg_map(kp, h, w, seed, dtype=torch.float64):
    """Channel-softmax map from N(0,1) logits."""
    rng = np.random.default_rng(seed)
    logits = torch.as_tensor(rng.standard_normal((kp, h, w)), dtype=dtype)
    return torch.softmax(logits, dim=0)


def random_tensor(shape, seed, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    return torch.as_tensor(rng.standard_normal(shape), dtype=dtype)
