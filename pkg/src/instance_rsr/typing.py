from __future__ import annotations

from typing import Callable, Tuple

import torch

# (rows, cols) of the latent patch grid
Grid = Tuple[int, int]

# z_t, t, condition -> predicted noise
Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]
