"""Adam optimizer over a :class:`~femurseg.nn.NetworkParams` set."""

from __future__ import annotations

import numpy as np

from .errors import CheckpointError
from .nn import NetworkParams


class Adam:
    def __init__(self, params: NetworkParams, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}

    def step(self, grads: dict) -> None:
        """Apply one update; ``grads`` maps tensor -> gradient array."""
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1 - b2 ** self.step_count) / (1 - b1 ** self.step_count)
        for k, t in self.params.tensors.items():
            g = grads.get(t)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            t.data -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(t.dtype)

    def state_arrays(self, prefix: str) -> dict:
        out = {f"{prefix}step": np.array([self.step_count], dtype=np.float32)}
        for k in self.m:
            out[f"{prefix}m/{k}"] = self.m[k]
            out[f"{prefix}v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict, prefix: str) -> None:
        key = f"{prefix}step"
        if key not in arrays:
            raise CheckpointError(f"checkpoint has no optimizer state under {prefix!r}")
        self.step_count = int(arrays[key][0])
        for k in self.m:
            try:
                self.m[k] = arrays[f"{prefix}m/{k}"].astype(self.m[k].dtype)
                self.v[k] = arrays[f"{prefix}v/{k}"].astype(self.v[k].dtype)
            except KeyError as exc:
                raise CheckpointError(f"optimizer state missing for {k!r}") from exc
