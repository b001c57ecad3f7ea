"""Trainable harmonic encoding of elapsed time.

Maps a non-negative time difference dt to the vector
sqrt(1/d) * [cos(w_1 dt), ..., cos(w_d dt)], with the frequencies w_i
trainable. Output entries are bounded by sqrt(1/d) and each coordinate is
periodic with period 2*pi/w_i.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import ParameterSet, Tensor, as_tensor


class TimeEncoder:
    """Cosine time encoder over trainable frequencies.

    Frequencies start as a geometric sequence spanning [1/max_timespan, 1]
    so the initial encoder resolves both long and short gaps.
    """

    def __init__(self, params: ParameterSet, dim: int, max_timespan: float,
                 name: str = "time_encoder.omega"):
        if dim < 1:
            raise ValueError("time encoder dimension must be >= 1")
        span = max(float(max_timespan), 1.0)
        if dim == 1:
            init = np.array([1.0 / span])
        else:
            init = np.geomspace(1.0 / span, 1.0, dim)
        self.dim = dim
        self.omega = params.add(name, init)
        self._scale = math.sqrt(1.0 / dim)

    def encode(self, delta_t) -> Tensor:
        """Encode dt (scalar, array, or Tensor) to shape dt.shape + (dim,)."""
        t = as_tensor(delta_t)
        if np.any(t.data < -1e-9):
            raise ValueError("time encoder received a negative time difference")
        shaped = t.reshape(t.shape + (1,))
        omega_row = self.omega.reshape((1,) * t.ndim + (self.dim,))
        return (shaped * omega_row).cos() * self._scale
