# app/utils/tensor.py
from typing import Tuple

import numpy as np
import numpy.typing as npt

# Storage precision. Verification mode swaps in float64 for gradient checks.
STORAGE_DTYPE = np.float32
VERIFY_DTYPE = np.float64

Tensor = npt.NDArray[np.floating]


def compute_dtype(verify: bool = False) -> np.dtype:
    return np.dtype(VERIFY_DTYPE if verify else STORAGE_DTYPE)


def as_tensor(data, shape: Tuple[int, ...] = None, dtype=STORAGE_DTYPE) -> Tensor:
    """Contiguous row-major copy of `data` with the requested dtype (and shape)."""
    arr = np.array(data, dtype=dtype, order="C", copy=True)
    if shape is not None:
        if int(np.prod(shape)) != arr.size:
            raise ValueError(
                f"shape {tuple(shape)} holds {int(np.prod(shape))} values, got {arr.size}"
            )
        arr = arr.reshape(shape)
    return arr


def check_finite(arr: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return arr


def clamp01(arr: Tensor) -> Tensor:
    return np.clip(arr, 0.0, 1.0).astype(arr.dtype, copy=False)
