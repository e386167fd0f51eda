"""Input checks shared by the estimators, thin wrappers over scikit-learn's."""
from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

DTYPES = {"float64": np.float64, "float32": np.float32}


class TrainingDivergedError(FloatingPointError):
    """A loss became non-finite; ``component`` names where."""

    def __init__(self, component: str, detail: str = ""):
        super().__init__(f"non-finite loss in {component}" + (f" ({detail})" if detail else ""))
        self.component = component


def resolve_dtype(dtype) -> type:
    if isinstance(dtype, str):
        try:
            return DTYPES[dtype]
        except KeyError:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}") from None
    return np.dtype(dtype).type


def check_rows(X, n_features: int, name: str = "X", dtype=np.float64) -> np.ndarray:
    """Finite 2-D float array with ``n_features`` columns; 1-D input becomes one row."""
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None, :]
    X = check_array(X, dtype=dtype, input_name=name)
    if X.shape[1] != n_features:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {n_features}")
    return X


def as_rng(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


def check_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise NotFittedError(f"{type(estimator).__name__} is not initialized; call "
                             f"initialize() or fit() first")
