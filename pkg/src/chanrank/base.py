"""Estimator protocol and shared validation helpers.

Selectors and the neural ranker follow the scikit-learn estimator
conventions (constructor stores hyperparameters verbatim, ``fit`` returns
``self``, fitted state lives in trailing-underscore attributes,
``get_params``/``set_params`` for composition) without requiring
scikit-learn itself.
"""

from __future__ import annotations

import inspect

import numpy as np


class NotFittedError(RuntimeError):
    """Raised when a fitted attribute is used before ``fit``."""


class ParamMixin:
    """get_params/set_params backed by the ``__init__`` signature."""

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [
            p.name
            for p in sig.parameters.values()
            if p.name != "self"
            and p.kind in (p.POSITIONAL_OR_KEYWORD, p.KEYWORD_ONLY)
        ]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"invalid parameter {name!r} for {type(self).__name__}; "
                    f"valid parameters: {sorted(valid)}"
                )
            setattr(self, name, value)
        return self

    def _check_fitted(self, *attrs: str) -> None:
        for attr in attrs:
            if getattr(self, attr, None) is None:
                raise NotFittedError(
                    f"{type(self).__name__}.{attr} is unset; call fit() first"
                )


def check_finite(name: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains NaN or Inf")
    return x


def check_equal_lengths(name: str, channels) -> list[np.ndarray]:
    """Validate a multi-channel collection: >= 1 channel, equal lengths."""
    arrays = [np.asarray(c) for c in channels]
    if not arrays:
        raise ValueError(f"{name} is empty")
    n = arrays[0].shape[0]
    for i, a in enumerate(arrays):
        if a.shape[0] != n:
            raise ValueError(
                f"{name}: channel {i} has length {a.shape[0]}, expected {n}"
            )
    return arrays
