"""scikit-learn style wrapper: ``fit`` stores a context set, ``predict`` runs the model on targets."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import apsp, net
from . import train as tr
from .losses import SEGMENTATION, TASK_KINDS


def check_volumes(X, name: str = "X", side: int | None = None) -> np.ndarray:
    """Coerce to a float64 ``(N, 1, D, H, W)`` stack of cubic volumes.

    Accepts ``(N, D, H, W)`` and ``(N, 1, D, H, W)``.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, input_name=name)
    if X.ndim == 4:
        X = X[:, None]
    if X.ndim != 5 or X.shape[1] != 1:
        raise ValueError(f"{name}: expected (N, D, H, W) or (N, 1, D, H, W), got shape {X.shape}")
    if not X.shape[2] == X.shape[3] == X.shape[4]:
        raise ValueError(f"{name}: volumes must be cubic, got {X.shape[2:]}")
    if side is not None and X.shape[2] != side:
        raise ValueError(f"{name}: model expects side {side}, got {X.shape[2]}")
    return X


def check_context(X, y, side: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    X = check_volumes(X, "X", side)
    y = check_volumes(y, "y", side)
    if X.shape != y.shape:
        raise ValueError(f"context images {X.shape} and labels {y.shape} differ in shape")
    return X, y


class InContextEstimator(BaseEstimator):
    """Predict from a stored context set with a trained checkpoint.

    Parameters
    ----------
    checkpoint : str or Checkpoint
        Path to a ``.nv3d`` file or a loaded checkpoint.
    task : str
        Task kind; segmentation predictions are thresholded.
    mini_context : int
        Mini-context size; changes memory use, not the output.
    dtype : {"f32", "f64"}
    threshold : float
    """

    def __init__(self, checkpoint=None, task: str = SEGMENTATION, mini_context: int = 3,
                 dtype: str = "f32", threshold: float = 0.5):
        self.checkpoint = checkpoint
        self.task = task
        self.mini_context = mini_context
        self.dtype = dtype
        self.threshold = threshold

    def _load(self) -> tr.Checkpoint:
        if self.checkpoint is None:
            raise ValueError("checkpoint is required")
        dt = {"f32": np.float32, "f64": np.float64}[self.dtype]
        if isinstance(self.checkpoint, tr.Checkpoint):
            return tr.Checkpoint(self.checkpoint.config, net.cast_params(self.checkpoint.params, dt))
        return tr.load_checkpoint(self.checkpoint, dt)

    def fit(self, X, y):
        """Store ``(X[i], y[i])`` as the context set."""
        if self.task not in TASK_KINDS:
            raise ValueError(f"unknown task {self.task!r}")
        if int(self.mini_context) < 1:
            raise ValueError("mini_context must be >= 1")
        self.model_ = self._load()
        X, y = check_context(X, y, self.model_.config.side)
        self.context_ = [apsp.ContextPair(a, b) for a, b in zip(X, y)]
        self.n_context_ = len(self.context_)
        return self

    def decision_function(self, X) -> np.ndarray:
        """Raw network output, shape ``(N, D, H, W)``."""
        check_is_fitted(self, "context_")
        X = check_volumes(X, "X", self.model_.config.side)
        ncfg = self.model_.net_config
        outs = [apsp.apsp_forward(x, self.context_, int(self.mini_context), self.model_.params, ncfg).data[0]
                for x in X]
        return np.stack(outs)

    def predict(self, X) -> np.ndarray:
        raw = self.decision_function(X)
        if self.task == SEGMENTATION:
            return (raw > self.threshold).astype(np.float64)
        return np.clip(raw, 0.0, 1.0)

    def score(self, X, y) -> float:
        """Mean Dice (segmentation) or PSNR (generation) over the targets."""
        y = check_volumes(y, "y")
        pred = self.decision_function(X)
        return float(np.mean([tr.score(self.task, p, t[0]) for p, t in zip(pred, y)]))
