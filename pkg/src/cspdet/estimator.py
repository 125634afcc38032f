"""Scikit-learn style estimator around the detection pipeline.

``PyramidDetector`` exposes fit/predict/score so the detector composes with
the wider ecosystem (``get_params``/``set_params``, ``clone``); the heavy
lifting lives in :mod:`cspdet.pipeline`.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import replace
from pathlib import Path

from sklearn.base import BaseEstimator

from .boxes import Box
from .config import ModelConfig, RunConfig, load_config
from .data import DatasetRecord, split
from .errors import ConfigError
from .pipeline import (EVAL_CONF_THRESHOLD, build_model, detect_records,
                       evaluate_records, train_model)
from .validation import check_image, check_records


class PyramidDetector(BaseEstimator):
    """One-stage detector with a CSP-dense backbone and recursive pyramid.

    Parameters mirror :class:`RunConfig`; ``model`` is a
    :class:`ModelConfig`, a path to a YAML config, or None for the canonical
    defaults.  ``fit`` accepts a list of :class:`DatasetRecord` or a dataset
    directory and trains on an internal 6:3:1 split unless ``validation``
    records are supplied.
    """

    def __init__(self, model=None, input_size: int = 416, epochs: int = 30,
                 batch_size: int = 8, lr: float = 0.01, momentum: float = 0.937,
                 weight_decay: float = 5e-4, conf_threshold: float = 0.25,
                 nms_threshold: float = 0.45, iou_threshold: float = 0.5,
                 seed: int = 0, checkpoint_path: str | None = None):
        self.model = model
        self.input_size = input_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.conf_threshold = conf_threshold
        self.nms_threshold = nms_threshold
        self.iou_threshold = iou_threshold
        self.seed = seed
        self.checkpoint_path = checkpoint_path

    # -- config plumbing ---------------------------------------------------

    def _configs(self) -> tuple[ModelConfig, RunConfig]:
        if self.model is None:
            model = ModelConfig()
            run = RunConfig()
        elif isinstance(self.model, ModelConfig):
            model, run = self.model, RunConfig()
        elif isinstance(self.model, (str, Path)):
            model, run = load_config(self.model)
        else:
            raise ConfigError(f"model must be a ModelConfig, path or None, got "
                              f"{type(self.model).__name__}")
        run = replace(run, input_size=self.input_size, epochs=self.epochs,
                      batch_size=self.batch_size, lr=self.lr,
                      momentum=self.momentum, weight_decay=self.weight_decay,
                      conf_threshold=self.conf_threshold,
                      nms_threshold=self.nms_threshold,
                      iou_threshold=self.iou_threshold, seed=self.seed)
        return model, run

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y=None, validation=None):
        records = check_records(X)
        model_cfg, run = self._configs()
        if validation is not None:
            train_recs, val_recs = records, check_records(validation)
        elif len(records) >= 10:
            train_recs, val_recs, _ = split(records, (6, 3, 1), seed=run.seed)
        else:
            train_recs, val_recs = records, []
        ckpt = self.checkpoint_path or str(
            Path(tempfile.mkdtemp(prefix="cspdet_")) / "best.ckpt")
        result = train_model(train_recs, val_recs, model_cfg, run, ckpt)
        self.graph_ = result.graph
        self.run_ = run
        self.model_config_ = model_cfg
        self.best_val_ap_ = result.best_val_ap
        self.log_ = result.log_lines
        self.checkpoint_path_ = ckpt
        return self

    def _require_fitted(self):
        if not hasattr(self, "graph_"):
            raise ConfigError("estimator is not fitted; call fit or load_checkpoint")

    def predict(self, X) -> list[list[Box]]:
        """Detect boxes (original pixel space) on images or records."""
        self._require_fitted()
        records = [x if isinstance(x, DatasetRecord)
                   else DatasetRecord(f"image_{i}", check_image(x), ())
                   for i, x in enumerate(X)]
        return [d.boxes for d in detect_records(self.graph_, records, self.run_)]

    def score(self, X, y=None) -> float:
        """AP at the configured IoU threshold over labelled records."""
        self._require_fitted()
        records = check_records(X)
        ap = evaluate_records(self.graph_, records, self.run_,
                              conf_threshold=EVAL_CONF_THRESHOLD).ap
        return 0.0 if math.isnan(ap) else ap

    def load_checkpoint(self, path) -> "PyramidDetector":
        """Restore weights without fitting (for detect-only use)."""
        from .checkpoint import load_into_graph
        model_cfg, run = self._configs()
        self.graph_ = build_model(model_cfg, seed=run.seed)
        load_into_graph(path, self.graph_)
        self.run_ = run
        self.model_config_ = model_cfg
        self.checkpoint_path_ = str(path)
        return self
