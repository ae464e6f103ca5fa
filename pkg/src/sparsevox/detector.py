"""Estimator facade over the detection pipeline.

Follows scikit-learn conventions (constructor stores parameters verbatim,
fitted state lives in trailing-underscore attributes, get_params/set_params
are introspective) without depending on scikit-learn itself, so
``sklearn.base.clone`` and model-selection utilities compose with it.
"""

from __future__ import annotations

import inspect

from .config import PRESETS, RunConfig, config_hash
from .exceptions import ConfigError
from .metrics import EvalConfig, mean_ap
from .training import detect_scenes, train
from .validation import check_is_fitted, check_scenes


class SparseVoxDetector:
    """Train-on-scenes / predict-detections estimator.

    Parameters mirror the RunConfig knobs most often swept in experiments;
    ``None`` leaves the preset's value in place. ``fit`` expects a list of
    Scene objects (ground truth included); ``predict`` returns one
    DetectionSet per scene.
    """

    def __init__(self, preset: str = "desk", steps: int | None = None,
                 lr: float | None = None, seed: int = 0,
                 fusion: bool | None = None, dfm_blocks: int | None = None,
                 elim_k: float | None = None, elimination: bool | None = None,
                 denoise: bool | None = None, d_model: int | None = None,
                 decoder_layers: int | None = None,
                 num_queries: int | None = None,
                 num_classes: int | None = None,
                 optimizer: str | None = None):
        self.preset = preset
        self.steps = steps
        self.lr = lr
        self.seed = seed
        self.fusion = fusion
        self.dfm_blocks = dfm_blocks
        self.elim_k = elim_k
        self.elimination = elimination
        self.denoise = denoise
        self.d_model = d_model
        self.decoder_layers = decoder_layers
        self.num_queries = num_queries
        self.num_classes = num_classes
        self.optimizer = optimizer

    # ------------------------------------------------------- sklearn API

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "SparseVoxDetector":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ConfigError(
                    f"invalid parameter {key!r} for {type(self).__name__}"
                )
            setattr(self, key, value)
        return self

    # --------------------------------------------------------- training

    def build_config(self) -> RunConfig:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset '{self.preset}' "
                              f"(choose from {sorted(PRESETS)})")
        overrides = {"seed": self.seed}
        for key in ("steps", "lr", "fusion", "dfm_blocks", "elim_k", "elimination",
                    "denoise", "d_model", "decoder_layers", "num_queries",
                    "num_classes", "optimizer"):
            value = getattr(self, key)
            if value is not None:
                overrides[key] = value
        return PRESETS[self.preset](**overrides)

    def fit(self, X, y=None, log_path: str | None = None) -> "SparseVoxDetector":
        """Train the detector on scenes X (y is ignored; ground truth lives
        inside each Scene)."""
        scenes = check_scenes(X)
        cfg = self.build_config()
        result = train(cfg, scenes, log_path=log_path)
        self.model_ = result.model
        self.config_ = cfg
        self.config_hash_ = config_hash(cfg)
        self.history_ = result.history
        return self

    def predict(self, X) -> list:
        check_is_fitted(self)
        return detect_scenes(self.model_, check_scenes(X))

    def score(self, X, y=None) -> float:
        """Mean AP over the default distance thresholds on scenes X."""
        check_is_fitted(self)
        scenes = check_scenes(X)
        preds = detect_scenes(self.model_, scenes)
        gts = [s.gt_boxes for s in scenes]
        m, _ = mean_ap(preds, gts, self.config_.num_classes, EvalConfig())
        return m

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items()
                         if v is not None and k != "preset")
        return f"SparseVoxDetector(preset={self.preset!r}{', ' if args else ''}{args})"
