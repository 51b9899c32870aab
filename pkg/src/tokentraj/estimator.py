"""Scikit-learn style estimator facade over the full forecasting pipeline.

``TrajectoryForecaster`` follows the usual estimator conventions: all
hyperparameters are constructor arguments stored verbatim (so ``get_params``
/ ``set_params`` / ``clone`` work), ``fit`` consumes a list of
:class:`~tokentraj.scene.SceneSample` and learns anchors plus weights, and
``predict`` returns per-agent multi-modal trajectories for new scenes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .detokenizer import AnchorSet
from .errors import ValidationError
from .inference import AgentPrediction, RolloutConfig, rollout
from .metrics import EvalConfig, evaluate
from .model import Model, ModelConfig
from .scene import SceneSample
from .training import TrainConfig, train


def check_scenes(X, require_same_grid: bool = True) -> list[SceneSample]:
    """Validate an input collection of scenes.

    Every element must be a valid :class:`SceneSample`; with
    ``require_same_grid`` all scenes must share dt and horizon lengths
    (the model's token grid is fixed at fit time).
    """
    scenes = list(X)
    if not scenes:
        raise ValidationError("expected at least one scene")
    for i, scene in enumerate(scenes):
        if not isinstance(scene, SceneSample):
            raise ValidationError(f"X[{i}] is {type(scene).__name__}, expected SceneSample")
        scene.validate()
    if require_same_grid:
        first = scenes[0]
        for scene in scenes[1:]:
            if (scene.dt, scene.t_obs, scene.t_future) != (first.dt, first.t_obs, first.t_future):
                raise ValidationError(
                    f"scene {scene.scene_id} grid (dt={scene.dt}, t_obs={scene.t_obs}, "
                    f"t_future={scene.t_future}) differs from {first.scene_id}"
                )
    return scenes


class TrajectoryForecaster(BaseEstimator):
    """Autoregressive multi-modal trajectory forecaster.

    Parameters mirror the desk-scale model and training defaults; anything
    not exposed directly can be overridden through ``model_overrides`` /
    ``train_overrides`` dictionaries (applied last).
    """

    def __init__(
        self,
        hidden: int = 64,
        num_heads: int = 4,
        context_layers: int = 2,
        decoder_layers: int = 2,
        t_token: int = 5,
        k_long: int = 6,
        k_short: int = 8,
        k_neighbors: int = 16,
        lr: float = 1e-3,
        weight_decay: float = 5e-3,
        grad_clip: float = 1.0,
        epochs: int = 200,
        batch_size: int = 8,
        seed: int = 0,
        tau: float = 0.5,
        dropout: float = 0.0,
        nms_out: int | None = None,
        nms_threshold: float = 2.0,
        model_overrides: dict | None = None,
        train_overrides: dict | None = None,
    ):
        self.hidden = hidden
        self.num_heads = num_heads
        self.context_layers = context_layers
        self.decoder_layers = decoder_layers
        self.t_token = t_token
        self.k_long = k_long
        self.k_short = k_short
        self.k_neighbors = k_neighbors
        self.lr = lr
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.tau = tau
        self.dropout = dropout
        self.nms_out = nms_out
        self.nms_threshold = nms_threshold
        self.model_overrides = model_overrides
        self.train_overrides = train_overrides

    # ------------------------------------------------------------------
    def _configs(self, scenes: list[SceneSample]) -> TrainConfig:
        first = scenes[0]
        model_kwargs = dict(
            hidden=self.hidden,
            num_heads=self.num_heads,
            context_layers=self.context_layers,
            decoder_layers=self.decoder_layers,
            t_token=self.t_token,
            t_obs=first.t_obs,
            t_future=first.t_future,
            k_long=self.k_long,
            k_short=self.k_short,
            k_neighbors=self.k_neighbors,
            init_seed=self.seed,
            dropout=self.dropout,
        )
        model_kwargs.update(self.model_overrides or {})
        train_kwargs = dict(
            lr=self.lr,
            weight_decay=self.weight_decay,
            grad_clip=self.grad_clip,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            model=ModelConfig(**model_kwargs),
        )
        train_kwargs.update(self.train_overrides or {})
        return TrainConfig(**train_kwargs)

    def fit(self, X, y=None, max_steps: int | None = None) -> "TrajectoryForecaster":
        """Fit anchors and model weights on a list of scenes."""
        scenes = check_scenes(X)
        config = self._configs(scenes)
        result = train(scenes, config, max_steps=max_steps)
        self.model_ = result.model
        self.anchors_ = result.anchors
        self.history_ = result.history
        self.train_config_ = config
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this TrajectoryForecaster is not fitted yet; call fit() or load()"
            )

    def predict(self, X) -> list[list[AgentPrediction]]:
        """Multi-modal trajectories for every focal agent of every scene."""
        self._check_fitted()
        scenes = check_scenes(X)
        cfg = RolloutConfig(
            tau=self.tau, nms_out=self.nms_out, nms_threshold=self.nms_threshold
        )
        return [rollout(scene, self.model_, self.anchors_, cfg) for scene in scenes]

    def predict_records(self, X) -> list[dict]:
        """Predictions as JSONL-ready records (one per focal agent)."""
        records = []
        for scene, preds in zip(check_scenes(X), self.predict(X)):
            for pred in preds:
                records.append(
                    {
                        "scene_id": scene.scene_id,
                        "agent_id": pred.agent_id,
                        "modes": [
                            {"score": m.score, "waypoints": m.waypoints.tolist()}
                            for m in pred.modes
                        ],
                    }
                )
        return records

    def score(self, X, y=None) -> float:
        """Simplified mAP on the given scenes (higher is better)."""
        self._check_fitted()
        scenes = check_scenes(X)
        report = evaluate(scenes, self.predict_records(scenes), EvalConfig())
        return report.map

    def evaluate(self, X, config: EvalConfig | None = None):
        """Full metric report on the given scenes."""
        self._check_fitted()
        scenes = check_scenes(X)
        return evaluate(scenes, self.predict_records(scenes), config or EvalConfig())

    # ------------------------------------------------------------------
    def save(self, path):
        """Write the fitted model + anchors to a checkpoint file."""
        self._check_fitted()
        from .checkpoint import save_checkpoint

        save_checkpoint(path, self.model_, self.anchors_)

    @classmethod
    def load(cls, path) -> "TrajectoryForecaster":
        """Rebuild a fitted forecaster from a checkpoint file."""
        from .checkpoint import load_checkpoint

        model, anchors = load_checkpoint(path)
        est = cls(
            hidden=model.config.hidden,
            num_heads=model.config.num_heads,
            context_layers=model.config.context_layers,
            decoder_layers=model.config.decoder_layers,
            t_token=model.config.t_token,
            k_long=model.config.k_long,
            k_short=model.config.k_short,
            k_neighbors=model.config.k_neighbors,
            seed=model.config.init_seed,
        )
        est.model_ = model
        est.anchors_ = anchors
        est.history_ = []
        return est


def attach_model(model: Model, anchors: AnchorSet, tau: float = 0.5) -> TrajectoryForecaster:
    """Wrap an existing model + anchors in a fitted estimator."""
    est = TrajectoryForecaster(tau=tau)
    est.model_ = model
    est.anchors_ = anchors
    est.history_ = []
    return est
