"""scikit-learn style wrappers: a pose rasterizer transformer and an
estimator that trains the animation model on episodes and predicts videos."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .config import Config, load_config
from .evaluation import episode_seed, psnr, sample_episode
from .model import EpisodeStore
from .skeleton import rasterize
from .trainer import Trainer
from .validation import check_episodes, check_pose_sequences


class PoseRasterizer(TransformerMixin, BaseEstimator):
    """PoseSequence list -> (n, F, H, W, 3) stick-figure rasters."""

    def __init__(self, height: int = 64, width: int = 64, thickness: int | None = None):
        self.height = height
        self.width = width
        self.thickness = thickness

    def fit(self, X, y=None):
        check_pose_sequences(X)
        return self

    def transform(self, X):
        seqs = check_pose_sequences(X)
        return np.stack([rasterize(s, self.height, self.width, self.thickness) for s in seqs])


class AnimationEstimator(BaseEstimator):
    """Pretrains on the episodes as text-to-video pairs, then fine-tunes the
    animation branches; ``predict`` returns one generated video per episode.

    ``config`` is a Config, a path to a TOML file, or None for defaults; the
    remaining parameters override the matching config keys when set.
    """

    def __init__(self, config=None, pretrain_steps=None, finetune_steps=None, p_ani=None,
                 sample_steps=None, guidance=None, seed=0):
        self.config = config
        self.pretrain_steps = pretrain_steps
        self.finetune_steps = finetune_steps
        self.p_ani = p_ani
        self.sample_steps = sample_steps
        self.guidance = guidance
        self.seed = seed

    def resolved_config(self) -> Config:
        cfg = self.config
        if cfg is None:
            cfg = Config()
        elif not isinstance(cfg, Config):
            cfg = load_config(cfg)
        train = {"seed": self.seed}
        for key in ("pretrain_steps", "finetune_steps", "p_ani"):
            if getattr(self, key) is not None:
                train[key] = getattr(self, key)
        diffusion = {k: v for k, v in (("sample_steps", self.sample_steps), ("guidance", self.guidance))
                     if v is not None}
        return cfg.replace(train=train, diffusion=diffusion)

    def fit(self, X, y=None):
        episodes = check_episodes(X)
        cfg = self.resolved_config()
        store = EpisodeStore(episodes)
        pre = Trainer(cfg, store, "pretrain")
        pre.run()
        ft = Trainer(cfg, store, "finetune", model=pre.model)
        ft.run()
        self.config_ = cfg
        self.model_ = ft.model.eval()
        self.pretrain_history_ = pre.history
        self.finetune_history_ = ft.history
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("AnimationEstimator is not fitted; call fit first")

    def predict(self, X):
        self._check_fitted()
        episodes = check_episodes(X)
        return np.stack([
            sample_episode(self.model_, ep, self.config_, seed=episode_seed(self.seed, i))
            for i, ep in enumerate(episodes)
        ])

    def score(self, X, y=None):
        """Mean PSNR (dB) of the predictions against each episode's ground truth."""
        episodes = check_episodes(X)
        videos = self.predict(episodes)
        return float(np.mean([psnr(v, ep.gt_video) for v, ep in zip(videos, episodes)]))
