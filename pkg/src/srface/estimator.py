"""scikit-learn style front end to the detector."""

from __future__ import annotations

from typing import List

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import AugmentConfig, TrainSample, gaussian_blur
from .detector import PyramidConfig, SRFaceNet, build_model, strip_sr_branch
from .engine import TrainConfig, fit, predict
from .metrics import evaluate
from .sr_branch import SRBranchConfig
from .validation import check_boxes, check_images


class SRFaceDetector(BaseEstimator):
    """Anchor-based face detector trained with an auxiliary SR branch.

    ``fit(X, y)`` takes images ``(n, H, W, 3)`` (float in [0, 1] or uint8)
    and one ``(k, 4)`` box array per image. ``predict`` returns one
    ``(k, 5)`` array ``x1, y1, x2, y2, score`` per image and never runs the
    SR branch. Set ``sr_branch=False`` (or ``phi=0``) for the plain baseline.
    """

    def __init__(
        self,
        levels=3,
        base_channels=16,
        input_size=64,
        fpn_channels=16,
        growth=3.0,
        max_channels=256,
        deep_blocks=8,
        sr_branch=True,
        num_rg=2,
        rcab_per_rg=2,
        reduction=4,
        phi=0.1,
        lr=1e-4,
        epochs=30,
        batch_size=4,
        weight_decay=1e-4,
        blur_prob=0.5,
        sigma_range=(0.5, 2.5),
        score_thresh=0.05,
        nms_thresh=0.4,
        random_state=0,
    ):
        self.levels = levels
        self.base_channels = base_channels
        self.input_size = input_size
        self.fpn_channels = fpn_channels
        self.growth = growth
        self.max_channels = max_channels
        self.deep_blocks = deep_blocks
        self.sr_branch = sr_branch
        self.num_rg = num_rg
        self.rcab_per_rg = rcab_per_rg
        self.reduction = reduction
        self.phi = phi
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.blur_prob = blur_prob
        self.sigma_range = sigma_range
        self.score_thresh = score_thresh
        self.nms_thresh = nms_thresh
        self.random_state = random_state

    def _configs(self):
        pyr = PyramidConfig(
            levels=self.levels, base_channels=self.base_channels, input_size=self.input_size,
            fpn_channels=self.fpn_channels, max_channels=self.max_channels, growth=self.growth,
            deep_blocks=self.deep_blocks,
        )
        sr = None
        if self.sr_branch:
            sr = SRBranchConfig(
                num_rg=self.num_rg, rcab_per_rg=self.rcab_per_rg,
                channels=self.fpn_channels, reduction=self.reduction,
            )
        train = TrainConfig(
            lr0=self.lr, lr_floor=min(1e-8, self.lr), epochs=self.epochs, batch_size=self.batch_size,
            phi=self.phi, weight_decay=self.weight_decay, seed=int(self.random_state),
        )
        aug = AugmentConfig(blur_prob=self.blur_prob, sigma_range=tuple(self.sigma_range))
        return pyr, sr, train, aug

    def fit(self, X, y):
        pyr, sr, train, aug = self._configs()
        images = check_images(X, size=pyr.input_size)
        boxes = check_boxes(y, len(images))
        samples = [TrainSample.clean(img, b) for img, b in zip(images, boxes)]
        model = build_model(pyr, sr, int(self.random_state))
        result = fit(samples, train, model, aug)
        self.model_: SRFaceNet = result.model
        self.history_ = [r.as_dict() for r in result.records]
        return self

    @property
    def inference_model_(self) -> SRFaceNet:
        check_is_fitted(self, "model_")
        return strip_sr_branch(self.model_)

    def predict(self, X) -> List[np.ndarray]:
        check_is_fitted(self, "model_")
        images = check_images(X, size=self.input_size)
        dets = predict(self.model_, list(images), self.score_thresh, self.nms_thresh)
        return [
            np.array([[*d.as_list(), d.score] for d in ds], dtype=np.float32).reshape(-1, 5)
            for ds in dets
        ]

    def score(self, X, y, iou_thresh: float = 0.5) -> float:
        """Average precision over all faces at the given IoU."""
        check_is_fitted(self, "model_")
        images = check_images(X, size=self.input_size)
        boxes = check_boxes(y, len(images))
        dets = predict(self.model_, list(images), self.score_thresh, self.nms_thresh)
        return evaluate(dets, boxes, iou_thresh).ap


class BlurDegrader(TransformerMixin, BaseEstimator):
    """Randomly Gaussian-blur images, e.g. to build degraded evaluation sets."""

    def __init__(self, blur_prob=0.5, sigma_range=(0.5, 2.5), random_state=0):
        self.blur_prob = blur_prob
        self.sigma_range = sigma_range
        self.random_state = random_state

    def fit(self, X, y=None):
        check_images(X)
        self.fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self, "fitted_")
        images = check_images(X)
        rng = np.random.default_rng(self.random_state)
        out = images.copy()
        for i in range(len(out)):
            if rng.random() < self.blur_prob:
                out[i] = gaussian_blur(out[i], rng.uniform(*self.sigma_range))
        return out
