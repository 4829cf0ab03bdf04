"""EEG gaze regression with a depthwise-separable ViT patch embedding.

Subpackages: tensor (autodiff core), model (network assembly), preprocess
(k-means relabeling, synthetic data, splits), dataio (binary formats),
train (optimizer/loop/metrics), analysis + figures (diagnostic artifacts),
cli (batch front door).
"""

__version__ = "0.1.0"

from . import tensor  # noqa: F401
