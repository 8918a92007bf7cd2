"""Self-supervised keypoint detection and description with homographic warping."""

from .geometry import Homography, HomographyConfig
from .model import KeypointNet

__all__ = ["Homography", "HomographyConfig", "KeypointNet"]
__version__ = "0.1.0"
