"""
CAM method implementations.

One class per method; ``cam_engine`` dispatches to them by name.
"""

from .cam import VanillaCam
from .gradcam import GradCam
from .gradcampp import GradCamPlusPlus
from .xgradcam import XGradCam
from .layercam import LayerCam
from .scorecam import ScoreCam

__all__ = [
    'VanillaCam',
    'GradCam',
    'GradCamPlusPlus',
    'XGradCam',
    'LayerCam',
    'ScoreCam'
]
