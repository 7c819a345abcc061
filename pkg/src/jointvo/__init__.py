"""Joint refinement of camera ego-motion and motion segmentation from optical flow."""

__version__ = "0.1.0"
