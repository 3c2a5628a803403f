"""Scale-sequence (S2) feature neck for small-object detection, on a numpy autodiff core."""

__version__ = "0.1.0"
