"""Decoupled body/edge semantic segmentation on a from-scratch numpy core."""

from decoupleseg.tensor import ParamStore, Tensor

__all__ = ["ParamStore", "Tensor"]
__version__ = "0.1.0"
