"""Video clip expression classification with frame skipping, in-frame erasing
and noise-aware adaptive loss weighting, on a numpy transformer with
hand-written backward passes."""

__version__ = "0.1.0"
