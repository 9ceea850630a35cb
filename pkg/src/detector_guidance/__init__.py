"""Detector-guided cross-attention correction at desk scale.

A small autodiff kernel drives a grid detector over synthetic
cross-attention maps; detections are assigned to prompt objects and
used to rewrite subsequent attention logits so conflicting prompts
stop bleeding into each other's regions.
"""

__version__ = "0.1.0"
