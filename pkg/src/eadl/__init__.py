"""Desk-scale lab for efficient-attention encoders: convert a pretrained
checkpoint to a sparse or landmark attention pattern, distill it into a
half-depth student, and measure what that buys in accuracy and cost."""

__version__ = "0.1.0"
