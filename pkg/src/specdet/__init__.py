"""Desk-scale hyperspectral object detection building blocks.

Submodules:
  tensor    float64 tensors with reverse-mode autodiff
  hsi       cube file format, annotations, synthetic scene generation
  bands     visible/infrared split and representative band selection
  encoder   small strided conv encoder producing a five-level feature pyramid
  fusion    dual-branch cross-modal attention with row-wise top-k masking
  gating    channel gate and parameter-free energy attention
  spectral  PCA spectral filter, token extractor, cross-attention, decoder
  detect    grid detection head, target assignment, multitask loss, NMS
  pipeline  end-to-end detector wiring, training loop, checkpoints
  config    validated run configuration
  cli       command-line entry points
"""

__version__ = "0.1.0"
