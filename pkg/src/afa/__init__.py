"""Desk-scale laboratory for multi-branch batchnorm defenses.

The package is organized bottom-up:

  tensor    float64 arrays with tape-based reverse-mode autodiff
  nn        layers, the K-branch norm, and the fused-inference model
  attack    white-box gradient attacks (FGSM/IFGSM/PGD/CW/adaptive)
  data      dataset readers/writers and the checkpoint container
  synthdata deterministic synthetic datasets in the real file formats
  train     two-stage training loops and the baselines
  evaluate  accuracy grids, feature statistics, fusion curves
  cli       command-line entry points
"""

__version__ = "0.1.0"
