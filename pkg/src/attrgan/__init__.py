"""Multi-attribute conditional image synthesis on procedural disc scenes.

The package is organized by pipeline stage:

* :mod:`attrgan.core` -- attribute domain types, normalization, experiment config.
* :mod:`attrgan.synthdata` -- deterministic procedural renderer, label oracle,
  dataset factory.
* :mod:`attrgan.networks` -- conditional generator (multi-scale attribute
  encoder + mapping + synthesis), discriminator, latent-direction
  factorization, checkpoint container.
* :mod:`attrgan.regularizers` -- frozen attribute predictors (ingredient
  classifier, view regressor) used as training-time regularizers and
  evaluation judges.
* :mod:`attrgan.training` -- adversarial optimization loop with lazy R1 and
  attribute regularization.
* :mod:`attrgan.evaluation` -- FID / mAP / RMSE, conditional metrics,
  dependency analysis, traversal grids.
* :mod:`attrgan.cli` -- single command-line entry point.
"""

__version__ = "0.1.0"
