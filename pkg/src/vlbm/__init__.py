"""Variational latent branching model for model-based off-policy evaluation.

Modules:

- :mod:`vlbm.autodiff` reverse-mode automatic differentiation over numpy arrays
- :mod:`vlbm.nn` dense/LSTM blocks and Gaussian/Bernoulli heads
- :mod:`vlbm.model` encoder, branched decoder, objectives, training and rollout
- :mod:`vlbm.ar` autoregressive ensemble baseline
- :mod:`vlbm.envs` synthetic environments, policies and datasets
- :mod:`vlbm.metrics` rank correlation, regret@1 and MAE
- :mod:`vlbm.harness` end-to-end OPE experiments
- :mod:`vlbm.cli` command-line entry point
"""

__version__ = "0.1.0"
