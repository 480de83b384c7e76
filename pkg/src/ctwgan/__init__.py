"""Texture-preserving WGAN CT reconstruction lab.

Subpackages: autodiff engine, network builders, CT simulator, WGAN-GP
losses, training loop, texture/fidelity metrics, classical baselines, and
the experiment pipeline behind the `ctwgan` CLI.
"""

__version__ = "0.1.0"
