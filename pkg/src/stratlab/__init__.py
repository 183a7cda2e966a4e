"""stratlab: offline-to-online RL with diffusion behavior models, energy-guided
sampling, and stratified batch updates, at desk scale."""

__version__ = "0.1.0"
