"""Near-infrared spectral material classification for in-hand grasp sensing.

Submodules: ``spectra`` (calibration and smoothing), ``nmf`` (nonnegative
feature compression), ``classify`` (model families), ``belief`` (recursive
Bayes filter), ``simgrasp`` (synthetic data) and ``cli``.
"""

__version__ = "0.1.0"
