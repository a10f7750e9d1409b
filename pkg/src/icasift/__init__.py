"""icasift: classify ICA components of resting-state fMRI as signal or noise.

A self-contained deep-learning stack (dense tensors with reverse-mode
autodiff, CNN/LSTM layers, Adam, early stopping), eleven architectures
over spatial maps, timecourses and power spectra, a subject-level 5-fold
training protocol, weighted soft-voting ensembles, and a synthetic
component generator for desk-scale verification.
"""

__version__ = "0.1.0"

from .tensor import Graph, Tensor, backward_pass, parameter, using_dtype  # noqa: F401
