"""Transformer-encoder classifier for customer behavior sequences.

Modules:

* :mod:`etusb.numerics`  dense float64 kernels and gradient-check helpers
* :mod:`etusb.journey`   event parsing, granularity reduction, journeys and features
* :mod:`etusb.encoder`   the model, its exact backward pass and checkpoints
* :mod:`etusb.training`  loss, metrics, optimizers and the training loop
* :mod:`etusb.synth`     synthetic journeys with planted labelling rules
* :mod:`etusb.pipeline`  end-to-end helpers
* :mod:`etusb.cli`       the ``etusb`` command
"""

__version__ = "0.1.0"
