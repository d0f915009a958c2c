"""Metro origin-destination flow forecasting with a dual-branch MLP mixer.

Subpackages and modules:

* ``backend``    -- compiled / numpy kernel backends for the hot loops
* ``autodiff``   -- minimal dense tensors with reverse-mode gradients
* ``gradcheck``  -- finite-difference gradient oracle
* ``od_data``    -- OD matrix domain model, windowing, dataset file format
* ``ingestion``  -- transaction logs to OD datasets, synthetic generator
* ``preprocess`` -- unfinished-flow estimation and z-score normalization
* ``model``      -- the mixer network and its checkpoint format
* ``training``   -- dual-branch L1 loss, Adam, the training loop
* ``evaluation`` -- metrics, baseline, robustness and timing harnesses
* ``cli``        -- command-line entry point
"""

__version__ = "0.1.0"

from . import backend

__all__ = ["backend", "__version__"]
