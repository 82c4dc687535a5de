"""Single-shot shape detector with feature-fusion extension modules.

The package provides a small numpy-backed autograd engine, detector graph
builders with a depth-balance analyzer, anchor matching and multibox loss,
a three-phase training harness on a synthetic shapes dataset, evaluation
(NMS, 11-point average precision, latency benchmark) and a CLI front end.
"""

__version__ = "0.1.0"
