"""Physics-constrained inverse ECG: a desk-scale laboratory.

Forward-simulate Aliev-Panfilov heart potentials, project them through an
ill-conditioned transfer matrix, and reconstruct them with a physics-constrained
network (built on an in-house autodiff engine) or with Tikhonov, spatiotemporal
and unscented-Kalman baselines.
"""

__version__ = "0.1.0"
