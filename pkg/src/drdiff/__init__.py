"""Sparse-attention, mixture-of-experts diffusion for long token sequences.

Submodules:

* :mod:`drdiff.numerics`  stable softmax, seeded random streams, finite differences
* :mod:`drdiff.hsa`       length-bracketed sparse attention masks in CSR form
* :mod:`drdiff.attention` masked attention over mask entries only, with gradients
* :mod:`drdiff.moe`       top-k routed expert feed-forward layer and load balancing
* :mod:`drdiff.diffusion` noise schedules, forward process and anchor-state loss
* :mod:`drdiff.denoiser`  the small noise-prediction network and its training step
* :mod:`drdiff.sampler`   first-order and second-order multistep reverse samplers
* :mod:`drdiff.harness`   configuration, corpus ingestion, experiment runners, CLI
"""

__version__ = "0.1.0"
