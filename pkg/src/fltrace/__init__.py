"""Collusion-resistant black-and-white traitor tracing for federated classifiers.

The package simulates an FL aggregator that hands each data-owner a model copy
carrying two fingerprints: q-ary Tardos-coded labels on a shared trigger set
(black-box, catch-one) and an orthonormal owner vector embedded into the third
conv layer's weights through a projection regularizer (white-box, catch-all).
It also implements the data-owner attacks (collusion averaging, fine-tuning,
channel pruning) and both accusation pipelines.

Submodules: tardos, whitebox, nnengine, datasets, fedsim, attacks, evaluation,
config, cli, container.
"""

__version__ = "0.1.0"
