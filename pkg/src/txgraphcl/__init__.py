"""Contrastive account representations for blockchain transaction graphs.

Modules:

* ``txdata``: records, datasets, file formats and ego graphs
* ``synthgen``: seeded synthetic datasets per behavior class
* ``features``: the 43-attribute registry and min-max normalization
* ``structgae``: graph-attention autoencoder and fusion
* ``augment``: time-delay and amount-split augmentation
* ``contrastive``: residual encoder, projection head, pre-training
* ``classify``: frozen-encoder fine-tuning and metrics
* ``evalharness``: protocols, distances and the experiment runner
* ``cli``: the ``txgraphcl`` command
"""

__version__ = "0.1.0"
