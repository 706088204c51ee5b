"""Blockchain-coordinated federated learning for WiFi fingerprint localization.

Core pieces:

* :mod:`chainloc.data` -- fingerprint datasets (file-backed and synthetic),
  client partitioning, label codecs.
* :mod:`chainloc.model` -- small dense/conv networks with hand-rolled
  gradients, Adam, local training and federated averaging.
* :mod:`chainloc.chain` -- device keys, signed transactions, proof-of-stake
  block selection, audit of dumped chains.
* :mod:`chainloc.protocol` -- the decentralized per-round protocol
  (workers / validators / miners) plus decentralized inference.
* :mod:`chainloc.baseline` -- the centralized reference system.
* :mod:`chainloc.harness` -- experiment runner producing CSV and text outputs.
"""

__version__ = "0.1.0"
