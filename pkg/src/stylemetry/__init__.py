"""Driving-style representations from 1 Hz GPS trips.

Pipeline: trips (ingest) -> 35 x 128 feature matrices (featurize) -> a
GRU network with an autoencoder and a softmax head (arnet) -> trip vectors
(trip2vec) -> affinity propagation and AMI (clusteval).
"""

__version__ = "0.1.0"
