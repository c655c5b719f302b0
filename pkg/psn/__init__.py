"""Parallel spiking neurons: tensor core, scans, neuron layers, training and benchmarks."""

__version__ = "0.3.0"
