"""Dynamic gated neuron lab."""
