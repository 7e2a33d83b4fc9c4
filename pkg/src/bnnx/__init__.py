"""Binary neural networks with XNOR-popcount kernels and frozen-extractor transfer."""
