"""Weight quantization toolkit: k-means codebooks, Hessian-guided mixed precision, binary schemes."""

__version__ = "0.1.0"
