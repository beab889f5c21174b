"""Numeric kernels: convolution, pooling, eigendecomposition, tensor files."""
from pcnet.tensor.eigen import SymEigResult, fix_signs, jacobi_eigh, sym_eigh
from pcnet.tensor.io import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from pcnet.tensor.ops import conv2d, global_avg_pool, matmul, maxpool2

__all__ = [
    "SymEigResult", "conv2d", "fix_signs", "global_avg_pool", "jacobi_eigh", "load_tensor",
    "matmul", "maxpool2", "save_tensor", "sym_eigh", "tensor_from_bytes", "tensor_to_bytes",
]
