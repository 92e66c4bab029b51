"""Dense dilated convolution merging networks on NumPy.

Core pieces: :mod:`~ddcmnet.tensor` (differentiable primitives),
:mod:`~ddcmnet.ddcm` (DC blocks and merging modules),
:mod:`~ddcmnet.network` (the segmentation pipeline) and
:mod:`~ddcmnet.analysis` (parameter/FLOP/receptive-field accounting).
"""
from .ddcm import DcBlockSpec, DdcmSpec, effective_kernel, fused_receptive_fields
from .network import BackboneSpec, Network, NetworkSpec, build_network, load_checkpoint, save_checkpoint
from .tensor import ConvSpec, ShapeError

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec", "ConvSpec", "DcBlockSpec", "DdcmSpec", "Network", "NetworkSpec", "ShapeError",
    "build_network", "effective_kernel", "fused_receptive_fields", "load_checkpoint", "save_checkpoint",
]
