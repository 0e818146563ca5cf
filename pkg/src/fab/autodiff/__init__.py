"""Minimal dense-tensor engine with reverse-mode differentiation."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import (avg_pool2d, batch_norm, bilinear_warp_array, conv2d, global_avg_pool,
                         instance_norm, l1_loss, linear, mse_loss, upsample2x, warp)
from .gradcheck import gradcheck, max_gradcheck_error, relative_error
from .nn import (BatchNorm2d, Conv2d, InstanceNorm2d, Linear, Module, ResidualBlock, make_norm,
                 residual_block)
from .optim import SGD, Adam, Optimizer, make_optimizer, optimizer_step
from .tensor import (Tensor, as_tensor, clip, concat, exp, log, matmul, no_grad, relu, sigmoid,
                     softmax, stack, tanh)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of the scalar ``loss`` into every reachable leaf."""
    loss.backward()


__all__ = [
    "Adam", "BatchNorm2d", "CheckpointError", "Conv2d", "InstanceNorm2d", "Linear", "Module",
    "Optimizer", "ResidualBlock", "SGD", "Tensor", "as_tensor", "avg_pool2d", "backward",
    "batch_norm", "bilinear_warp_array", "clip", "concat", "conv2d", "exp", "global_avg_pool",
    "gradcheck", "instance_norm", "l1_loss", "linear", "load_checkpoint", "log", "make_norm",
    "make_optimizer", "matmul", "max_gradcheck_error", "mse_loss", "no_grad", "optimizer_step",
    "relative_error", "relu", "residual_block", "save_checkpoint", "sigmoid", "softmax", "stack",
    "tanh", "upsample2x", "warp",
]
