"""
Shape-checked differentiable primitives on float64 torch tensors.

Every primitive validates its operands and raises a ShapeError naming itself
and the offending shapes. While a Tape is active on the calling thread each
primitive call is appended to it, and `backward` turns the recorded forward
pass into one gradient per watched parameter.
"""
import threading
from dataclasses import dataclass, field
from collections import OrderedDict
from typing import Dict, Iterable, Iterator, List, Optional, Tuple
import torch
import torch.nn.functional as F
from torch import tensor
from src.lobster.utils.errors import ShapeError, NonFiniteError, TapeError

DTYPE = torch.float64

# Tapes are active per thread; a forward pass on one thread never reaches
# a tape opened on another.
_LOCAL = threading.local()


def _active_tapes() -> List['Tape']:
    if not hasattr(_LOCAL, 'tapes'):
        _LOCAL.tapes = []
    return _LOCAL.tapes


@dataclass
class Node:
    op: str
    input_shapes: Tuple[Tuple[int, ...], ...]
    output_shape: Tuple[int, ...]


class Tape(object):
    """
    Append-only record of the primitives evaluated during one forward pass.
    Saved activations live in torch's autograd graph; the tape keeps the op
    sequence and the parameters gradients are requested for.
    """

    def __init__(self, parameters: Optional[Iterable[Tuple[str, tensor]]] = None):
        """
        :param parameters: (name, tensor) pairs to differentiate with respect to
        """
        self.nodes: List[Node] = []
        self.parameters: Dict[str, tensor] = OrderedDict(parameters or [])
        self.consumed = False

    def watch(self, name: str, param: tensor):
        if not param.requires_grad:
            param.requires_grad_(True)
        self.parameters[name] = param

    def record(self, op: str, inputs: Tuple[tensor, ...], output: tensor):
        self.nodes.append(Node(op,
                               tuple(tuple(t.shape) for t in inputs),
                               tuple(output.shape)))

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> 'Tape':
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes().remove(self)
        return False


@dataclass
class GradientSet:
    """
    One gradient tensor per parameter tensor, keyed by parameter name.
    """
    grads: Dict[str, tensor] = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> tensor:
        return self.grads[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.grads)

    def __len__(self) -> int:
        return len(self.grads)

    def items(self):
        return self.grads.items()

    def scaled(self, alpha: float) -> 'GradientSet':
        return GradientSet(OrderedDict((k, alpha * g) for k, g in self.grads.items()))


def _record(op: str, inputs: Tuple[tensor, ...], output: tensor) -> tensor:
    for tape in _active_tapes():
        tape.record(op, inputs, output)
    return output


def as_tensor(values) -> tensor:
    return torch.as_tensor(values, dtype=DTYPE)


def check_finite(t: tensor, where: str):
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError('Non-finite values in {0}'.format(where))


###############################################################################
# PRIMITIVES                                                                  #
###############################################################################
def matmul(a: tensor, b: tensor) -> tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError('matmul', a.shape, b.shape)
    return _record('matmul', (a, b), torch.matmul(a, b))


def bias_add(x: tensor, b: tensor) -> tensor:
    # Bias broadcasts along the channel/feature axis only.
    if b.dim() != 1 or x.dim() < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError('bias_add', x.shape, b.shape)
    view = (1, -1) + (1,) * (x.dim() - 2)
    return _record('bias_add', (x, b), x + b.view(view))


def conv2d(x: tensor, k: tensor) -> tensor:
    """
    Valid-padding, unit-stride 2-D convolution.
    :param x: Input of shape (N, C_in, H, W)
    :param k: Kernels of shape (C_out, C_in, kh, kw)
    """
    if x.dim() != 4 or k.dim() != 4 or x.shape[1] != k.shape[1] \
            or k.shape[2] > x.shape[2] or k.shape[3] > x.shape[3]:
        raise ShapeError('conv2d', x.shape, k.shape)
    return _record('conv2d', (x, k), F.conv2d(x, k))


def max_pool2d(x: tensor) -> tensor:
    if x.dim() != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError('max_pool2d', x.shape)
    return _record('max_pool2d', (x,), F.max_pool2d(x, kernel_size=2, stride=2))


def relu(x: tensor) -> tensor:
    return _record('relu', (x,), F.relu(x))


def flatten(x: tensor) -> tensor:
    if x.dim() < 2:
        raise ShapeError('flatten', x.shape)
    return _record('flatten', (x,), x.reshape(x.shape[0], -1))


def softmax_cross_entropy(logits: tensor, labels: tensor) -> tensor:
    """
    Fused softmax and cross-entropy, averaged over the batch.
    :param logits: (N, C) scores
    :param labels: (N,) integer classes
    :return: Scalar loss
    """
    if logits.dim() != 2 or labels.dim() != 1 or logits.shape[0] != labels.shape[0]:
        raise ShapeError('softmax_cross_entropy', logits.shape, labels.shape)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise ShapeError('softmax_cross_entropy', logits.shape, labels.shape)
    loss = F.cross_entropy(logits, labels.long(), reduction='mean')
    return _record('softmax_cross_entropy', (logits, labels), loss)


###############################################################################
# BACKWARD                                                                    #
###############################################################################
def backward(tape: Tape, loss: tensor) -> GradientSet:
    """
    Reverse pass over the recorded forward pass.
    :param tape: Tape that was active during the forward pass
    :param loss: Scalar produced by that forward pass
    :return: dL/dw for every watched parameter
    """
    if loss.numel() != 1:
        raise TapeError('backward expects a scalar loss, got shape {0}'.format(tuple(loss.shape)))
    if len(tape) == 0:
        raise TapeError('backward called on an empty tape')
    if tape.consumed:
        raise TapeError('tape has already been differentiated')
    if not tape.parameters:
        raise TapeError('tape watches no parameters')
    check_finite(loss, 'loss')

    names = list(tape.parameters)
    params = [tape.parameters[n] for n in names]
    raw = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    tape.consumed = True

    grads = OrderedDict()
    for name, param, grad in zip(names, params, raw):
        if grad is None:
            grad = torch.zeros_like(param)
        check_finite(grad, 'gradient of {0}'.format(name))
        grads[name] = grad.detach()
    return GradientSet(grads)
