import copy
import math
from dataclasses import dataclass, asdict
from typing import Dict, Iterator, List, Sequence, Tuple
import torch
from torch import nn, tensor
from src.lobster.utils.errors import ConfigError, DatasetError, ShapeError
from src.lobster.utils.tensor import DTYPE, Tape, matmul, bias_add, conv2d, max_pool2d, \
    relu, flatten, softmax_cross_entropy, check_finite

LENET300_PARAMS = 266610
LENET5_PARAMS = 431080
MNIST_SHAPE = (1, 28, 28)

LAYER_KINDS = ('dense', 'conv', 'pool', 'relu', 'flatten')


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    filters: int = 0
    kernel_size: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> 'LayerSpec':
        return cls(**d)


def dense(name: str, in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec('dense', name, in_features=in_features, out_features=out_features)


def conv(name: str, in_channels: int, filters: int, kernel_size: int) -> LayerSpec:
    return LayerSpec('conv', name, in_channels=in_channels, filters=filters, kernel_size=kernel_size)


def uniform_init(shape: Sequence[int], fan_in: int, fan_out: int, generator: torch.Generator) -> tensor:
    """
    Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    """
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(tuple(shape), generator=generator, dtype=DTYPE) * 2.0 - 1.0) * a


class MaskedDense(nn.Module):
    """
    Fully connected layer whose effective weights are w * mask.
    """
    def __init__(self, spec: LayerSpec):
        super(MaskedDense, self).__init__()
        self.spec = spec
        self.weight = nn.Parameter(torch.zeros(spec.in_features, spec.out_features, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(spec.out_features, dtype=DTYPE))
        self.register_buffer('weight_mask', torch.ones_like(self.weight.data))
        self.register_buffer('bias_mask', torch.ones_like(self.bias.data))

    def reset_parameters(self, generator: torch.Generator):
        self.weight.data.copy_(uniform_init(self.weight.shape,
                                            self.spec.in_features,
                                            self.spec.out_features,
                                            generator))
        self.bias.data.zero_()

    def forward(self, x: tensor) -> tensor:
        if x.dim() != 2 or x.shape[1] != self.spec.in_features:
            raise ShapeError(self.spec.name, x.shape, self.weight.shape)
        return bias_add(matmul(x, self.weight * self.weight_mask), self.bias * self.bias_mask)


class MaskedConv(nn.Module):
    """
    Valid-padding convolution whose effective kernels are k * mask.
    """
    def __init__(self, spec: LayerSpec):
        super(MaskedConv, self).__init__()
        self.spec = spec
        k = spec.kernel_size
        self.weight = nn.Parameter(torch.zeros(spec.filters, spec.in_channels, k, k, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(spec.filters, dtype=DTYPE))
        self.register_buffer('weight_mask', torch.ones_like(self.weight.data))
        self.register_buffer('bias_mask', torch.ones_like(self.bias.data))

    def reset_parameters(self, generator: torch.Generator):
        area = self.spec.kernel_size ** 2
        self.weight.data.copy_(uniform_init(self.weight.shape,
                                            self.spec.in_channels * area,
                                            self.spec.filters * area,
                                            generator))
        self.bias.data.zero_()

    def forward(self, x: tensor) -> tensor:
        return bias_add(conv2d(x, self.weight * self.weight_mask), self.bias * self.bias_mask)


class MaxPool(nn.Module):
    def __init__(self, spec: LayerSpec):
        super(MaxPool, self).__init__()
        self.spec = spec

    def forward(self, x: tensor) -> tensor:
        return max_pool2d(x)


class ReLU(nn.Module):
    def __init__(self, spec: LayerSpec):
        super(ReLU, self).__init__()
        self.spec = spec

    def forward(self, x: tensor) -> tensor:
        return relu(x)


class Flatten(nn.Module):
    def __init__(self, spec: LayerSpec):
        super(Flatten, self).__init__()
        self.spec = spec

    def forward(self, x: tensor) -> tensor:
        return flatten(x)


LAYERS = {
    'dense': MaskedDense,
    'conv': MaskedConv,
    'pool': MaxPool,
    'relu': ReLU,
    'flatten': Flatten,
}


class Model(nn.Module):
    """
    Ordered stack of named layers over masked parameter tensors.
    Pruned coordinates contribute exactly zero to every forward pass.
    """

    def __init__(self, arch: str, specs: List[LayerSpec], input_shape: Tuple[int, ...]):
        """
        Creates the layers and validates the chain with a dry shape pass.
        :param arch: Architecture tag, e.g. lenet300
        :param specs: Layer specifications in forward order
        :param input_shape: Per-sample input shape without batch dimension
        """
        super(Model, self).__init__()
        self.arch = arch
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.layer_names = []
        for spec in self.specs:
            if spec.kind not in LAYERS:
                raise ConfigError('Unknown layer kind {0} for layer {1}'.format(spec.kind, spec.name))
            self.add_module(spec.name, LAYERS[spec.kind](spec))
            self.layer_names.append(spec.name)
        self.output_shapes = self.dry_run()

    def dry_run(self) -> Dict[str, Tuple[int, ...]]:
        """
        Pushes a zero sample through the layers.
        :return: Output shape per layer (without batch dimension)
        """
        shapes = {}
        with torch.no_grad():
            x = torch.zeros((1,) + self.input_shape, dtype=DTYPE)
            for name in self.layer_names:
                try:
                    x = getattr(self, name)(x)
                except ShapeError as err:
                    raise ShapeError('{0} ({1})'.format(name, err.primitive), *err.shapes)
                shapes[name] = tuple(x.shape[1:])
        return shapes

    def forward(self, x: tensor) -> tensor:
        x = x.reshape((x.shape[0],) + self.input_shape)
        for name in self.layer_names:
            x = getattr(self, name)(x)
        return x

    def loss(self, images: tensor, labels: tensor) -> tensor:
        return softmax_cross_entropy(self(images), labels)

    def tape(self) -> Tape:
        """
        Returns a tape watching every parameter tensor of the model.
        """
        return Tape(self.named_parameters())

    def parametrized_layers(self) -> List[str]:
        return [s.name for s in self.specs if s.kind in ('dense', 'conv')]

    def masked_parameters(self) -> Iterator[Tuple[str, nn.Parameter, tensor]]:
        """
        Yields (name, parameter, mask) in stable layer order.
        """
        for layer_name in self.parametrized_layers():
            layer = getattr(self, layer_name)
            yield layer_name + '.weight', layer.weight, layer.weight_mask
            yield layer_name + '.bias', layer.bias, layer.bias_mask

    def masks(self) -> Dict[str, tensor]:
        return {name: mask for name, _, mask in self.masked_parameters()}

    def apply_masks(self):
        """
        Pins every pruned coordinate to +0.0.
        """
        with torch.no_grad():
            for _, param, mask in self.masked_parameters():
                param.data.masked_fill_(mask == 0, 0.0)

    def num_parameters(self) -> int:
        return sum(p.numel() for _, p, _ in self.masked_parameters())

    def num_alive(self) -> int:
        return int(sum(int(m.sum()) for _, _, m in self.masked_parameters()))

    def snapshot(self) -> 'Model':
        return copy.deepcopy(self)

    def load_snapshot(self, other: 'Model'):
        """
        Copies parameters and masks of another instance in place, keeping
        parameter identity intact for optimizers holding references.
        """
        self.load_state_dict(other.state_dict())


###############################################################################
# BUILDERS                                                                    #
###############################################################################
def _initialize(model: Model, seed: int) -> Model:
    generator = torch.Generator().manual_seed(seed)
    for name in model.parametrized_layers():
        getattr(model, name).reset_parameters(generator)
    return model


def lenet300_specs() -> List[LayerSpec]:
    return [LayerSpec('flatten', 'flatten'),
            dense('fc1', 784, 300), LayerSpec('relu', 'relu1'),
            dense('fc2', 300, 100), LayerSpec('relu', 'relu2'),
            dense('fc3', 100, 10)]


def lenet5_specs() -> List[LayerSpec]:
    return [conv('conv1', 1, 20, 5), LayerSpec('relu', 'relu1'), LayerSpec('pool', 'pool1'),
            conv('conv2', 20, 50, 5), LayerSpec('relu', 'relu2'), LayerSpec('pool', 'pool2'),
            LayerSpec('flatten', 'flatten'),
            dense('fc1', 800, 500), LayerSpec('relu', 'relu3'),
            dense('fc2', 500, 10)]


def build_lenet300(seed: int) -> Model:
    model = _initialize(Model('lenet300', lenet300_specs(), MNIST_SHAPE), seed)
    assert model.num_parameters() == LENET300_PARAMS
    return model


def build_lenet5(seed: int) -> Model:
    model = _initialize(Model('lenet5', lenet5_specs(), MNIST_SHAPE), seed)
    assert model.num_parameters() == LENET5_PARAMS
    return model


def build_mlp(in_features: int, hidden: Sequence[int], classes: int, seed: int) -> Model:
    """
    Dense ReLU stack; an empty hidden list gives a single linear layer.
    """
    sizes = [in_features] + list(hidden) + [classes]
    specs = [LayerSpec('flatten', 'flatten')]
    for i in range(len(sizes) - 1):
        if i > 0:
            specs.append(LayerSpec('relu', 'relu{0}'.format(i)))
        specs.append(dense('fc{0}'.format(i + 1), sizes[i], sizes[i + 1]))
    return _initialize(Model('mlp', specs, (in_features,)), seed)


def build_from_specs(arch: str, specs: List[LayerSpec], input_shape: Tuple[int, ...]) -> Model:
    return Model(arch, specs, input_shape)


def build_model(arch: str, seed: int, input_dim: int = 784, classes: int = 10) -> Model:
    """
    Model factory. Returns the architecture named in the config.
    :param arch: lenet300, lenet5 or mlp
    :param seed: Initialization seed
    :param input_dim: Flat input size (mlp only)
    :param classes: Number of classes (mlp only)
    """
    if arch == 'lenet300':
        return build_lenet300(seed)
    elif arch == 'lenet5':
        return build_lenet5(seed)
    elif arch == 'mlp':
        return build_mlp(input_dim, [], classes, seed)
    else:
        raise ConfigError('No valid architecture with name {0}'.format(arch))


###############################################################################
# EVALUATION                                                                  #
###############################################################################
def batch_metrics(logits: tensor, labels: tensor) -> Tuple[float, int]:
    """
    :return: Mean cross-entropy and number of misclassified samples
    """
    loss = softmax_cross_entropy(logits, labels)
    check_finite(loss, 'evaluation loss')
    # argmax returns the first maximal index: ties go to the lowest class
    wrong = int((torch.argmax(logits, dim=1) != labels).sum())
    return float(loss), wrong


def evaluate(model: Model, dataset, batch_size: int = 1000) -> Tuple[float, float]:
    """
    Mean cross-entropy and top-1 error of the masked model on a dataset.
    No tape is recorded.
    :param model: Model to evaluate
    :param dataset: Object exposing `images` and `labels` tensors
    :param batch_size: Samples per forward pass
    :return: (loss, top1 error fraction)
    """
    n = len(dataset.labels)
    if n == 0:
        raise DatasetError('Cannot evaluate on an empty dataset')
    total_loss = 0.0
    total_wrong = 0
    model.eval()
    with torch.no_grad():
        for start in range(0, n, batch_size):
            images = dataset.images[start:start + batch_size]
            labels = dataset.labels[start:start + batch_size]
            loss, wrong = batch_metrics(model(images), labels)
            total_loss += loss * len(labels)
            total_wrong += wrong
    return total_loss / n, total_wrong / n
