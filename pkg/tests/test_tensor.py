import math
import threading
import pytest
import torch
from conftest import finite_difference
from src.lobster.utils.errors import ShapeError, TapeError, NonFiniteError
from src.lobster.utils.networks import Model, LayerSpec, conv, dense, build_mlp, build_lenet300
from src.lobster.utils.tensor import DTYPE, Tape, backward, matmul, bias_add, conv2d, max_pool2d, \
    relu, flatten, softmax_cross_entropy


def test_matmul_identity():
    a = torch.randn(3, 3, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    assert torch.equal(matmul(torch.eye(3, dtype=DTYPE), a), a)


def test_relu():
    out = relu(torch.tensor([-1.0, 0.0, 2.0], dtype=DTYPE))
    assert out.tolist() == [0.0, 0.0, 2.0]


def test_conv2d_one_by_one_kernel():
    x = torch.arange(25, dtype=DTYPE).reshape(1, 1, 5, 5)
    k = torch.full((1, 1, 1, 1), 2.0, dtype=DTYPE)
    out = conv2d(x, k)
    assert out.shape == (1, 1, 5, 5)
    assert torch.equal(out, 2.0 * x)


def test_conv2d_valid_padding_shape():
    out = conv2d(torch.zeros(2, 3, 28, 28, dtype=DTYPE), torch.zeros(20, 3, 5, 5, dtype=DTYPE))
    assert out.shape == (2, 20, 24, 24)


def test_max_pool2d():
    x = torch.tensor([[1., 2., 5., 0.],
                      [3., 4., 1., 1.],
                      [0., 0., -1., -2.],
                      [0., 9., -3., -4.]], dtype=DTYPE).reshape(1, 1, 4, 4)
    assert max_pool2d(x).reshape(-1).tolist() == [4.0, 5.0, 9.0, -1.0]


def test_bias_add_broadcasts_along_channels():
    x = torch.zeros(2, 3, 4, 4, dtype=DTYPE)
    out = bias_add(x, torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE))
    assert torch.equal(out[1, 2], torch.full((4, 4), 3.0, dtype=DTYPE))


def test_flatten():
    assert flatten(torch.zeros(5, 2, 3, 4, dtype=DTYPE)).shape == (5, 24)


@pytest.mark.parametrize('call, primitive', [
    (lambda: matmul(torch.zeros(2, 3, dtype=DTYPE), torch.zeros(4, 2, dtype=DTYPE)), 'matmul'),
    (lambda: bias_add(torch.zeros(2, 3, dtype=DTYPE), torch.zeros(4, dtype=DTYPE)), 'bias_add'),
    (lambda: conv2d(torch.zeros(1, 1, 3, 3, dtype=DTYPE), torch.zeros(1, 1, 5, 5, dtype=DTYPE)), 'conv2d'),
    (lambda: conv2d(torch.zeros(1, 2, 8, 8, dtype=DTYPE), torch.zeros(1, 3, 3, 3, dtype=DTYPE)), 'conv2d'),
    (lambda: max_pool2d(torch.zeros(4, 4, dtype=DTYPE)), 'max_pool2d'),
    (lambda: softmax_cross_entropy(torch.zeros(2, 3, dtype=DTYPE), torch.tensor([0, 1, 2])), 'softmax_cross_entropy'),
    (lambda: softmax_cross_entropy(torch.zeros(2, 3, dtype=DTYPE), torch.tensor([0, 3])), 'softmax_cross_entropy'),
])
def test_shape_errors_name_primitive(call, primitive):
    with pytest.raises(ShapeError) as info:
        call()
    assert info.value.primitive == primitive
    assert str(info.value).startswith(primitive)


def test_shape_error_message_lists_both_shapes():
    with pytest.raises(ShapeError, match=r'\(2, 3\) and \(4, 2\)'):
        matmul(torch.zeros(2, 3, dtype=DTYPE), torch.zeros(4, 2, dtype=DTYPE))


def test_backward_square():
    w = torch.full((1, 1), 3.0, dtype=DTYPE, requires_grad=True)
    with Tape([('w', w)]) as tape:
        loss = matmul(w, w).reshape(())
    grads = backward(tape, loss)
    assert float(grads['w']) == 6.0


def test_backward_uniform_logits():
    n, c = 3, 4
    logits = torch.zeros(n, c, dtype=DTYPE, requires_grad=True)
    labels = torch.tensor([0, 2, 3])
    with Tape([('logits', logits)]) as tape:
        loss = softmax_cross_entropy(logits, labels)
    assert float(loss) == pytest.approx(math.log(c), abs=1e-15)

    grad = backward(tape, loss)['logits']
    expected = (torch.full((n, c), 1.0 / c, dtype=DTYPE) - torch.eye(c, dtype=DTYPE)[labels]) / n
    assert torch.allclose(grad, expected, rtol=0.0, atol=1e-15)


def test_tape_records_primitive_order():
    model = build_lenet300(0)
    with model.tape() as tape:
        model.loss(torch.zeros(2, 1, 28, 28, dtype=DTYPE), torch.tensor([0, 1]))
    assert [n.op for n in tape.nodes] == ['flatten',
                                          'matmul', 'bias_add', 'relu',
                                          'matmul', 'bias_add', 'relu',
                                          'matmul', 'bias_add',
                                          'softmax_cross_entropy']
    assert tape.nodes[1].input_shapes == ((2, 784), (784, 300))
    assert tape.nodes[-1].output_shape == ()


def test_tape_ignores_forward_passes_on_other_threads():
    images, labels = torch.ones(3, 4, dtype=DTYPE), torch.tensor([0, 1, 0])
    a, b = build_mlp(4, [3], 2, 0), build_mlp(4, [3], 2, 1)
    with a.tape() as reference:
        a.loss(images, labels)

    recorded, replica_done = threading.Event(), threading.Event()
    tapes = {}

    def hold_tape():
        with a.tape() as tape:
            a.loss(images, labels)
            recorded.set()
            replica_done.wait(timeout=10)
        tapes['a'] = tape

    worker = threading.Thread(target=hold_tape)
    worker.start()
    assert recorded.wait(timeout=10)
    b.loss(images, labels)
    with b.tape() as own:
        b.loss(images, labels)
    replica_done.set()
    worker.join()

    assert len(tapes['a']) == len(reference) == len(own)
    assert [n.op for n in tapes['a'].nodes] == [n.op for n in reference.nodes]


def test_backward_errors():
    w = torch.ones(2, 2, dtype=DTYPE, requires_grad=True)

    with Tape([('w', w)]) as tape:
        out = matmul(w, w)
    with pytest.raises(TapeError):
        backward(tape, out)

    with pytest.raises(TapeError):
        backward(Tape([('w', w)]), (w * w).sum())

    with Tape([('w', w)]) as tape:
        loss = matmul(w, w).sum()
    backward(tape, loss)
    with pytest.raises(TapeError):
        backward(tape, loss)


def test_backward_non_finite():
    w = torch.full((1, 1), float('nan'), dtype=DTYPE, requires_grad=True)
    with Tape([('w', w)]) as tape:
        loss = matmul(w, w).reshape(())
    with pytest.raises(NonFiniteError):
        backward(tape, loss)


def test_unused_parameter_gets_zero_gradient():
    w = torch.ones(1, 1, dtype=DTYPE, requires_grad=True)
    v = torch.ones(3, dtype=DTYPE, requires_grad=True)
    with Tape([('w', w), ('v', v)]) as tape:
        loss = matmul(w, w).reshape(())
    grads = backward(tape, loss)
    assert torch.equal(grads['v'], torch.zeros(3, dtype=DTYPE))


def _conv_net(seed: int) -> Model:
    specs = [conv('conv1', 1, 4, 3), LayerSpec('relu', 'relu1'), LayerSpec('pool', 'pool1'),
             LayerSpec('flatten', 'flatten'), dense('fc1', 64, 5)]
    model = Model('conv', specs, (1, 10, 10))
    generator = torch.Generator().manual_seed(seed)
    for name in model.parametrized_layers():
        getattr(model, name).reset_parameters(generator)
    return model


def _random_problem(seed: int):
    generator = torch.Generator().manual_seed(1000 + seed)
    batch = 1 + seed % 8
    if seed < 10:
        model = build_mlp(12, [16], 5, seed)
        images = torch.randn(batch, 12, generator=generator, dtype=DTYPE)
    else:
        model = _conv_net(seed)
        images = torch.randn(batch, 1, 10, 10, generator=generator, dtype=DTYPE)
    with torch.no_grad():
        for _, param, _ in model.masked_parameters():
            if param.dim() == 1:
                param.data.copy_(0.1 * torch.randn(param.shape, generator=generator, dtype=DTYPE))
    labels = torch.randint(0, 5, (batch,), generator=generator)
    return model, images, labels, generator


def _check_gradients(model, images, labels, generator, coordinates=200):
    with model.tape() as tape:
        loss = model.loss(images, labels)
    grads = backward(tape, loss)

    entries = [(name, param, i) for name, param, _ in model.masked_parameters() for i in range(param.numel())]
    picks = torch.randperm(len(entries), generator=generator)[:coordinates]
    assert len(picks) == min(coordinates, len(entries))
    for k in picks.tolist():
        name, param, i = entries[k]
        numeric = finite_difference(model, images, labels, param, i)
        analytic = float(grads[name].reshape(-1)[i])
        assert abs(analytic - numeric) / max(1.0, abs(numeric)) <= 1e-4, (name, i, analytic, numeric)


@pytest.mark.parametrize('seed', range(20))
def test_gradient_check(seed):
    model, images, labels, generator = _random_problem(seed)
    _check_gradients(model, images, labels, generator)


def test_gradient_check_lenet300():
    generator = torch.Generator().manual_seed(3)
    model = build_lenet300(3)
    images = torch.rand(4, 1, 28, 28, generator=generator, dtype=DTYPE)
    labels = torch.tensor([0, 3, 7, 9])
    _check_gradients(model, images, labels, generator)


def test_backward_linearity():
    model, images, labels, _ = _random_problem(12)
    alpha = 2.5
    with model.tape() as tape:
        loss = model.loss(images, labels)
    grads = backward(tape, loss)
    with model.tape() as tape:
        scaled_loss = alpha * model.loss(images, labels)
    scaled = backward(tape, scaled_loss)
    for name, g in grads.scaled(alpha).items():
        assert torch.allclose(scaled[name], g, rtol=1e-12, atol=0.0)


def test_forward_backward_deterministic():
    results = []
    for _ in range(2):
        model, images, labels, _ = _random_problem(15)
        with model.tape() as tape:
            loss = model.loss(images, labels)
        results.append((loss.detach(), backward(tape, loss)))
    assert torch.equal(results[0][0], results[1][0])
    for name in results[0][1]:
        assert torch.equal(results[0][1][name], results[1][1][name])
