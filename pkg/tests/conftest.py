import os
import pytest
import torch
from src.lobster.utils.data import ImageDataset, Splits, IDX_FILES
from src.lobster.utils.tensor import DTYPE

DATA_ENV = 'LOBSTER_DATA'


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the long MNIST reproduction tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running reproduction test, needs --runslow and IDX files')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def idx_root(dataset: str) -> str:
    """
    Directory of the IDX files of a dataset under LOBSTER_DATA; skips the
    calling test when they are not there.
    """
    root = os.environ.get(DATA_ENV, '')
    directory = os.path.join(root, dataset)
    for names in IDX_FILES.values():
        for name in names:
            if not any(os.path.exists(os.path.join(directory, name + ext)) for ext in ('', '.gz')):
                pytest.skip('{0} files not found under ${1}'.format(dataset, DATA_ENV))
    return root


def finite_difference(model, images, labels, param, index: int, step=1e-5) -> float:
    """
    Central difference of the model loss along one flat parameter coordinate.
    """
    values = param.data.view(-1)
    with torch.no_grad():
        original = values[index].item()
        values[index] = original + step
        plus = float(model.loss(images, labels))
        values[index] = original - step
        minus = float(model.loss(images, labels))
        values[index] = original
    return (plus - minus) / (2.0 * step)


def make_dataset(images, labels, split='train') -> ImageDataset:
    return ImageDataset(torch.as_tensor(images, dtype=DTYPE), torch.as_tensor(labels), split)


@pytest.fixture
def toy_splits():
    """
    Four well separated 2-D clusters, 10 train, 6 val and 6 test samples each.
    """
    generator = torch.Generator().manual_seed(7)
    centers = torch.tensor([[4.0, 0.0], [0.0, 4.0], [-4.0, 0.0], [0.0, -4.0]], dtype=DTYPE)

    def draw(n, split):
        labels = torch.arange(4).repeat_interleave(n)
        images = centers[labels] + 0.5 * torch.randn(len(labels), 2, generator=generator, dtype=DTYPE)
        return ImageDataset(images, labels, split)

    return Splits(draw(10, 'train'), draw(6, 'val'), draw(6, 'test'))
