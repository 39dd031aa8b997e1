import os
import gzip
import math
import struct
from dataclasses import dataclass
from typing import Optional, Tuple
import numpy as np
import torch
from torch import tensor
from torch.utils.data import Dataset
from src.lobster.utils.errors import DatasetError, FormatError
from src.lobster.utils.tensor import DTYPE

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

IDX_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}


class ImageDataset(Dataset):
    """
    Labeled samples held in memory as float64 images and int64 labels.
    Indexing with a list of indices returns a whole batch.
    """

    def __init__(self, images: tensor, labels: tensor, split: str = 'train', indices: Optional[tensor] = None):
        """
        :param images: (N, ...) sample tensor
        :param labels: (N,) class per sample
        :param split: train, val or test
        :param indices: Positions of the samples in the dataset they were drawn from
        """
        if len(images) != len(labels):
            raise DatasetError('{0} images but {1} labels'.format(len(images), len(labels)))
        self.images = images
        self.labels = labels.long()
        self.split = split
        self.indices = indices if indices is not None else torch.arange(len(labels))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx) -> dict:
        sample = {
            'image': self.images[idx],
            'label': self.labels[idx],
        }
        return sample

    def subset(self, idx: tensor, split: str) -> 'ImageDataset':
        return ImageDataset(self.images[idx], self.labels[idx], split, self.indices[idx])


@dataclass
class Splits:
    train: ImageDataset
    val: ImageDataset
    test: ImageDataset


###############################################################################
# IDX FILES                                                                   #
###############################################################################
def read_idx(path: str) -> tensor:
    """
    Decodes an IDX file of unsigned bytes.
    The file starts with a big-endian magic number (0x00000803 for images,
    0x00000801 for labels), followed by one big-endian 4-byte size per
    dimension and the payload.
    :param path: Path to the file, optionally gzipped (.gz)
    :return: uint8 tensor shaped by the header
    """
    opener = gzip.open if path.endswith('.gz') else open
    with opener(path, 'rb') as file:
        buf = file.read()

    if len(buf) < 4:
        raise FormatError('{0}: truncated header'.format(path))
    magic, = struct.unpack_from('>I', buf, 0)
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError('{0}: bad magic number 0x{1:08x}'.format(path, magic))

    ndim = magic & 0xff
    header_size = 4 + 4 * ndim
    if len(buf) < header_size:
        raise FormatError('{0}: truncated header, expected {1} bytes, got {2}'.format(path, header_size, len(buf)))
    dims = struct.unpack_from('>' + 'I' * ndim, buf, 4)

    expected = int(np.prod(dims))
    actual = len(buf) - header_size
    if actual != expected:
        raise FormatError('{0}: expected {1} payload bytes, got {2}'.format(path, expected, actual))

    data = np.frombuffer(buf, dtype=np.uint8, offset=header_size).reshape(dims)
    return torch.from_numpy(data.copy())


def _find(root: str, name: str) -> str:
    for candidate in (name, name + '.gz'):
        path = os.path.join(root, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError('Missing dataset file {0}'.format(os.path.join(root, name)))


def load_idx_dataset(root: str, split: str) -> ImageDataset:
    """
    Loads a MNIST-format split and scales pixels to [0, 1].
    :param root: Directory holding the four IDX files
    :param split: train or test
    """
    image_file, label_file = IDX_FILES[split]
    images = read_idx(_find(root, image_file))
    labels = read_idx(_find(root, label_file))
    if images.dim() != 3 or labels.dim() != 1:
        raise FormatError('{0}: unexpected IDX dimensions {1} / {2}'.format(root, tuple(images.shape),
                                                                          tuple(labels.shape)))
    if len(labels) and int(labels.max()) > 9:
        raise DatasetError('{0}: label {1} outside [0, 9]'.format(root, int(labels.max())))
    images = images.to(DTYPE).div_(255.0).unsqueeze(1)
    return ImageDataset(images, labels.long(), split)


###############################################################################
# SPLITS & SYNTHETIC DATA                                                     #
###############################################################################
def split_train_val(dataset: ImageDataset, val_size: int, seed: int) -> Tuple[ImageDataset, ImageDataset]:
    """
    Seeded permutation; its last `val_size` entries form the validation set.
    :return: (train, val), disjoint and covering the input
    """
    n = len(dataset)
    if val_size >= n:
        raise DatasetError('Validation size {0} must be smaller than dataset size {1}'.format(val_size, n))
    if val_size == 0:
        return dataset, dataset.subset(torch.arange(0), 'val')
    generator = torch.Generator().manual_seed(seed)
    perm = torch.randperm(n, generator=generator)
    return dataset.subset(perm[:n - val_size], dataset.split), dataset.subset(perm[n - val_size:], 'val')


def blob_means(classes: int, dim: int, distance: float, generator: torch.Generator, support: int = 0) -> tensor:
    """
    Class means on a randomly rotated regular polygon with neighbouring means
    `distance` apart, embedded in a random plane. With `support` set, the
    plane only spans that many seeded coordinates and all other coordinates
    of every mean are zero.
    """
    if dim == 1:
        offset = float(torch.randn(1, generator=generator, dtype=DTYPE))
        return (torch.arange(classes, dtype=DTYPE) * distance + offset).unsqueeze(1)
    support = support or dim
    if not 2 <= support <= dim:
        raise DatasetError('Support must be in [2, {0}], got {1}'.format(dim, support))
    radius = distance / (2.0 * math.sin(math.pi / classes))
    phase = float(torch.rand(1, generator=generator, dtype=DTYPE)) * 2.0 * math.pi
    angles = phase + 2.0 * math.pi * torch.arange(classes, dtype=DTYPE) / classes
    polygon = radius * torch.stack([torch.cos(angles), torch.sin(angles)], dim=1)
    plane, _ = torch.linalg.qr(torch.randn(support, 2, generator=generator, dtype=DTYPE))
    if support < dim:
        coords = torch.randperm(dim, generator=generator)[:support]
        plane = torch.zeros(dim, 2, dtype=DTYPE).index_copy_(0, coords, plane)
    return polygon @ plane.T


def synthetic_blobs(n_per_class: int, classes: int, dim: int, seed: int,
                    separation: float = 10.0, sigma: float = 1.0, support: int = 0) -> ImageDataset:
    """
    Gaussian clusters with seeded, well separated means.
    :param n_per_class: Samples drawn per class
    :param classes: Number of classes, >= 2
    :param dim: Sample dimension
    :param seed: Random seed
    :param separation: Distance between neighbouring means in units of sigma
    :param sigma: Standard deviation of every cluster
    :param support: Coordinates the means live on, 0 for all of them
    """
    if classes < 2:
        raise DatasetError('Synthetic blobs need at least 2 classes, got {0}'.format(classes))
    generator = torch.Generator().manual_seed(seed)
    means = blob_means(classes, dim, separation * sigma, generator, support)
    labels = torch.arange(classes).repeat_interleave(n_per_class)
    noise = torch.randn(classes * n_per_class, dim, generator=generator, dtype=DTYPE)
    images = means[labels] + sigma * noise
    return ImageDataset(images, labels, 'train')


def load_dataset(name: str, root: str, val_size: int, seed: int, synthetic_samples: int = 100,
                 synthetic_separation: float = 10.0, synthetic_support: int = 0) -> Splits:
    """
    Dataset factory returning disjoint train, validation and test splits.
    :param name: mnist, fashion-mnist or synthetic
    :param root: Base directory; IDX files are expected in root/<name>
    :param val_size: Samples moved from train to validation
    :param seed: Split seed
    """
    if name in ('mnist', 'fashion-mnist'):
        directory = os.path.join(root, name)
        train, val = split_train_val(load_idx_dataset(directory, 'train'), val_size, seed)
        test = load_idx_dataset(directory, 'test')
    elif name == 'synthetic':
        blobs = synthetic_blobs(synthetic_samples, 10, 784, seed, synthetic_separation, support=synthetic_support)
        rest, test = split_train_val(blobs, len(blobs) // 5, seed + 1)
        test.split = 'test'
        train, val = split_train_val(rest, min(val_size, len(rest) // 5), seed)
    else:
        raise DatasetError('No valid dataset with name {0}'.format(name))
    return Splits(train, val, test)
