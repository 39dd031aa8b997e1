"""
Binary checkpoint container.

Layout (little-endian):
    4s magic 'LOBS' | u32 format version
    sections: 4s tag | u64 payload length | u32 crc32(payload) | payload
        SPEC  YAML text: arch, input shape, layer specs
        CONF  YAML text: run config
        TRAC  YAML text: stage trace
        PARM  u32 tensor count, then per tensor:
              u16 name length | name | u8 ndim | u32 dims... | u8 encoding |
              packed mask bits | float64 values (all, or alive ones only)
        END   empty
"""
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import List, Optional
import numpy as np
import torch
import yaml
from src.lobster.utils.errors import CheckpointError, ConfigError, ShapeError
from src.lobster.utils.networks import Model, LayerSpec, build_from_specs

MAGIC = b'LOBS'
VERSION = 1
DENSE = 0
SPARSE = 1


@dataclass
class Checkpoint:
    model: Model
    config: dict = field(default_factory=dict)
    trace: List[dict] = field(default_factory=list)
    version: int = VERSION


def _section(tag: bytes, payload: bytes) -> bytes:
    return struct.pack('<4sQI', tag, len(payload), zlib.crc32(payload)) + payload


def _encode_tensor(name: str, param: torch.Tensor, mask: torch.Tensor, sparse: bool) -> bytes:
    values = param.detach().cpu().numpy().astype('<f8').ravel()
    keep = mask.detach().cpu().numpy().ravel() != 0
    # Elision is lossless only when every pruned value is exactly +0.0
    if sparse and not values[~keep].view('<u8').any():
        encoding, payload = SPARSE, values[keep]
    else:
        encoding, payload = DENSE, values
    name_bytes = name.encode('utf-8')
    out = struct.pack('<H', len(name_bytes)) + name_bytes
    out += struct.pack('<B', param.dim()) + struct.pack('<' + 'I' * param.dim(), *param.shape)
    out += struct.pack('<B', encoding)
    out += np.packbits(keep).tobytes()
    out += payload.tobytes()
    return out


def save_checkpoint(model: Model, path: str, config: Optional[dict] = None,
                    trace: Optional[List[dict]] = None, sparse: bool = True):
    """
    Writes the model with its masks, config and stage trace.
    :param model: Model to save
    :param path: Destination file
    :param config: Run config (UPPERCASE keys)
    :param trace: Pruning stage records
    :param sparse: Elide pruned values
    """
    spec = {'arch': model.arch,
            'input_shape': list(model.input_shape),
            'layers': [s.to_dict() for s in model.specs]}
    entries = list(model.masked_parameters())
    parameters = struct.pack('<I', len(entries))
    for name, param, mask in entries:
        parameters += _encode_tensor(name, param, mask, sparse)

    blob = MAGIC + struct.pack('<I', VERSION)
    blob += _section(b'SPEC', yaml.safe_dump(spec, sort_keys=False).encode('utf-8'))
    blob += _section(b'CONF', yaml.safe_dump(config or {}, sort_keys=False).encode('utf-8'))
    blob += _section(b'TRAC', yaml.safe_dump(trace or [], sort_keys=False).encode('utf-8'))
    blob += _section(b'PARM', parameters)
    blob += _section(b'END ', b'')

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = path + '.tmp'
    with open(tmp_path, 'wb') as file:
        file.write(blob)
    os.replace(tmp_path, path)


class _Reader(object):
    def __init__(self, buf: bytes, where: str):
        self.buf = buf
        self.pos = 0
        self.where = where

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError('{0}: truncated, needed {1} bytes at offset {2}, only {3} left'
                                  .format(self.where, n, self.pos, len(self.buf) - self.pos))
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_parameters(payload: bytes, model: Model):
    reader = _Reader(payload, 'PARM section')
    count, = reader.unpack('<I')
    entries = {name: (param, mask) for name, param, mask in model.masked_parameters()}
    if count != len(entries):
        raise CheckpointError('PARM section holds {0} tensors, model has {1}'.format(count, len(entries)))
    for _ in range(count):
        name_len, = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        if name not in entries:
            raise CheckpointError('Unknown parameter {0}'.format(name))
        param, mask = entries[name]
        ndim, = reader.unpack('<B')
        shape = reader.unpack('<' + 'I' * ndim)
        if tuple(shape) != tuple(param.shape):
            raise CheckpointError('{0}: stored shape {1}, expected {2}'.format(name, shape, tuple(param.shape)))
        encoding, = reader.unpack('<B')
        size = int(np.prod(shape))
        keep = np.unpackbits(np.frombuffer(reader.take((size + 7) // 8), dtype=np.uint8),
                             count=size).astype(bool)
        if encoding == SPARSE:
            values = np.zeros(size, dtype='<f8')
            values[keep] = np.frombuffer(reader.take(8 * int(keep.sum())), dtype='<f8')
        elif encoding == DENSE:
            values = np.frombuffer(reader.take(8 * size), dtype='<f8').copy()
        else:
            raise CheckpointError('{0}: unknown encoding {1}'.format(name, encoding))
        with torch.no_grad():
            param.data.copy_(torch.from_numpy(values.astype(np.float64)).reshape(shape))
            mask.copy_(torch.from_numpy(keep.astype(np.float64)).reshape(shape))
    if reader.pos != len(payload):
        raise CheckpointError('PARM section has {0} trailing bytes'.format(len(payload) - reader.pos))


def read_checkpoint(path: str) -> Checkpoint:
    """
    Reads a checkpoint written by save_checkpoint. Any inconsistency raises
    a CheckpointError; no partial model is returned.
    """
    with open(path, 'rb') as file:
        buf = file.read()
    reader = _Reader(buf, path)
    magic, version = reader.unpack('<4sI')
    if magic != MAGIC:
        raise CheckpointError('{0}: not a checkpoint (magic {1!r})'.format(path, magic))
    if version != VERSION:
        raise CheckpointError('{0}: format version {1}, expected {2}'.format(path, version, VERSION))

    sections = {}
    while True:
        tag, length, crc = reader.unpack('<4sQI')
        payload = reader.take(length)
        if zlib.crc32(payload) != crc:
            raise CheckpointError('{0}: corrupt {1} section'.format(path, tag.decode('ascii', 'replace')))
        if tag == b'END ':
            break
        sections[tag] = payload
    for tag in (b'SPEC', b'CONF', b'TRAC', b'PARM'):
        if tag not in sections:
            raise CheckpointError('{0}: missing {1} section'.format(path, tag.decode('ascii')))

    try:
        spec = yaml.safe_load(sections[b'SPEC'].decode('utf-8'))
        config = yaml.safe_load(sections[b'CONF'].decode('utf-8')) or {}
        trace = yaml.safe_load(sections[b'TRAC'].decode('utf-8')) or []
        specs = [LayerSpec.from_dict(d) for d in spec['layers']]
        model = build_from_specs(spec['arch'], specs, tuple(spec['input_shape']))
    except (yaml.YAMLError, KeyError, TypeError, UnicodeDecodeError, ConfigError, ShapeError) as err:
        raise CheckpointError('{0}: malformed metadata ({1})'.format(path, err))
    _decode_parameters(sections[b'PARM'], model)
    return Checkpoint(model, config, trace, version)


def load_checkpoint(path: str) -> Model:
    return read_checkpoint(path).model
