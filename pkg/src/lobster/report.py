"""
Sparsity, FLOPs, the per-epoch metrics sink and its tensorboard mirror.
"""
import os
import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from collections import OrderedDict
from typing import Dict, List, Optional, Tuple
import numpy as np
import yaml
from torch.utils.tensorboard import SummaryWriter
from src.lobster.utils.errors import LobsterError
from src.lobster.utils.networks import Model

METRICS_VERSION = 1
METRICS_HEADER = '# lobster-metrics {0}'.format(METRICS_VERSION)
BASE_COLUMNS = ['epoch', 'stage', 'train_loss', 'val_loss', 'val_top1', 'test_top1',
                'sparsity', 'threshold', 'flops', 'epoch_time']
FLOPS_CONVENTION = ('dense: 2*nnz(W) + alive biases; '
                    'conv: (2*nnz(K) + alive biases) * output positions; '
                    'pooling and activations excluded')


class ReportError(LobsterError):
    pass


def layer_counts(model: Model) -> Dict[str, Tuple[int, int]]:
    """
    :return: (total, alive) parameter counts per parametrized layer
    """
    counts = OrderedDict()
    for name in model.parametrized_layers():
        counts[name] = (0, 0)
    for param_name, param, mask in model.masked_parameters():
        layer = param_name.split('.')[0]
        total, alive = counts[layer]
        counts[layer] = (total + param.numel(), alive + int(mask.sum()))
    return counts


def sparsity(model: Model) -> Tuple[float, Dict[str, float]]:
    """
    Percentage of pruned parameters, globally and per named layer.
    """
    counts = layer_counts(model)
    total = sum(t for t, _ in counts.values())
    alive = sum(a for _, a in counts.values())
    per_layer = OrderedDict((name, 100.0 * (t - a) / t) for name, (t, a) in counts.items())
    return 100.0 * (total - alive) / total, per_layer


def alive_units(model: Model) -> Dict[str, Tuple[int, int]]:
    """
    Output units (conv filters, dense neurons) with at least one alive incoming weight.
    :return: (alive, total) per parametrized layer
    """
    units = OrderedDict()
    for name in model.parametrized_layers():
        layer = getattr(model, name)
        mask = layer.weight_mask
        if layer.spec.kind == 'conv':
            alive = mask.reshape(mask.shape[0], -1).sum(dim=1) > 0
        else:
            alive = mask.sum(dim=0) > 0
        units[name] = (int(alive.sum()), int(alive.numel()))
    return units


def layer_flops(model: Model) -> Dict[str, int]:
    flops = OrderedDict()
    for name in model.parametrized_layers():
        layer = getattr(model, name)
        nnz = int(layer.weight_mask.sum())
        biases = int(layer.bias_mask.sum())
        if layer.spec.kind == 'conv':
            out = model.output_shapes[name]
            positions = out[1] * out[2]
            flops[name] = (2 * nnz + biases) * positions
        else:
            flops[name] = 2 * nnz + biases
    return flops


def flops(model: Model) -> int:
    """
    Inference operation estimate, see FLOPS_CONVENTION.
    """
    return sum(layer_flops(model).values())


###############################################################################
# METRICS                                                                     #
###############################################################################
@dataclass
class MetricsRow:
    epoch: int
    stage: str
    train_loss: Optional[float] = None
    val_loss: Optional[float] = None
    val_top1: Optional[float] = None
    test_top1: Optional[float] = None
    sparsity: float = 0.0
    threshold: Optional[float] = None
    flops: int = 0
    epoch_time: Optional[float] = None
    layer_sparsity: Dict[str, float] = field(default_factory=OrderedDict)

    def to_record(self) -> list:
        values = [getattr(self, c) for c in BASE_COLUMNS] + list(self.layer_sparsity.values())
        return ['' if v is None else v for v in values]

    def to_json(self) -> dict:
        d = OrderedDict((c, getattr(self, c)) for c in BASE_COLUMNS)
        d['layer_sparsity'] = dict(self.layer_sparsity)
        return d

    @classmethod
    def from_record(cls, columns: List[str], record: List[str]) -> 'MetricsRow':
        values = dict(zip(columns, record))

        def num(key, kind=float):
            return kind(values[key]) if values.get(key, '') != '' else None

        layers = OrderedDict((c[len('sparsity_'):], float(values[c]))
                             for c in columns if c.startswith('sparsity_'))
        return cls(epoch=int(values['epoch']),
                   stage=values['stage'],
                   train_loss=num('train_loss'),
                   val_loss=num('val_loss'),
                   val_top1=num('val_top1'),
                   test_top1=num('test_top1'),
                   sparsity=float(values['sparsity']),
                   threshold=num('threshold'),
                   flops=int(values['flops']),
                   epoch_time=num('epoch_time'),
                   layer_sparsity=layers)


def metrics_row(model: Model, epoch: int, stage: str, **kwargs) -> MetricsRow:
    overall, per_layer = sparsity(model)
    return MetricsRow(epoch=epoch, stage=stage, sparsity=overall, flops=flops(model),
                      layer_sparsity=per_layer, **kwargs)


class MetricsWriter(object):
    """
    CSV sink, one row per epoch and per pruning stage, flushed on every
    write. A JSON mirror is written when the sink is closed.
    """
    def __init__(self, directory: str, layer_names: List[str]):
        os.makedirs(directory, exist_ok=True)
        self.csv_path = os.path.join(directory, 'metrics.csv')
        self.json_path = os.path.join(directory, 'metrics.json')
        self.columns = BASE_COLUMNS + ['sparsity_' + name for name in layer_names]
        self.rows: List[MetricsRow] = []
        self.file = open(self.csv_path, 'w', newline='')
        self.file.write(METRICS_HEADER + '\n')
        self.writer = csv.writer(self.file)
        self.writer.writerow(self.columns)
        self.file.flush()

    def write(self, row: MetricsRow):
        self.writer.writerow(row.to_record())
        self.file.flush()
        self.rows.append(row)

    def close(self):
        self.file.close()
        write_json(self.json_path, self.columns, self.rows)


class TensorboardLog(object):
    """
    Tensorboard mirror of the metrics rows. Learn rows land under `learn/`,
    pruning stage rows under `prune/`, both indexed by the global epoch.
    """
    def __init__(self, directory: str, run_name: str, config: Optional[dict] = None):
        """
        :param directory: SUMMARY_PATH
        :param run_name: One subdirectory per run, one below it per start time
        :param config: UPPERCASE config dict, stored as a text panel
        """
        started = datetime.now().strftime('%Y-%m-%d_%H-%M-%S')
        self.directory = os.path.join(directory, run_name, started)
        self.writer = SummaryWriter(log_dir=self.directory)
        if config is not None:
            self.writer.add_text('config', yaml.safe_dump(config, sort_keys=False).replace('\n', '  \n'))

    def write(self, row: MetricsRow, open_fraction: float = math.nan):
        group = row.stage + '/'
        scalars = OrderedDict([('val_loss', row.val_loss),
                               ('sparsity', row.sparsity),
                               ('train_loss', row.train_loss),
                               ('threshold', row.threshold)])
        if row.stage == 'learn':
            scalars['open_gate_fraction'] = open_fraction
        for name, value in scalars.items():
            if value is not None:
                self.writer.add_scalar(group + name, value, row.epoch)
        self.writer.flush()

    def close(self):
        self.writer.close()


def write_json(path: str, columns: List[str], rows: List[MetricsRow]):
    payload = OrderedDict([('version', METRICS_VERSION),
                           ('flops_convention', FLOPS_CONVENTION),
                           ('columns', columns),
                           ('rows', [r.to_json() for r in rows])])
    with open(path, 'w') as file:
        json.dump(payload, file, indent=2)


def read_metrics(path: str) -> Tuple[List[str], List[MetricsRow]]:
    """
    Parses a metrics CSV; a truncated trailing line of a killed run is dropped.
    """
    with open(path, 'r', newline='') as file:
        lines = file.read().splitlines()
    if not lines or not lines[0].startswith('# lobster-metrics'):
        raise ReportError('{0} is not a metrics file'.format(path))
    version = int(lines[0].split()[-1])
    if version != METRICS_VERSION:
        raise ReportError('{0}: metrics version {1}, expected {2}'.format(path, version, METRICS_VERSION))
    records = list(csv.reader(lines[1:]))
    if not records:
        raise ReportError('{0} has no header'.format(path))
    columns = records[0]
    rows = []
    for record in records[1:]:
        if len(record) != len(columns):
            break
        rows.append(MetricsRow.from_record(columns, record))
    return columns, rows


def layer_table(model: Model) -> List[OrderedDict]:
    counts = layer_counts(model)
    units = alive_units(model)
    per_flops = layer_flops(model)
    table = []
    for name, (total, alive) in counts.items():
        table.append(OrderedDict([('layer', name),
                                  ('params', total),
                                  ('alive', alive),
                                  ('sparsity', 100.0 * (total - alive) / total),
                                  ('survival', 100.0 * alive / total),
                                  ('alive_units', units[name][0]),
                                  ('units', units[name][1]),
                                  ('flops', per_flops[name])]))
    return table


def summarize(rows: List[MetricsRow], model: Model) -> OrderedDict:
    """
    Run summary whose totals come from the model masks. The last logged
    sparsity must agree with them.
    """
    if not rows:
        raise ReportError('No metrics rows to summarize')
    overall, _ = sparsity(model)
    last = rows[-1]
    if not np.isclose(last.sparsity, overall, rtol=0.0, atol=1e-9):
        raise ReportError('Logged sparsity {0} disagrees with checkpoint masks ({1})'.format(last.sparsity, overall))
    prune_rows = [r for r in rows if r.stage == 'prune']
    return OrderedDict([('version', METRICS_VERSION),
                        ('arch', model.arch),
                        ('epochs', sum(1 for r in rows if r.stage == 'learn')),
                        ('pruning_stages', len(prune_rows)),
                        ('parameters', model.num_parameters()),
                        ('alive', model.num_alive()),
                        ('sparsity', overall),
                        ('final_val_loss', last.val_loss),
                        ('final_val_top1', last.val_top1),
                        ('test_top1', last.test_top1),
                        ('flops', flops(model)),
                        ('flops_convention', FLOPS_CONVENTION),
                        ('layers', layer_table(model))])


def curve(rows: List[MetricsRow]) -> List[OrderedDict]:
    """
    Error-vs-sparsity points, one per pruning stage.
    """
    return [OrderedDict([('epoch', r.epoch), ('sparsity', r.sparsity),
                         ('val_top1', r.val_top1), ('flops', r.flops)])
            for r in rows if r.stage == 'prune']


def write_table(path: str, table: List[OrderedDict]):
    with open(path, 'w', newline='') as file:
        if not table:
            return
        writer = csv.DictWriter(file, fieldnames=list(table[0].keys()))
        writer.writeheader()
        writer.writerows(table)


def print_layer_table(table: List[OrderedDict]):
    print('{0:<8} {1:>9} {2:>9} {3:>9} {4:>9} {5:>11} {6:>12}'.format(
        'Layer', 'Params', 'Alive', 'Sparsity', 'Survival', 'Units', 'FLOPs'))
    for r in table:
        print('{0:<8} {1:>9} {2:>9} {3:>8.2f}% {4:>8.2f}% {5:>5}/{6:<5} {7:>12}'.format(
            r['layer'], r['params'], r['alive'], r['sparsity'], r['survival'],
            r['alive_units'], r['units'], r['flops']))
