import os
import sys
import json
import argparse
from typing import List, Optional
import yaml
from src.lobster.config import ARCHS, DATASETS, TrainConfig, load_config, from_dict
from src.lobster.regularizer import VARIANTS
from src.lobster.report import MetricsWriter, TensorboardLog, FLOPS_CONVENTION, sparsity, flops, read_metrics, summarize, \
    curve, layer_table, write_table, print_layer_table
from src.lobster.trainer import Trainer
from src.lobster.utils.checkpoint import save_checkpoint, read_checkpoint
from src.lobster.utils.data import load_dataset
from src.lobster.utils.errors import LobsterError, ConfigError
from src.lobster.utils.networks import Model, build_model, evaluate

CHECKPOINT_FILE = 'model.lobs'
METRICS_FILE = 'metrics.csv'
CONFIG_FILE = 'config.yml'


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='lobster',
                                     description='Sensitivity-regularized training with loss-bounded pruning')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    train = commands.add_parser('train', help='Run learning and pruning stages, write checkpoint and metrics')
    train.add_argument('--config', type=str, help='YAML file of KEY: value lines')
    train.add_argument('--data-dir', dest='data_path', type=str, help='Directory holding <dataset>/ IDX files')
    train.add_argument('--arch', choices=ARCHS)
    train.add_argument('--dataset', choices=DATASETS)
    train.add_argument('--seed', type=int)
    train.add_argument('--output-dir', type=str, help='Run directory (default OUTPUT_PATH/<arch>_<dataset>_seed<seed>)')
    train.add_argument('--regularizer', choices=VARIANTS)
    train.add_argument('--lr', dest='learning_rate', type=float)
    train.add_argument('--lam', type=float)
    train.add_argument('--momentum', type=float)
    train.add_argument('--pwe', type=int)
    train.add_argument('--twt', type=float)
    train.add_argument('--batch-size', type=int)
    train.add_argument('--val-size', type=int)
    train.add_argument('--max-epochs', type=int)
    train.add_argument('--summary-path', type=str, help='Enables tensorboard logging into this directory')
    train.add_argument('--init-checkpoint', type=str, help='Start from a saved model instead of a fresh one')
    train.add_argument('--quiet', dest='verbose', action='store_const', const=False)
    train.set_defaults(func=cmd_train)

    evaluate_cmd = commands.add_parser('eval', help='Loss, top-1, sparsity and FLOPs of a checkpoint')
    evaluate_cmd.add_argument('--checkpoint', type=str, required=True)
    evaluate_cmd.add_argument('--data-dir', dest='data_path', type=str)
    evaluate_cmd.add_argument('--dataset', choices=DATASETS)
    evaluate_cmd.add_argument('--split', choices=('val', 'test'), default='val')
    evaluate_cmd.set_defaults(func=cmd_eval)

    report = commands.add_parser('report', help='Summary, per-layer table and error-vs-sparsity curve of a run')
    report.add_argument('--run-dir', type=str, default='.')
    report.add_argument('--metrics', type=str, help='Metrics CSV (default <run-dir>/{0})'.format(METRICS_FILE))
    report.add_argument('--checkpoint', type=str, help='Checkpoint (default <run-dir>/{0})'.format(CHECKPOINT_FILE))
    report.add_argument('--output-dir', type=str, help='Where summary and curve files go (default <run-dir>)')
    report.set_defaults(func=cmd_report)
    return parser


def run_name(cfg: TrainConfig) -> str:
    return '{0}_{1}_seed{2}'.format(cfg.arch, cfg.dataset, cfg.seed)


def train_config(args: argparse.Namespace) -> TrainConfig:
    """
    Config file values, overridden by every flag given on the command line.
    """
    cfg = TrainConfig()
    if args.config:
        if not os.path.isfile(args.config):
            raise ConfigError('Config file {0} not found'.format(args.config))
        cfg = load_config(args.config)
    return cfg.override(arch=args.arch,
                        dataset=args.dataset,
                        data_path=args.data_path,
                        seed=args.seed,
                        regularizer=args.regularizer,
                        learning_rate=args.learning_rate,
                        lam=args.lam,
                        momentum=args.momentum,
                        pwe=args.pwe,
                        twt=args.twt,
                        batch_size=args.batch_size,
                        val_size=args.val_size,
                        max_epochs=args.max_epochs,
                        summary_path=args.summary_path,
                        init_checkpoint=args.init_checkpoint,
                        verbose=args.verbose)


def create_model(cfg: TrainConfig, input_dim: int) -> Model:
    if cfg.init_checkpoint:
        print('Loading initial model from {0}'.format(cfg.init_checkpoint))
        model = read_checkpoint(cfg.init_checkpoint).model
        if model.arch != cfg.arch:
            raise ConfigError('Checkpoint holds a {0} model, config asks for {1}'.format(model.arch, cfg.arch))
        return model
    return build_model(cfg.arch, cfg.seed, input_dim=input_dim)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = train_config(args)
    run_dir = args.output_dir or os.path.join(cfg.output_path, run_name(cfg))
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, CONFIG_FILE), 'w') as ymlfile:
        yaml.safe_dump(cfg.to_dict(), ymlfile, sort_keys=False)

    print('Loading dataset {0}.'.format(cfg.dataset))
    data = load_dataset(cfg.dataset, cfg.data_path, cfg.val_size, cfg.seed,
                        cfg.synthetic_samples, cfg.synthetic_separation, cfg.synthetic_support)
    print('{0} train / {1} val / {2} test samples'.format(len(data.train), len(data.val), len(data.test)))

    model = create_model(cfg, data.train.images[0].numel())
    sink = MetricsWriter(run_dir, model.parametrized_layers())
    trainer = Trainer(model, data, cfg, sink)
    summary = None
    if cfg.summary_path:
        summary = TensorboardLog(cfg.summary_path, run_name(cfg), cfg.to_dict())
        trainer.add_summary_writer(summary)
    try:
        result = trainer.train()
    finally:
        sink.close()
        if summary is not None:
            summary.close()

    save_checkpoint(result.model, os.path.join(run_dir, CHECKPOINT_FILE),
                    config=cfg.to_dict(),
                    trace=[s.to_dict() for s in result.stages])
    if result.budget_exhausted:
        print('Warning: stopped by the epoch budget ({0} epochs)'.format(cfg.max_epochs))
    print('Wrote {0}, {1} to {2}'.format(CHECKPOINT_FILE, METRICS_FILE, run_dir))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = read_checkpoint(args.checkpoint)
    cfg = from_dict(checkpoint.config).override(dataset=args.dataset, data_path=args.data_path)
    data = load_dataset(cfg.dataset, cfg.data_path, cfg.val_size, cfg.seed,
                        cfg.synthetic_samples, cfg.synthetic_separation, cfg.synthetic_support)
    split = data.val if args.split == 'val' else data.test
    loss, top1 = evaluate(checkpoint.model, split, cfg.eval_batch_size)
    overall, per_layer = sparsity(checkpoint.model)

    print('split: {0}'.format(args.split))
    print('loss: {0!r}'.format(loss))
    print('top1_error: {0!r}'.format(top1))
    print('sparsity: {0!r}'.format(overall))
    for name, value in per_layer.items():
        print('sparsity_{0}: {1!r}'.format(name, value))
    print('flops: {0}'.format(flops(checkpoint.model)))
    print('flops_convention: {0}'.format(FLOPS_CONVENTION))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    metrics_path = args.metrics or os.path.join(args.run_dir, METRICS_FILE)
    checkpoint_path = args.checkpoint or os.path.join(args.run_dir, CHECKPOINT_FILE)
    output_dir = args.output_dir or args.run_dir
    os.makedirs(output_dir, exist_ok=True)

    _, rows = read_metrics(metrics_path)
    model = read_checkpoint(checkpoint_path).model
    summary = summarize(rows, model)

    with open(os.path.join(output_dir, 'summary.json'), 'w') as file:
        json.dump(summary, file, indent=2)
    write_table(os.path.join(output_dir, 'summary.csv'), layer_table(model))
    write_table(os.path.join(output_dir, 'curve.csv'), curve(rows))

    print('{0}: {1} epochs, {2} pruning stages, {3:.2f}% sparsity, {4} FLOPs'.format(
        summary['arch'], summary['epochs'], summary['pruning_stages'], summary['sparsity'], summary['flops']))
    print_layer_table(summary['layers'])
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point. Exit status 0 on success, 2 on usage or configuration
    errors, 1 on any other failure.
    """
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print('Error: {0}'.format(err), file=sys.stderr)
        return 2
    except (LobsterError, OSError) as err:
        print('Error: {0}'.format(err), file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
