from dataclasses import dataclass, fields, asdict, replace
from typing import Optional
import yaml
from src.lobster.regularizer import RegularizerConfig
from src.lobster.utils.errors import ConfigError

ARCHS = ('lenet300', 'lenet5', 'mlp')
DATASETS = ('mnist', 'fashion-mnist', 'synthetic')


@dataclass(frozen=True)
class TrainConfig:
    """
    All parameters of a run. Field names map to the UPPERCASE keys of config.yml.
    """
    arch: str = 'lenet300'
    dataset: str = 'mnist'
    data_path: str = 'data'
    output_path: str = 'runs'
    summary_path: str = ''
    seed: int = 0
    val_size: int = 5000
    regularizer: str = 'LOBSTER'
    learning_rate: float = 0.1
    lam: float = 1e-4
    momentum: float = 0.0
    coupled_decay: bool = False
    pwe: int = 20
    twt: float = 0.05
    batch_size: int = 100
    eval_batch_size: int = 1000
    max_epochs: int = 3000
    search_budget: int = 64
    search_resolution: Optional[float] = None
    synthetic_samples: int = 100
    synthetic_separation: float = 10.0
    synthetic_support: int = 0
    init_checkpoint: str = ''
    verbose: bool = True

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError('ARCH must be one of {0}, got {1}'.format(ARCHS, self.arch))
        if self.dataset not in DATASETS:
            raise ConfigError('DATASET must be one of {0}, got {1}'.format(DATASETS, self.dataset))
        if self.pwe < 1:
            raise ConfigError('PWE must be >= 1, got {0}'.format(self.pwe))
        if self.twt < 0:
            raise ConfigError('TWT must be >= 0, got {0}'.format(self.twt))
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError('Batch sizes must be >= 1')
        if self.max_epochs < 0 or self.search_budget < 1 or self.val_size < 0:
            raise ConfigError('MAX_EPOCHS, VAL_SIZE must be >= 0 and SEARCH_BUDGET >= 1')
        if self.synthetic_support < 0 or self.synthetic_support == 1:
            raise ConfigError('SYNTHETIC_SUPPORT must be 0 (all coordinates) or >= 2, got {0}'.format(
                self.synthetic_support))
        self.regularizer_config()

    def regularizer_config(self) -> RegularizerConfig:
        return RegularizerConfig(variant=self.regularizer,
                                 lam=self.lam,
                                 lr=self.learning_rate,
                                 momentum=self.momentum,
                                 coupled=self.coupled_decay)

    def to_dict(self) -> dict:
        """
        Config as written to disc, with UPPERCASE keys.
        """
        return {KEYS_BY_FIELD[k]: v for k, v in asdict(self).items()}

    def override(self, **kwargs) -> 'TrainConfig':
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


KEYS = {
    'ARCH': 'arch',
    'DATASET': 'dataset',
    'DATA_PATH': 'data_path',
    'OUTPUT_PATH': 'output_path',
    'SUMMARY_PATH': 'summary_path',
    'SEED': 'seed',
    'VAL_SIZE': 'val_size',
    'REGULARIZER': 'regularizer',
    'LEARNING_RATE': 'learning_rate',
    'LAMBDA': 'lam',
    'MOMENTUM': 'momentum',
    'COUPLED_DECAY': 'coupled_decay',
    'PWE': 'pwe',
    'TWT': 'twt',
    'BATCH_SIZE': 'batch_size',
    'EVAL_BATCH_SIZE': 'eval_batch_size',
    'MAX_EPOCHS': 'max_epochs',
    'SEARCH_BUDGET': 'search_budget',
    'SEARCH_RESOLUTION': 'search_resolution',
    'SYNTHETIC_SAMPLES': 'synthetic_samples',
    'SYNTHETIC_SEPARATION': 'synthetic_separation',
    'SYNTHETIC_SUPPORT': 'synthetic_support',
    'INIT_CHECKPOINT': 'init_checkpoint',
    'VERBOSE': 'verbose',
}
KEYS_BY_FIELD = {v: k for k, v in KEYS.items()}


def _coerce(key: str, value, kind, optional: bool = False):
    if value is None:
        if optional:
            return None
        if kind is str:
            return ''
        raise ConfigError('Missing value for {0}'.format(key))
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            raise ValueError
        if kind is int:
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError('Malformed value for {0}: {1!r}'.format(key, value))


def from_dict(cfg: dict, base: Optional[TrainConfig] = None) -> TrainConfig:
    """
    Builds a TrainConfig from a dict with UPPERCASE keys.
    :param cfg: Parameters, e.g. parsed from config.yml
    :param base: Config whose values are overridden
    """
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for key, value in cfg.items():
        if key not in KEYS:
            raise ConfigError('Unknown config key {0}'.format(key))
        name = KEYS[key]
        kind = types[name]
        optional = kind == Optional[float]
        values[name] = _coerce(key, value, float if optional else kind, optional)
    return replace(base or TrainConfig(), **values)


def load_config(path: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """
    Loads a flat YAML file of KEY: value lines.
    """
    with open(path, 'r') as ymlfile:
        try:
            cfg = yaml.load(ymlfile, Loader=yaml.FullLoader)
        except yaml.YAMLError as err:
            raise ConfigError('Malformed config file {0}: {1}'.format(path, err))
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError('Config file {0} must hold KEY: value lines'.format(path))
    return from_dict(cfg, base)
