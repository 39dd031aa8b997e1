import os
import glob
import pytest
from src.lobster.config import TrainConfig, KEYS, load_config, from_dict
from src.lobster.utils.errors import ConfigError

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def write(tmp_path, text: str) -> str:
    path = tmp_path / 'config.yml'
    path.write_text(text)
    return str(path)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.lam, cfg.pwe, cfg.twt) == (0.1, 1e-4, 20, 0.05)
    assert (cfg.batch_size, cfg.max_epochs, cfg.val_size) == (100, 3000, 5000)
    assert cfg.regularizer == 'LOBSTER' and not cfg.coupled_decay


def test_load_config(tmp_path):
    cfg = load_config(write(tmp_path, 'ARCH: lenet5\nDATASET: fashion-mnist\nTWT: 0.1\nLAMBDA: 0\n'
                                      'SEARCH_RESOLUTION:\nINIT_CHECKPOINT:\nVERBOSE: False\n'))
    assert cfg.arch == 'lenet5' and cfg.dataset == 'fashion-mnist'
    assert cfg.twt == 0.1 and cfg.lam == 0.0 and isinstance(cfg.lam, float)
    assert cfg.search_resolution is None and cfg.init_checkpoint == ''
    assert cfg.verbose is False
    assert cfg.pwe == 20


def test_empty_file_gives_defaults(tmp_path):
    assert load_config(write(tmp_path, '')) == TrainConfig()


@pytest.mark.parametrize('text', [
    'EPOCHS: 10\n',
    'PWE: 2.5\n',
    'PWE: true\n',
    'VERBOSE: 1\n',
    'LEARNING_RATE: fast\n',
    'SEED:\n',
    'PWE: 0\n',
    'TWT: -0.1\n',
    'ARCH: resnet50\n',
    'REGULARIZER: L1\n',
    'LAMBDA: 1.5\n',
    'SYNTHETIC_SUPPORT: 1\n',
    '- ARCH\n- lenet5\n',
    'ARCH: [unclosed\n',
])
def test_malformed_config(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, text))


def test_flags_override_file(tmp_path):
    cfg = load_config(write(tmp_path, 'SEED: 3\nPWE: 7\n'))
    cfg = cfg.override(seed=11, pwe=None, twt=0.2)
    assert (cfg.seed, cfg.pwe, cfg.twt) == (11, 7, 0.2)


def test_to_dict_round_trip():
    cfg = TrainConfig(arch='mlp', dataset='synthetic', seed=4, search_resolution=1e-3, coupled_decay=True)
    d = cfg.to_dict()
    assert set(d) == set(KEYS)
    assert from_dict(d) == cfg


def test_regularizer_config():
    reg = TrainConfig(regularizer='L2', lam=0.01, learning_rate=0.05, momentum=0.9).regularizer_config()
    assert (reg.variant, reg.lam, reg.lr, reg.momentum) == ('L2', 0.01, 0.05, 0.9)


@pytest.mark.parametrize('path', [os.path.join(ROOT, 'config.yml')] + sorted(glob.glob(os.path.join(ROOT, 'configs', '*.yml'))))
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert cfg.arch in ('lenet300', 'lenet5', 'mlp')


def test_experiment_settings():
    desk = load_config(os.path.join(ROOT, 'configs', 'desk_lenet300_mnist.yml'))
    assert (desk.pwe, desk.max_epochs, desk.twt) == (5, 300, 0.05)
    fashion = load_config(os.path.join(ROOT, 'configs', 'lenet5_fashion.yml'))
    assert fashion.twt == 0.1 and fashion.dataset == 'fashion-mnist'
