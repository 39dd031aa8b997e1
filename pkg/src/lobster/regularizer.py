"""
Loss-based sensitivity regularization.

A parameter whose loss gradient is small in magnitude (sensitivity below one)
is shrunk towards zero by a decay term scaled with (1 - sensitivity); a
parameter with sensitivity of one or more receives a plain gradient step.
The ungated L2 rule and plain SGD are provided for ablations.
"""
from dataclasses import dataclass, field, replace
from collections import OrderedDict
from typing import Dict, Optional
import torch
from torch import tensor
from torch.optim import Optimizer
from src.lobster.utils.errors import ConfigError, NonFiniteError
from src.lobster.utils.tensor import GradientSet

VARIANTS = ('LOBSTER', 'L2', 'NONE')


@dataclass(frozen=True)
class RegularizerConfig:
    """
    :param variant: LOBSTER, L2 or NONE
    :param lam: Regularization strength, 0 <= lam < 1
    :param lr: Learning rate, > 0
    :param momentum: Momentum coefficient, 0 <= momentum < 1
    :param coupled: Fold the decay term into the momentum buffer
    """
    variant: str = 'LOBSTER'
    lam: float = 1e-4
    lr: float = 0.1
    momentum: float = 0.0
    coupled: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError('Unknown regularizer {0}, expected one of {1}'.format(self.variant, VARIANTS))
        if not 0.0 <= self.lam < 1.0:
            raise ConfigError('LAMBDA must satisfy 0 <= lambda < 1, got {0}'.format(self.lam))
        if not self.lr > 0.0:
            raise ConfigError('LEARNING_RATE must be positive, got {0}'.format(self.lr))
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError('MOMENTUM must satisfy 0 <= beta < 1, got {0}'.format(self.momentum))


@dataclass
class SensitivitySnapshot:
    sensitivity: Dict[str, tensor] = field(default_factory=OrderedDict)
    gate: Dict[str, tensor] = field(default_factory=OrderedDict)
    equivalent_lr: Dict[str, tensor] = field(default_factory=OrderedDict)

    def open_fraction(self, masks: Optional[Dict[str, tensor]] = None) -> float:
        """
        Share of (alive) coordinates whose decay gate is open.
        """
        open_count, total = 0.0, 0.0
        for name, p in self.gate.items():
            m = masks[name] if masks is not None else torch.ones_like(p)
            open_count += float((p * m).sum())
            total += float(m.sum())
        return open_count / total if total else 0.0


def sensitivity(g: tensor, name: str = 'parameter') -> tensor:
    if not bool(torch.isfinite(g).all()):
        raise NonFiniteError('Non-finite gradient in {0}'.format(name))
    return g.abs()


def gate(s: tensor) -> tensor:
    """
    One-step gate: 1 where sensitivity < 1, 0 where it is >= 1.
    """
    return (s < 1.0).to(s.dtype)


def _pin(t: tensor, mask: Optional[tensor]) -> tensor:
    if mask is None:
        return t
    return t.masked_fill(mask == 0, 0.0)


def regularization_term(w: tensor, g: tensor, cfg: RegularizerConfig) -> tensor:
    """
    Decay displacement before scaling by lambda.
    """
    if cfg.variant == 'LOBSTER':
        s = g.abs()
        return w * (1.0 - s) * gate(s)
    elif cfg.variant == 'L2':
        return w
    return torch.zeros_like(w)


def _update(w: tensor, direction: tensor, g: tensor, cfg: RegularizerConfig,
            mask: Optional[tensor], decay: bool = True) -> tensor:
    new = w - cfg.lr * direction
    if decay and cfg.lam > 0.0:
        if cfg.variant == 'LOBSTER':
            s = g.abs()
            new = torch.where(s < 1.0, new - cfg.lam * w * (1.0 - s), new)
        elif cfg.variant == 'L2':
            new = new - cfg.lam * w
    new = _pin(new, mask)
    if not bool(torch.isfinite(new).all()):
        raise NonFiniteError('Non-finite parameter update')
    return new


def lobster_step(w: tensor, g: tensor, cfg: RegularizerConfig, mask: Optional[tensor] = None) -> tensor:
    """
    w <- w - lr * g - lam * w * (1 - S) * P(S), with S = |g|.
    :param w: Parameters
    :param g: Loss gradient
    :param cfg: Regularizer config (variant is ignored)
    :param mask: Optional keep mask; pruned coordinates stay at zero
    :return: Updated parameters
    """
    g = _pin(g, mask)
    sensitivity(g)
    return _update(w, g, g, replace(cfg, variant='LOBSTER'), mask)


def l2_step(w: tensor, g: tensor, cfg: RegularizerConfig, mask: Optional[tensor] = None) -> tensor:
    """
    w <- w - lr * g - lam * w.
    """
    g = _pin(g, mask)
    sensitivity(g)
    return _update(w, g, g, replace(cfg, variant='L2'), mask)


def sgd_step(w: tensor, g: tensor, cfg: RegularizerConfig, mask: Optional[tensor] = None) -> tensor:
    g = _pin(g, mask)
    sensitivity(g)
    return _update(w, g, g, cfg, mask, decay=False)


STEPS = {
    'LOBSTER': lobster_step,
    'L2': l2_step,
    'NONE': sgd_step,
}


def equivalent_lr(w: tensor, g: tensor, cfg: RegularizerConfig) -> tensor:
    """
    Effective step size lr - sign(g) * lam * w * P(|g|), with sign(0) = 0.
    """
    return cfg.lr - torch.sign(g) * cfg.lam * w * gate(g.abs())


def sensitivity_snapshot(model, grads: GradientSet, cfg: RegularizerConfig) -> SensitivitySnapshot:
    snapshot = SensitivitySnapshot()
    for name, param, mask in model.masked_parameters():
        g = _pin(grads[name], mask)
        s = sensitivity(g, name)
        snapshot.sensitivity[name] = s
        snapshot.gate[name] = gate(s)
        snapshot.equivalent_lr[name] = equivalent_lr(param.detach(), g, cfg)
    return snapshot


class LobsterSGD(Optimizer):
    """
    SGD with optional momentum applying the configured regularizer to every
    masked parameter tensor of a model.

    The momentum buffer accumulates the loss gradient only; the decay term is
    applied to the parameters directly unless `coupled` is set, in which case
    it enters the buffer as (lam / lr) * decay.
    """

    def __init__(self, model, cfg: RegularizerConfig):
        self.cfg = cfg
        self.entries = list(model.masked_parameters())
        params = [p for _, p, _ in self.entries]
        defaults = dict(lr=cfg.lr, lam=cfg.lam, momentum=cfg.momentum)
        super(LobsterSGD, self).__init__(params, defaults)

    def reset_state(self):
        self.state.clear()

    @torch.no_grad()
    def step(self, grads: GradientSet):
        cfg = self.cfg
        for name, p, mask in self.entries:
            g = _pin(grads[name], mask)
            sensitivity(g, name)
            w = p.data

            if cfg.momentum == 0.0:
                if cfg.coupled and cfg.lam > 0.0:
                    direction = g + (cfg.lam / cfg.lr) * regularization_term(w, g, cfg)
                    p.data.copy_(_update(w, direction, g, cfg, mask, decay=False))
                else:
                    p.data.copy_(STEPS[cfg.variant](w, g, cfg, mask))
                continue

            state = self.state[p]
            if 'momentum_buffer' not in state:
                state['momentum_buffer'] = torch.zeros_like(w)
            buf = state['momentum_buffer']
            d_p = g
            if cfg.coupled and cfg.lam > 0.0:
                d_p = g + (cfg.lam / cfg.lr) * regularization_term(w, g, cfg)
            buf.mul_(cfg.momentum).add_(d_p)
            buf.masked_fill_(mask == 0, 0.0)
            p.data.copy_(_update(w, buf, g, cfg, mask, decay=not cfg.coupled))
