"""
Magnitude pruning bounded by validation loss.

The largest threshold T whose pruned model stays within the loss boundary
(1 + TWT) * best_loss is found by bisection on [0, max|w|]; every alive
parameter with |w| < T is then pinned to zero for good.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
import torch
from torch import tensor
from src.lobster.utils.errors import ConfigError, FullyPrunedError, NonFiniteError
from src.lobster.utils.networks import Model, evaluate

SEARCH_BUDGET = 64
RELATIVE_RESOLUTION = 1e-6


@dataclass
class ThresholdSearch:
    """
    Bookkeeping of one bisection run.
    :param lo: Largest threshold known to be admissible
    :param hi: Smallest threshold known (or assumed) to be inadmissible
    :param threshold: Current candidate, the result once the search is done
    :param boundary: Loss boundary L^b
    :param loss: Validation loss of the model pruned at `threshold`
    """
    lo: float
    hi: float
    threshold: float
    boundary: float
    loss: float = math.nan
    iterations: int = 0
    budget_exceeded: bool = False
    trials: List[Tuple[float, int, float]] = field(default_factory=list)


def loss_boundary(best_loss: float, twt: float) -> float:
    """
    :param best_loss: Best validation loss of the learning stage
    :param twt: Relative worsening tolerance, >= 0
    :return: (1 + twt) * best_loss
    """
    if twt < 0:
        raise ConfigError('TWT must be >= 0, got {0}'.format(twt))
    if not math.isfinite(best_loss) or best_loss < 0:
        raise NonFiniteError('Best validation loss must be finite and >= 0, got {0}'.format(best_loss))
    return (1.0 + twt) * best_loss


def alive_magnitudes(model: Model) -> tensor:
    with torch.no_grad():
        parts = [param.detach().abs()[mask == 1] for _, param, mask in model.masked_parameters()]
    return torch.cat(parts)


def init_threshold(model: Model) -> float:
    """
    Mean magnitude of the alive, non-zero parameters.
    """
    mags = alive_magnitudes(model)
    mags = mags[mags > 0]
    if mags.numel() == 0:
        raise FullyPrunedError('Model {0} has no alive non-zero parameter'.format(model.arch))
    return float(mags.mean())


def apply_threshold(model: Model, threshold: float) -> int:
    """
    Pins every alive coordinate with |w| < threshold to zero.
    :return: Number of newly pruned coordinates
    """
    if threshold < 0:
        raise ConfigError('Threshold must be >= 0, got {0}'.format(threshold))
    pruned = 0
    with torch.no_grad():
        for _, param, mask in model.masked_parameters():
            newly = (mask == 1) & (param.data.abs() < threshold)
            pruned += int(newly.sum())
            mask.masked_fill_(newly, 0.0)
            param.data.masked_fill_(mask == 0, 0.0)
    return pruned


def pruned_copy(model: Model, threshold: float) -> Model:
    copy = model.snapshot()
    apply_threshold(copy, threshold)
    return copy


def search_threshold(snapshot: Model,
                     validation,
                     boundary: float,
                     resolution: Optional[float] = None,
                     budget: int = SEARCH_BUDGET,
                     eval_batch_size: int = 1000) -> ThresholdSearch:
    """
    Bisection for the largest threshold whose pruned model has validation
    loss <= boundary. The snapshot itself is never modified.
    :param snapshot: Best model of the learning stage
    :param validation: Validation dataset
    :param boundary: Loss boundary
    :param resolution: Stop when hi - lo drops below it (default 1e-6 * max|w|)
    :param budget: Maximum number of search steps
    :param eval_batch_size: Batch size of the validation passes
    :return: Finished search; `threshold` is the admissible lower end
    """
    mags = alive_magnitudes(snapshot)
    top = float(mags.max()) if mags.numel() else 0.0
    search = ThresholdSearch(lo=0.0, hi=top, threshold=0.0, boundary=boundary)
    if resolution is None:
        resolution = RELATIVE_RESOLUTION * top
    distinct = torch.unique(mags)

    # Nested pruned sets: the pruned count identifies the alive set.
    losses: Dict[int, float] = {}

    def loss_at(t: float) -> float:
        k = int((mags < t).sum())
        if k not in losses:
            try:
                loss, _ = evaluate(pruned_copy(snapshot, t), validation, eval_batch_size)
            except NonFiniteError:
                raise NonFiniteError('Non-finite validation loss at threshold {0}'.format(t))
            losses[k] = loss
        search.trials.append((t, k, losses[k]))
        return losses[k]

    search.loss = loss_at(0.0)
    if search.loss > boundary or top == 0.0:
        return search

    try:
        t = min(max(init_threshold(snapshot), 0.0), top)
    except FullyPrunedError:
        t = top
    hi_tested = False

    while True:
        if search.iterations >= budget:
            search.budget_exceeded = True
            print('Warning: threshold search stopped after {0} steps'.format(budget))
            break
        search.threshold = t
        loss = loss_at(t)
        search.iterations += 1
        if loss <= boundary:
            search.lo = t
        else:
            search.hi = t
            hi_tested = True

        # Alive sets still untested between lo and hi
        between = int(((distinct >= search.lo) & (distinct < search.hi)).sum())
        if between == 0 or (between == 1 and hi_tested) or search.hi - search.lo < resolution:
            break
        t = search.hi if between == 1 else 0.5 * (search.lo + search.hi)

    search.threshold = search.lo
    search.loss = losses[int((mags < search.lo).sum())]
    return search
