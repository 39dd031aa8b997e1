import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple
import torch
from tqdm import tqdm
from torch.utils.data import DataLoader, BatchSampler, RandomSampler
from src.lobster.config import TrainConfig
from src.lobster.pruning import loss_boundary, search_threshold, apply_threshold
from src.lobster.regularizer import LobsterSGD, sensitivity_snapshot
from src.lobster.report import MetricsRow, MetricsWriter, TensorboardLog, metrics_row
from src.lobster.utils.data import Splits
from src.lobster.utils.errors import DatasetError
from src.lobster.utils.networks import Model, evaluate
from src.lobster.utils.tensor import backward


@dataclass
class StageState:
    """
    Learning stage bookkeeping.
    :param best_loss: Lowest validation loss seen in this stage
    :param best_model: Snapshot the best loss was measured on
    :param epoch: Epochs run in this stage
    :param plateau: Consecutive epochs without improvement
    """
    best_loss: float
    best_model: Model
    epoch: int = 0
    plateau: int = 0
    budget_exhausted: bool = False
    losses: List[float] = field(default_factory=list)


@dataclass
class StageRecord:
    stage: int
    epoch: int
    best_loss: float
    boundary: float
    threshold: float
    pruned: int
    alive: int
    val_loss: float
    search_steps: int
    search_budget_exceeded: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunResult:
    """
    Final model, one learn row per epoch executed, every emitted row
    (learn and prune) and the pruning stage trace.
    """
    model: Model
    log: List[MetricsRow] = field(default_factory=list)
    rows: List[MetricsRow] = field(default_factory=list)
    stages: List[StageRecord] = field(default_factory=list)
    epochs: int = 0
    budget_exhausted: bool = False
    test_loss: Optional[float] = None
    test_top1: Optional[float] = None


class Trainer(object):
    """
    Alternates learning stages (regularized SGD until the validation loss
    plateaus for PWE epochs) with pruning stages, until a pruning stage
    removes no parameter or the epoch budget is spent.
    """

    def __init__(self, model: Model, data: Splits, cfg: TrainConfig, sink: Optional[MetricsWriter] = None):
        """
        :param model: Model to train, modified in place
        :param data: Train, validation and test splits
        :param cfg: Run configuration
        :param sink: Optional metrics writer
        """
        if len(data.val) == 0:
            raise DatasetError('Training needs a non-empty validation split')
        self.model = model
        self.data = data
        self.cfg = cfg
        self.sink = sink
        self.summary = None
        self.optimizer = LobsterSGD(model, cfg.regularizer_config())

        self.generator = torch.Generator().manual_seed(cfg.seed)
        sampler = BatchSampler(RandomSampler(data.train, generator=self.generator),
                               batch_size=cfg.batch_size,
                               drop_last=False)
        self.data_loader = DataLoader(dataset=data.train, sampler=sampler, batch_size=None)

        self.epochs_done = 0
        self.log: List[MetricsRow] = []
        self.stages: List[StageRecord] = []
        self.open_fraction = math.nan

    def add_summary_writer(self, summary: TensorboardLog):
        self.summary = summary

    def emit(self, row: MetricsRow):
        self.log.append(row)
        if self.sink is not None:
            self.sink.write(row)
        if self.summary is not None:
            self.summary.write(row, self.open_fraction)

    def run_epoch(self) -> float:
        """
        One pass over the training set.
        :return: Mean minibatch loss
        """
        self.model.train()
        total, batches = 0.0, 0
        grads = None
        for batch in tqdm(self.data_loader, leave=False, disable=not self.cfg.verbose):
            with self.model.tape() as tape:
                loss = self.model.loss(batch['image'], batch['label'])
            grads = backward(tape, loss)
            self.optimizer.step(grads)
            total += loss.item()
            batches += 1
        if grads is not None and self.summary is not None:
            snapshot = sensitivity_snapshot(self.model, grads, self.optimizer.cfg)
            self.open_fraction = snapshot.open_fraction(self.model.masks())
        return total / max(batches, 1)

    def validate(self) -> Tuple[float, float]:
        return evaluate(self.model, self.data.val, self.cfg.eval_batch_size)

    def init_state(self, loss: Optional[float] = None) -> StageState:
        """
        Fresh stage state with the current model as best snapshot.
        :param loss: Its validation loss, measured if not given
        """
        if loss is None:
            loss, _ = self.validate()
        return StageState(best_loss=loss, best_model=self.model.snapshot())

    def learning_stage(self, state: StageState) -> Model:
        """
        Trains until the validation loss has not improved for PWE epochs.
        :param state: Stage state, updated in place
        :return: Best snapshot of the stage
        """
        while True:
            if self.epochs_done >= self.cfg.max_epochs:
                state.budget_exhausted = True
                print('Epoch budget of {0} exhausted.'.format(self.cfg.max_epochs))
                return state.best_model

            start_time = time.time()
            train_loss = self.run_epoch()
            val_loss, val_top1 = self.validate()
            self.epochs_done += 1
            state.epoch += 1
            state.losses.append(val_loss)

            if val_loss < state.best_loss:
                state.best_model = self.model.snapshot()
                state.best_loss = val_loss
                state.plateau = 0
            else:
                state.plateau += 1

            row = metrics_row(self.model, self.epochs_done, 'learn',
                              train_loss=train_loss,
                              val_loss=val_loss,
                              val_top1=val_top1,
                              epoch_time=time.time() - start_time)
            self.emit(row)
            if self.cfg.verbose:
                print('Ep. {0:>4}; {1:6.4f} train loss; {2:6.4f} val. loss; {3:5.2f}% val. error; '
                      '{4:6.2f}% sparsity; plateau {5}/{6}'
                      .format(self.epochs_done, train_loss, val_loss, 100 * val_top1,
                              row.sparsity, state.plateau, self.cfg.pwe))

            if state.plateau >= self.cfg.pwe:
                return state.best_model

    def pruning_stage(self, state: StageState) -> Tuple[Model, int, MetricsRow]:
        """
        Prunes the stage's best snapshot at the largest threshold within the
        loss boundary and continues from it.
        :param state: Finished learning stage state
        :return: Pruned model, number of newly pruned parameters, its metrics row
        """
        boundary = loss_boundary(state.best_loss, self.cfg.twt)
        search = search_threshold(state.best_model,
                                  self.data.val,
                                  boundary,
                                  resolution=self.cfg.search_resolution,
                                  budget=self.cfg.search_budget,
                                  eval_batch_size=self.cfg.eval_batch_size)

        self.model.load_snapshot(state.best_model)
        pruned = apply_threshold(self.model, search.threshold)
        self.optimizer.reset_state()
        val_loss, val_top1 = self.validate()

        record = StageRecord(stage=len(self.stages) + 1,
                             epoch=self.epochs_done,
                             best_loss=state.best_loss,
                             boundary=boundary,
                             threshold=search.threshold,
                             pruned=pruned,
                             alive=self.model.num_alive(),
                             val_loss=val_loss,
                             search_steps=search.iterations,
                             search_budget_exceeded=search.budget_exceeded)
        self.stages.append(record)
        row = metrics_row(self.model, self.epochs_done, 'prune',
                          val_loss=val_loss,
                          val_top1=val_top1,
                          threshold=search.threshold)
        if self.cfg.verbose:
            print('Pruning stage {0}; T={1:.6g}; {2} pruned; {3:6.4f} val. loss (boundary {4:6.4f}); '
                  '{5:6.2f}% sparsity'.format(record.stage, search.threshold, pruned, val_loss,
                                              boundary, row.sparsity))
        return self.model, pruned, row

    def train(self) -> RunResult:
        """
        Runs learning and pruning stages until nothing more gets pruned.
        The test split is evaluated once, at the end.
        """
        print('Start training {0} with {1} parameters.'.format(self.model.arch, self.model.num_parameters()))
        state = self.init_state()
        while True:
            self.learning_stage(state)
            model, pruned, row = self.pruning_stage(state)
            if pruned == 0 or state.budget_exhausted:
                break
            self.emit(row)
            state = self.init_state(row.val_loss)

        result = RunResult(model=model,
                           stages=self.stages,
                           epochs=self.epochs_done,
                           budget_exhausted=state.budget_exhausted)
        if len(self.data.test):
            result.test_loss, result.test_top1 = evaluate(model, self.data.test, self.cfg.eval_batch_size)
            row.test_top1 = result.test_top1
        self.emit(row)
        result.rows = self.log
        result.log = [r for r in self.log if r.stage == 'learn']
        print('Finished after {0} epochs; {1:.2f}% sparsity'.format(self.epochs_done, row.sparsity)
              + ('; {0:.2f}% test error.'.format(100 * result.test_top1) if result.test_top1 is not None else '.'))
        return result
