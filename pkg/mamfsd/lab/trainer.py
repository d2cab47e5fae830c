"""
MAM-FSD Trainer
Epoch loop, dev evaluation, per-epoch CSV log and best/last checkpoints
"""

import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .base import DataError, derive_rng
from .config import RunConfig, save_config
from .data import SampleRecord, augment, crop_size, load_dataset_info, load_split, read_video
from .distill import LossReport
from .metrics import WerBreakdown, corpus_wer, wer
from .model import MamFsdModel
from .optim import Adam
from .serialization import load_checkpoint, save_checkpoint
from .tensor import scale

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LOG_HEADER = "epoch,lr,loss_total,loss_task,loss_mse_1,loss_mse_2,loss_mse_3,dev_wer"
SHUFFLE_STREAM = -1

# ============================================================================
# EVALUATION
# ============================================================================


@dataclass
class EvalRow:
    id: str
    ref: Tuple[int, ...]
    hyp: List[int]
    breakdown: WerBreakdown
    logprob: float


@dataclass
class EvalResult:
    rows: List[EvalRow] = field(default_factory=list)

    @property
    def pooled(self) -> WerBreakdown:
        return corpus_wer((r.ref, r.hyp) for r in self.rows)


def check_dataset(config: RunConfig, root: PathLike) -> dict:
    """
    Raises:
        DataError: vocabulary or resolution disagree with the run config
    """
    info = load_dataset_info(root)
    vocab = info.get("vocab_size")
    if vocab != config.model.vocab_size:
        raise DataError(f"dataset vocab_size {vocab} != model.vocab_size {config.model.vocab_size}")
    crop = crop_size(int(info.get("resolution", 0)), config.data.crop_ratio)
    if crop != config.model.resolution:
        raise DataError(f"dataset resolution {info.get('resolution')} crops to {crop}, "
                        f"model.resolution is {config.model.resolution}")
    return info


def evaluate(model: MamFsdModel, records: Sequence[SampleRecord], beam: Optional[int] = None,
             progress: bool = False, desc: str = "eval") -> EvalResult:
    """Center-crop decode every record; greedy when ``beam`` is None."""
    if not records:
        raise DataError("nothing to evaluate: the split is empty")
    config = model.config
    result = EvalResult()
    for record in tqdm(records, desc=desc, disable=not progress, leave=False):
        video = augment(read_video(record), "eval", config=config.data, size=config.model.resolution)
        decoded = model.decode(video, beam)
        result.rows.append(EvalRow(record.id, record.label, decoded.labeling,
                                   wer(record.label, decoded.labeling), decoded.logprob))
    return result


# ============================================================================
# TRAINING
# ============================================================================

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    report: LossReport
    dev_wer: float

    def csv_line(self) -> str:
        r = self.report
        values = [r.loss_total, r.loss_task, *r.loss_mse, self.dev_wer]
        return f"{self.epoch},{self.lr:.6g}," + ",".join(f"{v:.6f}" for v in values)


@dataclass
class TrainSummary:
    best_epoch: int
    best_dev_wer: float
    final_dev_wer: float
    epochs: List[EpochRecord]


class Trainer:
    """
    Fixed-seed training run writing into ``out_dir``:
    config.ini, train_log.csv, train.log, best.mfck, last.mfck, summary.json.

    Every random stream is addressed by the run seed: parameters by name,
    the epoch shuffle by (epoch, -1) and augmentation by (epoch, sample index),
    so the log is a pure function of config, data and seed.
    """

    def __init__(self, config: RunConfig, data_dir: PathLike, out_dir: PathLike, seed: int = 0,
                 threads: int = 1, progress: Optional[bool] = None):
        self.config = config
        self.data_dir = Path(data_dir)
        self.out_dir = Path(out_dir)
        self.seed = seed
        self.threads = max(1, threads)
        self.progress = sys.stderr.isatty() if progress is None else progress

        check_dataset(config, self.data_dir)
        self.train_records = load_split(self.data_dir, "train")
        self.dev_records = load_split(self.data_dir, "dev")
        if not self.train_records:
            raise DataError(f"{self.data_dir}: train split is empty")
        if not self.dev_records:
            raise DataError(f"{self.data_dir}: dev split is empty")

        self.model = MamFsdModel(config, seed)
        t = config.train
        self.optimizer = Adam(self.model.parameters(), lr=t.lr, beta1=t.beta1, beta2=t.beta2,
                              eps=t.eps, weight_decay=t.weight_decay)

    def _prepare(self, epoch: int, index: int) -> np.ndarray:
        rng = derive_rng(self.seed, epoch, index)
        return augment(read_video(self.train_records[index]), "train", rng,
                       self.config.data, size=self.config.model.resolution)

    def train_epoch(self, epoch: int, pool: ThreadPoolExecutor) -> LossReport:
        """One pass over the shuffled training split; returns the mean loss report."""
        self.optimizer.lr = self.config.lr_at(epoch)
        order = derive_rng(self.seed, epoch, SHUFFLE_STREAM).permutation(len(self.train_records))
        size = self.config.train.batch_size
        batches = [order[i:i + size] for i in range(0, len(order), size)]
        running = LossReport.zero(self.model.distill_weights.as_tuple())

        for batch in tqdm(batches, desc=f"epoch {epoch}", disable=not self.progress, leave=False):
            videos = list(pool.map(lambda i: self._prepare(epoch, int(i)), batch))
            self.optimizer.zero_grad()
            for index, video in zip(batch, videos):
                loss, report = self.model.loss(video, self.train_records[int(index)].label)
                scale(loss, 1.0 / len(batch)).backward()
                running = running + report
            self.optimizer.step()
        return running.scaled(1.0 / len(order))

    def run(self) -> TrainSummary:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_config(self.config, self.out_dir / "config.ini")
        handler = logging.FileHandler(self.out_dir / "train.log", mode='w', encoding='utf-8')
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger("mamfsd").addHandler(handler)
        try:
            return self._run()
        finally:
            logging.getLogger("mamfsd").removeHandler(handler)
            handler.close()

    def _run(self) -> TrainSummary:
        config = self.config
        logger.info("training %r on %d samples (dev %d), seed %d",
                    self.model, len(self.train_records), len(self.dev_records), self.seed)
        dev_beam = config.decode.beam if config.train.dev_beam else None
        best_epoch, best_wer = 0, float("inf")
        records: List[EpochRecord] = []

        with open(self.out_dir / "train_log.csv", 'w', encoding='utf-8', newline='\n') as log, \
                ThreadPoolExecutor(max_workers=self.threads) as pool:
            log.write(LOG_HEADER + "\n")
            for epoch in range(1, config.train.epochs + 1):
                report = self.train_epoch(epoch, pool)
                dev = evaluate(self.model, self.dev_records, dev_beam, self.progress, "dev").pooled
                record = EpochRecord(epoch, self.optimizer.lr, report, dev.wer)
                records.append(record)
                log.write(record.csv_line() + "\n")
                log.flush()

                checkpoint = self.model.to_checkpoint(self.optimizer)
                save_checkpoint(self.out_dir / "last.mfck", checkpoint)
                if dev.wer < best_wer:
                    best_epoch, best_wer = epoch, dev.wer
                    save_checkpoint(self.out_dir / "best.mfck", checkpoint)
                logger.info("epoch %d lr %.3g loss %.4f (task %.4f) dev WER %.2f%%%s",
                            epoch, record.lr, report.loss_total, report.loss_task, dev.wer,
                            " *" if best_epoch == epoch else "")

        self.model.restore(load_checkpoint(self.out_dir / "best.mfck"))
        final = evaluate(self.model, self.dev_records, config.decode.beam, self.progress, "final").pooled
        logger.info("best epoch %d: dev WER %.2f%% (beam %d)", best_epoch, final.wer, config.decode.beam)
        summary = TrainSummary(best_epoch, best_wer, final.wer, records)
        payload = {
            "seed": self.seed,
            "epochs": config.train.epochs,
            "best_epoch": best_epoch,
            "best_dev_wer": best_wer,
            "final_dev_wer": final.wer,
            "beam": config.decode.beam,
        }
        (self.out_dir / "summary.json").write_text(json.dumps(payload, indent=2) + "\n", encoding='utf-8')
        return summary


def train(config: RunConfig, data_dir: PathLike, out_dir: PathLike, seed: int = 0,
          threads: int = 1, progress: Optional[bool] = None) -> TrainSummary:
    return Trainer(config, data_dir, out_dir, seed, threads, progress).run()
