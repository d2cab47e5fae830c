"""
MAM-FSD Model
Backbone + temporal head, the combined training loss and checkpoint wiring
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .backbone import Backbone, StageFeatures
from .base import ConfigError, DataError, LabModule, NonFiniteError, ShapeError
from .config import RunConfig, load_config
from .ctc import beam_search, ctc_loss, greedy_decode, labeling_logprob
from .distill import DistillWeights, LossReport, self_distill_loss, total_loss
from .optim import Adam
from .serialization import Checkpoint, load_checkpoint, split_moments
from .temporal import TemporalHead, TemporalOutput
from .tensor import Tensor, add, kl_divergence, scale, stop_gradient

logger = logging.getLogger(__name__)

VideoLike = Union[np.ndarray, Tensor]


@dataclass
class Decoded:
    labeling: List[int]
    logprob: float      # exact log P(labeling | video)


class MamFsdModel(LabModule):
    """
    video [T, 3, H, W] -> backbone (MAM gates, D-blocks) -> f_spatial [T, D]
    -> temporal head -> per-step gloss log-probabilities [T', V + 1].

    Parameter names are the backbone's and the head's own, unprefixed.
    """

    DISPLAY_NAME = "MAM-FSD"

    def __init__(self, config: RunConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        self.backbone = Backbone(config.model, config.mam, seed)
        self.head = TemporalHead(config.model.feature_dim, config.model.vocab_size, config.temporal, seed)
        self.distill_weights = DistillWeights(config.distill.alpha, config.distill.beta, config.distill.lam)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield from self.backbone.named_parameters(prefix)
        yield from self.head.named_parameters(prefix)

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def forward(self, video: VideoLike, capture_attention: bool = False) -> Tuple[StageFeatures, TemporalOutput]:
        x = video if isinstance(video, Tensor) else Tensor(video)
        features = self.backbone.extract(x, capture_attention=capture_attention)
        return features, self.head(features.f_spatial)

    def logprobs(self, video: VideoLike) -> np.ndarray:
        return self.forward(video)[1].logprobs.data.astype(np.float64)

    def task_loss(self, out: TemporalOutput, label: Sequence[int]) -> Tensor:
        """ctc_weight * CTC(main) + aux_weight * CTC(aux) + kl_weight * KL(aux || main)."""
        t = self.config.temporal
        terms = []
        if t.ctc_weight > 0:
            terms.append(scale(ctc_loss(out.logprobs, label), t.ctc_weight))
        if t.aux_weight > 0:
            terms.append(scale(ctc_loss(out.aux_logprobs, label), t.aux_weight))
        if t.kl_weight > 0:
            # main branch is the target: only the aux branch is pulled towards it
            terms.append(scale(kl_divergence(out.aux_logprobs, stop_gradient(out.logprobs)), t.kl_weight))
        if not terms:
            raise ConfigError("at least one of temporal.ctc_weight / aux_weight / kl_weight must be positive")
        task = terms[0]
        for term in terms[1:]:
            task = add(task, term)
        return task

    def loss(self, video: VideoLike, label: Sequence[int]) -> Tuple[Tensor, LossReport]:
        """
        Total training loss for one video and its report.

        Distillation is skipped entirely when alpha = beta = lambda = 0, so such a
        run is indistinguishable from one with distillation switched off.

        Raises:
            InfeasibleLabelError: label longer than the output steps allow
            NonFiniteError: a loss term is not finite
        """
        features, out = self.forward(video)
        task = self.task_loss(out, label)
        weights = self.distill_weights
        if weights.enabled:
            distill, terms = self_distill_loss(features, self.backbone, weights)
            total = total_loss(task, distill)
            mse_values = tuple(t.item() for t in terms)
        else:
            if not np.isfinite(task.item()):
                raise NonFiniteError("task loss is not finite")
            total = task
            mse_values = (0.0, 0.0, 0.0)
        report = LossReport(loss_total=total.item(), loss_task=task.item(),
                            loss_mse=mse_values, weights=weights.as_tuple())
        return total, report

    # ------------------------------------------------------------------
    # decoding
    # ------------------------------------------------------------------

    def decode(self, video: VideoLike, beam: Optional[int] = None) -> Decoded:
        """Greedy when ``beam`` is None, prefix beam search otherwise."""
        lp = self.logprobs(video)
        labeling = greedy_decode(lp) if beam is None else beam_search(lp, beam)[0]
        return Decoded(labeling=labeling, logprob=labeling_logprob(lp, labeling))

    def attention_map(self, video: VideoLike, stage: int) -> np.ndarray:
        """Channel-averaged MAM map of ``stage`` as [T, H_i, W_i]."""
        if stage not in self.backbone.mams:
            raise ConfigError(f"stage {stage} has no motor attention block (mam.count={self.config.mam.count})")
        x = video if isinstance(video, Tensor) else Tensor(video)
        features = self.backbone.extract(x, capture_attention=True)
        return features.attention[stage].data.astype(np.float64).mean(axis=0)

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def to_checkpoint(self, optimizer: Optional[Adam] = None) -> Checkpoint:
        checkpoint = Checkpoint(tensors=self.state_dict())
        if optimizer is not None and optimizer.state.step > 0:
            checkpoint.optimizer_step = optimizer.state.step
            moments = OrderedDict()
            for (name, _), m, v in zip(self.named_parameters(), optimizer.state.m, optimizer.state.v):
                moments[f"{name}.m"] = m
                moments[f"{name}.v"] = v
            checkpoint.optimizer_tensors = moments
        return checkpoint

    def restore(self, checkpoint: Checkpoint, optimizer: Optional[Adam] = None) -> None:
        self.load_state_dict(checkpoint.tensors)
        if optimizer is None or checkpoint.optimizer_step is None:
            return
        m, v = split_moments(checkpoint)
        names = [name for name, _ in self.named_parameters()]
        optimizer.state.step = checkpoint.optimizer_step
        optimizer.state.m = [m[n].astype(np.float64) for n in names]
        optimizer.state.v = [v[n].astype(np.float64) for n in names]


def load_model(ckpt: Union[str, Path], config_path: Union[str, Path, None] = None) -> MamFsdModel:
    """Rebuild a model from a checkpoint and the config.ini echoed beside it."""
    ckpt = Path(ckpt)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    config_path = Path(config_path) if config_path else ckpt.parent / "config.ini"
    if not config_path.exists():
        raise ConfigError(f"no config beside checkpoint: {config_path}")
    model = MamFsdModel(load_config(config_path))
    model.restore(load_checkpoint(ckpt))
    logger.info("loaded %r from %s", model, ckpt)
    return model


def check_video(video: np.ndarray, resolution: int) -> None:
    if video.ndim != 4 or video.shape[1] != 3:
        raise ShapeError(f"video must be [T, 3, H, W], got {list(video.shape)}")
    if min(video.shape[2:]) < resolution:
        raise ShapeError(f"video frames {video.shape[2]}x{video.shape[3]} are smaller than {resolution}")
