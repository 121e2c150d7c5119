"""Provides the pretraining loop.

Each step samples a batch of objects, produces two augmented variants of
every cloud and m level-augmented views, runs both encoders and the head
bank, and takes one AdamW step on the overall loss

    overall = lambda_intra * loss_intra + lambda_inter * loss_inter_plus

Every batch is a pure function of (root seed, step), so a run resumed from a
checkpoint sees exactly the batches an uninterrupted run would have seen.

Typical usage example:

    from mmpoint.config import RunConfig
    from mmpoint.trainer import pretrain

    cfg = RunConfig(data="data/synthetic", epochs=2)
    ckpt = pretrain(cfg, out="runs/first")
"""

import csv
import json
import logging
import math
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import torch
from pydantic import BaseModel
from torch import nn

from mmpoint.augment import (
    AugmentationPipeline,
    apply_pipeline,
    augment_point_cloud,
    build_pipelines,
    check_monotone,
    default_catalog,
    distortion_profile,
    probe_set,
)
from mmpoint.checkpoint import load_checkpoint, save_checkpoint
from mmpoint.config import LossConfig, RunConfig
from mmpoint.core import (
    AUGMENT_3D,
    BATCH_ORDER,
    INIT,
    SeedTree,
    array_digest,
    augment_2d_level,
)
from mmpoint.dataset import DatasetHandle
from mmpoint.encoders import ImageEncoder, PointEncoder
from mmpoint.errors import CheckpointError, ConfigError, DatasetError, NonFiniteLossError
from mmpoint.heads import HeadBank
from mmpoint.losses import LossReport, history_header, loss_inter_plus, loss_intra

logger = logging.getLogger(__name__)

RUN_CONFIG = "run-config.json"
RUN_MANIFEST = "manifest.json"
LOSS_HISTORY = "loss-history.csv"
LAST_CHECKPOINT = "last.ckpt"
FINAL_CHECKPOINT = "final.ckpt"
VIEW_CHOICE = "view-choice"


@dataclass(frozen=True)
class Batch:
    """One training batch.

    Attributes:
        indices:      Positions of the objects in the train split, shape (B,).
        points_1:     First augmented variant of every cloud, (B, n, 3).
        points_2:     Second augmented variant of every cloud, (B, n, 3).
        views:        Level-augmented views, (m, B, 1, H, W); views[j] went through T_{j+1}.
        view_indices: Camera index of each sampled view, (B, m).
    """

    indices: np.ndarray
    points_1: torch.Tensor
    points_2: torch.Tensor
    views: torch.Tensor
    view_indices: np.ndarray

    @property
    def size(self) -> int:
        """Return the number of objects in the batch."""
        return int(self.indices.shape[0])

    @property
    def m(self) -> int:
        """Return the number of view levels."""
        return int(self.views.shape[0])

    def digest(self) -> str:
        """Hash the full batch content."""
        return array_digest(
            self.indices, self.points_1, self.points_2, self.views, self.view_indices
        )


def make_batch(
    dataset: DatasetHandle,
    cfg: RunConfig,
    indices: np.ndarray,
    tree: SeedTree,
    pipelines: list[AugmentationPipeline] | None = None,
) -> Batch:
    """Assemble a batch from train-split objects.

    For every object: two variants from `augment_point_cloud`, and m distinct
    views sampled without replacement, the j-th of which goes through the
    level-j pipeline.

    Args:
        dataset:   The dataset to draw from.
        cfg:       The run config (m, point augmentation, toggles).
        indices:   Positions of the objects in the train split.
        tree:      Seed tree for this batch; each object draws from its own named streams.
        pipelines: (Optional) Pre-built pipelines, one per level.
    """
    if cfg.m > dataset.n_views:
        raise ConfigError([f"m={cfg.m} exceeds the {dataset.n_views} views available per object"])
    pipelines = pipelines or build_pipelines(cfg.m, strategy=cfg.toggles.aug_strategy)

    firsts, seconds, views, chosen = [], [], [], []
    for b, i in enumerate(indices):
        item = f"item-{b}"
        cloud = dataset.point_cloud("train", int(i))
        p1, p2 = augment_point_cloud(cloud, tree.child(AUGMENT_3D).stream(item), cfg.point_aug)
        firsts.append(p1.points)
        seconds.append(p2.points)

        picks = tree.child(VIEW_CHOICE).stream(item).choice(dataset.n_views, cfg.m, replace=False)
        images = dataset.view_images("train", int(i), picks.tolist())
        levels = []
        for j, pipeline in enumerate(pipelines):
            img = torch.from_numpy(np.ascontiguousarray(images[j], dtype=np.float32))[None]
            rng = tree.child(augment_2d_level(j + 1)).stream(item)
            levels.append(apply_pipeline(img, pipeline, rng))
        views.append(torch.stack(levels))
        chosen.append(picks)

    return Batch(
        indices=np.asarray(indices, dtype=np.int64),
        points_1=torch.from_numpy(np.stack(firsts).astype(np.float32)),
        points_2=torch.from_numpy(np.stack(seconds).astype(np.float32)),
        views=torch.stack(views, dim=1),
        view_indices=np.stack(chosen).astype(np.int64),
    )


class MMPointModel(nn.Module):
    """Both encoders and the head bank."""

    def __init__(self, cfg: RunConfig):
        """Construct the model described by a run config."""
        super().__init__()
        self.point_encoder = PointEncoder(cfg.encoder)
        self.image_encoder = ImageEncoder(cfg.encoder)
        self.heads = HeadBank(
            cfg.projection,
            point_dim=cfg.encoder.point_dim,
            image_dim=cfg.encoder.image_dim,
            toggles=cfg.toggles,
        )

    def point_features(self, points: torch.Tensor) -> torch.Tensor:
        """Return the (B, D) global features of a (B, n, 3) batch."""
        return self.point_encoder(points)[1]

    def objective(
        self, batch: Batch, loss_cfg: LossConfig
    ) -> tuple[torch.Tensor, torch.Tensor, list[torch.Tensor]]:
        """Compute the overall loss of a batch.

        Returns:
            The overall loss, the intra-modal term and the per-level cross-modal terms.
        """
        B = batch.size
        g = self.point_features(torch.cat((batch.points_1, batch.points_2)))
        g1, g2 = g[:B], g[B:]

        intra = loss_intra(
            self.heads.project_intra(g1), self.heads.project_intra(g2), loss_cfg.tau
        )

        h = self.image_encoder(batch.views.flatten(0, 1)).unflatten(0, (batch.m, B))
        views = [self.heads.project_cross_view(h[j], j + 1) for j in range(batch.m)]
        inter, per_level = loss_inter_plus(
            self.heads.project_cross_point(g1),
            self.heads.project_cross_point(g2),
            views,
            loss_cfg.tau,
        )
        overall = loss_cfg.lambda_intra * intra + loss_cfg.lambda_inter * inter
        return overall, intra, per_level

    @torch.no_grad()
    def intra_alignment(self, batch: Batch) -> float:
        """Return the mean cosine between the two variants in the intra space."""
        B = batch.size
        g = self.point_features(torch.cat((batch.points_1, batch.points_2)))
        z = self.heads.project_intra(g).rows
        return float((z[:B] * z[B:]).sum(dim=-1).mean())

    def digest(self) -> str:
        """Hash every parameter and buffer."""
        return array_digest(*self.state_dict().values())


def build_model(cfg: RunConfig) -> MMPointModel:
    """Construct a model whose initial weights depend only on the run seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(SeedTree(cfg.seed).seed(INIT))
        return MMPointModel(cfg)


class TrainState:
    """Model parameters, optimizer moments, step counter and loss history."""

    def __init__(self, cfg: RunConfig, model: MMPointModel | None = None):
        """Construct a fresh state for a run config.

        Args:
            cfg:   The run config.
            model: (Optional) A model to train; built from the seed if omitted.
        """
        self.cfg = cfg
        self.model = model or build_model(cfg)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
        )
        self.step = 0
        self.history: list[LossReport] = []

    def tensors(self) -> dict[str, torch.Tensor]:
        """Return every tensor needed to resume: parameters then optimizer moments."""
        out = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        for idx, st in self.optimizer.state_dict()["state"].items():
            for key, value in st.items():
                out[f"optim.{idx}.{key}"] = torch.as_tensor(value, dtype=torch.float32)
        return out

    def save(self, path: str | Path, extra: dict[str, Any] | None = None):
        """Write the state to a checkpoint file."""
        meta = {
            "step": self.step,
            "seed": self.cfg.seed,
            "point_dim": self.cfg.encoder.point_dim,
            "image_dim": self.cfg.encoder.image_dim,
            "config": self.cfg.model_dump(mode="json"),
            "param_groups": self.optimizer.state_dict()["param_groups"],
            "history": [r.model_dump() for r in self.history],
            **(extra or {}),
        }
        save_checkpoint(path, self.tensors(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "TrainState":
        """Rebuild a state from a checkpoint file."""
        tensors, meta = load_checkpoint(path)
        try:
            cfg = RunConfig.parse(meta["config"])
        except KeyError:
            raise CheckpointError(path, "no run config in header") from None

        state = cls(cfg)
        params = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
        try:
            state.model.load_state_dict(params)
        except RuntimeError as e:
            raise CheckpointError(path, f"parameters do not fit the model: {e}") from e

        moments: dict[int, dict[str, torch.Tensor]] = {}
        for name, value in tensors.items():
            if name.startswith("optim."):
                _, idx, key = name.split(".", 2)
                moments.setdefault(int(idx), {})[key] = value
        state.optimizer.load_state_dict({"state": moments, "param_groups": meta["param_groups"]})
        state.step = int(meta["step"])
        state.history = [LossReport.model_validate(r) for r in meta.get("history", [])]
        return state


def lr_at(cfg: RunConfig, step: int, total_steps: int) -> float:
    """Return the learning rate for a step (constant, or cosine decay to zero)."""
    if not cfg.cosine_schedule or total_steps <= 0:
        return cfg.lr
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))


def train_step(
    state: TrainState, batch: Batch, cfg: RunConfig, *, total_steps: int = 0
) -> tuple[TrainState, LossReport]:
    """Take one optimizer step on a batch.

    Raises:
        NonFiniteLossError: if any loss component is NaN or infinite; no update is made.
    """
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    overall, intra, per_level = state.model.objective(batch, cfg.loss)

    components = {"intra": float(intra), "overall": float(overall)}
    components.update({f"inter_level_{j + 1}": float(t) for j, t in enumerate(per_level)})
    if not all(math.isfinite(v) for v in components.values()):
        raise NonFiniteLossError(state.step, batch.digest(), components)

    overall.backward()
    for group in state.optimizer.param_groups:
        group["lr"] = lr_at(cfg, state.step, total_steps)
    state.optimizer.step()
    state.step += 1

    report = LossReport.from_components(
        float(intra),
        [float(t) for t in per_level],
        tau=cfg.loss.tau,
        batch_size=batch.size,
        lambda_intra=cfg.loss.lambda_intra,
        lambda_inter=cfg.loss.lambda_inter,
    )
    state.history.append(report)
    logger.debug("step %d overall %.5f batch %s", state.step, report.overall, batch.digest()[:12])
    return state, report


class RunManifest(BaseModel):
    """What a pretraining run was given, recorded next to its checkpoints."""

    config: dict[str, Any]
    dataset: str
    dataset_digest: str
    steps_per_epoch: int
    aug_strategy: str
    catalog: list[str]
    pipelines: list[dict[str, Any]]
    distortion: list[float]


class Trainer:
    """Drives pretraining for one run config over one dataset."""

    def __init__(self, cfg: RunConfig, *, dataset: DatasetHandle | None = None):
        """Construct the trainer with either `cfg.data` or an opened dataset.

        Args:
            cfg:     The run config.
            dataset: (Optional) An opened dataset. `cfg.data` is ignored if passed.
        """
        if dataset is not None:
            if cfg.data and Path(cfg.data).resolve() != dataset.root.resolve():
                logger.warning("cfg.data will be ignored because a dataset was passed")
            self.dataset = dataset
        else:
            if cfg.data is None:
                raise TypeError("cfg.data must be set if no dataset is provided")
            self.dataset = DatasetHandle(cfg.data)

        if self.dataset.resolution != cfg.encoder.resolution:
            raise ConfigError(
                [
                    f"encoder.resolution={cfg.encoder.resolution} but the dataset "
                    f"holds {self.dataset.resolution}px views"
                ]
            )
        n_train = self.dataset.size("train")
        if n_train < cfg.batch_size:
            raise DatasetError(
                f"the train split holds {n_train} objects, fewer than batch_size={cfg.batch_size}"
            )

        self.cfg = cfg
        self.tree = SeedTree(cfg.seed)
        self.pipelines = build_pipelines(cfg.m, strategy=cfg.toggles.aug_strategy)
        self.distortion = distortion_profile(
            self.pipelines,
            probe_set(resolution=self.dataset.resolution),
            self.tree.child("distortion"),
        )
        logger.debug("distortion per level %s", [round(d, 4) for d in self.distortion])
        if cfg.toggles.aug_strategy == "multi-level":
            check_monotone(self.distortion)
        self.steps_per_epoch = n_train // cfg.batch_size
        self.total_steps = cfg.epochs * self.steps_per_epoch

    def batch_indices(self, step: int) -> np.ndarray:
        """Return the train-split positions used at a step (shuffled per epoch, drop-last)."""
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = self.tree.child(BATCH_ORDER).stream(f"epoch-{epoch}").permutation(
            self.dataset.size("train")
        )
        B = self.cfg.batch_size
        return order[pos * B : (pos + 1) * B]

    def batch_for_step(self, step: int) -> Batch:
        """Return the batch for a step; a pure function of the seed and the step."""
        return make_batch(
            self.dataset,
            self.cfg,
            self.batch_indices(step),
            self.tree.child(f"step-{step}"),
            self.pipelines,
        )

    def batches(self, start: int, stop: int) -> Iterator[Batch]:
        """Yield the batches for steps [start, stop) in order.

        With `cfg.prefetch > 0`, up to that many batches are prepared ahead on a
        worker thread.
        """
        if self.cfg.prefetch == 0:
            for step in range(start, stop):
                yield self.batch_for_step(step)
            return

        with ThreadPoolExecutor(max_workers=1, thread_name_prefix="mmpoint-batch") as pool:
            pending: deque[Future] = deque()
            step = start
            while step < stop or pending:
                while step < stop and len(pending) < self.cfg.prefetch:
                    pending.append(pool.submit(self.batch_for_step, step))
                    step += 1
                yield pending.popleft().result()

    def manifest(self) -> RunManifest:
        """Describe the run for auditability."""
        catalog = [";".join(t.serialize() for t in entry) for entry in default_catalog()]
        return RunManifest(
            config=self.cfg.model_dump(mode="json"),
            dataset=str(self.dataset.root),
            dataset_digest=self.dataset.digest(),
            steps_per_epoch=self.steps_per_epoch,
            aug_strategy=self.cfg.toggles.aug_strategy,
            catalog=catalog,
            pipelines=[p.describe() for p in self.pipelines],
            distortion=self.distortion,
        )

    def fit(self, state: TrainState, out: Path | None = None) -> TrainState:
        """Train from `state.step` to the end of the last epoch.

        If `out` is given, `last.ckpt` is rewritten there after every epoch.
        """
        if state.step > self.total_steps:
            raise CheckpointError(
                out or "<state>", f"state is at step {state.step}, run ends at {self.total_steps}"
            )
        epoch_losses: list[float] = []
        for batch in self.batches(state.step, self.total_steps):
            _, report = train_step(state, batch, self.cfg, total_steps=self.total_steps)
            epoch_losses.append(report.overall)
            if state.step % self.steps_per_epoch == 0:
                epoch = state.step // self.steps_per_epoch
                logger.info(
                    "epoch %d/%d mean loss %.4f",
                    epoch,
                    self.cfg.epochs,
                    float(np.mean(epoch_losses)),
                )
                epoch_losses = []
                if out is not None:
                    state.save(out / LAST_CHECKPOINT, extra={"epoch": epoch})
        return state


def write_history(path: str | Path, history: list[LossReport]):
    """Write the loss history as CSV (step, intra, inter_level_1..m, overall, mi_bound)."""
    m = history[0].m if history else 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(history_header(m))
        for step, report in enumerate(history, start=1):
            writer.writerow(report.row(step))


def pretrain(
    cfg: RunConfig,
    *,
    out: str | Path,
    dataset: DatasetHandle | None = None,
    resume: str | Path | None = None,
) -> Path:
    """Run pretraining and return the path of the final checkpoint.

    Writes `run-config.json`, `manifest.json`, `last.ckpt` (every epoch),
    `final.ckpt` and `loss-history.csv` into `out`.

    Args:
        cfg:     The run config.
        out:     Output directory.
        dataset: (Optional) An opened dataset; otherwise `cfg.data` is opened.
        resume:  (Optional) A checkpoint of the same run to continue from.
    """
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create {out}: {e}") from e

    trainer = Trainer(cfg, dataset=dataset)
    if resume is not None:
        state = TrainState.load(resume)
        if state.cfg.model_dump(exclude={"data"}) != cfg.model_dump(exclude={"data"}):
            raise ConfigError([f"{resume} was written by a different run config"])
        logger.info("resuming from %s at step %d", resume, state.step)
    else:
        state = TrainState(cfg)
    logger.info("training heads %s", ", ".join(state.model.heads.active_heads()))

    cfg.dump(out / RUN_CONFIG)
    manifest = trainer.manifest()
    (out / RUN_MANIFEST).write_text(json.dumps(manifest.model_dump(), indent=2) + "\n")

    trainer.fit(state, out)
    final = out / FINAL_CHECKPOINT
    state.save(final, extra={"epoch": cfg.epochs, "dataset_digest": manifest.dataset_digest})
    write_history(out / LOSS_HISTORY, state.history)
    logger.info("wrote %s after %d steps", final, state.step)
    return final
