"""Frozen-encoder evaluation: linear probe, few-shot episodes, ablations and export.

Every evaluation works on the global point-encoder features (before any
projection head). The encoder is never updated: its parameter digest is
compared before and after feature extraction.

Typical usage example:

    from mmpoint.dataset import DatasetHandle
    from mmpoint.evalsuite import evaluate_checkpoint

    report = evaluate_checkpoint("runs/first", DatasetHandle("data/synthetic"))
    print(report.summary())
"""

import csv
import logging
import warnings
from pathlib import Path
from typing import Any, Callable, Literal, Sequence

import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator
from sklearn.exceptions import ConvergenceWarning
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import LinearSVC

from mmpoint.checkpoint import load_checkpoint
from mmpoint.config import RunConfig
from mmpoint.core import SeedTree
from mmpoint.dataset import SPLITS, DatasetHandle
from mmpoint.errors import CheckpointError, EvaluationError
from mmpoint.trainer import FINAL_CHECKPOINT, MMPointModel, build_model, pretrain

logger = logging.getLogger(__name__)

Axis = Literal["views", "multi_mlp", "multi_level_aug"]
AXES: tuple[str, ...] = ("views", "multi_mlp", "multi_level_aug")
MAX_PROBE_ITER = 20000
FEATURE_BATCH = 64


class EpisodeSpec(BaseModel):
    """An N-way K-shot episode layout."""

    n_way: int = Field(5, ge=2)
    k_shot: int = Field(10, ge=1)
    n_query: int = Field(20, ge=1)
    runs: int = Field(10, ge=1)


class Episode(BaseModel):
    """Indices of the support and query samples of one episode."""

    classes: list[int]
    support: list[int]
    query: list[int]

    @model_validator(mode="after")
    def _check_disjoint(self) -> "Episode":
        if set(self.support) & set(self.query):
            raise ValueError("support and query sets overlap")
        return self


class EvalReport(BaseModel):
    """Accuracy of one evaluation protocol, in percent."""

    protocol: str
    accuracy_mean: float = Field(..., ge=0, le=100)
    accuracy_std: float = Field(..., ge=0)
    accuracies: list[float]
    per_class: dict[int, float] = {}
    config: dict[str, Any] = {}

    def summary(self) -> str:
        """Return a one-line human-readable summary."""
        runs = len(self.accuracies)
        suffix = f" over {runs} runs" if runs > 1 else ""
        return f"{self.protocol}: {self.accuracy_mean:.2f} ± {self.accuracy_std:.2f} %{suffix}"


def resolve_checkpoint(path: str | Path) -> Path:
    """Return the checkpoint file for a file path or a run directory."""
    path = Path(path)
    return path / FINAL_CHECKPOINT if path.is_dir() else path


def load_model(path: str | Path) -> tuple[MMPointModel, RunConfig, dict[str, Any]]:
    """Rebuild the model stored in a checkpoint, in evaluation mode."""
    path = resolve_checkpoint(path)
    tensors, meta = load_checkpoint(path)
    if "config" not in meta:
        raise CheckpointError(path, "no run config in header")
    cfg = RunConfig.parse(meta["config"])
    model = MMPointModel(cfg)
    params = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    try:
        model.load_state_dict(params)
    except RuntimeError as e:
        raise CheckpointError(path, f"parameters do not fit the model: {e}") from e
    model.eval()
    return model, cfg, meta


def extract_features(
    model: MMPointModel,
    dataset: DatasetHandle,
    split: str,
    *,
    expected_dim: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return the frozen global point features and labels of a split.

    Args:
        model:        The model whose point encoder is evaluated.
        dataset:      The dataset to read.
        split:        `train` or `test`.
        expected_dim: (Optional) The feature width declared by a checkpoint header.

    Raises:
        EvaluationError: if the width disagrees with `expected_dim` or the
            parameters changed during extraction.
    """
    before = model.digest()
    was_training = model.training
    model.eval()
    clouds = dataset.clouds(split)
    dtype = next(model.parameters()).dtype
    chunks = []
    with torch.no_grad():
        for start in range(0, clouds.shape[0], FEATURE_BATCH):
            x = torch.as_tensor(np.asarray(clouds[start : start + FEATURE_BATCH]), dtype=dtype)
            chunks.append(model.point_features(x).double().numpy())
    model.train(was_training)

    width = model.point_encoder.out_dim
    features = np.concatenate(chunks) if chunks else np.zeros((0, width))
    if expected_dim is not None and features.shape[1] != expected_dim:
        raise EvaluationError(
            f"encoder produces {features.shape[1]}-dim features, "
            f"checkpoint declares {expected_dim}"
        )
    if model.digest() != before:
        raise EvaluationError("encoder parameters changed during feature extraction")
    return features, dataset.labels(split)


def linear_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    c_reg: float = 1.0,
    *,
    seed: int = 0,
) -> EvalReport:
    """Fit a one-vs-rest linear SVM (hinge loss, L2) on frozen features and score it.

    Args:
        train_x: (N, D) training features.
        train_y: (N,) training labels.
        test_x:  (M, D) test features.
        test_y:  (M,) test labels.
        c_reg:   Inverse regularization strength.
        seed:    Seed of the solver's coordinate order.
    """
    classes = np.unique(train_y)
    if classes.size < 2:
        raise EvaluationError(f"a linear probe needs at least 2 classes, got {classes.tolist()}")
    if len(test_y) == 0:
        raise EvaluationError("the test set is empty")

    clf = make_pipeline(
        StandardScaler(),
        LinearSVC(C=c_reg, loss="hinge", dual=True, max_iter=MAX_PROBE_ITER, random_state=seed),
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        clf.fit(train_x, train_y)
    if any(issubclass(w.category, ConvergenceWarning) for w in caught):
        logger.warning("linear probe did not converge in %d iterations", MAX_PROBE_ITER)

    pred = clf.predict(test_x)
    correct = pred == test_y
    accuracy = 100.0 * float(correct.mean())
    per_class = {int(c): 100.0 * float(correct[test_y == c].mean()) for c in np.unique(test_y)}
    return EvalReport(
        protocol="linear-probe",
        accuracy_mean=accuracy,
        accuracy_std=0.0,
        accuracies=[accuracy],
        per_class=per_class,
        config={"c_reg": c_reg, "n_train": int(len(train_y)), "n_test": int(len(test_y))},
    )


def sample_episode(labels: np.ndarray, spec: EpisodeSpec, stream: np.random.Generator) -> Episode:
    """Draw N classes, then K support and Q query samples per class without overlap."""
    labels = np.asarray(labels)
    need = spec.k_shot + spec.n_query
    values, counts = np.unique(labels, return_counts=True)
    eligible = values[counts >= need]
    if eligible.size < spec.n_way:
        raise EvaluationError(
            f"{spec.n_way}-way {spec.k_shot}-shot with {spec.n_query} queries needs "
            f"{spec.n_way} classes with at least {need} examples, found {eligible.size}"
        )
    classes = np.sort(stream.choice(eligible, spec.n_way, replace=False))
    support, query = [], []
    for c in classes:
        picked = stream.permutation(np.flatnonzero(labels == c))[:need]
        support.extend(picked[: spec.k_shot].tolist())
        query.extend(picked[spec.k_shot :].tolist())
    return Episode(classes=classes.tolist(), support=support, query=query)


def few_shot_eval(
    features: np.ndarray,
    labels: np.ndarray,
    spec: EpisodeSpec,
    stream: np.random.Generator,
    *,
    c_reg: float = 1.0,
) -> EvalReport:
    """Run `spec.runs` N-way K-shot episodes and report mean and std accuracy."""
    labels = np.asarray(labels)
    accuracies = []
    for run in range(spec.runs):
        ep = sample_episode(labels, spec, stream)
        report = linear_probe(
            features[ep.support],
            labels[ep.support],
            features[ep.query],
            labels[ep.query],
            c_reg,
            seed=run,
        )
        accuracies.append(report.accuracy_mean)
        logger.debug("episode %d classes %s accuracy %.2f", run, ep.classes, report.accuracy_mean)
    return EvalReport(
        protocol=f"{spec.n_way}-way {spec.k_shot}-shot",
        accuracy_mean=float(np.mean(accuracies)),
        accuracy_std=float(np.std(accuracies)),
        accuracies=accuracies,
        config=spec.model_dump(),
    )


def few_shot_grid(
    features: np.ndarray,
    labels: np.ndarray,
    tree: SeedTree,
    *,
    ways: Sequence[int] = (5, 10),
    shots: Sequence[int] = (10, 20),
    n_query: int = 20,
    runs: int = 10,
    c_reg: float = 1.0,
) -> list[EvalReport]:
    """Run the ways x shots table, skipping cells the data cannot support."""
    reports = []
    for n_way in ways:
        for k_shot in shots:
            spec = EpisodeSpec(n_way=n_way, k_shot=k_shot, n_query=n_query, runs=runs)
            stream = tree.stream(f"{n_way}-way-{k_shot}-shot")
            try:
                reports.append(few_shot_eval(features, labels, spec, stream, c_reg=c_reg))
            except EvaluationError as e:
                logger.warning("skipping %d-way %d-shot: %s", n_way, k_shot, e)
    return reports


def _union(dataset: DatasetHandle, model: MMPointModel, expected_dim: int | None = None):
    parts = [extract_features(model, dataset, s, expected_dim=expected_dim) for s in SPLITS]
    return np.concatenate([x for x, _ in parts]), np.concatenate([y for _, y in parts])


def probe_model(model: MMPointModel, dataset: DatasetHandle, c_reg: float = 1.0) -> EvalReport:
    """Linear-probe a model's frozen features on the dataset's train/test split."""
    train_x, train_y = extract_features(model, dataset, "train")
    test_x, test_y = extract_features(model, dataset, "test")
    return linear_probe(train_x, train_y, test_x, test_y, c_reg)


def evaluate_checkpoint(
    path: str | Path, dataset: DatasetHandle, c_reg: float | None = None
) -> EvalReport:
    """Linear-probe the encoder stored in a checkpoint."""
    model, cfg, meta = load_model(path)
    c = cfg.eval.c_reg if c_reg is None else c_reg
    dim = meta.get("point_dim")
    train_x, train_y = extract_features(model, dataset, "train", expected_dim=dim)
    test_x, test_y = extract_features(model, dataset, "test", expected_dim=dim)
    report = linear_probe(train_x, train_y, test_x, test_y, c)
    logger.info("%s: %s", resolve_checkpoint(path), report.summary())
    return report


def probe_untrained(cfg: RunConfig, dataset: DatasetHandle) -> EvalReport:
    """Linear-probe a freshly initialized encoder of the same architecture and seed."""
    report = probe_model(build_model(cfg), dataset, cfg.eval.c_reg)
    return report.model_copy(update={"protocol": "linear-probe (untrained)"})


def few_shot_checkpoint(
    path: str | Path, dataset: DatasetHandle, spec: EpisodeSpec, tree: SeedTree
) -> EvalReport:
    """Run few-shot episodes on a checkpoint's features over both splits."""
    model, cfg, meta = load_model(path)
    features, labels = _union(dataset, model, meta.get("point_dim"))
    stream = tree.stream(f"{spec.n_way}-way-{spec.k_shot}-shot")
    return few_shot_eval(features, labels, spec, stream, c_reg=cfg.eval.c_reg)


def few_shot_grid_checkpoint(
    path: str | Path,
    dataset: DatasetHandle,
    tree: SeedTree,
    *,
    ways: Sequence[int] = (5, 10),
    shots: Sequence[int] = (10, 20),
    n_query: int = 20,
    runs: int = 10,
) -> list[EvalReport]:
    """Run the ways x shots few-shot table on a checkpoint's features over both splits.

    Each cell draws from the same stream `few_shot_checkpoint` would use for
    that layout, so a grid cell matches the corresponding single run.

    Raises:
        EvaluationError: if the dataset cannot support any cell.
    """
    model, cfg, meta = load_model(path)
    features, labels = _union(dataset, model, meta.get("point_dim"))
    reports = few_shot_grid(
        features,
        labels,
        tree,
        ways=ways,
        shots=shots,
        n_query=n_query,
        runs=runs,
        c_reg=cfg.eval.c_reg,
    )
    if not reports:
        raise EvaluationError(
            f"no cell of ways {list(ways)} x shots {list(shots)} with {n_query} queries "
            f"fits {dataset.root}"
        )
    return reports


def export_embeddings(path: str | Path, dataset: DatasetHandle, out: str | Path) -> Path:
    """Write `label, f_1, ..., f_D` rows for every object (train split then test split)."""
    model, _, meta = load_model(path)
    features, labels = _union(dataset, model, meta.get("point_dim"))
    out = Path(out)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        for label, row in zip(labels, features):
            writer.writerow([int(label), *(f"{v:.9g}" for v in row)])
    logger.info("wrote %d embeddings to %s", len(labels), out)
    return out


class AblationRow(BaseModel):
    """One value of an ablation axis and its probe accuracy per seed."""

    axis: str
    value: str
    seeds: list[int]
    accuracies: list[float]

    @property
    def mean(self) -> float:
        """Return the mean accuracy over seeds."""
        return float(np.mean(self.accuracies))


CellRunner = Callable[[RunConfig, DatasetHandle, Path], float]


def run_cell(cfg: RunConfig, dataset: DatasetHandle, out: Path) -> float:
    """Pretrain one configuration and return its linear-probe accuracy."""
    ckpt = pretrain(cfg, out=out, dataset=dataset)
    return evaluate_checkpoint(ckpt, dataset).accuracy_mean


def ablation_cells(
    axis: str, values: Sequence[Any] | None, base: RunConfig
) -> list[tuple[str, RunConfig]]:
    """Return the (label, config) pairs of an ablation axis.

    Args:
        axis:   `views` (values are m), `multi_mlp` (values are (intra, inter)
                pairs of booleans; default the full 2x2 grid) or `multi_level_aug`
                (values among `unified`, `multi`, `multi-level`).
        values: (Optional) Axis values; defaults to the standard table layout.
        base:   The configuration every cell starts from.
    """
    if axis == "views":
        values = values or [1, 3, 4, 5, 6]
        return [(str(int(v)), base.with_overrides(m=int(v))) for v in values]
    if axis == "multi_mlp":
        values = values or [(False, False), (True, False), (False, True), (True, True)]
        cells = []
        for intra, inter in values:
            label = f"intra={'on' if intra else 'off'},inter={'on' if inter else 'off'}"
            cfg = base.with_overrides(
                toggles__decoupled_intra=bool(intra), toggles__multi_mlp=bool(inter)
            )
            cells.append((label, cfg))
        return cells
    if axis == "multi_level_aug":
        values = values or ["unified", "multi", "multi-level"]
        toggles = {
            "unified": (False, False),
            "multi": (False, True),
            "multi-level": (True, False),
        }
        cells = []
        for v in values:
            if v not in toggles:
                raise ValueError(
                    f"unknown augmentation strategy {v!r}, expected one of {list(toggles)}"
                )
            level, per_view = toggles[v]
            cfg = base.with_overrides(
                toggles__multi_level_aug=level, toggles__per_view_aug=per_view
            )
            cells.append((v, cfg))
        return cells
    raise ValueError(f"axis must be one of {AXES}, got {axis!r}")


def ablate(
    axis: Axis,
    values: Sequence[Any] | None,
    base: RunConfig,
    dataset: DatasetHandle,
    *,
    out: str | Path,
    seeds: Sequence[int] = (0,),
    runner: CellRunner = run_cell,
) -> list[AblationRow]:
    """Pretrain and probe every value of an ablation axis, over the given seeds.

    All cells share one dataset. Results are written to `ablation-<axis>.csv`
    and `ablation-<axis>.txt` in `out`.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, cfg in ablation_cells(axis, values, base):
        accuracies = []
        for seed in seeds:
            cell_cfg = cfg.with_overrides(seed=int(seed))
            cell_dir = out / f"{axis}-{label.replace(',', '-').replace('=', '-')}-seed-{seed}"
            accuracy = runner(cell_cfg, dataset, cell_dir)
            logger.info("ablation %s=%s seed %d: %.2f%%", axis, label, seed, accuracy)
            accuracies.append(accuracy)
        rows.append(AblationRow(axis=axis, value=label, seeds=list(seeds), accuracies=accuracies))

    with open(out / f"ablation-{axis}.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["axis", "value", "mean", *(f"seed_{s}" for s in seeds)])
        for row in rows:
            per_seed = [f"{a:.4f}" for a in row.accuracies]
            writer.writerow([row.axis, row.value, f"{row.mean:.4f}", *per_seed])
    (out / f"ablation-{axis}.txt").write_text(format_table(rows) + "\n")
    return rows


def format_table(rows: list[AblationRow]) -> str:
    """Render ablation rows as an aligned text table."""
    if not rows:
        return ""
    width = max(len(rows[0].axis), *(len(r.value) for r in rows))
    lines = [f"{rows[0].axis:<{width}}  accuracy (%)"]
    for r in rows:
        per_seed = " ".join(f"{a:6.2f}" for a in r.accuracies)
        lines.append(f"{r.value:<{width}}  {r.mean:6.2f}  [{per_seed}]")
    return "\n".join(lines)
