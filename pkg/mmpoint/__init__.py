"""Multi-view 2D-3D contrastive pretraining for point clouds, at desk scale."""

from . import sources
from .config import RunConfig
from .core import PointCloud, SeedTree, ViewImage, ViewSet, normalize_cloud
from .dataset import DatasetHandle, build_dataset, ingest_external
from .trainer import pretrain
