"""Slice stacks, augmentation, nested folds, the multitask training loop and inner-loop ensembles."""
from __future__ import annotations

import csv
import json
import math
import multiprocessing
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import config as C
from . import tensor as T
from .fusion import GATHead, HeadConfig, JointFusion, MLPHead, SAGEHead, knn_classify, wknn_classify, write_predictions_csv
from .gnn import AttentionTrace
from .io import write_volume
from .metrics import MetricsReport, SegmentationMetrics, TaskMetrics, average_precision, evaluate_task, write_json, youden_threshold
from .nn import Adam, Module, load_checkpoint, save_checkpoint
from .popgraph import attach_test_node, fit_feature_weights, knn_graph, severity_encode, training_batch
from .radiomics import radiomics_from_counts
from .segnet import BottleneckEmbed, ConvEncoder, SegNet, SegNetConfig, dice_loss, lung_only, one_hot
from .synth import Cohort, generate, read_cohort
from .tabular import METADATA_COLUMNS, LABEL_COLUMNS, TabularPipeline, ZScorer
from .radiomics import FEATURE_NAMES
from .tensor import Tensor, no_grad


class TrainingDiverged(RuntimeError):
    pass


# -- slice stacks -------------------------------------------------------------

def stack_layout(z: int, s: int) -> tuple:
    """(number of stacks, slices cut on the left, slices cut on the right)."""
    if s < 1 or z < s:
        raise ValueError(f"cannot draw stacks of {s} slices from {z}")
    rest = z % s
    return z // s, rest // 2, rest - rest // 2


def equidistant_subsample(z: int, s: int, mode: str = "strided") -> list:
    """Split ``z`` slices into ``z // s`` stacks of ``s`` slices.

    ``(z mod s) // 2`` slices are dropped on the left and the remainder on
    the right.  In ``strided`` mode stack ``j`` takes every ``n``-th slice
    starting at offset ``j`` so each stack spans the whole volume; in
    ``consecutive`` mode stacks are contiguous blocks.
    """
    n, left, _ = stack_layout(z, s)
    base = np.arange(n * s) + left
    if mode == "strided":
        return [base[j::n] for j in range(n)]
    if mode == "consecutive":
        return [base[j * s:(j + 1) * s] for j in range(n)]
    raise ValueError(f"unknown stack mode {mode!r}")


# -- augmentation -------------------------------------------------------------

def _rotation(angles_deg) -> np.ndarray:
    a, b, c = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    ry = np.array([[math.cos(b), 0, math.sin(b)], [0, 1, 0], [-math.sin(b), 0, math.cos(b)]])
    rz = np.array([[math.cos(c), -math.sin(c), 0], [math.sin(c), math.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment(volume: np.ndarray, rng: np.random.Generator, cfg: C.AugmentConfig = C.AugmentConfig(), mask: Optional[np.ndarray] = None):
    """Random intensity scale, rotation about all axes, isotropic zoom and crop/pad.

    Geometry is one affine resampling (trilinear for the volume, nearest for
    the mask) with zero fill; the output keeps the input shape.  Returns the
    volume, or ``(volume, mask)`` when a mask is given.
    """
    volume = np.asarray(volume)
    if cfg.is_identity:
        out = volume.copy()
        return (out, np.array(mask, copy=True)) if mask is not None else out
    scale = rng.uniform(1 - cfg.intensity, 1 + cfg.intensity)
    rot = _rotation(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg, size=3))
    zoom = rng.uniform(*cfg.zoom)
    size = np.asarray(volume.shape, dtype=float)
    # random crop window (zoom > 1) or padding placement (zoom < 1)
    shift = rng.uniform(-1, 1, size=3) * np.abs(zoom - 1.0) * size / 2.0
    centre = (size - 1) / 2.0
    matrix = rot.T / zoom
    offset = centre - matrix @ (centre + shift)
    out = ndimage.affine_transform(volume.astype(np.float64), matrix, offset, order=1, mode="constant", cval=0.0)
    out = (out * scale).astype(volume.dtype)
    if mask is None:
        return out
    m = ndimage.affine_transform(np.asarray(mask), matrix, offset, order=0, mode="constant", cval=0)
    return out, m.astype(np.asarray(mask).dtype)


def center_crop(volume: np.ndarray, shape) -> np.ndarray:
    """Central crop, zero-padding axes that are too short."""
    out = np.zeros(tuple(shape), dtype=volume.dtype)
    src, dst = [], []
    for have, want in zip(volume.shape, shape):
        if have >= want:
            a = (have - want) // 2
            src.append(slice(a, a + want))
            dst.append(slice(0, want))
        else:
            a = (want - have) // 2
            src.append(slice(0, have))
            dst.append(slice(a, a + have))
    out[tuple(dst)] = volume[tuple(src)]
    return out


# -- nested folds -------------------------------------------------------------

@dataclass(frozen=True)
class RunSplit:
    outer: int
    inner: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple  # outer test folds, each a sorted index array
    seed: int
    replicate: int = 0

    @property
    def n_outer(self) -> int:
        return len(self.folds)

    def inner(self, outer: int) -> list:
        rest = [f for j, f in enumerate(self.folds) if j != outer]
        out = []
        for i, val in enumerate(rest):
            train = np.sort(np.concatenate([f for j, f in enumerate(rest) if j != i]))
            out.append((train, val))
        return out

    def run_seed(self, outer: int, inner: int) -> int:
        key = [self.seed, outer, inner] + ([self.replicate] if self.replicate else [])
        return int(np.random.SeedSequence(key).generate_state(1)[0])

    def split(self, outer: int, inner: int) -> RunSplit:
        train, val = self.inner(outer)[inner]
        return RunSplit(outer, inner, train, val, self.folds[outer], self.run_seed(outer, inner))

    def runs(self, outers=None, inners=None) -> Iterator[RunSplit]:
        for o in range(self.n_outer) if outers is None else outers:
            for i in range(self.n_outer - 1) if inners is None else inners:
                yield self.split(o, i)


def make_fold_plan(icu, seed: int, n_outer: int = 5, replicate: int = 0) -> FoldPlan:
    """Outer folds stratified by ICU label; inner splits rotate the other folds.

    Positives are dealt round-robin over a shuffled order and negatives
    continue the deal where positives stopped, so fold sizes differ by at
    most one.
    """
    y = np.asarray(icu).astype(bool)
    if y.size < 2 * n_outer:
        raise ValueError(f"need at least {2 * n_outer} patients, got {y.size}")
    if y.all() or not y.any():
        raise ValueError("stratification needs both ICU classes")
    rng = np.random.default_rng(seed)
    pos = rng.permutation(np.flatnonzero(y))
    neg = rng.permutation(np.flatnonzero(~y))
    order = np.concatenate([pos, neg])
    slot = np.arange(order.size) % n_outer
    folds = tuple(np.sort(order[slot == f]) for f in range(n_outer))
    return FoldPlan(folds, seed, replicate)


# -- model assembly -----------------------------------------------------------

@dataclass(frozen=True)
class ArchSpec:
    modalities: tuple
    head: Optional[str]  # gat | sage | mlp | knn | wknn | None
    backbone: Optional[str]  # unet | conv | None
    frozen: bool = False
    graph_on_radiomics: bool = True


ARCH_SPECS = {
    "u-gat": ArchSpec(("image", "radiomics", "metadata"), "gat", "unet"),
    "u-gat-pretrained": ArchSpec(("image", "radiomics", "metadata"), "gat", "unet", frozen=True),
    "mlp-metadata": ArchSpec(("metadata",), "mlp", None),
    "conv-mlp": ArchSpec(("image",), "mlp", "conv"),
    "conv-gat": ArchSpec(("image", "metadata"), "gat", "conv", graph_on_radiomics=False),
    "unet-pretrained-mlp": ArchSpec(("image", "radiomics", "metadata"), "mlp", "unet", frozen=True),
    "unet-pretrained-sage": ArchSpec(("image", "radiomics", "metadata"), "sage", "unet", frozen=True),
    "unet-pretrained-knn": ArchSpec(("radiomics", "metadata"), "knn", "unet", frozen=True),
    "unet-pretrained-wknn": ArchSpec(("radiomics", "metadata"), "wknn", "unet", frozen=True),
}
SEG_ONLY = ArchSpec((), None, "unet")


def task_labels(task: str) -> tuple:
    if task == "multilabel":
        return LABEL_COLUMNS
    if task == "seg-only":
        return ()
    return (task,)


class OutcomeModel(Module):
    def __init__(self, spec: ArchSpec, mcfg: C.ModelConfig, n_labels: int, rng: np.random.Generator):
        super().__init__()
        dtype = np.dtype(mcfg.dtype)
        self.spec = spec
        seg_cfg = SegNetConfig(mcfg.base_filters, mcfg.depth, 4, tuple(mcfg.input_size))
        self.backbone = None
        if spec.backbone == "unet":
            self.backbone = SegNet(seg_cfg, rng, dtype)
        elif spec.backbone == "conv":
            self.backbone = ConvEncoder(seg_cfg, rng, dtype)
        self.embed = None
        if "image" in spec.modalities:
            self.embed = BottleneckEmbed(seg_cfg.bottleneck_channels, mcfg.fused_width, rng, dtype)
        self.fusion = self.head = None
        if spec.head in ("gat", "sage", "mlp"):
            dims = {"image": mcfg.fused_width, "radiomics": len(FEATURE_NAMES), "metadata": len(METADATA_COLUMNS)}
            self.fusion = JointFusion({m: dims[m] for m in spec.modalities}, rng, mcfg.fused_width, mcfg.fusion, dtype)
            hcfg = HeadConfig(2, mcfg.heads, mcfg.hidden, mcfg.dropout, n_labels)
            if spec.head == "gat":
                self.head = GATHead(self.fusion.out_features, hcfg, rng, dtype)
            elif spec.head == "sage":
                self.head = SAGEHead(self.fusion.out_features, hcfg, rng, mcfg.sage_sample, dtype)
            else:
                self.head = MLPHead(self.fusion.out_features, hcfg, rng, dtype)

    def trainable_parameters(self) -> list:
        params = []
        for name, p in self.named_parameters():
            if self.spec.frozen and name.startswith("backbone."):
                continue
            params.append(p)
        return params


def _stream(rng: np.random.Generator, n: int) -> Iterator[int]:
    """Endless patient stream: shuffled passes without replacement."""
    while True:
        yield from rng.permutation(n).tolist()


def _take(stream, k: int) -> list:
    out = []
    while len(out) < k:
        v = next(stream)
        if v not in out:
            out.append(v)
    return out


@dataclass
class VolumeFeatures:
    """Per-slice outputs of a backbone for one volume."""

    gap: np.ndarray  # (Z, C) global-average-pooled bottleneck per slice
    counts: Optional[np.ndarray] = None  # (Z, 4) predicted class counts per slice
    labels: Optional[np.ndarray] = None  # (Z, H, W) predicted labels
    dice_sums: Optional[np.ndarray] = None  # (3, 4): sum p*g, sum p^2, sum g


@dataclass
class RunResult:
    split: RunSplit
    config: C.ExperimentConfig
    history: list
    best_epoch: int
    state: dict
    labels: tuple
    ids: list
    val_ids: list = field(default_factory=list)
    val_true: Optional[np.ndarray] = None
    val_scores: Optional[np.ndarray] = None
    test_ids: list = field(default_factory=list)
    test_true: Optional[np.ndarray] = None
    test_scores: Optional[np.ndarray] = None
    thresholds: Optional[np.ndarray] = None
    report: MetricsReport = field(default_factory=MetricsReport)
    traces: dict = field(default_factory=dict)
    test_masks: dict = field(default_factory=dict)  # patient id -> predicted label volume
    spacing_mm: float = 1.0
    seconds: float = 0.0


def _dice_from_sums(sums: np.ndarray, eps: float = 1e-6) -> float:
    inter, p2, g = sums
    return float(1.0 - np.mean((2 * inter + eps) / (p2 + g + eps)))


class Trainer:
    """One (outer, inner) run of an experiment."""

    def __init__(self, cohort: Cohort, split: RunSplit, cfg: C.ExperimentConfig, pretrained_state: Optional[dict] = None):
        self.cohort, self.split, self.cfg = cohort, split, cfg
        self.tcfg, self.mcfg, self.gcfg = cfg.train, cfg.model, cfg.graph
        self.dtype = np.dtype(self.mcfg.dtype)
        self.task = self.tcfg.task
        self.spec = SEG_ONLY if self.task == "seg-only" else ARCH_SPECS[self.mcfg.arch]
        self.label_names = task_labels(self.task)
        self.rng = np.random.default_rng(split.seed)
        self.voxel = cohort.spacing_mm ** 3
        self.depth = cohort.volumes.shape[1]
        self.stacks = equidistant_subsample(self.depth, self.tcfg.slices, self.tcfg.stack_mode)
        self.middle = len(self.stacks) // 2
        self.train_idx, self.val_idx, self.test_idx = split.train, split.val, split.test
        self._fit_statistics()
        self.model = OutcomeModel(self.spec, self.mcfg, len(self.label_names), self.rng)
        if self.spec.frozen:
            if pretrained_state is None:
                raise ValueError(f"architecture {self.mcfg.arch} needs a pretrained segmentation checkpoint")
            self._load_backbone(pretrained_state)
        self.optimizer = Adam(self.model.trainable_parameters(), self.tcfg.lr, self.tcfg.weight_decay)
        self.frozen_cache = self._frozen_features() if self.spec.frozen else None
        self.cache_pooled = self.cache_rad = None

    # -- statistics fitted on the training fold only -------------------------
    def _fit_statistics(self) -> None:
        c, tr = self.cohort, self.train_idx
        meta = c.metadata
        self.pipeline = TabularPipeline.fit(meta, tr, METADATA_COLUMNS)
        self.meta_z = self.pipeline.transform(meta)
        self.rad_scaler = ZScorer.fit(c.radiomics[tr])
        self.targets = c.labels[:, [LABEL_COLUMNS.index(n) for n in self.label_names]] if self.label_names else None
        self.graph = self.weights = None
        if self.spec.head in ("gat", "sage", "wknn", "knn"):
            feats = self._graph_features(tr, c.radiomics[tr])
            if self.task == "multilabel":
                y = severity_encode(*(c.labels[tr].T.astype(bool)))
            else:
                y = self.targets[tr, 0]
            names = METADATA_COLUMNS + (FEATURE_NAMES if self.spec.graph_on_radiomics else ())
            method = self.gcfg.weighting if self.spec.head != "knn" else "uniform"
            self.weights = fit_feature_weights(feats, y, method, names, self.gcfg.mi_neighbors, self.gcfg.mi_reps, seed=self.split.seed)
            self.graph = knn_graph(
                feats, self.weights, self.gcfg.k, self.gcfg.p, ids=[c.ids[i] for i in tr], squared_kernel=self.gcfg.squared_kernel
            )

    def _graph_features(self, idx, radiomics) -> np.ndarray:
        meta = self.meta_z[idx]
        if not self.spec.graph_on_radiomics:
            return meta
        return np.concatenate([meta, self.rad_scaler.transform(radiomics)], axis=1)

    def _load_backbone(self, state: dict) -> None:
        own = {k: v for k, v in self.model.backbone.state_dict().items()}
        picked = {k: state["backbone." + k] for k in own if "backbone." + k in state}
        if len(picked) != len(own):
            raise ValueError("pretrained checkpoint does not match the segmentation network")
        self.model.backbone.load_state_dict(picked)

    # -- backbone passes ----------------------------------------------------
    def _slices(self, volume: np.ndarray) -> Tensor:
        return Tensor(volume[:, None].astype(self.dtype, copy=False))

    def volume_features(self, c: int, mask: Optional[np.ndarray] = None, idx=None) -> VolumeFeatures:
        """Eval-mode pass over every slice of patient ``c`` (or the slices ``idx``)."""
        bb = self.model.backbone
        bb.eval()
        vol = self.cohort.volumes[c]
        if idx is not None:
            vol = vol[idx]
            mask = None if mask is None else mask[idx]
        gaps, counts, labels = [], [], []
        sums = np.zeros((3, 4))
        with no_grad():
            for a in range(0, vol.shape[0], self.tcfg.eval_chunk):
                x = self._slices(vol[a:a + self.tcfg.eval_chunk])
                if self.spec.backbone == "unet":
                    probs, bottleneck = bb(x)
                    lab = probs.data.argmax(axis=1)
                    labels.append(lab.astype(np.uint8))
                    counts.append(np.stack([np.bincount(l.ravel(), minlength=4)[:4] for l in lab]))
                    if mask is not None:
                        g = one_hot(mask[a:a + self.tcfg.eval_chunk], dtype=np.float64)
                        p = probs.data.astype(np.float64)
                        sums += np.stack([(p * g).sum(axis=(0, 2, 3)), (p * p).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))])
                else:
                    bottleneck = bb(x)
                gaps.append(bottleneck.data.mean(axis=(2, 3)))
        if self.spec.backbone != "unet":
            return VolumeFeatures(np.concatenate(gaps))
        return VolumeFeatures(np.concatenate(gaps), np.concatenate(counts), np.concatenate(labels), sums)

    def _stack_radiomics(self, counts: np.ndarray, idx) -> np.ndarray:
        scale = self.depth / len(idx)
        return radiomics_from_counts(counts[idx].sum(axis=0), self.voxel, scale).features()

    def _frozen_features(self) -> dict:
        n = len(self.cohort)
        k = len(self.stacks)
        pooled_st, rad_st, pooled_full, rad_full, labels = None, np.zeros((n, k, 4)), None, np.zeros((n, 4)), {}
        for c in range(n):
            vf = self.volume_features(c)
            if pooled_st is None:
                ch = vf.gap.shape[1]
                pooled_st, pooled_full = np.zeros((n, k, ch)), np.zeros((n, ch))
            pooled_full[c] = vf.gap.max(axis=0)
            rad_full[c] = radiomics_from_counts(vf.counts.sum(axis=0), self.voxel).features()
            for j, idx in enumerate(self.stacks):
                pooled_st[c, j] = vf.gap[idx].max(axis=0)
                rad_st[c, j] = self._stack_radiomics(vf.counts, idx)
            labels[c] = vf.labels
        return {"pooled_stacks": pooled_st, "rad_stacks": rad_st, "pooled": pooled_full, "rad": rad_full, "labels": labels}

    def refresh_cache(self, random: bool) -> None:
        """Pooled bottleneck and predicted radiomics of every training node from one stack."""
        tr = self.train_idx
        choice = self.rng.integers(len(self.stacks), size=tr.size) if random else np.full(tr.size, self.middle)
        if self.spec.frozen:
            fc = self.frozen_cache
            self.cache_pooled = fc["pooled_stacks"][tr, choice]
            self.cache_rad = fc["rad_stacks"][tr, choice]
            return
        if self.spec.backbone is None:
            return
        bb = self.model.backbone
        bb.eval()
        pooled, rads = [], []
        with no_grad():
            for c, j in zip(tr, choice):
                idx = self.stacks[j]
                out = bb(self._slices(self.cohort.volumes[c][idx]))
                if self.spec.backbone == "unet":
                    probs, bottleneck = out
                    lab = probs.data.argmax(axis=1)
                    counts = np.bincount(lab.ravel(), minlength=4)[:4]
                    rads.append(radiomics_from_counts(counts, self.voxel, self.depth / len(idx)).features())
                else:
                    bottleneck = out
                    rads.append(np.zeros(4))
                pooled.append(bottleneck.data.mean(axis=(2, 3)).max(axis=0))
        self.cache_pooled = np.stack(pooled)
        self.cache_rad = np.stack(rads)

    # -- fusion inputs ------------------------------------------------------
    def _inputs(self, pooled, radiomics, patients) -> dict:
        out = {}
        if "image" in self.spec.modalities:
            out["image"] = self.model.embed(T.as_tensor(pooled, self.dtype) if not isinstance(pooled, Tensor) else pooled)
        if "radiomics" in self.spec.modalities:
            out["radiomics"] = Tensor(self.rad_scaler.transform(radiomics).astype(self.dtype))
        if "metadata" in self.spec.modalities:
            out["metadata"] = Tensor(self.meta_z[patients].astype(self.dtype))
        return out

    def _classify(self, inputs: dict, adjacency, nodes):
        z = self.model.fusion(inputs)
        return self.model.head(z, adjacency, self.rng, nodes)

    # -- training -------------------------------------------------------------
    def _phase(self, epoch: int) -> tuple:
        """(segmentation mode or None, classification active)."""
        has_seg = self.spec.backbone == "unet" and not self.spec.frozen
        has_cls = bool(self.label_names) and self.spec.head in ("gat", "sage", "mlp")
        if not has_seg:
            return None, has_cls
        seg = "lung" if epoch < self.tcfg.lung_only_epochs else "full"
        cls = has_cls and epoch >= self.tcfg.cls_start_epoch
        return seg, cls

    def _min_epochs(self) -> int:
        return self.tcfg.min_epochs_pretrained if self.spec.frozen else self.tcfg.min_epochs

    def _train_step(self, anchors_pos: list, seg_mode, cls: bool) -> float:
        tr = self.train_idx
        anchors = tr[anchors_pos]
        b = len(anchors)
        seg_loss = cls_loss = None
        pooled_anchor = rad_anchor = None
        self.model.train()
        if self.spec.frozen:
            self.model.backbone.eval()
            choice = self.rng.integers(len(self.stacks), size=b)
            pooled_anchor = Tensor(self.frozen_cache["pooled_stacks"][anchors, choice].astype(self.dtype))
            rad_anchor = self.frozen_cache["rad_stacks"][anchors, choice]
        elif self.spec.backbone is not None:
            xs, ys = [], []
            for c in anchors:
                vol, mask = self.cohort.volumes[c], self.cohort.masks[c]
                if self.tcfg.augment.enabled:
                    vol, mask = augment(vol, self.rng, self.tcfg.augment, mask)
                idx = self.stacks[self.rng.integers(len(self.stacks))]
                xs.append(vol[idx])
                ys.append(mask[idx])
            x = self._slices(np.concatenate(xs))
            if self.spec.backbone == "unet":
                probs, bottleneck = self.model.backbone(x)
                truth = one_hot(np.concatenate(ys), dtype=self.dtype)
                if seg_mode == "lung":
                    seg_loss = dice_loss(*lung_only(probs, truth))
                else:
                    seg_loss = dice_loss(probs, truth)
                if cls:
                    lab = probs.data.argmax(axis=1).reshape(b, -1)
                    s = self.tcfg.slices
                    rad_anchor = np.stack([
                        radiomics_from_counts(np.bincount(l, minlength=4)[:4], self.voxel, self.depth / s).features() for l in lab
                    ])
            else:
                bottleneck = self.model.backbone(x)
            if cls:
                pooled_anchor = T.reduce_max(
                    T.reshape(T.global_avg_pool(bottleneck), (b, self.tcfg.slices, bottleneck.shape[1])), axis=1
                )
        if cls:
            if rad_anchor is None:
                rad_anchor = np.zeros((b, 4))
            if self.spec.head == "mlp":
                inputs = self._inputs(pooled_anchor, rad_anchor, anchors)
                logits, _ = self._classify(inputs, None, None)
            else:
                batch = training_batch(self.graph, anchors_pos)
                context = batch.nodes[b:]
                pooled = None
                if "image" in self.spec.modalities:
                    pooled = T.concat([pooled_anchor, Tensor(self.cache_pooled[context].astype(self.dtype))], axis=0)
                rad = np.concatenate([rad_anchor, self.cache_rad[context]]) if self.cache_rad is not None else np.zeros((batch.n, 4))
                inputs = self._inputs(pooled, rad, tr[batch.nodes])
                logits, _ = self._classify(inputs, batch.adjacency, None)
                logits = T.slice_axis(logits, 0, b, axis=0)
            cls_loss = T.bce_with_logits(logits, self.targets[anchors])
        parts = [p for p in (seg_loss, cls_loss) if p is not None]
        loss = parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])
        value = loss.item()
        if not math.isfinite(value):
            detail = ", ".join(f"{n}={p.item():.4g}" for n, p in (("seg", seg_loss), ("cls", cls_loss)) if p is not None)
            raise TrainingDiverged(f"non-finite loss ({detail}) in run {self.split.outer}_{self.split.inner}")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return value

    # -- evaluation -----------------------------------------------------------
    def _eval_node_inputs(self, patients, idx=None) -> tuple:
        """Pooled features, predicted radiomics and segmentation sums over the full volume or slices ``idx``."""
        n = len(patients)
        pooled = rad = None
        sums = np.zeros((3, 4))
        labels = {}
        if self.spec.frozen:
            fc = self.frozen_cache
            if idx is not None:
                j = next(j for j, st in enumerate(self.stacks) if np.array_equal(st, idx))
                return fc["pooled_stacks"][patients, j], fc["rad_stacks"][patients, j], None, {}
            return fc["pooled"][patients], fc["rad"][patients], None, {c: fc["labels"][c] for c in patients}
        if self.spec.backbone is None:
            return None, np.zeros((n, 4)), None, labels
        pooled, rad = [], []
        for c in patients:
            vf = self.volume_features(c, self.cohort.masks[c] if self.spec.backbone == "unet" else None, idx)
            pooled.append(vf.gap.max(axis=0))
            if vf.counts is not None:
                scale = 1.0 if idx is None else self.depth / len(idx)
                rad.append(radiomics_from_counts(vf.counts.sum(axis=0), self.voxel, scale).features())
                sums += vf.dice_sums
                labels[c] = vf.labels
            else:
                rad.append(np.zeros(4))
        return np.stack(pooled), np.stack(rad), (sums if self.spec.backbone == "unet" else None), labels

    def predict(self, patients: np.ndarray, keep_traces: bool = False, idx=None) -> tuple:
        """Per-label probabilities for patients outside the training fold."""
        self.model.eval()
        pooled, rad, seg_sums, seg_labels = self._eval_node_inputs(patients, idx)
        traces = {}
        head = self.spec.head
        if head in ("knn", "wknn"):
            test_f = self._graph_features(patients, rad)
            train_f = self.graph.features
            y = self.targets[self.train_idx]
            if head == "knn":
                probs = knn_classify(test_f, train_f, y, self.gcfg.k)
            else:
                probs = wknn_classify(test_f, train_f, y, self.weights.weights, self.gcfg.k, self.graph.mu, self.gcfg.p, self.gcfg.squared_kernel)
            return probs, seg_sums, seg_labels, traces
        with no_grad():
            if head == "mlp":
                logits, _ = self._classify(self._inputs(pooled, rad, patients), None, None)
                probs = T.sigmoid(logits).data.astype(np.float64)
                return probs, seg_sums, seg_labels, traces
            probs = np.zeros((len(patients), len(self.label_names)))
            tr = self.train_idx
            for row, c in enumerate(patients):
                f = self._graph_features(np.array([c]), rad[row:row + 1])[0]
                batch = attach_test_node(self.graph, f, self.gcfg.context)
                context = batch.nodes[1:]
                pool = None
                if pooled is not None:
                    pool = np.concatenate([pooled[row:row + 1], self.cache_pooled[context]])
                rads = np.concatenate([rad[row:row + 1], self.cache_rad[context]]) if self.cache_rad is not None else np.zeros((batch.n, 4))
                people = np.concatenate([[c], tr[context]])
                ids = [self.cohort.ids[p] for p in people]
                logits, trace = self._classify(self._inputs(pool, rads, people), batch.adjacency, ids)
                probs[row] = T.sigmoid(logits).data[0]
                if keep_traces and trace is not None:
                    traces[self.cohort.ids[c]] = trace
        return probs, seg_sums, seg_labels, traces

    def validate(self) -> tuple:
        """(total validation loss, mean AP across labels) on the middle stack of each validation volume.

        The middle stack keeps per-epoch validation cheap; thresholds and test
        metrics are computed on full volumes afterwards.
        """
        idx = self.stacks[self.middle]
        if self.task == "seg-only":
            sums = np.zeros((3, 4))
            for c in self.val_idx:
                sums += self._stack_sums(c, idx)
            return _dice_from_sums(sums), float("nan")
        probs, seg_sums, _, _ = self.predict(self.val_idx, idx=idx)
        y = self.targets[self.val_idx]
        p = np.clip(probs, 1e-7, 1 - 1e-7)
        bce = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
        loss = bce + (_dice_from_sums(seg_sums) if seg_sums is not None and not self.spec.frozen else 0.0)
        aps = [average_precision(probs[:, j], y[:, j]) for j in range(y.shape[1]) if 0 < y[:, j].sum() < y.shape[0]]
        return loss, float(np.mean(aps)) if aps else float("nan")

    def _stack_sums(self, c: int, idx) -> np.ndarray:
        bb = self.model.backbone
        bb.eval()
        with no_grad():
            probs, _ = bb(self._slices(self.cohort.volumes[c][idx]))
        g = one_hot(self.cohort.masks[c][idx], dtype=np.float64)
        p = probs.data.astype(np.float64)
        return np.stack([(p * g).sum(axis=(0, 2, 3)), (p * p).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))])

    # -- orchestration ----------------------------------------------------------
    def fit(self) -> RunResult:
        start = time.perf_counter()
        history = []
        best = (math.inf, -1, None)
        bad = 0
        stream = _stream(self.rng, self.train_idx.size)
        needs_cache = self.spec.head in ("gat", "sage") and self.spec.backbone is not None
        iterative = self.spec.head not in ("knn", "wknn")
        steps = math.ceil(self.tcfg.epoch_size / self.tcfg.batch)
        for epoch in range(self.tcfg.max_epochs if iterative else 0):
            seg_mode, cls = self._phase(epoch)
            if cls and needs_cache:
                self.refresh_cache(random=True)
            losses = [self._train_step(_take(stream, min(self.tcfg.batch, self.train_idx.size)), seg_mode, cls) for _ in range(steps)]
            validating = cls or (self.task == "seg-only" and seg_mode == "full")
            val_loss = val_ap = float("nan")
            if validating:
                val_loss, val_ap = self.validate()
                if val_loss < best[0]:
                    best, bad = (val_loss, epoch, self.model.state_dict()), 0
                else:
                    bad += 1
            history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "val_ap": val_ap})
            if epoch + 1 >= self._min_epochs() and validating and bad >= self.tcfg.patience:
                break
        if best[2] is not None:
            self.model.load_state_dict(best[2])
        result = self._final(history, best[1])
        result.seconds = time.perf_counter() - start
        return result

    def _final(self, history: list, best_epoch: int) -> RunResult:
        c = self.cohort
        res = RunResult(self.split, self.cfg, history, best_epoch, self.model.state_dict(), self.label_names, c.ids)
        res.spacing_mm = c.spacing_mm
        if self.spec.head in ("gat", "sage") and self.spec.backbone is not None:
            self.refresh_cache(random=False)
        if self.label_names:
            val_probs, _, _, _ = self.predict(self.val_idx)
            test_probs, seg_sums, seg_labels, traces = self.predict(self.test_idx, keep_traces=True)
            yv, yt = self.targets[self.val_idx], self.targets[self.test_idx]
            thresholds = np.array([youden_threshold(val_probs[:, j], yv[:, j]) for j in range(yv.shape[1])])
            res.val_ids = [c.ids[i] for i in self.val_idx]
            res.val_true, res.val_scores = yv, val_probs
            res.test_ids = [c.ids[i] for i in self.test_idx]
            res.test_true, res.test_scores = yt, test_probs
            res.thresholds = thresholds
            for j, name in enumerate(self.label_names):
                res.report.tasks[name] = evaluate_task(test_probs[:, j], yt[:, j], thresholds[j])
            res.traces = traces
        else:
            _, _, _, seg_labels = self._eval_node_inputs(self.test_idx)
        if self.spec.backbone == "unet":
            pred = np.concatenate([seg_labels[i] for i in self.test_idx])
            truth = np.concatenate([c.masks[i] for i in self.test_idx])
            res.report.segmentation = SegmentationMetrics.compute(pred, truth)
            res.test_masks = {c.ids[i]: seg_labels[i] for i in self.test_idx}
        return res


# -- experiment level -----------------------------------------------------------

def load_cohort(cfg: C.ExperimentConfig) -> Cohort:
    if cfg.cohort.path:
        return read_cohort(cfg.cohort.path)
    return generate(cfg.cohort.synth)


def run_dir(root, task: str, outer: int, inner: int) -> Path:
    return Path(root) / task / f"{outer}_{inner}"


def pretrained_state(cfg: C.ExperimentConfig, split: RunSplit) -> Optional[dict]:
    if not cfg.model.pretrained:
        return None
    root = Path(cfg.model.pretrained)
    candidates = [root / "checkpoint.bin", run_dir(root, "seg-only", split.outer, split.inner) / "checkpoint.bin"]
    for path in candidates:
        if path.exists():
            return load_checkpoint(path)
    raise FileNotFoundError(f"no seg-only checkpoint for run {split.outer}_{split.inner} under {root}")


def train_run(cohort: Cohort, split: RunSplit, cfg: C.ExperimentConfig, pretrained: Optional[dict] = None) -> RunResult:
    return Trainer(cohort, split, cfg, pretrained).fit()


def _run_one(args) -> RunResult:
    cohort, split, cfg, out = args
    res = train_run(cohort, split, cfg, pretrained_state(cfg, split))
    if out is not None:
        write_run(res, run_dir(out, cfg.train.task, split.outer, split.inner))
    return res


def run_experiment(cfg: C.ExperimentConfig, out: Optional[Path] = None, cohort: Optional[Cohort] = None, log=None, workers: int = 1) -> list:
    """Train every selected (outer, inner) split; each run writes only its own directory."""
    cohort = cohort if cohort is not None else load_cohort(cfg)
    plan = make_fold_plan(cohort.labels[:, 0], cfg.seed, replicate=cfg.runs.replicate)
    jobs = [(cohort, split, cfg, out) for split in plan.runs(cfg.runs.outer, cfg.runs.inner)]
    results = []
    if workers > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(workers, len(jobs))) as pool:
            for res in pool.imap(_run_one, jobs):
                if log is not None:
                    log(res)
                results.append(res)
        return results
    for job in jobs:
        res = _run_one(job)
        if log is not None:
            log(res)
        results.append(res)
    return results


def write_history_csv(path, history: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_loss", "val_ap"))
        for row in history:
            w.writerow((row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["val_ap"])))


def write_run(res: RunResult, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    snap = replace(res.config, runs=replace(res.config.runs, outer=[res.split.outer], inner=[res.split.inner]))
    C.dump(snap, path / "config.yaml")
    save_checkpoint(path / "checkpoint.bin", res.state)
    write_history_csv(path / "history.csv", res.history)
    for j, name in enumerate(res.labels):
        suffix = "" if len(res.labels) == 1 else f"_{name}"
        write_predictions_csv(path / f"predictions{suffix}.csv", res.test_ids, res.test_true[:, j], res.test_scores[:, j], res.thresholds[j])
        write_predictions_csv(path / f"val_predictions{suffix}.csv", res.val_ids, res.val_true[:, j], res.val_scores[:, j], res.thresholds[j])
    payload = res.report.to_dict()
    payload.update({"outer": res.split.outer, "inner": res.split.inner, "seed": res.split.seed, "best_epoch": res.best_epoch, "architecture": res.config.model.arch, "task": res.config.train.task})
    write_json(path / "metrics.json", payload)
    if res.test_masks:
        (path / "masks").mkdir(exist_ok=True)
        spacing = (res.spacing_mm,) * 3
        for pid, labels in res.test_masks.items():
            write_volume(path / "masks" / f"{pid}.json", labels.astype(np.uint8), spacing)
    if res.traces:
        with open(path / "attention.json", "w", encoding="utf-8") as fh:
            json.dump({pid: tr.to_dict() for pid, tr in res.traces.items()}, fh)
    return path


def ensemble_average(probabilities: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of member probabilities."""
    if len(probabilities) != 4:
        warnings.warn(f"ensembling {len(probabilities)} models instead of 4", RuntimeWarning)
    if not probabilities:
        raise ValueError("no models to ensemble")
    return np.mean(np.stack([np.asarray(p, dtype=float) for p in probabilities]), axis=0)


@dataclass
class EnsembleResult:
    ids: list
    labels: np.ndarray
    probabilities: np.ndarray
    threshold: float
    metrics: TaskMetrics
    member_metrics: list


def ensemble_predictions(members: Sequence[dict]) -> EnsembleResult:
    """Average inner-model test probabilities of one outer fold.

    Each member is a mapping with ``ids``, ``labels``, ``probabilities`` and
    ``threshold`` (as read from a predictions CSV).  The ensemble decision
    threshold is the mean of the members' validation thresholds.
    """
    if not members:
        raise ValueError("no models to ensemble")
    ids = list(members[0]["ids"])
    for m in members[1:]:
        if list(m["ids"]) != ids:
            raise ValueError("ensemble members were evaluated on different test patients")
    labels = np.asarray(members[0]["labels"])
    probs = ensemble_average([m["probabilities"] for m in members])
    threshold = float(np.mean([m["threshold"] for m in members]))
    member_metrics = [evaluate_task(m["probabilities"], labels, m["threshold"]) for m in members]
    return EnsembleResult(ids, labels, probs, threshold, evaluate_task(probs, labels, threshold), member_metrics)
