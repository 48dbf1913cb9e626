"""Patient-grouped cross-validation and region-sampled training of the ViT classifier."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ClassWeights
from .embed import import_embeddings
from .errors import (
    ConfigError,
    ContractError,
    DegenerateSplitError,
    NonFiniteError,
    ParseError,
    TrainingDivergedError,
)
from .metrics import confusion_from_labels, prf
from .preprocess import load_patch_grid
from .vit import (
    ModelCheckpoint,
    ModelConfig,
    Region,
    as_param_tensors,
    encode_batch,
    fuse_and_classify,
    init_params,
    pack_regions,
)

log = logging.getLogger(__name__)


def stable_hash(*parts):
    """64-bit hash of the parts' string forms; stable across processes and runs."""
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass
class FoldAssignment:
    k: int
    slide_fold: dict
    patient_fold: dict

    def slides_in(self, fold):
        return sorted(s for s, f in self.slide_fold.items() if f == fold)

    def validate(self, manifest):
        if set(self.slide_fold) != {e.slide_id for e in manifest}:
            raise ContractError("folds do not partition the manifest")
        for e in manifest:
            if self.slide_fold[e.slide_id] != self.patient_fold[e.patient_id]:
                raise ContractError(f"slide {e.slide_id} is not in its patient's fold")
        for f in range(self.k):
            if not self.slides_in(f):
                raise ContractError(f"fold {f} is empty")
        return self


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    regions_per_iter_train: int = 4
    regions_per_slide_val: int = 175
    batch_size: int = 16
    patience: int = 10
    max_epochs: int = 60
    seed: int = 0
    k_folds: int = 5
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # z-score inputs with training-split statistics (stored in the checkpoint)
    normalize_inputs: bool = True
    # a class absent from a training split gets this weight instead of raising
    min_class_weight: float | None = None
    eval_chunk: int = 512

    def __post_init__(self):
        ints = ("regions_per_iter_train", "regions_per_slide_val", "batch_size", "patience",
                "max_epochs", "k_folds", "eval_chunk")
        for name in ints:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    @property
    def region_side(self):
        return self.model.region_side


@dataclass(frozen=True)
class PredictionRecord:
    slide_id: str
    patient_id: str
    true_label: int
    probabilities: tuple
    predicted_label: int
    fold: int

    @classmethod
    def from_probs(cls, slide_id, patient_id, true_label, probs, fold):
        probs = tuple(float(p) for p in probs)
        # np.argmax returns the first maximum: ties go to the lower grade
        return cls(slide_id, patient_id, int(true_label), probs, int(np.argmax(probs)), int(fold))


# --------------------------------------------------------------------------
# folds

def make_folds(manifest, k=5, seed=0):
    """Greedy class-balanced packing of patients into ``k`` folds.

    Patients go in order of descending slide count (ties broken by a seeded
    hash of the patient id) to the fold where their slides add the least
    class-normalized load.
    """
    patients = manifest.patients()
    if not patients:
        raise ContractError("cannot fold an empty manifest")
    if k > len(patients):
        raise ConfigError(f"k={k} exceeds the number of patients ({len(patients)})")
    label = {e.slide_id: e.class_label for e in manifest}
    class_total = np.bincount([e.class_label for e in manifest], minlength=4).astype(float)
    target = np.maximum(class_total / k, 1.0)
    target_n = max(len(manifest) / k, 1.0)

    order = sorted(patients, key=lambda p: (-len(patients[p]), stable_hash(seed, p), p))
    load = np.zeros((k, 4))
    count = np.zeros(k)
    patient_fold = {}
    for p in order:
        add = np.bincount([label[s] for s in patients[p]], minlength=4).astype(float)
        n = float(len(patients[p]))
        # increase of sum-of-squares load for each candidate fold
        cost = (((load + add) / target) ** 2 - (load / target) ** 2).sum(axis=1) \
            + ((count + n) / target_n) ** 2 - (count / target_n) ** 2
        f = int(np.argmin(cost))
        patient_fold[p] = f
        load[f] += add
        count[f] += n
    slide_fold = {e.slide_id: patient_fold[e.patient_id] for e in manifest}
    return FoldAssignment(k, slide_fold, patient_fold).validate(manifest)


# --------------------------------------------------------------------------
# regions

def enumerate_windows(grid, region_side):
    """All tissue-bearing ``region_side`` windows of the grid, stride 1, row-major by origin.

    Returns a list of (origin, member_indices, rel_coords).
    """
    if not grid.records:
        raise ContractError(f"{grid.slide_id}: cannot sample regions from an empty patch grid")
    coords = grid.coords()
    ncols = max(int(coords[:, 0].max()) + 1, grid.shape[0])
    nrows = max(int(coords[:, 1].max()) + 1, grid.shape[1])
    occ = np.full((nrows, ncols), -1, dtype=np.int64)
    occ[coords[:, 1], coords[:, 0]] = np.arange(len(coords))
    out = []
    for oy in range(max(1, nrows - region_side + 1)):
        for ox in range(max(1, ncols - region_side + 1)):
            win = occ[oy:oy + region_side, ox:ox + region_side]
            dy, dx = np.nonzero(win >= 0)
            if dy.size:
                out.append(((ox, oy), tuple(int(i) for i in win[dy, dx]),
                            tuple((int(a), int(b)) for a, b in zip(dx, dy))))
    return out


def _to_region(grid, window, region_side):
    origin, members, rel = window
    return Region(grid.slide_id, origin, members, rel, region_side, grid.patch_size_px, grid.downsample)


def sample_regions(grid, n, region_side, seed=0, mode="train", windows=None):
    """Draw ``n`` training regions, or enumerate up to ``n`` validation regions.

    ``train``: origins uniform over tissue-bearing windows, without replacement
    when at least ``n`` exist and with replacement otherwise.
    ``val``: the first ``n`` tissue-bearing windows in row-major order.
    """
    if windows is None:
        windows = enumerate_windows(grid, region_side)
    if mode == "val":
        chosen = windows[:n]
    elif mode == "train":
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(windows), size=n, replace=len(windows) < n)
        chosen = [windows[i] for i in idx]
    else:
        raise ContractError(f"unknown sampling mode {mode!r}")
    return [_to_region(grid, w, region_side) for w in chosen]


# --------------------------------------------------------------------------
# class weights

def compute_class_weights(labels, floor=None):
    """``w_c = N / (C * n_c)`` over the given labels (a manifest subset or label list)."""
    if hasattr(labels, "entries"):
        labels = [e.class_label for e in labels.entries]
    counts = np.bincount(np.asarray(list(labels), dtype=np.int64), minlength=4).astype(float)
    n = counts.sum()
    missing = [c for c in range(4) if counts[c] == 0]
    if missing and floor is None:
        raise DegenerateSplitError(f"classes {missing} are absent from the training split")
    w = np.where(counts > 0, n / (4 * np.maximum(counts, 1)), floor if floor is not None else 1.0)
    return ClassWeights(tuple(float(v) for v in w))


# --------------------------------------------------------------------------
# embedding stores

class DirectoryStore:
    """Reads ``patches/{slide_id}.jsonl`` and ``embeddings/{slide_id}.hge`` under ``root``."""

    def __init__(self, root):
        self.root = Path(root)

    def get(self, slide_id, purpose="train"):
        grid = load_patch_grid(self.root / "patches" / f"{slide_id}.jsonl")
        emb = import_embeddings(self.root / "embeddings" / f"{slide_id}.hge", grid=grid)
        return emb, grid


class MemoryStore:
    def __init__(self, items):
        self.items = dict(items)  # slide_id -> (EmbeddingMatrix, PatchGrid)

    def get(self, slide_id, purpose="train"):
        return self.items[slide_id]


class _SlideData:
    __slots__ = ("rows", "grid", "windows")

    def __init__(self, rows, grid, windows):
        self.rows, self.grid, self.windows = rows, grid, windows


def _load(store, slide_ids, purpose, region_side, norm=None):
    out = {}
    for sid in slide_ids:
        emb, grid = store.get(sid, purpose=purpose)
        rows = emb.rows
        if norm is not None:
            rows = (rows - norm[0]) / norm[1]
        out[sid] = _SlideData(rows, grid, enumerate_windows(grid, region_side))
    return out


# --------------------------------------------------------------------------
# training

def _params_to_arrays(params):
    return {k: v.data.copy() for k, v in params.items()}


def predict_slides(data, slide_ids, cfg, params, n_regions, chunk=512):
    """Class probabilities per slide from the mean CLS vector over its validation regions."""
    regions, rows, owner = [], [], []
    for i, sid in enumerate(slide_ids):
        d = data[sid]
        for reg in sample_regions(d.grid, n_regions, cfg.region_side, mode="val", windows=d.windows):
            regions.append(reg)
            rows.append(d.rows)
            owner.append(i)
    owner = np.asarray(owner)
    cls_all = np.zeros((len(regions), cfg.d_model))
    with ad.no_grad():
        # sort by member count so padding stays small
        order = np.argsort([len(r.members) for r in regions], kind="stable")
        for start in range(0, len(order), chunk):
            sel = order[start:start + chunk]
            x, c, v = pack_regions([rows[j] for j in sel], [regions[j] for j in sel])
            cls, _ = encode_batch(x, c, v, cfg, params, train=False)
            cls_all[sel] = cls.data
        fused = np.zeros((len(slide_ids), cfg.d_model))
        np.add.at(fused, owner, cls_all)
        fused /= np.bincount(owner, minlength=len(slide_ids))[:, None]
        logits = fused @ params["head.w"].data + params["head.b"].data
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def _weighted_f1(labels, probs):
    return prf(confusion_from_labels(labels, np.argmax(probs, axis=1))).weighted["f1"]


@dataclass
class FoldResult:
    checkpoint: ModelCheckpoint
    predictions: list
    log: list


def train_fold(fold, folds, manifest, store, cfg, evaluator=None):
    """Train on every fold but ``fold``; early-stop on held-out weighted F1.

    ``evaluator(epoch, params) -> float`` replaces the held-out weighted F1 used
    for model selection (predictions still come from the selected parameters).
    Returns a FoldResult with the best checkpoint, held-out predictions and the
    per-epoch log.
    """
    mcfg = cfg.model
    seed = cfg.seed + fold
    entries = {e.slide_id: e for e in manifest}
    train_ids = [e.slide_id for e in manifest if folds.slide_fold[e.slide_id] != fold]
    val_ids = [e.slide_id for e in manifest if folds.slide_fold[e.slide_id] == fold]
    if not train_ids or not val_ids:
        raise DegenerateSplitError(f"fold {fold} leaves an empty training or held-out split")
    weights = compute_class_weights([entries[s].class_label for s in train_ids], floor=cfg.min_class_weight)

    train = _load(store, train_ids, "train", mcfg.region_side)
    for sid in train_ids:
        if train[sid].rows.shape[1] != mcfg.input_dim:
            raise ContractError(f"{sid}: embedding dim {train[sid].rows.shape[1]} != input_dim {mcfg.input_dim}")
    if cfg.normalize_inputs:
        allrows = np.concatenate([train[s].rows for s in train_ids])
        mu = allrows.mean(axis=0)
        sd = allrows.std(axis=0)
        sd = np.where(sd > 1e-6, sd, 1.0)
        for d in train.values():
            d.rows = (d.rows - mu) / sd
        norm = (mu, sd)
    else:
        norm = (np.zeros(mcfg.input_dim), np.ones(mcfg.input_dim))

    params = init_params(mcfg, seed=stable_hash("init", seed))
    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
    train_labels = np.array([entries[s].class_label for s in train_ids])
    val = None
    val_labels = np.array([entries[s].class_label for s in val_ids])

    run_log = []
    best = None  # (f1, epoch, param arrays, adam snapshot, probs)
    step = 0
    w = np.asarray(weights)
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng(stable_hash("epoch", seed, epoch))
        order = rng.permutation(len(train_ids))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            regions, rows = [], []
            for j in batch:
                d = train[train_ids[j]]
                regions += sample_regions(d.grid, cfg.regions_per_iter_train, mcfg.region_side,
                                          seed=stable_hash("regions", seed, epoch, j), windows=d.windows)
                rows += [d.rows] * cfg.regions_per_iter_train
            step += 1
            try:
                x, c, v = pack_regions(rows, regions)
                cls, _ = encode_batch(x, c, v, mcfg, params, train=True, seed=seed, step=step)
                cls = ad.reshape(cls, (len(batch), cfg.regions_per_iter_train, mcfg.d_model))
                logits = fuse_and_classify(cls, mcfg, params)
                loss = ad.weighted_cross_entropy(logits, train_labels[batch], w)
                names = list(params)
                grads = ad.grad(loss, [params[n] for n in names])
                for g in grads:
                    if not np.all(np.isfinite(g)):
                        raise NonFiniteError("non-finite gradient")
            except NonFiniteError as exc:
                raise TrainingDivergedError(str(exc), epoch) from exc
            ad.adam_step(params, dict(zip(names, grads)), adam)
            losses.append(float(loss.data))
        train_loss = float(np.mean(losses))
        if not math.isfinite(train_loss):
            raise TrainingDivergedError("non-finite training loss", epoch)

        if val is None:
            val = _load(store, val_ids, "eval", mcfg.region_side, norm=norm)
        probs = predict_slides(val, val_ids, mcfg, params, cfg.regions_per_slide_val, cfg.eval_chunk)
        f1 = float(evaluator(epoch, params)) if evaluator is not None else _weighted_f1(val_labels, probs)
        run_log.append({"fold": fold, "epoch": epoch, "train_loss": train_loss, "val_weighted_f1": f1})
        log.info("fold %d epoch %d loss %.4f val wF1 %.4f", fold, epoch, train_loss, f1)
        if best is None or f1 > best[0]:
            best = (f1, epoch, _params_to_arrays(params), copy.deepcopy(adam), probs)
        elif epoch - best[1] >= cfg.patience:
            break

    f1, best_epoch, arrays, adam_snap, probs = best
    meta = {"fold": fold, "epoch": best_epoch, "best_weighted_f1": f1, "epochs_run": len(run_log),
            "class_weights": list(weights.w), "seed": seed}
    ckpt = ModelCheckpoint(mcfg, arrays, adam_snap, meta, {"input_mean": norm[0], "input_std": norm[1]})
    preds = [PredictionRecord.from_probs(s, entries[s].patient_id, entries[s].class_label, probs[i], fold)
             for i, s in enumerate(val_ids)]
    preds.sort(key=lambda r: r.slide_id)
    return FoldResult(ckpt, preds, run_log)


@dataclass
class CVResult:
    predictions: list
    checkpoints: list
    log: list
    folds: FoldAssignment


def _fold_job(args):
    return train_fold(*args)


def run_cross_validation(manifest, store, cfg, workers=1):
    """Train every fold independently; held-out predictions cover each slide exactly once."""
    folds = make_folds(manifest, cfg.k_folds, cfg.seed)
    jobs = [(f, folds, manifest, store, cfg) for f in range(cfg.k_folds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]
    preds = [p for r in results for p in r.predictions]
    return CVResult(preds, [r.checkpoint for r in results], [e for r in results for e in r.log], folds)


# --------------------------------------------------------------------------
# persistence

def write_predictions(records, path):
    with open(path, "w") as fh:
        for r in records:
            rec = {"slide_id": r.slide_id, "patient_id": r.patient_id, "fold": r.fold,
                   "true_label": r.true_label}
            rec.update({f"p{i}": p for i, p in enumerate(r.probabilities)})
            rec["predicted_label"] = r.predicted_label
            fh.write(json.dumps(rec) + "\n")


def read_predictions(path):
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                out.append(PredictionRecord(rec["slide_id"], rec["patient_id"], int(rec["true_label"]),
                                            tuple(float(rec[f"p{i}"]) for i in range(4)),
                                            int(rec["predicted_label"]), int(rec["fold"])))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ParseError(f"bad prediction record: {exc}", line=lineno) from None
    return out


def write_run_log(entries, path):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")


def desk_train_config(**kw):
    """Acceptance-scale defaults: 4 heads x 2 layers, d_model 64, lr 1e-3."""
    model = kw.pop("model", None) or ModelConfig.desk()
    return TrainConfig(model=model, **{"lr": 1e-3, **kw})


def with_seed(cfg, seed):
    return replace(cfg, seed=seed)
