"""Cross-validation protocol: folds, model assembly, training, metrics, reports."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backbone import AlexNet, BackboneConfig, kaiming_uniform, save_weights
from .config import RunConfig
from .dsp import IMAGENET_MEAN, IMAGENET_STD, load_image
from .errors import DataError, ParameterError, StratificationError
from .fusion import GMU, ConcatHead
from .hypernet import EGEMAPS_DIM, NOISE_DIM, ConditionSampler, HyperHead, HyperNetwork, PlainHead

REPORT_SCHEMA_VERSION = 1
METRICS = ("precision", "recall", "f1", "accuracy", "specificity")


def label_from_severity(severity: int) -> int:
    """Speech severity 1-3 (severe, moderate, mild) -> dysarthric (1); 4 -> 0."""
    if severity not in (1, 2, 3, 4):
        raise ParameterError(f"severity must be in 1..4, got {severity!r}")
    return int(severity <= 3)


# ---------------------------------------------------------------------- data


@dataclass
class Sample:
    id: str
    severity: int
    images: dict = field(default_factory=dict)  # (task, kind) -> path or array
    features: np.ndarray | None = None
    sex: str = ""
    age: float | None = None

    def __post_init__(self):
        label_from_severity(self.severity)

    @property
    def label(self) -> int:
        return label_from_severity(self.severity)


class Corpus:
    def __init__(self, samples):
        self.samples = {}
        for s in samples:
            if s.id in self.samples:
                raise ParameterError(f"duplicate sample id {s.id!r}")
            self.samples[s.id] = s
        self._images = {}

    @property
    def ids(self) -> list[str]:
        return list(self.samples)

    def labels(self, ids=None) -> np.ndarray:
        ids = self.ids if ids is None else ids
        return np.array([self.samples[i].label for i in ids], dtype=np.int64)

    def has(self, sid, task, kind) -> bool:
        return (task, kind) in self.samples[sid].images

    def image(self, sid, task, kind, normalize="unit") -> np.ndarray:
        key = (sid, task, kind)
        if key not in self._images:
            try:
                src = self.samples[sid].images[(task, kind)]
            except KeyError:
                raise DataError(f"no cached {kind} image for sample {sid!r}, task {task!r}") from None
            arr = load_image(src) if isinstance(src, (str, Path)) else np.asarray(src, dtype=np.float32)
            self._images[key] = arr
        img = self._images[key]
        if normalize == "imagenet":
            mean = np.asarray(IMAGENET_MEAN, dtype=np.float32)[:, None, None]
            std = np.asarray(IMAGENET_STD, dtype=np.float32)[:, None, None]
            img = (img - mean) / std
        return img

    def images(self, ids, task, kind, normalize="unit") -> np.ndarray:
        return np.stack([self.image(i, task, kind, normalize) for i in ids])

    def features(self, ids) -> np.ndarray:
        rows = []
        for i in ids:
            f = self.samples[i].features
            if f is None:
                raise DataError(f"sample {i!r} has no condition feature row")
            rows.append(f)
        return np.asarray(rows, dtype=np.float64)

    def complete_ids(self, tasks, kind, need_features=False):
        keep, dropped = [], []
        for sid, s in self.samples.items():
            ok = all((t, kind) in s.images for t in tasks) and (s.features is not None or not need_features)
            (keep if ok else dropped).append(sid)
        return keep, dropped

    @classmethod
    def from_index(cls, cache_dir, egemaps_csv=None):
        cache_dir = Path(cache_dir)
        index_path = cache_dir / "index.json"
        if not index_path.is_file():
            raise DataError(f"no feature cache at {cache_dir} (run `hyperdys featurize` first)")
        index = json.loads(index_path.read_text())
        features = read_egemaps_csv(egemaps_csv) if egemaps_csv else {}
        samples = {}
        for e in index["entries"]:
            s = samples.get(e["id"])
            if s is None:
                s = samples[e["id"]] = Sample(
                    e["id"], int(e["severity"]), sex=e.get("sex", ""), age=e.get("age"),
                    features=features.get(e["id"]),
                )
            elif s.severity != int(e["severity"]):
                raise DataError(f"sample {e['id']!r} has conflicting severities across tasks")
            s.images[(e["task"], e["kind"])] = str(cache_dir / e["path"])
        return cls(samples.values())


def read_egemaps_csv(path) -> dict[str, np.ndarray]:
    """Header row, then: sample id, 88 float features."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty feature CSV")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 1 + EGEMAPS_DIM:
                raise DataError(f"{path}:{lineno}: expected {1 + EGEMAPS_DIM} columns, got {len(row)}")
            try:
                values = np.array([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(values)):
                raise DataError(f"{path}:{lineno}: non-finite feature")
            out[row[0]] = values
    return out


# --------------------------------------------------------------------- folds


@dataclass
class FoldPlan:
    k: int
    reps: int
    seed: int
    assignments: list  # per repetition: fold index of every sample (in input order)

    def test_indices(self, rep, fold) -> np.ndarray:
        return np.flatnonzero(self.assignments[rep] == fold)

    def train_indices(self, rep, fold) -> np.ndarray:
        return np.flatnonzero(self.assignments[rep] != fold)

    def folds(self, rep):
        return [self.test_indices(rep, f) for f in range(self.k)]


def make_folds(labels, k: int = 5, reps: int = 4, seed: int = 0) -> FoldPlan:
    """Stratified shuffled k-fold partitions, ``reps`` times.

    Samples are shuffled within each class, the classes are laid end to end,
    and position p goes to fold p mod k; this keeps both the per-fold class
    counts and the fold sizes within one of each other.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < k):
        small = {int(c): int(n) for c, n in zip(classes, counts) if n < k}
        raise StratificationError(f"classes with fewer than k={k} members: {small}")
    rng = np.random.default_rng(seed)
    assignments = []
    for _ in range(reps):
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in classes])
        fold_of = np.empty(len(labels), dtype=np.int64)
        fold_of[order] = np.arange(len(order)) % k
        assignments.append(fold_of)
    return FoldPlan(k, reps, seed, assignments)


# ------------------------------------------------------------------- metrics


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def counts_from_predictions(pred, labels) -> Counts:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return Counts(
        tp=int(np.sum((pred == 1) & (labels == 1))),
        fp=int(np.sum((pred == 1) & (labels == 0))),
        tn=int(np.sum((pred == 0) & (labels == 0))),
        fn=int(np.sum((pred == 0) & (labels == 1))),
    )


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to class 0
    return np.argmax(logits, axis=1)


def compute_metrics(counts: Counts) -> dict:
    """Precision/recall/F1/accuracy/specificity; empty denominators give 0 and a flag."""
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    if min(tp, fp, tn, fn) < 0:
        raise ParameterError(f"negative confusion counts: {counts}")
    if counts.total == 0:
        raise ParameterError("confusion counts are all zero")
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    specificity = ratio(tn, tn + fp, "specificity")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "accuracy": (tp + tn) / counts.total,
        "specificity": specificity,
        "undefined": flags,
    }


def aggregate(rows) -> dict:
    """Mean and sample (n-1) standard deviation of each metric over fold evaluations."""
    if len(rows) < 2:
        raise ParameterError(f"need at least 2 fold evaluations, got {len(rows)}")
    out = {}
    for m in METRICS:
        vals = np.array([r[m] for r in rows], dtype=np.float64)
        out[m] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1))}
    return out


# --------------------------------------------------------------------- model


def _seed_from(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class DysarthriaModel:
    """Backbone + one of the four heads, wired per ``RunConfig``.

    With ``cfg.freeze`` the inputs are cached trunk activations (n, 4096)
    and only the 768-d projection and head are trained; otherwise the inputs
    are images and every parameter trains.
    """

    def __init__(self, cfg: RunConfig, seed: int, backbone: AlexNet | None = None):
        self.cfg = cfg
        s_backbone, s_head, s_cond = (_seed_from(seed, i) for i in range(3))
        if backbone is None:
            bcfg = BackboneConfig(cfg.pretrained, dropout_rate=cfg.dropout, weights_path=cfg.weights_path)
            backbone = AlexNet(bcfg, seed=s_backbone)
        else:
            rng = np.random.default_rng(s_backbone)
            for name in backbone.projection_names():
                t = backbone.params[name]
                if name.endswith("weight"):
                    t.data = kaiming_uniform(rng, t.shape, t.shape[0], dtype=t.data.dtype)
                else:
                    t.data = np.zeros_like(t.data)
                t.grad = None
        self.backbone = backbone
        self.sampler = None
        self.cond_mean = self.cond_std = None
        if cfg.head == "hypernet":
            dim = NOISE_DIM if cfg.condition_mode == "noise" else EGEMAPS_DIM
            hyper = HyperNetwork(dim, cfg.hyper_hidden, bias_mode=cfg.hyper_bias, seed=s_head)
            self.head = HyperHead(hyper, cfg.condition_mode)
            if cfg.condition_mode == "noise":
                self.sampler = ConditionSampler(s_cond, cfg.condition_policy)
        elif cfg.head == "plain":
            self.head = PlainHead(seed=s_head)
        elif cfg.head == "gmu":
            self.head = GMU(hidden=cfg.gmu_hidden, seed=s_head)
        else:
            self.head = ConcatHead(seed=s_head)
        self.params = ad.ParamStore()
        for store in (backbone.params, self.head.params):
            for name, t in store.items():
                self.params.params[name] = t
        if cfg.freeze:
            self.trainable = backbone.projection_names() + list(self.head.params)
        else:
            self.trainable = list(self.params)

    def fit_condition_stats(self, train_features: np.ndarray):
        self.cond_mean = train_features.mean(axis=0)
        std = train_features.std(axis=0)
        self.cond_std = np.where(std > 0, std, 1.0)

    def condition(self, cond_rows, train: bool):
        if self.cfg.condition_mode == "data":
            if self.cond_mean is None:
                raise ParameterError("data-conditioned model needs fit_condition_stats before use")
            z = (np.asarray(cond_rows) - self.cond_mean) / self.cond_std
            return ad.Tensor(z.astype(np.float32))
        c = self.sampler.for_step() if train else self.sampler.for_eval()
        return ad.Tensor(c.values[None].astype(np.float32))

    def features(self, inputs: dict, train: bool = False, rng=None) -> dict:
        out = {}
        for task in self.cfg.tasks:
            x = ad.Tensor(inputs[task])
            if self.cfg.freeze:
                out[task] = self.backbone.project(x)
            else:
                out[task] = self.backbone(x, train=train, rng=rng)
        return out

    def logits(self, inputs: dict, cond_rows=None, train: bool = False, rng=None) -> ad.Tensor:
        feats = self.features(inputs, train, rng)
        kind = self.cfg.head
        if kind == "hypernet":
            return self.head(feats[self.cfg.task], self.condition(cond_rows, train))
        if kind == "plain":
            return self.head(feats[self.cfg.task])
        if kind == "gmu":
            return self.head(feats["pa"], feats["ta"])
        return self.head(feats)


class InputSource:
    """Supplies model inputs for a list of sample ids: images, or cached trunk activations."""

    def __init__(self, corpus: Corpus, cfg: RunConfig, trunk_cache: dict | None = None):
        self.corpus = corpus
        self.cfg = cfg
        self.trunk_cache = trunk_cache

    def batch(self, ids) -> dict:
        out = {}
        for task in self.cfg.tasks:
            if self.trunk_cache is not None:
                try:
                    out[task] = np.stack([self.trunk_cache[(i, task)] for i in ids])
                except KeyError as exc:
                    raise DataError(f"no cached trunk activation for {exc.args[0]}") from None
            else:
                out[task] = self.corpus.images(ids, task, self.cfg.input_kind, self.cfg.normalize)
        return out

    def conditions(self, ids):
        if self.cfg.head == "hypernet" and self.cfg.condition_mode == "data":
            return self.corpus.features(ids)
        return None


def compute_trunk_cache(backbone: AlexNet, corpus: Corpus, ids, cfg: RunConfig, batch_size: int = 16) -> dict:
    """Eval-mode trunk activations (4096-d) for every (id, task)."""
    cache = {}
    for task in cfg.tasks:
        for start in range(0, len(ids), batch_size):
            chunk = ids[start : start + batch_size]
            x = corpus.images(chunk, task, cfg.input_kind, cfg.normalize)
            h = backbone.trunk(ad.Tensor(x), train=False).data
            for sid, row in zip(chunk, h):
                cache[(sid, task)] = row.astype(np.float32)
    return cache


def train_fold(cfg: RunConfig, model: DysarthriaModel, source: InputSource, train_ids, seed: int) -> list[float]:
    """Mini-batch training for ``cfg.epochs`` epochs; returns the mean loss per epoch."""
    train_ids = list(train_ids)
    if not train_ids:
        raise ParameterError("empty training set")
    for task in cfg.tasks:
        for sid in train_ids:
            if source.trunk_cache is None and not source.corpus.has(sid, task, cfg.input_kind):
                raise DataError(f"no cached {cfg.input_kind} image for sample {sid!r}, task {task!r}")
    labels = source.corpus.labels(train_ids)
    if cfg.head == "hypernet" and cfg.condition_mode == "data":
        model.fit_condition_stats(source.corpus.features(train_ids))
    rng = np.random.default_rng(_seed_from(seed, 101))
    drop_rng = np.random.default_rng(_seed_from(seed, 102))
    step = ad.adam_step if cfg.optimizer == "adam" else ad.sgd_step
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_ids))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            ids = [train_ids[i] for i in idx]
            logits = model.logits(source.batch(ids), source.conditions(ids), train=True, rng=drop_rng)
            loss = ad.softmax_cross_entropy(logits, labels[idx])
            model.params.zero_grad()
            loss.backward()
            grads = {n: model.params[n].grad for n in model.trainable}
            for n, g in grads.items():
                if g is None:
                    grads[n] = np.zeros_like(model.params[n].data)
            step(model.params, grads, lr=cfg.lr, names=model.trainable)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    return history


def model_logits(model: DysarthriaModel, source: InputSource, ids, batch_size: int = 16) -> np.ndarray:
    ids = list(ids)
    out = []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        out.append(model.logits(source.batch(chunk), source.conditions(chunk), train=False).data)
    return np.concatenate(out, axis=0)


def evaluate(model: DysarthriaModel, source: InputSource, test_ids) -> Counts:
    test_ids = list(test_ids)
    if not test_ids:
        raise ParameterError("empty test set")
    logits = model_logits(model, source, test_ids)
    return counts_from_predictions(predict(logits), source.corpus.labels(test_ids))


# ------------------------------------------------------------------ protocol


def fold_seed(run_seed: int, rep: int, fold: int) -> int:
    return _seed_from(run_seed, rep, fold)


def run_protocol(cfg: RunConfig, corpus: Corpus, out_dir=None, extra_meta=None, log=None) -> dict:
    """Full k x r cross-validation; returns (and optionally writes) the report dict."""
    cfg.check_runnable()
    started = time.time()
    need_features = cfg.head == "hypernet" and cfg.condition_mode == "data"
    ids, dropped = corpus.complete_ids(cfg.tasks, cfg.input_kind, need_features)
    if not ids:
        raise DataError(f"no samples have all of tasks {cfg.tasks} as {cfg.input_kind} images")
    labels = corpus.labels(ids)
    plan = make_folds(labels, cfg.folds, cfg.repetitions, cfg.seed)

    shared_backbone = trunk_cache = None
    if cfg.freeze:
        bcfg = BackboneConfig(cfg.pretrained, dropout_rate=cfg.dropout, weights_path=cfg.weights_path)
        shared_backbone = AlexNet(bcfg, seed=_seed_from(cfg.seed, 7))
        trunk_cache = compute_trunk_cache(shared_backbone, corpus, ids, cfg)
    source = InputSource(corpus, cfg, trunk_cache)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if cfg.save_checkpoints:
            (out_dir / "checkpoints").mkdir(exist_ok=True)

    per_fold, seeds = [], {"run": cfg.seed, "folds": {}}
    for rep in range(cfg.repetitions):
        for fold in range(cfg.folds):
            fs = fold_seed(cfg.seed, rep, fold)
            seeds["folds"][f"{rep}.{fold}"] = fs
            train_ids = [ids[i] for i in plan.train_indices(rep, fold)]
            test_ids = [ids[i] for i in plan.test_indices(rep, fold)]
            model = DysarthriaModel(cfg, fs, backbone=shared_backbone)
            history = train_fold(cfg, model, source, train_ids, fs)
            counts = evaluate(model, source, test_ids)
            metrics = compute_metrics(counts)
            per_fold.append(
                {
                    "rep": rep,
                    "fold": fold,
                    "n_train": len(train_ids),
                    "n_test": len(test_ids),
                    "counts": asdict(counts),
                    "metrics": metrics,
                    "loss_history": history,
                }
            )
            if out_dir is not None and cfg.save_checkpoints:
                save_weights(model.params, out_dir / "checkpoints" / f"rep{rep}_fold{fold}.hwts", model.trainable)
            if log is not None:
                log(f"rep {rep} fold {fold}: accuracy {metrics['accuracy']:.4f} f1 {metrics['f1']:.4f}")

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": asdict(cfg),
        "per_fold": per_fold,
        "aggregate": aggregate([r["metrics"] for r in per_fold]),
        "meta": {
            "head": cfg.head,
            "tasks": list(cfg.tasks),
            "n_samples": len(ids),
            "n_positive": int(labels.sum()),
            "excluded_ids": dropped,
            "n_evaluations": len(per_fold),
            "seeds": seeds,
            "aggregation": (
                f"mean and sample std over all {cfg.folds} folds x {cfg.repetitions} repetitions "
                f"= {len(per_fold)} fold evaluations"
            ),
            "timestamps": {"started": started, "finished": time.time()},
        },
    }
    if extra_meta:
        report["meta"].update(extra_meta)
    if out_dir is not None:
        write_report(report, out_dir / "report.json")
    return report


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


def strip_timestamps(report: dict) -> dict:
    out = json.loads(json.dumps(report))
    out.get("meta", {}).pop("timestamps", None)
    return out

