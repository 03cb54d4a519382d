"""Manifest ingestion, corpus featurization, and the synthetic stand-in corpus."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import TASKS, normalize_task
from .dsp import DspConfig, featurize_clip, load_wav, save_image, write_wav
from .errors import HyperdysError, ValidationError
from .hypernet import EGEMAPS_DIM

MANIFEST_COLUMNS = ("id", "wav_path", "task", "severity", "sex", "age")
INDEX_VERSION = 1


@dataclass
class ManifestRow:
    id: str
    wav_path: Path
    task: str
    severity: int
    sex: str = ""
    age: float | None = None


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    rows, seen, problems = [], set(), []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS[:4] if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{path}: manifest lacks columns {missing}")
        for lineno, raw in enumerate(reader, start=2):
            where = f"{path}:{lineno} (id {raw.get('id')!r})"
            try:
                task = normalize_task(raw["task"])
            except HyperdysError as exc:
                problems.append(f"{where}: {exc}")
                continue
            try:
                severity = int(raw["severity"])
            except (TypeError, ValueError):
                severity = None
            if severity not in (1, 2, 3, 4):
                problems.append(f"{where}: severity {raw['severity']!r} not in 1..4")
                continue
            key = (raw["id"], task)
            if key in seen:
                problems.append(f"{where}: duplicate (id, task) {key}")
                continue
            seen.add(key)
            age = raw.get("age")
            wav = Path(raw["wav_path"])
            rows.append(
                ManifestRow(
                    raw["id"],
                    wav if wav.is_absolute() else path.parent / wav,
                    task,
                    severity,
                    raw.get("sex") or "",
                    float(age) if age not in (None, "") else None,
                )
            )
    if problems:
        raise ValidationError("invalid manifest rows:\n  " + "\n  ".join(problems))
    return rows


def _content_hash(wav_bytes: bytes, dsp: DspConfig, kind: str) -> str:
    h = hashlib.sha256(wav_bytes)
    h.update(json.dumps(asdict(dsp), sort_keys=True).encode())
    h.update(kind.encode())
    return h.hexdigest()


@dataclass
class FeaturizeResult:
    written: int
    skipped: int
    errors: list


def _featurize_one(args):
    row, kind, dsp, target, digest = args
    image = featurize_clip(load_wav(row.wav_path), kind, dsp, normalize="unit")
    save_image(target, image)
    return digest


def featurize(manifest_rows, out_dir, dsp: DspConfig = DspConfig(), kinds=("logmel",), workers: int = 1) -> FeaturizeResult:
    """Write one HDIM image per (row, kind) plus ``index.json``; up-to-date entries are skipped.

    Images are stored min-max scaled to [0, 1]; the image-model
    standardization is applied at load time when a run needs it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index_path = out_dir / "index.json"
    old = {}
    if index_path.is_file():
        for e in json.loads(index_path.read_text()).get("entries", []):
            old[(e["id"], e["task"], e["kind"])] = e

    entries, jobs, errors, skipped = [], [], [], 0
    for row in manifest_rows:
        try:
            wav_bytes = Path(row.wav_path).read_bytes()
        except OSError as exc:
            errors.append(f"{row.id}/{row.task}: cannot read {row.wav_path}: {exc}")
            continue
        for kind in kinds:
            name = f"{_safe(row.id)}__{row.task}__{kind}.hdim"
            digest = _content_hash(wav_bytes, dsp, kind)
            entry = {
                "id": row.id,
                "task": row.task,
                "kind": kind,
                "severity": row.severity,
                "sex": row.sex,
                "age": row.age,
                "path": name,
                "hash": digest,
            }
            prev = old.get((row.id, row.task, kind))
            if prev is not None and prev.get("hash") == digest and (out_dir / name).is_file():
                skipped += 1
                entries.append(entry)
                continue
            jobs.append((row, kind, dsp, out_dir / name, entry))

    def record(job, exc):
        row, kind = job[0], job[1]
        errors.append(f"{row.id}/{row.task}/{kind}: {exc}")

    written = 0
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            futures = [(j, pool.submit(_featurize_one, (j[0], j[1], j[2], j[3], j[4]["hash"]))) for j in jobs]
            for job, fut in futures:
                try:
                    fut.result()
                    entries.append(job[4])
                    written += 1
                except HyperdysError as exc:
                    record(job, exc)
    else:
        for job in jobs:
            try:
                _featurize_one((job[0], job[1], job[2], job[3], job[4]["hash"]))
                entries.append(job[4])
                written += 1
            except HyperdysError as exc:
                record(job, exc)

    entries.sort(key=lambda e: (e["id"], e["task"], e["kind"]))
    index = {"version": INDEX_VERSION, "dsp": asdict(dsp), "entries": entries}
    index_path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return FeaturizeResult(written, skipped, errors)


def _safe(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in s)


# ------------------------------------------------------------ synthetic data

# rough second-formant centers that give each task its own spectral colour
_TASK_FORMANT = {"a": 1200, "e": 1900, "i": 2300, "o": 900, "u": 800, "pa": 1100, "ta": 1700, "ka": 2000}


def synth_clip(label: int, task: str, rng: np.random.Generator, sample_rate: int = 16000, duration: float = 2.0):
    """A /pa/-like pulse train (syllables) or a sustained vowel.

    Class 1 gets a slower, irregular repetition rate with amplitude jitter
    (syllables) or a deep slow amplitude tremor (vowels).
    """
    n = int(sample_rate * duration)
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(100, 220)
    formant = _TASK_FORMANT[task]
    harmonics = np.arange(1, int(4000 / f0))
    weights = 1.0 / harmonics * (1.0 + 2.0 * np.exp(-(((harmonics * f0 - formant) / 300.0) ** 2)))
    phases = rng.uniform(0, 2 * np.pi, len(harmonics))
    voice = (weights[:, None] * np.sin(2 * np.pi * f0 * harmonics[:, None] * t + phases[:, None])).sum(0)
    voice /= np.abs(voice).max()

    if task in ("pa", "ta", "ka"):
        rate = rng.uniform(5.5, 7.0) if label == 0 else rng.uniform(2.2, 3.2)
        env = np.zeros(n)
        onset = rng.uniform(0.02, 0.1)
        burst = int(0.09 * sample_rate)
        shape = np.hanning(burst)
        while onset < duration - 0.1:
            start = int(onset * sample_rate)
            amp = 1.0 if label == 0 else rng.uniform(0.3, 1.0)
            seg = env[start : start + burst]
            seg += amp * shape[: len(seg)]
            gap = 1.0 / rate
            onset += gap * (1.0 + (rng.uniform(-0.25, 0.25) if label == 1 else rng.uniform(-0.03, 0.03)))
        x = voice * env
    else:
        if label == 0:
            env = 1.0 + 0.05 * np.sin(2 * np.pi * rng.uniform(4, 6) * t)
        else:
            env = 1.0 + 0.6 * np.sin(2 * np.pi * rng.uniform(2, 4) * t + rng.uniform(0, 2 * np.pi))
        x = voice * env * np.clip(t / 0.05, 0, 1) * np.clip((duration - t) / 0.05, 0, 1)
    x = x + 0.01 * rng.standard_normal(n)
    return 0.7 * x / np.abs(x).max()


def synth_corpus(out_dir, n: int = 80, tasks=("pa",), seed: int = 0, sample_rate: int = 16000, duration: float = 2.0):
    """Write WAVs, ``manifest.csv``, ``egemaps.csv`` and a ready-to-run ``config.yaml``.

    Half of the speakers are dysarthric (severity drawn from 1-3), half normal (4).
    The 88-column feature file is a stand-in: class-shifted Gaussian rows.
    """
    from .config import ConfigFile, RunConfig, Paths, dump_config

    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    tasks = [normalize_task(t) for t in tasks]
    rows, feats = [], []
    for i in range(n):
        label = int(i % 2 == 0)
        severity = int(rng.integers(1, 4)) if label else 4
        sid = f"S{i:03d}"
        sex = "M" if rng.random() < 0.6 else "F"
        age = round(float(rng.uniform(45, 80)), 1)
        for task in tasks:
            wav = out_dir / "wav" / f"{sid}_{task}.wav"
            write_wav(wav, synth_clip(label, task, rng, sample_rate, duration), sample_rate)
            rows.append([sid, f"wav/{wav.name}", task, severity, sex, age])
        f = rng.standard_normal(EGEMAPS_DIM)
        f[:8] += 1.5 * label
        feats.append([sid] + [f"{v:.6f}" for v in f])

    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    with open(out_dir / "egemaps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"f{j}" for j in range(EGEMAPS_DIM)])
        w.writerows(feats)
    cfg = ConfigFile(
        run=RunConfig(
            task=tasks[0] if len(tasks) == 1 else "pa",
            pretrained=False,
            freeze=True,
            lr=1e-3,
            seed=seed,
            save_checkpoints=False,
        ),
        paths=Paths(manifest="manifest.csv", cache_dir="cache", out_dir="runs", egemaps_csv="egemaps.csv"),
    )
    dump_config(cfg, out_dir / "config.yaml")
    return out_dir / "manifest.csv"


def check_tasks(tasks):
    if tasks == "all" or tasks == ["all"]:
        return list(TASKS)
    return [normalize_task(t) for t in tasks]

