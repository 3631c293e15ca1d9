"""Datasets, metric precomputation, evaluation tables and CSV reports.

These are the building blocks behind the command-line interface. Every
function is deterministic given its seed so that whole pipelines replay to
identical files.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import Split
from .exceptions import ContractError, FormatError, PNPError
from .features import FeatureVector, cqt_features, mss_distance, phi_jtfs, read_feature_vector, write_feature_vector
from .ftm import DURATION, SAMPLE_RATE, NormalizedTheta, denormalize, synthesize, write_wav
from .metric import FD_STEP, cache_write, compute_metrics, write_eigenvalue_csv

SPLITS = ("train", "val", "test")
LOG_ERR_FLOOR = 1e-12
MANIFEST_NAME = "manifest.json"


class OverwriteError(PNPError, FileExistsError):
    """An output exists and overwriting was not requested."""


def ensure_writable(path, overwrite=False):
    path = Path(path)
    if path.exists() and not overwrite:
        raise OverwriteError(f"{path} exists; pass --overwrite to replace it")
    return path


# -- dataset -----------------------------------------------------------------

@dataclass
class SampleEntry:
    id: int
    split: str
    theta: list  # five normalized components
    physical: dict
    audio_path: str
    feature_path: str
    peak: float


@dataclass
class DatasetManifest:
    n: int
    seed: int
    pitch_mode: str
    feature_map_id: str = "cqt"
    sample_rate: int = SAMPLE_RATE
    duration: float = DURATION
    n_redrawn: int = 0
    samples: list = field(default_factory=list)
    root: str = ""

    def entries(self, split=None):
        return [s for s in self.samples if split is None or s.split == split]

    def ids(self, split=None):
        return np.array([s.id for s in self.entries(split)], dtype=np.int64)

    def theta(self, split=None):
        """``(N, J)`` normalized targets honoring the pitch mode."""
        full = np.array([s.theta for s in self.entries(split)], dtype=float).reshape(-1, 5)
        return full[:, 1:] if self.pitch_mode == "known" else full

    def pitch(self, split=None):
        if self.pitch_mode != "known":
            return None
        return np.array([s.theta[0] for s in self.entries(split)], dtype=float)

    def theta_of(self, entry):
        return NormalizedTheta.from_full(entry.theta, pitch_known=self.pitch_mode == "known")

    def resolve(self, rel):
        return Path(self.root) / rel

    def to_json(self):
        d = asdict(self)
        d.pop("root")
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            d = json.loads(path.read_text())
            d["samples"] = [SampleEntry(**s) for s in d["samples"]]
            return cls(**d, root=str(path.parent))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: not a dataset manifest ({exc})") from None


def split_assignment(n, rng):
    """Random 8:1:1 split labels for ``n`` samples."""
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    labels = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val))
    return labels[rng.permutation(n)]


def _render_sample(args):
    """Draw, render and write sample ``i`` from its own seed stream."""
    i, seed_seq, out = args
    rng = np.random.default_rng(seed_seq)
    redrawn = 0
    while True:
        full = rng.uniform(-1.0, 1.0, 5)
        try:
            audio = synthesize(NormalizedTheta(full))
            break
        except PNPError:
            redrawn += 1
    shape = denormalize(NormalizedTheta(full))
    audio_rel = f"audio/{i:06d}.wav"
    feat_rel = f"features/{i:06d}.pnpf"
    write_wav(out / audio_rel, audio)
    write_feature_vector(out / feat_rel, FeatureVector(cqt_features(audio), None, "cqt"))
    entry = dict(id=i, theta=[float(x) for x in full],
                 physical={k: float(getattr(shape, k)) for k in ("omega1", "tau1", "p", "D", "alpha")},
                 audio_path=audio_rel, feature_path=feat_rel, peak=float(np.max(np.abs(audio.samples))))
    return entry, redrawn


def make_dataset(n, seed, out_dir, pitch_mode="unknown", overwrite=False, progress=None, workers=None):
    """Draw ``n`` uniform points of the cube, render them and write the manifest.

    Each sample has its own child seed stream, so the result does not depend
    on the number of workers.
    """
    if n < 1:
        raise ValueError("dataset size must be positive")
    if pitch_mode not in ("known", "unknown"):
        raise ValueError(f"pitch_mode must be 'known' or 'unknown', got {pitch_mode!r}")
    out = Path(out_dir)
    ensure_writable(out / MANIFEST_NAME, overwrite)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    split_seq, sample_seq = root.spawn(2)
    labels = split_assignment(n, np.random.default_rng(split_seq))
    jobs = [(i, s, out) for i, s in enumerate(sample_seq.spawn(n))]
    workers = workers or worker_count()
    manifest = DatasetManifest(n=n, seed=seed, pitch_mode=pitch_mode, root=str(out))
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_render_sample, jobs, chunksize=max(1, n // (4 * workers)))
            done = list(_with_progress(results, n, progress))
    else:
        done = list(_with_progress(map(_render_sample, jobs), n, progress))
    for entry, redrawn in done:
        manifest.n_redrawn += redrawn
        manifest.samples.append(SampleEntry(split=str(labels[entry["id"]]), **entry))
    manifest.save(out / MANIFEST_NAME)
    return manifest


def _with_progress(results, n, progress):
    for k, r in enumerate(results, 1):
        if progress:
            progress(k, n)
        yield r


def load_split(manifest, split, with_targets=False):
    entries = manifest.entries(split)
    X = np.array([read_feature_vector(manifest.resolve(e.feature_path)).values for e in entries])
    if not entries:
        X = np.zeros((0, 240))
    targets = None
    if with_targets:
        targets = np.array([phi_jtfs(synthesize(manifest.theta_of(e))) for e in entries])
    return Split(X, manifest.theta(split), manifest.ids(split), manifest.pitch(split), targets)


def make_metrics(manifest, out_path, feature_map="jtfs", h=FD_STEP, splits=SPLITS, workers=None,
                 overwrite=False):
    """Metric cache (and eigenvalue CSV next to it) for the chosen splits."""
    out_path = ensure_writable(out_path, overwrite)
    jobs = [(e.id, manifest.theta_of(e)) for e in manifest.samples if e.split in splits]
    records, failures = compute_metrics(jobs, feature_map, h, workers)
    cache_write(records, out_path, feature_map_id=feature_map)
    write_eigenvalue_csv(records, eigen_csv_path(out_path))
    return records, failures


def eigen_csv_path(cache_path):
    p = Path(cache_path)
    return p.with_name(p.stem + "_eigenvalues.csv")


# -- predictions -------------------------------------------------------------

@dataclass
class Predictions:
    ids: np.ndarray
    theta: np.ndarray
    meta: dict = field(default_factory=dict)

    def save(self, path):
        with open(path, "w", newline="") as f:
            for k in sorted(self.meta):
                f.write(f"# {k}={self.meta[k]}\n")
            w = csv.writer(f)
            w.writerow(["sample_id", *(f"theta_{j + 1}" for j in range(self.theta.shape[1]))])
            for i, row in zip(self.ids, self.theta):
                w.writerow([int(i), *(repr(float(x)) for x in row)])

    @classmethod
    def load(cls, path):
        meta, rows = {}, []
        with open(path, newline="") as f:
            lines = f.read().splitlines()
        body = []
        for line in lines:
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif line.strip():
                body.append(line)
        reader = csv.reader(body)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty predictions file") from None
        if not header or header[0] != "sample_id":
            raise FormatError(f"{path}: missing sample_id column")
        for r in reader:
            rows.append([float(x) for x in r])
        arr = np.array(rows, dtype=float).reshape(-1, len(header))
        return cls(arr[:, 0].astype(np.int64), arr[:, 1:], meta)


# -- evaluation --------------------------------------------------------------

def _full_theta(theta_row, entry, pitch_mode):
    if pitch_mode == "known":
        return NormalizedTheta(theta_row, entry.theta[0])
    return NormalizedTheta(theta_row)


def evaluate_predictions(manifest, predictions, split="test"):
    """Mean JTFS distance and MSS of a prediction set over a split.

    JTFS distance is the Euclidean norm of the log-JTFS difference; MSS is the
    mean absolute multi-scale spectral error. Results do not depend on the
    order of the predictions.
    """
    by_id = {int(i): row for i, row in zip(predictions.ids, predictions.theta)}
    entries = manifest.entries(split)
    missing = [e.id for e in entries if e.id not in by_id]
    if missing:
        raise ContractError(f"missing predictions for samples {missing[:10]}"
                            + (" ..." if len(missing) > 10 else ""))
    if not entries:
        raise ContractError(f"split {split!r} is empty")
    jtfs_d, mss_d = [], []
    for e in sorted(entries, key=lambda e: e.id):
        ref = synthesize(manifest.theta_of(e))
        est = synthesize(_full_theta(np.clip(by_id[e.id], -1, 1), e, manifest.pitch_mode))
        jtfs_d.append(float(np.linalg.norm(phi_jtfs(est) - phi_jtfs(ref))))
        mss_d.append(float(mss_distance(est, ref)))
    return float(np.mean(jtfs_d)), float(np.mean(mss_d))


EVAL_HEADER = ["loss", "phi", "pitch", "jtfs_distance", "jtfs_spread", "mss", "mss_spread",
               "wall_clock_per_epoch", "n_runs"]


def eval_table(runs):
    """Table rows grouped by (loss, phi, pitch).

    ``runs`` holds dicts with keys ``loss, phi, pitch, jtfs, mss, wall_clock``.
    Spread is the sample standard deviation across runs (0 for a single run).
    """
    groups = {}
    for r in runs:
        groups.setdefault((r["loss"], r["phi"], r["pitch"]), []).append(r)
    rows = []
    for key in sorted(groups):
        g = groups[key]
        j = np.array([r["jtfs"] for r in g])
        m = np.array([r["mss"] for r in g])
        w = np.array([r.get("wall_clock", float("nan")) for r in g], dtype=float)
        sd = (lambda a: float(np.std(a, ddof=1)) if a.size > 1 else 0.0)  # noqa: E731
        rows.append([*key, float(j.mean()), sd(j), float(m.mean()), sd(m), float(np.mean(w)), len(g)])
    return rows


def write_eval_table(rows, path):
    with open(path, "w", newline="") as f:
        f.write("# spread = standard deviation across seeded runs\n")
        w = csv.writer(f)
        w.writerow(EVAL_HEADER)
        for r in rows:
            w.writerow([*r[:3], *(repr(float(x)) for x in r[3:8]), r[8]])


# -- reports -----------------------------------------------------------------

def report_eigs(cache, path):
    """Per-sample sorted eigenvalues with the identity reference column."""
    J = cache.J
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", *(f"sigma2_{j + 1}" for j in range(J)), "identity"])
        for r in cache.records:
            w.writerow([r.sample_id, *(repr(float(x)) for x in np.sort(r.eigenvalues)[::-1]), "1.0"])


def tau_index(J):
    return 1 if J == 5 else 0


def tau_groups(diag, seed=0):
    """Indices of the top and bottom 20% by ``M[tau, tau]``; ties break randomly (seeded)."""
    diag = np.asarray(diag, dtype=float)
    n = diag.size
    if n < 10:
        raise ContractError(f"need at least 10 test samples, got {n}")
    k = int(math.floor(0.2 * n))
    tie = np.random.default_rng(seed).permutation(n)
    order = np.lexsort((tie, -diag))  # descending diagonal, then random tie-break
    return order[:k], order[n - k:]


def tau_histogram(errors, bins):
    """Counts of ``log(max(err^2, 1e-12))`` over the given bin edges."""
    v = np.log(np.maximum(np.asarray(errors, dtype=float) ** 2, LOG_ERR_FLOOR))
    v = np.clip(v, bins[0], bins[-1])
    counts, _ = np.histogram(v, bins=bins)
    return counts


def report_tau(manifest, cache, predictions, path, n_bins=20, seed=0):
    """Log squared tau-error histograms for the stiffest and softest 20% in tau.

    ``predictions`` maps a model name to :class:`Predictions` on the test split.
    """
    entries = sorted(manifest.entries("test"), key=lambda e: e.id)
    if len(entries) < 10:
        raise ContractError(f"need at least 10 test samples, got {len(entries)}")
    ids = np.array([e.id for e in entries])
    J = 4 if manifest.pitch_mode == "known" else 5
    it = tau_index(J)
    diag = np.array([cache[i].M[it, it] for i in ids])
    top, bottom = tau_groups(diag, seed)
    truth = manifest.theta("test")[np.argsort(manifest.ids("test"))]
    bins = np.linspace(math.log(LOG_ERR_FLOOR), math.log(4.0), n_bins + 1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "group", "bin_lo", "bin_hi", "count"])
        for name in sorted(predictions):
            p = predictions[name]
            by_id = {int(i): row for i, row in zip(p.ids, p.theta)}
            missing = [int(i) for i in ids if int(i) not in by_id]
            if missing:
                raise ContractError(f"model {name!r} lacks predictions for {missing[:10]}")
            err = np.array([by_id[int(i)][it] for i in ids]) - truth[:, it]
            for group, idx in (("top20", top), ("bottom20", bottom)):
                counts = tau_histogram(err[idx], bins)
                for lo, hi, c in zip(bins[:-1], bins[1:], counts):
                    w.writerow([name, group, repr(float(lo)), repr(float(hi)), int(c)])


def worker_count(default=1):
    return max(1, int(os.environ.get("PNP_WORKERS", default)))
