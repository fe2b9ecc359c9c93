"""Meta-detector: classifies a model as clean or trojan from its signature.

Inputs are whole H x W x K signatures, or in per-channel mode each of the
K class channels as its own H x W x 1 sample (multiplying the training
set by K; labels are inherited from the parent model). Per-channel
evaluation averages a model's K channel scores before thresholding, and
detector accuracy is always counted over models, never over channels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import data, nnkernel, pool
from .errors import ConfigError

MODES = ("whole", "per-channel")


def detector_arch(input_shape, hidden: int = 32) -> nnkernel.ArchSpec:
    """Small convolutional judge: 2 conv (8, 16 ch, 3x3, stride 2) + 2 dense."""
    return nnkernel.ArchSpec(
        layers=(
            {"kind": "conv", "out_channels": 8, "kernel": 3, "stride": 2,
             "padding": "same"},
            {"kind": "relu"},
            {"kind": "conv", "out_channels": 16, "kernel": 3, "stride": 2,
             "padding": "same"},
            {"kind": "relu"},
            {"kind": "flatten"},
            {"kind": "dense", "units": hidden},
            {"kind": "relu"},
            {"kind": "dense", "units": 2},
        ),
        input_shape=input_shape,
        num_classes=2,
        name="detector-cnn",
    )


@dataclass(frozen=True)
class DetectorConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 40
    threshold: float = 0.5

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DetectorModel:
    params: nnkernel.ModelParams
    mode: str
    threshold: float
    train_accuracy: float
    num_classes_sig: int  # K of the signatures this detector was trained on

    def trojan_scores(self, sig_values: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """P(trojan) per model for a stack of (N, H, W, K) signatures."""
        sig_values = np.asarray(sig_values, dtype=np.float32)
        if self.mode == "whole":
            batch = sig_values
        else:
            batch = _expand_channels(sig_values)
        probs = []
        for lo in range(0, len(batch), batch_size):
            probs.append(nnkernel.forward(self.params, batch[lo:lo + batch_size])[:, 1])
        scores = np.concatenate(probs)
        if self.mode == "per-channel":
            scores = scores.reshape(len(sig_values), -1).mean(axis=1)
        return scores


def _expand_channels(sig_values: np.ndarray) -> np.ndarray:
    """(N, H, W, K) -> (N*K, H, W, 1), channel-major within each model."""
    n, h, w, k = sig_values.shape
    return sig_values.transpose(0, 3, 1, 2).reshape(n * k, h, w, 1)


def _as_arrays(labeled_sigs):
    values = np.stack([np.asarray(v, dtype=np.float32) for _, _, v in labeled_sigs])
    labels = np.array([1 if lab == "trojan" else 0 for _, lab, _ in labeled_sigs],
                      dtype=np.int64)
    return values, labels


def train_detector(labeled_sigs, mode: str, seed: int,
                   cfg: DetectorConfig | None = None) -> DetectorModel:
    """Fit the judge on (entry_id, label, signature-values) triples.

    Per-channel expansion happens before any shuffling; training is
    deterministic given the seed. Both labels must be present.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown detector mode {mode!r}")
    cfg = cfg or DetectorConfig()
    values, labels = _as_arrays(labeled_sigs)
    if len(set(labels.tolist())) < 2:
        raise ConfigError("detector training needs both clean and trojan samples")
    h, w, k = values.shape[1:]
    if mode == "per-channel":
        X = _expand_channels(values)
        y = np.repeat(labels, k)
        arch = detector_arch((h, w, 1))
    else:
        X, y = values, labels
        arch = detector_arch((h, w, k))
    ds = data.LabeledDataset(X, y, 2)
    train_cfg = nnkernel.TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size,
                                     epochs=cfg.epochs, accuracy_floor=0.0,
                                     holdout_fraction=0.0)
    # evaluate on the training set itself: the floor is reporting-only here
    res = nnkernel.train(arch, ds, train_cfg, seed, eval_data=ds)
    return DetectorModel(params=res.params, mode=mode, threshold=cfg.threshold,
                         train_accuracy=res.eval_accuracy, num_classes_sig=k)


def eval_detector(det: DetectorModel, labeled_sigs, mode: str | None = None) -> dict:
    """Model-level accuracy, per-class rates and the raw score list."""
    if mode is not None and mode != det.mode:
        raise ConfigError(f"detector was trained in {det.mode!r} mode, not {mode!r}")
    if not labeled_sigs:
        raise ConfigError("empty evaluation set")
    values, labels = _as_arrays(labeled_sigs)
    scores = det.trojan_scores(values)
    pred = (scores > det.threshold).astype(np.int64)
    correct = pred == labels
    out = {
        "accuracy": float(correct.mean()),
        "clean_rate": float(correct[labels == 0].mean()) if (labels == 0).any() else None,
        "trojan_rate": float(correct[labels == 1].mean()) if (labels == 1).any() else None,
        "scores": [
            {"entry_id": eid, "label": lab, "score": float(s)}
            for (eid, lab, _), s in zip(labeled_sigs, scores)
        ],
    }
    return out


# ---------------------------------------------------------------------------
# Sample-complexity sweep
# ---------------------------------------------------------------------------

_SWEEP_CTX: dict = {}


def _init_sweep(train_sigs, test_sigs, mode, cfg):
    _SWEEP_CTX.update(train_sigs=train_sigs, test_sigs=test_sigs, mode=mode, cfg=cfg)


def _sweep_cell(job):
    n_pairs, rep, seed = job
    train_sigs = _SWEEP_CTX["train_sigs"]
    if n_pairs == 0:
        return (0, rep, 0.5)
    rng = np.random.default_rng(seed)
    clean = [s for s in train_sigs if s[1] == "clean"]
    trojan = [s for s in train_sigs if s[1] == "trojan"]
    picked = [clean[i] for i in rng.choice(len(clean), n_pairs, replace=False)] + \
             [trojan[i] for i in rng.choice(len(trojan), n_pairs, replace=False)]
    det = train_detector(picked, _SWEEP_CTX["mode"], seed=int(rng.integers(2**31)),
                         cfg=_SWEEP_CTX["cfg"])
    return (n_pairs, rep, eval_detector(det, _SWEEP_CTX["test_sigs"])["accuracy"])


def sample_complexity_sweep(train_sigs, test_sigs, sizes, repeats: int, seed: int,
                            mode: str = "whole", cfg: DetectorConfig | None = None,
                            n_jobs: int = 1) -> dict:
    """Mean +- std of detector accuracy vs. training pairs.

    Each (size, repeat) cell subsamples size clean + size trojan models
    on an independent stream, trains a fresh detector and evaluates it on
    the full test signature set. Size 0 is defined as chance accuracy 0.5
    and flagged degenerate.
    """
    n_clean = sum(1 for s in train_sigs if s[1] == "clean")
    n_trojan = sum(1 for s in train_sigs if s[1] == "trojan")
    if any(s > min(n_clean, n_trojan) for s in sizes):
        raise ConfigError(f"sweep sizes exceed available pairs "
                          f"({n_clean} clean / {n_trojan} trojan)")
    cfg = cfg or DetectorConfig()
    jobs = [(int(s), r, _cell_seed(seed, s, r))
            for s in sizes for r in range(repeats)]
    results = pool.run_jobs(_sweep_cell, jobs, n_jobs=n_jobs,
                            initializer=_init_sweep,
                            initargs=(list(train_sigs), list(test_sigs), mode, cfg))
    rows = []
    for s in sizes:
        accs = [acc for (n, _, acc) in results if n == int(s)]
        rows.append({
            "n_pairs": int(s),
            "mean_acc": float(np.mean(accs)),
            "std_acc": float(np.std(accs)),
            "degenerate": int(s) == 0,
        })
    return {"rows": rows, "repeats": repeats, "mode": mode}


def _cell_seed(seed, size, rep) -> int:
    return int(np.random.SeedSequence((seed, int(size), int(rep))).generate_state(1)[0])


def sweep_to_csv(sweep: dict, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("n_pairs,mean_acc,std_acc\n")
        for row in sweep["rows"]:
            fh.write(f"{row['n_pairs']},{row['mean_acc']:.6f},{row['std_acc']:.6f}\n")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_detector(det_dir: str, det: DetectorModel) -> None:
    os.makedirs(det_dir, exist_ok=True)
    nnkernel.save_model(det_dir, det.params)
    with open(os.path.join(det_dir, "detector.json"), "w") as fh:
        json.dump({
            "mode": det.mode,
            "threshold": det.threshold,
            "train_accuracy": det.train_accuracy,
            "num_classes_sig": det.num_classes_sig,
        }, fh, indent=2, sort_keys=True)


def load_detector(det_dir: str) -> DetectorModel:
    params, _ = nnkernel.load_model(det_dir)
    with open(os.path.join(det_dir, "detector.json")) as fh:
        meta = json.load(fh)
    return DetectorModel(params=params, mode=meta["mode"],
                         threshold=float(meta["threshold"]),
                         train_accuracy=float(meta["train_accuracy"]),
                         num_classes_sig=int(meta["num_classes_sig"]))
