"""Black-box per-pixel probe signatures.

For a K-way classifier with H x W x C inputs, the signature is an
H x W x K array: entry (i, j, k) is the largest class-k probability the
classifier emits over a sweep of V values written into pixel (i, j) of a
fixed default image (all C channels set simultaneously). Only the query
function is touched, never the parameters, so any black box with a
probability-vector output can be fingerprinted.

The sweep grid is {v / V : v = 0 .. V-1}. With the black default image
the grid contains the default pixel value, so every signature entry is
bounded below by the default image's own output probabilities.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import nnkernel, tensorio
from .errors import ConfigError, NumericError

DEFAULT_IMAGES = ("black", "white", "mean")


@dataclass(frozen=True)
class ClassifierHandle:
    """Black-box query interface: image batch in, probability rows out."""

    query: object  # callable (B,H,W,C) float32 -> (B,K) probabilities
    input_shape: tuple
    num_classes: int

    @staticmethod
    def from_model(params: nnkernel.ModelParams) -> "ClassifierHandle":
        return ClassifierHandle(
            query=lambda batch: nnkernel.forward(params, batch),
            input_shape=params.arch.input_shape,
            num_classes=params.arch.num_classes,
        )

    @staticmethod
    def from_lookup_table(table: dict, input_shape, num_classes) -> "ClassifierHandle":
        """Handle backed by a {image-bytes: probability-row} dict.

        Useful for testing the black-box discipline: there are no
        parameters to peek at, queries are the only possible access.
        """
        def query(batch):
            batch = np.ascontiguousarray(batch, dtype=np.float32)
            out = np.empty((len(batch), num_classes), dtype=np.float32)
            for i, img in enumerate(batch):
                key = img.tobytes()
                if key not in table:
                    raise ConfigError("lookup-table handle queried with unknown image")
                out[i] = table[key]
            return out

        return ClassifierHandle(query=query, input_shape=tuple(input_shape),
                                num_classes=num_classes)


@dataclass(frozen=True)
class SignaturePolicy:
    """Probe configuration: default image choice and value grid size."""

    default_image: str = "black"
    levels: int = 256
    channel_mode: str = "simultaneous"
    mean_image: np.ndarray | None = None

    def __post_init__(self):
        if self.default_image not in DEFAULT_IMAGES:
            raise ConfigError(f"unknown default_image {self.default_image!r}")
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if self.channel_mode != "simultaneous":
            raise ConfigError("only simultaneous channel updates are supported")
        if self.default_image == "mean" and self.mean_image is None:
            raise ConfigError("mean default image requires mean_image")

    def base_image(self, shape) -> np.ndarray:
        h, w, c = shape
        if self.default_image == "black":
            return np.zeros((h, w, c), dtype=np.float32)
        if self.default_image == "white":
            return np.ones((h, w, c), dtype=np.float32)
        mean = np.asarray(self.mean_image, dtype=np.float32)
        if mean.shape != (h, w, c):
            raise ConfigError(f"mean_image shape {mean.shape} != input shape {shape}")
        return mean.copy()

    def grid(self) -> np.ndarray:
        return (np.arange(self.levels) / self.levels).astype(np.float32)

    def tag(self) -> str:
        """Short stable identifier used in signature filenames."""
        h = hashlib.sha256()
        h.update(f"{self.default_image}:{self.levels}:{self.channel_mode}".encode())
        if self.mean_image is not None:
            h.update(np.ascontiguousarray(self.mean_image, np.float32).tobytes())
        return f"{self.default_image}-v{self.levels}-{h.hexdigest()[:8]}"

    def to_json(self) -> dict:
        obj = {"default_image": self.default_image, "levels": self.levels,
               "channel_mode": self.channel_mode}
        if self.mean_image is not None:
            obj["mean_image_sha256"] = hashlib.sha256(
                np.ascontiguousarray(self.mean_image, np.float32).tobytes()).hexdigest()
        return obj


@dataclass
class Signature:
    values: np.ndarray  # (H, W, K) float32 in [0, 1]
    policy: dict
    query_count: int
    model_fingerprint: str = ""

    def channel(self, k: int) -> np.ndarray:
        """Copy of class channel k as an (H, W) plane."""
        if not 0 <= k < self.values.shape[2]:
            raise ConfigError(
                f"channel {k} out of range for {self.values.shape[2]} classes")
        return self.values[:, :, k].copy()


def signature_channel(sig: Signature, k: int) -> np.ndarray:
    return sig.channel(k)


def _check_probability_rows(probs, k):
    probs = np.asarray(probs)
    if probs.ndim != 2 or probs.shape[1] != k:
        raise NumericError(f"query returned shape {probs.shape}, expected (B, {k})")
    if not np.isfinite(probs).all():
        raise NumericError("query returned non-finite probabilities")
    if probs.min() < 0.0 or np.abs(probs.sum(axis=1) - 1.0).max() > 1e-5:
        raise NumericError("query returned rows that are not probability vectors")
    return probs


def compute_signature(handle: ClassifierHandle, policy: SignaturePolicy,
                      batch_size: int = 256, pixel_order=None,
                      model_fingerprint: str = "") -> Signature:
    """Probe every pixel of the default image over the value grid.

    Exactly H*W*V images are evaluated, grouped into query batches of
    ``batch_size``; the result is independent of both the batch size and
    the pixel visiting order (each pixel's maximum only sees its own V
    query results). ``pixel_order`` optionally overrides the row-major
    default order.
    """
    h, w, c = handle.input_shape
    k = handle.num_classes
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    base = policy.base_image((h, w, c))
    grid = policy.grid()
    v = policy.levels

    if pixel_order is None:
        pixels = [(i, j) for i in range(h) for j in range(w)]
    else:
        pixels = [tuple(p) for p in pixel_order]
        if sorted(pixels) != sorted((i, j) for i in range(h) for j in range(w)):
            raise ConfigError("pixel_order must enumerate every pixel exactly once")

    values = np.zeros((h, w, k), dtype=np.float32)
    jobs = np.array([(i, j, vi) for (i, j) in pixels for vi in range(v)],
                    dtype=np.int64)
    query_count = 0
    for lo in range(0, len(jobs), batch_size):
        chunk = jobs[lo:lo + batch_size]
        n = len(chunk)
        batch = np.repeat(base[None, :, :, :], n, axis=0)
        batch[np.arange(n), chunk[:, 0], chunk[:, 1], :] = grid[chunk[:, 2]][:, None]
        probs = _check_probability_rows(handle.query(batch), k)
        query_count += n
        # exact, order-free accumulation: max over each pixel's V probes
        np.maximum.at(values, (chunk[:, 0], chunk[:, 1]), probs)

    return Signature(values=values, policy=policy.to_json() | {"tag": policy.tag()},
                     query_count=query_count, model_fingerprint=model_fingerprint)


def save_signature(path_base: str, sig: Signature) -> None:
    """Write <base>.bin (tensor container) and <base>.json (sidecar)."""
    tensorio.save_tensor(path_base + ".bin", sig.values)
    with open(path_base + ".json", "w") as fh:
        json.dump({
            "policy": sig.policy,
            "query_count": sig.query_count,
            "model_fingerprint": sig.model_fingerprint,
        }, fh, indent=2, sort_keys=True)


def load_signature(path_base: str) -> Signature:
    values = tensorio.load_tensor(path_base + ".bin")
    with open(path_base + ".json") as fh:
        meta = json.load(fh)
    return Signature(values=values, policy=meta["policy"],
                     query_count=int(meta["query_count"]),
                     model_fingerprint=meta.get("model_fingerprint", ""))


# ---------------------------------------------------------------------------
# Whole-zoo signature runs
# ---------------------------------------------------------------------------

def _sig_base(zoo_dir: str, entry_id: str, policy_tag: str) -> str:
    from . import zoo as zoo_mod

    return os.path.join(zoo_mod.entry_dir(zoo_dir, entry_id),
                        f"signature-{policy_tag}")


_BATCH_CTX: dict = {}


def _init_batch(zoo_dir, policy, batch_size):
    _BATCH_CTX.update(zoo_dir=zoo_dir, policy=policy, batch_size=batch_size)


def _one_signature(job):
    from . import zoo as zoo_mod

    entry_id, fingerprint, resume = job
    zoo_dir = _BATCH_CTX["zoo_dir"]
    policy = _BATCH_CTX["policy"]
    base = _sig_base(zoo_dir, entry_id, policy.tag())
    try:
        if resume and os.path.exists(base + ".json"):
            with open(base + ".json") as fh:
                meta = json.load(fh)
            if meta.get("model_fingerprint") == fingerprint:
                return (entry_id, "skipped", "")
        params, _ = zoo_mod.load_entry_model(zoo_dir, entry_id)
        sig = compute_signature(ClassifierHandle.from_model(params), policy,
                                batch_size=_BATCH_CTX["batch_size"],
                                model_fingerprint=fingerprint)
        save_signature(base, sig)
        return (entry_id, "computed", "")
    except Exception as exc:  # isolate per-entry failures, keep the batch going
        return (entry_id, "failed", f"{type(exc).__name__}: {exc}")


def batch_signatures(zoo_dir: str, policy: SignaturePolicy, batch_size: int = 256,
                     n_jobs: int = 1, resume: bool = True) -> dict:
    """One signature file pair per zoo entry, alongside the models.

    Entries whose signature sidecar already matches the stored model
    fingerprint are skipped, so interrupted runs resume for free.
    Per-entry failures are reported in the result; the rest of the zoo is
    still processed.
    """
    from . import pool as pool_mod
    from . import zoo as zoo_mod

    manifest = zoo_mod.load_manifest(zoo_dir)
    jobs = [(e.entry_id, e.fingerprint, resume) for e in manifest.entries]
    results = pool_mod.run_jobs(_one_signature, jobs, n_jobs=n_jobs,
                                initializer=_init_batch,
                                initargs=(zoo_dir, policy, batch_size))
    report = {"computed": [], "skipped": [], "failures": {}}
    for entry_id, status, msg in results:
        if status == "failed":
            report["failures"][entry_id] = msg
        else:
            report[status].append(entry_id)
    return report


def load_zoo_signatures(zoo_dir: str, policy: SignaturePolicy):
    """List of (entry_id, label, values) for every entry with a signature."""
    from . import zoo as zoo_mod

    manifest = zoo_mod.load_manifest(zoo_dir)
    out = []
    for e in manifest.entries:
        base = _sig_base(zoo_dir, e.entry_id, policy.tag())
        if os.path.exists(base + ".json"):
            out.append((e.entry_id, e.label, load_signature(base).values))
    return out
