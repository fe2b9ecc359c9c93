"""Mass production of clean and Trojaned classifier populations.

A zoo is a directory of independently trained models, each labeled clean
or trojan, with every trojan entry gated on two quality bars: attack
success above 95% and clean accuracy within two points of the clean
floor. Failed training runs are retried with fresh seeds (and fresh
trigger draws) up to a retry cap and reported, never silently dropped.

Layout on disk (consumed by the signature and detector stages):

    zoo_dir/
      manifest.json
      entries/clean-000/   model.json  weights.bin  entry.json
      entries/trojan-000/  model.json  weights.bin  entry.json
                           trigger.json  trigger_pattern.bin

Training jobs are independent and fan out over a process pool; the
manifest is assembled serially, sorted by entry id, so parallel and
sequential builds agree.
"""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import data, nnkernel, pool, tensorio
from .errors import ConfigError, GateFailure

ATTACK_EVAL_SEED = 0xA55  # fixed stamping stream so stored metrics reproduce exactly


# ---------------------------------------------------------------------------
# Attack evaluation
# ---------------------------------------------------------------------------

def eval_attack(params: nnkernel.ModelParams, trigger: data.TriggerSpec,
                clean_test: data.LabeledDataset, seed: int = ATTACK_EVAL_SEED,
                batch_size: int = 512) -> dict:
    """Clean accuracy plus attack success rate of a (model, trigger) pair.

    The attack set is the stamped version of: source-class test images
    (single-target), non-target test images (all-to-one), or every test
    image (all-to-all, judged against the permuted label). An empty
    attack set is an error, not a NaN.
    """
    h, w, c = clean_test.image_shape
    trigger.validate_for(h, w, c, clean_test.num_classes)
    clean_acc = nnkernel.evaluate(params, clean_test.images, clean_test.labels,
                                  batch_size=batch_size)

    mode = trigger.attack_mode
    if mode == "single-target":
        mask = clean_test.labels == trigger.source_label
    elif mode == "all-to-one":
        mask = clean_test.labels != trigger.target_label
    else:
        mask = np.ones(len(clean_test), dtype=bool)
    if not mask.any():
        raise ConfigError("attack evaluation set is empty for this trigger")

    imgs = clean_test.images[mask].copy()
    labs = clean_test.labels[mask]
    ph, pw = trigger.patch_shape
    rng = np.random.default_rng(seed)
    for i in range(len(imgs)):
        r, col = data._draw_location(rng, trigger, h, w)
        imgs[i, r:r + ph, col:col + pw, :] = trigger.pattern

    preds = []
    for lo in range(0, len(imgs), batch_size):
        preds.append(nnkernel.forward(params, imgs[lo:lo + batch_size]).argmax(axis=1))
    pred = np.concatenate(preds)
    if mode == "all-to-all":
        perm = np.asarray(trigger.target_label)
        hits = pred == perm[labs]
    else:
        hits = pred == trigger.target_label
    return {
        "clean_test_acc": float(clean_acc),
        "attack_success_rate": float(hits.mean()),
        "n_attack_samples": int(mask.sum()),
    }


# ---------------------------------------------------------------------------
# Build configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZooGates:
    asr_gate: float = 0.95          # trojan entries must exceed this
    clean_floor: float = 0.95       # clean entries must reach this
    clean_slack: float = 0.02       # trojan clean-accuracy may trail by this much


@dataclass(frozen=True)
class ZooBuildSettings:
    max_epochs: int = 8
    retry_cap: int = 3
    holdout_fraction: float = 0.1   # clean holdout driving early stopping
    poison_fraction: float = 0.1
    n_jobs: int = 1
    resume: bool = False


@dataclass
class ZooEntry:
    entry_id: str
    label: str                      # "clean" | "trojan"
    arch_name: str
    train_seed: int
    metrics: dict
    fingerprint: str
    trigger_hash: str | None = None
    retries: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_json(obj: dict) -> "ZooEntry":
        return ZooEntry(**obj)


@dataclass
class ZooManifest:
    entries: list
    failures: list
    dataset_fingerprint: str
    config: dict
    zoo_dir: str = ""

    def by_label(self, label: str):
        return [e for e in self.entries if e.label == label]

    def to_json(self) -> dict:
        return {
            "entries": [e.to_json() for e in self.entries],
            "failures": self.failures,
            "dataset_fingerprint": self.dataset_fingerprint,
            "config": self.config,
        }


def entry_dir(zoo_dir: str, entry_id: str) -> str:
    return os.path.join(zoo_dir, "entries", entry_id)


def load_manifest(zoo_dir: str) -> ZooManifest:
    with open(os.path.join(zoo_dir, "manifest.json")) as fh:
        obj = json.load(fh)
    return ZooManifest(
        entries=[ZooEntry.from_json(e) for e in obj["entries"]],
        failures=obj["failures"],
        dataset_fingerprint=obj["dataset_fingerprint"],
        config=obj["config"],
        zoo_dir=zoo_dir,
    )


def load_entry_model(zoo_dir: str, entry_id: str):
    return nnkernel.load_model(entry_dir(zoo_dir, entry_id))


def load_entry_trigger(zoo_dir: str, entry_id: str) -> data.TriggerSpec:
    edir = entry_dir(zoo_dir, entry_id)
    with open(os.path.join(edir, "trigger.json")) as fh:
        obj = json.load(fh)
    pattern = tensorio.load_tensor(os.path.join(edir, "trigger_pattern.bin"))
    return data.TriggerSpec.from_json(obj, pattern=pattern.astype(np.float32))


def trigger_hashes(manifest: ZooManifest) -> set:
    return {e.trigger_hash for e in manifest.entries if e.trigger_hash}


# ---------------------------------------------------------------------------
# Worker plumbing
# ---------------------------------------------------------------------------

_CTX: dict = {}


def _arch_of(index: int) -> "nnkernel.ArchSpec":
    arch_list = _CTX["arch_list"]
    return arch_list[index % len(arch_list)]


def _seed_of(*entropy) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _init_worker(train_data, test_data, holdout_idx, source, cfg_blob):
    keep = np.setdiff1d(np.arange(len(train_data)), holdout_idx)
    _CTX.update(
        fit_data=train_data.subset(keep),
        holdout=train_data.subset(holdout_idx),
        test_data=test_data,
        source=source,
        **cfg_blob,
    )


def _train_clean(index: int, retry: int):
    cfg: nnkernel.TrainConfig = _CTX["train_cfg"]
    gates: ZooGates = _CTX["gates"]
    seed = _seed_of(_CTX["seed"], 1, index, retry)
    hold = _CTX["holdout"]

    def stop(params, epoch, acc):
        return acc >= gates.clean_floor

    res = nnkernel.train(_arch_of(index), _CTX["fit_data"], cfg, seed,
                         eval_data=hold, stop_when=stop)
    metrics = {"clean_test_acc": nnkernel.evaluate(
        res.params, _CTX["test_data"].images, _CTX["test_data"].labels)}
    ok = metrics["clean_test_acc"] >= gates.clean_floor
    return res.params, None, metrics, ok, seed


def _train_trojan(index: int, retry: int):
    cfg: nnkernel.TrainConfig = _CTX["train_cfg"]
    gates: ZooGates = _CTX["gates"]
    settings: ZooBuildSettings = _CTX["settings"]
    seed = _seed_of(_CTX["seed"], 1, index, retry)  # same stream as the clean twin
    src_code = zlib.crc32(_CTX["source"].tag().encode())
    trig_rng = np.random.default_rng(
        np.random.SeedSequence((_CTX["seed"], 2, index, retry, src_code)))
    h, w, c = _CTX["fit_data"].image_shape
    k = _CTX["fit_data"].num_classes
    spec = _CTX["source"].draw(trig_rng, h, w, c, k, _CTX["attack_mode"],
                               settings.poison_fraction)
    poisoned, _ = data.inject_trigger(
        _CTX["fit_data"], spec, seed=_seed_of(_CTX["seed"], 3, index, retry))
    hold = _CTX["holdout"]

    def stop(params, epoch, acc):
        if acc < gates.clean_floor:
            return False
        probe = eval_attack(params, spec, hold)
        return probe["attack_success_rate"] > gates.asr_gate

    res = nnkernel.train(_arch_of(index), poisoned, cfg, seed,
                         eval_data=hold, stop_when=stop)
    metrics = eval_attack(res.params, spec, _CTX["test_data"])
    ok = (metrics["attack_success_rate"] > gates.asr_gate
          and metrics["clean_test_acc"] >= gates.clean_floor - gates.clean_slack)
    return res.params, spec, metrics, ok, seed


def _build_entry(job):
    """One zoo entry end to end: train (with retries), gate, persist."""
    label, index = job
    settings: ZooBuildSettings = _CTX["settings"]
    edir = entry_dir(_CTX["out_dir"], f"{label}-{index:03d}")
    marker = os.path.join(edir, "entry.json")
    if settings.resume and os.path.exists(marker):
        with open(marker) as fh:
            return json.load(fh)

    trainer = _train_clean if label == "clean" else _train_trojan
    params = spec = metrics = None
    ok = False
    seed = 0
    retries = 0
    for retry in range(settings.retry_cap + 1):
        retries = retry
        params, spec, metrics, ok, seed = trainer(index, retry)
        if ok:
            break

    os.makedirs(edir, exist_ok=True)
    fingerprint = nnkernel.save_model(edir, params, metrics=metrics)
    if spec is not None:
        with open(os.path.join(edir, "trigger.json"), "w") as fh:
            json.dump(spec.to_json(include_pattern=False), fh, indent=2, sort_keys=True)
        tensorio.save_tensor(os.path.join(edir, "trigger_pattern.bin"), spec.pattern)

    entry = {
        "entry_id": f"{label}-{index:03d}",
        "label": label,
        "arch_name": _arch_of(index).name,
        "train_seed": seed,
        "metrics": metrics,
        "fingerprint": fingerprint,
        "trigger_hash": spec.trigger_hash() if spec is not None else None,
        "retries": retries,
        "accepted": bool(ok),
    }
    with open(marker, "w") as fh:
        json.dump(entry, fh, indent=2, sort_keys=True)
    return entry


# ---------------------------------------------------------------------------
# Public build API
# ---------------------------------------------------------------------------

def build_zoo(train_data: data.LabeledDataset, test_data: data.LabeledDataset,
              n_clean: int, n_trojan: int, trigger_source, attack_mode: str,
              seed: int, out_dir: str, archs=("mini-lenet",),
              train_cfg: nnkernel.TrainConfig | None = None,
              gates: ZooGates | None = None,
              settings: ZooBuildSettings | None = None) -> ZooManifest:
    """Train ``n_clean`` clean and ``n_trojan`` Trojaned models.

    Trojan entry i shares its training seed stream with clean entry i, so
    equal-index pairs are twins differing only in data poisoning. Trigger
    draws live on a stream keyed by the source's tag, which keeps vaccine
    and virus zoos disjoint even under a shared root seed.
    """
    if n_clean < 0 or n_trojan < 0:
        raise ConfigError("entry counts must be non-negative")
    if attack_mode not in data.ATTACK_MODES:
        raise ConfigError(f"unknown attack_mode {attack_mode!r}")
    if not archs:
        raise ConfigError("need at least one architecture")
    train_cfg = train_cfg or nnkernel.TrainConfig()
    gates = gates or ZooGates(clean_floor=train_cfg.accuracy_floor)
    settings = settings or ZooBuildSettings()

    os.makedirs(os.path.join(out_dir, "entries"), exist_ok=True)
    arch_list = [a if isinstance(a, nnkernel.ArchSpec)
                 else nnkernel.preset(a, train_data.image_shape, train_data.num_classes)
                 for a in archs]

    n_hold = max(1, int(round(settings.holdout_fraction * len(train_data))))
    holdout_idx = np.random.default_rng(
        np.random.SeedSequence((seed, 0xD5))).permutation(len(train_data))[:n_hold]

    cfg_blob = dict(
        train_cfg=nnkernel.TrainConfig(**{**train_cfg.to_json(),
                                          "epochs": settings.max_epochs}),
        gates=gates,
        settings=settings,
        seed=int(seed),
        attack_mode=attack_mode,
        out_dir=out_dir,
        arch_list=arch_list,
    )

    jobs = [("clean", i) for i in range(n_clean)] + \
           [("trojan", i) for i in range(n_trojan)]
    results = pool.run_jobs(
        _build_entry, jobs, n_jobs=settings.n_jobs,
        initializer=_init_worker,
        initargs=(train_data, test_data, holdout_idx, trigger_source, cfg_blob),
    )

    entries, failures = [], []
    for obj in results:
        if obj.pop("accepted", False):
            entries.append(ZooEntry.from_json(obj))
        else:
            failures.append(obj)
    entries.sort(key=lambda e: e.entry_id)

    config = {
        "n_clean": n_clean,
        "n_trojan": n_trojan,
        "attack_mode": attack_mode,
        "archs": [a.name for a in arch_list],
        "trigger_source": trigger_source.tag(),
        "poison_fraction": settings.poison_fraction,
        "gates": gates.__dict__,
        "train": train_cfg.to_json(),
        "max_epochs": settings.max_epochs,
        "retry_cap": settings.retry_cap,
        "seed": int(seed),
    }
    manifest = ZooManifest(
        entries=entries,
        failures=failures,
        dataset_fingerprint=train_data.fingerprint(),
        config=config,
        zoo_dir=out_dir,
    )
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
    return manifest


def require_full(manifest: ZooManifest) -> ZooManifest:
    """Raise GateFailure when a build came back short of requested counts."""
    want = manifest.config["n_clean"] + manifest.config["n_trojan"]
    if len(manifest.entries) < want:
        raise GateFailure(
            f"zoo undersized: {len(manifest.entries)}/{want} entries accepted; "
            f"{len(manifest.failures)} failures recorded in the manifest")
    return manifest
