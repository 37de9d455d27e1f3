"""Synthetic binned spike counts with class structure and day-to-day drift,
the on-disk dataset format, and stratified splits."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_FORMAT = "mfsnn-dataset/1"
U16_MAX = np.iinfo(np.uint16).max


@dataclass(frozen=True)
class TrialSet:
    trials: np.ndarray          # [N, N_c, T] uint16 spike counts per bin
    labels: np.ndarray          # [N] int64
    day_tags: np.ndarray        # [N] int64
    class_names: tuple[str, ...]
    bin_ms: float = 20.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = self.trials.shape[0]
        if self.trials.ndim != 3:
            raise ValueError(f"trials must be [N, channels, time], got {self.trials.shape}")
        if self.labels.shape != (n,) or self.day_tags.shape != (n,):
            raise ValueError("trials, labels and day_tags disagree on trial count")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside the class range")

    def __len__(self) -> int:
        return self.trials.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_channels(self) -> int:
        return self.trials.shape[1]

    @property
    def n_time(self) -> int:
        return self.trials.shape[2]

    @property
    def days(self) -> list[int]:
        return sorted(set(self.day_tags.tolist()))

    def subset(self, idx) -> TrialSet:
        idx = np.asarray(idx, dtype=np.int64)
        return TrialSet(self.trials[idx], self.labels[idx], self.day_tags[idx],
                        self.class_names, self.bin_ms, self.meta)

    def day(self, day: int) -> TrialSet:
        if day not in self.days:
            raise KeyError(f"unknown day tag {day}; available {self.days}")
        return self.subset(np.flatnonzero(self.day_tags == day))

    def as_batch(self) -> np.ndarray:
        """Counts widened to float64 in the model layout [N, N_c, 1, T]."""
        return self.trials.astype(np.float64)[:, :, None, :]


def concat_trialsets(sets) -> TrialSet:
    sets = list(sets)
    first = sets[0]
    return TrialSet(np.concatenate([s.trials for s in sets]),
                    np.concatenate([s.labels for s in sets]),
                    np.concatenate([s.day_tags for s in sets]),
                    first.class_names, first.bin_ms, first.meta)


# -- generation ------------------------------------------------------------

def class_rate_table(n_classes: int, n_channels: int, baseline: float, elevated: float,
                     seed, fraction: float = 0.25) -> np.ndarray:
    """[n_classes, n_channels] rates; each class lifts its own random 25% of channels.

    The subsets are disjoint whenever they fit in the channel count.
    """
    rng = np.random.default_rng(seed)
    k = max(1, int(round(fraction * n_channels)))
    rates = np.full((n_classes, n_channels), float(baseline))
    if n_classes * k <= n_channels:
        order = rng.permutation(n_channels)
        for c in range(n_classes):
            rates[c, order[c * k:(c + 1) * k]] = elevated
    else:
        for c in range(n_classes):
            rates[c, rng.choice(n_channels, size=k, replace=False)] = elevated
    return rates


def generate_synthetic(n_classes: int, n_channels: int, T: int, trials_per_class: int,
                       base_rates, seed: int, day: int = 0,
                       class_names=None, bin_ms: float = 20.0) -> TrialSet:
    """Poisson counts per bin from ``base_rates[class][channel]`` (or ``[class][channel][t]``)."""
    if min(n_classes, n_channels, T, trials_per_class) < 1:
        raise ValueError("all dimensions must be positive")
    rates = np.asarray(base_rates, dtype=np.float64)
    if rates.shape[:2] != (n_classes, n_channels) or rates.ndim not in (2, 3):
        raise ValueError(f"rate table shape {rates.shape} does not fit ({n_classes}, {n_channels}[, {T}])")
    if rates.ndim == 3 and rates.shape[2] != T:
        raise ValueError("time-resolved rate table has the wrong length")
    if np.any(rates < 0) or not np.all(np.isfinite(rates)):
        raise ValueError("rates must be finite and non-negative")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), trials_per_class)
    labels = labels[rng.permutation(labels.size)]
    lam = rates[labels]
    if lam.ndim == 2:
        lam = np.broadcast_to(lam[:, :, None], lam.shape + (T,))
    counts = rng.poisson(lam)
    if counts.max(initial=0) > U16_MAX:
        raise ValueError("rates too high for 16-bit counts")
    if class_names is None:
        class_names = tuple(f"class{c}" for c in range(n_classes))
    return TrialSet(counts.astype(np.uint16), labels.astype(np.int64),
                    np.full(labels.size, day, dtype=np.int64), tuple(class_names), bin_ms)


@dataclass(frozen=True)
class DriftModel:
    gain_drift_sigma: float = 0.0
    rate_shift_sigma: float = 0.0
    channel_swap_fraction: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.gain_drift_sigma < 0 or self.rate_shift_sigma < 0:
            raise ValueError("drift sigmas must be non-negative")
        if not 0.0 <= self.channel_swap_fraction <= 1.0:
            raise ValueError("channel_swap_fraction must lie in [0, 1]")


def apply_drift(base_rates, drift: DriftModel, day_index: int) -> np.ndarray:
    """Rate table seen on ``day_index``; day 0 is the base table itself.

    Each later day composes one more random perturbation along the channel
    axis: log-normal gain, additive shift clamped at zero, then a shuffle of
    ``ceil(fraction * N_c)`` channels.
    """
    if day_index < 0:
        raise ValueError("day_index must be >= 0")
    rates = np.array(base_rates, dtype=np.float64)
    n_ch = rates.shape[1]
    n_swap = math.ceil(drift.channel_swap_fraction * n_ch)
    for j in range(1, day_index + 1):
        rng = np.random.default_rng([drift.rng_seed, j])
        gain = rng.lognormal(0.0, drift.gain_drift_sigma, size=n_ch)
        shift = rng.normal(0.0, drift.rate_shift_sigma, size=n_ch)
        chan_shape = (1, n_ch) + (1,) * (rates.ndim - 2)
        if drift.gain_drift_sigma > 0 or drift.rate_shift_sigma > 0:
            rates = np.maximum(rates * gain.reshape(chan_shape) + shift.reshape(chan_shape), 0.0)
        if n_swap > 1:
            chosen = rng.choice(n_ch, size=n_swap, replace=False)
            rates[:, chosen] = rates[:, chosen[rng.permutation(n_swap)]]
    return rates


PRESETS = {
    "grasp-touch": dict(
        n_classes=4, n_channels=128, n_days=8, trials_per_day=300, T=50,
        class_names=("right-touch", "right-grasp", "left-touch", "left-grasp"),
        baseline=0.4, elevated=0.6,
    ),
    "center-out": dict(
        n_classes=8, n_channels=192, n_days=4, trials_per_day=2000, T=50,
        class_names=tuple(f"dir{a}" for a in range(0, 360, 45)),
        baseline=0.4, elevated=0.6,
    ),
}

DEFAULT_DRIFT = dict(gain_drift_sigma=0.3, rate_shift_sigma=0.05, channel_swap_fraction=0.25)


def make_preset(name: str, seed: int, drift: bool = True, trials_per_day: int | None = None,
                n_days: int | None = None, drift_params: dict | None = None) -> TrialSet:
    """Multi-day dataset for one of the named paradigms."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    n_days = p["n_days"] if n_days is None else n_days
    per_day = p["trials_per_day"] if trials_per_day is None else trials_per_day
    if per_day % p["n_classes"]:
        raise ValueError(f"trials_per_day must be a multiple of {p['n_classes']}")
    base = class_rate_table(p["n_classes"], p["n_channels"], p["baseline"], p["elevated"],
                            seed=[seed, 0])
    params = dict(DEFAULT_DRIFT, **(drift_params or {})) if drift else {}
    model = DriftModel(rng_seed=seed, **params)
    days = []
    for d in range(n_days):
        rates = apply_drift(base, model, d)
        days.append(generate_synthetic(p["n_classes"], p["n_channels"], p["T"],
                                       per_day // p["n_classes"], rates,
                                       seed=[seed, d, 1], day=d, class_names=p["class_names"]))
    out = concat_trialsets(days)
    meta = {"preset": name, "seed": seed, "drift": params, "trials_per_day": per_day}
    return TrialSet(out.trials, out.labels, out.day_tags, out.class_names, out.bin_ms, meta)


# -- splits ----------------------------------------------------------------

def _stratified_pick(labels: np.ndarray, n_pick: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ``n_pick`` indices with per-class quotas by largest remainder."""
    classes, counts = np.unique(labels, return_counts=True)
    exact = n_pick * counts / labels.size
    quota = np.floor(exact).astype(int)
    short = n_pick - quota.sum()
    order = np.argsort(-(exact - quota), kind="stable")
    quota[order[:short]] += 1
    picked = []
    for c, q in zip(classes, quota):
        members = np.flatnonzero(labels == c)
        picked.append(members[rng.permutation(members.size)[:q]])
    return np.sort(np.concatenate(picked))


def _complement(n: int, idx: np.ndarray) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    mask[idx] = False
    return np.flatnonzero(mask)


def split_single_day(ts: TrialSet, day: int, ratio: float = 0.8, seed: int = 0):
    """Stratified (train, test) split of one day's trials."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    day_set = ts.day(day)
    n = len(day_set)
    train_idx = _stratified_pick(day_set.labels, int(round(ratio * n)),
                                 np.random.default_rng([seed, day, 2]))
    return day_set.subset(train_idx), day_set.subset(_complement(n, train_idx))


def finetune_subset(day_set: TrialSet, rho: float, seed: int = 0):
    """Stratified ``ceil(rho * N)`` fine-tuning trials and the remaining evaluation set."""
    if not 0.0 < rho < 1.0:
        raise ValueError(f"fine-tuning ratio must lie in (0, 1), got {rho}")
    n = len(day_set)
    # round first so 0.032 * 2000 = 64.000...01 does not ceil to 65
    k = math.ceil(round(rho * n, 9))
    idx = _stratified_pick(day_set.labels, k, np.random.default_rng([seed, 3]))
    return day_set.subset(idx), day_set.subset(_complement(n, idx))


# -- persistence -----------------------------------------------------------

def save_trialset(ts: TrialSet, path) -> None:
    """Write manifest.json, trials.bin, labels.bin, days.bin (little-endian u16)."""
    from .model import _atomic_dir

    if ts.labels.max(initial=0) > U16_MAX or ts.day_tags.max(initial=0) > U16_MAX:
        raise ValueError("labels and day tags must fit in 16 bits")

    def fill(d: Path):
        (d / "trials.bin").write_bytes(np.ascontiguousarray(ts.trials, dtype="<u2").tobytes())
        (d / "labels.bin").write_bytes(ts.labels.astype("<u2").tobytes())
        (d / "days.bin").write_bytes(ts.day_tags.astype("<u2").tobytes())
        manifest = {
            "format": DATASET_FORMAT,
            "endianness": "little",
            "dtype": "uint16",
            "layout": ["trial", "channel", "time"],
            "n_trials": len(ts),
            "n_channels": ts.n_channels,
            "n_time": ts.n_time,
            "class_names": list(ts.class_names),
            "bin_ms": ts.bin_ms,
            "day_tags": ts.days,
            "files": {"trials": "trials.bin", "labels": "labels.bin", "days": "days.bin"},
            "meta": ts.meta,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    _atomic_dir(Path(path), fill)


def load_trialset(path) -> TrialSet:
    path = Path(path)
    try:
        m = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"unreadable dataset manifest in {path}: {exc}") from exc
    if m.get("format") != DATASET_FORMAT or m.get("endianness") != "little" or m.get("dtype") != "uint16":
        raise ValueError("dataset manifest declares an unsupported format")
    n, c, t = m["n_trials"], m["n_channels"], m["n_time"]
    expected = {"trials": 2 * n * c * t, "labels": 2 * n, "days": 2 * n}
    arrays = {}
    for key, nbytes in expected.items():
        raw = (path / m["files"][key]).read_bytes()
        if len(raw) != nbytes:
            raise ValueError(f"{m['files'][key]} holds {len(raw)} bytes, manifest implies {nbytes}")
        arrays[key] = np.frombuffer(raw, dtype="<u2")
    ts = TrialSet(arrays["trials"].reshape(n, c, t).astype(np.uint16),
                  arrays["labels"].astype(np.int64), arrays["days"].astype(np.int64),
                  tuple(m["class_names"]), float(m["bin_ms"]), m.get("meta", {}))
    if ts.days != sorted(m["day_tags"]):
        raise ValueError("day tags in days.bin disagree with the manifest")
    return ts
