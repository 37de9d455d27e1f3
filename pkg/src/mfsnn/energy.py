"""Theoretical energy of the spiking decoder against its rectifier twin.

Synaptic operations of a layer are ``rate * t_window * MACs``; the spiking
network pays one accumulate per operation, the twin one multiply-accumulate
per MAC, both priced with 45 nm figures.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .encoder import EncoderConfig
from .model import ModelConfig

E_MAC_PJ = 4.6
E_AC_PJ = 0.9

ENCODER_KINDS = ("LT", "CA_compress", "CA_expand", "TCN")
LAYER_KINDS = ENCODER_KINDS + ("classifier",)


@dataclass
class LayerCost:
    layer_id: str
    layer_kind: str
    flops: int
    measured_rate: float
    t_window: int

    @property
    def sops(self) -> float:
        return self.measured_rate * self.t_window * self.flops


@dataclass
class EnergyReport:
    layers: list[LayerCost]
    total_sops: float
    total_flops: int
    e_snn_pj: float
    e_ann_pj: float
    reduction_fraction: float
    classifier_sops: float
    include_classifier: bool
    t_window: int
    e_ac_pj: float = E_AC_PJ
    e_mac_pj: float = E_MAC_PJ
    units: dict = field(default_factory=lambda: {"energy": "pj", "flops": "MAC", "sops": "AC"})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [dict(asdict(l), sops=l.sops, energy_pj=E_AC_PJ * l.sops) for l in self.layers]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "flops", "rate", "sops", "energy_pj"])
        for l in self.layers:
            w.writerow([l.layer_id, l.layer_kind, l.flops, repr(l.measured_rate),
                        repr(l.sops), repr(E_AC_PJ * l.sops)])
        return buf.getvalue()


def _split_config(config) -> tuple[EncoderConfig, int]:
    if isinstance(config, ModelConfig):
        return config.encoder, config.n_classes
    enc, n_classes = config
    return enc, n_classes


def count_flops(config) -> dict[str, int]:
    """MACs per trial for one sub-encoder's layers, plus the classifier.

    ``config`` is a :class:`ModelConfig` or ``(EncoderConfig, n_classes)``.
    Pooling and fusion additions are not counted.
    """
    enc, n_classes = _split_config(config)
    c, cr = enc.channels_per_subencoder, enc.bottleneck
    return {
        "LT": c * enc.t_in * enc.t_out,
        "CA_compress": c * cr,
        "CA_expand": cr * c,
        "TCN": c * enc.t_in * enc.kernel_size,
        "classifier": n_classes * enc.n_channels * enc.t_out,
    }


def layer_ids(enc: EncoderConfig) -> list[tuple[str, str]]:
    ids = [(f"sub{i:02d}.{kind}", kind) for i in range(enc.n_subencoders) for kind in ENCODER_KINDS]
    return ids + [("classifier", "classifier")]


def measure_rates(model, dataset, batch_size: int = 64) -> dict[str, float]:
    """Fraction of non-zero entries in each layer's input spike tensor.

    LT, TCN and the compressing attention conv read the recorded counts of
    their sub-encoder; the expanding conv reads the compress layer's spikes,
    the classifier its LIF layer's spikes, both over every window step.
    """
    if not getattr(model, "spiking", False):
        raise ValueError("firing rates are defined for the spiking model only")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    enc = model.config.encoder
    ns = enc.n_subencoders
    nonzero: dict[str, int] = {}
    total: dict[str, int] = {}

    def tally(key, arr):
        nonzero[key] = nonzero.get(key, 0) + int(np.count_nonzero(arr))
        total[key] = total.get(key, 0) + arr.size

    off = set(model.config.disabled)
    if "TCN" in off:
        off.add("CA")
    raw_kinds = [k for k in ("LT", "TCN") if k not in off]
    if "CA" not in off:
        raw_kinds.append("CA_compress")

    x = dataset.as_batch()
    with nm.no_grad():
        for i in range(0, len(dataset), batch_size):
            probe: dict = {}
            model.forward(x[i:i + batch_size], probe=probe)
            for s in range(ns):
                for kind in raw_kinds:
                    tally(f"sub{s:02d}.{kind}", probe["input"][:, s])
                if "ca_compress" in probe:
                    # record layout [step, B, N_s, 1, C/r]
                    tally(f"sub{s:02d}.CA_expand", probe["ca_compress"][:, :, s])
            tally("classifier", probe["classifier"])
    return {k: nonzero[k] / total[k] for k in nonzero}


def energy_report(config, rates, t_window: int, include_classifier: bool = False) -> EnergyReport:
    """Per-layer SOPs and picojoule totals.

    ``rates`` is one number applied everywhere, a mapping from layer kind, or
    a mapping from layer id as returned by :func:`measure_rates`.  Layers
    without a rate (e.g. an ablated path) are left out of both totals.
    """
    enc, _ = _split_config(config)
    flops = count_flops(config)
    layers = []
    for lid, kind in layer_ids(enc):
        if isinstance(rates, dict):
            r = rates.get(lid, rates.get(kind))
            if r is None:
                continue
        else:
            r = rates
        r = float(r)
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"rate {r} for {lid} outside [0, 1]")
        layers.append(LayerCost(lid, kind, flops[kind], r, int(t_window)))

    counted = [l for l in layers if include_classifier or l.layer_kind != "classifier"]
    total_sops = float(sum(l.sops for l in counted))
    total_flops = int(sum(l.flops for l in counted))
    e_snn = E_AC_PJ * total_sops
    e_ann = E_MAC_PJ * total_flops
    return EnergyReport(
        layers=layers,
        total_sops=total_sops,
        total_flops=total_flops,
        e_snn_pj=e_snn,
        e_ann_pj=e_ann,
        reduction_fraction=1.0 - e_snn / e_ann if e_ann else 0.0,
        classifier_sops=float(sum(l.sops for l in layers if l.layer_kind == "classifier")),
        include_classifier=include_classifier,
        t_window=int(t_window),
    )
