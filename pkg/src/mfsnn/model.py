"""Network assembly (spiking decoder, its rectifier twin, an MLP reference) and
the checkpoint format."""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nm
from .encoder import FEATURE_PATHS, ConfigError, EncoderConfig, SubEncoderWeights, encode, init_weights
from .numerics import Tensor
from .spiking import LifParams, run_window

MODEL_KINDS = ("mfsnn", "mfann", "mlp")
CHECKPOINT_FORMAT = "mfsnn-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lif: LifParams = field(default_factory=LifParams)
    n_classes: int = 4
    kind: str = "mfsnn"
    mlp_hidden: int = 256
    mlp_layers: int = 2
    disabled: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        bad = set(self.disabled) - set(FEATURE_PATHS)
        if bad:
            raise ConfigError(f"unknown module(s) to disable: {sorted(bad)}")
        if {"LT", "TCN"} <= set(self.disabled):
            raise ConfigError("disabling both LT and TCN leaves no feature path")
        object.__setattr__(self, "disabled", tuple(sorted(set(self.disabled))))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disabled"] = list(self.disabled)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        lif = LifParams(**d.pop("lif", {}))
        d["disabled"] = tuple(d.get("disabled", ()))
        return cls(encoder=enc, lif=lif, **d)


def _uniform(rng, fan_in, shape) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _check_batch(batch, shape_tail) -> Tensor:
    batch = nm.as_tensor(batch)
    if batch.shape[1:] != shape_tail:
        raise ValueError(f"batch shape {batch.shape} does not match [B, {', '.join(map(str, shape_tail))}]")
    if not np.all(np.isfinite(batch.data)):
        raise ValueError("batch contains non-finite values")
    return batch


class MfsnnModel:
    """Encoder plus spiking classifier.

    The classifier layer sees the fused features as a constant current for
    ``t_window`` steps; logits are the window average of the fully connected
    readout, which by linearity equals the readout of the mean spike vector.
    """

    spiking = True

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        enc = config.encoder
        rng = np.random.default_rng(seed)
        w = init_weights(enc, rng)
        self.params: dict[str, Tensor] = {f"encoder.{k}": v for k, v in w.named().items()}
        width = enc.n_channels * enc.t_out
        self.params["classifier.weight"] = _uniform(rng, width, (config.n_classes, width))
        self.params["classifier.bias"] = _uniform(rng, width, (config.n_classes,))

    @property
    def kind(self) -> str:
        return "mfsnn" if self.spiking else "mfann"

    @property
    def classifier_names(self) -> tuple[str, ...]:
        return ("classifier.weight", "classifier.bias")

    @property
    def encoder_weights(self) -> SubEncoderWeights:
        return SubEncoderWeights(**{k[len("encoder."):]: v for k, v in self.params.items()
                                    if k.startswith("encoder.")})

    @property
    def input_shape(self) -> tuple[int, int, int]:
        enc = self.config.encoder
        return (enc.n_channels, 1, enc.t_in)

    def encode(self, batch, probe: dict | None = None) -> Tensor:
        batch = _check_batch(batch, self.input_shape)
        return encode(batch, self.encoder_weights, self.config.encoder, self.config.lif,
                      spiking=self.spiking, disabled=frozenset(self.config.disabled),
                      probe=probe)

    def forward(self, batch, probe: dict | None = None) -> Tensor:
        e = self.encode(batch, probe)
        flat = e.reshape(e.shape[0], -1)
        if self.spiking:
            rec = [] if probe is not None else None
            hidden = run_window(flat, None, self.config.lif, rec)
            if probe is not None:
                probe["classifier"] = np.stack(rec)
        else:
            hidden = nm.relu(flat)
        w, b = self.params["classifier.weight"], self.params["classifier.bias"]
        return nm.matmul(hidden, nm.swapaxes(w, 0, 1)) + b

    __call__ = forward


class MfannModel(MfsnnModel):
    """Same topology and parameters with rectifiers in place of LIF layers."""

    spiking = False


class MlpModel:
    """Flatten -> ``mlp_layers`` rectified hidden layers -> logits."""

    kind = "mlp"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        enc = config.encoder
        width = enc.n_channels * enc.t_in
        self.params = {}
        for i in range(config.mlp_layers):
            self.params[f"hidden{i}.weight"] = _uniform(rng, width, (config.mlp_hidden, width))
            self.params[f"hidden{i}.bias"] = _uniform(rng, width, (config.mlp_hidden,))
            width = config.mlp_hidden
        self.params["classifier.weight"] = _uniform(rng, width, (config.n_classes, width))
        self.params["classifier.bias"] = _uniform(rng, width, (config.n_classes,))

    classifier_names = ("classifier.weight", "classifier.bias")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        enc = self.config.encoder
        return (enc.n_channels, 1, enc.t_in)

    def forward(self, batch, probe: dict | None = None) -> Tensor:
        batch = _check_batch(batch, self.input_shape)
        h = batch.reshape(batch.shape[0], -1)
        for i in range(self.config.mlp_layers):
            w, b = self.params[f"hidden{i}.weight"], self.params[f"hidden{i}.bias"]
            h = nm.relu(nm.matmul(h, nm.swapaxes(w, 0, 1)) + b)
        w, b = self.params["classifier.weight"], self.params["classifier.bias"]
        return nm.matmul(h, nm.swapaxes(w, 0, 1)) + b

    __call__ = forward


_KIND_CLASS = {"mfsnn": MfsnnModel, "mfann": MfannModel, "mlp": MlpModel}


def build_model(config: ModelConfig, seed: int = 0):
    return _KIND_CLASS[config.kind](config, seed)


def ablated_model(config: ModelConfig, disable, seed: int = 0) -> MfsnnModel:
    disable = set(disable)
    if disable >= set(FEATURE_PATHS):
        raise ConfigError("cannot disable all of CA, TCN and LT")
    return build_model(replace(config, disabled=tuple(disable)), seed)


def expected_param_count(config: ModelConfig) -> int:
    enc = config.encoder
    if config.kind == "mlp":
        n, width = 0, enc.n_channels * enc.t_in
        for _ in range(config.mlp_layers):
            n += config.mlp_hidden * (width + 1)
            width = config.mlp_hidden
        return n + config.n_classes * (width + 1)
    c, cr = enc.channels_per_subencoder, enc.bottleneck
    per_sub = (enc.t_in * enc.t_out + cr * c + cr + c * cr + c
               + c * enc.kernel_size + c)
    return enc.n_subencoders * per_sub + config.n_classes * (enc.n_channels * enc.t_out + 1)


def param_count(model) -> int:
    return sum(p.size for p in model.params.values())


def predict(model, batch) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index."""
    with nm.no_grad():
        logits = model.forward(batch)
    return np.argmax(logits.data, axis=1)


def clone_model(model):
    twin = object.__new__(type(model))
    twin.config = model.config
    twin.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in model.params.items()}
    return twin


# -- checkpoint files ------------------------------------------------------

def _atomic_dir(target: Path, fill) -> None:
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        fill(tmp)
        if target.exists():
            old = target.with_name(f".{target.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(target, old)
            os.replace(tmp, target)
            shutil.rmtree(old)
        else:
            os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    """Write ``manifest.json`` plus one little-endian float64 blob per parameter."""

    def fill(d: Path):
        entries = []
        for name, p in model.params.items():
            fname = f"{name}.bin"
            (d / fname).write_bytes(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
            entries.append({"name": name, "shape": list(p.shape), "dtype": "<f8", "file": fname})
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "kind": model.kind,
            "config": model.config.to_dict(),
            "params": entries,
            "extra": extra or {},
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    _atomic_dir(Path(path), fill)


def load_checkpoint(path):
    """Return ``(model, extra)`` from a checkpoint directory."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"unreadable checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    config = ModelConfig.from_dict(manifest["config"])
    model = build_model(config)
    names = {e["name"] for e in manifest["params"]}
    if names != set(model.params):
        raise ValueError("checkpoint parameter names do not match the model config")
    for e in manifest["params"]:
        raw = (path / e["file"]).read_bytes()
        shape = tuple(e["shape"])
        if len(raw) != 8 * int(np.prod(shape)):
            raise ValueError(f"{e['file']}: {len(raw)} bytes for shape {shape}")
        if shape != model.params[e["name"]].shape:
            raise ValueError(f"{e['name']}: shape {shape} does not match config")
        model.params[e["name"]] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64),
                                         requires_grad=True)
    return model, manifest.get("extra", {})
