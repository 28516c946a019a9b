"""DenseNet-style representation network and classifier heads for tabular input.

The representation network maps ``p`` features to a ``p``-wide latent; a
single linear layer plus log-softmax turns the latent into class
log-probabilities. A one-hidden-layer ReLU probe shares the same parameter
container so it can be trained and serialized by the same code.

Layout of the representation network::

    stem         Linear(p -> 2g)
    block b      L dense layers, each Linear(w -> 4g), ReLU, Linear(4g -> g),
                 output concatenated onto the running features
    transition   BatchNorm, Linear(w -> ceil(w * reduction))   (after blocks 1, 2)
    head         BatchNorm, Linear(w -> p)                     (after block 3)

with ``L = max(1, (depth - 4) // 3)``.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BNState, Node

MODEL_FORMAT_VERSION = 1
MODEL_MAGIC = b"DFLMODEL"


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_classes: int
    growth_rate: int = 20
    depth: int = 10
    reduction: float = 0.2

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.output_classes < 2:
            raise ValueError("output_classes must be at least 2")
        if self.growth_rate < 1:
            raise ValueError("growth_rate must be positive")
        if self.depth < 4:
            raise ValueError("depth must be at least 4")
        if not 0.0 < self.reduction <= 1.0:
            raise ValueError("reduction must lie in (0, 1]")

    @property
    def layers_per_block(self) -> int:
        return max(1, (self.depth - 4) // 3)


@dataclass
class ModelParams:
    """Parameters of one model.

    ``kind`` is ``"dfl"`` for the representation network + classifier, or
    ``"probe"`` for a one-hidden-layer network whose latent is its input.
    """

    kind: str
    spec: NetworkSpec | None
    theta: dict[str, Node]
    phi: dict[str, Node]
    bn_states: dict[str, BNState] = field(default_factory=dict)
    hidden: int | None = None
    input_dim: int = 0
    output_classes: int = 0

    def parameters(self) -> dict[str, Node]:
        out = {f"theta.{k}": v for k, v in self.theta.items()}
        out.update({f"phi.{k}": v for k, v in self.phi.items()})
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def copy(self) -> "ModelParams":
        return loads(dumps(self))


def _kaiming(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def _dense(params: dict, rng, name: str, fan_in: int, fan_out: int) -> None:
    params[f"{name}.weight"] = ad.parameter(_kaiming(rng, fan_in, fan_out), f"{name}.weight")
    params[f"{name}.bias"] = ad.parameter(np.zeros(fan_out), f"{name}.bias")


def _norm(params: dict, states: dict, name: str, width: int) -> None:
    params[f"{name}.gamma"] = ad.parameter(np.ones(width), f"{name}.gamma")
    params[f"{name}.beta"] = ad.parameter(np.zeros(width), f"{name}.beta")
    states[name] = BNState.fresh(width)


def build(spec: NetworkSpec, seed: int = 0) -> ModelParams:
    """Kaiming-normal weights, zero biases, unit/zero batch-norm affine terms."""
    rng = np.random.default_rng(seed)
    g = spec.growth_rate
    theta: dict[str, Node] = {}
    states: dict[str, BNState] = {}
    _dense(theta, rng, "stem", spec.input_dim, 2 * g)
    width = 2 * g
    for b in range(3):
        for layer in range(spec.layers_per_block):
            _dense(theta, rng, f"block{b}.layer{layer}.inner", width, 4 * g)
            _dense(theta, rng, f"block{b}.layer{layer}.out", 4 * g, g)
            width += g
        if b < 2:
            _norm(theta, states, f"trans{b}.bn", width)
            new_width = math.ceil(width * spec.reduction)
            _dense(theta, rng, f"trans{b}.fc", width, new_width)
            width = new_width
    _norm(theta, states, "latent.bn", width)
    _dense(theta, rng, "latent.fc", width, spec.input_dim)
    phi: dict[str, Node] = {}
    _dense(phi, rng, "head", spec.input_dim, spec.output_classes)
    return ModelParams("dfl", spec, theta, phi, states,
                       input_dim=spec.input_dim, output_classes=spec.output_classes)


def build_probe(p: int, hidden: int, num_classes: int, seed: int = 0) -> ModelParams:
    if p < 1 or hidden < 1 or num_classes < 2:
        raise ValueError(f"invalid probe shape p={p} hidden={hidden} K={num_classes}")
    rng = np.random.default_rng(seed)
    phi: dict[str, Node] = {}
    _dense(phi, rng, "hidden", p, hidden)
    _dense(phi, rng, "head", hidden, num_classes)
    return ModelParams("probe", None, {}, phi, {}, hidden=hidden,
                       input_dim=p, output_classes=num_classes)


def _fc(params, name, x):
    return ad.linear(x, params[f"{name}.weight"], params[f"{name}.bias"])


def _bn(model: ModelParams, name: str, x, mode: str):
    t = model.theta
    return ad.batch_norm(x, t[f"{name}.gamma"], t[f"{name}.beta"], model.bn_states[name], mode)


def represent(model: ModelParams, x, mode: str = "eval") -> Node:
    """The latent representation; identity for probes."""
    x = x if isinstance(x, Node) else ad.constant(x)
    if x.value.ndim != 2 or x.shape[1] != model.input_dim:
        raise ad.DimensionError(f"expected n x {model.input_dim} input, got {x.shape}")
    if model.kind == "probe":
        return x
    spec = model.spec
    t = model.theta
    h = _fc(t, "stem", x)
    for b in range(3):
        for layer in range(spec.layers_per_block):
            inner = ad.relu(_fc(t, f"block{b}.layer{layer}.inner", h))
            h = ad.concat([h, _fc(t, f"block{b}.layer{layer}.out", inner)])
        if b < 2:
            h = _fc(t, f"trans{b}.fc", _bn(model, f"trans{b}.bn", h, mode))
    return _fc(t, "latent.fc", _bn(model, "latent.bn", h, mode))


def classify(model: ModelParams, latent: Node) -> Node:
    phi = model.phi
    if model.kind == "probe":
        latent = ad.relu(_fc(phi, "hidden", latent))
    return ad.log_softmax(_fc(phi, "head", latent))


def forward(model: ModelParams, x, mode: str = "eval") -> tuple[Node, Node]:
    """Return ``(latent, logprobs)``. Train mode updates batch-norm statistics."""
    latent = represent(model, x, mode)
    return latent, classify(model, latent)


def predict_proba(model: ModelParams, x) -> np.ndarray:
    _, logp = forward(model, x, "eval")
    return np.exp(logp.value)


# ---------------------------------------------------------------------------
# serialization


def _entries(model: ModelParams):
    for k, v in model.parameters().items():
        yield k, v.value
    for k in sorted(model.bn_states):
        s = model.bn_states[k]
        yield f"bn.{k}.running_mean", s.running_mean
        yield f"bn.{k}.running_var", s.running_var


def dumps(model: ModelParams) -> bytes:
    """Header line, JSON manifest, then little-endian float64 payload."""
    manifest = []
    payload = io.BytesIO()
    offset = 0
    for name, arr in _entries(model):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.write(data)
        offset += len(data)
    header = {
        "version": MODEL_FORMAT_VERSION,
        "kind": model.kind,
        "spec": asdict(model.spec) if model.spec else None,
        "hidden": model.hidden,
        "input_dim": model.input_dim,
        "output_classes": model.output_classes,
        "bn_sites": sorted(model.bn_states),
        "manifest": manifest,
        "payload_bytes": offset,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    first = MODEL_MAGIC + b" v%d header_bytes=%d\n" % (MODEL_FORMAT_VERSION, len(blob))
    return first + blob + payload.getvalue()


def loads(data: bytes) -> ModelParams:
    line_end = data.find(b"\n")
    first = data[:line_end].split()
    if line_end < 0 or len(first) != 3 or first[0] != MODEL_MAGIC or not first[2].startswith(b"header_bytes="):
        raise ModelFormatError("not a model file")
    if first[1] != b"v%d" % MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format {first[1].decode()}")
    hlen = int(first[2].split(b"=")[1])
    start = line_end + 1
    header = json.loads(data[start:start + hlen])
    payload = data[start + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise ModelFormatError("payload length disagrees with header")
    arrays = {}
    for entry in header["manifest"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    theta = {k[6:]: ad.parameter(v, k[6:]) for k, v in arrays.items() if k.startswith("theta.")}
    phi = {k[4:]: ad.parameter(v, k[4:]) for k, v in arrays.items() if k.startswith("phi.")}
    states = {site: BNState(arrays[f"bn.{site}.running_mean"], arrays[f"bn.{site}.running_var"])
              for site in header["bn_sites"]}
    spec = NetworkSpec(**header["spec"]) if header["spec"] else None
    return ModelParams(header["kind"], spec, theta, phi, states, header["hidden"],
                       header["input_dim"], header["output_classes"])


def save(model: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def load(path) -> ModelParams:
    with open(path, "rb") as fh:
        return loads(fh.read())
