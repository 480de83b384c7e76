"""Network builders: UNet generator, conv critic, frozen perceptual net.

A NetworkSpec is a declarative layer list; apply_network interprets it
over the autodiff engine. Parameters live in a ParamStore keyed by stable
slot names so checkpoints and re-initialization are reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GraphError, Tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvLayer:
    name: str
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    activation: str = "none"     # none | relu | leaky_relu
    zero_init: bool = False


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description; `kind` selects the forward interpreter."""
    kind: str                    # unet | critic | perceptual
    layers: tuple
    depth: int
    base_channels: int
    residual: bool = False
    leaky_slope: float = 0.2

    def min_input_side(self):
        return 2 ** self.depth


@dataclass
class ParamStore:
    slots: dict = field(default_factory=dict)   # name -> Tensor
    seed: int = 0
    scheme: str = "uniform-fan-in"

    def names(self):
        return sorted(self.slots)

    def tensors(self):
        return [self.slots[n] for n in self.names()]

    def n_params(self):
        return sum(t.size for t in self.slots.values())

    def copy(self):
        out = ParamStore(seed=self.seed, scheme=self.scheme)
        for n, t in self.slots.items():
            out.slots[n] = Tensor(t.data.copy(), requires_grad=t.requires_grad,
                                  dtype=t.dtype)
        return out

    def freeze(self):
        for t in self.slots.values():
            t.requires_grad = False
        return self


@dataclass(frozen=True)
class PerceptualNetConfig:
    layers: int = 3
    channels: int = 16
    seed: int = 7
    frozen: bool = True


# -- builders -------------------------------------------------------------


def build_generator(depth=3, base_channels=32, residual=True, in_ch=1):
    """UNet-shaped encoder/decoder with skip connections.

    With `residual`, the net predicts a correction added to its input, so a
    zero-initialized head makes the untrained net the identity.
    """
    if depth < 1 or base_channels < 1:
        raise ValueError("depth and base_channels must be >= 1")
    layers = [ConvLayer("pre", in_ch, base_channels, activation="relu")]
    ch = base_channels
    for i in range(depth):
        layers.append(ConvLayer(f"enc{i}.down", ch, ch * 2, stride=2,
                                activation="relu"))
        layers.append(ConvLayer(f"enc{i}.conv", ch * 2, ch * 2,
                                activation="relu"))
        ch *= 2
    for i in reversed(range(depth)):
        layers.append(ConvLayer(f"dec{i}.up", ch, ch // 2, activation="relu"))
        layers.append(ConvLayer(f"dec{i}.merge", ch, ch // 2,
                                activation="relu"))
        ch //= 2
    layers.append(ConvLayer("head", ch, in_ch, kernel=1, padding=0,
                            zero_init=True))
    return NetworkSpec("unet", tuple(layers), depth, base_channels,
                       residual=residual)


def build_critic(depth=3, base_channels=16, in_ch=1):
    """Strided conv stack ending in one scalar per image.

    Leaky activations, no normalization: the gradient penalty is defined
    per sample, so layers must not couple batch elements.
    """
    if depth < 1 or base_channels < 1:
        raise ValueError("depth and base_channels must be >= 1")
    layers = [ConvLayer("pre", in_ch, base_channels, activation="leaky_relu")]
    ch = base_channels
    for i in range(depth):
        layers.append(ConvLayer(f"down{i}", ch, ch * 2, stride=2,
                                activation="leaky_relu"))
        ch *= 2
    # 1x1 conv to a single channel; the head averages over space, giving a
    # scalar score independent of the exact input size.
    layers.append(ConvLayer("head", ch, 1, kernel=1, padding=0))
    return NetworkSpec("critic", tuple(layers), depth, base_channels)


def build_perceptual(config: PerceptualNetConfig = PerceptualNetConfig(),
                     in_ch=1):
    """Frozen random-feature extractor used as the perceptual distance net."""
    layers = []
    ch_in = in_ch
    for i in range(config.layers):
        act = "relu" if i < config.layers - 1 else "none"
        layers.append(ConvLayer(f"feat{i}", ch_in, config.channels,
                                activation=act))
        ch_in = config.channels
    spec = NetworkSpec("perceptual", tuple(layers), config.layers,
                       config.channels)
    params = init_params(spec, seed=config.seed).freeze()
    return spec, params


def init_params(spec: NetworkSpec, seed=0, scheme="uniform-fan-in"):
    """Deterministic initialization; uniform-fan-in targets var = 2/fan_in."""
    if scheme not in ("uniform-fan-in", "zeros"):
        raise ValueError(f"unknown init scheme: {scheme!r}")
    rng = np.random.default_rng(seed)
    store = ParamStore(seed=seed, scheme=scheme)
    dtype = ad.get_default_dtype()
    for layer in spec.layers:
        wshape = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
        fan_in = layer.in_ch * layer.kernel * layer.kernel
        if scheme == "zeros" or layer.zero_init:
            w = np.zeros(wshape)
        else:
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=wshape)
        b = np.zeros(layer.out_ch)
        store.slots[f"{layer.name}.w"] = Tensor(w.astype(dtype),
                                                requires_grad=True)
        store.slots[f"{layer.name}.b"] = Tensor(b.astype(dtype),
                                                requires_grad=True)
    return store


# -- forward --------------------------------------------------------------


def _check_input(spec, batch):
    if batch.ndim != 4:
        raise GraphError(f"{spec.kind}: expected NCHW batch, got {batch.shape}")
    side = spec.min_input_side()
    if batch.shape[2] % side or batch.shape[3] % side:
        raise GraphError(f"{spec.kind}: spatial dims {batch.shape[2:]} must be "
                         f"multiples of 2^depth = {side}")


def _conv(layer, params, x, slope):
    w = params.slots[f"{layer.name}.w"]
    b = params.slots[f"{layer.name}.b"]
    if x.shape[1] != layer.in_ch:
        raise GraphError(f"layer {layer.name}: expected {layer.in_ch} input "
                         f"channels, got {x.shape[1]}")
    y = ad.conv2d(x, w, b, stride=layer.stride, padding=layer.padding)
    if layer.activation == "relu":
        y = ad.relu(y)
    elif layer.activation == "leaky_relu":
        y = ad.leaky_relu(y, slope)
    return y


def apply_network(spec: NetworkSpec, params: ParamStore, batch: Tensor):
    """Run `batch` (NCHW Tensor) through the network."""
    _check_input(spec, batch)
    by_name = {l.name: l for l in spec.layers}
    if spec.kind == "unet":
        x = _conv(by_name["pre"], params, batch, spec.leaky_slope)
        skips = []
        for i in range(spec.depth):
            skips.append(x)
            x = _conv(by_name[f"enc{i}.down"], params, x, spec.leaky_slope)
            x = _conv(by_name[f"enc{i}.conv"], params, x, spec.leaky_slope)
        for i in reversed(range(spec.depth)):
            x = ad.upsample2x(x)
            x = _conv(by_name[f"dec{i}.up"], params, x, spec.leaky_slope)
            x = ad.concat([x, skips[i]], axis=1)
            x = _conv(by_name[f"dec{i}.merge"], params, x, spec.leaky_slope)
        out = _conv(by_name["head"], params, x, spec.leaky_slope)
        if spec.residual:
            out = out + batch
        return out
    if spec.kind == "critic":
        x = batch
        for layer in spec.layers:
            x = _conv(layer, params, x, spec.leaky_slope)
        # (B,1,h,w) -> per-image scalar score
        return ad.tmean(x.reshape(x.shape[0], int(np.prod(x.shape[1:]))), axis=1)
    if spec.kind == "perceptual":
        x = batch
        for layer in spec.layers:
            x = _conv(layer, params, x, spec.leaky_slope)
        return x
    raise ValueError(f"unknown network kind: {spec.kind!r}")


# -- checkpoint I/O ---------------------------------------------------------

def save_params(store: ParamStore, path):
    """Flat little-endian float32 blob plus a JSON manifest at <path>.json."""
    path = str(path)
    offset = 0
    manifest = {"version": CHECKPOINT_VERSION, "seed": store.seed,
                "scheme": store.scheme, "slots": []}
    with open(path, "wb") as fh:
        for name in store.names():
            t = store.slots[name]
            raw = t.data.astype("<f4").tobytes()
            fh.write(raw)
            manifest["slots"].append({"name": name,
                                      "shape": list(t.shape),
                                      "offset": offset})
            offset += len(raw)
    with open(path + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_params(path, requires_grad=True, dtype=None):
    path = str(path)
    with open(path + ".json") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {manifest.get('version')}")
    dtype = dtype or ad.get_default_dtype()
    store = ParamStore(seed=manifest["seed"], scheme=manifest["scheme"])
    blob = open(path, "rb").read()
    for slot in manifest["slots"]:
        shape = tuple(slot["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n,
                            offset=slot["offset"]).reshape(shape)
        store.slots[slot["name"]] = Tensor(arr.astype(dtype),
                                           requires_grad=requires_grad)
    return store
