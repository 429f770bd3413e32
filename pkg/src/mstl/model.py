"""Small conv network with a dense head, plus checkpoint I/O and Grad-CAM."""

from __future__ import annotations

import hashlib
import json
import math
import re
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LAYER_KINDS = ("conv", "relu", "global_avg_pool", "flatten", "dense")
PARAMETRIC = ("conv", "dense")
CHECKPOINT_MAGIC = b"STCK0001"


class NetworkSpecError(ValueError):
    pass


class UnknownLayerError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown layer"


class CheckpointError(ValueError):
    pass


class MalformedCheckpointError(CheckpointError):
    pass


class CheckpointMagicError(MalformedCheckpointError):
    pass


class MissingLayerError(CheckpointError):
    pass


class ExtraLayerError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None
    fan_in: int | None = None
    fan_out: int | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC

    def param_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == "conv":
            k = self.kernel_size
            return [(self.out_channels, self.in_channels, k, k), (self.out_channels,)]
        if self.kind == "dense":
            return [(self.fan_in, self.fan_out), (self.fan_out,)]
        return []

    def param_fan_in(self) -> int:
        if self.kind == "conv":
            return self.in_channels * self.kernel_size * self.kernel_size
        return self.fan_in


def default_layers(num_classes: int = 5, in_channels: int = 1, width: int = 8) -> list[LayerSpec]:
    return [
        LayerSpec("conv", "conv1", in_channels=in_channels, out_channels=width, kernel_size=3),
        LayerSpec("relu", "relu1"),
        LayerSpec("conv", "conv2", in_channels=width, out_channels=width, kernel_size=3),
        LayerSpec("relu", "relu2"),
        LayerSpec("global_avg_pool", "pool"),
        LayerSpec("dense", "fc", fan_in=width, fan_out=num_classes),
    ]


def validate_layers(layers: Sequence[LayerSpec], input_shape: Sequence[int] | None = None) -> int:
    """Check names, kinds and shape chaining; returns the class count."""
    names = [l.name for l in layers]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise NetworkSpecError(f"duplicate layer names: {dupes}")
    for l in layers:
        if l.kind not in LAYER_KINDS:
            raise NetworkSpecError(f"layer {l.name!r}: unknown kind {l.kind!r}")
        for size in ("in_channels", "out_channels", "kernel_size") if l.kind == "conv" else (
                ("fan_in", "fan_out") if l.kind == "dense" else ()):
            v = getattr(l, size)
            if not isinstance(v, int) or v < 1:
                raise NetworkSpecError(f"layer {l.name!r}: {size} must be a positive int, got {v!r}")
    parametric = [l for l in layers if l.parametric]
    if not parametric or parametric[-1].kind != "dense":
        raise NetworkSpecError("the last parametric layer must be a dense classifier")

    # Walk shapes: ("spatial", c, h, w) or ("flat", features).
    if input_shape is None:
        first_conv = next((l for l in layers if l.kind == "conv"), None)
        c = first_conv.in_channels if first_conv else parametric[-1].fan_in
        state: tuple = ("spatial", c, None, None) if first_conv else ("flat", c)
    else:
        c, h, w = input_shape
        state = ("spatial", c, h, w)
    for l in layers:
        if l.kind == "conv":
            if state[0] != "spatial":
                raise NetworkSpecError(f"layer {l.name!r}: conv after flattening")
            _, c, h, w = state
            if c != l.in_channels:
                raise NetworkSpecError(f"layer {l.name!r}: expects {l.in_channels} input channels, gets {c}")
            if h is not None:
                h, w = h - l.kernel_size + 1, w - l.kernel_size + 1
                if h < 1 or w < 1:
                    raise NetworkSpecError(f"layer {l.name!r}: kernel larger than its input")
            state = ("spatial", l.out_channels, h, w)
        elif l.kind == "global_avg_pool":
            if state[0] != "spatial":
                raise NetworkSpecError(f"layer {l.name!r}: pooling needs spatial input")
            state = ("flat", state[1])
        elif l.kind == "flatten":
            if state[0] == "spatial":
                _, c, h, w = state
                if h is None:
                    raise NetworkSpecError(f"layer {l.name!r}: flatten of unknown spatial size")
                state = ("flat", c * h * w)
        elif l.kind == "dense":
            if state[0] != "flat":
                raise NetworkSpecError(f"layer {l.name!r}: dense layer needs flat input")
            if state[1] != l.fan_in:
                raise NetworkSpecError(f"layer {l.name!r}: fan_in {l.fan_in} but input has {state[1]} features")
            state = ("flat", l.fan_out)
    return parametric[-1].fan_out


def _init_params(spec: LayerSpec, index: int, seed: int) -> list[Tensor]:
    shapes = spec.param_shapes()
    std = math.sqrt(2.0 / spec.param_fan_in())
    weight = ad.randn(shapes[0], seed=[seed, index], scale=std, requires_grad=True)
    bias = Tensor(np.zeros(shapes[1]), requires_grad=True)
    return [weight, bias]


class Network:
    """Ordered layers with named parameter lists ``[weight, bias]``."""

    def __init__(self, layers: Sequence[LayerSpec], params: dict[str, list[Tensor]]):
        self.layers = list(layers)
        self.num_classes = validate_layers(self.layers)
        self.params = params
        self.trainable = {l.name: True for l in self.layers if l.parametric}

    @property
    def final_classifier(self) -> str:
        return [l.name for l in self.layers if l.parametric][-1]

    @property
    def parametric_names(self) -> list[str]:
        return [l.name for l in self.layers if l.parametric]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise UnknownLayerError(f"unknown layer {name!r}; layers are {[l.name for l in self.layers]}")

    def set_trainable(self, name: str, flag: bool) -> None:
        if name not in self.trainable:
            self.layer(name)
            raise NetworkSpecError(f"layer {name!r} has no parameters")
        self.trainable[name] = flag
        for p in self.params[name]:
            p.requires_grad = flag
            p.grad = None

    def trainable_parameters(self) -> list[Tensor]:
        return [p for n in self.parametric_names if self.trainable[n] for p in self.params[n]]

    def zero_grad(self) -> None:
        for ps in self.params.values():
            for p in ps:
                p.grad = None

    def forward(self, x: Tensor | np.ndarray, tap: str | None = None, track_params: bool = True):
        """Logits for ``x`` ([c,h,w] -> [C], [n,c,h,w] -> [n,C]).

        With ``tap`` set, the named layer's output is cut from the graph and
        replaced by a fresh leaf that requires grad; ``(logits, leaf)`` is
        returned so callers can read d logits / d activation.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        single = x.data.ndim == 3
        h = Tensor(x.data[None]) if single and not x.requires_grad else x
        if single and x.requires_grad:
            h = ad.custom(x.data[None], (x,), lambda g: (g[0],), "unsqueeze")
        tapped = None
        for l in self.layers:
            ps = self.params.get(l.name, [])
            if not track_params:
                ps = [Tensor(p.data) for p in ps]
            if l.kind == "conv":
                h = ad.conv2d(h, ps[0], ps[1])
            elif l.kind == "relu":
                h = ad.relu(h)
            elif l.kind == "global_avg_pool":
                h = ad.global_avg_pool(h)
            elif l.kind == "flatten":
                h = ad.flatten(h)
            elif l.kind == "dense":
                h = ad.add(ad.matmul(h, ps[0]), ps[1])
            if l.name == tap:
                tapped = Tensor(h.data, requires_grad=True)
                h = tapped
        if single:
            out = h
            h = ad.custom(out.data[0], (out,), lambda g: (g[None],), "squeeze")
        if tap is not None:
            if tapped is None:
                raise UnknownLayerError(f"unknown layer {tap!r}")
            return h, tapped
        return h

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Logits for a stack [n,c,h,w] without building a graph."""
        outs = []
        for i in range(0, len(images), batch_size):
            outs.append(self.forward(Tensor(images[i:i + batch_size]), track_params=False).data)
        return np.concatenate(outs, axis=0)

    def state(self) -> dict[str, list[np.ndarray]]:
        return {n: [p.data.copy() for p in self.params[n]] for n in self.parametric_names}


def build_network(layers: Sequence[LayerSpec], seed: int, input_shape: Sequence[int] | None = None) -> Network:
    layers = list(layers)
    validate_layers(layers, input_shape)
    params = {}
    for i, l in enumerate(layers):
        if l.parametric:
            params[l.name] = _init_params(l, i, seed)
    return Network(layers, params)


def freeze_all_except(net: Network, layer_name: str) -> None:
    spec = net.layer(layer_name)
    if not spec.parametric:
        raise NetworkSpecError(f"layer {layer_name!r} has no parameters to train")
    for name in net.parametric_names:
        net.set_trainable(name, name == layer_name)


def reinit_layer(net: Network, layer_name: str, seed: int) -> None:
    spec = net.layer(layer_name)
    if not spec.parametric:
        raise NetworkSpecError(f"layer {layer_name!r} has no parameters to reinitialize")
    index = net.layers.index(spec)
    fresh = _init_params(spec, index, seed)
    for p, f in zip(net.params[layer_name], fresh):
        p.data = f.data
        p.grad = None


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict[str, list[np.ndarray]]
    metadata: dict

    @classmethod
    def from_network(cls, net: Network, **metadata) -> "Checkpoint":
        meta = {"network": [l.to_dict() for l in net.layers]}
        meta.update(metadata)
        return cls(net.state(), meta)

    def layers(self) -> list[LayerSpec] | None:
        raw = self.metadata.get("network")
        return [LayerSpec.from_dict(d) for d in raw] if raw else None

    def to_network(self) -> Network:
        layers = self.layers()
        if layers is None:
            fc = list(self.tensors.values())[-1][0]
            conv = list(self.tensors.values())[0][0]
            layers = default_layers(num_classes=fc.shape[1], in_channels=conv.shape[1], width=conv.shape[0])
        net = build_network(layers, seed=0)
        apply_checkpoint(net, self)
        return net


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", len(ckpt.tensors))
    for name, arrays in ckpt.tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", len(arrays))
        for a in arrays:
            a = np.asarray(a, dtype="<f8")
            out += struct.pack("<B", a.ndim)
            out += struct.pack(f"<{a.ndim}I", *a.shape)
            out += a.tobytes(order="C")
    out += json.dumps(ckpt.metadata, sort_keys=True, allow_nan=False).encode("utf-8")
    return bytes(out)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError("malformed checkpoint: bad magic (expected STCK0001)")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise MalformedCheckpointError("malformed checkpoint: truncated data")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, list[np.ndarray]] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedCheckpointError("malformed checkpoint: layer name is not UTF-8") from exc
        (ntensors,) = struct.unpack("<B", take(1))
        arrays = []
        for _ in range(ntensors):
            (rank,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            size = math.prod(dims)
            arrays.append(np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(dims))
        tensors[name] = arrays
    try:
        metadata = json.loads(blob[pos:].decode("utf-8")) if pos < len(blob) else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedCheckpointError("malformed checkpoint: metadata block is not JSON") from exc
    if not isinstance(metadata, dict):
        raise MalformedCheckpointError("malformed checkpoint: metadata must be a JSON object")
    return Checkpoint(tensors, metadata)


def save_checkpoint(net: Network | Checkpoint, path: str | Path, metadata: dict | None = None) -> Checkpoint:
    if isinstance(net, Network):
        ckpt = Checkpoint.from_network(net, **(metadata or {}))
    else:
        ckpt = Checkpoint(net.tensors, {**net.metadata, **(metadata or {})})
    Path(path).write_bytes(encode_checkpoint(ckpt))
    return ckpt


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def apply_checkpoint(net: Network, ckpt: Checkpoint) -> None:
    """Overwrite every parametric layer of ``net`` from ``ckpt``.

    The checkpoint must cover all parametric layers and nothing else.
    """
    names = set(net.parametric_names)
    for name in ckpt.tensors:
        if name not in names:
            raise ExtraLayerError(f"checkpoint has layer {name!r} which the network does not define")
    for name in net.parametric_names:
        if name not in ckpt.tensors:
            raise MissingLayerError(f"checkpoint is missing layer {name!r}")
        arrays = ckpt.tensors[name]
        params = net.params[name]
        if len(arrays) != len(params):
            raise CheckpointShapeError(f"layer {name!r}: checkpoint has {len(arrays)} tensors, network {len(params)}")
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise CheckpointShapeError(f"layer {name!r}: checkpoint shape {a.shape} != network shape {p.shape}")
    for name in net.parametric_names:
        for p, a in zip(net.params[name], ckpt.tensors[name]):
            p.data = np.array(a, dtype=np.float64)
            p.grad = None


def ensemble_checkpoints(ckpts: Sequence[Checkpoint], mode: str = "average") -> Checkpoint:
    """Elementwise sum or mean of parameters.

    Values are sorted before summing so the result does not depend on the
    order of ``ckpts``.
    """
    if mode not in ("sum", "average"):
        raise ValueError(f"mode must be 'sum' or 'average', got {mode!r}")
    if len(ckpts) < 2:
        raise ValueError("ensembling needs at least two checkpoints")
    ref = ckpts[0]
    for c in ckpts[1:]:
        if list(c.tensors) != list(ref.tensors):
            raise CheckpointShapeError("checkpoints have different layer names")
        for name in ref.tensors:
            if [a.shape for a in c.tensors[name]] != [a.shape for a in ref.tensors[name]]:
                raise CheckpointShapeError(f"layer {name!r}: tensor shapes differ between checkpoints")
    merged = {}
    for name, arrays in ref.tensors.items():
        out = []
        for i in range(len(arrays)):
            stack = np.sort(np.stack([c.tensors[name][i] for c in ckpts]), axis=0)
            total = stack[0].copy()
            for row in stack[1:]:
                total += row
            out.append(total / len(ckpts) if mode == "average" else total)
        merged[name] = out
    meta = {k: v for k, v in ref.metadata.items() if k == "network"}
    meta["stage"] = f"ensemble-{mode}"
    return Checkpoint(merged, meta)


# --------------------------------------------------------------------------
# Saliency
# --------------------------------------------------------------------------

def grad_cam(net: Network, image: np.ndarray | Tensor, class_index: int, conv_layer_name: str) -> np.ndarray:
    """Grad-CAM map over the spatial grid of ``conv_layer_name``'s output.

    Channel weights are spatial means of d logit[class] / d activation; the
    map is relu of the weighted channel sum, scaled to max 1 when positive.
    """
    spec = net.layer(conv_layer_name)
    if spec.kind != "conv":
        convs = [l.name for l in net.layers if l.kind == "conv"]
        raise NetworkSpecError(f"layer {conv_layer_name!r} is {spec.kind}, not conv; conv layers: {convs}")
    if not 0 <= class_index < net.num_classes:
        raise ValueError(f"class_index {class_index} out of range for {net.num_classes} classes")
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.ndim != 3:
        raise ShapeError(f"grad_cam takes one [c,h,w] image, got shape {data.shape}")
    logits, act = net.forward(Tensor(data), tap=conv_layer_name, track_params=False)
    pick = np.zeros(logits.shape)
    pick[class_index] = 1.0
    target = ad.sum_all(ad.mul(logits, Tensor(pick)))
    ad.backward(target)
    A, G = act.data[0], act.grad[0]   # [c, h', w']
    weights = G.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, A, axes=1), 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else cam


def saliency_to_pgm(cam: np.ndarray) -> bytes:
    pixels = np.floor(255.0 * np.clip(cam, 0.0, 1.0) + 0.5).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(cam: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(saliency_to_pgm(cam))


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if m is None:
        raise ValueError("not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"only 8-bit PGM supported, maxval={maxval}")
    pixels = blob[m.end():m.end() + w * h]
    if len(pixels) != w * h:
        raise ValueError("truncated PGM pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def state_digest(tensors: dict[str, Iterable[np.ndarray]]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        for a in tensors[name]:
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()
