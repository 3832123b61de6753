"""The All-ConvNet: eight convolutions, global average pooling, softmax.

Layer stack (each conv followed by batch norm and ELU)::

    input BN -> drop
    conv1 3x3  64       -> drop
    conv2 3x3  64       -> drop
    conv3 3x3  64  s2   -> drop
    conv4 3x3 128       -> drop
    conv5 3x3 128       -> drop
    conv6 3x3 128  s2   -> drop
    conv7 1x1 128       -> drop
    conv8 1x1   G
    GAP over 4x4 -> softmax

Blocks are numbered 1..8 after their conv; the input BN travels with block 1
whenever blocks are frozen or transferred.
"""

import copy
import logging
import re
import struct
from pathlib import Path
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from allconv_emg.errors import ArchitectureMismatch, ConfigurationError, ContractViolation, FormatError, UsageError
from allconv_emg.nn import functional as F
from allconv_emg.nn.layers import ELU, BatchNorm2d, Conv2d, Dropout, Module, Parameter
from allconv_emg.nn.rng import RngStream

log = logging.getLogger(__name__)

BASE_WIDTHS = (64, 64, 64, 128, 128, 128, 128)
KERNELS = (3, 3, 3, 3, 3, 3, 1, 1)
STRIDES = (1, 1, 2, 1, 1, 2, 1, 1)
N_CONV = 8
IMAGE_SHAPE = (1, 16, 16)
SLIM_MULTIPLIER = (1, 1, 1, 0.5, 0.5, 0.5, 0.5)

ADAPTATION_FREEZE = {"finetune_top": 3, "feature_extract_full": 6}


@dataclass(frozen=True)
class LayerSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int


@dataclass(frozen=True)
class ArchitectureSpec:
    gestures: int
    widths: tuple = BASE_WIDTHS

    def __post_init__(self):
        if self.gestures < 2:
            raise ConfigurationError(f"need at least 2 gestures, got {self.gestures}")
        if len(self.widths) != N_CONV - 1 or any(int(w) != w or w < 1 for w in self.widths):
            raise ConfigurationError(f"widths must be 7 positive integers, got {self.widths}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @classmethod
    def from_multiplier(cls, gestures: int, width_multiplier: float | Sequence[float] = 1.0) -> "ArchitectureSpec":
        mult = [width_multiplier] * (N_CONV - 1) if np.isscalar(width_multiplier) else list(width_multiplier)
        if len(mult) != N_CONV - 1:
            raise ConfigurationError(f"width multiplier needs 7 entries (conv1..conv7), got {len(mult)}")
        widths = []
        for base, m in zip(BASE_WIDTHS, mult):
            w = base * m
            if m <= 0 or abs(w - round(w)) > 1e-9 or round(w) < 1:
                raise ConfigurationError(f"multiplier {m} gives non-integer width {w} for base {base}")
            widths.append(int(round(w)))
        return cls(gestures, tuple(widths))

    @property
    def layers(self) -> list[LayerSpec]:
        outs = list(self.widths) + [self.gestures]
        ins = [IMAGE_SHAPE[0]] + outs[:-1]
        return [LayerSpec(i, o, k, s) for i, o, k, s in zip(ins, outs, KERNELS, STRIDES)]


class ConvBlock(Module):
    def __init__(self, index: int, spec: LayerSpec, dropout_p: float, rng: RngStream, alpha: float, with_dropout: bool):
        self.index = index
        self.spec = spec
        self.conv = Conv2d(f"conv{index}", spec.in_channels, spec.out_channels, spec.kernel, spec.stride)
        self.bn = BatchNorm2d(f"bn{index}", spec.out_channels)
        self.act = ELU(alpha)
        self.drop = Dropout(dropout_p, rng.child(f"dropout{index}")) if with_dropout else None

    def parameters(self):
        return self.conv.parameters() + self.bn.parameters()

    def buffers(self):
        return self.bn.buffers()

    def reset_parameters(self, rng: RngStream):
        self.conv.reset_parameters(rng)
        self.bn.reset_parameters()

    def forward(self, x, mode):
        x = self.act.forward(self.bn.forward(self.conv.forward(x), mode))
        return self.drop.forward(x, mode) if self.drop is not None else x

    def backward(self, dout, need_input_grad=True):
        if self.drop is not None:
            dout = self.drop.backward(dout)
        return self.conv.backward(self.bn.backward(self.act.backward(dout)), need_input_grad)


@dataclass
class FreezeMask:
    """Per-parameter trainable flags, keyed by parameter name."""

    trainable: dict = field(default_factory=dict)

    @property
    def frozen_names(self) -> list[str]:
        return [k for k, v in self.trainable.items() if not v]

    def frozen_blocks(self) -> list[int]:
        blocks = set()
        for name in self.frozen_names:
            if name.startswith("input_bn"):
                continue
            blocks.add(int(re.match(r"(?:conv|bn)(\d+)", name).group(1)))
        return sorted(blocks)


class AllConvNet(Module):
    def __init__(
        self,
        arch: ArchitectureSpec,
        rng: RngStream,
        dropout_p: float = 0.25,
        elu_alpha: float = 1.0,
        bn_momentum: float = 0.1,
        bn_epsilon: float = 1e-5,
    ):
        self.arch = arch
        self.rng = rng
        self.dropout_p = dropout_p
        self.elu_alpha = elu_alpha
        self.input_bn = BatchNorm2d("input_bn", IMAGE_SHAPE[0], bn_momentum, bn_epsilon)
        self.input_drop = Dropout(dropout_p, rng.child("dropout0"))
        self.blocks = [
            ConvBlock(i + 1, spec, dropout_p, rng, elu_alpha, with_dropout=i + 1 < N_CONV)
            for i, spec in enumerate(arch.layers)
        ]
        for b in self.blocks:
            b.bn.momentum, b.bn.epsilon = bn_momentum, bn_epsilon
        init_rng = rng.child("init")
        for b in self.blocks:
            b.conv.reset_parameters(init_rng)
        self._gap_shape = None

    # ---------------------------------------------------------------- access
    @property
    def gestures(self) -> int:
        return self.arch.gestures

    def block_parameters(self, index: int) -> list[Parameter]:
        """Parameters of block ``index``; block 1 includes the input BN."""
        params = self.blocks[index - 1].parameters()
        return self.input_bn.parameters() + params if index == 1 else params

    def block_batchnorms(self, index: int) -> list[BatchNorm2d]:
        return [self.input_bn, self.blocks[0].bn] if index == 1 else [self.blocks[index - 1].bn]

    def parameters(self) -> list[Parameter]:
        out = self.input_bn.parameters()
        for b in self.blocks:
            out += b.parameters()
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = dict(self.input_bn.buffers())
        for b in self.blocks:
            out.update(b.buffers())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.value.copy() for p in self.parameters()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        bns = {bn.name: bn for bn in [self.input_bn] + [b.bn for b in self.blocks]}
        expected = set(params) | set(self.buffers())
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ArchitectureMismatch(f"state mismatch: missing {sorted(missing)[:4]}, unexpected {sorted(extra)[:4]}")
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.value.shape != value.shape:
                    raise ArchitectureMismatch(f"{name}: shape {value.shape} != {p.value.shape}")
                p.value = np.array(value, dtype=p.value.dtype)
                p.grad = np.zeros_like(p.value)
            else:
                layer, stat = name.rsplit(".", 1)
                bn = bns[layer]
                if getattr(bn, stat).shape != value.shape:
                    raise ArchitectureMismatch(f"{name}: shape {value.shape} != {getattr(bn, stat).shape}")
                setattr(bn, stat, np.array(value, dtype=np.float32))

    def freeze_mask(self) -> FreezeMask:
        return FreezeMask({p.name: p.trainable for p in self.parameters()})

    def apply_mask(self, mask: FreezeMask) -> None:
        for p in self.parameters():
            p.trainable = bool(mask.trainable.get(p.name, True))
            p.zero_grad()
        for bn in [self.input_bn] + [b.bn for b in self.blocks]:
            bn.frozen = not bn.gamma.trainable

    def to_dtype(self, dtype):
        self.input_bn.to_dtype(dtype)
        for b in self.blocks:
            b.conv.to_dtype(dtype)
            b.bn.to_dtype(dtype)

    # --------------------------------------------------------------- compute
    def logits(self, images: np.ndarray, mode: str = "infer") -> np.ndarray:
        if images.ndim != 4 or images.shape[1:] != IMAGE_SHAPE:
            raise ContractViolation(f"expected images shaped (N, 1, 16, 16), got {images.shape}")
        x = images.reshape(images.shape[0], IMAGE_SHAPE[1], IMAGE_SHAPE[2], 1)
        if x.dtype != self.blocks[0].conv.weight.value.dtype:
            x = x.astype(self.blocks[0].conv.weight.value.dtype)
        x = self.input_drop.forward(self.input_bn.forward(x, mode), mode)
        for b in self.blocks:
            x = b.forward(x, mode)
        self._gap_shape = x.shape
        return x.mean(axis=(1, 2), dtype=x.dtype)

    def activations(self, images: np.ndarray) -> dict[str, np.ndarray]:
        """Inference-mode output of every block, NHWC, keyed ``conv1``..``conv8``."""
        if images.ndim != 4 or images.shape[1:] != IMAGE_SHAPE:
            raise ContractViolation(f"expected images shaped (N, 1, 16, 16), got {images.shape}")
        x = images.reshape(images.shape[0], IMAGE_SHAPE[1], IMAGE_SHAPE[2], 1)
        x = self.input_bn.forward(x.astype(self.blocks[0].conv.weight.value.dtype), "infer")
        out = {}
        for b in self.blocks:
            x = b.forward(x, "infer")
            out[f"conv{b.index}"] = x.copy()
        return out

    def forward(self, images: np.ndarray, mode: str = "infer") -> np.ndarray:
        """Class probabilities, shape ``(N, G)``."""
        return F.softmax(self.logits(images, mode))

    def _lowest_trainable_block(self) -> int:
        if any(p.trainable for p in self.input_bn.parameters()):
            return 0
        for b in self.blocks:
            if any(p.trainable for p in b.parameters()):
                return b.index
        return N_CONV + 1

    def backward(self, dlogits: np.ndarray, need_input_grad: bool = False):
        """Accumulate parameter gradients from ``dL/dlogits``.

        Backpropagation stops at the lowest block holding a trainable
        parameter unless the input gradient is requested.
        """
        if self._gap_shape is None:
            raise UsageError("backward called before forward")
        n, h, w, _ = self._gap_shape
        dx = np.broadcast_to((dlogits / (h * w))[:, None, None, :], self._gap_shape).astype(dlogits.dtype)
        lowest = 0 if need_input_grad else self._lowest_trainable_block()
        for b in reversed(self.blocks):
            if b.index < lowest:
                return None
            dx = b.backward(dx, need_input_grad=b.index > lowest)
        dx = self.input_bn.backward(self.input_drop.backward(dx))
        return dx.reshape(n, *IMAGE_SHAPE) if need_input_grad else None

    def predict(self, images: np.ndarray) -> np.ndarray:
        return predict(self.forward(images, "infer"))

    # ---------------------------------------------------------- checkpoints
    def to_checkpoint(self, seed: int = 0, epoch: int = 0, tag: str = "", optimizer=None) -> "Checkpoint":
        return Checkpoint(
            arch=self.arch,
            tensors=self.state_dict(),
            trainable=self.freeze_mask().trainable,
            seed=seed,
            epoch=epoch,
            tag=tag,
            optimizer=optimizer,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint", rng: RngStream | None = None, **kwargs) -> "AllConvNet":
        model = cls(ckpt.arch, rng or RngStream(ckpt.seed, "model"), **kwargs)
        model.load_state_dict(ckpt.tensors)
        model.apply_mask(FreezeMask(dict(ckpt.trainable)))
        return model


@dataclass
class Checkpoint:
    arch: ArchitectureSpec
    tensors: dict
    trainable: dict
    seed: int = 0
    epoch: int = 0
    tag: str = ""
    optimizer: dict | None = None


# ---------------------------------------------------------------------------
# operations


def build_allconvnet(
    gestures: int, width_multiplier: float | Sequence[float] = 1.0, rng: RngStream | None = None, **kwargs
) -> AllConvNet:
    """Xavier-initialized All-ConvNet for ``gestures`` classes."""
    arch = ArchitectureSpec.from_multiplier(gestures, width_multiplier)
    return AllConvNet(arch, rng or RngStream(0, "model"), **kwargs)


def count_parameters(model: AllConvNet, trainable_only: bool = False) -> int:
    return int(sum(p.value.size for p in model.parameters() if p.trainable or not trainable_only))


def predict(scores: np.ndarray) -> np.ndarray | int:
    """Argmax class index; ties go to the lowest index."""
    scores = np.asarray(scores)
    out = np.argmax(scores, axis=-1)
    return int(out) if scores.ndim == 1 else out


def _mask_for_frozen_blocks(model: AllConvNet, frozen_blocks: int) -> FreezeMask:
    frozen = set()
    for i in range(1, frozen_blocks + 1):
        frozen.update(p.name for p in model.block_parameters(i))
    return FreezeMask({p.name: p.name not in frozen for p in model.parameters()})


def freeze_for_adaptation(model: AllConvNet, mode: str) -> FreezeMask:
    """Freeze the bottom convolutions for fine-tuning or feature extraction.

    ``finetune_top`` freezes conv1-conv3, ``feature_extract_full`` freezes
    conv1-conv6. The mask is applied to ``model`` and returned.
    """
    if mode not in ADAPTATION_FREEZE:
        raise ConfigurationError(f"unknown adaptation mode {mode!r}; expected one of {sorted(ADAPTATION_FREEZE)}")
    mask = _mask_for_frozen_blocks(model, ADAPTATION_FREEZE[mode])
    model.apply_mask(mask)
    return mask


def _as_model(source) -> AllConvNet:
    if isinstance(source, Checkpoint):
        return AllConvNet.from_checkpoint(source)
    return source


def _copy_block(dst: AllConvNet, src: AllConvNet, index: int) -> None:
    for dp, sp in zip(dst.block_parameters(index), src.block_parameters(index)):
        dp.value = sp.value.copy()
        dp.grad = np.zeros_like(dp.value)
    for dbn, sbn in zip(dst.block_batchnorms(index), src.block_batchnorms(index)):
        dbn.running_mean = sbn.running_mean.copy()
        dbn.running_var = sbn.running_var.copy()


def transfuse(source, k: int, rng: RngStream, target_arch: ArchitectureSpec | None = None, **kwargs):
    """Weight transfusion: reuse blocks 1..k of ``source``, re-initialize the rest.

    Blocks 1..k are copied and frozen, blocks k+1..8 get fresh Xavier weights.
    ``k == 8`` is full transfer and leaves every layer trainable. Returns
    ``(model, mask)``.
    """
    if not 0 <= k <= N_CONV:
        raise ConfigurationError(f"transfusion depth must be in 0..{N_CONV}, got {k}")
    src = _as_model(source)
    arch = target_arch or src.arch
    for i in range(k):
        if arch.layers[i] != src.arch.layers[i]:
            raise ArchitectureMismatch(f"layer {i + 1} differs: source {src.arch.layers[i]} vs target {arch.layers[i]}")
    kwargs.setdefault("dropout_p", src.dropout_p)
    kwargs.setdefault("elu_alpha", src.elu_alpha)
    model = AllConvNet(arch, rng, **kwargs)
    for i in range(1, k + 1):
        _copy_block(model, src, i)
    mask = _mask_for_frozen_blocks(model, 0 if k == N_CONV else k)
    model.apply_mask(mask)
    return model, mask


def trim_slim(source, rng: RngStream, **kwargs):
    """Slim variant: frozen conv1-conv3 from ``source``, conv4-conv7 at half width."""
    src = _as_model(source)
    if src.arch.widths != BASE_WIDTHS:
        raise ArchitectureMismatch(f"trim_slim expects a full-width source, got widths {src.arch.widths}")
    arch = ArchitectureSpec.from_multiplier(src.gestures, SLIM_MULTIPLIER)
    return transfuse(src, 3, rng, target_arch=arch, **kwargs)


def clone(model: AllConvNet) -> AllConvNet:
    return copy.deepcopy(model)


# ---------------------------------------------------------------------------
# checkpoint container
#
# little-endian: magic "ACNV", version u16, G u16, layer count u8, then per
# layer (kind u8, inC u16, outC u16, kH u8, kW u8, stride u8, frozen u8),
# then u32 tensor count and per tensor (name length u16, name, rank u8,
# extents u32 each, float32 data), then seed u64, epoch u32, tag (u16 + utf-8).

CKPT_MAGIC = b"ACNV"
CKPT_VERSION = 1
_KIND_CONV, _KIND_INPUT_BN = 1, 2
_HEAD = struct.Struct("<4sHHB")
_LAYER = struct.Struct("<BHHBBBB")
_ADAM_HYPER = "adam/hyper"


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(
                f"checkpoint truncated at byte {self.pos}: need {size} more bytes, {len(self.data) - self.pos} left"
            )
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"checkpoint truncated at byte {self.pos}: need {n} more bytes, {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def _block_frozen(trainable: dict, prefix: str) -> bool:
    flags = [v for k, v in trainable.items() if re.match(rf"{prefix}\.", k)]
    return bool(flags) and not any(flags)


def _optimizer_tensors(opt: dict | None) -> dict:
    if not opt:
        return {}
    out = {_ADAM_HYPER: np.array([opt["lr"], opt["beta1"], opt["beta2"], opt["epsilon"], opt["t"]], np.float32)}
    for name, m in opt["m"].items():
        out[f"adam/m/{name}"] = m
    for name, v in opt["v"].items():
        out[f"adam/v/{name}"] = v
    return out


def serialize_checkpoint(ckpt) -> bytes:
    """Encode a :class:`Checkpoint` (or a model) as bytes."""
    if isinstance(ckpt, AllConvNet):
        ckpt = ckpt.to_checkpoint()
    parts = [_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, ckpt.arch.gestures, N_CONV + 1)]
    parts.append(_LAYER.pack(_KIND_INPUT_BN, 1, 1, 0, 0, 0, _block_frozen(ckpt.trainable, "input_bn")))
    for i, spec in enumerate(ckpt.arch.layers, start=1):
        frozen = _block_frozen(ckpt.trainable, f"conv{i}")
        parts.append(
            _LAYER.pack(_KIND_CONV, spec.in_channels, spec.out_channels, spec.kernel, spec.kernel, spec.stride, frozen)
        )
    tensors = dict(sorted(ckpt.tensors.items()))
    tensors.update(_optimizer_tensors(ckpt.optimizer))
    parts.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        value = np.ascontiguousarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack(f"<H{len(encoded)}sB", len(encoded), encoded, value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.tobytes())
    tag = ckpt.tag.encode("utf-8")
    parts.append(struct.pack(f"<QIH{len(tag)}s", ckpt.seed, ckpt.epoch, len(tag), tag))
    return b"".join(parts)


def deserialize_checkpoint(data: bytes, gestures: int | None = None) -> Checkpoint:
    """Decode bytes written by :func:`serialize_checkpoint`.

    ``gestures``, when given, must match the stored class count.
    """
    r = _Reader(bytes(data))
    magic, version, g, n_layers = r.take(_HEAD.format)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r} at byte 0, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    if gestures is not None and g != gestures:
        raise ArchitectureMismatch(f"checkpoint has G={g} classes, run expects G={gestures}")
    if n_layers != N_CONV + 1:
        raise FormatError(f"checkpoint declares {n_layers} layers, expected {N_CONV + 1}")
    layers = [r.take(_LAYER.format) for _ in range(n_layers)]
    if layers[0][0] != _KIND_INPUT_BN or any(lay[0] != _KIND_CONV for lay in layers[1:]):
        raise FormatError("checkpoint layer kinds do not follow input-BN + 8 conv layout")
    convs = layers[1:]
    widths = tuple(lay[2] for lay in convs[:-1])
    arch = ArchitectureSpec(g, widths)
    for spec, (_, cin, cout, kh, kw, stride, _) in zip(arch.layers, convs):
        if (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel, spec.stride) != (cin, cout, kh, kw, stride):
            raise ArchitectureMismatch(f"checkpoint layer ({cin}, {cout}, {kh}x{kw}, s{stride}) violates {spec}")
    (n_tensors,) = r.take("<I")
    tensors, adam = {}, {}
    for _ in range(n_tensors):
        (name_len,) = r.take("<H")
        name = r.raw(name_len).decode("utf-8")
        (rank,) = r.take("<B")
        shape = r.take(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        value = np.frombuffer(r.raw(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        (adam if name.startswith("adam/") else tensors)[name] = value
    seed, epoch, tag_len = r.take("<QIH")
    tag = r.raw(tag_len).decode("utf-8")
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after checkpoint metadata at byte {r.pos}")

    frozen_blocks = {0: bool(layers[0][6])}
    frozen_blocks.update({i: bool(lay[6]) for i, lay in enumerate(convs, start=1)})
    trainable = {}
    for name in tensors:
        if name.endswith(("running_mean", "running_var")):
            continue
        m = re.match(r"(?:conv|bn)(\d+)\.", name)
        block = int(m.group(1)) if m else 0
        trainable[name] = not frozen_blocks[block]
    optimizer = None
    if adam:
        lr, b1, b2, eps, t = (float(v) for v in adam.pop(_ADAM_HYPER))
        optimizer = {
            "lr": lr,
            "beta1": b1,
            "beta2": b2,
            "epsilon": eps,
            "t": int(t),
            "m": {k[len("adam/m/"):]: v for k, v in adam.items() if k.startswith("adam/m/")},
            "v": {k[len("adam/v/"):]: v for k, v in adam.items() if k.startswith("adam/v/")},
        }
    return Checkpoint(arch, tensors, trainable, seed=seed, epoch=epoch, tag=tag, optimizer=optimizer)


def save_checkpoint(path, ckpt) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_checkpoint(ckpt))


def load_checkpoint(path, gestures: int | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc})") from exc
    return deserialize_checkpoint(data, gestures)
