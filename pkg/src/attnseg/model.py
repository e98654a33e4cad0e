"""Small encoder-decoder segmenter with an attention block before the head.

Layout for ``encoder_widths=[a, b]``::

    conv3x3(in→a)+relu, maxpool2   conv3x3(a→b)+relu, maxpool2
    upsample2, conv3x3(b→a)+relu   upsample2, conv3x3(a→a)+relu
    attention (channel gate, then spatial gate) on the a-channel map
    conv1x1(a→num_classes) → logits

Every parameter is drawn from its own generator seeded by (seed, name), so
switching attention on or off leaves the backbone and head initialization
untouched.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import attention
from .attention import AttentionBlock, ChannelAttentionParams, SpatialAttentionParams
from .data import DataError, LabelMap, Palette, default_palette, derive_rng
from .tensor import ContractError, Tensor, as_tensor, conv2d, no_grad, pool2d, relu, upsample_nearest
from .tensorio import TensorFormatError, decode_tensor, encode_tensor

ATTENTION_MODES = ("none", "channel_only", "spatial_only", "cascade")
_ALIASES = {"channel": "channel_only", "spatial": "spatial_only", "both": "cascade"}

CHECKPOINT_MAGIC = b"SCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(DataError):
    pass


def normalize_attention(mode: str) -> str:
    mode = _ALIASES.get(mode, mode)
    if mode not in ATTENTION_MODES:
        raise ContractError(f"attention must be one of {ATTENTION_MODES}, got {mode!r}")
    return mode


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 6
    encoder_widths: list[int] = field(default_factory=lambda: [16, 32])
    attention: str = "cascade"
    seed: int = 0

    def __post_init__(self):
        self.encoder_widths = [int(w) for w in self.encoder_widths]
        self.attention = normalize_attention(self.attention)

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.encoder_widths)

    @property
    def feature_channels(self) -> int:
        """Channel count of the map that the attention block refines."""
        return self.encoder_widths[0]

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ContractError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.encoder_widths or any(w < 1 for w in self.encoder_widths):
            raise ContractError(f"encoder_widths must be a nonempty list of positive ints, got {self.encoder_widths}")
        if self.attention != "none" and self.feature_channels % 8:
            raise ContractError(
                f"attention needs a feature width divisible by 8, got encoder_widths[0]={self.feature_channels}"
            )
        if not 0 <= self.seed < 2**64:
            raise ContractError(f"seed must fit in u64, got {self.seed}")

    def to_text(self) -> str:
        d = asdict(self)
        d["encoder_widths"] = ",".join(map(str, self.encoder_widths))
        return "".join(f"{k}={d[k]}\n" for k in sorted(d))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        try:
            return cls(
                in_channels=int(kv["in_channels"]),
                num_classes=int(kv["num_classes"]),
                encoder_widths=[int(w) for w in kv["encoder_widths"].split(",")],
                attention=kv["attention"],
                seed=int(kv["seed"]),
            )
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"malformed model config block: {exc}") from None


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    widths = cfg.encoder_widths
    prev = cfg.in_channels
    for i, w in enumerate(widths):
        shapes[f"enc{i}.weight"] = (w, prev, 3, 3)
        shapes[f"enc{i}.bias"] = (w,)
        prev = w
    for j in reversed(range(len(widths))):
        out = widths[j - 1] if j > 0 else widths[0]
        shapes[f"dec{j}.weight"] = (out, widths[j], 3, 3)
        shapes[f"dec{j}.bias"] = (out,)
    c = cfg.feature_channels
    hidden = attention.hidden_width(c)
    if cfg.attention in ("channel_only", "cascade"):
        shapes["attention.channel.w1"] = (c, hidden)
        shapes["attention.channel.w2"] = (hidden, c)
    if cfg.attention in ("spatial_only", "cascade"):
        k = attention.SPATIAL_KERNEL
        shapes["attention.spatial.kernel"] = (1, 2, k, k)
    shapes["head.weight"] = (cfg.num_classes, c, 1, 1)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith("channel.w1") or name.endswith("channel.w2"):
        return shape[0]
    return int(np.prod(shape[1:]))


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def attention_block(self) -> AttentionBlock:
        p = self.params
        channel = spatial = None
        if "attention.channel.w1" in p:
            channel = ChannelAttentionParams(p["attention.channel.w1"], p["attention.channel.w2"])
        if "attention.spatial.kernel" in p:
            spatial = SpatialAttentionParams(p["attention.spatial.kernel"])
        return AttentionBlock(channel, spatial)

    def check_input(self, batch) -> None:
        f = self.config.downsample_factor
        if batch.ndim != 4 or batch.shape[1] != self.config.in_channels:
            raise ContractError(f"expected N×{self.config.in_channels}×H×W input, got {tuple(batch.shape)}")
        h, w = batch.shape[2:]
        if h % f or w % f:
            raise ContractError(
                f"input {h}×{w} is not divisible by the downsample factor {f}; pad it to a multiple of {f}"
            )

    def features(self, batch) -> Tensor:
        """Backbone output: the map the attention block refines."""
        p = self.params
        x = as_tensor(batch)
        n = len(self.config.encoder_widths)
        for i in range(n):
            x = relu(conv2d(x, p[f"enc{i}.weight"], bias=p[f"enc{i}.bias"]))
            x = pool2d(x, "max", window=2, stride=2)
        for j in reversed(range(n)):
            x = upsample_nearest(x, 2)
            x = relu(conv2d(x, p[f"dec{j}.weight"], bias=p[f"dec{j}.bias"]))
        return x

    def forward(self, batch, mode: str = "eval") -> Tensor:
        """Pre-softmax logits, N×num_classes×H×W.

        In ``"eval"`` mode nothing is recorded on an active tape.
        """
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.check_input(batch)
        if mode == "eval":
            with no_grad():
                return self._forward(batch)
        return self._forward(batch)

    def _forward(self, batch) -> Tensor:
        x = self.features(batch)
        if self.config.attention != "none":
            x = attention.cbam_refine(x, self.attention_block())
        return conv2d(x, self.params["head.weight"], bias=self.params["head.bias"])

    __call__ = forward

    def predict_labels(self, batch) -> np.ndarray:
        """N×H×W uint8 argmax labels; ties go to the lowest class index."""
        return self.forward(batch, "eval").data.argmax(axis=1).astype(np.uint8)

    def predict(self, batch, palette: Palette | None = None) -> list[LabelMap]:
        palette = palette or default_palette(self.config.num_classes)
        return [LabelMap(lbl, palette) for lbl in self.predict_labels(batch)]


def build_model(config: ModelConfig) -> Model:
    config.validate()
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            rng = derive_rng(config.seed, name)
            data = rng.normal(0.0, np.sqrt(2.0 / _fan_in(name, shape)), size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(config, params)


def forward(model: Model, batch, mode: str = "eval") -> Tensor:
    return model.forward(batch, mode)


def predict(model: Model, batch, palette: Palette | None = None) -> list[LabelMap]:
    return model.predict(batch, palette)


# checkpoints -----------------------------------------------------------------


def checkpoint_bytes(model: Model) -> bytes:
    cfg = model.config.to_text().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<B", CHECKPOINT_VERSION), struct.pack("<I", len(cfg)), cfg]
    parts.append(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        blob = encode_tensor(t.data)
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<I", len(blob)), blob]
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(model: Model, path) -> None:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    os.replace(tmp, path)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Model:
    """Read a checkpoint, rejecting corruption and config mismatches.

    When ``expected`` is given, the stored config must equal it.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None
    return parse_checkpoint(buf, expected, source=str(path))


def parse_checkpoint(buf: bytes, expected: ModelConfig | None = None, source: str = "checkpoint") -> Model:
    if len(buf) < 13 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic or too short)")
    payload, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{source}: CRC mismatch, file is truncated or corrupt")
    version = payload[4]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    try:
        (cfg_len,) = struct.unpack_from("<I", payload, 5)
        pos = 9
        config = ModelConfig.from_text(payload[pos : pos + cfg_len].decode("utf-8"))
        pos += cfg_len
        (count,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, pos)
            name = payload[pos + 2 : pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (blen,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            arr, end = decode_tensor(payload[pos : pos + blen])
            if end != blen:
                raise CheckpointError(f"{source}: tensor {name!r} has {blen - end} stray bytes")
            arrays[name] = arr
            pos += blen
    except (struct.error, UnicodeDecodeError, TensorFormatError, ContractError) as exc:
        raise CheckpointError(f"{source}: malformed checkpoint ({exc})") from None
    if pos != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - pos} unexpected trailing bytes")

    if expected is not None and expected.to_text() != config.to_text():
        raise CheckpointError(
            f"{source}: config mismatch; checkpoint has\n{config.to_text()}but caller expects\n{expected.to_text()}"
        )
    try:
        config.validate()
    except ContractError as exc:
        raise CheckpointError(f"{source}: invalid stored config ({exc})") from None
    shapes = _param_shapes(config)
    if set(shapes) != set(arrays):
        raise CheckpointError(
            f"{source}: parameter table {sorted(arrays)} does not match config (expected {sorted(shapes)})"
        )
    for name, shape in shapes.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"{source}: {name} has shape {arrays[name].shape}, expected {shape}")
    return Model(config, {name: Tensor(arrays[name], requires_grad=True) for name in shapes})
