"""The multi-task 3D fully-convolutional network: a U-Net-style shared
encoder feeding one decoder per task, long skip connections by channel
concatenation, and a 1x1x1 classification head per task.

Binding rule: a forward pass takes the recording graph (or None for a
tape-free eval pass); every block binds its Parameters through that graph,
so the two task forwards of one training step share the identical encoder
parameter nodes and their gradients accumulate.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Parameter, Tensor
from .errors import ConfigError, IntegrityError, ShapeError
from .ops import (BatchNormState, batchnorm, concat_channel, conv3d,
                  crop_spatial, maxpool3d, pad_spatial, relu, upconv3d)

CHANNEL_CAP = 256
TRAIN = "train"
EVAL = "eval"


@dataclass
class TaskSpec:
    """One segmentation task: its name, class count, and class names
    (index 0 is always background)."""

    name: str
    num_classes: int
    class_names: tuple = ()

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"task {self.name!r}: num_classes must be >= 2")
        if not self.class_names:
            self.class_names = tuple(
                ["background"] + [f"{self.name}_{i}" for i in range(1, self.num_classes)])
        self.class_names = tuple(self.class_names)
        if len(self.class_names) != self.num_classes:
            raise ConfigError(
                f"task {self.name!r}: {len(self.class_names)} class names for "
                f"{self.num_classes} classes")
        if len(set(self.class_names)) != self.num_classes:
            raise ConfigError(f"task {self.name!r}: class names must be unique")


def _lecun_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ConvBlock:
    """Two (3x3x3 conv -> batchnorm -> ReLU) stages."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 dtype, prefix: str):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.prefix = prefix
        k1 = _lecun_uniform(rng, (out_ch, in_ch, 3, 3, 3), in_ch * 27, dtype)
        k2 = _lecun_uniform(rng, (out_ch, out_ch, 3, 3, 3), out_ch * 27, dtype)
        self.kernel1 = Parameter(k1, f"{prefix}.conv1.kernel")
        self.bias1 = Parameter(np.zeros(out_ch, dtype), f"{prefix}.conv1.bias")
        self.gamma1 = Parameter(np.ones(out_ch, dtype), f"{prefix}.bn1.gamma")
        self.beta1 = Parameter(np.zeros(out_ch, dtype), f"{prefix}.bn1.beta")
        self.kernel2 = Parameter(k2, f"{prefix}.conv2.kernel")
        self.bias2 = Parameter(np.zeros(out_ch, dtype), f"{prefix}.conv2.bias")
        self.gamma2 = Parameter(np.ones(out_ch, dtype), f"{prefix}.bn2.gamma")
        self.beta2 = Parameter(np.zeros(out_ch, dtype), f"{prefix}.bn2.beta")
        self.state1 = BatchNormState.identity(out_ch, dtype)
        self.state2 = BatchNormState.identity(out_ch, dtype)

    def parameters(self) -> list:
        return [self.kernel1, self.bias1, self.gamma1, self.beta1,
                self.kernel2, self.bias2, self.gamma2, self.beta2]

    def states(self) -> list:
        return [(f"{self.prefix}.bn1", self.state1), (f"{self.prefix}.bn2", self.state2)]

    def forward(self, bind, x: Tensor, mode: str) -> Tensor:
        h = conv3d(x, bind(self.kernel1), bind(self.bias1))
        h = relu(batchnorm(h, bind(self.gamma1), bind(self.beta1), self.state1, mode))
        h = conv3d(h, bind(self.kernel2), bind(self.bias2))
        return relu(batchnorm(h, bind(self.gamma2), bind(self.beta2), self.state2, mode))


class DeconvBlock:
    """Stride-2 up-convolution, skip concatenation, then a ConvBlock."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 dtype, prefix: str):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.prefix = prefix
        # each output voxel of a stride-2 2x2x2 upconv sees one tap per
        # input channel, so fan-in is in_ch
        ku = _lecun_uniform(rng, (in_ch, out_ch, 2, 2, 2), in_ch, dtype)
        self.up_kernel = Parameter(ku, f"{prefix}.up.kernel")
        self.up_bias = Parameter(np.zeros(out_ch, dtype), f"{prefix}.up.bias")
        self.conv = ConvBlock(2 * out_ch, out_ch, rng, dtype, f"{prefix}.fuse")

    def parameters(self) -> list:
        return [self.up_kernel, self.up_bias] + self.conv.parameters()

    def states(self) -> list:
        return self.conv.states()

    def forward(self, bind, x: Tensor, skip: Tensor, mode: str) -> Tensor:
        up = upconv3d(x, bind(self.up_kernel), bind(self.up_bias))
        return self.conv.forward(bind, concat_channel(skip, up), mode)


class MultiTaskNet:
    """Shared encoder (depth conv blocks, 2x2x2 max-pool between them), one
    decoder of depth-1 deconv blocks per task, one 1x1x1 head per task."""

    def __init__(self, depth: int, base_channels: int, tasks, seed: int,
                 channel_cap: int = CHANNEL_CAP, in_channels: int = 1,
                 dtype=np.float32):
        if depth < 2:
            raise ConfigError(f"depth must be >= 2, got {depth}")
        if base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {base_channels}")
        tasks = list(tasks)
        if not (1 <= len(tasks) <= 4):
            raise ConfigError(f"need 1..4 tasks, got {len(tasks)}")
        if len({t.name for t in tasks}) != len(tasks):
            raise ConfigError("task names must be unique")
        self.depth = depth
        self.base_channels = base_channels
        self.channel_cap = channel_cap
        self.in_channels = in_channels
        self.tasks = tasks
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        self.channels = [min(base_channels * (2 ** level), channel_cap)
                         for level in range(depth)]

        rng = np.random.default_rng(seed)
        self.encoder = []
        prev = in_channels
        for level, ch in enumerate(self.channels):
            self.encoder.append(ConvBlock(prev, ch, rng, self.dtype, f"enc{level}"))
            prev = ch
        self.decoders = {}
        self.heads = {}
        for t in tasks:
            blocks = []
            for level in reversed(range(depth - 1)):
                blocks.append(DeconvBlock(self.channels[level + 1], self.channels[level],
                                          rng, self.dtype, f"{t.name}.dec{level}"))
            self.decoders[t.name] = blocks
            kh = _lecun_uniform(rng, (t.num_classes, self.channels[0], 1, 1, 1),
                                self.channels[0], self.dtype)
            self.heads[t.name] = (Parameter(kh, f"{t.name}.head.kernel"),
                                  Parameter(np.zeros(t.num_classes, self.dtype),
                                            f"{t.name}.head.bias"))

    # -- parameter bookkeeping ------------------------------------------------

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(f"unknown task {name!r}; have {[t.name for t in self.tasks]}")

    def encoder_parameters(self) -> list:
        return [p for blk in self.encoder for p in blk.parameters()]

    def task_parameters(self, name: str) -> list:
        self.task(name)
        params = [p for blk in self.decoders[name] for p in blk.parameters()]
        params.extend(self.heads[name])
        return params

    def parameters(self) -> list:
        params = self.encoder_parameters()
        for t in self.tasks:
            params.extend(self.task_parameters(t.name))
        return params

    def named_states(self) -> list:
        states = [s for blk in self.encoder for s in blk.states()]
        for t in self.tasks:
            for blk in self.decoders[t.name]:
                states.extend(blk.states())
        return states

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    # -- forward --------------------------------------------------------------

    def _bind(self, graph: Graph | None):
        if graph is None:
            return lambda p: Tensor(p.data)
        return graph.param

    def encode(self, graph: Graph | None, x: Tensor, mode: str):
        """Run the shared encoder; returns (bottom features, per-level skips)."""
        bind = self._bind(graph)
        skips = []
        h = x
        for level, blk in enumerate(self.encoder):
            h = blk.forward(bind, h, mode)
            if level < self.depth - 1:
                skips.append(h)
                h = maxpool3d(h)
        return h, skips

    def forward(self, graph: Graph | None, x, task: str, mode: str = EVAL) -> Tensor:
        """Full forward for one task; logits at input resolution."""
        spec = self.task(task)
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 5:
            raise ShapeError(f"forward: expected rank-5 input, got {x.data.shape}")
        if x.data.shape[1] != self.in_channels:
            raise ShapeError(
                f"forward: expected {self.in_channels} input channels, got {x.data.shape[1]}")
        divisor = 2 ** self.depth
        for axis, extent in zip("zyx", x.data.shape[2:]):
            if extent % divisor:
                raise ShapeError(
                    f"forward: {axis} extent {extent} not divisible by 2^depth = {divisor}")
        if mode not in (TRAIN, EVAL):
            raise ConfigError(f"forward: mode must be '{TRAIN}' or '{EVAL}', got {mode!r}")

        bind = self._bind(graph)
        h, skips = self.encode(graph, x, mode)
        for blk, skip in zip(self.decoders[task], reversed(skips)):
            h = blk.forward(bind, h, skip, mode)
        kh, bh = self.heads[task]
        return conv3d(h, bind(kh), bind(bh))


def build_multitask_net(depth: int, base_channels: int, tasks, seed: int,
                        channel_cap: int = CHANNEL_CAP, dtype=np.float32) -> MultiTaskNet:
    """Deterministically initialized network: same arguments, same bits."""
    return MultiTaskNet(depth, base_channels, tasks, seed,
                        channel_cap=channel_cap, dtype=dtype)


def forward_fitted(net: MultiTaskNet, graph: Graph | None, x, task: str,
                   mode: str = EVAL) -> Tensor:
    """Forward for crops whose extents need not divide 2^depth: zero-pad
    each spatial axis up to the next multiple, run the network, and trim
    the logits back, so callers always get logits at the input extents.
    The pad/trim pair is differentiable, so losses on the trimmed logits
    see only real voxels."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 5:
        raise ShapeError(f"forward_fitted: expected rank-5 input, got {x.data.shape}")
    divisor = 2 ** net.depth
    dims = x.data.shape[2:]
    pad = tuple((-d) % divisor for d in dims)
    if any(pad):
        x = pad_spatial(x, pad)
    logits = net.forward(graph, x, task, mode)
    if any(pad):
        logits = crop_spatial(logits, dims)
    return logits


def receptive_field(depth: int) -> int:
    """Edge length (in input voxels) seen by one deepest-level feature voxel
    of the encoder path: two 3x3x3 convs per level, 2x pooling between
    levels. Closed form 9 * 2^(depth-1) - 4; e.g. depth 1 -> 5, 2 -> 14."""
    if depth < 1:
        raise ConfigError(f"receptive_field: depth must be >= 1, got {depth}")
    return 9 * (1 << (depth - 1)) - 4


# ---------------------------------------------------------------------------
# checkpoint container: header + named little-endian float32 records


MAGIC = b"VSEGCKPT"
VERSION = 1


def _write_str(buf, s: str):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_str(buf) -> str:
    (n,) = struct.unpack("<I", buf.read(4))
    return buf.read(n).decode("utf-8")


def _write_record(buf, name: str, array: np.ndarray):
    _write_str(buf, name)
    buf.write(struct.pack("<I", array.ndim))
    buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
    buf.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_record(buf):
    name = _read_str(buf)
    (rank,) = struct.unpack("<I", buf.read(4))
    shape = struct.unpack(f"<{rank}I", buf.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape)
    return name, data


def _records_of(net: MultiTaskNet) -> list:
    records = [(p.name, p.data) for p in net.parameters()]
    for prefix, state in net.named_states():
        records.append((f"{prefix}.running_mean", state.mean))
        records.append((f"{prefix}.running_var", state.var))
    return records


def save_checkpoint(net: MultiTaskNet, path) -> None:
    """Serialize parameters and batch-norm running statistics as 32-bit
    little-endian floats inside a versioned binary container."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, net.depth))
    buf.write(struct.pack("<I", len(net.channels)))
    buf.write(struct.pack(f"<{len(net.channels)}I", *net.channels))
    buf.write(struct.pack("<I", net.in_channels))
    buf.write(struct.pack("<I", len(net.tasks)))
    for t in net.tasks:
        _write_str(buf, t.name)
        buf.write(struct.pack("<I", t.num_classes))
        buf.write(struct.pack("<I", len(t.class_names)))
        for cn in t.class_names:
            _write_str(buf, cn)
    records = _records_of(net)
    buf.write(struct.pack("<I", len(records)))
    for name, array in records:
        _write_record(buf, name, array)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> MultiTaskNet:
    """Rebuild a network from a checkpoint; bit-exact inverse of save for
    float32 networks."""
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if buf.read(8) != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file (bad magic)")
    version, depth = struct.unpack("<II", buf.read(8))
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    (n_levels,) = struct.unpack("<I", buf.read(4))
    channels = list(struct.unpack(f"<{n_levels}I", buf.read(4 * n_levels)))
    (in_channels,) = struct.unpack("<I", buf.read(4))
    (n_tasks,) = struct.unpack("<I", buf.read(4))
    tasks = []
    for _ in range(n_tasks):
        name = _read_str(buf)
        (num_classes,) = struct.unpack("<I", buf.read(4))
        (n_names,) = struct.unpack("<I", buf.read(4))
        class_names = tuple(_read_str(buf) for _ in range(n_names))
        tasks.append(TaskSpec(name, num_classes, class_names))

    net = MultiTaskNet(depth, channels[0], tasks, seed=0,
                       channel_cap=max(channels), in_channels=in_channels,
                       dtype=np.float32)
    if net.channels != channels:
        raise IntegrityError(
            f"{path}: channel schedule {channels} does not match a "
            f"base/cap reconstruction {net.channels}")

    (n_records,) = struct.unpack("<I", buf.read(4))
    stored = {}
    for _ in range(n_records):
        name, data = _read_record(buf)
        if name in stored:
            raise IntegrityError(f"{path}: duplicate record {name!r}")
        stored[name] = data
    expected = _records_of(net)
    if len(stored) != len(expected):
        raise IntegrityError(
            f"{path}: {len(stored)} records, expected {len(expected)}")
    for name, target in expected:
        if name not in stored:
            raise IntegrityError(f"{path}: missing record {name!r}")
        data = stored[name]
        if data.shape != target.shape:
            raise IntegrityError(
                f"{path}: record {name!r} shaped {data.shape}, expected {target.shape}")
        target[...] = data
    return net
