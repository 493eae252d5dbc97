"""Capacitance regressors: 1-D residual CNN and MLP variants.

Three model kinds share this module:

* ``cnncap``  -- 1-D ResNet-34-style regressor over (3, L) density features.
* ``mlpcap``  -- MLP over the 9 Pattern-B geometry parameters, vector output
  (total + 4 couplings).
* ``gridmlp`` -- same MLP architecture over the flattened (3*L,) density
  features, scalar output.

Weights persist as a text manifest plus a raw little-endian float32 blob.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn


class ModelIOError(RuntimeError):
    pass


@dataclass(frozen=True)
class CnnCapConfig:
    input_channels: int = 3
    input_length: int = 1024
    block_counts: tuple[int, ...] = (3, 4, 6, 3)
    channels: tuple[int, ...] = (64, 128, 256, 512)

    def __post_init__(self):
        if len(self.block_counts) != len(self.channels):
            raise ValueError("block_counts and channels must have equal length")
        for lo, hi in zip(self.channels, self.channels[1:]):
            if hi != 2 * lo:
                raise ValueError("channel count must double at each length halving")


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    output_dim: int = 1
    hidden: tuple[int, ...] = (256, 256, 512)


@dataclass
class ModelBundle:
    kind: str                       # "cnncap" | "mlpcap" | "gridmlp"
    config: dict
    state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    metadata: dict = field(default_factory=dict)


class _ResidualBlock(nn.Module):
    """conv-BN-ReLU-conv-BN, add shortcut, final ReLU (classic v1 ordering)."""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv1d(in_channels, out_channels, 3, stride=stride,
                               padding=1, bias=False)
        self.bn1 = nn.BatchNorm1d(out_channels)
        self.conv2 = nn.Conv1d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm1d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv1d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm1d(out_channels))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class CnnCap(nn.Module):
    """Stem conv (kernel 3, no downsampling), four residual stages with the
    length halved and channels doubled at the entry of stages 2-4, global
    average pooling, and a scalar head.  L=1024 reaches the pool at length
    128 with 512 channels."""

    def __init__(self, config: CnnCapConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        self.stem = nn.Sequential(
            nn.Conv1d(config.input_channels, ch[0], 3, padding=1, bias=False),
            nn.BatchNorm1d(ch[0]),
            nn.ReLU(),
        )
        stages = []
        in_ch = ch[0]
        for stage, (count, out_ch) in enumerate(zip(config.block_counts, ch)):
            blocks = []
            for b in range(count):
                stride = 2 if (stage > 0 and b == 0) else 1
                blocks.append(_ResidualBlock(in_ch, out_ch, stride))
                in_ch = out_ch
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool1d(1)
        self.fc = nn.Linear(ch[-1], 1)

    def forward(self, x):
        if x.shape[-1] != self.config.input_length:
            raise ValueError(
                f"input length {x.shape[-1]} != configured {self.config.input_length}")
        out = self.stages(self.stem(x))
        out = self.pool(out).squeeze(-1)
        return self.fc(out).squeeze(-1)


class Mlp(nn.Module):
    """Fully-connected Tanh network per MlpConfig."""

    def __init__(self, config: MlpConfig):
        super().__init__()
        self.config = config
        dims = [config.input_dim, *config.hidden]
        layers = []
        for a, b in zip(dims, dims[1:]):
            layers += [nn.Linear(a, b), nn.Tanh()]
        layers.append(nn.Linear(dims[-1], config.output_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        out = self.net(x)
        return out.squeeze(-1) if self.config.output_dim == 1 else out


def _init_weights(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm1d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_cnncap(config: CnnCapConfig, seed: int = 0) -> CnnCap:
    torch.manual_seed(seed)
    model = CnnCap(config)
    _init_weights(model)
    return model


def build_mlp(config: MlpConfig, seed: int = 0) -> Mlp:
    torch.manual_seed(seed)
    model = Mlp(config)
    _init_weights(model)
    return model


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def fold_batchnorm(model: nn.Module) -> nn.Module:
    """Inference-only copy with batch-norm layers folded into the preceding
    convolutions.  Equivalent in eval mode up to float32 rounding; useful
    for latency benchmarking and deployment-style prediction."""
    import copy

    from torch.nn.utils.fusion import fuse_conv_bn_eval

    folded = copy.deepcopy(model)
    folded.eval()
    for module in folded.modules():
        if isinstance(module, _ResidualBlock):
            module.conv1 = fuse_conv_bn_eval(module.conv1, module.bn1)
            module.bn1 = nn.Identity()
            module.conv2 = fuse_conv_bn_eval(module.conv2, module.bn2)
            module.bn2 = nn.Identity()
            if isinstance(module.shortcut, nn.Sequential):
                module.shortcut = nn.Sequential(
                    fuse_conv_bn_eval(module.shortcut[0], module.shortcut[1]))
    if isinstance(model, CnnCap):
        folded.stem = nn.Sequential(
            fuse_conv_bn_eval(folded.stem[0], folded.stem[1]), folded.stem[2])
    return folded


def _as_batch(batch) -> torch.Tensor:
    """Accept a tensor, ndarray, or list of FeatureVector / ndarray."""
    if isinstance(batch, torch.Tensor):
        return batch
    if isinstance(batch, np.ndarray):
        return torch.as_tensor(batch, dtype=torch.float32)
    rows = [b.values if hasattr(b, "values") else np.asarray(b) for b in batch]
    return torch.as_tensor(np.stack(rows), dtype=torch.float32)


def forward(model: nn.Module, batch, training: bool = False) -> torch.Tensor:
    """Run a batch through the model.

    Inference mode (default) uses running batch-norm statistics and no
    autograd graph, so a sample's prediction is batch-size invariant.
    Training mode records the forward pass for `backward`.
    """
    x = _as_batch(batch)
    if training:
        model.train()
        preds = model(x)
        model._recorded_forward = preds  # consumed by backward()
        return preds
    model.eval()
    with torch.no_grad():
        return model(x)


def backward(model: nn.Module, targets, loss_kind: str = "mse") -> dict[str, np.ndarray]:
    """Gradients of the recorded forward pass's loss w.r.t. every parameter."""
    preds = getattr(model, "_recorded_forward", None)
    if preds is None:
        raise RuntimeError("backward called without a recorded training forward pass")
    model._recorded_forward = None
    from .trainer import loss_fn
    y = torch.as_tensor(np.asarray(targets), dtype=preds.dtype)
    loss = loss_fn(loss_kind)(preds, y)
    model.zero_grad(set_to_none=True)
    loss.backward()
    return {name: p.grad.detach().numpy().copy()
            for name, p in model.named_parameters()}


# --- persistence --------------------------------------------------------
# <path>       text manifest: header, metadata, config, tensor index
# <path>.blob  raw little-endian float32 tensor data

_PERSISTED_DTYPE = "<f4"


def _persistable_state(model: nn.Module) -> dict[str, torch.Tensor]:
    # num_batches_tracked is an int64 step counter irrelevant to inference;
    # everything else (weights + BN running stats) is float32.
    return {name: t for name, t in model.state_dict().items()
            if not name.endswith("num_batches_tracked")}


def bundle_from_model(model: nn.Module, kind: str, metadata: dict | None = None) -> ModelBundle:
    if isinstance(model, CnnCap):
        config = asdict(model.config)
    else:
        config = asdict(model.config)
    state = {name: t.detach().numpy().astype(np.float32)
             for name, t in _persistable_state(model).items()}
    return ModelBundle(kind=kind, config=config, state=state,
                       metadata=dict(metadata or {}))


def model_from_bundle(bundle: ModelBundle) -> nn.Module:
    if bundle.kind == "cnncap":
        cfg = dict(bundle.config)
        cfg["block_counts"] = tuple(cfg["block_counts"])
        cfg["channels"] = tuple(cfg["channels"])
        model = CnnCap(CnnCapConfig(**cfg))
    elif bundle.kind in ("mlpcap", "gridmlp"):
        cfg = dict(bundle.config)
        cfg["hidden"] = tuple(cfg["hidden"])
        model = Mlp(MlpConfig(**cfg))
    else:
        raise ModelIOError(f"unknown model kind '{bundle.kind}'")
    state = {name: torch.as_tensor(arr) for name, arr in bundle.state.items()}
    missing = model.load_state_dict(state, strict=False)
    unexpected = [k for k in missing.missing_keys
                  if not k.endswith("num_batches_tracked")]
    if unexpected or missing.unexpected_keys:
        raise ModelIOError(
            f"weight/config mismatch: missing {unexpected}, "
            f"unexpected {missing.unexpected_keys}")
    return model


def save_weights(model_or_bundle, path: str | Path, kind: str | None = None,
                 metadata: dict | None = None) -> None:
    if isinstance(model_or_bundle, ModelBundle):
        bundle = model_or_bundle
    else:
        if kind is None:
            kind = "cnncap" if isinstance(model_or_bundle, CnnCap) else "mlpcap"
        bundle = bundle_from_model(model_or_bundle, kind, metadata)

    blob = bytearray()
    index = []
    for name, arr in bundle.state.items():
        data = np.ascontiguousarray(arr, dtype=_PERSISTED_DTYPE).tobytes()
        index.append((name, arr.shape, len(blob)))
        blob += data
    digest = hashlib.sha256(bytes(blob)).hexdigest()

    lines = ["cnncap-weights v1",
             f"kind {bundle.kind}",
             f"blob {Path(path).name}.blob {len(blob)} sha256 {digest}",
             f"meta {json.dumps(bundle.metadata, sort_keys=True)}",
             f"config {json.dumps(bundle.config, sort_keys=True)}"]
    for name, shape, offset in index:
        shape_s = ",".join(str(d) for d in shape) or "scalar"
        lines.append(f"tensor {name} {shape_s} f4 {offset}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    Path(str(path) + ".blob").write_bytes(bytes(blob))


def load_weights(path: str | Path) -> ModelBundle:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ModelIOError(f"cannot read manifest {path}: {exc}") from exc
    if not lines or lines[0] != "cnncap-weights v1":
        raise ModelIOError(f"{path}: not a weight manifest")
    kind = None
    metadata = {}
    config = {}
    blob_len = None
    digest = None
    tensors = []
    for line in lines[1:]:
        op, _, rest = line.partition(" ")
        if op == "kind":
            kind = rest
        elif op == "blob":
            _, length, _, digest = rest.split(" ")
            blob_len = int(length)
        elif op == "meta":
            metadata = json.loads(rest)
        elif op == "config":
            config = json.loads(rest)
        elif op == "tensor":
            name, shape_s, dtype, offset = rest.rsplit(" ", 3)
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split(","))
            tensors.append((name, shape, int(offset)))
        else:
            raise ModelIOError(f"{path}: unknown manifest line '{op}'")
    if kind is None or blob_len is None:
        raise ModelIOError(f"{path}: manifest missing kind/blob header")

    blob = Path(str(path) + ".blob").read_bytes()
    if len(blob) != blob_len:
        raise ModelIOError(
            f"{path}: blob truncated ({len(blob)} bytes, manifest says {blob_len})")
    if hashlib.sha256(blob).hexdigest() != digest:
        raise ModelIOError(f"{path}: blob checksum mismatch")

    state = {}
    for name, shape, offset in tensors:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise ModelIOError(f"{path}: tensor {name} extends past blob end")
        state[name] = np.frombuffer(blob, dtype=_PERSISTED_DTYPE, count=count,
                                    offset=offset).reshape(shape).copy()
    return ModelBundle(kind=kind, config=config, state=state, metadata=metadata)
