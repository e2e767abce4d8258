"""Small encoder-decoder segmentation network with a two-head (softmax + sigmoid) output."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"MEDCLCKP"
CHECKPOINT_VERSION = 1


class ModelSpecError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    input_size: int = 64
    width: int = 8
    depth: int = 3
    num_classes: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.depth <= 4:
            raise ModelSpecError(f"depth must be in [1, 4], got {self.depth}")
        if self.input_size % (2 ** self.depth):
            raise ModelSpecError(f"input size {self.input_size} is not divisible by 2**depth = {2 ** self.depth}")
        if self.num_classes < 2:
            raise ModelSpecError("the network needs num_classes >= 2")
        if self.width < 1:
            raise ModelSpecError("width must be positive")

    @property
    def out_channels(self) -> int:
        return 2 * self.num_classes


class _Block(nn.Sequential):
    def __init__(self, c_in: int, c_out: int):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c_out, c_out, 3, padding=1), nn.SiLU(),
        )


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (B, 2m, h, w): m+1 softmax logits then m-1 sigmoid logits
    probs: torch.Tensor  # (B, m+1, h, w) softmax head, background first
    combined: torch.Tensor  # (B, m-1, h, w) sigmoid head
    versions: tuple = ()

    @property
    def y_hat(self) -> torch.Tensor:
        """The (2m-1)-channel prediction: single classes 1..m then combined subsets."""
        return torch.cat([self.probs[:, 1:], self.combined], dim=1)


class SegNet(nn.Module):
    """UNet-style network. Average pooling, bilinear upsampling and SiLU keep it smooth in its parameters."""

    def __init__(self, spec: ModelSpec, dtype=torch.float32):
        super().__init__()
        self.spec = spec
        w, L = spec.width, spec.depth
        chans = [w * 2**l for l in range(L + 1)]
        self.down = nn.ModuleList([_Block(1 if l == 0 else chans[l - 1], chans[l]) for l in range(L)])
        self.bottom = _Block(chans[L - 1], chans[L])
        self.up = nn.ModuleList([_Block(chans[l + 1] + chans[l], chans[l]) for l in reversed(range(L))])
        self.head = nn.Conv2d(chans[0], spec.out_channels, 1)
        self.to(dtype)
        self.reset_parameters()

    @torch.no_grad()
    def reset_parameters(self) -> None:
        g = torch.Generator().manual_seed(self.spec.seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = math.prod(p.shape[1:])
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * math.sqrt(2.0 / fan_in))

    def raw(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.avg_pool2d(x, 2)
        x = self.bottom(x)
        for block, skip in zip(self.up, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)

    def forward(self, image) -> ForwardOutput:
        x = torch.as_tensor(image, dtype=self.head.weight.dtype)
        if x.dim() == 2:
            x = x[None, None]
        elif x.dim() == 3:
            x = x[:, None]
        s = self.spec.input_size
        if x.shape[-2:] != (s, s):
            raise ModelSpecError(f"expected {s}x{s} input, got {tuple(x.shape[-2:])}")
        logits = self.raw(x)
        m = self.spec.num_classes
        probs = torch.softmax(logits[:, : m + 1], dim=1)
        combined = torch.sigmoid(logits[:, m + 1:])
        return ForwardOutput(logits, probs, combined, self.param_versions())

    def param_versions(self) -> tuple:
        return tuple(p._version for p in self.parameters())

    # -- flat parameter view

    def layout(self) -> list[dict]:
        out, offset = [], 0
        for name, p in self.named_parameters():
            out.append({"name": name, "shape": list(p.shape), "offset": offset, "size": p.numel()})
            offset += p.numel()
        return out

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    @torch.no_grad()
    def load_flat_parameters(self, flat) -> None:
        flat = torch.as_tensor(flat)
        if flat.numel() != self.num_parameters():
            raise CheckpointError(f"flat vector has {flat.numel()} entries, model needs {self.num_parameters()}")
        for entry, p in zip(self.layout(), self.parameters()):
            chunk = flat[entry["offset"]: entry["offset"] + entry["size"]]
            p.copy_(chunk.reshape(p.shape).to(p.dtype))


def init(spec: ModelSpec, dtype=torch.float32) -> SegNet:
    return SegNet(spec, dtype)


def parameter_count(spec: ModelSpec) -> int:
    """Closed-form parameter count of :class:`SegNet` for ``spec``."""
    def conv3(a, b):
        return 9 * a * b + b

    w, L = spec.width, spec.depth
    ch = [w * 2**l for l in range(L + 1)]
    total = 0
    for l in range(L):
        total += conv3(1 if l == 0 else ch[l - 1], ch[l]) + conv3(ch[l], ch[l])
    total += conv3(ch[L - 1], ch[L]) + conv3(ch[L], ch[L])
    for l in range(L):
        total += conv3(ch[l + 1] + ch[l], ch[l]) + conv3(ch[l], ch[l])
    total += ch[0] * spec.out_channels + spec.out_channels
    return total


def backward(model: SegNet, out: ForwardOutput, grad_logits: torch.Tensor) -> torch.Tensor:
    """Flat parameter gradient of <grad_logits, logits> for a cached forward pass."""
    if out.versions != model.param_versions():
        raise StaleCacheError("parameters changed since this forward pass")
    params = list(model.parameters())
    grads = torch.autograd.grad(out.logits, params, grad_outputs=grad_logits, retain_graph=True, allow_unused=True)
    return torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)])


# ---------------------------------------------------------------- checkpoints
#
# layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
# then every array in header["arrays"] as contiguous little-endian float64.


def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict) -> None:
    entries, payload, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "size": int(a.size)})
        payload.append(a.tobytes())
        offset += a.size
    doc = {**header, "version": CHECKPOINT_VERSION, "arrays": entries}
    blob = json.dumps(doc, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for chunk in payload:
            f.write(chunk)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = np.frombuffer(data, dtype="<f8", offset=16 + hlen)
    arrays = {}
    for e in header["arrays"]:
        arrays[e["name"]] = payload[e["offset"]: e["offset"] + e["size"]].reshape(e["shape"]).copy()
    return arrays, header


def save_model(path, model: SegNet, extra: dict | None = None) -> None:
    save_checkpoint(path, {"model": model.flat_parameters().double().numpy()},
                    {"model_spec": asdict(model.spec), "layout": model.layout(), **(extra or {})})


def load_model(path, dtype=torch.float32) -> tuple[SegNet, dict]:
    arrays, header = load_checkpoint(path)
    model = SegNet(ModelSpec(**header["model_spec"]), dtype)
    model.load_flat_parameters(torch.from_numpy(arrays["model"]))
    return model, header
