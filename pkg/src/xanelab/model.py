"""
The XANE network and its checkpoint format.

Layout: two strided 1-D convolutions over time (GELU), sinusoidal positions, pre-norm transformer
encoder layers, temporal mean-pooling, an embedding layer with GELU, one regression head with a
row per task and one classification head per categorical task.

Checkpoint file layout (all integers little-endian)::

    b"XANECKPT" | uint32 header_length | header (UTF-8 JSON) | payload

The header holds ``schema_version``, the model config, optional ``extra`` metadata and a tensor
index of ``name``, ``shape``, ``offset`` (into the payload), ``nbytes`` and ``crc32``. The payload is
the concatenation of every tensor as little-endian float32 in row-major order.
"""

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import stream_id_for
from .errors import (
    AllTasksMaskedError,
    ChecksumMismatchError,
    ConfigError,
    CorruptFileError,
    ShapeMismatchError,
    VersionMismatchError,
)
from .features import CHUNK_FRAMES, N_MELS, FeatureChunk
from .logging import log_with_context
from .synth import CLASS_TASKS, REGRESSION_TASKS, ChunkLabel

EMBED_DIMS = (32, 64, 128, 256, 512)
# embed_dim -> (conv_channels = model_dim, ff_dim)
WIDTH_TABLE = {
    32: (192, 192),
    64: (192, 192),
    128: (256, 256),
    256: (512, 256),
    512: (1024, 512),
}
CLASS_HEADS = tuple(CLASS_TASKS)
ABLATIONS = {"nn": "noise", "nc": "codec", "no": "overlap"}
CONV_KERNEL = 3
CONV_STRIDE = 2
CHECKPOINT_MAGIC = b"XANECKPT"
CHECKPOINT_SCHEMA_VERSION = 1

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """
    Network widths and enabled heads.

    ``model_dim`` (equal to the conv channel count) and ``ff_dim`` default to the width table entry
    for ``embed_dim``; explicit values override it, which is how tiny test configs are built.
    The regression head is always present; ``heads`` lists the enabled classification heads.
    """

    embed_dim: int = 128
    encoder_layers: int = 2
    attn_heads: int = 8
    model_dim: int | None = None
    ff_dim: int | None = None
    n_mels: int = N_MELS
    chunk_frames: int = CHUNK_FRAMES
    heads: tuple[str, ...] = CLASS_HEADS

    def __post_init__(self):
        if self.embed_dim not in EMBED_DIMS:
            raise ConfigError(f"embed_dim must be one of {EMBED_DIMS}, got {self.embed_dim}")
        default_model_dim, default_ff_dim = WIDTH_TABLE[self.embed_dim]
        if self.model_dim is None:
            object.__setattr__(self, "model_dim", default_model_dim)
        if self.ff_dim is None:
            object.__setattr__(self, "ff_dim", default_ff_dim)
        for name in ("encoder_layers", "attn_heads", "model_dim", "ff_dim", "n_mels", "chunk_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.model_dim % self.attn_heads:
            raise ConfigError(f"model_dim {self.model_dim} must be divisible by attn_heads {self.attn_heads}")
        unknown = [h for h in self.heads if h not in CLASS_HEADS]
        if unknown:
            raise ConfigError(f"unknown heads {unknown}, expected a subset of {CLASS_HEADS}")
        object.__setattr__(self, "heads", tuple(h for h in CLASS_HEADS if h in self.heads))

    @property
    def conv_channels(self) -> int:
        return self.model_dim

    @classmethod
    def with_ablation(cls, embed_dim: int, ablate: list[str] | tuple[str, ...] = (), **overrides) -> "ModelConfig":
        """Config with the heads named by ablation codes (``nn``, ``nc``, ``no``) removed."""
        bad = [code for code in ablate if code not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation codes {bad}, expected a subset of {sorted(ABLATIONS)}")
        removed = {ABLATIONS[code] for code in ablate}
        return cls(embed_dim=embed_dim, heads=tuple(h for h in CLASS_HEADS if h not in removed), **overrides)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["heads"] = list(self.heads)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["heads"] = tuple(data.get("heads", CLASS_HEADS))
        return cls(**data)


class ModelOutput(NamedTuple):
    embedding: torch.Tensor  # (batch, embed_dim), after the embedding GELU
    regression: torch.Tensor  # (batch, 11), normalized target space
    class_logits: dict[str, torch.Tensor]  # task -> (batch, n_classes)

    def select(self, index: int) -> "ModelOutput":
        return ModelOutput(
            self.embedding[index],
            self.regression[index],
            {name: logits[index] for name, logits in self.class_logits.items()},
        )


def sinusoidal_positions(n_positions: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    position = torch.arange(n_positions, dtype=torch.float64)[:, None]
    rate = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(n_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * rate)
    table[:, 1::2] = torch.cos(position * rate)[:, : dim // 2]
    return table.to(dtype)


def _head_seed(seed: int, name: str) -> int:
    return (int(seed) * 1_000_003 + stream_id_for(f"head/{name}")) % (2**63)


class XaneModel(nn.Module):
    """
    Trunk and heads. Trunk weights depend only on ``seed``; every classification head is
    initialized from its own stream so enabling or disabling a head leaves the trunk unchanged.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        D, E = config.model_dim, config.embed_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.conv1 = nn.Conv1d(config.n_mels, D, CONV_KERNEL, stride=CONV_STRIDE, padding=CONV_KERNEL // 2)
            self.conv2 = nn.Conv1d(D, D, CONV_KERNEL, stride=CONV_STRIDE, padding=CONV_KERNEL // 2)
            self.encoder = nn.ModuleList(
                nn.TransformerEncoderLayer(
                    D,
                    config.attn_heads,
                    config.ff_dim,
                    dropout=0.0,
                    activation="gelu",
                    batch_first=True,
                    norm_first=True,
                )
                for _ in range(config.encoder_layers)
            )
            self.norm = nn.LayerNorm(D)
            self.embed = nn.Linear(D, E)
            self.regression = nn.Linear(E, len(REGRESSION_TASKS))
        self.class_heads = nn.ModuleDict()
        for name in config.heads:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(_head_seed(seed, name))
                self.class_heads[name] = nn.Linear(E, len(CLASS_TASKS[name]))
        self.register_buffer("target_mean", torch.zeros(len(REGRESSION_TASKS)))
        self.register_buffer("target_std", torch.ones(len(REGRESSION_TASKS)))

    def forward(self, features: torch.Tensor) -> ModelOutput:
        """
        Args:
            features: (batch, chunk_frames, n_mels) log-mel chunks

        Raises:
            ShapeMismatchError: Input shape does not match the config
        """
        expected = (self.config.chunk_frames, self.config.n_mels)
        if features.ndim != 3 or tuple(features.shape[1:]) != expected:
            raise ShapeMismatchError(
                f"expected input (batch, {expected[0]}, {expected[1]}), got {tuple(features.shape)}"
            )
        x = F.gelu(self.conv1(features.transpose(1, 2)))
        x = F.gelu(self.conv2(x)).transpose(1, 2)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype).to(x.device)
        for layer in self.encoder:
            x = layer(x)
        pooled = self.norm(x).mean(dim=1)
        embedding = F.gelu(self.embed(pooled))
        return ModelOutput(
            embedding=embedding,
            regression=self.regression(embedding),
            class_logits={name: head(embedding) for name, head in self.class_heads.items()},
        )

    def set_target_norm(self, mean, std) -> None:
        mean = torch.as_tensor(np.asarray(mean, dtype=np.float64), dtype=self.target_mean.dtype)
        std = torch.as_tensor(np.asarray(std, dtype=np.float64), dtype=self.target_std.dtype)
        if mean.shape != self.target_mean.shape or std.shape != self.target_std.shape:
            raise ShapeMismatchError(f"target_norm needs {len(REGRESSION_TASKS)} means and stds")
        if not (torch.all(torch.isfinite(mean)) and torch.all(torch.isfinite(std)) and torch.all(std > 0)):
            raise ConfigError("target_norm must be finite with std > 0")
        self.target_mean.copy_(mean)
        self.target_std.copy_(std)

    def normalize(self, values: torch.Tensor) -> torch.Tensor:
        return (values - self.target_mean) / self.target_std

    def denormalize(self, values: torch.Tensor) -> torch.Tensor:
        return values * self.target_std + self.target_mean


def forward(model: XaneModel, chunk: FeatureChunk) -> ModelOutput:
    """Single-chunk inference (no gradients)."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        output = model(torch.as_tensor(chunk.matrix, dtype=dtype)[None])
    return output.select(0)


def predict(model: XaneModel, features: np.ndarray, batch_size: int = 256) -> ModelOutput:
    """Batched inference over a (n, frames, mels) array."""
    dtype = next(model.parameters()).dtype
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(features), batch_size):
            outputs.append(model(torch.as_tensor(features[start : start + batch_size], dtype=dtype)))
    return ModelOutput(
        embedding=torch.cat([o.embedding for o in outputs]),
        regression=torch.cat([o.regression for o in outputs]),
        class_logits={name: torch.cat([o.class_logits[name] for o in outputs]) for name in model.config.heads},
    )


@dataclass
class LossTargets:
    """Batch targets with per-sample, per-task masks. Regression targets are in normalized space."""

    regression: torch.Tensor  # (batch, 11)
    regression_mask: torch.Tensor  # (batch, 11) bool
    classes: dict[str, torch.Tensor] = field(default_factory=dict)  # task -> (batch,) int64
    class_mask: dict[str, torch.Tensor] = field(default_factory=dict)  # task -> (batch,) bool

    @classmethod
    def from_labels(
        cls,
        labels: list[ChunkLabel],
        model: XaneModel,
        task_mask: dict[str, bool] | None = None,
    ) -> "LossTargets":
        """
        Targets for ``labels``. Missing label values are masked per sample; ``task_mask`` maps a task
        name to False to mask it for the whole batch.
        """
        task_mask = task_mask or {}
        raw = np.array(
            [[np.nan if v is None else v for v in label.regression_values()] for label in labels], dtype=np.float64
        )
        present = ~np.isnan(raw)
        for j, name in enumerate(REGRESSION_TASKS):
            if not task_mask.get(name, True):
                present[:, j] = False
        dtype = model.target_mean.dtype
        regression = model.normalize(torch.as_tensor(np.nan_to_num(raw), dtype=dtype))
        classes, class_mask = {}, {}
        for name in CLASS_HEADS:
            classes[name] = torch.tensor([label.class_index(name) for label in labels], dtype=torch.long)
            class_mask[name] = torch.full((len(labels),), bool(task_mask.get(name, True)))
        return cls(regression, torch.as_tensor(present), classes, class_mask)


class LossResult(NamedTuple):
    total: torch.Tensor
    components: dict[str, torch.Tensor]


def loss(output: ModelOutput, targets: LossTargets) -> LossResult:
    """
    Unit-weight multi-task loss.

    Each task contributes its mean over unmasked samples (MSE for regression, cross-entropy for
    classification); ``total`` is the mean over tasks with at least one unmasked sample. Tasks
    whose head is absent from ``output`` are skipped.

    Raises:
        AllTasksMaskedError: No task has an unmasked sample
    """
    components: dict[str, torch.Tensor] = {}
    for j, name in enumerate(REGRESSION_TASKS):
        mask = targets.regression_mask[:, j]
        if mask.any():
            diff = output.regression[mask, j] - targets.regression[mask, j]
            components[name] = torch.mean(diff**2)
    for name, logits in output.class_logits.items():
        mask = targets.class_mask.get(name)
        if mask is not None and mask.any():
            components[name] = F.cross_entropy(logits[mask], targets.classes[name][mask])
    if not components:
        raise AllTasksMaskedError("every task is masked for this batch")
    total = torch.stack(list(components.values())).mean()
    return LossResult(total, components)


def backward(model: XaneModel, features: torch.Tensor, targets: LossTargets) -> dict[str, torch.Tensor]:
    """
    Gradient of the loss with respect to every parameter tensor.

    Parameters outside the loss graph (masked heads) get zero gradients; parameters of disabled
    heads do not exist and are absent.
    """
    model.zero_grad(set_to_none=True)
    result = loss(model(features), targets)
    result.total.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


def count_params(config: ModelConfig) -> int:
    """Number of scalar parameters, from config arithmetic alone."""
    M, D, Fd, E = config.n_mels, config.model_dim, config.ff_dim, config.embed_dim
    conv = (CONV_KERNEL * M * D + D) + (CONV_KERNEL * D * D + D)
    # self-attention 4D^2 + 4D, feed-forward 2DF + F + D, two layer norms 4D
    encoder_layer = 4 * D * D + 2 * D * Fd + 9 * D + Fd
    final_norm = 2 * D
    embed = D * E + E
    regression = (E + 1) * len(REGRESSION_TASKS)
    heads = sum((E + 1) * len(CLASS_TASKS[name]) for name in config.heads)
    return conv + config.encoder_layers * encoder_layer + final_norm + embed + regression + heads


def read_checkpoint_header(path: str | Path) -> dict:
    header, _ = _read_checkpoint(Path(path), payload=False)
    return header


def _read_checkpoint(path: Path, payload: bool = True) -> tuple[dict, bytes]:
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CorruptFileError(f"{path} is not a checkpoint (bad magic)")
    start = len(CHECKPOINT_MAGIC) + 4
    if len(data) < start:
        raise ChecksumMismatchError(f"{path}: truncated before header length")
    (header_length,) = struct.unpack("<I", data[len(CHECKPOINT_MAGIC) : start])
    if len(data) < start + header_length:
        raise ChecksumMismatchError(f"{path}: truncated inside header")
    try:
        header = json.loads(data[start : start + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ChecksumMismatchError(f"{path}: header is not valid JSON: {e}") from e
    version = header.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise VersionMismatchError(
            f"{path}: checkpoint schema_version {version} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})"
        )
    return header, data[start + header_length :] if payload else b""


def save_checkpoint(model: XaneModel, path: str | Path, extra: dict | None = None) -> None:
    """Write ``model`` (parameters and target normalization) as float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        blob = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes(order="C")
        index.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(blob),
                "crc32": zlib.crc32(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": model.config.to_dict(),
        "extra": extra or {},
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    log_with_context(
        logger, "debug", "Checkpoint written", {"path": str(path), "tensors": len(index), "payload_bytes": offset}
    )


def load_checkpoint(path: str | Path) -> tuple[XaneModel, ModelConfig]:
    """
    Raises:
        VersionMismatchError: Unsupported schema_version
        ChecksumMismatchError: Truncated file or a tensor whose CRC32 does not match
    """
    path = Path(path)
    header, payload = _read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    model = XaneModel(config)
    state = {}
    for item in header["tensors"]:
        blob = payload[item["offset"] : item["offset"] + item["nbytes"]]
        if len(blob) != item["nbytes"] or zlib.crc32(blob) != item["crc32"]:
            raise ChecksumMismatchError(f"{path}: tensor {item['name']} fails its CRC32 check")
        array = np.frombuffer(blob, dtype="<f4").reshape(item["shape"])
        state[item["name"]] = torch.from_numpy(array.astype(np.float32))
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, config
