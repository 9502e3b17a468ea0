"""U-Net bundle with an explicit split into shared trunk and per-task heads.

The trunk (encoder + decoder) is the shared parameter block that carries
knowledge between tasks; every task, including segmentation, owns a small head.
Dense heads read the full-resolution decoder output; vector and class heads
read globally pooled bottleneck features. Parameter init is driven by explicit
per-component generators so a trunk initialized from a seed is bit-identical no
matter which heads are attached alongside it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .seeding import derive_seed

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    """Reduced ResNet-18-style encoder + U-Net decoder descriptor.

    Stage i has width base_width * 2**i; stage 0 keeps full resolution and each
    later stage halves it, so the total stride is 2**(len(stage_blocks)-1).
    The decoder mirrors the encoder stages through skip connections.
    """

    base_width: int = 16
    stage_blocks: tuple[int, ...] = (1, 1, 1, 1)
    input_channels: int = 1
    norm_groups: int = 8

    def __post_init__(self) -> None:
        if self.base_width < 1 or self.input_channels < 1:
            raise ValueError("base_width and input_channels must be positive")
        if len(self.stage_blocks) < 2 or any(b < 1 for b in self.stage_blocks):
            raise ValueError(f"stage_blocks must be >=2 stages of >=1 blocks, got {self.stage_blocks}")
        object.__setattr__(self, "stage_blocks", tuple(self.stage_blocks))

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * (2 ** i) for i in range(len(self.stage_blocks)))

    @property
    def total_stride(self) -> int:
        return 2 ** (len(self.stage_blocks) - 1)


ARCH_PRESETS = {
    "desk": ArchConfig(base_width=16, stage_blocks=(1, 1, 1, 1)),
    "paper": ArchConfig(base_width=64, stage_blocks=(2, 2, 2, 2)),
}


def _group_norm(channels: int, groups: int) -> nn.GroupNorm:
    if channels >= groups and channels % groups == 0:
        return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = _group_norm(cout, groups)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = _group_norm(cout, groups)
        self.act = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, stride, bias=False)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(y + self.skip(x))


class Encoder(nn.Module):
    """Stem + residual stages; forward returns the per-stage feature list."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        w = arch.base_width
        self.stem = nn.Sequential(
            nn.Conv2d(arch.input_channels, w, 3, 1, 1, bias=False),
            _group_norm(w, arch.norm_groups),
            nn.ReLU(inplace=True),
        )
        stages = []
        cin = w
        for i, blocks in enumerate(arch.stage_blocks):
            cout = arch.widths[i]
            mods = [ResidualBlock(cin, cout, arch.norm_groups, stride=1 if i == 0 else 2)]
            mods += [ResidualBlock(cout, cout, arch.norm_groups) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*mods))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class Decoder(nn.Module):
    """Upsample + skip-concat path back to full resolution, base_width channels."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        widths = arch.widths
        ups = []
        for i in range(len(widths) - 1, 0, -1):
            ups.append(nn.Sequential(
                nn.Conv2d(widths[i] + widths[i - 1], widths[i - 1], 3, 1, 1, bias=False),
                _group_norm(widths[i - 1], arch.norm_groups),
                nn.ReLU(inplace=True),
            ))
        self.ups = nn.ModuleList(ups)

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        y = features[-1]
        for j, up in enumerate(self.ups):
            skip = features[-2 - j]
            y = nn.functional.interpolate(y, size=skip.shape[2:], mode="bilinear", align_corners=False)
            y = up(torch.cat([y, skip], dim=1))
        return y


class Trunk(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.encoder = Encoder(arch)
        self.decoder = Decoder(arch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


class DenseHead(nn.Module):
    """1x1 projection on decoder output (linear; sigmoid applied by callers).

    bias_prior, when set, pins the initial output logit so sigmoid outputs
    start near the expected foreground prior instead of 0.5; without it the
    Dice loss spends most of a short budget draining background probability.
    """

    def __init__(self, arch: ArchConfig, bias_prior: float | None = None):
        super().__init__()
        self.proj = nn.Conv2d(arch.base_width, 1, 1)
        self.bias_prior = bias_prior

    def forward(self, dense: torch.Tensor) -> torch.Tensor:
        return self.proj(dense)


class PatchClassHead(nn.Module):
    def __init__(self, arch: ArchConfig, num_patches: int, num_classes: int):
        super().__init__()
        self.num_patches = num_patches
        self.fc = nn.Linear(arch.widths[-1] * num_patches, num_classes)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        b, p, c = embeddings.shape
        if p != self.num_patches:
            raise ValueError(f"expected {self.num_patches} patches, got {p}")
        return self.fc(embeddings.reshape(b, p * c))


def _mlp(cin: int, hidden: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(cin, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, cout))


class ProjectionPredictionHead(nn.Module):
    def __init__(self, arch: ArchConfig, dim: int, hidden: int):
        super().__init__()
        self.proj = _mlp(arch.widths[-1], hidden, dim)
        self.pred = _mlp(dim, hidden, dim)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.pred(self.proj(pooled))


class ExpanderHead(nn.Module):
    def __init__(self, arch: ArchConfig, dim: int, hidden: int):
        super().__init__()
        self.mlp = _mlp(arch.widths[-1], hidden, dim)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.mlp(pooled)


HEAD_BUILDERS = {
    "seg": lambda arch, **kw: DenseHead(arch, bias_prior=-2.0),
    "dense_regression": lambda arch, **kw: DenseHead(arch),
    "patch_classifier": lambda arch, **kw: PatchClassHead(arch, **kw),
    "projection_prediction": lambda arch, **kw: ProjectionPredictionHead(arch, **kw),
    "expander": lambda arch, **kw: ExpanderHead(arch, **kw),
}


def _init_module(module: nn.Module, generator: torch.Generator) -> None:
    """Torch-default-style init driven by an explicit generator."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / (fan_in ** 0.5)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, nn.GroupNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)
    if getattr(module, "bias_prior", None) is not None:
        with torch.no_grad():
            module.proj.bias.fill_(module.bias_prior)


class ModelBundle(nn.Module):
    """Shared trunk plus named task heads ('seg' is always present)."""

    def __init__(self, trunk: Trunk, heads: dict[str, nn.Module], arch: ArchConfig,
                 head_configs: dict[str, dict], metadata: dict | None = None):
        super().__init__()
        self.trunk = trunk
        self.heads = nn.ModuleDict(heads)
        self.arch = arch
        self.head_configs = head_configs
        self.metadata = dict(metadata or {})

    # -- feature plumbing ---------------------------------------------------

    def _check_dense_input(self, x: torch.Tensor) -> None:
        h, w = x.shape[-2:]
        stride = self.arch.total_stride
        if h % stride or w % stride:
            raise ValueError(f"input {h}x{w} not divisible by encoder stride {stride}")

    def dense_features(self, x: torch.Tensor) -> torch.Tensor:
        self._check_dense_input(x)
        return self.trunk(x)

    def pooled_embedding(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk.encoder(x)[-1].mean(dim=(2, 3))

    def dense_map(self, head_name: str, x: torch.Tensor) -> torch.Tensor:
        return self.heads[head_name](self.dense_features(x))

    def patch_logits(self, head_name: str, patches: torch.Tensor) -> torch.Tensor:
        b, p, h, w = patches.shape
        flat = patches.reshape(b * p, 1, h, w)
        embeddings = self.pooled_embedding(flat).reshape(b, p, -1)
        return self.heads[head_name](embeddings)

    def seg_probs(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.dense_map("seg", x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.seg_probs(x)

    # -- inference ----------------------------------------------------------

    @torch.no_grad()
    def predict(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Probability maps for a stack of images (B, H, W) -> (B, H, W)."""
        arr = np.asarray(images, dtype=np.float32)
        squeeze = arr.ndim == 2
        if squeeze:
            arr = arr[None]
        self.eval()
        outputs = []
        for start in range(0, len(arr), batch_size):
            chunk = torch.from_numpy(arr[start:start + batch_size]).unsqueeze(1)
            outputs.append(self.seg_probs(chunk).squeeze(1).numpy())
        result = np.concatenate(outputs, axis=0)
        return result[0] if squeeze else result


def build(arch: ArchConfig, tasks: list, seed: int) -> ModelBundle:
    """Deterministically initialized bundle with a seg head plus one head per task."""
    names = [t.name for t in tasks]
    if len(names) != len(set(names)):
        raise ValueError(f"duplicate task names: {names}")
    if "seg" in names:
        raise ValueError("'seg' is reserved for the segmentation head")
    trunk = Trunk(arch)
    _init_module(trunk, torch.Generator().manual_seed(derive_seed(seed, "init", "trunk")))
    head_configs: dict[str, dict] = {"seg": {"builder": "seg"}}
    for task in tasks:
        head_configs[task.name] = task.head_config(arch)
    heads = {}
    for name, config in head_configs.items():
        params = {k: v for k, v in config.items() if k != "builder"}
        head = HEAD_BUILDERS[config["builder"]](arch, **params)
        _init_module(head, torch.Generator().manual_seed(derive_seed(seed, "init", "head", name)))
        heads[name] = head
    return ModelBundle(trunk, heads, arch, head_configs, metadata={"seed": seed, "step": 0})


def transfer_shared(source: ModelBundle, target: ModelBundle) -> ModelBundle:
    """Copy trunk parameters from source into target; heads stay untouched."""
    if source.arch != target.arch:
        raise ValueError(f"architecture mismatch: {source.arch} vs {target.arch}")
    target.trunk.load_state_dict(source.trunk.state_dict())
    return target


def save_checkpoint(bundle: ModelBundle, path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch": dataclasses.asdict(bundle.arch),
        "head_configs": bundle.head_configs,
        "trunk_state": bundle.trunk.state_dict(),
        "head_states": {name: head.state_dict() for name, head in bundle.heads.items()},
        "metadata": bundle.metadata,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> ModelBundle:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint file {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"corrupt checkpoint file {path}: missing format version")
    version = payload["format_version"]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build supports {CHECKPOINT_VERSION}")
    arch_dict = dict(payload["arch"])
    arch_dict["stage_blocks"] = tuple(arch_dict["stage_blocks"])
    arch = ArchConfig(**arch_dict)
    trunk = Trunk(arch)
    trunk.load_state_dict(payload["trunk_state"])
    heads = {}
    for name, config in payload["head_configs"].items():
        params = {k: v for k, v in config.items() if k != "builder"}
        heads[name] = HEAD_BUILDERS[config["builder"]](arch, **params)
        heads[name].load_state_dict(payload["head_states"][name])
    return ModelBundle(trunk, heads, arch, payload["head_configs"], payload["metadata"])
