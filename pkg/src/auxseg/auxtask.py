"""The five auxiliary tasks behind one pluggable interface.

Each task knows how to build training examples from segmentation samples, what
head it needs on the shared trunk, and how to score head outputs. Distance-map
tasks regress the Euclidean distance transform of the mask; the patch-order
task classifies which permutation scrambled a patch grid; the two contrastive
tasks compare embeddings of two augmented views.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .core import Sample
from .data import AugmentationConfig, apply_intensity, augment

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Surface distance maps


def sdm(mask: np.ndarray, direction: str) -> np.ndarray:
    """Euclidean distance map of a binary mask.

    direction='in': each foreground pixel gets its distance to the closest
    background pixel, background is 0. direction='out': each background pixel
    gets its distance to the closest foreground pixel, foreground is 0.
    """
    mask = np.asarray(mask)
    values = np.unique(mask)
    if not np.isin(values, (0, 1)).all():
        raise ValueError(f"mask must be binary, got values {values}")
    fg = mask > 0
    if direction == "in":
        if fg.all():
            raise ValueError("undefined distance reference: direction='in' needs a background pixel")
        if not fg.any():
            return np.zeros(mask.shape, dtype=np.float64)
        return ndimage.distance_transform_edt(fg)
    if direction == "out":
        if not fg.any():
            raise ValueError("undefined distance reference: direction='out' needs a foreground pixel")
        if fg.all():
            return np.zeros(mask.shape, dtype=np.float64)
        return ndimage.distance_transform_edt(~fg)
    raise ValueError(f"direction must be 'in' or 'out', got {direction!r}")


def normalize_distance_map(values: np.ndarray) -> np.ndarray:
    """Scale a distance map into [0,1] by its maximum (regression target)."""
    peak = values.max()
    if peak <= 0:
        return np.zeros_like(values)
    return values / peak


def sdm_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over pixels."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return ((pred.double() - target.double()) ** 2).mean()


# ---------------------------------------------------------------------------
# Patch-order (jigsaw) task


def rkb_permutations(grid: tuple[int, int], k: int, seed: int = 0) -> list[tuple[int, ...]]:
    """Deterministic list of k distinct patch permutations, identity first."""
    n = grid[0] * grid[1]
    total = math.factorial(n)
    if k > total:
        raise ValueError(f"k={k} exceeds {n}! = {total} permutations of a {grid[0]}x{grid[1]} grid")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k == total:
        return [tuple(p) for p in itertools.permutations(range(n))]
    rng = np.random.default_rng(seed)
    perms: list[tuple[int, ...]] = [tuple(range(n))]
    seen = {perms[0]}
    while len(perms) < k:
        candidate = tuple(int(x) for x in rng.permutation(n))
        if candidate not in seen:
            seen.add(candidate)
            perms.append(candidate)
    return perms


def rkb_make_example(image: np.ndarray, grid: tuple[int, int], perm_index: int,
                     perms: list[tuple[int, ...]]) -> tuple[np.ndarray, int]:
    """Partition image into grid patches, reorder so stack[j] = patches[perm[j]]."""
    if not 0 <= perm_index < len(perms):
        raise ValueError(f"perm_index {perm_index} out of range for {len(perms)} permutations")
    rows, cols = grid
    h, w = image.shape
    ph, pw = h // rows, w // cols
    top = (h - ph * rows) // 2
    left = (w - pw * cols) // 2
    patches = [
        image[top + r * ph: top + (r + 1) * ph, left + c * pw: left + (c + 1) * pw]
        for r in range(rows) for c in range(cols)
    ]
    perm = perms[perm_index]
    stack = np.stack([patches[j] for j in perm])
    return stack, perm_index


# ---------------------------------------------------------------------------
# Two-view construction and contrastive losses


def two_view_augment(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator,
                     size: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independently random-crop-resized + intensity-jittered views.

    Crop position jitter is gated on p_translate and crop scale jitter on
    p_zoom; with every probability at 0 both views are the exact center crop.
    """
    h, w = image.shape
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image size {h}x{w}")

    def one_view() -> np.ndarray:
        scale = rng.uniform(*cfg.zoom_range) if rng.random() < cfg.p_zoom else 1.0
        side = int(np.clip(round(size * scale), 2, min(h, w)))
        if rng.random() < cfg.p_translate:
            top = int(rng.integers(0, h - side + 1))
            left = int(rng.integers(0, w - side + 1))
        else:
            top = (h - side) // 2
            left = (w - side) // 2
        crop = image[top:top + side, left:left + side]
        if side != size:
            ratio = (side - 1) / (size - 1) if size > 1 else 1.0
            crop = ndimage.affine_transform(
                crop, np.array([[ratio, 0.0], [0.0, ratio]]), output_shape=(size, size),
                order=1, mode="reflect")
        return apply_intensity(crop, cfg, rng)

    return one_view(), one_view()


def moco_loss(queries: torch.Tensor, keys: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetrized in-batch InfoNCE with diagonal positives.

    Embeddings are L2-normalized here; keys are detached. The value is the mean
    cross-entropy of the BxB similarity/temperature logits against diagonal
    labels, averaged over the (q,k) and (k,q) directions.
    """
    if queries.ndim != 2 or keys.ndim != 2 or queries.shape != keys.shape:
        raise ValueError(f"expected matching BxD embeddings, got {tuple(queries.shape)} and {tuple(keys.shape)}")
    b = queries.shape[0]
    if b < 2:
        raise ValueError(f"need batch size >= 2 for in-batch negatives, got {b}")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    q = F.normalize(queries.double(), dim=1)
    k = F.normalize(keys.detach().double(), dim=1)
    logits = q @ k.t() / temperature
    labels = torch.arange(b, device=logits.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels))


def vicreg_loss(z_a: torch.Tensor, z_b: torch.Tensor,
                coeffs: tuple[float, float, float] = (25.0, 25.0, 1.0),
                gamma: float = 1.0, eps: float = 1e-4) -> tuple[torch.Tensor, dict[str, float]]:
    """Variance / invariance / covariance objective on two view embeddings.

    invariance: mean squared difference. variance: per-branch mean over dims of
    max(0, gamma - sqrt(Var + eps)), averaged across branches. covariance: sum
    of squared off-diagonal covariance entries over d, summed across branches.
    Returns (weighted total, raw term values).
    """
    if z_a.ndim != 2 or z_a.shape != z_b.shape:
        raise ValueError(f"expected matching BxD embeddings, got {tuple(z_a.shape)} and {tuple(z_b.shape)}")
    b, d = z_a.shape
    if b < 2:
        raise ValueError(f"need batch size >= 2 for variance/covariance, got {b}")
    za = z_a.double()
    zb = z_b.double()
    invariance = ((za - zb) ** 2).mean()

    def branch_variance(z: torch.Tensor) -> torch.Tensor:
        std = torch.sqrt(z.var(dim=0, unbiased=True) + eps)
        return F.relu(gamma - std).mean()

    variance = 0.5 * (branch_variance(za) + branch_variance(zb))

    def branch_covariance(z: torch.Tensor) -> torch.Tensor:
        zc = z - z.mean(dim=0)
        cov = (zc.t() @ zc) / (b - 1)
        off = cov - torch.diag(torch.diag(cov))
        return (off ** 2).sum() / d

    covariance = branch_covariance(za) + branch_covariance(zb)
    lam_v, lam_i, lam_c = coeffs
    total = lam_v * variance + lam_i * invariance + lam_c * covariance
    terms = {
        "variance": float(variance.detach()),
        "invariance": float(invariance.detach()),
        "covariance": float(covariance.detach()),
    }
    return total, terms


# ---------------------------------------------------------------------------
# Task plug-ins


@dataclass
class BatchContext:
    """What a task needs from the trainer to construct a batch."""

    batch_size: int
    aug: AugmentationConfig


class AuxiliaryTask:
    """One auxiliary task: example construction, head contract, and loss."""

    name: str
    head_kind: str
    hyperparams: dict

    def head_config(self, arch) -> dict:
        raise NotImplementedError

    def make_batch(self, samples: list[Sample], rng: np.random.Generator, ctx: BatchContext) -> dict:
        raise NotImplementedError

    def loss(self, bundle, batch: dict, state) -> tuple[torch.Tensor, dict[str, float]]:
        raise NotImplementedError

    def init_state(self, bundle):
        return None

    def after_step(self, bundle, state) -> None:
        pass


class SdmTask(AuxiliaryTask):
    """Regress the normalized distance map of the (augmented) mask."""

    head_kind = "dense-map"

    def __init__(self, direction: str):
        if direction not in ("in", "out"):
            raise ValueError(f"direction must be 'in' or 'out', got {direction!r}")
        self.direction = direction
        self.name = f"sdm_{direction}"
        self.hyperparams = {}

    def head_config(self, arch) -> dict:
        return {"builder": "dense_regression"}

    def make_batch(self, samples, rng, ctx):
        idx = rng.integers(0, len(samples), ctx.batch_size)
        images, targets = [], []
        for i in idx:
            s = augment(samples[int(i)], ctx.aug, rng)
            try:
                dmap = sdm(s.mask, self.direction)
            except ValueError:
                logger.warning("skipping sample '%s': degenerate mask for sdm_%s", s.id, self.direction)
                continue
            images.append(s.image)
            targets.append(normalize_distance_map(dmap))
        if not images:
            raise RuntimeError(f"entire batch degenerate for task {self.name}")
        x = torch.from_numpy(np.stack(images)).unsqueeze(1)
        t = torch.from_numpy(np.stack(targets).astype(np.float32)).unsqueeze(1)
        return {"images": x, "targets": t}

    def loss(self, bundle, batch, state):
        pred = bundle.dense_map(self.name, batch["images"])
        value = sdm_loss(pred, batch["targets"])
        return value, {}


class RkbTask(AuxiliaryTask):
    """Classify which permutation scrambled a grid of image patches."""

    head_kind = "class-logits"

    def __init__(self, grid: tuple[int, int] = (2, 2), num_classes: int = 24, perm_seed: int = 0):
        self.name = "rkb"
        self.grid = tuple(grid)
        self.perms = rkb_permutations(self.grid, num_classes, perm_seed)
        self.hyperparams = {"grid": self.grid, "num_classes": num_classes, "perm_seed": perm_seed}

    def head_config(self, arch) -> dict:
        return {
            "builder": "patch_classifier",
            "num_patches": self.grid[0] * self.grid[1],
            "num_classes": len(self.perms),
        }

    def make_batch(self, samples, rng, ctx):
        idx = rng.integers(0, len(samples), ctx.batch_size)
        stacks, labels = [], []
        for i in idx:
            s = samples[int(i)]
            image = augment(Sample(image=s.image, mask=None, id=s.id), ctx.aug, rng).image
            perm_index = int(rng.integers(0, len(self.perms)))
            stack, label = rkb_make_example(image, self.grid, perm_index, self.perms)
            stacks.append(stack)
            labels.append(label)
        return {
            "patches": torch.from_numpy(np.stack(stacks)),
            "labels": torch.tensor(labels, dtype=torch.long),
        }

    def loss(self, bundle, batch, state):
        logits = bundle.patch_logits(self.name, batch["patches"])
        value = F.cross_entropy(logits.double(), batch["labels"])
        accuracy = float((logits.argmax(dim=1) == batch["labels"]).double().mean())
        return value, {"aux_accuracy": accuracy}


def _stack_views(samples, rng, ctx):
    views_a, views_b = [], []
    for i in rng.integers(0, len(samples), ctx.batch_size):
        image = samples[int(i)].image
        size = min(image.shape) // 2
        a, b = two_view_augment(image, ctx.aug, rng, size)
        views_a.append(a)
        views_b.append(b)
    return (
        torch.from_numpy(np.stack(views_a)).unsqueeze(1),
        torch.from_numpy(np.stack(views_b)).unsqueeze(1),
    )


class MocoTask(AuxiliaryTask):
    """Momentum-contrast with in-batch negatives on pooled encoder features."""

    head_kind = "vector-embedding"

    def __init__(self, dim: int = 64, hidden: int = 128, temperature: float = 0.2, momentum: float = 0.99):
        self.name = "moco"
        self.dim = dim
        self.hidden = hidden
        self.temperature = temperature
        self.momentum = momentum
        self.hyperparams = {"dim": dim, "hidden": hidden, "temperature": temperature, "momentum": momentum}

    def head_config(self, arch) -> dict:
        return {"builder": "projection_prediction", "dim": self.dim, "hidden": self.hidden}

    def make_batch(self, samples, rng, ctx):
        if ctx.batch_size < 2:
            raise ValueError("moco needs batch_size >= 2 for in-batch negatives")
        va, vb = _stack_views(samples, rng, ctx)
        return {"view_a": va, "view_b": vb}

    def init_state(self, bundle):
        import copy

        head = bundle.heads[self.name]
        momentum_encoder = copy.deepcopy(bundle.trunk.encoder)
        momentum_proj = copy.deepcopy(head.proj)
        for p in momentum_encoder.parameters():
            p.requires_grad_(False)
        for p in momentum_proj.parameters():
            p.requires_grad_(False)
        return {"encoder": momentum_encoder, "proj": momentum_proj}

    def loss(self, bundle, batch, state):
        head = bundle.heads[self.name]
        q_a = head(bundle.pooled_embedding(batch["view_a"]))
        q_b = head(bundle.pooled_embedding(batch["view_b"]))
        with torch.no_grad():
            k_a = state["proj"](_pooled(state["encoder"], batch["view_a"]))
            k_b = state["proj"](_pooled(state["encoder"], batch["view_b"]))
        value = 0.5 * (moco_loss(q_a, k_b, self.temperature) + moco_loss(q_b, k_a, self.temperature))
        return value, {}

    def after_step(self, bundle, state) -> None:
        head = bundle.heads[self.name]
        with torch.no_grad():
            for online, target in ((bundle.trunk.encoder, state["encoder"]), (head.proj, state["proj"])):
                for p, mp in zip(online.parameters(), target.parameters()):
                    mp.mul_(self.momentum).add_(p, alpha=1.0 - self.momentum)


def _pooled(encoder, x: torch.Tensor) -> torch.Tensor:
    features = encoder(x)
    return features[-1].mean(dim=(2, 3))


class VicregTask(AuxiliaryTask):
    """Variance-invariance-covariance objective on expanded pooled features."""

    head_kind = "vector-embedding"

    def __init__(self, dim: int = 64, hidden: int = 128,
                 coeffs: tuple[float, float, float] = (25.0, 25.0, 1.0),
                 gamma: float = 1.0, eps: float = 1e-4):
        self.name = "vicreg"
        self.dim = dim
        self.hidden = hidden
        self.coeffs = tuple(coeffs)
        self.gamma = gamma
        self.eps = eps
        self.hyperparams = {"dim": dim, "hidden": hidden, "coeffs": self.coeffs, "gamma": gamma, "eps": eps}

    def head_config(self, arch) -> dict:
        return {"builder": "expander", "dim": self.dim, "hidden": self.hidden}

    def make_batch(self, samples, rng, ctx):
        if ctx.batch_size < 2:
            raise ValueError("vicreg needs batch_size >= 2 for the variance term")
        va, vb = _stack_views(samples, rng, ctx)
        return {"view_a": va, "view_b": vb}

    def loss(self, bundle, batch, state):
        head = bundle.heads[self.name]
        z_a = head(bundle.pooled_embedding(batch["view_a"]))
        z_b = head(bundle.pooled_embedding(batch["view_b"]))
        value, terms = vicreg_loss(z_a, z_b, self.coeffs, self.gamma, self.eps)
        return value, terms


_TASK_BUILDERS = {
    "sdm_in": lambda **hp: SdmTask("in", **hp),
    "sdm_out": lambda **hp: SdmTask("out", **hp),
    "rkb": RkbTask,
    "moco": MocoTask,
    "vicreg": VicregTask,
}


def available_tasks() -> list[str]:
    return sorted(_TASK_BUILDERS)


def make_task(name: str, hyperparams: dict | None = None) -> AuxiliaryTask:
    """Instantiate a registered task, applying hyperparameter overrides."""
    if name not in _TASK_BUILDERS:
        raise KeyError(f"unknown auxiliary task {name!r}; available: {available_tasks()}")
    hp = dict(hyperparams or {})
    try:
        return _TASK_BUILDERS[name](**hp)
    except TypeError as exc:
        raise ValueError(f"bad hyperparameters for task {name!r}: {hp}") from exc
