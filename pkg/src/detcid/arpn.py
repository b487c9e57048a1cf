"""Adversarial region proposal network: segmenter, discriminator, training.

The segmenter is a compact encoder-decoder emitting per-pixel probabilities
over three classes (background, cell body, cell wall). A discriminator
scores label maps as real-vs-generated with an unscaled output; its
feedback is folded into the segmenter loss. Training alternates one
discriminator step and one segmenter step per batch under Adam.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy import ndimage
from torch import nn
from torch.nn import functional as F

from detcid.core import GrayImage, MaskStack
from detcid.errors import (
    DivergenceError,
    InvalidConfigError,
    InvalidGroundTruthError,
    ShapeMismatchError,
)
from detcid.serialize import decode_array, encode_array, load_checkpoint, save_checkpoint

N_CLASSES = 3  # background, cell body, cell wall
PROB_FLOOR = 1e-7
# GAN stabilizers baked into the alternating schedule: the discriminator
# runs narrower and slower than the segmenter, and segmenter gradients are
# norm-clipped, otherwise the adversarial term derails the cross-entropy.
DISC_LR_FACTOR = 0.05
SEG_GRAD_CLIP = 1.0


def _disc_width(base_width: int) -> int:
    return max(base_width // 2, 2)


@dataclass
class TrainConfig:
    """Knobs for one adversarial training run."""

    patch_size: int = 256
    batch_size: int = 4
    learning_rate: float = 1e-3
    steps: int = 200
    seed: int = 0
    base_width: int = 16
    wall_width: int = 2
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.patch_size % 8 != 0:
            raise InvalidConfigError("patch_size must be divisible by 8 (three 2x poolings)")
        if self.patch_size < 16:
            raise InvalidConfigError("patch_size too small for the discriminator stack")
        if self.batch_size < 1 or self.steps < 0 or self.base_width < 1:
            raise InvalidConfigError("batch_size, steps, base_width must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Segmenter(nn.Module):
    """Encoder-decoder with three contracting and three expanding units.

    Contracting: 3x3 conv, ReLU, 2x2 max-pool (stride 2), doubling channel
    width. Expanding: nearest upsample, concatenation with the matching
    contracting activation (U-net style skip), 2x2 deconvolution, halving
    width. A 1x1 projection and per-pixel softmax emit the label map.
    """

    def __init__(self, base_width: int = 16):
        super().__init__()
        b = base_width
        self.down1 = nn.Conv2d(1, b, kernel_size=3, padding=1)
        self.down2 = nn.Conv2d(b, 2 * b, kernel_size=3, padding=1)
        self.down3 = nn.Conv2d(2 * b, 4 * b, kernel_size=3, padding=1)
        self.up1 = nn.ConvTranspose2d(4 * b + 4 * b, 2 * b, kernel_size=2, stride=1)
        self.up2 = nn.ConvTranspose2d(2 * b + 2 * b, b, kernel_size=2, stride=1)
        self.up3 = nn.ConvTranspose2d(b + b, max(b // 2, 1), kernel_size=2, stride=1)
        self.project = nn.Conv2d(max(b // 2, 1), N_CLASSES, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ShapeMismatchError(f"input dims {tuple(x.shape[-2:])} not divisible by 8")
        d1 = F.relu(self.down1(x))
        x = F.max_pool2d(d1, kernel_size=2, stride=2)
        d2 = F.relu(self.down2(x))
        x = F.max_pool2d(d2, kernel_size=2, stride=2)
        d3 = F.relu(self.down3(x))
        x = F.max_pool2d(d3, kernel_size=2, stride=2)
        for deconv, skip in ((self.up1, d3), (self.up2, d2), (self.up3, d1)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            h, w = x.shape[-2:]
            x = F.relu(deconv(torch.cat([x, skip], dim=-3))[..., :h, :w])
        return torch.softmax(self.project(x), dim=-3)


class Discriminator(nn.Module):
    """Five valid-padding conv layers with average pooling, then two FC layers.

    Pooling is inserted after a conv only while the remaining convs still
    fit, so one construction rule covers both 256-px training patches and
    small desk-scale patches. The final layer is linear: the score is an
    unscaled logit.
    """

    def __init__(self, input_size: int, base_width: int = 16, fc_width: int = 64):
        super().__init__()
        b = base_width
        widths = [b, 2 * b, 4 * b, 4 * b, 4 * b]
        layers: list[nn.Module] = []
        size = input_size
        cin = N_CLASSES
        for i, w in enumerate(widths):
            if size < 3:
                raise InvalidConfigError(f"input size {input_size} too small for 5 conv layers")
            layers.append(nn.Conv2d(cin, w, kernel_size=3))
            layers.append(nn.ReLU())
            size -= 2
            remaining = len(widths) - 1 - i
            if size >= 2 and size // 2 - 2 * remaining >= 1:
                layers.append(nn.AvgPool2d(2))
                size //= 2
            cin = w
        self.features = nn.Sequential(*layers)
        self.input_size = input_size
        self.flat_size = cin * size * size
        self.fc1 = nn.Linear(self.flat_size, fc_width)
        self.fc2 = nn.Linear(fc_width, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            raise ShapeMismatchError(
                f"expected {self.input_size}x{self.input_size} maps, got {tuple(x.shape[-2:])}"
            )
        h = self.features(x)
        h = h.flatten(start_dim=-3)
        return self.fc2(F.relu(self.fc1(h))).squeeze(-1)


# ---------------------------------------------------------------------------
# label maps and losses


def labelmap_from_masks(stack: MaskStack, wall_width: int = 2) -> np.ndarray:
    """One-hot (3, H, W) ground truth; the wall class is a morphological
    boundary band of each instance, painted in stack order so later cells
    occlude earlier ones."""
    if len(stack) == 0:
        raise InvalidGroundTruthError("cannot build a label map from zero masks")
    h, w = stack.masks[0].shape
    labels = np.zeros((h, w), dtype=np.int64)
    dil = wall_width // 2 + wall_width % 2
    ero = max(wall_width // 2, 1)
    for mask in stack.masks:
        m = mask.pixels
        inner = ndimage.binary_erosion(m, iterations=ero)
        outer = ndimage.binary_dilation(m, iterations=dil)
        wall = outer & ~inner
        labels[wall] = 2
        labels[inner] = 1
    onehot = np.zeros((N_CLASSES, h, w), dtype=np.float64)
    for c in range(N_CLASSES):
        onehot[c] = labels == c
    return onehot


def validate_label_map(arr) -> None:
    t = torch.as_tensor(arr)
    if t.shape[-3] != N_CLASSES:
        raise ShapeMismatchError(f"expected {N_CLASSES} class channels, got {t.shape}")
    if t.min() < 0 or t.max() > 1:
        raise InvalidGroundTruthError("probabilities outside [0, 1]")
    sums = t.sum(dim=-3)
    if (sums - 1.0).abs().max() > 1e-5:
        raise InvalidGroundTruthError("per-pixel class probabilities must sum to 1")


def _check_one_hot(gt: torch.Tensor) -> None:
    binary = ((gt == 0) | (gt == 1)).all()
    sums_to_one = ((gt.sum(dim=-3) - 1.0).abs() < 1e-6).all()
    if not bool(binary and sums_to_one):
        raise InvalidGroundTruthError("ground truth must be one-hot over the class axis")


def _as_float_tensor(x) -> torch.Tensor:
    """Tensors pass through; plain numbers and arrays become float64."""
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def segmenter_loss(map_probs, gt_onehot, d_logit, class_weights) -> torch.Tensor:
    """Class-weighted cross-entropy plus the adversarial term.

    The adversarial part is sigmoid cross-entropy of the discriminator
    logit against target 1, i.e. softplus(-logit); probabilities are
    floored at 1e-7 so both terms stay finite.
    """
    p = _as_float_tensor(map_probs)
    gt = torch.as_tensor(gt_onehot, dtype=p.dtype)
    w = torch.as_tensor(class_weights, dtype=p.dtype)
    logit = torch.as_tensor(d_logit, dtype=p.dtype)
    if p.shape != gt.shape:
        raise ShapeMismatchError(f"prediction {tuple(p.shape)} vs truth {tuple(gt.shape)}")
    _check_one_hot(gt.detach())
    shape = [1] * p.dim()
    shape[-3] = N_CLASSES
    logp = torch.log(torch.clamp(p, min=PROB_FLOOR))
    ce_pix = -(gt * logp).sum(dim=-3)
    w_pix = (gt * w.view(shape)).sum(dim=-3)
    ce = (w_pix * ce_pix).mean()
    adv = F.softplus(-logit).mean()
    return ce + adv


def discriminator_loss(d_gt_logit, d_gen_logit) -> torch.Tensor:
    """Sigmoid cross-entropy: ground-truth maps toward 1, generated toward 0."""
    gt = _as_float_tensor(d_gt_logit)
    gen = torch.as_tensor(d_gen_logit, dtype=gt.dtype)
    if not (torch.isfinite(gt).all() and torch.isfinite(gen).all()):
        raise DivergenceError("non-finite discriminator logits")
    return F.softplus(-gt).mean() + F.softplus(gen).mean()


def class_weights_from_frequencies(counts: np.ndarray) -> np.ndarray:
    """Inverse-frequency weights normalized to mean 1."""
    counts = np.asarray(counts, dtype=np.float64)
    freq = counts / max(counts.sum(), 1.0)
    w = 1.0 / np.clip(freq, 1e-6, None)
    return w / w.mean()


# ---------------------------------------------------------------------------
# functional forwards (numpy in, numpy out)


def segmenter_forward(segmenter: Segmenter, img: GrayImage) -> np.ndarray:
    """Label map (3, H, W) for one image; dims must be divisible by 8."""
    if img.height % 8 or img.width % 8:
        raise ShapeMismatchError(f"image dims {img.shape} not divisible by 8")
    with torch.no_grad():
        x = torch.from_numpy(img.pixels.copy()).to(torch.float32)
        out = segmenter(x.unsqueeze(0).unsqueeze(0))[0]
    return out.double().numpy()


def discriminator_forward(discriminator: Discriminator, label_map) -> float:
    validate_label_map(label_map)
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(label_map), dtype=torch.float32)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        return float(discriminator(x)[0].item())


# ---------------------------------------------------------------------------
# training


@dataclass
class ArpnState:
    """Everything needed to run or resume the adversarial trainer."""

    segmenter: Segmenter
    discriminator: Discriminator
    config: TrainConfig
    class_weights: np.ndarray
    step: int = 0
    curves: list | None = None


def _optimizer_state(opt: torch.optim.Optimizer) -> dict:
    sd = opt.state_dict()
    out = {"param_groups": sd["param_groups"], "state": {}}
    for idx, st in sd["state"].items():
        enc = {}
        for key, val in st.items():
            if isinstance(val, torch.Tensor):
                enc[key] = {"tensor": encode_array(val.detach().cpu().double().numpy())}
            else:
                enc[key] = val
        out["state"][str(idx)] = enc
    return out


def _load_optimizer_state(opt: torch.optim.Optimizer, doc: dict) -> None:
    sd = opt.state_dict()
    state = {}
    for idx, st in doc["state"].items():
        dec = {}
        for key, val in st.items():
            if isinstance(val, dict) and "tensor" in val:
                dec[key] = torch.from_numpy(decode_array(val["tensor"])).to(torch.float32)
            else:
                dec[key] = val
        state[int(idx)] = dec
    sd["state"] = state
    sd["param_groups"] = doc["param_groups"]
    opt.load_state_dict(sd)


def _params_to_numpy(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()
    }


def _load_params(module: nn.Module, params: dict[str, np.ndarray], prefix: str) -> None:
    sd = {}
    for key, val in params.items():
        if key.startswith(prefix + "."):
            ref = module.state_dict()[key[len(prefix) + 1 :]]
            sd[key[len(prefix) + 1 :]] = torch.from_numpy(val).to(ref.dtype)
    module.load_state_dict(sd)


def save_arpn_checkpoint(path, state: ArpnState, optimizers=None) -> None:
    params = {}
    params.update(_params_to_numpy(state.segmenter, "segmenter"))
    params.update(_params_to_numpy(state.discriminator, "discriminator"))
    extra = {
        "class_weights": encode_array(state.class_weights),
        "rng_state": encode_array(torch.get_rng_state().numpy()),
    }
    if optimizers is not None:
        extra["opt_segmenter"] = _optimizer_state(optimizers[0])
        extra["opt_discriminator"] = _optimizer_state(optimizers[1])
    save_checkpoint(path, "arpn", state.config.to_dict(), state.step, params, extra)


def load_arpn_checkpoint(path) -> tuple[ArpnState, dict]:
    doc = load_checkpoint(path)
    if doc["kind"] != "arpn":
        raise InvalidConfigError(f"not an arpn checkpoint: kind={doc['kind']!r}")
    cfg = TrainConfig.from_dict(doc["config"])
    seg = Segmenter(cfg.base_width)
    disc = Discriminator(cfg.patch_size, _disc_width(cfg.base_width))
    _load_params(seg, doc["params"], "segmenter")
    _load_params(disc, doc["params"], "discriminator")
    weights = decode_array(doc["extra"]["class_weights"])
    state = ArpnState(seg, disc, cfg, weights, step=doc["step"])
    return state, doc["extra"]


def _prepare_training_data(samples: list[tuple[GrayImage, MaskStack]], wall_width: int):
    images, maps = [], []
    counts = np.zeros(N_CLASSES, dtype=np.float64)
    for image, stack in samples:
        onehot = labelmap_from_masks(stack, wall_width)
        counts += onehot.reshape(N_CLASSES, -1).sum(axis=1)
        images.append(torch.from_numpy(image.pixels.copy()).to(torch.float32))
        maps.append(torch.from_numpy(onehot).to(torch.float32))
    return images, maps, counts


def _sample_patches(images, maps, patch: int, batch: int):
    idx = torch.randint(len(images), (batch,))
    xs, gs = [], []
    for i in idx.tolist():
        h, w = images[i].shape
        if h < patch or w < patch:
            raise InvalidConfigError(f"image {h}x{w} smaller than patch {patch}")
        y0 = int(torch.randint(h - patch + 1, (1,)).item())
        x0 = int(torch.randint(w - patch + 1, (1,)).item())
        xs.append(images[i][y0 : y0 + patch, x0 : x0 + patch])
        gs.append(maps[i][:, y0 : y0 + patch, x0 : x0 + patch])
    return torch.stack(xs).unsqueeze(1), torch.stack(gs)


def train_arpn(samples: list[tuple[GrayImage, MaskStack]], cfg: TrainConfig,
               resume: ArpnState | None = None, resume_extra: dict | None = None,
               checkpoint_path=None) -> ArpnState:
    """Alternating adversarial training; returns params and loss curves.

    One discriminator update then one segmenter update per batch, both
    under Adam. Loss rows are (step, segmentation CE, adversarial term,
    discriminator loss). Raises :class:`DivergenceError` on non-finite
    losses, leaving the last checkpoint on disk when a path is given.
    """
    if not samples:
        raise InvalidConfigError("empty training set")
    images, maps, counts = _prepare_training_data(samples, cfg.wall_width)

    if resume is None:
        torch.manual_seed(cfg.seed)
        seg = Segmenter(cfg.base_width)
        disc = Discriminator(cfg.patch_size, _disc_width(cfg.base_width))
        weights = class_weights_from_frequencies(counts)
        state = ArpnState(seg, disc, cfg, weights, step=0, curves=[])
    else:
        state = resume
        state.curves = state.curves or []
        seg, disc = state.segmenter, state.discriminator
    opt_s = torch.optim.Adam(seg.parameters(), lr=cfg.learning_rate)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate * DISC_LR_FACTOR)
    if resume is not None and resume_extra:
        if "opt_segmenter" in resume_extra:
            _load_optimizer_state(opt_s, resume_extra["opt_segmenter"])
        if "opt_discriminator" in resume_extra:
            _load_optimizer_state(opt_d, resume_extra["opt_discriminator"])
        if "rng_state" in resume_extra:
            torch.set_rng_state(torch.from_numpy(decode_array(resume_extra["rng_state"])))

    w_t = torch.from_numpy(state.class_weights).to(torch.float32)
    target_step = state.step + cfg.steps
    while state.step < target_step:
        x, gt = _sample_patches(images, maps, cfg.patch_size, cfg.batch_size)

        # discriminator step on detached generator output
        gen = seg(x).detach()
        opt_d.zero_grad()
        loss_d = discriminator_loss(disc(gt), disc(gen))
        loss_d.backward()
        opt_d.step()

        # segmenter step; discriminator grads are discarded next zero_grad
        opt_s.zero_grad()
        gen = seg(x)
        logp = torch.log(torch.clamp(gen, min=PROB_FLOOR))
        ce_pix = -(gt * logp).sum(dim=-3)
        w_pix = (gt * w_t.view(1, N_CLASSES, 1, 1)).sum(dim=-3)
        ce = (w_pix * ce_pix).mean()
        adv = F.softplus(-disc(gen)).mean()
        loss_s = ce + adv
        loss_s.backward()
        torch.nn.utils.clip_grad_norm_(seg.parameters(), SEG_GRAD_CLIP)
        opt_s.step()

        state.step += 1
        row = (state.step, float(ce.item()), float(adv.item()), float(loss_d.item()))
        state.curves.append(row)
        if not all(np.isfinite(v) for v in row[1:]):
            raise DivergenceError(f"non-finite loss at step {state.step}: {row}")
        if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_arpn_checkpoint(checkpoint_path, state, (opt_s, opt_d))

    if checkpoint_path:
        save_arpn_checkpoint(checkpoint_path, state, (opt_s, opt_d))
    return state


def write_loss_csv(path, rows, header=("step", "loss_seg_ce", "loss_seg_adv", "loss_disc")) -> None:
    from detcid.serialize import atomic_write_bytes

    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
