"""Per-image layer separation: model, objective, optimizer, training schedule.

The model carries one unconstrained parameter field per layer; a layer is the
logistic squash of its field times its mask, so emitted layers are always
in range with masked support. Everything downstream of the parameters
(squash, masking, rigid shifts, compositing, losses, critics) has a
hand-derived gradient, which keeps the whole objective checkable against
finite differences and the optimizer free of any autodiff dependency.

Training runs in two phases: first over pseudo cases with the bone-anchor
term (and, past the switchover epoch, the shadow term plus critic updates),
then over the mixed dataset with the full objective. Per-case models are
independent; the critics are the only shared trainable state.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .critics import (
    LogisticSegmentationCritic,
    LogisticShadowCritic,
    MomentShadowCritic,
    ShadowCritic,
    SupervisionCritic,
    VacatedRegionSupervisionCritic,
    dilation_ring,
)
from .geometry import ShiftParams, ShiftRange, sample_shift, shift_stack, warp_layer_adjoint
from .imaging import (
    Image,
    LayerStack,
    Mask,
    mask_intersection,
    mask_union,
    reconstruct,
    reconstruct_gradient,
    transmission,
    validate_image,
    validate_mask,
    write_png,
)
from .losses import (
    STAGE1_EARLY,
    STAGE1_LATE,
    STAGE2,
    LossReport,
    LossWeights,
    hybrid_weights,
    loss_hybrid,
    loss_l0,
    loss_l3,
    rmse_grad,
)
from .pseudo import PseudoCase

INIT_BLUR_SIGMA = 8.0
INIT_BONE_FLOOR = 0.01
SQUASH_CLAMP = 1e-6
DEFAULT_CASE_STEPS = 2000
# Tuned on the 64 px phantom suite: the rmse gradient is norm-bounded, so a
# large step size is stable and drains the blur-init shadow within budget.
DEFAULT_CASE_LR = 30.0
DEFAULT_MOMENTUM = 0.9


class DivergenceError(RuntimeError):
    """Raised when the objective stops being finite during optimization."""


def squash(params: np.ndarray) -> np.ndarray:
    """Logistic map from unconstrained parameters to (0, 1)."""
    z = np.asarray(params, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def squash_inverse(values: np.ndarray, clamp: float = SQUASH_CLAMP) -> np.ndarray:
    """Logit of values clamped into (clamp, 1 - clamp)."""
    v = np.clip(np.asarray(values, dtype=np.float64), clamp, 1.0 - clamp)
    return np.log(v / (1.0 - v))


@dataclass
class SeparationCase:
    """One image to separate: the composite plus its bone support masks.

    bone_gt holds the known bone layers of generated cases (used by the
    anchor term); aux_real optionally carries the source image and masks a
    pseudo case was built from, for supervision-critic updates.
    """

    case_id: str
    image: Image
    bone_masks: list[Mask]
    bone_gt: list[Image] | None = None
    aux_real: tuple[Image, list[Mask]] | None = None
    kind: str = "real"

    def __post_init__(self) -> None:
        validate_image(self.image, f"case {self.case_id}")
        for i, mask in enumerate(self.bone_masks):
            validate_mask(mask, f"case {self.case_id} mask {i}")
            if mask.shape != self.image.shape:
                raise ValueError(f"case {self.case_id}: mask {i} shape mismatch")
        if self.bone_gt is not None and len(self.bone_gt) != len(self.bone_masks):
            raise ValueError(f"case {self.case_id}: bone_gt count mismatch")

    @property
    def n_bones(self) -> int:
        return len(self.bone_masks)

    @classmethod
    def from_phantom(cls, phantom, case_id: str, with_bone_gt: bool = False):
        gt = phantom.gt_stack
        return cls(
            case_id=case_id,
            image=phantom.composed.copy(),
            bone_masks=[m.copy() for m in gt.masks[1:]],
            bone_gt=[b.copy() for b in gt.layers[1:]] if with_bone_gt else None,
            kind="phantom",
        )

    @classmethod
    def from_pseudo(
        cls,
        pseudo: PseudoCase,
        case_id: str,
        source: tuple[Image, list[Mask]] | None = None,
    ):
        return cls(
            case_id=case_id,
            image=pseudo.image.copy(),
            bone_masks=[m.copy() for m in pseudo.masks],
            bone_gt=[b.copy() for b in pseudo.bone_gt_shifted],
            aux_real=source,
            kind="pseudo",
        )


class LayerModel:
    """Directly parameterized layers bound to one case.

    Layer i is squash(params[i]) * masks[i]; mask 0 (soft tissue) is the
    full frame. Static geometry derived from the masks (bone union, overlap,
    the ring just outside the union) is precomputed once.
    """

    def __init__(self, case: SeparationCase, params: list[np.ndarray] | None = None):
        self.case = case
        self.masks = [np.ones_like(case.image)] + [
            (np.asarray(m) > 0.5).astype(np.float64) for m in case.bone_masks
        ]
        if params is None:
            params = [np.zeros_like(case.image) for _ in self.masks]
        if len(params) != len(self.masks):
            raise ValueError(
                f"LayerModel: {len(params)} parameter fields for "
                f"{len(self.masks)} layers"
            )
        for p in params:
            if p.shape != case.image.shape:
                raise ValueError("LayerModel: parameter field shape mismatch")
        self.params = [np.asarray(p, dtype=np.float64) for p in params]
        self.union_mask = (
            mask_union(self.masks[1:]) if case.n_bones else np.zeros_like(case.image)
        )
        self.overlap_mask = (
            mask_intersection(self.masks[1:])
            if case.n_bones >= 2
            else np.zeros_like(case.image)
        )
        self.soft_ring = (
            dilation_ring(self.union_mask)
            if self.union_mask.sum()
            else np.zeros_like(case.image)
        )

    @property
    def n_layers(self) -> int:
        return len(self.masks)

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params)

    def emit(self) -> LayerStack:
        layers = [squash(p) * m for p, m in zip(self.params, self.masks)]
        return LayerStack(layers, [m.copy() for m in self.masks])

    @classmethod
    def zero_init(cls, case: SeparationCase) -> "LayerModel":
        return cls(case)

    @classmethod
    def default_init(cls, case: SeparationCase) -> "LayerModel":
        """Start near a plausible split: blurred image as soft tissue, the
        local excess over the blur as bone content."""
        blurred = gaussian_filter(case.image, INIT_BLUR_SIGMA)
        params = [squash_inverse(blurred)]
        bone = squash_inverse(np.maximum(case.image - blurred, INIT_BONE_FLOOR))
        params += [bone.copy() for _ in case.bone_masks]
        return cls(case, params)

    @classmethod
    def from_layers(cls, case: SeparationCase, layers: Sequence[Image]) -> "LayerModel":
        """Initialize so the emission reproduces the given layers (up to the
        squash clamp at exact 0 or 1)."""
        return cls(case, [squash_inverse(layer) for layer in layers])


def emit_layers(model: LayerModel) -> LayerStack:
    return model.emit()


@dataclass
class CriticSet:
    """The two critic roles the objective consumes."""

    shadow: ShadowCritic
    supervision: SupervisionCritic

    @staticmethod
    def reference() -> "CriticSet":
        return CriticSet(MomentShadowCritic(), VacatedRegionSupervisionCritic())

    @staticmethod
    def trainable(n_bones: int = 2) -> "CriticSet":
        return CriticSet(LogisticShadowCritic(), LogisticSegmentationCritic(n_bones))


def evaluate_objective(
    model: LayerModel,
    shift: ShiftParams,
    weights: LossWeights,
    stage: str,
    critics: CriticSet,
    early_l3_from_delta: bool = False,
) -> tuple[LossReport, list[np.ndarray]]:
    """One forward/backward pass: loss components and parameter gradients.

    Only the components active in the given phase are computed; gradients
    are accumulated pre-weighted, then pulled through the squash and masks.
    """
    case = model.case
    active = hybrid_weights(weights, stage, early_l3_from_delta)
    sig = [squash(p) for p in model.params]
    layers = [s * m for s, m in zip(sig, model.masks)]
    stack = LayerStack(layers, list(model.masks))
    grads_layers = [np.zeros_like(layer) for layer in layers]
    components: dict[str, float] = {}

    recon = reconstruct(stack)
    has_overlap = bool(model.overlap_mask.sum())
    components["l0"] = loss_l0(recon, case.image, model.overlap_mask)
    g_recon = rmse_grad(recon, case.image)
    if has_overlap:
        g_recon = g_recon + rmse_grad(recon, case.image, model.overlap_mask)
    for i in range(len(layers)):
        grads_layers[i] += active["l0"] * g_recon * reconstruct_gradient(stack, i)

    shifted = shift_stack(stack, shift)
    recon_shift = reconstruct(shifted)
    shifted_union = (
        mask_union(shifted.masks[1:]) if case.n_bones else np.zeros_like(recon)
    )
    vacated = ((model.union_mask > 0.5) & (shifted_union < 0.5)).astype(np.float64)
    l1_value, g_recon_shift = critics.supervision.evaluate(
        recon_shift, shifted.masks[1:], vacated
    )
    components["l1"] = l1_value
    g_recon_shift = active["l1"] * g_recon_shift
    for i in range(len(layers)):
        g_layer = g_recon_shift * reconstruct_gradient(shifted, i)
        if i == 0:
            grads_layers[0] += g_layer
        else:
            grads_layers[i] += warp_layer_adjoint(
                g_layer * shifted.masks[i], shift.for_layer(i)
            )

    if "l2" in active:
        if model.union_mask.sum():
            l2_value, g_l0 = critics.shadow.evaluate(
                layers[0], model.union_mask, model.soft_ring
            )
            grads_layers[0] += active["l2"] * g_l0
        else:
            l2_value = 0.0
        components["l2"] = l2_value

    if "l3" in active:
        if case.bone_gt is None:
            raise ValueError(
                f"case {case.case_id}: stage {stage} needs bone ground truth"
            )
        bones = layers[1:]
        bones_shifted = shifted.layers[1:]
        gt_stack = LayerStack(
            [np.zeros_like(recon)] + [b.copy() for b in case.bone_gt],
            list(model.masks),
        )
        gt_shifted = shift_stack(gt_stack, shift)
        recon_b = 1.0 - transmission(bones)
        gt_b = 1.0 - transmission(gt_stack.layers[1:])
        recon_b_shift = 1.0 - transmission(bones_shifted)
        gt_b_shift = 1.0 - transmission(gt_shifted.layers[1:])
        sup = model.union_mask if model.union_mask.sum() else None
        sup_shift = shifted_union if shifted_union.sum() else None
        components["l3"] = loss_l3(
            recon_b, gt_b, recon_b_shift, gt_b_shift, sup, sup_shift
        )
        if sup is not None:
            g_b = 0.5 * rmse_grad(recon_b, gt_b, sup)
            for i in range(1, len(layers)):
                grads_layers[i] += (
                    active["l3"] * g_b * transmission(bones, skip=i - 1)
                )
        if sup_shift is not None:
            g_bs = 0.5 * rmse_grad(recon_b_shift, gt_b_shift, sup_shift)
            for i in range(1, len(layers)):
                g_layer = (
                    active["l3"] * g_bs * transmission(bones_shifted, skip=i - 1)
                )
                grads_layers[i] += warp_layer_adjoint(
                    g_layer * shifted.masks[i], shift.for_layer(i)
                )

    report = loss_hybrid(components, weights, stage, early_l3_from_delta)
    grads_params = [
        g * s * (1.0 - s) * m
        for g, s, m in zip(grads_layers, sig, model.masks)
    ]
    return report, grads_params


class MomentumOptimizer:
    """Plain gradient descent with classical momentum.

    Anything with a mutable lr attribute and step(params, grads) works in
    its place.
    """

    def __init__(self, lr: float, momentum: float = DEFAULT_MOMENTUM):
        if lr <= 0:
            raise ValueError(f"optimizer lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.lr = lr
        self.momentum = momentum
        self._velocity: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self._velocity is None:
            self._velocity = [np.zeros_like(p) for p in params]
        for v, p, g in zip(self._velocity, params, grads):
            v *= self.momentum
            v -= self.lr * g
            p += v


def optimize_case(
    model: LayerModel,
    critics: CriticSet | None = None,
    weights: LossWeights | None = None,
    shift_range: ShiftRange | None = None,
    steps: int = DEFAULT_CASE_STEPS,
    lr: float = DEFAULT_CASE_LR,
    *,
    momentum: float = DEFAULT_MOMENTUM,
    stage: str = STAGE2,
    rng: np.random.Generator | None = None,
    frozen_shift: ShiftParams | None = None,
    optimizer=None,
    early_l3_from_delta: bool = False,
) -> tuple[LayerStack, list[LossReport]]:
    """Gradient descent on one case, a fresh random shift each step.

    Returns the final emission and the per-step loss history. steps=0 is the
    untouched initial emission. A non-finite loss aborts with the step index.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    critics = critics or CriticSet.reference()
    weights = weights or LossWeights()
    shift_range = shift_range or ShiftRange()
    rng = rng or np.random.default_rng(0)
    optimizer = optimizer or MomentumOptimizer(lr, momentum)
    history: list[LossReport] = []
    for step_index in range(steps):
        if frozen_shift is not None:
            shift = frozen_shift
        else:
            shift = sample_shift(shift_range, rng, model.case.n_bones)
        report, grads = evaluate_objective(
            model, shift, weights, stage, critics, early_l3_from_delta
        )
        if not math.isfinite(report.total):
            raise DivergenceError(
                f"case {model.case.case_id}: non-finite loss at step {step_index}"
            )
        optimizer.step(model.params, grads)
        history.append(report)
    return model.emit(), history


@dataclass(frozen=True)
class TrainConfig:
    lr_g: float = 1e-4
    lr_s: float = 1e-4
    lr_d: float = 5e-4
    lr_halving_period: int = 100
    stage1_epochs: int = 300
    stage1_switch_m: int = 200
    stage2_epochs: int = 100
    batch_size: int = 12
    image_size: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        for name in (
            "lr_g",
            "lr_s",
            "lr_d",
            "lr_halving_period",
            "stage1_epochs",
            "stage1_switch_m",
            "stage2_epochs",
            "batch_size",
            "image_size",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig: {name} must be positive")
        if self.seed < 0:
            raise ValueError("TrainConfig: seed must be >= 0")
        if self.stage1_switch_m >= self.stage1_epochs:
            raise ValueError(
                "TrainConfig: stage1_switch_m must be < stage1_epochs"
            )

    def lr_scale(self, epoch: int) -> float:
        """Halving factor for a 1-based global epoch index."""
        return 0.5 ** ((epoch - 1) // self.lr_halving_period)

    def to_record(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_record(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass
class TrainResult:
    models: dict[str, LayerModel]
    critics: CriticSet
    log: list[dict]
    config: TrainConfig


def _batches(cases: list[SeparationCase], size: int):
    for start in range(0, len(cases), size):
        yield cases[start : start + size]


def train_two_stage(
    d1: list[SeparationCase],
    d2: list[SeparationCase],
    config: TrainConfig,
    critics: CriticSet | None = None,
    weights: LossWeights | None = None,
    shift_range: ShiftRange | None = None,
    early_l3_from_delta: bool = False,
) -> TrainResult:
    """Two-phase schedule over per-case models with shared critics.

    Phase 1 (generated cases only) starts without the shadow term; after the
    switchover epoch the shadow term joins and both critics begin updating.
    Phase 2 runs the full objective over the mixed dataset. Learning rates
    halve on a global epoch counter. The log has one record per epoch with
    every active loss component.
    """
    if not d1:
        raise ValueError("train_two_stage: d1 is empty")
    if not d2:
        raise ValueError("train_two_stage: d2 is empty")
    d2_ids = {case.case_id for case in d2}
    missing = [case.case_id for case in d1 if case.case_id not in d2_ids]
    if missing:
        raise ValueError(
            f"train_two_stage: d2 must contain every d1 case, missing {missing}"
        )
    for case in d1:
        if case.bone_gt is None:
            raise ValueError(
                f"train_two_stage: d1 case {case.case_id} lacks bone ground truth"
            )

    critics = critics or CriticSet.trainable()
    weights = weights or LossWeights()
    shift_range = shift_range or ShiftRange()
    rng = np.random.default_rng(config.seed)
    models = {case.case_id: LayerModel.default_init(case) for case in d2}
    optimizers = {
        case_id: MomentumOptimizer(config.lr_g) for case_id in models
    }

    log: list[dict] = []
    epoch = 0
    phases = [("d1", d1, config.stage1_epochs), ("d2", d2, config.stage2_epochs)]
    for dataset_name, dataset, n_epochs in phases:
        for _ in range(n_epochs):
            epoch += 1
            if dataset_name == "d1":
                stage = (
                    STAGE1_EARLY if epoch <= config.stage1_switch_m else STAGE1_LATE
                )
            else:
                stage = STAGE2
            step_critics = stage != STAGE1_EARLY
            scale = config.lr_scale(epoch)
            sums: dict[str, float] = {}
            totals = 0.0
            critic_shadow = []
            critic_supervision = []
            for batch in _batches(dataset, config.batch_size):
                shadow_entries = []
                supervision_entries = []
                for case in batch:
                    model = models[case.case_id]
                    opt = optimizers[case.case_id]
                    opt.lr = config.lr_g * scale
                    shift = sample_shift(shift_range, rng, case.n_bones)
                    report, grads = evaluate_objective(
                        model, shift, weights, stage, critics, early_l3_from_delta
                    )
                    if not math.isfinite(report.total):
                        raise DivergenceError(
                            f"case {case.case_id}: non-finite loss at epoch {epoch}"
                        )
                    opt.step(model.params, grads)
                    totals += report.total
                    for name, value in report.components().items():
                        sums[name] = sums.get(name, 0.0) + value
                    if step_critics:
                        emission = model.emit()
                        if model.union_mask.sum():
                            shadow_entries.append(
                                (emission.layers[0], model.union_mask, model.soft_ring)
                            )
                        supervision_entries.append((case.image, case.bone_masks))
                        if case.aux_real is not None:
                            supervision_entries.append(case.aux_real)
                if step_critics:
                    if critics.shadow.trainable and shadow_entries:
                        critic_shadow.append(
                            critics.shadow.step_batch(
                                shadow_entries, config.lr_d * scale
                            )
                        )
                    if critics.supervision.trainable and supervision_entries:
                        critic_supervision.append(
                            critics.supervision.step_batch(
                                supervision_entries, config.lr_s * scale
                            )
                        )
            n = len(dataset)
            record = {
                "epoch": epoch,
                "stage": stage,
                "dataset": dataset_name,
                "cases": n,
                "lr_g": config.lr_g * scale,
            }
            for name in sorted(sums):
                record[name] = sums[name] / n
            record["total"] = totals / n
            if critic_shadow:
                record["lr_d"] = config.lr_d * scale
                record["critic_shadow"] = float(np.mean(critic_shadow))
            if critic_supervision:
                record["lr_s"] = config.lr_s * scale
                record["critic_supervision"] = float(np.mean(critic_supervision))
            log.append(record)
    return TrainResult(models=models, critics=critics, log=log, config=config)


def save_separation(
    out_dir: str | Path, case_id: str, stack: LayerStack, meta: dict | None = None
) -> Path:
    """Persist a separation as one PNG per layer plus a JSON sidecar."""
    case_dir = Path(out_dir) / case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    layer_names = []
    for i, layer in enumerate(stack.layers):
        name = f"layer{i}.png"
        write_png(case_dir / name, layer)
        layer_names.append(name)
    sidecar = {"case_id": case_id, "layers": layer_names}
    if meta:
        sidecar.update(meta)
    path = case_dir / "separation.json"
    path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def save_training_log(path: str | Path, log: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path
