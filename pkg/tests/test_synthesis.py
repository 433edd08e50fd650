"""Tests for joint-space synthesis: scoring, shift planning, rendering,
and balanced dataset generation."""

import json

import numpy as np
import pytest

from layersep.geometry import (
    LayerShift,
    ShiftParams,
    ShiftRange,
    compose_shifts,
    shift_stack,
    warp_layer,
    warp_mask,
)
from layersep.imaging import LayerStack, read_png, reconstruct
from layersep.phantom import PhantomConfig, make_phantom
from layersep.synthesis import (
    DEFAULT_JOINT_AXIS,
    DEFAULT_PIXEL_SPACING_MM,
    LOWER_LAYER,
    NORMAL_JSW_MM,
    UPPER_LAYER,
    JswAnnotation,
    SynthesisPlan,
    SynthesisSource,
    generate_balanced_dataset,
    jsw_from_shift,
    jsw_to_shift,
    make_plan,
    save_synthesis_dataset,
    svdh_like_score,
    synthesize,
)

SMOOTH_FIELD = dict(
    soft_sigma_frac=(2.0, 3.0), soft_range=(0.15, 0.3), noise_sigma=0.0005
)


def smooth_phantom(seed=0, **overrides):
    overrides.setdefault("size", 64)
    cfg = PhantomConfig(**SMOOTH_FIELD, **overrides)
    return make_phantom(cfg, seed=seed)


def mask_centroid(mask):
    rows, cols = np.nonzero(mask > 0.5)
    return np.array([rows.mean(), cols.mean()])


class TestSvdhLikeScore:
    def test_published_examples(self):
        assert svdh_like_score(1.75) == 0
        assert svdh_like_score(1.00) == 2  # 57.1% of normal
        assert svdh_like_score(0.30) == 4  # 17.1% of normal

    def test_boundaries_take_less_severe_grade(self):
        normal = NORMAL_JSW_MM
        assert svdh_like_score(normal) == 0
        assert svdh_like_score(0.75 * normal) == 1
        assert svdh_like_score(0.50 * normal) == 2
        assert svdh_like_score(0.25 * normal) == 3
        assert svdh_like_score(0.25 * normal - 1e-9) == 4

    def test_monotone_in_width(self):
        widths = np.linspace(0.0, 2.5, 201)
        scores = [svdh_like_score(float(w)) for w in widths]
        assert all(a >= b for a, b in zip(scores, scores[1:]))
        assert scores[0] == 4 and scores[-1] == 0

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            svdh_like_score(-0.1)
        with pytest.raises(ValueError):
            svdh_like_score(np.nan)
        with pytest.raises(ValueError):
            svdh_like_score(1.0, normal_jsw_mm=0.0)


class TestJswAnnotation:
    def test_grade_computed_on_construction(self):
        ann = JswAnnotation(jsw_mm=1.0)
        assert ann.svdh_like == 2
        assert ann.axis == DEFAULT_JOINT_AXIS

    def test_consistent_explicit_grade_accepted(self):
        ann = JswAnnotation(jsw_mm=1.75, svdh_like=0)
        assert ann.svdh_like == 0

    def test_inconsistent_grade_rejected(self):
        with pytest.raises(ValueError, match="inconsistent"):
            JswAnnotation(jsw_mm=1.75, svdh_like=3)

    def test_validation(self):
        with pytest.raises(ValueError):
            JswAnnotation(jsw_mm=-0.5)
        with pytest.raises(ValueError):
            JswAnnotation(jsw_mm=1.0, pixel_spacing_mm=0.0)
        with pytest.raises(ValueError, match="unit length"):
            JswAnnotation(jsw_mm=1.0, axis=(0.0, -2.0))

    def test_jsw_px(self):
        ann = JswAnnotation(jsw_mm=1.75, pixel_spacing_mm=0.175)
        assert ann.jsw_px == pytest.approx(10.0, abs=1e-12)

    def test_record_round_trip(self):
        ann = JswAnnotation(jsw_mm=0.9, pixel_spacing_mm=0.2, axis=(1.0, 0.0))
        assert JswAnnotation.from_record(ann.to_record()) == ann


class TestJswToShift:
    def test_halving_splits_five_pixels_symmetrically(self):
        shift = jsw_to_shift(1.75, 0.875, 0.175)
        up = shift.for_layer(UPPER_LAYER)
        lo = shift.for_layer(LOWER_LAYER)
        # Closing by 5 px total: upper moves 2.5 px toward the joint (down,
        # against the distal axis), lower 2.5 px the other way.
        assert up.theta == 0.0 and lo.theta == 0.0
        assert (up.x, up.y) == pytest.approx((0.0, 2.5), abs=1e-12)
        assert (lo.x, lo.y) == pytest.approx((0.0, -2.5), abs=1e-12)

    def test_same_width_is_identity(self):
        shift = jsw_to_shift(1.2, 1.2)
        assert all(s.is_identity() for s in shift.entries.values())

    def test_round_trip_recovers_target(self):
        for current, target in [(1.75, 0.3), (0.6, 1.4), (1.0, 1.0)]:
            shift = jsw_to_shift(current, target)
            assert jsw_from_shift(current, shift) == pytest.approx(target, abs=1e-12)

    def test_custom_axis(self):
        shift = jsw_to_shift(1.75, 2.1, 0.175, axis=(1.0, 0.0))
        up = shift.for_layer(UPPER_LAYER)
        assert (up.x, up.y) == pytest.approx((1.0, 0.0), abs=1e-12)

    def test_rejects_negative_target(self):
        with pytest.raises(ValueError):
            jsw_to_shift(1.75, -0.1)


class TestSynthesize:
    def test_identity_matches_plain_reconstruction(self):
        stack = smooth_phantom(seed=3).gt_stack
        out = synthesize(stack, ShiftParams.identity())
        assert np.array_equal(out, reconstruct(stack))

    def test_upper_bone_centroid_moves_by_delta(self):
        phantom = smooth_phantom(seed=4)
        delta = 3.0
        ax, ay = DEFAULT_JOINT_AXIS
        shift = ShiftParams({UPPER_LAYER: LayerShift(x=ax * delta, y=ay * delta)})
        synthesize(phantom.gt_stack, shift)  # must render without error
        before = mask_centroid(phantom.masks[UPPER_LAYER])
        after = mask_centroid(warp_mask(phantom.masks[UPPER_LAYER], shift.for_layer(UPPER_LAYER)))
        moved = after - before  # (row, col)
        assert moved[0] == pytest.approx(ay * delta, abs=0.5)
        assert moved[1] == pytest.approx(ax * delta, abs=0.5)

    def test_matches_manual_layer_composition(self):
        stack = smooth_phantom(seed=5).gt_stack
        shift = ShiftParams(
            {
                LOWER_LAYER: LayerShift(theta=0.01, x=-1.3, y=2.1),
                UPPER_LAYER: LayerShift(theta=-0.02, x=0.7, y=-1.6),
            }
        )
        out = synthesize(stack, shift)
        transmission = 1.0 - stack.layers[0]
        for i in (LOWER_LAYER, UPPER_LAYER):
            layer = warp_layer(stack.layers[i], shift.for_layer(i))
            layer = np.clip(layer, 0.0, 1.0) * warp_mask(stack.masks[i], shift.for_layer(i))
            transmission = transmission * (1.0 - layer)
        manual = np.clip(1.0 - transmission, 0.0, 1.0)
        assert np.sqrt(np.mean((out - manual) ** 2)) <= 1e-6

    def test_closing_to_contact(self):
        phantom = smooth_phantom(seed=6)  # default jsw 1.75 mm = 10 px gap
        shift = jsw_to_shift(phantom.true_jsw_mm, 0.0, phantom.pixel_spacing_mm)
        # Measure the new width by the displacement of each bone's mask
        # centroid projected on the joint axis.
        ax, ay = DEFAULT_JOINT_AXIS
        deltas = {}
        for i in (LOWER_LAYER, UPPER_LAYER):
            before = mask_centroid(phantom.masks[i])
            after = mask_centroid(warp_mask(phantom.masks[i], shift.for_layer(i)))
            moved = after - before
            deltas[i] = moved[1] * ax + moved[0] * ay
        measured_px = (
            phantom.true_jsw_mm / phantom.pixel_spacing_mm
            + deltas[UPPER_LAYER]
            - deltas[LOWER_LAYER]
        )
        assert abs(measured_px) <= 0.5

    def test_closure_additivity(self):
        # Sequential resampling accumulates interpolation error; fractional
        # parts are kept away from 0.5 where nearest-neighbour mask warps
        # become genuinely non-additive.
        stack = smooth_phantom(seed=7).gt_stack
        first = ShiftParams(
            {
                LOWER_LAYER: LayerShift(theta=0.004, x=1.2, y=-0.7),
                UPPER_LAYER: LayerShift(theta=-0.006, x=-0.8, y=1.3),
            }
        )
        second = ShiftParams(
            {
                LOWER_LAYER: LayerShift(theta=-0.003, x=0.6, y=0.9),
                UPPER_LAYER: LayerShift(theta=0.005, x=1.1, y=-0.4),
            }
        )
        composed = ShiftParams(
            {
                i: compose_shifts(first.for_layer(i), second.for_layer(i))
                for i in (LOWER_LAYER, UPPER_LAYER)
            }
        )
        sequential = synthesize(shift_stack(stack, first), second)
        direct = synthesize(stack, composed)
        assert np.sqrt(np.mean((sequential - direct) ** 2)) <= 0.02

    def test_closure_exact_for_integer_translations(self):
        stack = smooth_phantom(seed=8).gt_stack
        first = ShiftParams({LOWER_LAYER: LayerShift(x=2.0, y=-1.0)})
        second = ShiftParams({LOWER_LAYER: LayerShift(x=-1.0, y=3.0)})
        composed = ShiftParams(
            {LOWER_LAYER: compose_shifts(first.for_layer(LOWER_LAYER), second.for_layer(LOWER_LAYER))}
        )
        sequential = synthesize(shift_stack(stack, first), second)
        direct = synthesize(stack, composed)
        assert np.allclose(sequential, direct, atol=1e-12)


class TestSynthesisPlan:
    def test_record_round_trip(self):
        plan = make_plan("case-1", 1.75, 0.6)
        again = SynthesisPlan.from_record(plan.to_record())
        assert again == plan
        assert again.delta_mm == pytest.approx(-1.15, abs=1e-12)

    def test_annotation_carries_target_exactly(self):
        plan = make_plan("case-1", 1.75, 0.437)
        assert plan.annotation.jsw_mm == 0.437
        assert plan.annotation.svdh_like == svdh_like_score(0.437)

    def test_shift_range_enforced(self):
        tight = ShiftRange(x_range=(-1.0, 1.0), y_range=(-1.0, 1.0))
        with pytest.raises(ValueError, match="exceeds"):
            make_plan("case-1", 1.75, 0.0, shift_range=tight)


def build_sources(n=4, size=32):
    sources = []
    for k in range(n):
        phantom = smooth_phantom(seed=100 + k, size=size)
        sources.append(
            SynthesisSource(
                case_id=f"ph{k}",
                stack=phantom.gt_stack,
                annotation=JswAnnotation(
                    jsw_mm=phantom.true_jsw_mm,
                    pixel_spacing_mm=phantom.pixel_spacing_mm,
                ),
            )
        )
    return sources


class TestGenerateBalancedDataset:
    def test_zero_per_source_is_empty(self):
        assert generate_balanced_dataset(build_sources(2), 0) == []

    def test_uniform_bins_within_tolerance(self):
        samples = generate_balanced_dataset(build_sources(4), 100, seed=11)
        assert len(samples) == 400
        counts = np.bincount([s.annotation.svdh_like for s in samples], minlength=5)
        assert counts.sum() == 400
        for count in counts:
            assert abs(count - 80) <= 10

    def test_same_seed_reproduces_everything(self):
        a = generate_balanced_dataset(build_sources(2), 10, seed=5)
        b = generate_balanced_dataset(build_sources(2), 10, seed=5)
        assert [s.sample_id for s in a] == [s.sample_id for s in b]
        assert [s.plan.to_record() for s in a] == [s.plan.to_record() for s in b]
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.image, sb.image)

    def test_annotation_soundness(self):
        # The recorded width must be the generative target, recoverable
        # exactly from the plan's shift by the displacement-difference rule.
        for sample in generate_balanced_dataset(build_sources(2), 15, seed=3):
            plan = sample.plan
            assert sample.annotation.jsw_mm == plan.target_jsw_mm
            recovered = jsw_from_shift(
                plan.source_jsw_mm,
                plan.shift,
                sample.annotation.pixel_spacing_mm,
                sample.annotation.axis,
            )
            assert recovered == pytest.approx(plan.target_jsw_mm, abs=1e-12)
            assert sample.annotation.svdh_like == svdh_like_score(sample.annotation.jsw_mm)

    def test_weighted_distribution(self):
        samples = generate_balanced_dataset(
            build_sources(2), 10, jsw_distribution={4: 1.0}, seed=2
        )
        assert all(s.annotation.svdh_like == 4 for s in samples)

    def test_shifts_respect_default_range(self):
        for sample in generate_balanced_dataset(build_sources(2), 20, seed=9):
            for s in sample.plan.shift.entries.values():
                assert abs(s.x) <= 8.0 and abs(s.y) <= 8.0 and s.theta == 0.0

    def test_source_without_annotation_rejected(self):
        src = build_sources(1)[0]
        src.annotation = None
        with pytest.raises(ValueError, match="annotation"):
            generate_balanced_dataset([src], 5)

    def test_bad_distribution_rejected(self):
        with pytest.raises(ValueError):
            generate_balanced_dataset(build_sources(1), 5, jsw_distribution=[1, 2, 3])
        with pytest.raises(ValueError):
            generate_balanced_dataset(build_sources(1), 5, jsw_distribution={0: -1.0})


class TestSaveSynthesisDataset:
    def test_writes_pngs_and_manifest(self, tmp_path):
        samples = generate_balanced_dataset(build_sources(2), 3, seed=7)
        manifest = save_synthesis_dataset(tmp_path, samples)
        lines = manifest.read_text().strip().splitlines()
        assert len(lines) == len(samples)
        for line, sample in zip(lines, samples):
            record = json.loads(line)
            assert record["id"] == sample.sample_id
            assert record["source_id"] == sample.plan.source_id
            assert record["jsw_mm"] == pytest.approx(sample.annotation.jsw_mm)
            assert record["svdh_like"] == sample.annotation.svdh_like
            assert record["pixel_spacing_mm"] == sample.annotation.pixel_spacing_mm
            assert {r["layer"] for r in record["shift"]} == {1, 2}
            stored = read_png(tmp_path / f"{sample.sample_id}.png")
            assert np.allclose(stored, sample.image, atol=1e-4)
