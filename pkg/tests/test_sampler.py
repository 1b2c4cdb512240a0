import dataclasses

import numpy as np
import pytest

from taskforge.core import generate_fixture
from taskforge.errors import SamplerError, ValidationError
from taskforge.rng import RngState
from taskforge.sampler import (
    ImageChain,
    OrderingMode,
    SamplerConfig,
    StructureLimits,
    TaskBundle,
    TaskStructure,
    chain_layout,
    check_guardrails,
    kind_from_dict,
    kind_to_dict,
    load_bundle,
    realize_chain,
    sample_bundle,
    sample_structure,
    save_bundle,
    structure_from_dict,
    structure_to_dict,
)
from taskforge.task_ops import (
    Boxes,
    Edges,
    Inpaint,
    Noise,
    Points,
    Segmentation,
    Skeleton,
    SuperRes,
    TransformKind,
    apply_generative,
    apply_transform,
    apply_transform_mask,
    render_discriminative,
    sample_palette,
    subsample_classes,
)

LIMITS64 = StructureLimits(side=64)
CFG64 = SamplerConfig(limits=LIMITS64)


class TestSampleStructure:
    def test_deterministic_per_seed(self):
        a = sample_structure(RngState(0), LIMITS64)
        b = sample_structure(RngState(0), LIMITS64)
        assert structure_to_dict(a) == structure_to_dict(b)

    def test_tmax_two_forces_single_task(self):
        for seed in range(20):
            s = sample_structure(RngState(seed), StructureLimits(t_max=2, side=64))
            assert s.base_length == 2

    def test_draws_are_grammar_valid(self):
        for seed in range(300):
            s = sample_structure(RngState(seed), LIMITS64)
            assert 2 <= s.base_length <= 15
            assert s.task_count >= 1

    def test_infeasible_limits_rejected(self):
        with pytest.raises(SamplerError):
            sample_structure(RngState(0), StructureLimits(t_max=1, side=64))

    def test_empty_structure_rejected(self):
        with pytest.raises(ValidationError):
            TaskStructure()


class TestRealizeChain:
    def test_worked_composition_example(self, fixture_records, palette3):
        """inpaint -> denoise -> image -> rot90 -> segmentation, composed by hand."""
        rec = fixture_records[0]
        inpaint = Inpaint(((5, 5, 20, 20),))
        noise = Noise(0.0, 18.0)
        structure = TaskStructure(
            generative=(inpaint, noise),
            transforms=(TransformKind.ROT90,),
            discriminative=(Segmentation(),),
        )
        rng = RngState(77)
        chain = realize_chain(rec, structure, palette3, {1, 2}, rng)

        # independent composition using the documented child-stream contract
        oracle_rng = RngState(77)
        noised = apply_generative(rec.image, noise, oracle_rng.child("gen", 1))
        inpainted = apply_generative(noised, inpaint, oracle_rng.child("gen", 0))
        rotated = apply_transform(rec.image, TransformKind.ROT90)
        seg_mask = apply_transform_mask(subsample_classes(rec.mask, {1, 2}), TransformKind.ROT90)
        seg = render_discriminative(seg_mask, Segmentation(), palette3)

        expected = [inpainted, noised, rec.image, rotated, seg]
        assert len(chain) == 5
        for got, want in zip(chain.images, expected):
            assert got.same_pixels(want)

    def test_transform_then_render_equals_render_then_transform(self, fixture_records, palette3):
        rec = fixture_records[1]
        structure = TaskStructure(
            transforms=(TransformKind.ROT180,), discriminative=(Edges(1),)
        )
        chain = realize_chain(rec, structure, palette3, set(rec.mask.present), RngState(1))
        rendered = render_discriminative(
            subsample_classes(rec.mask, set(rec.mask.present)), Edges(1), palette3
        )
        assert chain.images[-1].same_pixels(apply_transform(rendered, TransformKind.ROT180))

    def test_plain_segmentation_tail(self, fixture_records, palette3):
        rec = fixture_records[2]
        structure = TaskStructure(discriminative=(Segmentation(),))
        chain = realize_chain(rec, structure, palette3, set(rec.mask.present), RngState(0))
        direct = render_discriminative(rec.mask, Segmentation(), palette3)
        assert chain.images[-1].same_pixels(direct)

    def test_classwise_task_basis_ordering(self, fixture_records, palette3):
        rec = fixture_records[3]
        structure = TaskStructure(
            discriminative=(Segmentation(), Points(1)),
            classwise=True,
            ordering_mode=OrderingMode.TASK_BASIS,
        )
        layout = chain_layout(structure, [1, 2])
        labels = [(s.label, s.class_id) for s in layout[1:]]
        assert labels == [("segmentation", 1), ("segmentation", 2),
                          ("points_w1", 1), ("points_w1", 2)]
        chain = realize_chain(rec, structure, palette3, {1, 2}, RngState(2))
        assert len(chain) == 5

    def test_classwise_class_basis_ordering(self):
        structure = TaskStructure(
            discriminative=(Segmentation(), Points(1)),
            classwise=True,
            ordering_mode=OrderingMode.CLASS_BASIS,
        )
        labels = [(s.label, s.class_id) for s in chain_layout(structure, [1, 2])[1:]]
        assert labels == [("segmentation", 1), ("points_w1", 1),
                          ("segmentation", 2), ("points_w1", 2)]

    def test_classwise_expansion_over_tmax_rejected(self, fixture_records, palette3):
        structure = TaskStructure(
            discriminative=(Segmentation(), Edges(1), Boxes(1), Skeleton(1)),
            classwise=True,
        )
        with pytest.raises(SamplerError):
            realize_chain(fixture_records[0], structure, palette3, {1, 2, 3}, RngState(0), t_max=9)

    def test_degradation_stack_positions(self, fixture_records, palette3):
        rec = fixture_records[4]
        g0, g1 = SuperRes(16), Noise(0.0, 10.0)
        structure = TaskStructure(generative=(g0, g1), discriminative=(Segmentation(),))
        rng = RngState(9)
        chain = realize_chain(rec, structure, palette3, {1}, rng)
        stacked = apply_generative(
            apply_generative(rec.image, g1, RngState(9).child("gen", 1)), g0,
            RngState(9).child("gen", 0),
        )
        assert chain.images[0].same_pixels(stacked)  # full stack at position 0
        assert chain.images[2].same_pixels(rec.image)  # pivot untouched


class TestSampleBundle:
    def test_guardrails_hold_on_samples(self, fixture_records):
        for i in range(25):
            bundle = sample_bundle(fixture_records, RngState(3).child("b", i), CFG64)
            report = check_guardrails(bundle)
            assert report.passed, report.messages

    def test_budget_respected(self, fixture_records):
        cfg = dataclasses.replace(CFG64, image_budget=12)
        for i in range(10):
            bundle = sample_bundle(fixture_records, RngState(4).child("b", i), cfg)
            assert bundle.total_images <= 12

    def test_deterministic(self, fixture_records):
        a = sample_bundle(fixture_records, RngState(5), CFG64)
        b = sample_bundle(fixture_records, RngState(5), CFG64)
        for ca, cb in zip(a.all_chains(), b.all_chains()):
            assert ca.record_id == cb.record_id and ca.keep == cb.keep
            for x, y in zip(ca.images, cb.images):
                assert x.same_pixels(y)

    def test_distinct_records_within_bundle(self, fixture_records):
        for i in range(10):
            bundle = sample_bundle(fixture_records, RngState(6).child("b", i), CFG64)
            ids = [c.record_id for c in bundle.all_chains()]
            assert len(set(ids)) == len(ids)

    def test_single_class_dataset_trivial_cover(self):
        records = generate_fixture(4, 1, side=64, rng=RngState(2))
        bundle = sample_bundle(records, RngState(0), CFG64)
        assert check_guardrails(bundle).passed

    def test_too_few_records_error(self):
        records = generate_fixture(1, 2, side=64, rng=RngState(2))
        with pytest.raises(SamplerError):
            sample_bundle(records, RngState(0), CFG64)

    def test_query_is_most_degraded_element(self, fixture_records):
        for i in range(10):
            bundle = sample_bundle(fixture_records, RngState(8).child("b", i), CFG64)
            assert bundle.query.same_pixels(bundle.query_chain.images[0])
            assert len(bundle.output) == bundle.chain_len - 1


class TestGuardrailFaults:
    @pytest.fixture
    def bundle(self, fixture_records):
        return sample_bundle(fixture_records, RngState(12), CFG64)

    def test_recolored_output_fails_palette_check(self, bundle, fixture_records):
        other_palette = sample_palette(
            set().union(*(r.mask.present for r in fixture_records)), RngState(999)
        )
        rec = bundle.query_chain.record
        recolored = realize_chain(
            rec, bundle.structure, other_palette, set(bundle.query_chain.keep),
            RngState(bundle.query_chain.seed),
        )
        tampered = TaskBundle(
            context=bundle.context,
            query_chain=ImageChain(
                images=recolored.images,
                record_id=rec.record_id,
                keep=bundle.query_chain.keep,
                palette=bundle.palette,  # lies about its palette
                seed=bundle.query_chain.seed,
                record=rec,
            ),
            structure=bundle.structure,
            palette=bundle.palette,
        )
        report = check_guardrails(tampered)
        assert not report.passed
        has_disc = any(
            s.family == "discriminative"
            for s in chain_layout(bundle.structure, sorted(bundle.query_chain.keep))
        )
        if has_disc:
            assert not (report.shared_palette and report.composition_spot_check)
        else:
            assert not report.composition_spot_check

    def test_uncovered_keep_fails_class_cover(self, fixture_records, palette3):
        # build a bundle by hand whose query keeps a class no context chain kept
        structure = TaskStructure(discriminative=(Segmentation(),))
        pal = sample_palette({1, 2, 3}, RngState(1))
        ctx = realize_chain(fixture_records[0], structure, pal, {1}, RngState(100))
        query = realize_chain(fixture_records[1], structure, pal, {1, 3}, RngState(101))
        bundle = TaskBundle(context=(ctx,), query_chain=query, structure=structure, palette=pal)
        report = check_guardrails(bundle)
        assert not report.class_cover
        assert not report.passed

    def test_budget_violation_detected(self, bundle):
        report = check_guardrails(bundle, image_budget=bundle.total_images - 1)
        assert not report.budget


class TestSerialization:
    def test_kind_round_trip(self):
        kinds = [
            SuperRes(25), Inpaint(((1, 2, 3, 4), (5, 6, 7, 8))), Noise(1.5, 2.5),
            TransformKind.ROT270, Segmentation(), Edges(3), Boxes(5), Skeleton(1), Points(3),
        ]
        for kind in kinds:
            assert kind_from_dict(kind_to_dict(kind)) == kind

    def test_structure_round_trip(self):
        s = TaskStructure(
            generative=(Noise(0.0, 9.0),),
            transforms=(TransformKind.FLIP_H, TransformKind.ROT90),
            discriminative=(Edges(3), Segmentation()),
            ordering_mode=OrderingMode.CLASS_BASIS,
            classwise=True,
        )
        assert structure_from_dict(structure_to_dict(s)) == s

    def test_bundle_round_trip_bit_exact(self, fixture_records, tmp_path):
        bundle = sample_bundle(fixture_records, RngState(13), CFG64)
        save_bundle(bundle, tmp_path / "b0")
        loaded = load_bundle(tmp_path / "b0", {r.record_id: r for r in fixture_records})
        assert structure_to_dict(loaded.structure) == structure_to_dict(bundle.structure)
        assert loaded.palette == bundle.palette
        for ca, cb in zip(bundle.all_chains(), loaded.all_chains()):
            assert ca.keep == cb.keep and ca.seed == cb.seed
            for x, y in zip(ca.images, cb.images):
                assert x.same_pixels(y)
        assert check_guardrails(loaded).passed
