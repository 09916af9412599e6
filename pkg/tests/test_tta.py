"""Augmentation-loop tests: identity anchoring, remapping exactness, nested
sweep monotonicity, and the rotation/permutation policy split."""
import numpy as np
import pytest

from tsp_tta.decoding import BeamConfig, decode_greedy
from tsp_tta.model import INPUT_COORDINATES, ModelConfig, init_params
from tsp_tta.oracles import oracle_lengths
from tsp_tta.tsp import generate_instances, map_tour_to_original, tour_length
from tsp_tta.tta import (
    POLICY_PERMUTATION,
    POLICY_ROTATION,
    POLICY_ROTATION_PERMUTATION,
    TtaConfig,
    gap_vs_m_sweep,
    make_variants,
    parallel_map,
    tta_solve,
    write_sweep_csv,
)

CFG = ModelConfig(
    n_cities=8, d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=32
)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, 42)


@pytest.fixture(scope="module")
def instances():
    return generate_instances(8, 12, np.random.default_rng(0))


class TestConfig:
    def test_augment_size_floor(self):
        with pytest.raises(ValueError):
            TtaConfig(augment_size=0)

    def test_policy_names(self):
        with pytest.raises(ValueError):
            TtaConfig(policy="mirror")
        for policy in (POLICY_PERMUTATION, POLICY_ROTATION, POLICY_ROTATION_PERMUTATION):
            TtaConfig(policy=policy)


class TestVariants:
    def test_variant_zero_is_the_original_object(self, instances):
        variants = make_variants(instances[0], 5, POLICY_PERMUTATION, 3)
        assert variants[0].instance is instances[0]
        assert variants[0].perm.is_identity()

    def test_permutation_prefix_property(self, instances):
        small = make_variants(instances[0], 8, POLICY_PERMUTATION, 9)
        large = make_variants(instances[0], 32, POLICY_PERMUTATION, 9)
        for a, b in zip(small, large[:8]):
            assert np.array_equal(a.perm.sigma, b.perm.sigma)
            assert np.array_equal(a.instance.coords, b.instance.coords)

    def test_rotation_angles_equally_spaced(self, instances):
        variants = make_variants(instances[0], 4, POLICY_ROTATION, 0)
        # quarter turns about the center return to start after four steps
        twice = make_variants(instances[0], 2, POLICY_ROTATION, 0)
        half_turn = variants[2].instance.coords
        assert np.allclose(twice[1].instance.coords, half_turn, atol=1e-12)


class TestTtaSolve:
    def test_m1_is_bitwise_greedy(self, params, instances):
        for inst in instances:
            greedy = decode_greedy(inst, params, CFG)
            out = tta_solve(inst, params, CFG, TtaConfig(augment_size=1, seed=5))
            assert np.array_equal(out.best.tour.order, greedy.tour.order)
            assert out.best.length == greedy.length
            assert out.best.log_prob == greedy.log_prob
            assert out.variant_of_best == 0

    def test_outcome_invariants(self, params, instances):
        for i, inst in enumerate(instances):
            out = tta_solve(inst, params, CFG, TtaConfig(augment_size=16, seed=100 + i))
            assert out.all_lengths.shape == (16,)
            assert out.best.length == out.all_lengths.min()
            assert out.best.length == out.all_lengths[out.variant_of_best]
            assert sorted(out.best.tour.order.tolist()) == list(range(8))
            # never worse than the plain greedy anchored at variant 0
            assert out.best.length <= out.all_lengths[0]

    def test_remapped_lengths_preserved(self, params, instances):
        inst = instances[0]
        variants = make_variants(inst, 12, POLICY_PERMUTATION, 7)
        for variant in variants[1:]:
            decoded = decode_greedy(variant.instance, params, CFG)
            mapped = map_tour_to_original(decoded.tour, variant.perm)
            assert tour_length(inst, mapped) == pytest.approx(
                decoded.length, abs=1e-12
            )

    def test_rotation_policy_lengths_identical_in_matrix_mode(self, params, instances):
        out = tta_solve(
            instances[0], params, CFG, TtaConfig(augment_size=8, policy=POLICY_ROTATION, seed=1)
        )
        assert np.abs(out.all_lengths - out.all_lengths[0]).max() <= 1e-12

    def test_rotation_policy_varies_in_coordinate_mode(self, instances):
        cfg = ModelConfig(
            n_cities=8, d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1,
            d_ff=32, input_mode=INPUT_COORDINATES,
        )
        params_c = init_params(cfg, 43)
        out = tta_solve(
            instances[0], params_c, cfg, TtaConfig(augment_size=16, policy=POLICY_ROTATION, seed=1)
        )
        assert np.unique(np.round(out.all_lengths, 12)).size > 1

    def test_beam_inside_tta(self, params, instances):
        out = tta_solve(
            instances[0], params, CFG, TtaConfig(augment_size=4, seed=2),
            beam=BeamConfig(4),
        )
        assert out.best.length == out.all_lengths.min()

    def test_size_mismatch_rejected(self, params):
        small = generate_instances(5, 1, np.random.default_rng(1))[0]
        with pytest.raises(ValueError):
            tta_solve(small, params, CFG, TtaConfig(augment_size=2, seed=0))

    def test_jobs_do_not_change_results(self, params, instances):
        inst = instances[3]
        a = tta_solve(inst, params, CFG, TtaConfig(augment_size=70, seed=11), jobs=1)
        b = tta_solve(inst, params, CFG, TtaConfig(augment_size=70, seed=11), jobs=3)
        assert np.array_equal(a.all_lengths, b.all_lengths)
        assert a.variant_of_best == b.variant_of_best


class TestSweep:
    def test_nested_sweep_monotone(self, params, instances):
        opt = oracle_lengths(instances, "held-karp")
        rows, best = gap_vs_m_sweep(
            instances, params, CFG, [1, 2, 4, 8, 16], seed=3, opt_lens=opt
        )
        # per-instance best lengths are prefix minima: exactly non-increasing
        assert (np.diff(best, axis=0) <= 0).all()
        gaps = [r.mean_gap for r in rows]
        assert all(b <= a for a, b in zip(gaps, gaps[1:]))
        assert all(r.mean_gap >= 0 for r in rows)

    def test_wall_time_accumulates(self, params, instances):
        opt = oracle_lengths(instances[:4], "held-karp")
        rows, _ = gap_vs_m_sweep(
            instances[:4], params, CFG, [1, 4, 16], seed=4, opt_lens=opt[:4]
        )
        times = [r.wall_time_ms for r in rows]
        assert times[0] > 0
        assert times[0] < times[1] < times[2]

    def test_m_values_validation(self, params, instances):
        opt = oracle_lengths(instances[:2], "held-karp")
        with pytest.raises(ValueError):
            gap_vs_m_sweep(instances[:2], params, CFG, [4, 2], seed=0, opt_lens=opt[:2])

    def test_csv_shape(self, params, instances, tmp_path):
        opt = oracle_lengths(instances[:3], "held-karp")
        rows, _ = gap_vs_m_sweep(
            instances[:3], params, CFG, [1, 2], seed=0, opt_lens=opt[:3]
        )
        out = tmp_path / "sweep.csv"
        write_sweep_csv(out, rows, [1, 2])
        lines = out.read_text().splitlines()
        assert lines[0] == "# m_values=1,2"
        assert lines[1] == "M,mean_gap,std_gap,mean_len,wall_time_ms"
        assert len(lines) == 4


def test_parallel_map_preserves_order():
    assert parallel_map(lambda x: x * x, [3, 1, 2], jobs=2) == [9, 1, 4]
