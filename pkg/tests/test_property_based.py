"""
Property-based tests for robustness and edge case discovery.

These tests use generated data to find edge cases and ensure robustness.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ba2kit.core.complexity import conv_flops, layer_complexity, relative_flop_from_fractions
from ba2kit.core.layers import ConvSpec, binarize
from ba2kit.core.models import BudgetSpec, ConstraintMode
from ba2kit.core.scoring import partial_score
from ba2kit.core.trainer import lambda_step
from ba2kit.core.utils import budget_id
from ba2kit.io.store import pack_switches, unpack_switches

try:
    from hypothesis import given, settings
    from hypothesis import strategies as st
    from hypothesis.strategies import composite, floats, integers, lists

    HYPOTHESIS_AVAILABLE = True
except ImportError:
    HYPOTHESIS_AVAILABLE = False

pytestmark = pytest.mark.skipif(not HYPOTHESIS_AVAILABLE, reason="hypothesis not available")


if HYPOTHESIS_AVAILABLE:

    @composite
    def switch_bits(draw, min_size=1, max_size=300):
        """Binary switch vectors."""
        return np.array(
            draw(lists(integers(0, 1), min_size=min_size, max_size=max_size)), dtype=np.uint8
        )

    @composite
    def conv_specs(draw):
        k = draw(st.sampled_from([1, 3, 5]))
        return ConvSpec(
            "l",
            draw(integers(1, 64)),
            draw(integers(1, 64)),
            kernel_size=k,
            stride=draw(integers(1, 2)),
            padding=k // 2,
        )

    unit = floats(0.0, 1.0, allow_nan=False)

    class TestSwitchProperties:
        """Switch packing and binarization."""

        @given(switch_bits())
        @settings(max_examples=100, deadline=None)
        def test_pack_round_trip(self, bits):
            packed = pack_switches(bits)
            assert len(packed) == (len(bits) + 7) // 8
            np.testing.assert_array_equal(unpack_switches(packed, len(bits)), bits)

        @given(lists(floats(-10, 10, allow_nan=False), min_size=1, max_size=50))
        def test_binarize_is_idempotent(self, values):
            once = binarize(np.array(values))
            np.testing.assert_array_equal(binarize(once), once)
            assert set(np.unique(once).tolist()) <= {0, 1}

        @given(switch_bits())
        def test_layer_complexity_in_unit_interval(self, bits):
            c = layer_complexity(bits)
            assert 0.0 <= c <= 1.0
            assert c == bits.sum() / len(bits)

    class TestMultiplierProperties:
        """Projected multiplier updates."""

        @given(
            lists(floats(0, 100, allow_nan=False), min_size=1, max_size=8).flatmap(
                lambda lam: st.tuples(
                    st.just(lam),
                    lists(floats(-1, 1, allow_nan=False), min_size=len(lam), max_size=len(lam)),
                )
            ),
            floats(1e-4, 10, allow_nan=False),
        )
        def test_lambdas_stay_nonnegative(self, pair, lr):
            lambdas, violations = pair
            spec = BudgetSpec(0.5, ConstraintMode.PER_LAYER, np.array(lambdas), lambda_lr=lr)
            stepped = lambda_step(spec, violations)
            assert np.all(stepped.lambdas >= 0)
            np.testing.assert_array_equal(spec.lambdas, lambdas)
            for old, new, v in zip(lambdas, stepped.lambdas, violations):
                if v > 0:
                    assert new >= old
                elif v < 0:
                    assert new <= old

    class TestComplexityProperties:
        """FLOP accounting."""

        @given(conv_specs(), integers(1, 16), integers(1, 16), st.data())
        def test_flops_monotone_in_active_channels(self, spec, h, w, data):
            active = data.draw(integers(0, spec.in_channels - 1))
            assert conv_flops(spec, h, w, active) < conv_flops(spec, h, w, active + 1)
            assert conv_flops(spec, h, w, 0) == 0

        @given(lists(unit, min_size=1, max_size=10))
        def test_relative_flop_at_most_one(self, fractions):
            value = relative_flop_from_fractions(fractions)
            assert 0.0 <= value <= 1.0 + 1e-12

    class TestScoreProperties:
        """Per-domain scores."""

        @given(unit, floats(1e-3, 2.0, allow_nan=False))
        def test_partial_score_range(self, error, e_max):
            _, partial = partial_score(error, e_max)
            assert 0.0 <= partial <= 1000.0
            if error >= e_max:
                assert partial == 0.0

        @given(unit, unit, floats(1e-3, 1.0, allow_nan=False))
        def test_lower_error_never_scores_less(self, a, b, e_max):
            lo, hi = sorted((a, b))
            assert partial_score(lo, e_max)[1] >= partial_score(hi, e_max)[1]

        @given(floats(1e-6, 1.0, allow_nan=False))
        def test_budget_id_round_trips(self, beta):
            assert budget_id(float(budget_id(beta))) == budget_id(beta)
