"""Symbolic calculus tests: derivatives, freezing, strict evaluation, parsing."""

import math

import numpy as np
import pytest

from fbmseries.functional import (
    Const,
    FbmSample,
    GridPath,
    Indicator,
    OffGridTimeError,
    PolyInVar,
    PhiMoment,
    RampMax,
    Sum,
    TimeGrid,
    TimeIntB,
    TimeIntBSq,
    UIntegral,
    UnsupportedNodeError,
    WienerInt,
    ZERO,
    directional,
    evaluate,
    expand,
    fbm_sample,
    fbm_times,
    free_vars,
    freeze,
    grid_partials,
    horizon,
    is_deterministic,
    is_discrete,
    make_exp,
    make_power,
    make_product,
    make_sum,
    malliavin,
    path_from_dict,
    ramp_max,
    scale,
    time_int_b,
    to_sexpr,
)
from fbmseries.kernel import PiecewisePoly, phi_antiderivative
from fbmseries.parser import ParseError, parse

from oracles import quad_phi_moment

GRID = TimeGrid((0.0, 0.25, 0.5, 0.75, 1.0))


def sample_path(seed=0, times=GRID.times, n=1):
    """Synthetic rough path on the grid (any values work for calculus checks)."""
    rng = np.random.default_rng(seed)
    vals = np.cumsum(rng.normal(0.0, 0.3, size=(n, len(times))), axis=-1)
    vals[..., 0] = 0.0
    if n == 1:
        return GridPath(times, vals[0])
    return GridPath(times, vals)


class TestConstructors:
    def test_b0_folds_to_zero(self):
        assert fbm_sample(0.0) == ZERO

    def test_product_and_sum_folding(self):
        e = make_product([Const(2.0), Const(3.0), fbm_sample(1.0)])
        assert e == make_product([Const(6.0), fbm_sample(1.0)])
        assert make_sum([ZERO, ZERO]) == ZERO
        assert make_product([ZERO, fbm_sample(1.0)]) == ZERO
        assert make_power(fbm_sample(1.0), 0) == Const(1.0)

    def test_ramp_folding(self):
        assert ramp_max(1.0, (0.3, 0.6)) == Const(0.4)
        assert ramp_max(0.5, (0.9, "u")) == ZERO
        r = ramp_max(1.0, (0.3, "u"))
        assert isinstance(r, RampMax) and r.args == (0.3, "u")

    def test_time_int_folding(self):
        assert time_int_b((0.8,), 0.5) == ZERO
        assert time_int_b((0.9, "u"), 0.5) == ZERO
        assert isinstance(time_int_b((0.1,), 0.5), TimeIntB)


class TestQueries:
    def test_fbm_times_and_horizon(self):
        e = parse("B(0.5)^2*B(1)+IB(0,0.75)")
        assert fbm_times(e) == {0.5, 1.0}
        assert horizon(e) == 1.0

    def test_discrete_and_deterministic(self):
        assert is_discrete(parse("B(0.5)^2*B(1)"))
        assert is_discrete(parse("exp(B(1))"))
        assert not is_discrete(parse("IB2(0,1)"))
        assert is_deterministic(Indicator("u", 0.0, 1.0))
        assert not is_deterministic(parse("B(0.25)"))

    def test_free_vars(self):
        d = malliavin(parse("IB2(0,1)"), "u")
        assert free_vars(d) == {"u"}


class TestMalliavin:
    def test_sample_rule(self):
        assert malliavin(fbm_sample(0.7), "u") == Indicator("u", 0.0, 0.7)

    def test_wiener_rule(self):
        w = WienerInt(PiecewisePoly.from_poly((1.0, 2.0), 0.0, 1.0), 0.0, 1.0)
        d = malliavin(w, "u")
        assert d == make_product([PolyInVar((1.0, 2.0), "u"), Indicator("u", 0.0, 1.0)])

    def test_time_integral_rules(self):
        assert malliavin(time_int_b((0.2,), 1.0), "u") == RampMax(1.0, (0.2, "u"))
        d = malliavin(TimeIntBSq(0.0, 1.0), "u")
        assert d == scale(TimeIntB((0.0, "u"), 1.0), 2.0)

    def test_chain_rule_exp(self):
        f = make_exp(fbm_sample(1.0))
        d = malliavin(f, "u")
        assert d == make_product([f, Indicator("u", 0.0, 1.0)])

    def test_second_derivative_of_cubic(self):
        # D_u D_v (B_t^2 B_T): six chain terms collapse to three products
        f = parse("B(0.5)^2*B(1)")
        d2 = malliavin(malliavin(f, "v"), "u")
        path = sample_path(1)
        bt, bT = path.value(0.5), path.value(1.0)
        for u in (0.1, 0.4, 0.6, 0.9):
            for v in (0.2, 0.45, 0.8):
                got = evaluate(d2, path=path, bindings={"u": u, "v": v})
                want = (2.0 * bT * (u <= 0.5) * (v <= 0.5)
                        + 2.0 * bt * (u <= 0.5) * (v <= 1.0)
                        + 2.0 * bt * (v <= 0.5) * (u <= 1.0))
                assert got == pytest.approx(want, rel=1e-12)

    def test_finite_difference_grid_directions(self):
        # bump every sample at times >= tau and compare with the directional rule
        exprs = [parse("B(0.5)^2*B(1)"), parse("exp(B(0.75))"),
                 parse("B(0.25)*B(0.75)+2*B(1)^3")]
        path = sample_path(2)
        eps = 1e-6
        for f in exprs:
            for tau in (0.25, 0.5, 1.0):
                up = GridPath(path.times, path.values
                              + eps * (np.asarray(path.times) >= tau))
                dn = GridPath(path.times, path.values
                              - eps * (np.asarray(path.times) >= tau))
                fd = (evaluate(f, path=up) - evaluate(f, path=dn)) / (2 * eps)
                sym = evaluate(directional(f, tau), path=path)
                assert fd == pytest.approx(sym, rel=1e-6, abs=1e-6)

    def test_finite_difference_continuous_functionals(self):
        # the bump direction is the indicator 1_{[u, .]}; its boundary node
        # carries half trapezoid weight, which makes the comparison exact
        f = make_sum([TimeIntBSq(0.0, 1.0), time_int_b((0.25,), 1.0)])
        path = sample_path(3, times=tuple(np.linspace(0.0, 1.0, 41)))
        eps = 1e-6
        ts = np.asarray(path.times)
        for u in (ts[14], ts[20], ts[33]):
            bump = eps * ((ts > u) + 0.5 * (ts == u))
            fd = (evaluate(f, path=GridPath(path.times, path.values + bump))
                  - evaluate(f, path=GridPath(path.times, path.values - bump))) / (2 * eps)
            sym = evaluate(malliavin(f, "u"), path=path, bindings={"u": u})
            assert fd == pytest.approx(sym, rel=1e-6, abs=1e-6)

    def test_third_order_mixed_finite_difference(self):
        # |q| = 3 mixed grid partial against a third-order central difference
        f = parse("B(0.5)^3*B(1)^2")
        path = sample_path(5)
        eps = 1e-4
        taus = (0.5, 0.5, 1.0)

        def bumped(signs):
            v = path.values.copy()
            for s, tau in zip(signs, taus):
                v = v + s * eps * (np.asarray(path.times) >= tau)
            return evaluate(f, path=GridPath(path.times, v))

        fd = 0.0
        for s1 in (+1, -1):
            for s2 in (+1, -1):
                for s3 in (+1, -1):
                    fd += s1 * s2 * s3 * bumped((s1, s2, s3))
        fd /= (2 * eps) ** 3
        sym = f
        for tau in taus:
            sym = directional(sym, tau)
        assert fd == pytest.approx(evaluate(sym, path=path), rel=1e-5, abs=1e-5)

    def test_malliavin_of_residual_integral_unsupported(self):
        node = UIntegral((fbm_sample(0.5),), "u", 0.0, 1.0, "v")
        with pytest.raises(UnsupportedNodeError):
            malliavin(node, "w")


class TestFreeze:
    @pytest.mark.parametrize("src", [
        "B(0.5)^2*B(1)",
        "exp(B(1))",
        "IB(0,1)",
        "IB2(0,1)",
        "WI(2*s+1;0,1)",
        "B(0.25)*IB(0.25,0.75)+IB2(0.5,1)",
    ])
    @pytest.mark.parametrize("r", [0.0, 0.25, 0.5, 1.0])
    def test_freeze_equals_stopped_path(self, src, r):
        # freezing the functional == evaluating on the path stopped at r
        f = parse(src)
        path = sample_path(4)
        stopped_vals = np.array([path.value(min(t, r)) for t in path.times])
        stopped = GridPath(path.times, stopped_vals)
        got = evaluate(freeze(f, r), path=path)
        want = evaluate(f, path=stopped)
        assert got == pytest.approx(want, rel=1e-12, abs=1e-12)

    def test_freeze_idempotent(self):
        for src in ("B(0.5)^2*B(1)", "IB(0,1)", "IB2(0.25,1)", "exp(IB(0,0.5))"):
            f = parse(src)
            once = freeze(f, 0.5)
            twice = freeze(once, 0.5)
            assert once == twice

    def test_freeze_at_zero_kills_time_integrals(self):
        assert freeze(parse("IB(0,1)"), 0.0) == ZERO
        assert freeze(parse("IB2(0,1)"), 0.0) == ZERO
        assert freeze(parse("B(0.7)"), 0.0) == ZERO

    def test_freeze_symbolic_lower_limit(self):
        # (int_{max(a,u)}^b B ds frozen at r) = int_{max(a,u)}^r B ds + B_r (b - max(a,u,r))^+
        e = TimeIntB((0.25, "u"), 1.0)
        fr = freeze(e, 0.5)
        path = sample_path(6)
        for u in (0.0, 0.25, 0.5, 0.75, 1.0):
            stopped = GridPath(path.times,
                               np.array([path.value(min(t, 0.5)) for t in path.times]))
            got = evaluate(fr, path=path, bindings={"u": u})
            want = evaluate(e, path=stopped, bindings={"u": u})
            assert got == pytest.approx(want, rel=1e-12, abs=1e-12)


class TestEvaluate:
    def test_off_grid_strictness(self):
        path = sample_path(0)
        with pytest.raises(OffGridTimeError):
            evaluate(fbm_sample(0.3), path=path)
        with pytest.raises(OffGridTimeError):
            evaluate(time_int_b((0.1,), 1.0), path=path)

    def test_vectorized_matches_scalar(self):
        paths = sample_path(9, n=64)
        f = parse("B(0.5)^2*B(1)+exp(B(0.25))")
        vec = evaluate(f, path=paths)
        for i in (0, 17, 63):
            single = GridPath(paths.times, paths.values[i])
            assert vec[i] == pytest.approx(evaluate(f, path=single), rel=1e-14)

    def test_wiener_integral_linearity(self):
        path = sample_path(10)
        w1 = parse("WI(1;0,1)")
        increments = path.value(1.0) - path.value(0.0)
        assert evaluate(w1, path=path) == pytest.approx(increments, rel=1e-12)

    def test_phi_moment_indicator(self):
        node = PhiMoment((Indicator("u", 0.0, 0.5),), "u", 0.0, 1.0, "v")
        got = evaluate(node, h=0.7, bindings={"v": 0.8})
        assert got == pytest.approx(phi_antiderivative(0.0, 0.5, 0.8, 0.7), rel=1e-13)

    def test_phi_moment_ramp_with_other_var(self):
        # breakpoint of the ramp depends on a second bound variable
        node = PhiMoment((RampMax(1.0, (0.2, "u", "w")),), "u", 0.0, 1.0, "v")
        h, v, wv = 0.72, 0.4, 0.55
        got = evaluate(node, h=h, bindings={"v": v, "w": wv})
        want = quad_phi_moment(lambda u: max(0.0, 1.0 - max(0.2, u, wv)),
                               0.0, 1.0, v, h)
        assert got == pytest.approx(want, rel=1e-9)

    def test_residual_integral_matches_exact_moment(self):
        # a deterministic residual integrand must agree with the closed form
        factors = (RampMax(1.0, (0.2, "u")),)
        exact = PhiMoment(factors, "u", 0.0, 1.0, "v")
        numeric = UIntegral(factors, "u", 0.0, 1.0, "v")
        h = 0.68
        for v in (0.15, 0.5, 0.95):
            a = evaluate(exact, h=h, bindings={"v": v})
            b = evaluate(numeric, h=h, bindings={"v": v})
            assert b == pytest.approx(a, rel=1e-8)

    def test_path_from_dict(self):
        p = path_from_dict({0.5: 1.2, 1.0: -0.3})
        assert p.value(0.5) == 1.2
        assert p.value(0.0) == 0.0


class TestGridPartials:
    def test_known_second_partial(self):
        f = parse("B(0.5)^2*B(1)", TimeGrid((0.0, 0.5, 1.0)))
        got = grid_partials(f, TimeGrid((0.0, 0.5, 1.0)), (2, 0))
        path = sample_path(11)
        want = 2.0 * path.value(1.0) + 4.0 * path.value(0.5)
        assert evaluate(got, path=path) == pytest.approx(want, rel=1e-12)

    def test_rejects_non_discrete(self):
        with pytest.raises(UnsupportedNodeError):
            grid_partials(parse("IB(0,1)"), GRID, (1, 0, 0, 0))

    def test_rejects_off_grid_samples(self):
        with pytest.raises(ValueError):
            grid_partials(parse("B(0.3)"), GRID, (1, 0, 0, 0))

    def test_rejects_bad_multi_index(self):
        with pytest.raises(ValueError):
            grid_partials(parse("B(0.5)"), GRID, (1, 0))


class TestTimeGrid:
    def test_validation(self):
        with pytest.raises(ValueError):
            TimeGrid((0.5, 1.0))
        with pytest.raises(ValueError):
            TimeGrid((0.0, 1.0, 1.0))

    def test_locate(self):
        g = TimeGrid((0.0, 0.5, 1.0))
        assert g.locate(0.0) == 1
        assert g.locate(0.2) == 1
        assert g.locate(0.5) == 1
        assert g.locate(0.500001) == 2
        assert g.locate(1.0) == 2
        with pytest.raises(ValueError):
            g.locate(1.5)

    def test_refine_and_union(self):
        g = TimeGrid((0.0, 0.5, 1.0)).refine(2)
        assert g.times == (0.0, 0.25, 0.5, 0.75, 1.0)
        assert g.with_times((0.6,)).times == (0.0, 0.25, 0.5, 0.6, 0.75, 1.0)


class TestSerialization:
    def test_golden_forms(self):
        assert to_sexpr(parse("B(0.5)^2*B(1)")) == "(* (^ (B 0.5) 2) (B 1.0))"
        assert to_sexpr(parse("IB(0.25,1)")) == "(IB (max 0.25) 1.0)"
        assert to_sexpr(parse("exp(-1*IB2(0,1))")) == "(exp (* -1.0 (IB2 0.0 1.0)))"

    def test_rename_for_structural_matching(self):
        a = malliavin(fbm_sample(0.5), "u1")
        b = malliavin(fbm_sample(0.5), "u2")
        assert to_sexpr(a, rename={"u1": "%"}) == to_sexpr(b, rename={"u2": "%"})

    def test_expand_distributes(self):
        e = make_product([make_sum([fbm_sample(0.5), Const(2.0)]),
                          make_sum([fbm_sample(1.0), Const(3.0)])])
        terms = expand(e)
        assert len(terms) == 4


class TestParser:
    def test_structural(self):
        assert parse("B(0.5)") == FbmSample(0.5)
        assert parse("2*B(1)") == make_product([Const(2.0), FbmSample(1.0)])
        assert parse("B(1)-B(0.5)") == make_sum([FbmSample(1.0),
                                                 scale(FbmSample(0.5), -1.0)])
        assert parse("IB2(0,1)") == TimeIntBSq(0.0, 1.0)

    def test_grid_symbols(self):
        g = TimeGrid((0.0, 0.5, 1.0))
        assert parse("B(t1)^2*B(T)", g) == parse("B(0.5)^2*B(1)")
        with pytest.raises(ParseError):
            parse("B(t3)", g)
        with pytest.raises(ParseError):
            parse("B(T)")

    def test_wiener_weight_polynomials(self):
        w = parse("WI(s^2-0.5*s+1;0,1)")
        assert isinstance(w, WienerInt)
        assert w.weight.coeffs[0] == (1.0, -0.5, 1.0)

    def test_syntax_error_offsets(self):
        with pytest.raises(ParseError) as e:
            parse("B(0.5")
        assert e.value.offset == 6
        with pytest.raises(ParseError) as e:
            parse("B(0.5)@2")
        assert e.value.offset == 7

    def test_unknown_symbol(self):
        with pytest.raises(ParseError, match="unknown symbol"):
            parse("Q(0.5)")

    def test_time_validation(self):
        g = TimeGrid((0.0, 0.5, 1.0))
        with pytest.raises(ParseError, match="exceeds the horizon"):
            parse("B(1.5)", g)
        with pytest.raises(ParseError, match="nonempty"):
            parse("IB(1,0.5)")

    def test_trailing_input(self):
        with pytest.raises(ParseError, match="trailing"):
            parse("B(1) B(0.5)")

    def test_float_exponent_rejected(self):
        with pytest.raises(ParseError):
            parse("B(1)^2.5")
