//! Property tests of the invariants each module promises.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::addsym::{GammaVariant, OsFlow, OsOperators, OsState};
use crate::dressing::{self, Gauge};
use crate::fields::{CoeffFn, Grid, GridSpec};
use crate::hamiltonian::{pairing, pb1_flow, pb2_flow, VarGrad};
use crate::hierarchy::{self, FlowContext, FlowSpec, LatticeState};
use crate::opalg::{DiffOp, MixedOp};

fn spec(jmax: usize) -> GridSpec {
    GridSpec { max_modes: jmax, ..GridSpec::default() }
}

fn random_fn(seed: u64, modes: usize, amp: f64) -> CoeffFn {
    CoeffFn::random_real(modes, amp, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random pure difference operator on `Λ^{lo..=hi}` with periodic coefficients.
fn random_op(seed: u64, lo: i64, hi: i64) -> MixedOp {
    let coeffs = (lo..=hi).map(|k| random_fn(seed.wrapping_mul(31).wrapping_add(k as u64), 4, 0.5)).collect();
    DiffOp::exact(lo, coeffs).into()
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(32))]

    #[test]
    fn shifts_compose(seed in any::<u64>(), k in -6i64..6, m in -6i64..6) {
        let f = random_fn(seed, 6, 1.0);
        let a = f.shift(k, 0.1).shift(m, 0.1);
        let b = f.shift(k + m, 0.1);
        prop_assert!((&a - &b).max_abs() <= 1e-13);
    }

    #[test]
    fn leibniz_rule(a in any::<u64>(), b in any::<u64>()) {
        let g = Grid::new(spec(64)).unwrap();
        let (f, h) = (random_fn(a, 8, 1.0), random_fn(b, 8, 1.0));
        let lhs = f.mul(&h, &g).unwrap().ddx();
        let rhs = &f.ddx().mul(&h, &g).unwrap() + &f.mul(&h.ddx(), &g).unwrap();
        prop_assert!((&lhs - &rhs).sup_norm(&g) <= 1e-10);
    }

    #[test]
    fn inverse_of_one_minus_shift(seed in any::<u64>(), mean in -1.0f64..1.0) {
        let g = Grid::new(spec(64)).unwrap();
        let f = &random_fn(seed, 8, 1.0) + &CoeffFn::constant(mean);
        let h = f.invert_one_minus_shift(g.eps()).unwrap();
        let back = &h - &h.shift(1, g.eps());
        prop_assert!((&back - &f).sup_norm(&g) <= 1e-12);
    }

    #[test]
    fn product_is_pointwise(a in any::<u64>(), b in any::<u64>(), xs in prop::collection::vec(0.0f64..6.283, 64)) {
        let g = Grid::new(spec(64)).unwrap();
        let (f, h) = (random_fn(a, 8, 1.0), random_fn(b, 8, 1.0));
        let p = f.mul(&h, &g).unwrap();
        prop_assert_eq!(g.ledger().total(), 0.0);
        for x in xs {
            prop_assert!((p.eval(x) - f.eval(x) * h.eval(x)).norm() <= 1e-9);
        }
    }

    #[test]
    fn operator_product_is_associative(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
        let g = Grid::new(spec(64)).unwrap();
        let (x, y, z) = (random_op(a, -2, 1), random_op(b, -1, 2), random_op(c, -1, 1));
        let l = x.mul(&y, &g).unwrap().mul(&z, &g).unwrap();
        let r = x.mul(&y.mul(&z, &g).unwrap(), &g).unwrap();
        let d = l.sub(&r);
        prop_assert!(d.norm_on(d.trust(), &g) <= 1e-10);
    }

    #[test]
    fn jacobi_identity(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
        let g = Grid::new(spec(64)).unwrap();
        let x = random_op(a, -1, 1).add(&MixedOp::eps_d());
        let (y, z) = (random_op(b, -2, 1), random_op(c, 0, 2));
        let cyc = |p: &MixedOp, q: &MixedOp, r: &MixedOp| p.commutator(&q.commutator(r, &g).unwrap(), &g).unwrap();
        let s = cyc(&x, &y, &z).add(&cyc(&y, &z, &x)).add(&cyc(&z, &x, &y));
        prop_assert!(s.norm_on(s.trust(), &g) <= 1e-9);
    }

    #[test]
    fn derivation_acts_on_coefficients(a in any::<u64>()) {
        let g = Grid::new(spec(64)).unwrap();
        let x = random_op(a, -2, 2);
        let c = MixedOp::eps_d().commutator(&x, &g).unwrap();
        let want = x.map_coeffs(|f| f.ddx().scale(g.eps()));
        prop_assert!(c.sub(&want).norm(&g) <= 1e-13);
    }

    #[test]
    fn projections_are_idempotent(a in any::<u64>()) {
        let x = random_op(a, -3, 3).add(&MixedOp::eps_d());
        prop_assert_eq!(x.plus().plus(), x.plus());
        prop_assert_eq!(x.minus().minus(), x.minus());
        prop_assert!(x.plus().minus().diff().band().is_empty());
        prop_assert!(x.minus().plus().diff().band().is_empty());
    }

    #[test]
    fn brackets_are_skew(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        let g = Grid::new(spec(64)).unwrap();
        let st = LatticeState::random(spec(64), 0.2, seed);
        let grad = |s: u64| VarGrad { dhdu: random_fn(s, 6, 1.0), dhdv: random_fn(s ^ 0x5555, 6, 1.0) };
        let (ga, gb) = (grad(a), grad(b));
        let pair = |x: &VarGrad| (x.dhdu.clone(), x.dhdv.clone());
        let p1 = pairing(&pair(&ga), &pb1_flow(&gb, g.eps()), &g).unwrap() + pairing(&pair(&gb), &pb1_flow(&ga, g.eps()), &g).unwrap();
        let p2 = pairing(&pair(&ga), &pb2_flow(&st, &gb, &g).unwrap(), &g).unwrap()
            + pairing(&pair(&gb), &pb2_flow(&st, &ga, &g).unwrap(), &g).unwrap();
        prop_assert!(p1.abs() <= 1e-9 && p2.abs() <= 1e-9, "{p1} {p2}");
    }
}

proptest! {
    #![proptest_config(config(6))]

    #[test]
    fn logarithms_commute_with_lax(seed in any::<u64>(), amp in 0.05f64..0.2) {
        let g = Grid::new(spec(32)).unwrap();
        let st = LatticeState::random(spec(32), amp, seed);
        let p = dressing::solve_dressing(&st.u, &st.v, 6, &g).unwrap();
        let wg = p.work_grid();
        let l = p.lax().unwrap();
        for op in [dressing::log_plus(&p).unwrap(), dressing::log_minus(&p).unwrap()] {
            let c = op.commutator(&l, wg).unwrap();
            prop_assert!(c.norm_on(c.trust(), wg) <= 1e-8);
        }
        let lp = dressing::log_plus(&p).unwrap();
        prop_assert!(lp.diff().band().hi < 0);
        prop_assert!(dressing::log_minus(&p).unwrap().diff().band().lo >= 0);
    }

    #[test]
    fn log_residual_is_gauge_independent(seed in any::<u64>(), offs in prop::collection::vec(-1.0f64..1.0, 4)) {
        let g = Grid::new(spec(32)).unwrap();
        let st = LatticeState::random(spec(32), 0.2, seed);
        let a = dressing::solve_dressing(&st.u, &st.v, 6, &g).unwrap();
        let gauge = Gauge { s_offsets: offs.clone(), sbar_offsets: offs };
        let b = dressing::solve_dressing_with_gauge(&st.u, &st.v, 6, &gauge, &g).unwrap();
        let res = |p: &dressing::DressingPair| {
            let c = dressing::log_plus(p).unwrap().commutator(&p.lax().unwrap(), p.work_grid()).unwrap();
            c.norm_on(c.trust(), p.work_grid())
        };
        prop_assert!((res(&a) - res(&b)).abs() <= 1e-10);
    }

    #[test]
    fn lax_representations_agree(seed in any::<u64>()) {
        // Log flows converge in K, so this uses the default order rather than a reduced one.
        let g = Grid::new(spec(64)).unwrap();
        let st = LatticeState::random(spec(64), 0.2, seed);
        let ctx = FlowContext::new(&st, 10, &g).unwrap();
        for f in FlowSpec::basic() {
            let m = hierarchy::projection_mismatch(&ctx, f).unwrap();
            prop_assert!(m <= 1e-8, "{f:?} {m:e} ledger {:e}", g.ledger().total());
        }
        // Flows free of the reduction anomaly.
        for f in [FlowSpec { alpha: 0, n: 0 }, FlowSpec { alpha: 0, n: 1 }, FlowSpec { alpha: 0, n: 2 }, FlowSpec { alpha: 1, n: 0 }] {
            prop_assert!(hierarchy::lax_rhs_unchecked(&ctx, f).unwrap().anomaly <= 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(config(3))]

    #[test]
    fn orlov_schulman_relations(seed in any::<u64>(), t00 in -1.0f64..1.0, t01 in -0.5f64..0.5, t10 in -1.0f64..1.0) {
        let g = Grid::new(spec(64)).unwrap();
        let mut st = LatticeState::random(spec(64), 0.2, seed);
        st.times.insert(FlowSpec { alpha: 0, n: 0 }, t00);
        st.times.insert(FlowSpec { alpha: 0, n: 1 }, t01);
        st.times.insert(FlowSpec { alpha: 1, n: 0 }, t10);
        let ops = OsOperators::build(&OsState::new(st, 8, GammaVariant::default()).unwrap(), &g).unwrap();
        let r = ops.canonical_residuals().unwrap();
        prop_assert!(r.l_m <= 1e-7 && r.l_mbar <= 1e-7 && r.diff_l <= 1e-7, "{r:?}");
        for (m, l) in [(0, 1), (0, 2), (1, 0), (1, 1)] {
            let v = ops.velocity(OsFlow::Additional { m, l }).unwrap();
            prop_assert!(v.reps_gap <= 1e-7 && v.plus_anomaly <= 1e-7, "({m},{l}) {v:?}");
        }
    }
}
