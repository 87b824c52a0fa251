use bitvec::prelude::*;
use proptest::prelude::*;

use switchbound::certs::{ClassK, LyapunovFn};
use switchbound::delaybound::{bound, DelayRecurrence, DelayedPair, TSState};
use switchbound::expr::{BinOp, Func, Node};
use switchbound::synth::{maximal_invariant, ExplicitModel};
use switchbound::{demos, flow_constant, parse, Expression, LyapunovCertificate, Mode};

fn linear_cert(kappa: f64) -> LyapunovCertificate {
    let m = nalgebra::DMatrix::<f64>::identity(1, 1);
    LyapunovCertificate::common(
        LyapunovFn::Quadratic { m },
        ClassK::identity(),
        ClassK::identity(),
        kappa,
        None,
        None,
    )
    .unwrap()
}

fn node() -> impl Strategy<Value = Node> {
    let leaf = prop_oneof![(0.0f64..10.0).prop_map(Node::Const), (0usize..2).prop_map(Node::Var),];
    leaf.prop_recursive(5, 40, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|e| Node::Neg(Box::new(e))),
            (
                prop_oneof![
                    Just(BinOp::Add),
                    Just(BinOp::Sub),
                    Just(BinOp::Mul),
                    Just(BinOp::Div),
                    Just(BinOp::Pow)
                ],
                inner.clone(),
                inner.clone()
            )
                .prop_map(|(op, l, r)| Node::Binary(op, Box::new(l), Box::new(r))),
            (
                prop_oneof![
                    Just(Func::Sqrt),
                    Just(Func::Exp),
                    Just(Func::Abs),
                    Just(Func::Sin),
                    Just(Func::Log)
                ],
                inner.clone()
            )
                .prop_map(|(f, a)| Node::Call(f, vec![a])),
            (prop_oneof![Just(Func::Min), Just(Func::Max)], inner.clone(), inner)
                .prop_map(|(f, a, b)| Node::Call(f, vec![a, b])),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn parser_never_panics(s in "[ x12y0-9.eE+*/^()a-z,-]{0,40}") {
        let _ = parse(&s, &["x1", "x2"]);
    }

    #[test]
    fn parser_never_panics_on_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let s = String::from_utf8_lossy(&bytes);
        let _ = parse(&s, &["x1"]);
    }

    #[test]
    fn print_parse_round_trip(root in node(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let vars = vec!["x1".to_string(), "x2".to_string()];
        let e = Expression::from_node(root, vars.clone());
        let back = parse(e.source(), &vars).unwrap();
        match (e.eval(&[a, b]), back.eval(&[a, b])) {
            (Ok(u), Ok(v)) => prop_assert!(u == v || (u.is_nan() && v.is_nan()), "{} : {u} vs {v}", e.source()),
            (Err(_), Err(_)) => {}
            (u, v) => prop_assert!(false, "{}: {u:?} vs {v:?}", e.source()),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bound_monotone_in_each_parameter(
        nu in 0.01f64..5.0,
        kappa in 0.01f64..2.0,
        tau in 0.1f64..10.0,
        frac in 0.01f64..0.9,
        bump in 1.01f64..1.5,
    ) {
        let delta0 = frac * tau;
        let eps = |nu: f64, kappa: f64, tau: f64, d: f64| bound(&linear_cert(kappa), nu, tau, d, 4).unwrap().epsilon;
        let base = eps(nu, kappa, tau, delta0);
        prop_assert!(eps(nu * bump, kappa, tau, delta0) >= base);
        prop_assert!(eps(nu, kappa * bump, tau, delta0) <= base);
        prop_assert!(eps(nu, kappa, tau * bump, delta0) <= base);
        if delta0 * bump < tau {
            prop_assert!(eps(nu, kappa, tau, delta0 * bump) >= base);
        }
    }

    #[test]
    fn fixed_point_solves_recurrence(
        nu in 0.01f64..5.0,
        kappa in 0.01f64..2.0,
        tau in 0.1f64..10.0,
        frac in 0.01f64..0.9,
    ) {
        let rec = DelayRecurrence::new(&linear_cert(kappa), nu, tau, frac * tau).unwrap();
        let e = rec.fixed_point().unwrap();
        let g = rec.g(e).unwrap();
        prop_assert!((g - e).abs() <= 1e-9 * e.max(1.0), "{g} vs {e}");
        let k = 25;
        let it = rec.iterate(0.0, k).unwrap();
        let cf = rec.closed_form(0.0, k).unwrap();
        prop_assert!((it - cf).abs() <= 1e-9 * cf.max(1.0));
        prop_assert!(it <= e * (1.0 + 1e-12));
    }

    #[test]
    fn class_k_inverse_is_right_inverse(c in 0.1f64..10.0, q in 0.3f64..4.0, y in 0.0f64..50.0) {
        let a = ClassK::power(c, q, None).unwrap();
        let s = a.inverse(y).unwrap();
        prop_assert!((a.eval(s).unwrap() - y).abs() <= 1e-9 * y.max(1.0));
    }

    #[test]
    fn class_k_expression_inverse(y in 0.0f64..20.0) {
        let e = parse("s + s^3", &["s"]).unwrap();
        let a = ClassK::expression(e, 10.0).unwrap();
        let s = a.inverse(y).unwrap();
        prop_assert!((a.eval(s).unwrap() - y).abs() <= 1e-8 * y.max(1.0));
    }

    #[test]
    fn synthesis_matches_brute_force(
        n in 1usize..=8,
        table in proptest::collection::vec(proptest::option::weighted(0.8, 0usize..8), 16),
        init_bits in any::<u8>(),
    ) {
        let succ: Vec<Vec<Option<usize>>> = (0..n)
            .map(|q| (0..2).map(|p| table[2 * q + p].map(|s| s % n)).collect())
            .collect();
        let model = ExplicitModel { num_modes: 2, succ: succ.clone() };
        let initial: BitVec = (0..n).map(|q| init_bits >> q & 1 == 1).collect();
        let got = maximal_invariant(&model, &initial);

        let mut best = 0u32;
        for set in 0u32..(1 << n) {
            let inside = |q: usize| set >> q & 1 == 1;
            let ok = (0..n).filter(|&q| inside(q)).all(|q| {
                initial[q] && succ[q].iter().any(|s| s.is_some_and(inside))
            });
            if ok {
                best |= set;
            }
        }
        let want: BitVec = (0..n).map(|q| best >> q & 1 == 1).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn flow_semigroup(s in 0.0f64..0.3, t in 0.0f64..0.3, x1 in 1.3f64..1.7, x2 in 5.7f64..5.8, p in 0usize..2) {
        let sys = demos::dcdc_system();
        let dt = 1e-3;
        let whole = flow_constant(&sys, &[x1, x2], Mode(p), s + t, dt).unwrap();
        let mid = flow_constant(&sys, &[x1, x2], Mode(p), s, dt).unwrap();
        let split = flow_constant(&sys, &mid, Mode(p), t, dt).unwrap();
        for (a, b) in whole.iter().zip(&split) {
            prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn premetric_triangle(
        k in 0usize..5,
        lag in 0.0f64..0.1,
        xa in 1.0f64..10.0,
        xb in 1.0f64..10.0,
        xc in 1.0f64..10.0,
        p in 0usize..2,
    ) {
        let sys = demos::water_tank_system();
        let pair = DelayedPair { sys: &sys, tau: 10.0, delta0: 0.1, dt: 1e-3 };
        let t = k as f64 * 10.0;
        let a = TSState { x: vec![xa], t: t + lag, p: Mode(p) };
        let b = TSState { x: vec![xb], t, p: Mode(p) };
        let c = TSState { x: vec![xc], t, p: Mode(p) };
        // b and c both sit on the period grid; the route through b pays the
        // distance of their images after the lag
        let bb = flow_constant(&sys, &b.x, Mode(p), lag, 1e-3).unwrap();
        let cc = flow_constant(&sys, &c.x, Mode(p), lag, 1e-3).unwrap();
        let lhs = pair.premetric(&a, &c);
        let rhs = pair.premetric(&a, &b) + (bb[0] - cc[0]).abs();
        prop_assert!(lhs <= rhs + 1e-12);
        // zero lag: plain Euclidean triangle
        let a0 = TSState { t, ..a.clone() };
        prop_assert!(pair.premetric(&a0, &c) <= pair.premetric(&a0, &b) + pair.premetric(&b, &c) + 1e-12);
        prop_assert_eq!(pair.premetric(&b, &b), 0.0);
    }
}
