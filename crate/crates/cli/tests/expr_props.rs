use exactsde_cli::expr::{Expr, Func};
use proptest::prelude::*;

const VARS: [&str; 2] = ["x", "t"];

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (-3.0f64..3.0).prop_map(Expr::Num),
        (0usize..2).prop_map(Expr::Var),
    ]
}

/// Smooth expressions without poles, so values and derivatives stay finite
/// on the sampled box.
fn smooth() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(4, 24, 2, |inner| {
        let b = |e: Expr| Box::new(e);
        prop_oneof![
            inner.clone().prop_map(move |a| Expr::Neg(b(a))),
            (inner.clone(), inner.clone()).prop_map(move |(a, c)| Expr::Add(b(a), b(c))),
            (inner.clone(), inner.clone()).prop_map(move |(a, c)| Expr::Sub(b(a), b(c))),
            (inner.clone(), inner.clone()).prop_map(move |(a, c)| Expr::Mul(b(a), b(c))),
            (inner.clone(), prop::sample::select(vec![Func::Sin, Func::Cos, Func::Tanh, Func::Atan]))
                .prop_map(move |(a, f)| Expr::Call(f, b(a))),
        ]
    })
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn render_parse_round_trip(e in smooth(), x in -2.0f64..2.0, t in 0.0f64..1.0) {
        let text = e.render(&VARS);
        let back = Expr::parse(&text, &VARS).unwrap();
        prop_assert!(close(e.eval(&[x, t]), back.eval(&[x, t]), 1e-12), "{text}");
    }

    #[test]
    fn derivative_matches_central_difference(e in smooth(), x in -2.0f64..2.0, t in 0.0f64..1.0) {
        let h = 1e-5;
        for var in 0..2 {
            let mut hi = [x, t];
            let mut lo = [x, t];
            hi[var] += h;
            lo[var] -= h;
            let fd = (e.eval(&hi) - e.eval(&lo)) / (2.0 * h);
            let exact = e.diff(var).eval(&[x, t]);
            prop_assert!(close(exact, fd, 1e-5), "d/d{} of {}: {exact} vs {fd}", VARS[var], e.render(&VARS));
        }
    }

    #[test]
    fn unknown_identifiers_are_rejected(name in "[a-df-z][a-z]{2,6}") {
        prop_assume!(!matches!(name.as_str(), "sin" | "cos" | "tan" | "exp" | "log" | "sqrt" | "abs" | "sign" | "sinh" | "cosh" | "tanh" | "atan" | "pow"));
        let err = Expr::parse(&format!("1 + {name}"), &VARS).unwrap_err();
        prop_assert_eq!(err.offset, 4);
    }
}

#[test]
fn power_rule_and_quotient_rule() {
    let e = Expr::parse("x^3 / (1 + t^2)", &VARS).unwrap();
    let (x, t) = (1.3, 0.4);
    assert!(close(e.diff(0).eval(&[x, t]), 3.0 * x * x / (1.0 + t * t), 1e-14));
    assert!(close(e.diff(1).eval(&[x, t]), -x.powi(3) * 2.0 * t / (1.0 + t * t).powi(2), 1e-14));
}

#[test]
fn constants_and_functions() {
    let e = Expr::parse("exp(ln(2)) + cos(pi) + sqrt(e^2)", &[]).unwrap();
    assert!(close(e.eval(&[]), 2.0 - 1.0 + std::f64::consts::E, 1e-15));
}
