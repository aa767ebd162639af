use fredholm_core::calculus::DiffOp;
use fredholm_core::limits::all_limit_operators;
use fredholm_core::opdsl::file::parse_operator_file;
use fredholm_core::spectral::{
    essential_spectrum, fredholm_verdict, ItemKind, SpectralResolution, SpectrumApprox, VerdictOptions, VerdictResult,
};
use num_complex::Complex64;
use proptest::prelude::*;

fn load(geometry: &str, terms: &[(String, &str)], order: u32) -> DiffOp {
    let body: String = terms.iter().map(|(c, g)| format!("  coeff \"{c}\" gens [{g}]\n")).collect();
    let text = format!("geometry {{ {geometry} }}\noperator {{\n  order = {order}\n{body}}}\n");
    parse_operator_file(&text).unwrap().operator().unwrap().clone()
}

fn q(num: i64, den: i64) -> String {
    format!("({num}/{den})")
}

/// Symmetric second-order operators with a varying potential, on sc(1) and
/// the b-cylinder.
fn symmetric_family(a: (i64, i64), b: (i64, i64), d: (i64, i64), extra: &str) -> Vec<DiffOp> {
    let sc = load(
        "class = \"sc\" dim = 1",
        &[(format!("-{}", q(a.0, a.1)), "dt, dt"), (format!("{}*tanh(t) + {}{extra}", q(b.0, b.1), q(d.0, d.1)), "")],
        2,
    );
    let cyl = load(
        "class = \"b\" shape = \"interval*circle\"",
        &[
            (format!("-{}", q(a.0, a.1)), "xdx, xdx"),
            ("-1".into(), "dth, dth"),
            (format!("{}*x + {}{extra}", q(b.0, b.1), q(d.0, d.1)), ""),
        ],
        2,
    );
    vec![sc, cyl]
}

fn shifted(s: &SpectrumApprox, c: f64) -> Vec<(ItemKind, f64, f64)> {
    s.items.iter().map(|it| (it.kind, it.lo + c, it.hi + c)).collect()
}

fn close(a: &[(ItemKind, f64, f64)], b: &[(ItemKind, f64, f64)]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x.0 == y.0 && (x.1 - y.1).abs() < 1e-8 && (x.2 - y.2).abs() < 1e-8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn spectrum_shifts_with_constants(
        a in (1i64..=6, 1i64..=2), b in (-4i64..=4, 1i64..=2), d in (-4i64..=4, 1i64..=2), c in (-6i64..=6, 1i64..=3)
    ) {
        let cv = c.0 as f64 / c.1 as f64;
        let res = SpectralResolution::default();
        let base = symmetric_family(a, b, d, "");
        let plus = symmetric_family(a, b, d, &format!(" + {}", q(c.0, c.1)));
        for (p, pc) in base.iter().zip(&plus) {
            let s = essential_spectrum(p, (-8.0, 8.0), &res, false).unwrap();
            let sc = essential_spectrum(pc, (-8.0 + cv, 8.0 + cv), &res, false).unwrap();
            let expect = shifted(&s, cv);
            let got: Vec<_> = sc.items.iter().map(|it| (it.kind, it.lo, it.hi)).collect();
            prop_assert!(close(&expect, &got), "{p}: {expect:?} vs {got:?}");
            // symmetric real operators: no complex items
            prop_assert!(s.items.iter().all(|it| it.kind != ItemKind::Complex));
        }
    }

    #[test]
    fn constant_coefficients_are_their_own_limits(
        a in (1i64..=6, 1i64..=3), b in (1i64..=6, 1i64..=3), c in (-6i64..=6, 1i64..=3)
    ) {
        let cv = c.0 as f64 / c.1 as f64;
        let ops = [
            load("class = \"sc\" dim = 1", &[(format!("-{}", q(a.0, a.1)), "dt, dt"), (q(c.0, c.1), "")], 2),
            load(
                "class = \"sc\" dim = 2",
                &[(format!("-{}", q(a.0, a.1)), "dx, dx"), (format!("-{}", q(b.0, b.1)), "dy, dy"), (q(c.0, c.1), "")],
                2,
            ),
        ];
        for p in &ops {
            for l in all_limit_operators(p, false).unwrap() {
                prop_assert_eq!(&l.op.entries, &p.entries);
            }
            // full symbol a xi^2 (+ b eta^2) + c ranges over [c, inf)
            let s = essential_spectrum(p, (cv - 4.0, cv + 4.0), &SpectralResolution::default(), false).unwrap();
            prop_assert_eq!(s.items.len(), 1);
            prop_assert!((s.items[0].lo - cv).abs() < 1e-9, "{:?}", s);
            prop_assert!(s.items[0].extends_above);
        }
    }

    #[test]
    fn verdict_flips_at_the_threshold(c in (-6i64..=6, 1i64..=3)) {
        let cv = c.0 as f64 / c.1 as f64;
        let ops = [
            load("class = \"sc\" dim = 1", &[("-1".into(), "dt, dt"), (q(c.0, c.1), "")], 2),
            load("class = \"b\" shape = \"interval\"", &[("-1".into(), "xdx, xdx"), (q(c.0, c.1), "")], 2),
        ];
        let mut opts = VerdictOptions::default();
        for p in &ops {
            // the certified margin shrinks with delta, so the grid is refined with it
            for (delta, grid) in [(1e-1, 4097), (1e-2, 16385), (1e-3, 65537)] {
                opts.spectral.grid_1d = grid;
                let below = fredholm_verdict(p, Complex64::new(cv - delta, 0.0), 0.0, &opts);
                let above = fredholm_verdict(p, Complex64::new(cv + delta, 0.0), 0.0, &opts);
                prop_assert_eq!(below.result, VerdictResult::Fredholm, "{} at {}", p, cv - delta);
                prop_assert_eq!(above.result, VerdictResult::NotFredholm, "{} at {}", p, cv + delta);
            }
        }
    }
}
