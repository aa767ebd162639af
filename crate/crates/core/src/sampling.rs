//! Seeded random operators over the built-in geometries, for property
//! checks.

use std::sync::Arc;

use rand::Rng;

use crate::calculus::{DiffOp, Frame, Term};
use crate::geometry::{
    build_ah_space, build_b_space, build_edge_space, build_scattering_space, build_transformation_space, Shape,
    StratifiedSpace,
};
use crate::opdsl::{parse_expr, Canon, Rational};

/// A geometry with coefficients admissible at all of its boundary strata.
#[derive(Debug, Clone)]
pub struct ClassFixture {
    pub name: &'static str,
    pub space: StratifiedSpace,
    pub frame: Arc<Frame>,
    pub pool: Vec<Canon>,
}

fn fixture(name: &'static str, space: StratifiedSpace, pool: &[&str]) -> ClassFixture {
    let frame = Arc::new(Frame::from_space(&space).expect("built-in frame"));
    let pool = pool
        .iter()
        .map(|s| Canon::from_expr(&parse_expr(s).expect("pool expression")).expect("pool expression"))
        .collect();
    ClassFixture { name, space, frame, pool }
}

/// One fixture per geometry class (and per b-profile).
pub fn class_fixtures() -> Vec<ClassFixture> {
    let sc1 = ["1", "tanh(t)", "1/(1 + t^2)", "arctan(t)", "exp(-t^2)", "t/(1 + t^2)"];
    let sc2 = ["1", "x^2/(1 + x^2 + y^2)", "x*y/(1 + x^2 + y^2)", "1/(1 + x^2 + y^2)", "y^2/(1 + x^2 + y^2)"];
    vec![
        fixture("sc1", build_scattering_space(1).unwrap(), &sc1),
        fixture("sc2", build_scattering_space(2).unwrap(), &sc2),
        fixture("transformation1", build_transformation_space(1).unwrap(), &sc1),
        fixture("b-interval", build_b_space(&[Shape::Interval]).unwrap(), &["1", "x", "1 - x", "x^2", "x*(1 - x)"]),
        fixture(
            "b-square",
            build_b_space(&[Shape::Interval, Shape::Interval]).unwrap(),
            &["1", "x", "y", "x*y", "1 - y"],
        ),
        fixture(
            "b-cylinder",
            build_b_space(&[Shape::Interval, Shape::Circle]).unwrap(),
            &["1", "x", "cos(th)", "sin(th)", "x*cos(th)"],
        ),
        fixture(
            "edge",
            build_edge_space(&Shape::torus(), &Shape::Circle).unwrap(),
            &["1", "x", "cos(y)", "sin(z)", "x*cos(z)", "cos(y)*sin(z)"],
        ),
        fixture("ah", build_ah_space(&Shape::Circle).unwrap(), &["1", "x", "cos(z)", "x*sin(z)", "1 + x^2"]),
    ]
}

/// A nonzero scalar operator of order 0..=2 with 1..=3 terms drawn from
/// `pool`, each scaled by a small nonzero rational.
pub fn random_operator(frame: &Arc<Frame>, pool: &[Canon], rng: &mut impl Rng) -> DiffOp {
    loop {
        let p = draw(frame, pool, rng);
        if !p.is_zero() {
            return p;
        }
    }
}

fn draw(frame: &Arc<Frame>, pool: &[Canon], rng: &mut impl Rng) -> DiffOp {
    let order = rng.gen_range(0..=2u32);
    let n_terms = rng.gen_range(1..=3);
    let mut terms = Vec::with_capacity(n_terms);
    for k in 0..n_terms {
        let len = if k == 0 { order as usize } else { rng.gen_range(0..=order as usize) };
        let word = (0..len).map(|_| rng.gen_range(0..frame.len())).collect();
        let num = loop {
            let v = rng.gen_range(-3i64..=3);
            if v != 0 {
                break v;
            }
        };
        let r = Rational::new(num.into(), rng.gen_range(1i64..=2).into());
        let coeff = pool[rng.gen_range(0..pool.len())].scale(&r);
        terms.push(Term { row: 0, col: 0, coeff, word });
    }
    // the leading word may have cancelled against another term
    DiffOp::from_terms(frame.clone(), order, 1, terms, true).expect("well-formed random terms")
}
