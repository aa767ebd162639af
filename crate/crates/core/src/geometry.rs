//! Stratified compactification descriptors.
//!
//! A [`StratifiedSpace`] records the open strata of a compact model manifold
//! with corners together with, for each boundary stratum, the orbit base
//! `B_S`, the fiber of `S -> B_S`, the isotropy group of the groupoid there,
//! and the chart data needed downstream: how coefficients reach the stratum
//! and which frame generators vanish on it.
//!
//! Groups `(0, inf)` are stored in additive coordinates, so a pure dilation
//! group is `RealVector(1)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::opdsl::expr::{parse_expr, Expr};
use crate::opdsl::limit::Approach;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("unsupported corner profile: {0}")]
    UnsupportedProfile(String),
    #[error("unsupported scattering dimension {0} (expected 1 or 2)")]
    UnsupportedDimension(u32),
    #[error("inconsistent fibration: {0}")]
    InconsistentFibration(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown stratum `{0}`")]
    UnknownStratum(String),
    #[error("center `{0}` is not in the interior")]
    CenterNotInterior(String),
    #[error("curve `{curve}` is not transverse: {reason}")]
    NonTransverse { curve: String, reason: String },
    #[error("curve `{curve}` ends at `{point}`, which is not in the blown-up point set")]
    EndpointNotInPointSet { curve: String, point: String },
    #[error("invalid descriptor: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Point,
    Interval,
    Circle,
    Product(Box<Shape>, Box<Shape>),
}

impl Shape {
    pub fn product(a: Shape, b: Shape) -> Shape {
        match (a, b) {
            (Shape::Point, s) | (s, Shape::Point) => s,
            (a, b) => Shape::Product(Box::new(a), Box::new(b)),
        }
    }

    pub fn torus() -> Shape {
        Shape::product(Shape::Circle, Shape::Circle)
    }

    pub fn dim(&self) -> u32 {
        match self {
            Shape::Point => 0,
            Shape::Interval | Shape::Circle => 1,
            Shape::Product(a, b) => a.dim() + b.dim(),
        }
    }

    pub fn factors(&self) -> Vec<Shape> {
        match self {
            Shape::Product(a, b) => {
                let mut v = a.factors();
                v.extend(b.factors());
                v
            }
            Shape::Point => Vec::new(),
            s => vec![s.clone()],
        }
    }

    pub fn from_factors(factors: &[Shape]) -> Shape {
        factors.iter().cloned().fold(Shape::Point, Shape::product)
    }

    pub fn parse(text: &str) -> Option<Shape> {
        match text.trim() {
            "point" => Some(Shape::Point),
            "interval" => Some(Shape::Interval),
            "circle" => Some(Shape::Circle),
            "torus" => Some(Shape::torus()),
            "square" => Some(Shape::product(Shape::Interval, Shape::Interval)),
            "cylinder" => Some(Shape::product(Shape::Interval, Shape::Circle)),
            other => {
                let parts: Vec<&str> = other.split('*').collect();
                if parts.len() < 2 {
                    return None;
                }
                let shapes: Option<Vec<Shape>> = parts.iter().map(|p| Shape::parse(p)).collect();
                Some(Shape::from_factors(&shapes?))
            }
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Point => write!(f, "point"),
            Shape::Interval => write!(f, "interval"),
            Shape::Circle => write!(f, "circle"),
            Shape::Product(a, b) => write!(f, "{a}*{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IsotropyGroup {
    Trivial,
    /// `R^k`, including `(0, inf)^k` in logarithmic coordinates.
    RealVector(u32),
    /// `R^n ⋊ (0, inf)` with dilations acting on `R^n`.
    SemidirectRnRplus(u32),
    /// A named group with an explicit amenability bit and dimension.
    Tagged {
        name: String,
        amenable: bool,
        dim: u32,
    },
}

impl IsotropyGroup {
    pub fn is_amenable(&self) -> bool {
        match self {
            IsotropyGroup::Tagged { amenable, .. } => *amenable,
            _ => true,
        }
    }

    pub fn dim(&self) -> u32 {
        match self {
            IsotropyGroup::Trivial => 0,
            IsotropyGroup::RealVector(k) => *k,
            IsotropyGroup::SemidirectRnRplus(n) => n + 1,
            IsotropyGroup::Tagged { dim, .. } => *dim,
        }
    }

    /// Applies the log identification `(0, inf) = R`.
    pub fn normalized(self) -> IsotropyGroup {
        match self {
            IsotropyGroup::SemidirectRnRplus(0) => IsotropyGroup::RealVector(1),
            IsotropyGroup::RealVector(0) => IsotropyGroup::Trivial,
            g => g,
        }
    }

    /// Abelian after normalization.
    pub fn is_abelian(&self) -> bool {
        matches!(self.clone().normalized(), IsotropyGroup::Trivial | IsotropyGroup::RealVector(_))
    }
}

impl fmt::Display for IsotropyGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IsotropyGroup::Trivial => write!(f, "{{e}}"),
            IsotropyGroup::RealVector(1) => write!(f, "R"),
            IsotropyGroup::RealVector(k) => write!(f, "R^{k}"),
            IsotropyGroup::SemidirectRnRplus(0) => write!(f, "R+*"),
            IsotropyGroup::SemidirectRnRplus(1) => write!(f, "R x| R+*"),
            IsotropyGroup::SemidirectRnRplus(n) => write!(f, "R^{n} x| R+*"),
            IsotropyGroup::Tagged { name, amenable, .. } => {
                write!(f, "{name} ({})", if *amenable { "amenable" } else { "non-amenable" })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeometryClass {
    BCalculus,
    Scattering,
    Edge,
    AsymptoticallyHyperbolic,
    Transformation,
    /// Spaces produced by blowing up submanifolds of a smooth manifold.
    Desingularization,
}

impl GeometryClass {
    pub fn short_name(self) -> &'static str {
        match self {
            GeometryClass::BCalculus => "b",
            GeometryClass::Scattering => "sc",
            GeometryClass::Edge => "edge",
            GeometryClass::AsymptoticallyHyperbolic => "ah",
            GeometryClass::Transformation => "transformation",
            GeometryClass::Desingularization => "desing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoordKind {
    /// The whole real line.
    Line,
    /// `(0, 1)` with both ends on the boundary.
    UnitInterval,
    /// `(0, 1)` with only `0` on the boundary; the other end continues into
    /// a compact region.
    Collar,
    /// Angle in `[0, 2 pi)`.
    Circle,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub name: String,
    pub kind: CoordKind,
}

impl Coord {
    pub fn new(name: &str, kind: CoordKind) -> Self {
        Coord { name: name.to_string(), kind }
    }

    /// `n` sample points in the open chart.
    pub fn samples(&self, n: usize) -> Vec<f64> {
        use std::f64::consts::PI;
        (0..n)
            .map(|k| {
                let u = (k as f64 + 1.0) / (n as f64 + 1.0);
                match self.kind {
                    CoordKind::Line => (PI * (u - 0.5)).tan(),
                    CoordKind::UnitInterval | CoordKind::Collar => u,
                    CoordKind::Circle => 2.0 * PI * k as f64 / n as f64,
                }
            })
            .collect()
    }
}

/// A calculus generator `multiplier * d/d var`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub name: String,
    pub var: String,
    #[serde(serialize_with = "ser_expr", deserialize_with = "de_expr")]
    pub multiplier: Expr,
}

fn ser_expr<S: serde::Serializer>(e: &Expr, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&e.to_string())
}

fn de_expr<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Expr, D::Error> {
    let text = <String as Deserialize>::deserialize(d)?;
    parse_expr(&text).map_err(serde::de::Error::custom)
}

impl GeneratorSpec {
    fn new(name: &str, var: &str, multiplier: &str) -> Self {
        GeneratorSpec {
            name: name.to_string(),
            var: var.to_string(),
            multiplier: parse_expr(multiplier).expect("built-in multiplier parses"),
        }
    }
}

/// Calculus generators valid near a stratum, and those vanishing on it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameChart {
    pub generators: Vec<String>,
    pub vanishing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub id: String,
    pub dimension: u32,
    pub depth: u32,
    /// Number of connected components sharing these data.
    pub components: u32,
    pub orbit_base: Shape,
    pub fiber: Shape,
    pub isotropy: IsotropyGroup,
    pub frame: FrameChart,
    /// Iterated approach of coefficients to the stratum (empty for the interior).
    pub approach: Vec<Approach>,
    /// Coordinates along the fiber (orbit directions).
    pub fiber_coords: Vec<Coord>,
    /// Coordinates on the orbit base.
    pub base_coords: Vec<Coord>,
    /// Groupoid restricted to the stratum, as a short formula.
    pub groupoid: String,
}

impl Stratum {
    pub fn is_boundary(&self) -> bool {
        self.depth > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CurveEnd {
    /// Ends at a marked point; the point must already be blown up.
    AtPoint(String),
    /// Ends on an existing hyperface.
    OnHyperface(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveCenter {
    pub label: String,
    pub ends: [CurveEnd; 2],
    /// Whether the curve meets the hyperfaces it ends on transversely.
    pub transverse: bool,
    /// Tangent directions at the two ends, in radians.
    pub tangent_angles: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Center {
    Point(String),
    PointSet(Vec<String>),
    Curve(CurveCenter),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupRecord {
    pub center: Center,
    pub parent: String,
    pub new_hyperfaces: Vec<String>,
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedSpace {
    pub id: String,
    pub class: GeometryClass,
    pub ambient_dim: u32,
    pub coords: Vec<Coord>,
    pub generators: Vec<GeneratorSpec>,
    pub strata: Vec<Stratum>,
    pub boundary_defining_functions: Vec<String>,
    pub blowups: Vec<BlowupRecord>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupoidCheck {
    pub holds: bool,
    pub failing_stratum: Option<String>,
    pub reason: Option<String>,
}

fn interior_stratum(dim: u32, fiber: Shape, coords: &[Coord], generators: &[GeneratorSpec]) -> Stratum {
    Stratum {
        id: "interior".into(),
        dimension: dim,
        depth: 0,
        components: 1,
        orbit_base: Shape::Point,
        fiber,
        isotropy: IsotropyGroup::Trivial,
        frame: FrameChart { generators: generators.iter().map(|g| g.name.clone()).collect(), vanishing: vec![] },
        approach: vec![],
        fiber_coords: coords.to_vec(),
        base_coords: vec![],
        groupoid: "U0 x U0".into(),
    }
}

const INTERVAL_VARS: [&str; 2] = ["x", "y"];

/// b-calculus on a product of intervals and circles, corner depth at most 2.
pub fn build_b_space(profile: &[Shape]) -> Result<StratifiedSpace, GeometryError> {
    let factors: Vec<Shape> = profile.iter().flat_map(Shape::factors).collect();
    let intervals = factors.iter().filter(|s| **s == Shape::Interval).count();
    let circles = factors.iter().filter(|s| **s == Shape::Circle).count();
    if intervals > 2 {
        return Err(GeometryError::UnsupportedProfile(format!("corner depth {intervals} exceeds 2")));
    }
    if circles > 1 {
        return Err(GeometryError::UnsupportedProfile("at most one circle factor".into()));
    }
    if factors.is_empty() {
        return Err(GeometryError::UnsupportedProfile("empty profile".into()));
    }
    let mut coords = Vec::new();
    let mut generators = Vec::new();
    let mut iv = INTERVAL_VARS.iter();
    // factor order: intervals first, then the circle
    let mut ordered: Vec<Shape> = factors.iter().filter(|s| **s == Shape::Interval).cloned().collect();
    ordered.extend(factors.iter().filter(|s| **s == Shape::Circle).cloned());
    for f in &ordered {
        match f {
            Shape::Interval => {
                let v = iv.next().unwrap();
                coords.push(Coord::new(v, CoordKind::UnitInterval));
                generators.push(GeneratorSpec::new(&format!("{v}d{v}"), v, &format!("{v}*(1 - {v})")));
            }
            Shape::Circle => {
                coords.push(Coord::new("th", CoordKind::Circle));
                generators.push(GeneratorSpec::new("dth", "th", "1"));
            }
            _ => unreachable!(),
        }
    }
    let n = coords.len() as u32;
    let shape = Shape::from_factors(&ordered);
    let mut strata = vec![interior_stratum(n, shape, &coords, &generators)];

    // each interval coordinate: free, at 0, or at 1
    let interval_coords: Vec<&Coord> = coords.iter().filter(|c| c.kind == CoordKind::UnitInterval).collect();
    let choices = 3usize.pow(interval_coords.len() as u32);
    let mut faces: Vec<Stratum> = Vec::new();
    for code in 1..choices {
        let mut c = code;
        let mut fixed: Vec<(String, u8)> = Vec::new();
        for ic in &interval_coords {
            let pick = (c % 3) as u8;
            c /= 3;
            if pick > 0 {
                fixed.push((ic.name.clone(), pick - 1));
            }
        }
        let depth = fixed.len() as u32;
        let id = fixed.iter().map(|(v, e)| format!("{v}={e}")).collect::<Vec<_>>().join(",");
        let approach = fixed
            .iter()
            .map(|(v, e)| if *e == 0 { Approach::ToZero(v.clone()) } else { Approach::ToOne(v.clone()) })
            .collect();
        let fiber_coords: Vec<Coord> =
            coords.iter().filter(|c| !fixed.iter().any(|(v, _)| *v == c.name)).cloned().collect();
        let fiber = Shape::from_factors(
            &fiber_coords
                .iter()
                .map(|c| if c.kind == CoordKind::Circle { Shape::Circle } else { Shape::Interval })
                .collect::<Vec<_>>(),
        );
        let vanishing: Vec<String> = fixed.iter().map(|(v, _)| format!("{v}d{v}")).collect();
        faces.push(Stratum {
            id,
            dimension: n - depth,
            depth,
            components: 1,
            orbit_base: Shape::Point,
            fiber,
            isotropy: IsotropyGroup::RealVector(depth),
            frame: FrameChart { generators: generators.iter().map(|g| g.name.clone()).collect(), vanishing },
            approach,
            fiber_coords,
            base_coords: vec![],
            groupoid: format!("(F x F) x (R+*)^{depth}"),
        });
    }
    faces.sort_by(|a, b| a.depth.cmp(&b.depth).then(a.id.cmp(&b.id)));
    strata.extend(faces);
    let space = StratifiedSpace {
        id: format!("b[{}]", Shape::from_factors(&ordered)),
        class: GeometryClass::BCalculus,
        ambient_dim: n,
        boundary_defining_functions: interval_coords
            .iter()
            .flat_map(|c| [c.name.clone(), format!("1 - {}", c.name)])
            .collect(),
        coords,
        generators,
        strata,
        blowups: vec![],
        notes: vec![],
    };
    space.validate()?;
    Ok(space)
}

/// Radial compactification of `R^n`, `n` in `{1, 2}`, with the scattering calculus.
pub fn build_scattering_space(n: u32) -> Result<StratifiedSpace, GeometryError> {
    let (coords, generators, boundary): (Vec<Coord>, Vec<GeneratorSpec>, Vec<Stratum>) = match n {
        1 => {
            let coords = vec![Coord::new("t", CoordKind::Line)];
            let gens = vec![GeneratorSpec::new("dt", "t", "1")];
            let names = vec!["dt".to_string()];
            let end = |id: &str, approach: Approach| Stratum {
                id: id.into(),
                dimension: 0,
                depth: 1,
                components: 1,
                orbit_base: Shape::Point,
                fiber: Shape::Point,
                isotropy: IsotropyGroup::RealVector(1),
                frame: FrameChart { generators: names.clone(), vanishing: names.clone() },
                approach: vec![approach],
                fiber_coords: vec![],
                base_coords: vec![],
                groupoid: "T_xM = R".into(),
            };
            let strata =
                vec![end("t=+inf", Approach::ToPosInf("t".into())), end("t=-inf", Approach::ToNegInf("t".into()))];
            (coords, gens, strata)
        }
        2 => {
            let coords = vec![Coord::new("x", CoordKind::Line), Coord::new("y", CoordKind::Line)];
            let gens = vec![GeneratorSpec::new("dx", "x", "1"), GeneratorSpec::new("dy", "y", "1")];
            let names: Vec<String> = gens.iter().map(|g| g.name.clone()).collect();
            let strata = vec![Stratum {
                id: "r=inf".into(),
                dimension: 1,
                depth: 1,
                components: 1,
                orbit_base: Shape::Circle,
                fiber: Shape::Point,
                isotropy: IsotropyGroup::RealVector(2),
                frame: FrameChart { generators: names.clone(), vanishing: names },
                approach: vec![Approach::Radial { x: "x".into(), y: "y".into(), angle: "th".into() }],
                fiber_coords: vec![],
                base_coords: vec![Coord::new("th", CoordKind::Circle)],
                groupoid: "T_xM = R^2".into(),
            }];
            (coords, gens, strata)
        }
        other => return Err(GeometryError::UnsupportedDimension(other)),
    };
    let shape = Shape::from_factors(&vec![Shape::Interval; n as usize]);
    let mut strata = vec![interior_stratum(n, shape, &coords, &generators)];
    strata.extend(boundary);
    let space = StratifiedSpace {
        id: format!("sc[{n}]"),
        class: GeometryClass::Scattering,
        ambient_dim: n,
        coords,
        generators,
        strata,
        boundary_defining_functions: vec!["1/r".into()],
        blowups: vec![],
        notes: vec!["orbits of G on the boundary are reduced to points".into()],
    };
    space.validate()?;
    Ok(space)
}

/// Radial compactification of `R^n` with `R^n` acting by translation; the
/// action groupoid. Same frame and strata as the scattering space.
pub fn build_transformation_space(n: u32) -> Result<StratifiedSpace, GeometryError> {
    let mut space = build_scattering_space(n)?;
    space.id = format!("transf[{n}]");
    space.class = GeometryClass::Transformation;
    for s in space.strata.iter_mut().filter(|s| s.depth > 0) {
        s.groupoid = format!("{} x R^{n}", s.id);
    }
    space.notes = vec!["action groupoid of R^n on its radial compactification".into()];
    Ok(space)
}

/// A bundle of Lie groups over `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBundle {
    pub base: Shape,
    pub group: IsotropyGroup,
}

/// A submersion `total -> base` with the given fiber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submersion {
    pub total: Shape,
    pub base: Shape,
    pub fiber: Shape,
}

/// Stratum data of the fibered pull-back of a group bundle along a
/// submersion: orbits are the fibers, isotropy is the bundle fiber.
pub fn fibered_pullback(bundle: &GroupBundle, submersion: &Submersion) -> Result<Stratum, GeometryError> {
    if bundle.base != submersion.base {
        return Err(GeometryError::DimensionMismatch(format!(
            "group bundle over {} but submersion onto {}",
            bundle.base, submersion.base
        )));
    }
    if submersion.total.dim() != submersion.fiber.dim() + submersion.base.dim() {
        return Err(GeometryError::DimensionMismatch(format!(
            "dim {} != dim {} + dim {}",
            submersion.total, submersion.fiber, submersion.base
        )));
    }
    let group = bundle.group.clone().normalized();
    let groupoid = match &group {
        IsotropyGroup::Trivial if submersion.fiber == Shape::Point => "S (units only)".to_string(),
        IsotropyGroup::Trivial => "S x_B S".to_string(),
        g => format!("(S x_B S) x {g}"),
    };
    Ok(Stratum {
        id: "pullback".into(),
        dimension: submersion.total.dim(),
        depth: 0,
        components: 1,
        orbit_base: submersion.base.clone(),
        fiber: submersion.fiber.clone(),
        isotropy: group,
        frame: FrameChart::default(),
        approach: vec![],
        fiber_coords: vec![],
        base_coords: vec![],
        groupoid,
    })
}

/// Edge calculus on a collar `[0, 1) x dM` with fibration `dM -> B`.
///
/// Supported: `B = point` (b-type), `B = dM` (asymptotically hyperbolic), and
/// `dM = circle * circle` fibered over `B = circle`.
pub fn build_edge_space(boundary: &Shape, base: &Shape) -> Result<StratifiedSpace, GeometryError> {
    let bfactors = boundary.factors();
    if bfactors.is_empty() || bfactors.iter().any(|s| *s != Shape::Circle) || bfactors.len() > 2 {
        return Err(GeometryError::InconsistentFibration(format!(
            "boundary must be a circle or torus, got {boundary}"
        )));
    }
    let (fiber_names, base_names): (Vec<&str>, Vec<&str>) = if *base == Shape::Point {
        (["y", "w"][..bfactors.len()].to_vec(), vec![])
    } else if base == boundary {
        (vec![], ["z", "w"][..bfactors.len()].to_vec())
    } else if *boundary == Shape::torus() && *base == Shape::Circle {
        (vec!["y"], vec!["z"])
    } else {
        return Err(GeometryError::InconsistentFibration(format!("{boundary} does not fiber over {base}")));
    };
    let fiber = Shape::from_factors(&vec![Shape::Circle; fiber_names.len()]);
    let stratum_fiber = fibered_pullback(
        &GroupBundle { base: base.clone(), group: IsotropyGroup::SemidirectRnRplus(base.dim()) },
        &Submersion { total: boundary.clone(), base: base.clone(), fiber: fiber.clone() },
    )?;

    let mut coords = vec![Coord::new("x", CoordKind::Collar)];
    let mut generators = vec![GeneratorSpec::new("xdx", "x", "x")];
    let mut vanishing = vec!["xdx".to_string()];
    for v in &fiber_names {
        coords.push(Coord::new(v, CoordKind::Circle));
        generators.push(GeneratorSpec::new(&format!("d{v}"), v, "1"));
    }
    for v in &base_names {
        coords.push(Coord::new(v, CoordKind::Circle));
        generators.push(GeneratorSpec::new(&format!("xd{v}"), v, "x"));
        vanishing.push(format!("xd{v}"));
    }
    let n = coords.len() as u32;
    let names: Vec<String> = generators.iter().map(|g| g.name.clone()).collect();
    let mut strata = vec![interior_stratum(n, Shape::product(Shape::Interval, boundary.clone()), &coords, &generators)];
    let group = stratum_fiber.isotropy.clone();
    strata.push(Stratum {
        id: "x=0".into(),
        dimension: n - 1,
        depth: 1,
        components: 1,
        orbit_base: base.clone(),
        fiber,
        isotropy: group.clone(),
        frame: FrameChart { generators: names, vanishing },
        approach: vec![Approach::ToZero("x".into())],
        fiber_coords: fiber_names.iter().map(|v| Coord::new(v, CoordKind::Circle)).collect(),
        base_coords: base_names.iter().map(|v| Coord::new(v, CoordKind::Circle)).collect(),
        groupoid: format!("pi^*(TB x| R+*) = fiber^2 x {group}"),
    });
    let class = if base == boundary && *base != Shape::Point {
        GeometryClass::AsymptoticallyHyperbolic
    } else {
        GeometryClass::Edge
    };
    let mut notes = Vec::new();
    if *base == Shape::Point {
        notes.push("B is a point: the edge groupoid is the b-groupoid".into());
    }
    if class == GeometryClass::AsymptoticallyHyperbolic {
        notes.push("B is the whole boundary: asymptotically hyperbolic".into());
    }
    let space = StratifiedSpace {
        id: format!("edge[{boundary} -> {base}]"),
        class,
        ambient_dim: n,
        coords,
        generators,
        strata,
        boundary_defining_functions: vec!["x".into()],
        blowups: vec![],
        notes,
    };
    space.validate()?;
    Ok(space)
}

/// Asymptotically hyperbolic collar: the edge space with `B = dM`.
pub fn build_ah_space(boundary: &Shape) -> Result<StratifiedSpace, GeometryError> {
    build_edge_space(boundary, boundary)
}

/// A smooth manifold without boundary (pair groupoid), the starting point
/// for desingularization.
pub fn build_smooth_space(name: &str, dim: u32) -> StratifiedSpace {
    let coords: Vec<Coord> = (0..dim).map(|i| Coord::new(&format!("u{i}"), CoordKind::Line)).collect();
    StratifiedSpace {
        id: name.to_string(),
        class: GeometryClass::Desingularization,
        ambient_dim: dim,
        strata: vec![interior_stratum(dim, Shape::from_factors(&vec![Shape::Interval; dim as usize]), &coords, &[])],
        coords,
        generators: vec![],
        boundary_defining_functions: vec![],
        blowups: vec![],
        notes: vec![],
    }
}

fn sphere(dim: u32) -> Result<Shape, GeometryError> {
    match dim {
        0 => Ok(Shape::Point),
        1 => Ok(Shape::Circle),
        d => Err(GeometryError::UnsupportedProfile(format!("normal sphere S^{d}"))),
    }
}

impl StratifiedSpace {
    pub fn stratum(&self, id: &str) -> Option<&Stratum> {
        self.strata.iter().find(|s| s.id == id)
    }

    pub fn interior(&self) -> Option<&Stratum> {
        self.strata.iter().find(|s| s.depth == 0)
    }

    pub fn boundary_strata(&self) -> impl Iterator<Item = &Stratum> {
        self.strata.iter().filter(|s| s.depth > 0)
    }

    pub fn max_depth(&self) -> u32 {
        self.strata.iter().map(|s| s.depth).max().unwrap_or(0)
    }

    /// Checks the structural invariants of the descriptor.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let interiors = self.strata.iter().filter(|s| s.depth == 0).count();
        if interiors != 1 {
            return Err(GeometryError::Invalid(format!("{interiors} depth-0 strata")));
        }
        let mut seen = BTreeSet::new();
        for s in &self.strata {
            if !seen.insert(&s.id) {
                return Err(GeometryError::Invalid(format!("duplicate stratum id `{}`", s.id)));
            }
            if s.fiber.dim() + s.orbit_base.dim() != s.dimension {
                return Err(GeometryError::Invalid(format!(
                    "stratum `{}`: dim fiber + dim base != {}",
                    s.id, s.dimension
                )));
            }
            if s.depth > 0 && s.frame.vanishing.len() as u32 != s.isotropy.dim() {
                return Err(GeometryError::Invalid(format!(
                    "stratum `{}`: {} vanishing generators for a group of dimension {}",
                    s.id,
                    s.frame.vanishing.len(),
                    s.isotropy.dim()
                )));
            }
        }
        Ok(())
    }

    /// Replaces the isotropy group of one stratum.
    pub fn retag(&self, stratum_id: &str, group: IsotropyGroup) -> Result<StratifiedSpace, GeometryError> {
        let mut out = self.clone();
        let s = out
            .strata
            .iter_mut()
            .find(|s| s.id == stratum_id)
            .ok_or_else(|| GeometryError::UnknownStratum(stratum_id.to_string()))?;
        s.isotropy = group;
        Ok(out)
    }

    /// Fredholm-groupoid predicate: a unique depth-0 stratum with trivial
    /// isotropy, and amenable isotropy on every boundary stratum.
    pub fn is_fredholm_groupoid(&self) -> GroupoidCheck {
        let interiors: Vec<&Stratum> = self.strata.iter().filter(|s| s.depth == 0).collect();
        if interiors.len() != 1 {
            return GroupoidCheck {
                holds: false,
                failing_stratum: interiors.get(1).map(|s| s.id.clone()),
                reason: Some(format!("{} depth-0 strata", interiors.len())),
            };
        }
        if interiors[0].isotropy != IsotropyGroup::Trivial {
            return GroupoidCheck {
                holds: false,
                failing_stratum: Some(interiors[0].id.clone()),
                reason: Some("interior is not a pair groupoid".into()),
            };
        }
        for s in self.boundary_strata() {
            if !s.isotropy.is_amenable() {
                return GroupoidCheck {
                    holds: false,
                    failing_stratum: Some(s.id.clone()),
                    reason: Some(format!("isotropy {} is not amenable", s.isotropy)),
                };
            }
        }
        GroupoidCheck { holds: true, failing_stratum: None, reason: None }
    }

    fn blown_points(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for r in &self.blowups {
            if let Center::Point(p) = &r.center {
                out.insert(p.clone(), r.new_hyperfaces[0].clone());
            }
        }
        out
    }

    fn curve_tangents(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for r in &self.blowups {
            if let Center::Curve(c) = &r.center {
                for (end, angle) in c.ends.iter().zip(c.tangent_angles) {
                    if let CurveEnd::AtPoint(p) = end {
                        out.push((p.clone(), angle));
                    }
                }
            }
        }
        out
    }

    /// Blows up a center, adding its normal sphere bundle as a new hyperface.
    pub fn blowup(&self, center: &Center) -> Result<StratifiedSpace, GeometryError> {
        match center {
            Center::Point(label) => self.blowup_point(label),
            Center::PointSet(labels) => {
                let mut labels_sorted = labels.clone();
                labels_sorted.sort();
                labels_sorted.dedup();
                if labels_sorted.len() != labels.len() {
                    return Err(GeometryError::Invalid("repeated point in point set".into()));
                }
                labels.iter().try_fold(self.clone(), |space, p| space.blowup_point(p))
            }
            Center::Curve(curve) => self.blowup_curve(curve),
        }
    }

    fn blowup_point(&self, label: &str) -> Result<StratifiedSpace, GeometryError> {
        if self.blown_points().contains_key(label) {
            return Err(GeometryError::CenterNotInterior(label.to_string()));
        }
        let n = self.ambient_dim;
        if n < 1 {
            return Err(GeometryError::Invalid("cannot blow up a point of a 0-dimensional space".into()));
        }
        let normal_sphere = sphere(n - 1)?;
        let id = format!("S[{label}]");
        let rdr = format!("r{label}dr");
        let dphi = format!("dphi{label}");
        // the center meets only the interior
        let depth = 1;
        let mut out = self.clone();
        // edge data with B = point: b-type hyperface
        let pulled = fibered_pullback(
            &GroupBundle { base: Shape::Point, group: IsotropyGroup::SemidirectRnRplus(0) },
            &Submersion { total: normal_sphere.clone(), base: Shape::Point, fiber: normal_sphere.clone() },
        )?;
        out.strata.push(Stratum {
            id: id.clone(),
            dimension: n - 1,
            depth,
            components: 1,
            orbit_base: Shape::Point,
            fiber: normal_sphere,
            isotropy: pulled.isotropy,
            frame: FrameChart { generators: vec![rdr.clone(), dphi], vanishing: vec![rdr] },
            approach: vec![],
            fiber_coords: vec![],
            base_coords: vec![],
            groupoid: "(S x S) x R+*".into(),
        });
        out.boundary_defining_functions.push(format!("r_{label}"));
        out.blowups.push(BlowupRecord {
            center: Center::Point(label.to_string()),
            parent: self.id.clone(),
            new_hyperfaces: vec![id],
            depth,
        });
        out.id = format!("[{} : {label}]", self.id);
        out.validate()?;
        Ok(out)
    }

    fn blowup_curve(&self, curve: &CurveCenter) -> Result<StratifiedSpace, GeometryError> {
        if !curve.transverse {
            return Err(GeometryError::NonTransverse {
                curve: curve.label.clone(),
                reason: "declared non-transverse to the hyperfaces it meets".into(),
            });
        }
        if self.blowups.iter().any(|r| matches!(&r.center, Center::Curve(c) if c.label == curve.label)) {
            return Err(GeometryError::CenterNotInterior(curve.label.clone()));
        }
        if self.ambient_dim != 2 {
            return Err(GeometryError::UnsupportedProfile("curve blow-ups are supported in dimension 2".into()));
        }
        let points = self.blown_points();
        let mut tangents = self.curve_tangents();
        let mut hit: Vec<String> = Vec::new();
        for (end, angle) in curve.ends.iter().zip(curve.tangent_angles) {
            match end {
                CurveEnd::AtPoint(p) => {
                    let face = points.get(p).ok_or_else(|| GeometryError::EndpointNotInPointSet {
                        curve: curve.label.clone(),
                        point: p.clone(),
                    })?;
                    if tangents.iter().any(|(q, a)| q == p && angle_close(*a, angle)) {
                        return Err(GeometryError::NonTransverse {
                            curve: curve.label.clone(),
                            reason: format!("tangent direction at `{p}` repeats another curve's"),
                        });
                    }
                    tangents.push((p.clone(), angle));
                    hit.push(face.clone());
                }
                CurveEnd::OnHyperface(h) => {
                    let s = self.stratum(h).ok_or_else(|| GeometryError::UnknownStratum(h.clone()))?;
                    if s.depth != 1 {
                        return Err(GeometryError::NonTransverse {
                            curve: curve.label.clone(),
                            reason: format!("`{h}` is not a hyperface"),
                        });
                    }
                    hit.push(h.clone());
                }
            }
        }
        let met_depth = hit.iter().filter_map(|h| self.stratum(h)).map(|s| s.depth).max().unwrap_or(0);
        let depth = met_depth + 1;
        let mut out = self.clone();
        // each endpoint cuts its hyperface; the remaining arcs carry the
        // groupoid (U1 \ U0)^2 x R+*
        for h in &hit {
            let s = out.strata.iter_mut().find(|s| &s.id == h).unwrap();
            if s.fiber == Shape::Circle && s.components == 1 && !s.groupoid.starts_with("(U1 \\ U0)") {
                s.fiber = Shape::Interval;
            } else {
                s.components += 1;
            }
            s.groupoid = "(U1 \\ U0)^2 x R+*".into();
        }
        let xdx = format!("x{}dx", curve.label);
        let xdz = format!("x{}dz", curve.label);
        let pulled = fibered_pullback(
            &GroupBundle { base: Shape::Interval, group: IsotropyGroup::SemidirectRnRplus(1) },
            &Submersion { total: Shape::Interval, base: Shape::Interval, fiber: Shape::Point },
        )?;
        let id = format!("S[{}]", curve.label);
        out.strata.push(Stratum {
            id: id.clone(),
            dimension: 1,
            depth,
            // the normal sphere of a curve in a surface has two points
            components: 2,
            orbit_base: Shape::Interval,
            fiber: Shape::Point,
            isotropy: pulled.isotropy,
            frame: FrameChart { generators: vec![xdx.clone(), xdz.clone()], vanishing: vec![xdx, xdz] },
            approach: vec![],
            fiber_coords: vec![],
            base_coords: vec![],
            groupoid: "pi^*(T^b L x| R+*)".into(),
        });
        out.boundary_defining_functions.push(format!("r_{}", curve.label));
        out.blowups.push(BlowupRecord {
            center: Center::Curve(curve.clone()),
            parent: self.id.clone(),
            new_hyperfaces: vec![id],
            depth,
        });
        out.id = format!("[{} : {}]", self.id, curve.label);
        out.validate()?;
        Ok(out)
    }

    /// Filtration `U_0 ⊂ U_1 ⊂ ...`: stratum ids grouped by depth.
    pub fn filtration(&self) -> Vec<Vec<String>> {
        let mut levels: Vec<Vec<String>> = vec![Vec::new(); self.max_depth() as usize + 1];
        for s in &self.strata {
            levels[s.depth as usize].push(s.id.clone());
        }
        levels
    }
}

fn angle_close(a: f64, b: f64) -> bool {
    let d = (a - b).rem_euclid(2.0 * std::f64::consts::PI);
    d.min(2.0 * std::f64::consts::PI - d) < 1e-9
}

/// Blows up a dimension-one stratified set: the points first, then the
/// lifted curves.
pub fn desingularize(
    space: &StratifiedSpace,
    points: &[String],
    curves: &[CurveCenter],
) -> Result<StratifiedSpace, GeometryError> {
    let mut out = space.blowup(&Center::PointSet(points.to_vec()))?;
    for c in curves {
        out = out.blowup(&Center::Curve(c.clone()))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn b_interval_has_two_ends() {
        let s = build_b_space(&[Shape::Interval]).unwrap();
        assert_eq!(s.strata.len(), 3);
        assert_eq!(s.interior().unwrap().depth, 0);
        for id in ["x=0", "x=1"] {
            let st = s.stratum(id).unwrap();
            assert_eq!(st.isotropy, IsotropyGroup::RealVector(1));
            assert_eq!(st.orbit_base, Shape::Point);
            assert_eq!(st.frame.vanishing, vec!["xdx"]);
        }
    }

    #[test]
    fn b_square_face_count() {
        let s = build_b_space(&[Shape::Interval, Shape::Interval]).unwrap();
        let depths: Vec<u32> = s.strata.iter().map(|s| s.depth).collect();
        assert_eq!(depths.iter().filter(|d| **d == 0).count(), 1);
        assert_eq!(depths.iter().filter(|d| **d == 1).count(), 4);
        assert_eq!(depths.iter().filter(|d| **d == 2).count(), 4);
        for st in s.boundary_strata() {
            assert_eq!(st.isotropy, IsotropyGroup::RealVector(st.depth));
            assert_eq!(st.fiber.dim() + st.depth, 2);
        }
    }

    #[test]
    fn b_cylinder_faces_are_circles() {
        let s = build_b_space(&[Shape::Interval, Shape::Circle]).unwrap();
        assert_eq!(s.strata.len(), 3);
        for st in s.boundary_strata() {
            assert_eq!(st.fiber, Shape::Circle);
            assert_eq!(st.isotropy, IsotropyGroup::RealVector(1));
        }
    }

    #[test]
    fn b_rejects_deep_corners() {
        let err = build_b_space(&[Shape::Interval, Shape::Interval, Shape::Interval]).unwrap_err();
        assert!(matches!(err, GeometryError::UnsupportedProfile(_)));
    }

    #[test]
    fn scattering_boundaries() {
        let s1 = build_scattering_space(1).unwrap();
        let ends: Vec<&Stratum> = s1.boundary_strata().collect();
        assert_eq!(ends.len(), 2);
        assert!(ends.iter().all(|e| e.isotropy == IsotropyGroup::RealVector(1)));
        assert!(s1.notes.iter().any(|n| n.contains("reduced to points")));
        let s2 = build_scattering_space(2).unwrap();
        let circle = s2.stratum("r=inf").unwrap();
        assert_eq!(circle.orbit_base, Shape::Circle);
        assert_eq!(circle.fiber, Shape::Point);
        assert_eq!(circle.isotropy, IsotropyGroup::RealVector(2));
        assert!(matches!(build_scattering_space(3), Err(GeometryError::UnsupportedDimension(3))));
    }

    #[test]
    fn edge_degenerations() {
        let b_like = build_edge_space(&Shape::Circle, &Shape::Point).unwrap();
        let face = b_like.stratum("x=0").unwrap();
        assert_eq!(face.isotropy, IsotropyGroup::RealVector(1));
        let cyl = build_b_space(&[Shape::Interval, Shape::Circle]).unwrap();
        let b_face = cyl.stratum("x=0").unwrap();
        assert_eq!(
            (face.dimension, face.depth, &face.orbit_base, &face.fiber, &face.isotropy),
            (b_face.dimension, b_face.depth, &b_face.orbit_base, &b_face.fiber, &b_face.isotropy)
        );

        let ah = build_edge_space(&Shape::Circle, &Shape::Circle).unwrap();
        assert_eq!(ah.class, GeometryClass::AsymptoticallyHyperbolic);
        assert_eq!(ah.stratum("x=0").unwrap().isotropy, IsotropyGroup::SemidirectRnRplus(1));

        let edge = build_edge_space(&Shape::torus(), &Shape::Circle).unwrap();
        let f = edge.stratum("x=0").unwrap();
        assert_eq!(f.orbit_base, Shape::Circle);
        assert_eq!(f.fiber, Shape::Circle);
        assert_eq!(f.isotropy, IsotropyGroup::SemidirectRnRplus(1));
        assert_eq!(f.frame.vanishing, vec!["xdx", "xdz"]);

        assert!(matches!(
            build_edge_space(&Shape::Circle, &Shape::torus()),
            Err(GeometryError::InconsistentFibration(_))
        ));
    }

    #[test]
    fn fibered_pullback_examples() {
        let s = fibered_pullback(
            &GroupBundle { base: Shape::Point, group: IsotropyGroup::RealVector(1) },
            &Submersion { total: Shape::Circle, base: Shape::Point, fiber: Shape::Circle },
        )
        .unwrap();
        assert_eq!(s.fiber, Shape::Circle);
        assert_eq!(s.isotropy, IsotropyGroup::RealVector(1));
        assert_eq!(s.groupoid, "(S x_B S) x R");

        let trivial = fibered_pullback(
            &GroupBundle { base: Shape::Circle, group: IsotropyGroup::Trivial },
            &Submersion { total: Shape::Circle, base: Shape::Circle, fiber: Shape::Point },
        )
        .unwrap();
        assert_eq!(trivial.isotropy, IsotropyGroup::Trivial);
        assert_eq!(trivial.orbit_base, Shape::Circle);

        let r2 = fibered_pullback(
            &GroupBundle { base: Shape::Point, group: IsotropyGroup::RealVector(2) },
            &Submersion { total: Shape::Point, base: Shape::Point, fiber: Shape::Point },
        )
        .unwrap();
        assert_eq!(r2.isotropy, IsotropyGroup::RealVector(2));

        let bad = fibered_pullback(
            &GroupBundle { base: Shape::Point, group: IsotropyGroup::RealVector(1) },
            &Submersion { total: Shape::Circle, base: Shape::Point, fiber: Shape::Point },
        );
        assert!(matches!(bad, Err(GeometryError::DimensionMismatch(_))));
    }

    #[test]
    fn predicate_on_builtins_and_retags() {
        let spaces = [
            build_b_space(&[Shape::Interval]).unwrap(),
            build_b_space(&[Shape::Interval, Shape::Interval]).unwrap(),
            build_scattering_space(1).unwrap(),
            build_scattering_space(2).unwrap(),
            build_edge_space(&Shape::torus(), &Shape::Circle).unwrap(),
            build_ah_space(&Shape::Circle).unwrap(),
        ];
        for s in &spaces {
            assert!(s.is_fredholm_groupoid().holds, "{}", s.id);
            for st in s.boundary_strata() {
                let bad = s
                    .retag(
                        &st.id,
                        IsotropyGroup::Tagged { name: "F_2".into(), amenable: false, dim: st.isotropy.dim() },
                    )
                    .unwrap();
                let check = bad.is_fredholm_groupoid();
                assert!(!check.holds);
                assert_eq!(check.failing_stratum.as_deref(), Some(st.id.as_str()));
            }
            let bad_interior = s.retag("interior", IsotropyGroup::RealVector(1)).unwrap();
            assert!(!bad_interior.is_fredholm_groupoid().holds);
        }
    }

    #[test]
    fn point_blowup_gives_b_hyperface() {
        let disk = build_smooth_space("D2", 2);
        let m1 = disk.blowup(&Center::Point("p".into())).unwrap();
        let s = m1.stratum("S[p]").unwrap();
        assert_eq!(s.fiber, Shape::Circle);
        assert_eq!(s.orbit_base, Shape::Point);
        assert_eq!(s.isotropy, IsotropyGroup::RealVector(1));
        assert_eq!(s.depth, 1);
        assert_eq!(m1.blowups.len(), 1);
        assert!(m1.is_fredholm_groupoid().holds);
        assert!(matches!(m1.blowup(&Center::Point("p".into())), Err(GeometryError::CenterNotInterior(_))));
    }

    #[test]
    fn curve_blowup_filtration() {
        let cyl = build_b_space(&[Shape::Interval, Shape::Circle]).unwrap();
        let curve = CurveCenter {
            label: "L".into(),
            ends: [CurveEnd::OnHyperface("x=0".into()), CurveEnd::OnHyperface("x=1".into())],
            transverse: true,
            tangent_angles: [0.0, 0.0],
        };
        let m2 = cyl.blowup(&Center::Curve(curve.clone())).unwrap();
        let levels = m2.filtration();
        assert_eq!(levels.len(), 3);
        assert_eq!(levels[0], vec!["interior"]);
        assert_eq!(levels[2], vec!["S[L]"]);
        for id in &levels[1] {
            let s = m2.stratum(id).unwrap();
            assert_eq!(s.groupoid, "(U1 \\ U0)^2 x R+*");
            assert_eq!(s.isotropy, IsotropyGroup::RealVector(1));
        }
        let s = m2.stratum("S[L]").unwrap();
        assert_eq!(s.isotropy, IsotropyGroup::SemidirectRnRplus(1));
        assert!(m2.is_fredholm_groupoid().holds);

        let mut slanted = curve;
        slanted.transverse = false;
        assert!(matches!(cyl.blowup(&Center::Curve(slanted)), Err(GeometryError::NonTransverse { .. })));
    }

    #[test]
    fn stratified_set_pipeline() {
        let m0 = build_smooth_space("S2", 2);
        let curves = vec![
            CurveCenter {
                label: "g1".into(),
                ends: [CurveEnd::AtPoint("p".into()), CurveEnd::AtPoint("q".into())],
                transverse: true,
                tangent_angles: [0.0, 1.0],
            },
            CurveCenter {
                label: "g2".into(),
                ends: [CurveEnd::AtPoint("p".into()), CurveEnd::AtPoint("q".into())],
                transverse: true,
                tangent_angles: [2.0, 3.0],
            },
        ];
        let m2 = desingularize(&m0, &["p".into(), "q".into()], &curves).unwrap();
        assert_eq!(m2.max_depth(), 2);
        assert_eq!(m2.blowups.len(), 4);
        // depth grows by one only when the deepest stratum is met
        let mut prev = 0;
        let mut space = m0.clone();
        for center in [Center::Point("p".into()), Center::Point("q".into())] {
            space = space.blowup(&center).unwrap();
            assert!(space.max_depth() <= prev + 1);
            prev = space.max_depth();
        }
        assert_eq!(prev, 1);

        let mut clash = curves.clone();
        clash[1].tangent_angles = [0.0, 3.0];
        assert!(desingularize(&m0, &["p".into(), "q".into()], &clash).is_err());
        let missing = desingularize(&m0, &["p".into()], &curves).unwrap_err();
        assert!(matches!(missing, GeometryError::EndpointNotInPointSet { .. }));
    }
}
