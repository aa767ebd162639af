use fredholm_core::geometry::*;
use proptest::prelude::*;

fn builtins() -> Vec<StratifiedSpace> {
    vec![
        build_b_space(&[Shape::Interval]).unwrap(),
        build_b_space(&[Shape::Interval, Shape::Interval]).unwrap(),
        build_b_space(&[Shape::Interval, Shape::Circle]).unwrap(),
        build_scattering_space(1).unwrap(),
        build_scattering_space(2).unwrap(),
        build_transformation_space(1).unwrap(),
        build_edge_space(&Shape::torus(), &Shape::Circle).unwrap(),
        build_edge_space(&Shape::Circle, &Shape::Point).unwrap(),
        build_ah_space(&Shape::Circle).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn non_amenable_retag_breaks_the_predicate(which in 0usize..9, pick in 0usize..8) {
        let s = &builtins()[which];
        prop_assert!(s.is_fredholm_groupoid().holds);
        let ids: Vec<String> = s.boundary_strata().map(|t| t.id.clone()).collect();
        let id = &ids[pick % ids.len()];
        let dim = s.stratum(id).unwrap().isotropy.dim();
        let bad = s.retag(id, IsotropyGroup::Tagged { name: "F_2".into(), amenable: false, dim }).unwrap();
        let check = bad.is_fredholm_groupoid();
        prop_assert!(!check.holds);
        prop_assert_eq!(check.failing_stratum.as_deref(), Some(id.as_str()));
    }

    #[test]
    fn point_blowups_add_one_level(n in 1usize..5) {
        let mut m = build_smooth_space("D2", 2);
        prop_assert_eq!(m.max_depth(), 0);
        for k in 0..n {
            let before = m.max_depth();
            m = m.blowup(&Center::Point(format!("p{k}"))).unwrap();
            let rec = m.blowups.last().unwrap();
            // interior points meet only the depth-0 stratum
            prop_assert_eq!(rec.depth, 1);
            prop_assert_eq!(m.max_depth(), before.max(1));
            prop_assert!(m.is_fredholm_groupoid().holds);
        }
        prop_assert_eq!(m.boundary_strata().count(), n);
    }
}

#[test]
fn curve_through_hyperfaces_deepens_by_one() {
    let cyl = build_b_space(&[Shape::Interval, Shape::Circle]).unwrap();
    let before = cyl.max_depth();
    let curve = CurveCenter {
        label: "L".into(),
        ends: [CurveEnd::OnHyperface("x=0".into()), CurveEnd::OnHyperface("x=1".into())],
        transverse: true,
        tangent_angles: [0.0, 0.0],
    };
    let m = cyl.blowup(&Center::Curve(curve)).unwrap();
    assert_eq!(m.max_depth(), before + 1);
    assert_eq!(m.blowups[0].depth, before + 1);
}

#[test]
fn square_face_count() {
    let sq = build_b_space(&[Shape::Interval, Shape::Interval]).unwrap();
    let depths: Vec<u32> = sq.strata.iter().map(|s| s.depth).collect();
    assert_eq!(depths.iter().filter(|d| **d == 0).count(), 1);
    assert_eq!(depths.iter().filter(|d| **d == 1).count(), 4);
    assert_eq!(depths.iter().filter(|d| **d == 2).count(), 4);
}
