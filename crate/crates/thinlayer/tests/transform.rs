use proptest::prelude::*;
use thinlayer::geometry::Scale;
use thinlayer::transform::{
    check_assumptions, eval_psi_eps, fd_grad, fd_velocity, jacobian_data, limit_transform, transformed_coefficients,
    AuditCeilings, AuditFlag, JacobianData, LimitTransform, Mat2, PinchParams, TransformError, TransformSpec, Vec2,
};

fn pinch() -> TransformSpec {
    TransformSpec::pinch(PinchParams::default(), 1.0).unwrap()
}

#[test]
fn pinched_layer_point_matches_cell_formula() {
    let spec = pinch();
    let scale = Scale::from_cells(4);
    for i in 0..100 {
        for j in 0..100 {
            let x = [0.25 * (i as f64 + 0.5) / 100.0 + 0.0, 0.25 * (-1.0 + 2.0 * j as f64 / 99.0)];
            let y = eval_psi_eps(&spec, scale, 1.0, x).unwrap();
            let p = spec.evolution.psi(1.0, 0.0, [4.0 * x[0], 4.0 * x[1]]);
            assert!((y[0] - 0.25 * p[0]).abs() < 1e-12 && (y[1] - 0.25 * p[1]).abs() < 1e-12);
        }
    }
    let y = eval_psi_eps(&spec, scale, 1.0, [0.125, 0.0]).unwrap();
    assert!(y[0] < 0.125 + 1e-15 && (y[1]).abs() < 1e-15);
}

#[test]
fn folding_pinch_is_flagged_not_rejected_by_the_audit() {
    let p = PinchParams { amplitude: 1.3, ramp_time: 0.0, ..Default::default() };
    let spec = TransformSpec::pinch(p, 0.5).unwrap();
    let report = check_assumptions(&spec, &[Scale::from_cells(4)], 16, &AuditCeilings::default());
    assert!(report.flagged());
    assert!(matches!(report.rows[0].flags[0], AuditFlag::SingularJacobian { samples, det, .. } if samples > 0 && det <= 0.0));
    assert!(matches!(limit_transform(&spec), Err(TransformError::SingularJacobian { .. })));
    let pts = [[0.125, 0.0]];
    assert!(matches!(jacobian_data(&spec, Scale::from_cells(4), 0.2, &pts), Err(TransformError::SingularJacobian { .. })));
}

#[test]
fn identity_audit_has_unit_jacobian_and_no_motion() {
    let spec = TransformSpec::identity(0.5);
    let report = check_assumptions(&spec, &[4, 8, 16].map(Scale::from_cells), 8, &AuditCeilings::default());
    for r in &report.rows {
        assert_eq!((r.displacement, r.velocity, r.jacobian_norm, r.j_min, r.j_max), (0.0, 0.0, 1.0, 1.0, 1.0));
        assert_eq!(r.shift, [0.0, 0.0]);
        assert!(r.flags.is_empty());
    }
}

#[test]
fn pinch_starts_from_rest() {
    let lt = limit_transform(&pinch()).unwrap();
    for i in 0..=10 {
        for j in 0..=10 {
            let z = [i as f64 / 10.0, -1.0 + j as f64 / 5.0];
            assert_eq!(lt.data(0.0, 0.3, z).j, 1.0);
            let p = lt.psi0(0.0, 0.3, z);
            assert!((p[0] - 0.3 - z[0]).abs() < 1e-15 && p[1] == z[1]);
        }
    }
}

#[test]
fn audit_displacement_is_bounded_by_amplitude_and_cell_diameter() {
    let report = check_assumptions(&pinch(), &[4, 8, 16].map(Scale::from_cells), 16, &AuditCeilings::default());
    let diam = 5f64.sqrt();
    for r in &report.rows {
        assert!(r.displacement > 0.0 && r.displacement <= 0.3 * diam);
    }
}

fn explicit_transform(d: [f64; 3], f: [f64; 4]) -> [f64; 3] {
    let det = f[0] * f[3] - f[1] * f[2];
    let g = [f[3] / det, -f[1] / det, -f[2] / det, f[0] / det];
    let (a, b, c) = (d[0], d[1], d[2]);
    let m00 = g[0] * (a * g[0] + b * g[1]) + g[1] * (b * g[0] + c * g[1]);
    let m01 = g[0] * (a * g[2] + b * g[3]) + g[1] * (b * g[2] + c * g[3]);
    let m11 = g[2] * (a * g[2] + b * g[3]) + g[3] * (b * g[2] + c * g[3]);
    [m00, m01, m11]
}

proptest! {
    #[test]
    fn analytic_jacobian_matches_differences(t in 0.0f64..1.0, xp in 0.0f64..1.0, z1 in 0.001f64..0.999, z2 in -0.999f64..0.999) {
        let spec = pinch();
        let evo = spec.evolution.as_ref();
        let d = spec.local_data(t, xp, [z1, z2], 1.0);
        let fd = fd_grad(evo, t, xp, [z1, z2], 1e-5);
        prop_assert!((d.j - fd.determinant()).abs() <= 1e-6);
        prop_assert!((d.f - fd).amax() <= 1e-6);
        let v = fd_velocity(evo, t.max(1e-4).min(1.0 - 1e-4), xp, [z1, z2], 1e-6);
        let a = evo.velocity(t.max(1e-4).min(1.0 - 1e-4), xp, [z1, z2]);
        prop_assert!((v[0] - a[0]).abs() <= 1e-6 && (v[1] - a[1]).abs() <= 1e-6);
    }

    #[test]
    fn piola_identity(t in 0.05f64..0.95, xp in 0.0f64..1.0, z1 in 0.01f64..0.99, z2 in -0.99f64..0.99) {
        let lt = LimitTransform::unchecked(pinch());
        let h = 1e-5;
        let jb = |z: [f64; 2]| {
            let d = lt.data(t, xp, z);
            d.b_tilde * d.j
        };
        let div = (jb([z1 + h, z2])[0] - jb([z1 - h, z2])[0]) / (2.0 * h) + (jb([z1, z2 + h])[1] - jb([z1, z2 - h])[1]) / (2.0 * h);
        let dj = (lt.data(t + h, xp, [z1, z2]).j - lt.data(t - h, xp, [z1, z2]).j) / (2.0 * h);
        prop_assert!((dj - div).abs() <= 1e-4);
    }

    #[test]
    fn faces_are_fixed(cells in 2usize..32, x1 in 0.0f64..1.0, t in 0.0f64..1.0, top in any::<bool>()) {
        let scale = Scale::from_cells(cells);
        let eps = scale.eps();
        let x = [x1, if top { eps } else { -eps }];
        let y = eval_psi_eps(&pinch(), scale, t, x).unwrap();
        prop_assert!((y[0] - x[0]).abs() <= 1e-15 && (y[1] - x[1]).abs() <= 1e-15);
    }

    #[test]
    fn transformed_diffusion_matches_explicit_products(
        a in 0.1f64..3.0, c in 0.1f64..3.0, s in -0.9f64..0.9,
        f00 in 0.5f64..1.5, f01 in -0.5f64..0.5, f10 in -0.5f64..0.5, f11 in 0.5f64..1.5,
        q0 in -2.0f64..2.0, q1 in -2.0f64..2.0,
    ) {
        let b = s * (a * c).sqrt();
        let f = Mat2::new(f00, f01, f10, f11);
        let det = f.determinant();
        prop_assume!((0.5..=2.0).contains(&det));
        let f_inv = f.try_inverse().unwrap();
        let jd = JacobianData { f, f_inv, j: det, psi_dot: Vec2::zeros(), b_tilde: Vec2::zeros() };
        let (dt, qt) = transformed_coefficients(&Mat2::new(a, b, b, c), &Vec2::new(q0, q1), &jd).unwrap();
        let m = explicit_transform([a, b, c], [f00, f01, f10, f11]);
        let scale = dt.amax();
        prop_assert!((dt[(0, 0)] - m[0]).abs() <= 1e-13 * scale);
        prop_assert!((dt[(0, 1)] - m[1]).abs() <= 1e-13 * scale);
        prop_assert!((dt[(1, 0)] - m[1]).abs() <= 1e-13 * scale);
        prop_assert!((dt[(1, 1)] - m[2]).abs() <= 1e-13 * scale);
        prop_assert!(m[0] > 0.0 && m[0] * m[2] - m[1] * m[1] > 0.0);
        let qx = (f11 * q0 - f01 * q1) / det;
        let qy = (-f10 * q0 + f00 * q1) / det;
        prop_assert!((qt[0] - qx).abs() <= 1e-12 && (qt[1] - qy).abs() <= 1e-12);
    }
}
