use proptest::prelude::*;
use thinlayer::discretization::{mesh_cell, mesh_micro, MicroMesh};
use thinlayer::geometry::{build_reference_geometry, tile_layer, ChannelSpec, ReferenceGeometry};
use thinlayer::macro_solver::{init_macro, MacroProblem};
use thinlayer::micro::{init_micro, MicroProblem};
use thinlayer::problem::{InitialData, ProblemData, SpeciesData};
use thinlayer::transform::{limit_transform, TransformSpec};
use thinlayer::unfolding::{
    average, gradient_commutation_check, gradient_commutation_check_on, two_scale_error, unfold, unfold_check,
    UnfoldedField,
};

fn geometry() -> ReferenceGeometry {
    build_reference_geometry(ChannelSpec::straight(0.5, 0.5), 1.0).unwrap()
}

fn micro(cells: usize, r: usize) -> MicroMesh {
    let g = geometry();
    mesh_micro(&g, &tile_layer(&g, 1.0 / cells as f64).unwrap(), r).unwrap()
}

fn field(m: &MicroMesh, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
    m.mesh.vertices.iter().map(|&x| f(x)).collect()
}

#[test]
fn unfolded_constant_is_constant() {
    let m = micro(4, 4);
    let t = unfold(&m, &field(&m, |_| 2.5)).unwrap();
    assert!(t.values.iter().all(|&v| v == 2.5));
}

#[test]
fn unfolded_ordinate_has_gradient_eps_e2() {
    for cells in [2, 4, 8] {
        let m = micro(cells, 4);
        let eps = 1.0 / cells as f64;
        let t = unfold(&m, &field(&m, |x| x[1])).unwrap();
        for k in 0..cells {
            for c in 0..m.cell_mesh.triangles.len() {
                let g = m.cell_mesh.gradient(c, t.cell(k));
                assert!(g[0].abs() < 1e-13 && (g[1] - eps).abs() < 1e-13);
            }
        }
    }
}

#[test]
fn zero_field_averages_to_zero() {
    let m = micro(4, 4);
    let phi = UnfoldedField::zeros(4, m.cell_mesh.n_dofs());
    assert!(average(&m, &phi).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn matched_mesh_identities_hold_for_every_scale() {
    for cells in [2, 4, 8, 16] {
        let c = unfold_check(&micro(cells, 4), 100, 11).unwrap();
        assert!(c.norm_identity <= 1e-10, "{c:?}");
        assert!(c.adjointness <= 1e-12, "{c:?}");
        assert!(c.gradient <= 1e-13, "{c:?}");
        assert!(c.average_bound <= 1.0 + 1e-10, "{c:?}");
    }
}

#[test]
fn mismatched_mesh_gradient_defect_decreases() {
    let g = geometry();
    let defects: Vec<f64> = [4, 8, 16]
        .iter()
        .map(|&r| {
            let m = micro(4, r);
            let v = field(&m, |x| (3.0 * x[0]).sin() + x[1] * x[1]);
            gradient_commutation_check_on(&m, &v, &mesh_cell(&g, r + 1).unwrap()).unwrap()
        })
        .collect();
    assert!(defects[0] > 1e-8);
    assert!(defects.windows(2).all(|w| w[1] < w[0]), "{defects:?}");
    assert!(defects[2] / defects[0] < 0.4, "{defects:?}");
    let nested = {
        let m = micro(4, 8);
        gradient_commutation_check_on(&m, &field(&m, |x| (3.0 * x[0]).sin() + x[1] * x[1]), &mesh_cell(&g, 16).unwrap()).unwrap()
    };
    assert!(nested <= 1e-13);
}

fn pair(initial: InitialData) -> (MicroProblem, MacroProblem) {
    let g = geometry();
    let s = SpeciesData::isotropic(1.0, initial);
    let spec = TransformSpec::identity(1.0);
    let mi = MicroProblem::new(&g, &tile_layer(&g, 0.25).unwrap(), 4, spec.clone(), ProblemData::single(s.clone())).unwrap();
    let ma = MacroProblem::new(&g, limit_transform(&spec).unwrap(), ProblemData::single(s), 4).unwrap();
    (mi, ma)
}

#[test]
fn compatible_constants_have_no_two_scale_error() {
    for c in [0.0, 1.7] {
        let (mi, ma) = pair(InitialData::Constant(c));
        let e = two_scale_error(&mi, &init_micro(&mi).unwrap(), &ma, &init_macro(&ma).unwrap()).unwrap();
        assert!(e[0].bulk_plus <= 1e-12 && e[0].bulk_minus <= 1e-12 && e[0].layer <= 1e-12, "{e:?}");
    }
}

#[test]
fn two_scale_error_checks_times() {
    let (mi, ma) = pair(InitialData::Constant(1.0));
    let mut s = init_macro(&ma).unwrap();
    s.t = 0.5;
    assert!(two_scale_error(&mi, &init_micro(&mi).unwrap(), &ma, &s).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn average_undoes_unfold(cells in 2usize..10, r in 2usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = micro(cells, r);
        let v: Vec<f64> = (0..m.mesh.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let back = average(&m, &unfold(&m, &v).unwrap()).unwrap();
        for vs in &m.channel_vertices {
            for &d in vs {
                prop_assert!((back[d] - v[d]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn affine_fields_commute_with_gradients(cells in 2usize..10, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let m = micro(cells, 3);
        let v = field(&m, |x| 1.0 + a * x[0] + b * x[1]);
        prop_assert!(gradient_commutation_check(&m, &v).unwrap() <= 1e-13);
    }

    #[test]
    fn unfolding_evaluates_at_cell_coordinates(cells in 2usize..10, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let m = micro(cells, 3);
        let eps = 1.0 / cells as f64;
        let t = unfold(&m, &field(&m, |x| a * x[0] + b * x[1])).unwrap();
        for k in 0..cells {
            for (c, z) in m.cell_mesh.vertices.iter().enumerate() {
                let expect = a * eps * (k as f64 + z[0]) + b * eps * z[1];
                prop_assert!((t.cell(k)[c] - expect).abs() <= 1e-12);
            }
        }
    }
}
