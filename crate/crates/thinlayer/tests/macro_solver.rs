use proptest::prelude::*;
use thinlayer::discretization::{assemble_operator, assemble_weighted_mass, mesh_cell, RegionScale};
use thinlayer::error::Error;
use thinlayer::geometry::{build_reference_geometry, ChannelSpec, ReferenceGeometry};
use thinlayer::macro_solver::{
    coupling_defect, evolved_area, flux_jump_residual, init_macro, macro_mass, push_forward, push_forward_mesh,
    solve_macro, step_macro, write_evolved_cells, write_flux_csv, MacroProblem, MacroState,
};
use thinlayer::problem::{InitialData, ProblemData, Reaction, SpeciesData};
use thinlayer::transform::{limit_transform, LimitTransform, Mat2, PinchParams, TransformSpec, Vec2};

fn geometry() -> ReferenceGeometry {
    build_reference_geometry(ChannelSpec::straight(0.5, 0.5), 1.0).unwrap()
}

fn pinch(amplitude: f64, horizon: f64) -> TransformSpec {
    TransformSpec::pinch(PinchParams { amplitude, ..Default::default() }, horizon).unwrap()
}

fn problem(spec: &TransformSpec, s: SpeciesData, r: usize) -> MacroProblem {
    MacroProblem::new(&geometry(), limit_transform(spec).unwrap(), ProblemData::single(s), r).unwrap()
}

fn bump() -> InitialData {
    "gaussian_bump(0.3, 0.2, 0.3)".parse().unwrap()
}

fn all_values(s: &MacroState) -> impl Iterator<Item = &f64> {
    s.bulk_plus[0].iter().chain(&s.bulk_minus[0]).chain(&s.cells[0])
}

#[test]
fn static_cell_blocks_are_plain_assembly() {
    let d = Mat2::new(1.3, 0.2, 0.2, 0.7);
    let q = Vec2::new(0.4, -0.3);
    let s = SpeciesData::uniform(Mat2::identity(), Vec2::zeros(), InitialData::Constant(1.0)).with_layer_constant(d, q);
    let p = problem(&TransformSpec::identity(1.0), s.clone(), 4);
    let direct = assemble_operator(&p.cell, &|_| d, &|_| [q[0], q[1]], RegionScale::uniform(1.0), RegionScale::uniform(1.0)).unwrap();
    let mass = assemble_weighted_mass(&p.cell, &|_| 1.0, RegionScale::uniform(1.0)).unwrap();
    for node in [0, 7, p.quad.len() - 1] {
        assert_eq!(p.cell_operator(&s, 0.5, node).unwrap().values(), direct.values());
        assert_eq!(p.cell_mass(0.5, node).unwrap().values(), mass.values());
    }
    let pinched = problem(&pinch(0.3, 1.0), s.clone(), 4);
    let at_rest = pinched.cell_operator(&s, 0.0, 3).unwrap();
    let worst = at_rest.values().iter().zip(direct.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-14);
}

#[test]
fn zero_data_stays_zero() {
    for spec in [TransformSpec::identity(0.5), pinch(0.3, 0.5)] {
        let p = problem(&spec, SpeciesData::isotropic(1.0, InitialData::Constant(0.0)), 2);
        let tr = solve_macro(&p, 0.1, 0.5, 1).unwrap();
        assert!(tr.states.iter().all(|s| all_values(s).all(|&v| v == 0.0)));
    }
}

#[test]
fn coupling_is_exact_after_every_step() {
    let p = problem(&pinch(0.3, 0.5), SpeciesData::isotropic(1.0, bump()), 4);
    let tr = solve_macro(&p, 0.05, 0.5, 1).unwrap();
    for s in &tr.states {
        assert!(coupling_defect(&p, s) <= 1e-12);
    }
}

#[test]
fn linear_bulk_decay_follows_the_scalar_ode() {
    let decay: Reaction = "linear_decay(1)".parse().unwrap();
    let s = SpeciesData::isotropic(1.0, InitialData::Constant(1.0)).with_reactions(decay.clone(), decay, Reaction::Zero);
    let p = problem(&TransformSpec::identity(1.0), s, 4);
    let dt = 0.02;
    let last = solve_macro(&p, dt, 1.0, 1000).unwrap();
    let last = last.last();
    let mean = last.bulk_plus[0].iter().sum::<f64>() / last.bulk_plus[0].len() as f64;
    assert!((mean - (-1.0f64).exp()).abs() <= 2.0 * dt);
}

#[test]
fn static_push_forward_is_a_translation() {
    let p = problem(&TransformSpec::identity(1.0), SpeciesData::isotropic(1.0, bump()), 2);
    let s = init_macro(&p).unwrap();
    let cells = push_forward(&p, &s).unwrap();
    assert_eq!(cells.len(), p.quad.len());
    for c in &cells {
        for (v, z) in c.vertices.iter().zip(&p.cell.vertices) {
            assert_eq!(*v, [c.x + z[0], z[1]]);
        }
        assert_eq!(c.triangles, p.cell.triangles);
        assert_eq!(c.values[0], s.cell_values(0, c.node, p.n_cell()));
        assert!((c.area - 1.0).abs() < 1e-12);
    }
    let mut out = Vec::new();
    write_evolved_cells(&cells[..1], 0.0, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), p.cell.vertices.len() + p.cell.triangles.len());
    assert!(text.starts_with("0 0.0 v "));
}

#[test]
fn pinched_cell_area_matches_jacobian_integral() {
    let lim = limit_transform(&pinch(0.3, 1.0)).unwrap();
    let cell = mesh_cell(&geometry(), 64).unwrap();
    for xp in [0.0, 0.125, 0.25, 0.6] {
        let pf = push_forward_mesh(&lim, &cell, 1.0, xp, 0).unwrap();
        let area = evolved_area(&lim, &cell, 1.0, xp, 4);
        assert!((pf.area - area).abs() <= 1e-6);
        assert!(area < 1.0);
    }
}

#[test]
fn folding_cell_is_reported() {
    let p = PinchParams { amplitude: 1.3, ramp_time: 0.0, ..Default::default() };
    let lim = LimitTransform::unchecked(TransformSpec::pinch(p, 1.0).unwrap());
    let cell = mesh_cell(&geometry(), 8).unwrap();
    let err = push_forward_mesh(&lim, &cell, 0.5, 0.25, 3).unwrap_err();
    assert!(matches!(err, Error::FoldedCell { node: 3, area, .. } if area <= 0.0));
}

#[test]
fn random_state_has_a_large_flux_residual() {
    use rand::{Rng, SeedableRng};
    let spec = TransformSpec::identity(2.0);
    let p = problem(&spec, SpeciesData::isotropic(1.0, "two_reservoir(1, 0)".parse().unwrap()), 4);
    let tr = solve_macro(&p, 0.01, 2.0, 10_000).unwrap();
    let converged = flux_jump_residual(&p, tr.last(), 0).unwrap().iter().map(|r| r.residual()).fold(0.0, f64::max);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut noisy = tr.last().clone();
    for v in noisy.bulk_plus[0].iter_mut().chain(noisy.bulk_minus[0].iter_mut()) {
        *v = rng.gen_range(0.0..1.0);
    }
    let random = flux_jump_residual(&p, &noisy, 0).unwrap().iter().map(|r| r.residual()).fold(0.0, f64::max);
    assert!(random > 10.0 * converged, "{random} vs {converged}");

    let rows: Vec<_> = flux_jump_residual(&p, tr.last(), 0).unwrap().into_iter().map(|r| (2.0, 0, r)).collect();
    let mut out = Vec::new();
    write_flux_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,node,species,flux_plus,flux_minus,jump,residual");
    assert_eq!(text.lines().count(), rows.len() + 1);
}

#[test]
fn pinched_constants_keep_their_mass() {
    let p = problem(&pinch(0.3, 1.0), SpeciesData::isotropic(1.0, InitialData::Constant(1.0)), 2);
    let s0 = init_macro(&p).unwrap();
    let s1 = step_macro(&p, &step_macro(&p, &s0, 0.4).unwrap(), 0.3).unwrap();
    let (m0, m1) = (macro_mass(&p, &s0).unwrap()[0], macro_mass(&p, &s1).unwrap()[0]);
    assert!((m0 - 3.0).abs() < 1e-12);
    assert!((m1 - m0).abs() <= 1e-10 * m0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mass_is_conserved_for_random_coefficients(
        dp in 0.2f64..2.0, dm in 0.2f64..2.0, dl in 0.2f64..2.0,
        qx in -1.0f64..1.0, qy in -1.0f64..1.0, amp in 0.0f64..0.6,
    ) {
        let mut s = SpeciesData::uniform(Mat2::identity() * dp, Vec2::new(qx, qy), bump())
            .with_layer_constant(Mat2::new(dl, 0.1, 0.1, 1.0), Vec2::new(qy, qx));
        s.d_minus = Mat2::identity() * dm;
        s.q_minus = Vec2::new(-qy, qx);
        let p = problem(&pinch(amp, 0.5), s, 2);
        let tr = solve_macro(&p, 0.1, 0.5, 1).unwrap();
        let m0 = macro_mass(&p, &tr.states[0]).unwrap()[0];
        for st in &tr.states {
            prop_assert!((macro_mass(&p, st).unwrap()[0] - m0).abs() <= 1e-8 * m0);
            prop_assert!(coupling_defect(&p, st) <= 1e-12);
        }
    }

    #[test]
    fn static_constants_are_stationary(c in -5.0f64..5.0, dt in 0.001f64..0.5) {
        let p = problem(&TransformSpec::identity(1.0), SpeciesData::isotropic(1.0, InitialData::Constant(c)), 2);
        let s1 = step_macro(&p, &init_macro(&p).unwrap(), dt).unwrap();
        prop_assert!(all_values(&s1).all(|v| (v - c).abs() <= 1e-12 * (1.0 + c.abs())));
    }
}
