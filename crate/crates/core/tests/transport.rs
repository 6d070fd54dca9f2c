use std::f64::consts::PI;
use std::sync::Arc;

use dialyzer_core::flow::{compute_velocity, HydraulicParams, HydraulicState, VelocityField};
use dialyzer_core::mesh::{AxiGeometry, BoundaryTag, Mesh, Resolution, Subdomain};
use dialyzer_core::transport::{
    outlet_concentration, reaction_jacobian, reaction_source, BoundaryData, ConcentrationField, ReactionParams,
    SpeciesParams, TransportConfig, TransportSolver, N_SPECIES,
};
use proptest::prelude::*;

fn geometry() -> AxiGeometry {
    AxiGeometry::new(1.0, 0.3, 0.85, 1.0).unwrap()
}

fn species(alpha: [f64; N_SPECIES]) -> [SpeciesParams; N_SPECIES] {
    let d = [(0.3, 1.5), (0.09, 0.09), (0.09, 0.09), (0.3, 1.5), (0.3, 1.5)];
    std::array::from_fn(|s| SpeciesParams {
        d_blood: d[s].0,
        d_dialysate: d[s].1,
        alpha: alpha[s],
        sieving: 1.0,
        crosses_membrane: !(s == 1 || s == 2),
    })
}

fn config(reactions: ReactionParams) -> TransportConfig {
    TransportConfig {
        peclet: 1.0,
        eps2: 0.01,
        species: species([0.8, 0.0, 0.0, 0.4, 0.4]),
        reactions,
        newton_tol: 1e-10,
        newton_max_iter: 30,
        streamline_diffusion: false,
    }
}

fn rp(d1: f64, d2: f64, d3: f64, fd: f64) -> ReactionParams {
    ReactionParams {
        delta1: d1,
        delta2: d2,
        delta3: d3,
        fd,
    }
}

fn shipped_reactions() -> ReactionParams {
    rp(0.141386, 1.0, 2.47857, 0.03)
}

fn solver(res: Resolution) -> TransportSolver {
    TransportSolver::new(Arc::new(Mesh::build(geometry(), res).unwrap())).unwrap()
}

fn flowing(mesh: &Mesh, permeability: f64) -> VelocityField {
    let hp = HydraulicParams {
        permeability,
        viscosity: 1.0,
    };
    let st = HydraulicState {
        q_blood: PI * 0.09,
        q_dialysate: 1.67 * PI * 0.09,
        p_in_blood: 1.0,
        p_out_blood: 0.6,
        p_in_dialysate: 0.2,
        p_out_dialysate: 0.3,
    };
    compute_velocity(mesh, &hp, &st).unwrap()
}

fn table1() -> BoundaryData {
    BoundaryData {
        inlet_blood: [0.11, 3.71602, 0.0577928, 5.03048, 1.37152],
        inlet_dialysate: [1.25, 0.0, 0.0, 0.0, 0.0],
    }
}

/// Deterministic pseudo-random values in `[lo, hi)`.
fn lcg_values(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            lo + (hi - lo) * ((s >> 11) as f64 / (1u64 << 53) as f64)
        })
        .collect()
}

fn positive_state() -> impl Strategy<Value = [f64; N_SPECIES]> {
    prop::array::uniform5(0.0f64..10.0)
}

fn reaction_params() -> impl Strategy<Value = ReactionParams> {
    (0.0f64..5.0, 0.0f64..5.0, 0.0f64..5.0, 0.01f64..5.0).prop_map(|(a, b, c, d)| rp(a, b, c, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn reactions_conserve_calcium_albumin_and_citrate(c in positive_state(), p in reaction_params()) {
        let f = reaction_source(&c, &p);
        prop_assert_eq!(f[1] + f[2], 0.0);
        prop_assert_eq!(f[3] + f[4], 0.0);
        // f[0] is the rounded sum of the two rates; the identity holds up to that rounding
        let scale = f[1].abs() + f[3].abs();
        prop_assert!((f[0] + f[2] + f[4]).abs() <= 2.0 * f64::EPSILON * scale);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn jacobian_matches_central_differences(c in positive_state(), p in reaction_params()) {
        let j = reaction_jacobian(&c, &p);
        let h = 1e-5;
        for t in 0..N_SPECIES {
            let mut plus = c;
            let mut minus = c;
            plus[t] += h;
            minus[t] -= h;
            let (fp, fm) = (reaction_source(&plus, &p), reaction_source(&minus, &p));
            for s in 0..N_SPECIES {
                let fd = (fp[s] - fm[s]) / (2.0 * h);
                prop_assert!((fd - j[s][t]).abs() <= 1e-6 * (1.0 + j[s][t].abs()), "({}, {}): {} vs {}", s, t, fd, j[s][t]);
            }
        }
    }

    #[test]
    fn calcium_rows_of_the_jacobian_cancel(c in positive_state(), p in reaction_params()) {
        let j = reaction_jacobian(&c, &p);
        for t in 0..N_SPECIES {
            let sum = j[0][t] + j[2][t] + j[4][t];
            prop_assert!(sum.abs() <= 4.0 * f64::EPSILON * (j[0][t].abs() + j[2][t].abs() + j[4][t].abs()));
        }
    }
}

#[test]
fn linear_kinetics_couple_only_through_bound_calcium() {
    let s = solver(Resolution::new(4, 2, 2, 2));
    let u = VelocityField::at_rest(s.mesh());
    let cfg = config(rp(0.0, 0.0, 0.0, 0.5));
    let c = ConcentrationField::from_values(lcg_values(3, s.n_dofs(), 0.1, 2.0));
    let (a, _) = s.assemble_newton_system(&u, &cfg, &table1(), &c).unwrap();
    for v in 0..s.mesh().n_vertices() {
        for sp in 0..N_SPECIES {
            let row = N_SPECIES * v + sp;
            for w in 0..s.mesh().n_vertices() {
                for t in 0..N_SPECIES {
                    let val = a.get(row, N_SPECIES * w + t);
                    if t != sp && val != 0.0 {
                        // only dF/dc3 survives, on the same node
                        assert!(t == 2 && w == v && (sp == 0 || sp == 1), "row {row} col ({w}, {t}) = {val}");
                    }
                }
            }
        }
    }
}

#[test]
fn dirichlet_rows_are_identity() {
    let s = solver(Resolution::new(4, 2, 2, 2));
    let u = flowing(s.mesh(), 0.05);
    let cfg = config(shipped_reactions());
    let bd = table1();
    let c = s.initial_guess(&bd);
    let (a, rhs) = s.assemble_newton_system(&u, &cfg, &bd, &c).unwrap();
    let mesh = s.mesh();
    let mut checked = 0;
    for v in mesh.boundary_vertices(BoundaryTag::InletBlood) {
        for sp in 0..N_SPECIES {
            let row = N_SPECIES * v + sp;
            let nonzero: Vec<usize> = (0..s.n_dofs()).filter(|&col| a.get(row, col) != 0.0).collect();
            assert_eq!(nonzero, vec![row]);
            assert_eq!(a.get(row, row), 1.0);
            assert_eq!(rhs[row], bd.inlet_blood[sp]);
            checked += 1;
        }
    }
    for v in mesh.boundary_vertices(BoundaryTag::InletDialysate) {
        for sp in [0, 3, 4] {
            let row = N_SPECIES * v + sp;
            assert_eq!(a.get(row, row), 1.0);
            assert_eq!(rhs[row], bd.inlet_dialysate[sp]);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn newton_matrix_is_the_derivative_of_the_residual() {
    let s = solver(Resolution::new(6, 3, 2, 3));
    let u = flowing(s.mesh(), 0.05);
    let cfg = config(shipped_reactions());
    let bd = table1();
    let c = s.reaction_free_guess(&u, &cfg, &bd).unwrap();
    let (jac, _) = s.assemble_newton_system(&u, &cfg, &bd, &c).unwrap();
    let r0 = s.residual(&u, &cfg, &bd, &c).unwrap();
    let dir = lcg_values(11, s.n_dofs(), -1.0, 1.0);
    let jv = jac.matvec(&dir);
    let defect = |h: f64| {
        let shifted: Vec<f64> = c.values().iter().zip(&dir).map(|(a, d)| a + h * d).collect();
        let r1 = s.residual(&u, &cfg, &bd, &ConcentrationField::from_values(shifted)).unwrap();
        r1.iter()
            .zip(&r0)
            .zip(&jv)
            .map(|((a, b), j)| (a - b - h * j).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (d1, d2) = (defect(1e-2), defect(5e-3));
    assert!(d1 > 0.0);
    // second-order remainder: halving h divides the defect by four
    assert!((d1 / d2 - 4.0).abs() < 0.1, "{d1:e} {d2:e}");
}

#[test]
fn linear_problem_takes_one_iteration_from_any_start() {
    let s = solver(Resolution::new(8, 3, 2, 3));
    let u = flowing(s.mesh(), 0.05);
    let cfg = config(rp(0.0, 0.0, 0.0, 0.5));
    let bd = table1();
    let starts = [
        None,
        Some(ConcentrationField::zeros(s.mesh().n_vertices())),
        Some(ConcentrationField::from_values(lcg_values(5, s.n_dofs(), 0.0, 10.0))),
    ];
    for c0 in &starts {
        let out = s.newton_solve(&u, &cfg, &bd, c0.as_ref()).unwrap();
        assert_eq!(out.iterations, 1);
    }
}

#[test]
fn constant_inlet_data_give_a_constant_field() {
    let s = solver(Resolution::new(6, 3, 2, 3));
    let u = VelocityField::at_rest(s.mesh());
    let cfg = config(rp(0.0, 0.0, 0.0, 0.5));
    let k = 1.7;
    let bd = BoundaryData {
        inlet_blood: [k, 0.0, 0.0, k, k],
        inlet_dialysate: [k, 0.0, 0.0, k, k],
    };
    let out = s.newton_solve(&u, &cfg, &bd, None).unwrap();
    for v in 0..s.mesh().n_vertices() {
        for sp in [0, 3, 4] {
            assert!((out.field.get(v, sp) - k).abs() < 1e-10);
        }
        assert!(out.field.get(v, 1).abs() < 1e-12);
    }
}

#[test]
fn table1_converges_monotonically() {
    let s = solver(Resolution::default());
    let u = flowing(s.mesh(), 0.05);
    let mut cfg = config(shipped_reactions());
    cfg.species = species([0.2, 0.0, 0.0, 0.2, 0.2]);
    cfg.newton_tol = 1e-4;
    let out = s.newton_solve(&u, &cfg, &table1(), None).unwrap();
    assert!(out.iterations <= 10);
    assert!(out.trace.windows(2).all(|w| w[1] < w[0]), "{:?}", out.trace);
    assert!(out.field.values().iter().all(|v| v.is_finite()));
}

#[test]
fn dirichlet_values_are_carried_exactly() {
    let s = solver(Resolution::new(8, 3, 2, 3));
    let u = flowing(s.mesh(), 0.05);
    let cfg = config(shipped_reactions());
    let bd = table1();
    let out = s.newton_solve(&u, &cfg, &bd, None).unwrap();
    for v in s.mesh().boundary_vertices(BoundaryTag::InletBlood) {
        assert_eq!(out.field.node(v), bd.inlet_blood);
    }
    for v in 0..s.mesh().n_vertices() {
        if !s.mesh().is_blood_vertex(v) {
            assert_eq!(out.field.get(v, 1), 0.0);
            assert_eq!(out.field.get(v, 2), 0.0);
        }
    }
}

#[test]
fn solves_are_bit_identical() {
    let s = solver(Resolution::new(8, 3, 2, 3));
    let u = flowing(s.mesh(), 0.05);
    let cfg = config(shipped_reactions());
    let a = s.newton_solve(&u, &cfg, &table1(), None).unwrap();
    let b = s.newton_solve(&u, &cfg, &table1(), None).unwrap();
    assert_eq!(a.field, b.field);
    assert_eq!(a.trace, b.trace);
}

// With alpha = 1 and S = 1, calcium in all forms enters through the two
// inlets and leaves through the two outlets. Only convective fluxes are
// measured, so axial diffusion is made small: the diffusive flux through the
// Dirichlet inlets is of order eps2 because the inlet data is far from
// chemical equilibrium.
#[test]
fn total_calcium_flux_balances_without_membrane_resistance() {
    let mismatch = |k: usize| {
        let s = solver(Resolution::new(20, 4, 2, 4).refined(k));
        let mesh = s.mesh().clone();
        let u = flowing(&mesh, 0.0);
        let mut cfg = config(shipped_reactions());
        cfg.species = species([1.0, 0.0, 0.0, 1.0, 1.0]);
        cfg.eps2 = 1e-4;
        cfg.newton_tol = 1e-8;
        let out = s.newton_solve(&u, &cfg, &table1(), None).unwrap();
        let total = |v: usize| out.field.get(v, 0) + out.field.get(v, 2) + out.field.get(v, 4);
        let flux = |i: usize| {
            let cell = i.min(mesh.nx() - 1);
            let x = mesh.x_coords()[i];
            let mut acc = 0.0;
            for j in 0..mesh.nr() {
                let (a, b) = (mesh.index(i, j), mesh.index(i, j + 1));
                let (ra, rb) = (mesh.vertices()[a][1], mesh.vertices()[b][1]);
                let n = 20;
                for q in 0..n {
                    let t = (q as f64 + 0.5) / n as f64;
                    let r = ra + t * (rb - ra);
                    let c = total(a) * (1.0 - t) + total(b) * t;
                    acc += (rb - ra) / n as f64 * r * u.evaluate(x, r, Some(cell))[0] * c;
                }
            }
            2.0 * PI * acc
        };
        let (left, right) = (flux(0), flux(mesh.nx()));
        (left - right).abs() / left.abs()
    };
    let (coarse, fine) = (mismatch(1), mismatch(2));
    assert!(coarse < 1e-2, "{coarse:e}");
    assert!(fine < coarse, "{coarse:e} {fine:e}");
}

#[test]
fn outlet_of_constant_field() {
    let m = Mesh::build(geometry(), Resolution::new(3, 4, 2, 2)).unwrap();
    let mut c = ConcentrationField::zeros(m.n_vertices());
    for v in 0..m.n_vertices() {
        for s in 0..N_SPECIES {
            c.set(v, s, 2.5 + s as f64);
        }
    }
    let out = outlet_concentration(&c, &m);
    for (s, o) in out.iter().enumerate() {
        assert!((o - (2.5 + s as f64)).abs() < 1e-13);
    }
}

#[test]
fn outlet_of_radial_ramp() {
    let g = AxiGeometry::new(1.0, 0.5, 0.6, 1.0).unwrap();
    let m = Mesh::build(g, Resolution::new(2, 5, 1, 3)).unwrap();
    let mut c = ConcentrationField::zeros(m.n_vertices());
    for v in 0..m.n_vertices() {
        c.set(v, 3, m.vertices()[v][1]);
    }
    let out = outlet_concentration(&c, &m);
    assert!((out[3] - 1.0 / 3.0).abs() < 1e-14);
}

#[test]
fn outlet_is_linear() {
    let m = Mesh::build(geometry(), Resolution::new(3, 4, 2, 2)).unwrap();
    let n = N_SPECIES * m.n_vertices();
    let a = lcg_values(1, n, 0.0, 3.0);
    let b = lcg_values(2, n, 0.0, 3.0);
    let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
    let oa = outlet_concentration(&ConcentrationField::from_values(a), &m);
    let ob = outlet_concentration(&ConcentrationField::from_values(b), &m);
    let oc = outlet_concentration(&ConcentrationField::from_values(combo), &m);
    for s in 0..N_SPECIES {
        assert!((oc[s] - (2.0 * oa[s] - 0.5 * ob[s])).abs() < 1e-12);
    }
}

#[test]
fn invalid_configuration_is_rejected() {
    let s = solver(Resolution::new(2, 1, 1, 1));
    let u = VelocityField::at_rest(s.mesh());
    let mut cfg = config(shipped_reactions());
    cfg.species[3].alpha = 0.5;
    assert!(s.newton_solve(&u, &cfg, &table1(), None).is_err());
    let mut bad = table1();
    bad.inlet_blood[0] = -1.0;
    assert!(s.newton_solve(&u, &config(shipped_reactions()), &bad, None).is_err());
}

/// Polynomial helpers for the manufactured solution, coefficients in
/// increasing degree.
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn poly_der(p: &[f64]) -> Vec<f64> {
    p.iter().enumerate().skip(1).map(|(k, c)| k as f64 * c).collect()
}

/// Radial shape with triple roots at both membrane faces (so value, slope
/// and curvature vanish there) and zero slope on the axis and the outer wall.
fn radial_shape(g: &AxiGeometry) -> Vec<f64> {
    let cube = |r0: f64| poly_mul(&poly_mul(&[-r0, 1.0], &[-r0, 1.0]), &[-r0, 1.0]);
    let p = poly_mul(&cube(g.r_blood), &cube(g.r_membrane));
    let dp = poly_der(&p);
    let beta = -poly_eval(&dp, 0.0) / poly_eval(&p, 0.0);
    let r = g.r_outer;
    let (pr, dpr) = (poly_eval(&p, r), poly_eval(&dp, r));
    let gamma = -(dpr * (1.0 + beta * r) + pr * beta) / (dpr * r * r + 2.0 * r * pr);
    poly_mul(&p, &[1.0, beta, gamma])
}

#[test]
fn manufactured_solution_converges_at_second_order() {
    let g = geometry();
    let w = radial_shape(&g);
    let dw = poly_der(&w);
    let d2w = poly_der(&dw);
    let wmax = (0..=100).map(|k| poly_eval(&w, k as f64 / 100.0).abs()).fold(0.0, f64::max);
    let amp = [0.4 / wmax, 0.3 / wmax, 0.0, 0.5 / wmax, 0.2 / wmax];
    let base = [1.0, 2.0, 0.0, 1.5, 0.8];
    // The shipped reactions include calcium-albumin binding, whose source
    // jumps where albumin ends; that exercises the per-subdomain quadrature.
    let cfg = config(shipped_reactions());
    let in_blood = |s: usize, r: f64| !(s == 1 || s == 2) || r <= g.r_blood + 1e-12;
    let exact = |s: usize, x: f64, r: f64| {
        if !in_blood(s, r) {
            return 0.0;
        }
        base[s] + amp[s] * (PI * x).cos() * poly_eval(&w, r)
    };

    let errors: Vec<f64> = [1usize, 2, 4, 8]
        .iter()
        .map(|&k| {
            let s = solver(Resolution::new(8, 3, 3, 3).refined(k));
            let u = flowing(s.mesh(), 0.0);
            let cfg = cfg.clone();
            let source = |sp: usize, x: f64, r: f64, layer: Subdomain| {
                let present = |t: usize| layer == Subdomain::Blood || !(t == 1 || t == 2);
                if !present(sp) {
                    return 0.0;
                }
                let d = match layer {
                    Subdomain::Blood => cfg.species[sp].d_blood,
                    Subdomain::Membrane => cfg.species[sp].alpha * cfg.species[sp].d_blood,
                    Subdomain::Dialysate => cfg.species[sp].d_dialysate,
                };
                let (cx, sx) = ((PI * x).cos(), (PI * x).sin());
                let (wr, dwr, d2wr) = (poly_eval(&w, r), poly_eval(&dw, r), poly_eval(&d2w, r));
                let c_x = -amp[sp] * PI * sx * wr;
                let c_xx = -amp[sp] * PI * PI * cx * wr;
                let radial = if r > 0.0 { d2wr + dwr / r } else { 2.0 * d2wr };
                let lap = cfg.eps2 * c_xx + amp[sp] * cx * radial;
                let ux = u.evaluate(x, r, None)[0];
                let c: [f64; N_SPECIES] = std::array::from_fn(|t| if present(t) { exact(t, x, r) } else { 0.0 });
                ux * c_x - d / cfg.peclet * lap - reaction_source(&c, &cfg.reactions)[sp]
            };
            let out = s.newton_solve_with_source(&u, &cfg, &exact, &source).unwrap();
            let mesh = s.mesh();
            let diff: Vec<f64> = (0..mesh.n_vertices())
                .flat_map(|v| {
                    let [x, r] = mesh.vertices()[v];
                    let f = &out.field;
                    (0..N_SPECIES).map(move |sp| f.get(v, sp) - exact(sp, x, r)).collect::<Vec<_>>()
                })
                .collect();
            s.norm(&diff)
        })
        .collect();
    for w in errors.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(order >= 1.8, "errors {errors:?}");
    }
}
