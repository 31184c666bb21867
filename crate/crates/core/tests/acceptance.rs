//! Acceptance gate: nine numbered criteria, one test per criterion.
//!
//! Each test prints one `criterion N: PASS — ...` line on success (run
//! with `--nocapture` to see the lines on a passing run; the per-test
//! `ok`/`FAILED` harness line carries the same number). Tolerances are
//! pinned as named constants next to each criterion.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use routh_core::dirac::{
    dirac_residual_full, kernel_basis, omega_mu, omega_quasi, quasi_basis_change,
    reduced_dirac_residual, restricted_dirac_residual,
};
use routh_core::error::Error;
use routh_core::eval::{lag_gradients, LagrangianFn};
use routh_core::frames::{Frame, PontryaginPoint, ANHOLONOMITY_TOL};
use routh_core::integrator::{consistent_init, integrate, reconstruct, Mode, StepConfig, Trajectory};
use routh_core::routh::{
    implicit_el_residual, red_rows, routhian_lifts, FullQuasiRates, FullQuasiState,
    LagrangianSystem, ReducedRates, ReducedState,
};
use routh_core::systems::{
    make_central_force, make_cyclic_linear, make_point_vortices, make_scalar_fields,
    make_so3_algebraic, parse_potential,
};

// ---------------------------------------------------------------------
// Shared fixture data
// ---------------------------------------------------------------------

fn cyclic() -> LagrangianSystem {
    make_cyclic_linear(parse_potential("x^2/2").unwrap()).unwrap()
}

fn central() -> LagrangianSystem {
    make_central_force(1.0, parse_potential("r^2/2").unwrap()).unwrap()
}

fn scalar_fields() -> LagrangianSystem {
    make_scalar_fields(1.0, 1.0).unwrap()
}

fn vortices() -> LagrangianSystem {
    make_point_vortices(&[1.0, 1.5]).unwrap()
}

/// Closed-form-consistent full-mode initial state of the cyclic-linear
/// oracle run: x=y=0, v=(1,0), p=(2,1); momentum level mu = 1.
fn cyclic_full_state0() -> DVector<f64> {
    DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0, 2.0, 1.0])
}

/// Central force at mu = 1: r=1, v_r=0.3, v_theta=1, p=(0.3, 1).
fn central_full_state0() -> DVector<f64> {
    DVector::from_vec(vec![1.0, 0.0, 0.3, 1.0, 0.3, 1.0])
}

/// Scalar fields at mu = (2, 2.16): on the constraint surface
/// (x1=y1=0), v=(0,0,0.2,-0.1,0.5,0.25), p matching dL/dv.
fn scalar_full_state0() -> DVector<f64> {
    DVector::from_vec(vec![
        0.0, 0.0, 1.0, 1.2, 0.0, 0.0, // q
        0.0, 0.0, 0.2, -0.1, 0.5, 0.25, // v
        0.0, 0.0, 0.4, -0.2, 2.0, 2.16, // p
    ])
}

const SCALAR_MU: [f64; 2] = [2.0, 2.16];

/// First-order vortex flow in Cartesian coordinates:
/// `dz_k = (i/2) sum_{n != k} gamma_n (z_k - z_n) / |z_k - z_n|^2`.
fn vortex_cartesian_rhs(gamma: &[f64], z: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let n = gamma.len();
    let mut out = vec![(0.0, 0.0); n];
    for k in 0..n {
        let (mut sx, mut sy) = (0.0, 0.0);
        for m in 0..n {
            if m == k {
                continue;
            }
            let (dx, dy) = (z[k].0 - z[m].0, z[k].1 - z[m].1);
            let d2 = dx * dx + dy * dy;
            sx += gamma[m] * (-dy) / (2.0 * d2);
            sy += gamma[m] * dx / (2.0 * d2);
        }
        out[k] = (sx, sy);
    }
    out
}

/// Consistent full-mode initial state for the two-vortex fixture with
/// gamma = (1, 1.5) (velocities from the Cartesian vector field), plus
/// its momentum level.
fn vortex_full_state0() -> (DVector<f64>, f64) {
    let gamma = [1.0, 1.5];
    let (rho1, th1): (f64, f64) = (1.0, 0.2);
    let (rho2, th2): (f64, f64) = (1.3, 1.8);
    let z = [
        (rho1 * th1.cos(), rho1 * th1.sin()),
        (rho2 * th2.cos(), rho2 * th2.sin()),
    ];
    let zdot = vortex_cartesian_rhs(&gamma, &z);
    let mut rdot = [0.0; 2];
    let mut thdot = [0.0; 2];
    for k in 0..2 {
        let th = if k == 0 { th1 } else { th2 };
        let rho = if k == 0 { rho1 } else { rho2 };
        rdot[k] = zdot[k].0 * th.cos() + zdot[k].1 * th.sin();
        thdot[k] = (-zdot[k].0 * th.sin() + zdot[k].1 * th.cos()) / rho;
    }
    let mu = gamma[0] * rho1 * rho1 + gamma[1] * rho2 * rho2;
    let s = DVector::from_vec(vec![
        rho1,
        rho2,
        th1,
        th2 - th1, // q: radii, angle of vortex 1, relative angle
        rdot[0],
        rdot[1],
        thdot[0],
        thdot[1] - thdot[0], // v
        0.0,
        0.0,
        mu,
        gamma[1] * rho2 * rho2, // p
    ]);
    (s, mu)
}

/// Sup-norm disagreement between two equal-length trajectories over the
/// non-masked state components.
fn sup_disagreement(a: &Trajectory, b: &Trajectory, mask: &[usize]) -> f64 {
    assert_eq!(a.states.len(), b.states.len(), "sample counts differ");
    let mut worst = 0.0f64;
    for (sa, sb) in a.states.iter().zip(&b.states) {
        assert_eq!(sa.len(), sb.len());
        for i in 0..sa.len() {
            if mask.contains(&i) {
                continue;
            }
            worst = worst.max((sa[i] - sb[i]).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------
// Criterion 1
// ---------------------------------------------------------------------

/// Endpoint agreement with the closed form, each component.
const C1_ENDPOINT_TOL: f64 = 1e-7;
/// Observed error ratio must be within this factor of the second-order
/// prediction (h1/h2)^2 = 4.
const C1_ORDER_FACTOR: f64 = 1.5;
const C1_RUNTIME_BUDGET: f64 = 1.0;

#[test]
fn criterion_1_closed_form_oracle_and_step_order() {
    let start = Instant::now();
    let sys = cyclic();
    let mu = [1.0];
    // Closed form with x(0)=y(0)=0, v_y(0)=0, momentum v_x = 1:
    // x=t, y=-t^3/6, v_y=-t^2/2, p_x=2-t^2/2.
    let oracle = |t: f64| [t, -t * t * t / 6.0, -t * t / 2.0, 2.0 - t * t / 2.0];

    let cfg = StepConfig::new(Mode::Full, 1e-3);
    let traj = integrate(&sys, &mu, &cyclic_full_state0(), &cfg, 1.0)
        .into_result()
        .unwrap();
    let s = traj.states.last().unwrap();
    let want = oracle(1.0);
    let got = [s[0], s[1], s[3], s[4]]; // x, y, v_y, p_x
    for (g, w) in got.iter().zip(&want) {
        assert!(
            (g - w).abs() < C1_ENDPOINT_TOL,
            "endpoint {got:?} vs closed form {want:?}"
        );
    }

    // Global endpoint error scales as O(h^2).
    let err_at = |h: f64| -> f64 {
        let cfg = StepConfig::new(Mode::Full, h);
        let traj = integrate(&sys, &mu, &cyclic_full_state0(), &cfg, 1.0)
            .into_result()
            .unwrap();
        let s = traj.states.last().unwrap();
        let w = oracle(1.0);
        [s[0] - w[0], s[1] - w[1], s[3] - w[2], s[4] - w[3]]
            .iter()
            .fold(0.0f64, |m, e| m.max(e.abs()))
    };
    let errs = [err_at(1e-2), err_at(5e-3), err_at(2.5e-3)];
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!(
            ratio > 4.0 / C1_ORDER_FACTOR && ratio < 4.0 * C1_ORDER_FACTOR,
            "error ratio {ratio} not second order (errors {errs:?})"
        );
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < C1_RUNTIME_BUDGET, "took {elapsed:.2} s");
    println!(
        "criterion 1: PASS — closed-form endpoint within {C1_ENDPOINT_TOL:.0e}, \
         error ratios {:.2}/{:.2} (second order), {elapsed:.2} s",
        errs[0] / errs[1],
        errs[1] / errs[2]
    );
}

// ---------------------------------------------------------------------
// Criterion 2
// ---------------------------------------------------------------------

const C2_DRIFT_TOL: f64 = 1e-8;
const C2_T_END: f64 = 10.0;
const C2_H: f64 = 1e-3;
const C2_RUNTIME_BUDGET: f64 = 30.0;

#[test]
fn criterion_2_momentum_conservation_on_all_fixtures() {
    let start = Instant::now();
    let (vortex_state0, vortex_mu) = vortex_full_state0();
    let runs: Vec<(LagrangianSystem, Vec<f64>, DVector<f64>)> = vec![
        (cyclic(), vec![1.0], cyclic_full_state0()),
        (central(), vec![1.0], central_full_state0()),
        (scalar_fields(), SCALAR_MU.to_vec(), scalar_full_state0()),
        (vortices(), vec![vortex_mu], vortex_state0),
    ];
    let mut drifts = Vec::new();
    for (sys, mu, state0) in &runs {
        let cfg = StepConfig::new(Mode::Full, C2_H);
        let traj = integrate(sys, mu, state0, &cfg, C2_T_END)
            .into_result()
            .unwrap_or_else(|e| panic!("{} failed: {e}", sys.label));
        let drift = traj.max_momentum_drift();
        assert!(
            drift < C2_DRIFT_TOL,
            "{}: momentum drift {drift:e} over T={C2_T_END}",
            sys.label
        );
        drifts.push((sys.label.clone(), drift));
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < C2_RUNTIME_BUDGET, "took {elapsed:.1} s");
    println!(
        "criterion 2: PASS — momentum drift over T={C2_T_END} at h={C2_H}: {}, {elapsed:.1} s",
        drifts
            .iter()
            .map(|(l, d)| format!("{l} {d:.1e}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
}

// ---------------------------------------------------------------------
// Criterion 3
// ---------------------------------------------------------------------

const C3_AGREE_TOL: f64 = 1e-6;
const C3_T_END: f64 = 5.0;
const C3_H: f64 = 1e-3;

/// Reduced-mode initial state matching a full-mode one, for an Abelian
/// fixture with trivial connection: [x, v_shape, vhat=group v, p_shape].
fn matching_reduced_state0(sys: &LagrangianSystem, full0: &DVector<f64>) -> DVector<f64> {
    let n = sys.sym.dims.n;
    let mut out = Vec::new();
    for &i in &sys.sym.shape_idx {
        out.push(full0[i]);
    }
    for &i in &sys.sym.shape_idx {
        out.push(full0[n + i]);
    }
    for &a in &sys.sym.group_idx {
        out.push(full0[n + a]);
    }
    for &i in &sys.sym.shape_idx {
        out.push(full0[2 * n + i]);
    }
    DVector::from_vec(out)
}

#[test]
fn criterion_3_full_vs_reduced_plus_reconstruction() {
    let runs: Vec<(LagrangianSystem, Vec<f64>, DVector<f64>)> = vec![
        (cyclic(), vec![1.0], cyclic_full_state0()),
        (central(), vec![1.0], central_full_state0()),
        (scalar_fields(), SCALAR_MU.to_vec(), scalar_full_state0()),
    ];
    let mut sups = Vec::new();
    for (sys, mu, full0) in &runs {
        let n = sys.sym.dims.n;
        let full_cfg = StepConfig::new(Mode::Full, C3_H);
        let full = integrate(sys, mu, full0, &full_cfg, C3_T_END)
            .into_result()
            .unwrap();
        let red_cfg = StepConfig::new(Mode::Reduced, C3_H);
        let red0 = matching_reduced_state0(sys, full0);
        let red = integrate(sys, mu, &red0, &red_cfg, C3_T_END)
            .into_result()
            .unwrap();
        let theta0: Vec<f64> = sys.sym.group_idx.iter().map(|&a| full0[a]).collect();
        let rebuilt = reconstruct(sys, mu, &red, &theta0).unwrap();
        // Group-velocity components are determined only modulo the
        // kernel of the momentum-level two-form; exclude them.
        let mask: Vec<usize> = sys.sym.group_idx.iter().map(|&a| n + a).collect();
        let sup = sup_disagreement(&full, &rebuilt, &mask);
        assert!(
            sup < C3_AGREE_TOL,
            "{}: full vs reduced+reconstruct sup {sup:e}",
            sys.label
        );
        sups.push((sys.label.clone(), sup));
    }
    println!(
        "criterion 3: PASS — full vs reduced+reconstruction over T={C3_T_END}: {}",
        sups.iter()
            .map(|(l, s)| format!("{l} {s:.1e}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
}

// ---------------------------------------------------------------------
// Criterion 4
// ---------------------------------------------------------------------

const C4_AGREE_TOL: f64 = 1e-6;
const C4_ORBIT_TOL: f64 = 1e-7;

#[test]
fn criterion_4_regular_case_reduced_vs_classical() {
    let sys = central();
    let mu = [1.0];
    let h = 1e-3;
    // r=1, v_r=0.3; group velocity mu/(m r^2) = 1; p_r = 0.3.
    let red0 = DVector::from_vec(vec![1.0, 0.3, 1.0, 0.3]);
    let cls0 = DVector::from_vec(vec![1.0, 0.3, 0.3]);
    let red = integrate(&sys, &mu, &red0, &StepConfig::new(Mode::Reduced, h), 5.0)
        .into_result()
        .unwrap();
    let cls = integrate(&sys, &mu, &cls0, &StepConfig::new(Mode::Classical, h), 5.0)
        .into_result()
        .unwrap();
    // Shared coordinates: x, v, p (reduced carries vhat in slot 2).
    let mut sup = 0.0f64;
    for (a, b) in red.states.iter().zip(&cls.states) {
        sup = sup.max((a[0] - b[0]).abs());
        sup = sup.max((a[1] - b[1]).abs());
        sup = sup.max((a[3] - b[2]).abs());
    }
    assert!(sup < C4_AGREE_TOL, "reduced vs classical sup {sup:e}");

    // Circular orbit: the effective potential is critical at r = 1.
    let orbit = integrate(
        &sys,
        &mu,
        &DVector::from_vec(vec![1.0, 0.0, 0.0]),
        &StepConfig::new(Mode::Classical, h),
        10.0,
    )
    .into_result()
    .unwrap();
    let mut worst = 0.0f64;
    for s in &orbit.states {
        worst = worst.max((s[0] - 1.0).abs());
    }
    assert!(worst < C4_ORBIT_TOL, "circular orbit drifted {worst:e}");
    println!(
        "criterion 4: PASS — reduced vs classical sup {sup:.1e} over T=5, \
         circular-orbit radius drift {worst:.1e} over T=10"
    );
}

// ---------------------------------------------------------------------
// Criterion 5
// ---------------------------------------------------------------------

const C5_TOL: f64 = 1e-8;
const C5_POINTS: usize = 200;

#[test]
fn criterion_5_routhian_derivative_identities() {
    // The four frame-derivative identities of the Routhian:
    //   X_i^C(R) = X_i^C(L) + mu_a B^a_ij v^j,
    //   X_i^V(R) = X_i^V(L),
    //   E_a^C(R) = -mu_c C^c_ab vtilde^b,
    //   E_a^V(R) = E_a^V(L) - mu_a.
    // Verified on every fixture whose frame realizes its structure
    // constants (the rotation-algebra fixture is algebraic data over a
    // coordinate frame, so the bracket-dependent identity does not
    // apply to it by construction).
    let fixtures: Vec<(LagrangianSystem, Vec<f64>)> = vec![
        (cyclic(), vec![0.9]),
        (central(), vec![0.8]),
        (scalar_fields(), vec![0.5, -0.3]),
        (vortices(), vec![1.3]),
        (
            routh_core::systems::make_affine_group().unwrap(),
            vec![0.4, 0.7],
        ),
    ];
    for (fi, (sys, mu)) in fixtures.iter().enumerate() {
        let frame = sys.sym.moving_frame();
        let (m, k) = (sys.sym.dims.m, sys.sym.dims.k);
        for (q, v) in sys.sample_states(C5_POINTS, 1000 + fi as u64) {
            let rd = routhian_lifts::<f64>(sys, mu, &q, &v);
            let (lc, lv) = frame.lift_derivatives::<f64>(sys.l.as_ref(), &q, &v);
            let b = sys.sym.curvature_unchecked::<f64>(&q);
            let pt = PontryaginPoint::new(q.clone(), v.clone(), vec![0.0; q.len()]);
            let vq = frame.to_quasi(&pt).unwrap().vq;
            for i in 0..m {
                let mut gyro = 0.0;
                for (a, &mu_a) in mu.iter().enumerate() {
                    for j in 0..m {
                        gyro += mu_a * b.get(a, i, j) * vq[j];
                    }
                }
                assert!(
                    (rd.xc[i] - lc[i] - gyro).abs() < C5_TOL,
                    "{}: horizontal identity at i={i}",
                    sys.label
                );
                assert!(
                    (rd.xv[i] - lv[i]).abs() < C5_TOL,
                    "{}: vertical shape identity at i={i}",
                    sys.label
                );
            }
            for a in 0..k {
                let mut coad = 0.0;
                for (c, &mu_c) in mu.iter().enumerate() {
                    for bb in 0..k {
                        coad += mu_c * sys.sym.struct_consts.get(c, a, bb) * vq[m + bb];
                    }
                }
                assert!(
                    (rd.ec[a] + coad).abs() < C5_TOL,
                    "{}: group horizontal identity at a={a}: {} vs {}",
                    sys.label,
                    rd.ec[a],
                    -coad
                );
                assert!(
                    (rd.ev[a] - (lv[m + a] - mu[a])).abs() < C5_TOL,
                    "{}: group vertical identity at a={a}",
                    sys.label
                );
            }
        }
    }
    println!(
        "criterion 5: PASS — all four derivative identities at {C5_POINTS} points \
         on {} fixtures within {C5_TOL:.0e}",
        fixtures.len()
    );
}

// ---------------------------------------------------------------------
// Criterion 6
// ---------------------------------------------------------------------

const C6_REORDER_TOL: f64 = 1e-14;
const C6_MEMBERSHIP_TOL: f64 = 1e-8;
const C6_CONJUGATION_TOL: f64 = 1e-10;

/// Consistent momentum-level jet at a natural full state, rates from
/// the differential rows (dq = v; dp closing the force rows).
fn quasi_jet(
    sys: &LagrangianSystem,
    mu: &[f64],
    s: &DVector<f64>,
) -> (FullQuasiState, FullQuasiRates) {
    let n = sys.sym.dims.n;
    let (m, k) = (sys.sym.dims.m, sys.sym.dims.k);
    let pt = PontryaginPoint::new(
        s.as_slice()[..n].to_vec(),
        s.as_slice()[n..2 * n].to_vec(),
        s.as_slice()[2 * n..].to_vec(),
    );
    let qp = sys.sym.moving_frame().to_quasi(&pt).unwrap();
    let state = FullQuasiState {
        q: pt.q.clone(),
        v: qp.vq.rows(0, m).clone_owned(),
        vtilde: qp.vq.rows(m, k).clone_owned(),
        p: qp.pq.rows(0, m).clone_owned(),
        ptilde: qp.pq.rows(m, k).clone_owned(),
    };
    let mut rates = FullQuasiRates {
        dq: pt.v.clone(),
        dp: DVector::zeros(m),
    };
    // The force rows are the last m components; with dp = 0 they read
    // the consistent rate off the residual.
    let r0 = restricted_dirac_residual(sys, mu, &state, &rates).unwrap();
    let total = r0.len();
    for i in 0..m {
        rates.dp[i] = -r0[total - m + i];
    }
    (state, rates)
}

#[test]
fn criterion_6_dirac_residual_suites() {
    // (a) The full Dirac residual is a block reorder of the implicit
    // Euler-Lagrange residual, on random jets.
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for sys in [cyclic(), vortices(), routh_core::systems::make_affine_group().unwrap()] {
        let n = sys.sym.dims.n;
        for _ in 0..100 {
            let q: Vec<f64> = (0..n)
                .map(|i| sys.probe_q[i] + sys.probe_scale * rng.gen_range(-1.0..1.0))
                .collect();
            let rnd = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
            };
            let (v, p, dq, dv, dp) =
                (rnd(&mut rng), rnd(&mut rng), rnd(&mut rng), rnd(&mut rng), rnd(&mut rng));
            let dirac = dirac_residual_full(&sys, &q, &v, &p, &dq, &dv, &dp);
            let pt = PontryaginPoint::new(q.clone(), v.clone(), p.clone());
            let el = implicit_el_residual(&sys, &pt, &dq, &dp);
            for i in 0..n {
                assert!((dirac[i] - el[2 * n + i]).abs() < C6_REORDER_TOL);
                assert!((dirac[n + i] - el[n + i]).abs() < C6_REORDER_TOL);
                assert!((dirac[2 * n + i] + el[i]).abs() < C6_REORDER_TOL);
            }
        }
    }

    // (b) Restricted membership along integrated full solutions.
    let (vs0, vmu) = vortex_full_state0();
    let full_runs: Vec<(LagrangianSystem, Vec<f64>, DVector<f64>)> = vec![
        (cyclic(), vec![1.0], cyclic_full_state0()),
        (central(), vec![1.0], central_full_state0()),
        (scalar_fields(), SCALAR_MU.to_vec(), scalar_full_state0()),
        (vortices(), vec![vmu], vs0),
    ];
    let mut worst_restricted = 0.0f64;
    for (sys, mu, s0) in &full_runs {
        let traj = integrate(sys, mu, s0, &StepConfig::new(Mode::Full, 1e-3), 2.0)
            .into_result()
            .unwrap();
        for s in traj.states.iter().step_by(100) {
            let (state, rates) = quasi_jet(sys, mu, s);
            let r = restricted_dirac_residual(sys, mu, &state, &rates).unwrap();
            let worst = r.amax();
            assert!(
                worst < C6_MEMBERSHIP_TOL,
                "{}: restricted residual {worst:e}",
                sys.label
            );
            worst_restricted = worst_restricted.max(worst);
        }
    }

    // ... and reduced membership along integrated reduced solutions,
    // assembled independently through the reduced two-form and energy
    // differential.
    let reduced_runs: Vec<(LagrangianSystem, Vec<f64>, DVector<f64>)> = vec![
        (cyclic(), vec![1.0], DVector::from_vec(vec![0.0, 1.0, 0.0, 2.0])),
        (central(), vec![1.0], DVector::from_vec(vec![1.0, 0.3, 1.0, 0.3])),
        (
            scalar_fields(),
            SCALAR_MU.to_vec(),
            matching_reduced_state0(&scalar_fields(), &scalar_full_state0()),
        ),
    ];
    let mut worst_reduced = 0.0f64;
    for (sys, mu, r0) in &reduced_runs {
        let (m, k) = (sys.sym.dims.m, sys.sym.dims.k);
        let n_i = k - sys.sym.dims.k_mu;
        let theta_a = sys.theta_a_ref();
        let traj = integrate(sys, mu, r0, &StepConfig::new(Mode::Reduced, 1e-3), 2.0)
            .into_result()
            .unwrap();
        for s in traj.states.iter().step_by(100) {
            let sl = s.as_slice();
            let state = ReducedState {
                x: DVector::from_vec(sl[..m].to_vec()),
                theta_i: DVector::from_vec(sl[m..m + n_i].to_vec()),
                v: DVector::from_vec(sl[m + n_i..2 * m + n_i].to_vec()),
                vhat: DVector::from_vec(sl[2 * m + n_i..2 * m + n_i + k].to_vec()),
                p: DVector::from_vec(sl[2 * m + n_i + k..].to_vec()),
            };
            // Rates from the differential rows: dx = v, dp read off the
            // force rows evaluated with dp = 0.
            let rows0 = red_rows::<f64>(
                sys,
                mu,
                &theta_a,
                state.x.as_slice(),
                state.theta_i.as_slice(),
                state.v.as_slice(),
                state.vhat.as_slice(),
                state.p.as_slice(),
                state.v.as_slice(),
                &vec![0.0; n_i],
                &vec![0.0; m],
            );
            let mut rates = ReducedRates {
                dx: state.v.clone(),
                dtheta_i: DVector::zeros(n_i),
                dp: DVector::zeros(m),
            };
            for i in 0..m {
                rates.dp[i] = -rows0[m + n_i + i];
            }
            let r = reduced_dirac_residual(sys, mu, &theta_a, &state, &rates).unwrap();
            let worst = r.amax();
            assert!(
                worst < C6_MEMBERSHIP_TOL,
                "{}: reduced residual {worst:e}",
                sys.label
            );
            worst_reduced = worst_reduced.max(worst);
        }
    }

    // (c) The quasi-coordinate two-form equals the frame-conjugated
    // canonical form at random points of a genuinely curved frame.
    let affine = routh_core::systems::make_affine_group().unwrap();
    let frame = affine.sym.moving_frame();
    let mut canonical = DMatrix::zeros(4, 4);
    for i in 0..2 {
        canonical[(i, 2 + i)] = 1.0;
        canonical[(2 + i, i)] = -1.0;
    }
    let mut worst_conj = 0.0f64;
    for _ in 0..25 {
        let q = [
            affine.probe_q[0] + affine.probe_scale * rng.gen_range(-1.0..1.0),
            affine.probe_q[1] + affine.probe_scale * rng.gen_range(-1.0..1.0),
        ];
        let p = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let at = frame.eval(&q).unwrap();
        let pq = [
            at.z.get(0, 0) * p[0] + at.z.get(1, 0) * p[1],
            at.z.get(0, 1) * p[0] + at.z.get(1, 1) * p[1],
        ];
        let form = omega_quasi(&frame, &q, &pq).unwrap();
        let t = quasi_basis_change(&frame, &q, &p).unwrap();
        let defect = (t.transpose() * form.matrix * t - canonical.clone()).amax();
        assert!(defect < C6_CONJUGATION_TOL, "conjugation defect {defect:e}");
        worst_conj = worst_conj.max(defect);
    }

    println!(
        "criterion 6: PASS — residual reorder exact to {C6_REORDER_TOL:.0e}; \
         restricted membership max {worst_restricted:.1e}, reduced max {worst_reduced:.1e}; \
         two-form conjugation max {worst_conj:.1e}"
    );
}

// ---------------------------------------------------------------------
// Criterion 7
// ---------------------------------------------------------------------

const C7_ANGLE_TOL: f64 = 1e-8;

#[test]
fn criterion_7_kernel_structure_of_the_rotation_fixture() {
    let sys = make_so3_algebraic(2).unwrap();
    let mu = [0.0, 0.0, 1.0];
    sys.sym.validate_splitting(&mu).unwrap();
    let misadapted = make_so3_algebraic(0).unwrap();
    assert!(matches!(
        misadapted.sym.validate_splitting(&mu).unwrap_err(),
        Error::InvalidSplit { .. }
    ));

    let form = omega_mu(&sys, &mu, &sys.probe_q).unwrap();
    let kernel = kernel_basis(&form);
    // Basis (no shape block): group frame directions 0..3, then group
    // velocity differentials 3..6. The velocity directions are always
    // in the kernel; the group-direction part must be exactly the
    // third axis.
    assert_eq!(kernel.len(), 4, "kernel dimension");
    let mut covered = 0.0f64;
    for vec in &kernel {
        let e = [vec[0], vec[1], vec[2]];
        let norm = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
        if norm > 1e-12 {
            let sin_angle = (e[0] * e[0] + e[1] * e[1]).sqrt() / norm;
            assert!(
                sin_angle < C7_ANGLE_TOL,
                "group kernel direction off the isotropy axis by {sin_angle:e}"
            );
            covered = covered.max(norm);
        }
    }
    assert!(covered > 0.5, "isotropy axis missing from the kernel");
    println!(
        "criterion 7: PASS — group-direction kernel is the isotropy axis \
         (principal angle < {C7_ANGLE_TOL:.0e}); adapted split accepted, misadapted rejected"
    );
}

// ---------------------------------------------------------------------
// Criterion 8
// ---------------------------------------------------------------------

const C8_MOMENTUM_TOL: f64 = 1e-8;
const C8_VORTEX_TOL: f64 = 1e-10;

#[test]
fn criterion_8_degenerate_system_behavior() {
    // Without the declared pins, initialization from a state off the
    // hidden constraint surface must be reported inconsistent, naming
    // the velocity-free coordinate rows.
    let mut bare = scalar_fields();
    bare.extra_constraints.clear();
    let cfg = StepConfig::new(Mode::Full, 1e-3);
    let mut guess = scalar_full_state0();
    guess[0] = 0.3; // x1 off the surface
    guess[1] = -0.2; // y1 off the surface
    match consistent_init(&bare, &SCALAR_MU, &guess, &cfg).unwrap_err() {
        Error::Inconsistent { rows, .. } => {
            assert!(
                rows.iter().any(|r| r.contains("x1")),
                "rows should name x1: {rows:?}"
            );
            assert!(
                rows.iter().any(|r| r.contains("y1")),
                "rows should name y1: {rows:?}"
            );
        }
        other => panic!("expected inconsistency report, got {other}"),
    }
    // On the surface, the same bare system reports the structural rank
    // deficiency (the velocity-free directions) with a nullspace basis.
    let report = consistent_init(&bare, &SCALAR_MU, &scalar_full_state0(), &cfg).unwrap();
    assert!(
        report.rank_defect >= 2,
        "expected structural defect, got {}",
        report.rank_defect
    );
    assert!(report.nullspace.is_some());

    // With the declared constraints the conserved pair stays pinned.
    let sys = scalar_fields();
    let traj = integrate(
        &sys,
        &SCALAR_MU,
        &scalar_full_state0(),
        &StepConfig::new(Mode::Full, 1e-3),
        5.0,
    )
    .into_result()
    .unwrap();
    let drift = traj.max_momentum_drift();
    assert!(drift < C8_MOMENTUM_TOL, "momentum drift {drift:e}");

    // Two-vortex moment of circulation over T = 5.
    let gamma = 1.0;
    let d = 1.0;
    let omega = gamma / (4.0 * d * d);
    let pair = make_point_vortices(&[gamma, gamma]).unwrap();
    let mu = 2.0 * gamma * d * d;
    let state0 = DVector::from_vec(vec![
        d, d, 0.0, std::f64::consts::PI, // q
        0.0, 0.0, omega, 0.0, // v
        0.0, 0.0, mu, gamma * d * d, // p
    ]);
    let run = integrate(
        &pair,
        &[mu],
        &state0,
        &StepConfig::new(Mode::Full, 1e-3),
        5.0,
    )
    .into_result()
    .unwrap();
    let vdrift = run.max_momentum_drift();
    assert!(vdrift < C8_VORTEX_TOL, "moment of circulation drift {vdrift:e}");

    println!(
        "criterion 8: PASS — bare fixture reports inconsistency naming x1/y1 rows and \
         structural rank defect {}; with pins momentum drift {drift:.1e}; \
         vortex moment drift {vdrift:.1e}",
        report.rank_defect
    );
}

// ---------------------------------------------------------------------
// Criterion 9
// ---------------------------------------------------------------------

const C9_REL_TOL: f64 = 1e-6;
const C9_POINTS: usize = 100;

#[test]
fn criterion_9_differentiation_engine() {
    // Dual-number gradients vs central finite differences on every
    // fixture Lagrangian at seeded points.
    let fixtures: Vec<LagrangianSystem> = vec![
        cyclic(),
        central(),
        scalar_fields(),
        vortices(),
        make_so3_algebraic(1).unwrap(),
        routh_core::systems::make_affine_group().unwrap(),
    ];
    let fd = |l: &dyn LagrangianFn, q: &[f64], v: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let n = q.len();
        let step = |x: f64| f64::EPSILON.cbrt() * x.abs().max(1.0);
        let mut dq = vec![0.0; n];
        let mut dv = vec![0.0; n];
        for i in 0..n {
            let h = step(q[i]);
            let (mut qp, mut qm) = (q.to_vec(), q.to_vec());
            qp[i] += h;
            qm[i] -= h;
            dq[i] = (l.at(&qp, v) - l.at(&qm, v)) / (2.0 * h);
            let h = step(v[i]);
            let (mut vp, mut vm) = (v.to_vec(), v.to_vec());
            vp[i] += h;
            vm[i] -= h;
            dv[i] = (l.at(q, &vp) - l.at(q, &vm)) / (2.0 * h);
        }
        (dq, dv)
    };
    for (fi, sys) in fixtures.iter().enumerate() {
        for (q, v) in sys.sample_states(C9_POINTS, 9000 + fi as u64) {
            let (dq_dual, dv_dual) = lag_gradients::<f64>(sys.l.as_ref(), &q, &v);
            let (dq_fd, dv_fd) = fd(sys.l.as_ref(), &q, &v);
            for i in 0..q.len() {
                assert!(
                    (dq_dual[i] - dq_fd[i]).abs() <= C9_REL_TOL * dq_dual[i].abs().max(1.0),
                    "{}: dL/dq[{i}]",
                    sys.label
                );
                assert!(
                    (dv_dual[i] - dv_fd[i]).abs() <= C9_REL_TOL * dv_dual[i].abs().max(1.0),
                    "{}: dL/dv[{i}]",
                    sys.label
                );
            }
        }
    }

    // Anholonomity antisymmetry is exact as computed, on the curved
    // frame at seeded points.
    let affine = routh_core::systems::make_affine_group().unwrap();
    let frame = affine.sym.moving_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let q = [
            affine.probe_q[0] + affine.probe_scale * rng.gen_range(-1.0..1.0),
            affine.probe_q[1] + affine.probe_scale * rng.gen_range(-1.0..1.0),
        ];
        let r = frame.anholonomity(&q, ANHOLONOMITY_TOL).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                for g in 0..2 {
                    assert_eq!(r.get(a, b, g), -r.get(a, g, b), "exact antisymmetry");
                }
            }
        }
    }

    // A coordinate frame has identically vanishing anholonomity.
    let coord = Frame::coordinate(3);
    for _ in 0..20 {
        let q = [
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        ];
        let r = coord.anholonomity(&q, ANHOLONOMITY_TOL).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                for g in 0..3 {
                    assert_eq!(r.get(a, b, g), 0.0, "coordinate frame must commute");
                }
            }
        }
    }

    println!(
        "criterion 9: PASS — dual vs finite-difference gradients within {C9_REL_TOL:.0e} \
         relative at {C9_POINTS} points on 6 fixtures; anholonomity exactly antisymmetric; \
         coordinate frame exactly holonomic"
    );
}
