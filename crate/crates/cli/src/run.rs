//! Simulation runs: initialization, integration, trajectory/summary
//! output, mode-equivalence reporting, sweeps, and the offline Dirac
//! membership verification of written trajectory files.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use routh_core::dirac::{reduced_dirac_residual, restricted_dirac_residual};
use routh_core::frames::PontryaginPoint;
use routh_core::integrator::{
    consistent_init, integrate, reconstruct, InitReport, Mode, StepConfig, Trajectory,
};
use routh_core::routh::{
    red_rows, FullQuasiRates, FullQuasiState, LagrangianSystem, ReducedRates, ReducedState,
};
use serde_json::json;

use crate::config::load_system;
use crate::{failure, usage, AppResult};

/// Sup-norm budget for the row-by-row Dirac membership re-check of a
/// written trajectory file (`--check-dirac`). Endpoint states satisfy
/// the algebraic rows to solver precision, independent of the step.
pub const DIRAC_MEMBERSHIP_TOL: f64 = 1e-8;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RunMode {
    Full,
    Reduced,
    Both,
}

impl RunMode {
    pub fn parse(text: &str) -> AppResult<Self> {
        match text {
            "full" => Ok(RunMode::Full),
            "reduced" => Ok(RunMode::Reduced),
            "both" => Ok(RunMode::Both),
            other => Err(usage(format!(
                "--mode {other:?}: expected full, reduced, or both"
            ))),
        }
    }

    fn label(self) -> &'static str {
        match self {
            RunMode::Full => "full",
            RunMode::Reduced => "reduced",
            RunMode::Both => "both",
        }
    }
}

/// One simulation request, mirroring the CLI flags.
#[derive(Clone)]
pub struct RunConfig {
    pub system: String,
    pub mu: Option<Vec<f64>>,
    pub mode: RunMode,
    pub h: f64,
    pub t_end: f64,
    pub state: Option<Vec<f64>>,
    pub out: PathBuf,
    pub summary: PathBuf,
    /// Part of the run identity. Simulation itself draws nothing random
    /// (initial data is explicit or the builtin guess), so two runs with
    /// equal configs produce byte-identical files regardless of seed.
    #[allow(dead_code)]
    pub seed: u64,
    pub check_dirac: bool,
}

pub struct SweepConfig {
    pub system: String,
    pub mu: Option<Vec<f64>>,
    pub mode: RunMode,
    pub h: f64,
    pub t_end: f64,
    pub param: String,
    pub values: Vec<f64>,
    pub out_template: String,
    pub summary_template: String,
    pub seed: u64,
    pub check_dirac: bool,
}

/// `simulate` entry point: run, write files, print a short report.
pub fn simulate(cfg: &RunConfig) -> AppResult<()> {
    let outcome = run_one(cfg)?;
    println!(
        "{}: mode {}, {} samples over T = {}",
        outcome.system,
        cfg.mode.label(),
        outcome.samples,
        cfg.t_end
    );
    println!("trajectory: {}", cfg.out.display());
    println!("summary: {}", cfg.summary.display());
    println!(
        "max_momentum_drift = {:.3e}  max_energy_drift = {:.3e}  max_dirac_residual = {:.3e}",
        outcome.momentum_drift, outcome.energy_drift, outcome.dirac_residual
    );
    if let Some(gap) = outcome.mode_gap {
        println!("mode_gap = {gap:.3e} (full vs reduced + reconstruction)");
    }
    if let Some(worst) = outcome.membership {
        println!(
            "dirac membership over {}: max residual {worst:.3e} (tol {DIRAC_MEMBERSHIP_TOL:.0e})",
            cfg.out.display()
        );
    }
    Ok(())
}

/// Everything a caller needs after one run; `summary` is what was
/// written to the summary file.
pub struct RunOutcome {
    pub system: String,
    pub samples: usize,
    pub momentum_drift: f64,
    pub energy_drift: f64,
    pub dirac_residual: f64,
    pub mode_gap: Option<f64>,
    pub membership: Option<f64>,
}

pub fn run_one(cfg: &RunConfig) -> AppResult<RunOutcome> {
    if !(cfg.h > 0.0) || !cfg.h.is_finite() {
        return Err(usage(format!("--h must be a positive real, got {}", cfg.h)));
    }
    if !(cfg.t_end > 0.0) || !cfg.t_end.is_finite() {
        return Err(usage(format!(
            "--T must be a positive real, got {}",
            cfg.t_end
        )));
    }
    let loaded = load_system(&cfg.system)?;
    let sys = &loaded.sys;
    let n = sys.sym.dims.n;

    let guess: DVector<f64> = match &cfg.state {
        Some(s) if s.len() == 3 * n => DVector::from_vec(s.clone()),
        Some(s) => {
            return Err(usage(format!(
                "--state needs {} numbers (q, v, p) for {}, got {}",
                3 * n,
                sys.label,
                s.len()
            )))
        }
        None => loaded.guess.clone(),
    };
    let mu: Vec<f64> = match &cfg.mu {
        Some(m) => m.clone(),
        None => sys
            .sym
            .quasi_momentum::<f64>(&guess.as_slice()[..n], &guess.as_slice()[2 * n..]),
    };
    if mu.len() != sys.sym.dims.k {
        return Err(usage(format!(
            "--mu needs {} components for {}, got {}",
            sys.sym.dims.k,
            sys.label,
            mu.len()
        )));
    }

    let full_cfg = StepConfig::new(Mode::Full, cfg.h);
    let init = consistent_init(sys, &mu, &guess, &full_cfg).map_err(|e| failure(e.to_string()))?;

    let run_full = || -> AppResult<Trajectory> {
        integrate(sys, &mu, &init.state, &full_cfg, cfg.t_end)
            .into_result()
            .map_err(|e| failure(e.to_string()))
    };
    let run_reduced = || -> AppResult<Trajectory> {
        let red_cfg = StepConfig::new(Mode::Reduced, cfg.h);
        let red0 = full_to_reduced(sys, &init.state)?;
        integrate(sys, &mu, &red0, &red_cfg, cfg.t_end)
            .into_result()
            .map_err(|e| failure(e.to_string()))
    };

    let (file_traj, file_mode, second, mode_gap) = match cfg.mode {
        RunMode::Full => (run_full()?, Mode::Full, None, None),
        RunMode::Reduced => (run_reduced()?, Mode::Reduced, None, None),
        RunMode::Both => {
            let full = run_full()?;
            let red = run_reduced()?;
            let theta0 = theta_a0(sys, &init.state);
            let rebuilt = reconstruct(sys, &mu, &red, &theta0).map_err(|e| failure(e.to_string()))?;
            let gap = sup_gap(sys, &full, &rebuilt);
            (full, Mode::Full, Some(red), Some(gap))
        }
    };

    write_csv(&cfg.out, &file_mode.state_names(sys), &file_traj)?;
    let summary = summary_json(sys, &mu, cfg, &init, &file_traj, second.as_ref(), mode_gap);
    let text = serde_json::to_string_pretty(&summary)
        .expect("summary serialization cannot fail")
        + "\n";
    std::fs::write(&cfg.summary, text)
        .map_err(|e| usage(format!("cannot write {}: {e}", cfg.summary.display())))?;

    let membership = if cfg.check_dirac {
        let worst = check_dirac_file(sys, &mu, cfg.mode, &cfg.out)?;
        if worst > DIRAC_MEMBERSHIP_TOL {
            return Err(failure(format!(
                "dirac membership residual {worst:.3e} exceeds {DIRAC_MEMBERSHIP_TOL:.0e} over {}",
                cfg.out.display()
            )));
        }
        Some(worst)
    } else {
        None
    };

    let max2 = |a: f64, b: Option<f64>| b.map_or(a, |x| a.max(x));
    Ok(RunOutcome {
        system: sys.label.clone(),
        samples: file_traj.len(),
        momentum_drift: max2(
            file_traj.max_momentum_drift(),
            second.as_ref().map(|t| t.max_momentum_drift()),
        ),
        energy_drift: max2(
            file_traj.max_energy_drift(),
            second.as_ref().map(|t| t.max_energy_drift()),
        ),
        dirac_residual: max2(
            file_traj.max_dirac_residual(),
            second.as_ref().map(|t| t.max_dirac_residual()),
        ),
        mode_gap,
        membership,
    })
}

/// Grid over one scalar parameter; each run owns its output files.
pub fn sweep(cfg: SweepConfig) -> AppResult<()> {
    enum Param {
        H,
        T,
        Mu(usize),
    }
    let param = match cfg.param.as_str() {
        "h" => Param::H,
        "T" => Param::T,
        other => match other.strip_prefix("mu").and_then(|d| d.parse::<usize>().ok()) {
            Some(idx) => Param::Mu(idx),
            None => {
                return Err(usage(format!(
                    "--param {other:?}: expected h, T, or mu<k> (e.g. mu0)"
                )))
            }
        },
    };
    if cfg.values.is_empty() {
        return Err(usage("--values must list at least one number"));
    }
    if cfg.values.len() > 1
        && (!cfg.out_template.contains("{i}") || !cfg.summary_template.contains("{i}"))
    {
        return Err(usage(
            "sweep output templates must contain {i} so runs do not overwrite each other",
        ));
    }

    // Resolve the base momentum level once so mu<k> sweeps have a
    // vector to patch, and bad indices fail before any run starts.
    let loaded = load_system(&cfg.system)?;
    let base_mu = match &cfg.mu {
        Some(m) => m.clone(),
        None => loaded.default_mu.clone(),
    };
    if let Param::Mu(idx) = param {
        if idx >= base_mu.len() {
            return Err(usage(format!(
                "--param mu{idx} out of range: {} has {} momentum components",
                loaded.sys.label,
                base_mu.len()
            )));
        }
    }

    let runs: Vec<RunConfig> = cfg
        .values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let mut run = RunConfig {
                system: cfg.system.clone(),
                mu: Some(base_mu.clone()),
                mode: cfg.mode,
                h: cfg.h,
                t_end: cfg.t_end,
                state: None,
                out: PathBuf::from(cfg.out_template.replace("{i}", &i.to_string())),
                summary: PathBuf::from(cfg.summary_template.replace("{i}", &i.to_string())),
                seed: cfg.seed,
                check_dirac: cfg.check_dirac,
            };
            match param {
                Param::H => run.h = value,
                Param::T => run.t_end = value,
                Param::Mu(idx) => run.mu.as_mut().expect("set above")[idx] = value,
            }
            run
        })
        .collect();

    let results: Vec<AppResult<RunOutcome>> = std::thread::scope(|scope| {
        let handles: Vec<_> = runs
            .iter()
            .map(|run| scope.spawn(move || run_one(run)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });

    let mut failed = 0usize;
    for (i, (run, result)) in runs.iter().zip(&results).enumerate() {
        match result {
            Ok(o) => println!(
                "run {i}: {}={:.16e} max_momentum_drift={:.3e} max_energy_drift={:.3e} \
                 max_dirac_residual={:.3e} -> {}",
                cfg.param,
                cfg.values[i],
                o.momentum_drift,
                o.energy_drift,
                o.dirac_residual,
                run.out.display()
            ),
            Err(e) => {
                failed += 1;
                let msg = match e {
                    crate::Failure::Usage(m) | crate::Failure::Run(m) => m,
                };
                println!("run {i}: {}={:.16e} FAILED: {msg}", cfg.param, cfg.values[i]);
            }
        }
    }
    if failed > 0 {
        Err(failure(format!(
            "{failed} of {} sweep runs failed",
            runs.len()
        )))
    } else {
        Ok(())
    }
}

fn summary_json(
    sys: &LagrangianSystem,
    mu: &[f64],
    cfg: &RunConfig,
    init: &InitReport,
    primary: &Trajectory,
    second: Option<&Trajectory>,
    mode_gap: Option<f64>,
) -> serde_json::Value {
    let max2 = |a: f64, b: Option<f64>| b.map_or(a, |x| a.max(x));
    let newton_total =
        primary.total_newton_iters() + second.map_or(0, |t| t.total_newton_iters());
    let newton_max = primary
        .diagnostics
        .iter()
        .chain(second.map(|t| t.diagnostics.iter()).into_iter().flatten())
        .map(|d| d.newton_iters)
        .max()
        .unwrap_or(0);
    let rank_max = primary
        .max_rank_defect()
        .max(second.map_or(0, |t| t.max_rank_defect()));
    let mut summary = json!({
        "system": sys.label,
        "mu": mu,
        "mode": cfg.mode.label(),
        "h": cfg.h,
        "T": cfg.t_end,
        "max_momentum_drift": max2(
            primary.max_momentum_drift(),
            second.map(|t| t.max_momentum_drift())
        ),
        "max_energy_drift": max2(
            primary.max_energy_drift(),
            second.map(|t| t.max_energy_drift())
        ),
        "max_dirac_residual": max2(
            primary.max_dirac_residual(),
            second.map(|t| t.max_dirac_residual())
        ),
        "newton_stats": {
            "steps": primary.len().saturating_sub(1) + second.map_or(0, |t| t.len().saturating_sub(1)),
            "total_iters": newton_total,
            "max_step_iters": newton_max,
        },
        "rank_defects": {
            "init": init.rank_defect,
            "max_along_run": rank_max,
        },
    });
    if let Some(gap) = mode_gap {
        summary["mode_gap"] = json!(gap);
    }
    summary
}

/// Trajectory CSV: header `t,<names>`, rows in 17-significant-digit
/// scientific notation for lossless round-trips.
fn write_csv(path: &Path, names: &[String], traj: &Trajectory) -> AppResult<()> {
    let mut text = String::from("t");
    for name in names {
        text.push(',');
        text.push_str(name);
    }
    text.push('\n');
    for (t, s) in traj.times.iter().zip(&traj.states) {
        text.push_str(&format!("{t:.16e}"));
        for x in s.iter() {
            text.push_str(&format!(",{x:.16e}"));
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

/// Map an initialized full natural state onto the reduced chart.
fn full_to_reduced(sys: &LagrangianSystem, s: &DVector<f64>) -> AppResult<DVector<f64>> {
    let sym = &sys.sym;
    let n = sym.dims.n;
    let (m, k) = (sym.dims.m, sym.dims.k);
    let pt = PontryaginPoint::new(
        s.as_slice()[..n].to_vec(),
        s.as_slice()[n..2 * n].to_vec(),
        s.as_slice()[2 * n..].to_vec(),
    );
    let qp = sym
        .moving_frame()
        .to_quasi(&pt)
        .map_err(|e| failure(e.to_string()))?;
    let mut out = Vec::with_capacity(3 * m + sym.split.i_idx.len() + k);
    for &i in &sym.shape_idx {
        out.push(s[i]);
    }
    for &a in &sym.split.i_idx {
        out.push(s[sym.group_idx[a]]);
    }
    for i in 0..m {
        out.push(qp.vq[i]);
    }
    for a in 0..k {
        out.push(qp.vq[m + a]);
    }
    for i in 0..m {
        out.push(qp.pq[i]);
    }
    Ok(DVector::from_vec(out))
}

/// Initial group coordinates along the isotropy directions, for
/// reconstruction.
fn theta_a0(sys: &LagrangianSystem, s: &DVector<f64>) -> Vec<f64> {
    sys.sym
        .split
        .a_idx
        .iter()
        .map(|&a| s[sys.sym.group_idx[a]])
        .collect()
}

/// Sup-norm disagreement between two natural trajectories over all
/// components except the group velocities (determined only modulo the
/// kernel of the momentum-level two-form).
fn sup_gap(sys: &LagrangianSystem, a: &Trajectory, b: &Trajectory) -> f64 {
    let n = sys.sym.dims.n;
    let mask: Vec<usize> = sys.sym.group_idx.iter().map(|&g| n + g).collect();
    let mut worst = 0.0f64;
    for (sa, sb) in a.states.iter().zip(&b.states) {
        for i in 0..sa.len().min(sb.len()) {
            if mask.contains(&i) {
                continue;
            }
            worst = worst.max((sa[i] - sb[i]).abs());
        }
    }
    worst
}

/// Re-read a written trajectory file and evaluate the Dirac membership
/// residual at every sample, with rates read off the residual's own
/// differential rows.
fn check_dirac_file(
    sys: &LagrangianSystem,
    mu: &[f64],
    mode: RunMode,
    path: &Path,
) -> AppResult<f64> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut worst = 0.0f64;
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|x| {
                x.parse::<f64>().map_err(|e| {
                    failure(format!(
                        "{} line {}: bad float {x:?}: {e}",
                        path.display(),
                        idx + 1
                    ))
                })
            })
            .collect::<AppResult<_>>()?;
        let state = DVector::from_vec(row[1..].to_vec());
        let r = match mode {
            RunMode::Full | RunMode::Both => full_membership(sys, mu, &state)?,
            RunMode::Reduced => reduced_membership(sys, mu, &state)?,
        };
        worst = worst.max(r);
    }
    Ok(worst)
}

/// Membership residual of a full natural sample `[q; v; p]` in the
/// momentum-restricted Dirac system.
fn full_membership(sys: &LagrangianSystem, mu: &[f64], s: &DVector<f64>) -> AppResult<f64> {
    let n = sys.sym.dims.n;
    let (m, k) = (sys.sym.dims.m, sys.sym.dims.k);
    if s.len() != 3 * n {
        return Err(failure(format!(
            "trajectory row has {} state components, expected {}",
            s.len(),
            3 * n
        )));
    }
    let pt = PontryaginPoint::new(
        s.as_slice()[..n].to_vec(),
        s.as_slice()[n..2 * n].to_vec(),
        s.as_slice()[2 * n..].to_vec(),
    );
    let qp = sys
        .sym
        .moving_frame()
        .to_quasi(&pt)
        .map_err(|e| failure(e.to_string()))?;
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
    let r0 =
        restricted_dirac_residual(sys, mu, &state, &rates).map_err(|e| failure(e.to_string()))?;
    let total = r0.len();
    for i in 0..m {
        rates.dp[i] = -r0[total - m + i];
    }
    let r =
        restricted_dirac_residual(sys, mu, &state, &rates).map_err(|e| failure(e.to_string()))?;
    Ok(r.amax())
}

/// Membership residual of a reduced sample in the reduced Dirac system,
/// assembled through the reduced two-form and energy differential.
fn reduced_membership(sys: &LagrangianSystem, mu: &[f64], s: &DVector<f64>) -> AppResult<f64> {
    let (m, k) = (sys.sym.dims.m, sys.sym.dims.k);
    let n_i = sys.sym.split.i_idx.len();
    if s.len() != 3 * m + n_i + k {
        return Err(failure(format!(
            "trajectory row has {} state components, expected {}",
            s.len(),
            3 * m + n_i + k
        )));
    }
    let sl = s.as_slice();
    let state = ReducedState {
        x: DVector::from_vec(sl[..m].to_vec()),
        theta_i: DVector::from_vec(sl[m..m + n_i].to_vec()),
        v: DVector::from_vec(sl[m + n_i..2 * m + n_i].to_vec()),
        vhat: DVector::from_vec(sl[2 * m + n_i..2 * m + n_i + k].to_vec()),
        p: DVector::from_vec(sl[2 * m + n_i + k..].to_vec()),
    };
    let theta_a = sys.theta_a_ref();
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
    for j in 0..n_i {
        rates.dtheta_i[j] = -rows0[m + j];
    }
    for i in 0..m {
        rates.dp[i] = -rows0[m + n_i + i];
    }
    let r = reduced_dirac_residual(sys, mu, &theta_a, &state, &rates)
        .map_err(|e| failure(e.to_string()))?;
    Ok(r.amax())
}
