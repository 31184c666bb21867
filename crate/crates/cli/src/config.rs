//! System selection: builtin families with default data, or a JSON
//! system file `{family, params, potential, extra_constraints, mu_split}`.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use routh_core::eval::{lag_gradients, EvalScalar, JetDef};
use routh_core::routh::{ExtraConstraint, LagrangianSystem};
use routh_core::symmetry::MuSplit;
use routh_core::systems::{
    make_affine_group, make_central_force, make_cyclic_linear, make_point_vortices,
    make_scalar_fields, make_so3_algebraic, parse_potential, PotentialExpr,
};

use crate::{usage, AppResult};

pub const BUILTINS: &[&str] = &[
    "cyclic-linear",
    "central-force",
    "scalar-fields",
    "vortices",
    "so3-algebraic",
    "affine-group",
];

/// A ready-to-run system: the built instance plus default initial data.
pub struct LoadedSystem {
    pub sys: LagrangianSystem,
    /// Full natural initial guess `[q; v; p]` with `p = dL/dv`.
    pub guess: DVector<f64>,
    /// Momentum level of the default guess.
    pub default_mu: Vec<f64>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    family: String,
    #[serde(default)]
    params: ParamTable,
    #[serde(default)]
    potential: Option<String>,
    #[serde(default)]
    extra_constraints: Vec<String>,
    #[serde(default)]
    mu_split: Option<SplitTable>,
}

#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ParamTable {
    mass: Option<f64>,
    m2: Option<f64>,
    m3: Option<f64>,
    gamma: Option<Vec<f64>>,
    axis: Option<usize>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitTable {
    #[serde(rename = "A")]
    a: Vec<usize>,
    #[serde(rename = "I")]
    i: Vec<usize>,
}

/// Resolve a `--system` argument: a builtin name, or a path to a JSON
/// system file.
pub fn load_system(spec: &str) -> AppResult<LoadedSystem> {
    let family = canonical_family(spec);
    if BUILTINS.contains(&family) {
        return build(SystemFile {
            family: family.to_string(),
            params: ParamTable::default(),
            potential: None,
            extra_constraints: Vec::new(),
            mu_split: None,
        });
    }
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        let file: SystemFile = serde_json::from_str(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        return build(file);
    }
    Err(usage(format!(
        "unknown system {spec:?}: pass one of {} or a path to a JSON system file",
        BUILTINS.join(", ")
    )))
}

/// Accept the long alias for the vortex family.
fn canonical_family(name: &str) -> &str {
    if name == "point-vortices" {
        "vortices"
    } else {
        name
    }
}

fn build(file: SystemFile) -> AppResult<LoadedSystem> {
    let family = canonical_family(&file.family).to_string();
    let p = &file.params;
    let err = |e: routh_core::error::Error| usage(format!("cannot build {family}: {e}"));
    let parse_v = |text: &str| -> AppResult<PotentialExpr> {
        parse_potential(text).map_err(|e| usage(format!("potential {text:?}: {e}")))
    };
    let forbid = |cond: bool, what: &str| -> AppResult<()> {
        if cond {
            Err(usage(format!("{family} does not take {what}")))
        } else {
            Ok(())
        }
    };

    let (mut sys, gamma, axis) = match family.as_str() {
        "cyclic-linear" => {
            forbid(p.mass.is_some(), "params.mass")?;
            forbid(p.m2.is_some() || p.m3.is_some(), "params.m2/m3")?;
            forbid(p.gamma.is_some(), "params.gamma")?;
            forbid(p.axis.is_some(), "params.axis")?;
            let v = parse_v(file.potential.as_deref().unwrap_or("x^2/2"))?;
            (make_cyclic_linear(v).map_err(err)?, Vec::new(), 0)
        }
        "central-force" => {
            forbid(p.m2.is_some() || p.m3.is_some(), "params.m2/m3")?;
            forbid(p.gamma.is_some(), "params.gamma")?;
            forbid(p.axis.is_some(), "params.axis")?;
            let v = parse_v(file.potential.as_deref().unwrap_or("r^2/2"))?;
            (
                make_central_force(p.mass.unwrap_or(1.0), v).map_err(err)?,
                Vec::new(),
                0,
            )
        }
        "scalar-fields" => {
            forbid(p.mass.is_some(), "params.mass")?;
            forbid(p.gamma.is_some(), "params.gamma")?;
            forbid(p.axis.is_some(), "params.axis")?;
            forbid(file.potential.is_some(), "a potential")?;
            (
                make_scalar_fields(p.m2.unwrap_or(1.0), p.m3.unwrap_or(1.0)).map_err(err)?,
                Vec::new(),
                0,
            )
        }
        "vortices" => {
            forbid(p.mass.is_some(), "params.mass")?;
            forbid(p.m2.is_some() || p.m3.is_some(), "params.m2/m3")?;
            forbid(p.axis.is_some(), "params.axis")?;
            forbid(file.potential.is_some(), "a potential")?;
            let gamma = p.gamma.clone().unwrap_or_else(|| vec![1.0, 1.5]);
            (make_point_vortices(&gamma).map_err(err)?, gamma, 0)
        }
        "so3-algebraic" => {
            forbid(p.mass.is_some(), "params.mass")?;
            forbid(p.m2.is_some() || p.m3.is_some(), "params.m2/m3")?;
            forbid(p.gamma.is_some(), "params.gamma")?;
            forbid(file.potential.is_some(), "a potential")?;
            let axis = p.axis.unwrap_or(2);
            (make_so3_algebraic(axis).map_err(err)?, Vec::new(), axis)
        }
        "affine-group" => {
            forbid(
                p.mass.is_some() || p.m2.is_some() || p.m3.is_some(),
                "mass params",
            )?;
            forbid(p.gamma.is_some(), "params.gamma")?;
            forbid(p.axis.is_some(), "params.axis")?;
            forbid(file.potential.is_some(), "a potential")?;
            (make_affine_group().map_err(err)?, Vec::new(), 0)
        }
        other => {
            return Err(usage(format!(
                "unknown family {other:?}: expected one of {}",
                BUILTINS.join(", ")
            )))
        }
    };

    for text in &file.extra_constraints {
        let row = ExprRow::parse(&sys, text)?;
        sys.extra_constraints.push(ExtraConstraint {
            label: text.clone(),
            f: Arc::new(row),
        });
    }

    if let Some(split) = &file.mu_split {
        apply_split(&mut sys, split)?;
    }

    let guess = default_guess(&family, &sys, &gamma, axis);
    let n = sys.sym.dims.n;
    let default_mu = sys
        .sym
        .quasi_momentum::<f64>(&guess.as_slice()[..n], &guess.as_slice()[2 * n..]);
    Ok(LoadedSystem {
        sys,
        guess,
        default_mu,
    })
}

/// Override the group splitting, keeping the isotropy dimension in sync.
fn apply_split(sys: &mut LagrangianSystem, split: &SplitTable) -> AppResult<()> {
    let k = sys.sym.dims.k;
    let mut seen = vec![false; k];
    for &idx in split.a.iter().chain(&split.i) {
        if idx >= k {
            return Err(usage(format!(
                "mu_split index {idx} out of range for a {k}-dimensional group"
            )));
        }
        if seen[idx] {
            return Err(usage(format!("mu_split lists index {idx} twice")));
        }
        seen[idx] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(usage(format!(
            "mu_split must partition all {k} group directions between A and I"
        )));
    }
    sys.sym.split = MuSplit {
        a_idx: split.a.clone(),
        i_idx: split.i.clone(),
    };
    sys.sym.dims.k_mu = split.a.len();
    Ok(())
}

/// A phase-space constraint row parsed from an expression over the
/// coordinates and their `v_`/`p_` companions.
struct ExprRow {
    expr: PotentialExpr,
    /// Binding names: coordinates, then `v_*`, then `p_*`.
    names: Vec<String>,
}

impl ExprRow {
    fn parse(sys: &LagrangianSystem, text: &str) -> AppResult<Self> {
        let expr =
            parse_potential(text).map_err(|e| usage(format!("constraint {text:?}: {e}")))?;
        let mut names: Vec<String> = sys.coords.clone();
        names.extend(sys.coords.iter().map(|c| format!("v_{c}")));
        names.extend(sys.coords.iter().map(|c| format!("p_{c}")));
        let row = ExprRow { expr, names };
        // Surface unknown variables (and immediate domain problems) at
        // load time by evaluating once near the probe configuration.
        let n = sys.coords.len();
        let q = sys.probe_q.clone();
        let v = vec![0.1; n];
        let p = vec![0.2; n];
        row.try_eval(&q, &v, &p)
            .map_err(|e| usage(format!("constraint {text:?}: {e}")))?;
        Ok(row)
    }

    fn bindings<'a, S: EvalScalar>(&'a self, q: &[S], v: &[S], p: &[S]) -> Vec<(&'a str, S)> {
        let n = q.len();
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            out.push((self.names[i].as_str(), q[i]));
        }
        for i in 0..n {
            out.push((self.names[n + i].as_str(), v[i]));
        }
        for i in 0..n {
            out.push((self.names[2 * n + i].as_str(), p[i]));
        }
        out
    }

    fn try_eval(&self, q: &[f64], v: &[f64], p: &[f64]) -> routh_core::error::Result<f64> {
        self.expr.eval(&self.bindings(q, v, p))
    }
}

impl JetDef for ExprRow {
    fn eval<S: EvalScalar>(&self, q: &[S], v: &[S], p: &[S]) -> S {
        self.expr.eval_or_nan(&self.bindings(q, v, p))
    }
}

/// Family-specific initial data: positions and velocities chosen on the
/// momentum surface, momenta from the Legendre map.
fn default_guess(family: &str, sys: &LagrangianSystem, gamma: &[f64], axis: usize) -> DVector<f64> {
    let n = sys.sym.dims.n;
    let (q, v): (Vec<f64>, Vec<f64>) = match family {
        "cyclic-linear" => (vec![0.0, 0.0], vec![1.0, 0.0]),
        "central-force" => (vec![1.0, 0.0], vec![0.3, 1.0]),
        "scalar-fields" => (
            vec![0.0, 0.0, 1.0, 1.2, 0.0, 0.0],
            vec![0.0, 0.0, 0.2, -0.1, 0.5, 0.25],
        ),
        "vortices" => {
            let q = sys.probe_q.clone();
            let v = vortex_rates(gamma, &q);
            (q, v)
        }
        "so3-algebraic" => {
            let mut v = vec![0.0; n];
            v[axis] = 0.5;
            (sys.probe_q.clone(), v)
        }
        "affine-group" => (sys.probe_q.clone(), vec![0.5, 0.0]),
        _ => unreachable!("families are validated in build"),
    };
    let (_, p) = lag_gradients::<f64>(sys.l.as_ref(), &q, &v);
    let mut state = q;
    state.extend(v);
    state.extend(p);
    DVector::from_vec(state)
}

/// First-order point-vortex flow in Cartesian coordinates, converted to
/// the polar chart rates `(rho_dot, absolute angle rate, relative rates)`.
fn vortex_rates(gamma: &[f64], q: &[f64]) -> Vec<f64> {
    let nv = gamma.len();
    let theta: Vec<f64> = (0..nv)
        .map(|k| if k == 0 { q[nv] } else { q[nv] + q[nv + k] })
        .collect();
    let z: Vec<(f64, f64)> = (0..nv)
        .map(|k| (q[k] * theta[k].cos(), q[k] * theta[k].sin()))
        .collect();
    let mut rdot = vec![0.0; nv];
    let mut thdot = vec![0.0; nv];
    for k in 0..nv {
        let (mut sx, mut sy) = (0.0, 0.0);
        for m in 0..nv {
            if m == k {
                continue;
            }
            let (dx, dy) = (z[k].0 - z[m].0, z[k].1 - z[m].1);
            let d2 = dx * dx + dy * dy;
            sx += gamma[m] * (-dy) / (2.0 * d2);
            sy += gamma[m] * dx / (2.0 * d2);
        }
        rdot[k] = sx * theta[k].cos() + sy * theta[k].sin();
        thdot[k] = (-sx * theta[k].sin() + sy * theta[k].cos()) / q[k];
    }
    let mut v = rdot;
    for k in 0..nv {
        v.push(if k == 0 { thdot[0] } else { thdot[k] - thdot[0] });
    }
    v
}
