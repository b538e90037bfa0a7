//! Central finite-difference gradient checks against the autodiff tape.

use crate::error::Result;
use crate::graph::{Graph, Trainable, Var};
use crate::params::ParamStore;
use crate::tensor::Mat;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Maximum tolerated relative error.
pub const MAX_REL_ERR: f64 = 1e-3;
/// Denominator floor of the relative error, so that entries whose true
/// gradient is (numerically) zero are judged on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Location of the worst entry, `name[index]`.
    pub worst: String,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, what: &str, idx: usize, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if self.worst.is_empty() || err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = format!("{what}[{idx}] analytic={analytic:.6e} numeric={numeric:.6e}");
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err <= MAX_REL_ERR
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks every entry of every parameter accepted by `select` for a scalar
/// function built by `build` from the parameter store.
pub fn check_params<F>(store: &mut ParamStore, select: impl Fn(&str) -> bool, build: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, Trainable) -> Result<(Graph, Var)>,
{
    let (g, root) = build(store, Trainable::All)?;
    let grads = g.backward(root);
    let names: Vec<String> = store.names().filter(|n| select(n)).map(String::from).collect();
    let mut report = GradCheckReport::new();
    for name in names {
        let n = store.get(&name)?.len();
        let analytic = grads.params().get(&name).cloned();
        for i in 0..n {
            let orig = store.get(&name)?.data()[i];
            store.get_mut(&name).unwrap().data_mut()[i] = orig + FD_STEP;
            let plus = eval(store, &build)?;
            store.get_mut(&name).unwrap().data_mut()[i] = orig - FD_STEP;
            let minus = eval(store, &build)?;
            store.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.as_ref().map_or(0.0, |m| m.data()[i]);
            report.record(&name, i, a, numeric);
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&ParamStore, Trainable) -> Result<(Graph, Var)>,
{
    let (g, root) = build(store, Trainable::None)?;
    Ok(g.value(root).item())
}

/// Checks gradients with respect to explicit input matrices. `build` must
/// register `inputs[i]` as leaf `i` (returned in order) and return the root.
pub fn check_inputs<F>(inputs: &[Mat], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let run = |xs: &[Mat], want_grads: bool| -> Result<(f64, Vec<Option<Mat>>)> {
        let mut g = Graph::inference();
        let leaves: Vec<Var> = xs.iter().map(|m| g.leaf(m.clone())).collect();
        let root = build(&mut g, &leaves)?;
        let value = g.value(root).item();
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(root);
        Ok((value, leaves.iter().map(|&l| grads.wrt(l).cloned()).collect()))
    };
    let (_, analytic) = run(inputs, true)?;
    let mut report = GradCheckReport::new();
    let mut xs = inputs.to_vec();
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let (plus, _) = run(&xs, false)?;
            xs[k].data_mut()[i] = orig - FD_STEP;
            let (minus, _) = run(&xs, false)?;
            xs[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[k].as_ref().map_or(0.0, |m| m.data()[i]);
            report.record(&format!("input{k}"), i, a, numeric);
        }
    }
    Ok(report)
}
