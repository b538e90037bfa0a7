//! Training objectives: primitives (MAE, frame cross entropy, Gaussian KLD),
//! the symmetrized tie/cycle terms and the weighted stage objectives, both
//! as plain values and as graph nodes.

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{frame_ce_value, kld_value, mae_value, Graph, Var};
use crate::net::LLEDistribution;
use crate::tensor::Mat;

/// Weights of the composite objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_sts: f64,
    pub alpha_stt: f64,
    pub beta: f64,
    pub gamma: f64,
    pub alpha_sup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_sts: 0.1,
            alpha_stt: 0.1,
            beta: 0.25,
            gamma: 0.01,
            alpha_sup: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_sts, self.alpha_stt, self.beta, self.gamma, self.alpha_sup];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

pub fn mae(pred: &Mat, target: &Mat) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::loss(format!(
            "mae shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(mae_value(pred, target))
}

pub fn frame_ce(posteriors: &Mat, labels: &[usize]) -> Result<f64> {
    check_labels(posteriors, labels)?;
    Ok(frame_ce_value(posteriors, labels))
}

pub(crate) fn check_labels(posteriors: &Mat, labels: &[usize]) -> Result<()> {
    if posteriors.rows() != labels.len() {
        return Err(Error::loss(format!(
            "{} posterior rows for {} labels",
            posteriors.rows(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= posteriors.cols()) {
        return Err(Error::loss(format!("label {l} ≥ {} classes", posteriors.cols())));
    }
    Ok(())
}

/// Mean over frames and dims of `KL(p || q)`.
pub fn kld_gaussian(p: &LLEDistribution, q: &LLEDistribution) -> Result<f64> {
    if p.mean.shape() != q.mean.shape() {
        return Err(Error::loss(format!(
            "kld shapes differ: {:?} vs {:?}",
            p.mean.shape(),
            q.mean.shape()
        )));
    }
    Ok(kld_value(&p.mean, &p.std, &q.mean, &q.std))
}

/// `½ KL(a || b) + ½ KL(b || a)`.
pub fn symmetric_kld(a: &LLEDistribution, b: &LLEDistribution) -> Result<f64> {
    Ok(0.5 * kld_gaussian(a, b)? + 0.5 * kld_gaussian(b, a)?)
}

pub fn loss_tie(tenc: &LLEDistribution, senc: &LLEDistribution) -> Result<f64> {
    symmetric_kld(tenc, senc)
}

pub fn loss_cycle(natural: &LLEDistribution, recon: &LLEDistribution) -> Result<f64> {
    symmetric_kld(natural, recon)
}

/// `tts + α_sts·sts + α_stt·stt`; a missing `stt` counts as absent.
pub fn goals(tts: f64, sts: f64, stt: Option<f64>, w: &LossWeights) -> f64 {
    let s = tts + w.alpha_sts * sts;
    match stt {
        Some(v) => s + w.alpha_stt * v,
        None => s,
    }
}

/// Joint-goal loss from the `tts`, `sts` and `stt` entries of a report.
pub fn loss_goals(report: &LossReport, w: &LossWeights) -> Result<f64> {
    let need = |k: &str| report.get(k).ok_or_else(|| Error::loss(format!("report lacks `{k}`")));
    Ok(goals(need("tts")?, need("sts")?, Some(need("stt")?), w))
}

pub fn loss_train(goals: f64, tie: f64, w: &LossWeights) -> f64 {
    goals + w.beta * tie
}

pub fn loss_adapt_unsup(sts: f64, cycle: f64, w: &LossWeights) -> f64 {
    sts + w.beta * cycle
}

pub fn loss_adapt_sup(tts: f64, sts: f64, tie: f64, w: &LossWeights) -> f64 {
    tts + w.alpha_sup * sts + w.beta * tie
}

pub fn loss_weld(sts: f64, voc: f64, w: &LossWeights) -> f64 {
    sts + w.gamma * voc
}

/// Graph versions. Every composite uses the same evaluation order as its
/// scalar counterpart so the two agree exactly.
pub mod graph {
    use super::*;

    pub fn symmetric_kld(g: &mut Graph, a: (Var, Var), b: (Var, Var)) -> (Var, Var, Var) {
        let fwd = g.kld(a.0, a.1, b.0, b.1);
        let bwd = g.kld(b.0, b.1, a.0, a.1);
        let hf = g.scale(fwd, 0.5);
        let hb = g.scale(bwd, 0.5);
        (g.add(hf, hb), fwd, bwd)
    }

    fn weighted(g: &mut Graph, acc: Var, term: Var, w: f64) -> Var {
        let t = g.scale(term, w);
        g.add(acc, t)
    }

    pub fn goals(g: &mut Graph, tts: Var, sts: Var, stt: Option<Var>, w: &LossWeights) -> Var {
        let s = weighted(g, tts, sts, w.alpha_sts);
        match stt {
            Some(v) => weighted(g, s, v, w.alpha_stt),
            None => s,
        }
    }

    pub fn train(g: &mut Graph, goals: Var, tie: Var, w: &LossWeights) -> Var {
        weighted(g, goals, tie, w.beta)
    }

    pub fn adapt_unsup(g: &mut Graph, sts: Var, cycle: Var, w: &LossWeights) -> Var {
        weighted(g, sts, cycle, w.beta)
    }

    pub fn adapt_sup(g: &mut Graph, tts: Var, sts: Var, tie: Var, w: &LossWeights) -> Var {
        let s = weighted(g, tts, sts, w.alpha_sup);
        weighted(g, s, tie, w.beta)
    }

    pub fn weld(g: &mut Graph, sts: Var, voc: Var, w: &LossWeights) -> Var {
        weighted(g, sts, voc, w.gamma)
    }
}

/// Canonical order of report entries.
pub const REPORT_TERMS: [&str; 13] = [
    "tts", "sts", "stt", "ttt", "tie_fwd", "tie_bwd", "tie", "cycle", "voc", "goals", "train", "adapt", "weld",
];

/// Named loss values of one step (or epoch).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub step: u64,
    entries: Vec<(String, f64)>,
}

impl LossReport {
    pub fn new(step: u64) -> Self {
        LossReport {
            step,
            entries: Vec::new(),
        }
    }

    /// Sets `name`, keeping canonical order for known terms and appending
    /// others in insertion order.
    pub fn set(&mut self, name: &str, value: f64) {
        if let Some(e) = self.entries.iter_mut().find(|(n, _)| n == name) {
            e.1 = value;
            return;
        }
        let rank = |n: &str| REPORT_TERMS.iter().position(|t| *t == n).unwrap_or(usize::MAX);
        let r = rank(name);
        let at = self
            .entries
            .iter()
            .position(|(n, _)| rank(n) > r)
            .unwrap_or(self.entries.len());
        self.entries.insert(at, (name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|e| e.1)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, v)| v.is_finite())
    }

    /// Adds `other` entry-wise (for averaging over a batch).
    pub fn accumulate(&mut self, other: &LossReport, weight: f64) {
        for (n, v) in &other.entries {
            let cur = self.get(n).unwrap_or(0.0);
            self.set(n, cur + weight * v);
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = format!("step={}", self.step);
        for (n, v) in &self.entries {
            s.push_str(&format!(" {n}={v:.16e}"));
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut words = line.split_whitespace();
        let bad = |msg: &str| Error::data(format!("curve line `{line}`: {msg}"));
        let step = words
            .next()
            .and_then(|w| w.strip_prefix("step="))
            .ok_or_else(|| bad("must start with step=<n>"))?
            .parse()
            .map_err(|_| bad("bad step"))?;
        let mut r = LossReport::new(step);
        for w in words {
            let (n, v) = w.split_once('=').ok_or_else(|| bad("expected name=value"))?;
            let v: f64 = v.parse().map_err(|_| bad("bad value"))?;
            if r.get(n).is_some() {
                return Err(bad("duplicate name"));
            }
            r.entries.push((n.to_string(), v));
        }
        Ok(r)
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}
