//! Layer primitives on the autodiff graph plus plain-matrix wrappers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{Mat, Padding};

/// Whether a forward pass is a training pass (dropout active) or not.
pub enum Pass<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }
}

pub fn padding(causal: bool) -> Padding {
    if causal {
        Padding::Causal
    } else {
        Padding::Centered
    }
}

/// `tanh(W^f∗h + c^f [+ b^f_k]) ⊙ σ(W^g∗h + c^g [+ b^g_k])`.
#[allow(clippy::too_many_arguments)]
pub fn filter_gate(
    g: &mut Graph,
    h: Var,
    wf: Var,
    wg: Var,
    cf: Var,
    cg: Var,
    speaker_bias: Option<(Var, Var)>,
    width: usize,
    dilation: usize,
    padding: Padding,
) -> Var {
    let mut f = g.conv(h, wf, width, dilation, padding);
    f = g.add_row(f, cf);
    let mut a = g.conv(h, wg, width, dilation, padding);
    a = g.add_row(a, cg);
    if let Some((bf, bg)) = speaker_bias {
        f = g.add_row(f, bf);
        a = g.add_row(a, bg);
    }
    let f = g.tanh(f);
    let a = g.sigmoid(a);
    g.mul(f, a)
}

/// `h^f ⊙ h^g + h ⊙ (1 - h^g)` with `h^f = W^f∗h`, `h^g = σ(W^g∗h)`.
pub fn highway(g: &mut Graph, h: Var, wf: Var, wg: Var, width: usize, dilation: usize, padding: Padding) -> Var {
    let hf = g.conv(h, wf, width, dilation, padding);
    let hg = g.conv(h, wg, width, dilation, padding);
    let hg = g.sigmoid(hg);
    let carry = g.one_minus(hg);
    let a = g.mul(hf, hg);
    let b = g.mul(h, carry);
    g.add(a, b)
}

/// Quasi-recurrent layer: candidate `tanh` and forget `σ` from one causal
/// convolution, then `h_t = f_t ⊙ h_{t-1} + (1 - f_t) ⊙ z_t`.
pub fn qrnn(g: &mut Graph, h: Var, w: Var, b: Var, width: usize, c_out: usize) -> Var {
    let pre = g.conv(h, w, width, 1, Padding::Causal);
    let pre = g.add_row(pre, b);
    let z = g.slice_cols(pre, 0, c_out);
    let f = g.slice_cols(pre, c_out, 2 * c_out);
    let z = g.tanh(z);
    let f = g.sigmoid(f);
    g.qrnn_scan(z, f)
}

/// Multiplies by an inverted-dropout mask when training.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, pass: &mut Pass<'_>) -> Var {
    let Pass::Train(rng) = pass else { return x };
    if rate <= 0.0 {
        return x;
    }
    let (r, c) = g.shape(x);
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..r * c)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = g.constant(Mat::from_vec(r, c, mask));
    g.mul(x, m)
}

/// Registers the parameters of `spec` in `store`.
pub fn init_layer(store: &mut ParamStore, spec: &LayerSpec, speakers: usize, rng: &mut ChaCha8Rng) {
    let n = &spec.name;
    let fan_in = spec.width * spec.c_in;
    match spec.kind {
        LayerKind::Dense => {
            store.init_normal(&format!("{n}.w"), spec.c_in, spec.c_out, spec.c_in, rng);
            store.init_const(&format!("{n}.b"), 1, spec.c_out, 0.0);
        }
        LayerKind::Qrnn => {
            store.init_normal(&format!("{n}.w"), fan_in, 2 * spec.c_out, fan_in, rng);
            store.init_const(&format!("{n}.b"), 1, 2 * spec.c_out, 0.0);
        }
        LayerKind::Fg | LayerKind::Fgs => {
            store.init_normal(&format!("{n}.wf"), fan_in, spec.c_out, fan_in, rng);
            store.init_normal(&format!("{n}.wg"), fan_in, spec.c_out, fan_in, rng);
            store.init_const(&format!("{n}.cf"), 1, spec.c_out, 0.0);
            store.init_const(&format!("{n}.cg"), 1, spec.c_out, 0.0);
            if spec.speaker {
                store.init_const(&format!("{n}.spk_f"), speakers, spec.c_out, 0.0);
                store.init_const(&format!("{n}.spk_g"), speakers, spec.c_out, 0.0);
            }
        }
        LayerKind::Hw => {
            store.init_normal(&format!("{n}.wf"), fan_in, spec.c_out, fan_in, rng);
            store.init_normal(&format!("{n}.wg"), fan_in, spec.c_out, fan_in, rng);
        }
    }
}

/// Expected `(name, rows, cols)` of every parameter of `spec`.
pub fn param_shapes(spec: &LayerSpec, speakers: usize) -> Vec<(String, usize, usize)> {
    let n = &spec.name;
    let fan_in = spec.width * spec.c_in;
    let mut v = Vec::new();
    match spec.kind {
        LayerKind::Dense => {
            v.push((format!("{n}.w"), spec.c_in, spec.c_out));
            v.push((format!("{n}.b"), 1, spec.c_out));
        }
        LayerKind::Qrnn => {
            v.push((format!("{n}.w"), fan_in, 2 * spec.c_out));
            v.push((format!("{n}.b"), 1, 2 * spec.c_out));
        }
        LayerKind::Fg | LayerKind::Fgs => {
            v.push((format!("{n}.wf"), fan_in, spec.c_out));
            v.push((format!("{n}.wg"), fan_in, spec.c_out));
            v.push((format!("{n}.cf"), 1, spec.c_out));
            v.push((format!("{n}.cg"), 1, spec.c_out));
            if spec.speaker {
                v.push((format!("{n}.spk_f"), speakers, spec.c_out));
                v.push((format!("{n}.spk_g"), speakers, spec.c_out));
            }
        }
        LayerKind::Hw => {
            v.push((format!("{n}.wf"), fan_in, spec.c_out));
            v.push((format!("{n}.wg"), fan_in, spec.c_out));
        }
    }
    v
}

/// Binds the speaker bias rows of an FGS layer, if the table is present and
/// a speaker is selected. A removed table ignores the speaker index.
fn speaker_rows(g: &mut Graph, store: &ParamStore, name: &str, speaker: Option<usize>) -> Result<Option<(Var, Var)>> {
    let (nf, ng) = (format!("{name}.spk_f"), format!("{name}.spk_g"));
    let Some(k) = speaker else { return Ok(None) };
    if !store.contains(&nf) {
        return Ok(None);
    }
    let rows = store.get(&nf)?.rows();
    if k >= rows {
        return Err(Error::model(format!(
            "speaker {k} out of range for {rows} speakers in {name}"
        )));
    }
    let tf = g.param(store, &nf)?;
    let tg = g.param(store, &ng)?;
    Ok(Some((g.select_row(tf, k), g.select_row(tg, k))))
}

/// Applies one manifest layer (including residual and dropout).
pub fn apply_layer(
    g: &mut Graph,
    store: &ParamStore,
    spec: &LayerSpec,
    x: Var,
    speaker: Option<usize>,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    let c = g.shape(x).1;
    if c != spec.c_in {
        return Err(Error::model(format!(
            "layer {} expects {} input channels, got {c}",
            spec.name, spec.c_in
        )));
    }
    let n = &spec.name;
    let pad = padding(spec.causal);
    let mut y = match spec.kind {
        LayerKind::Dense => {
            let w = g.param(store, &format!("{n}.w"))?;
            let b = g.param(store, &format!("{n}.b"))?;
            let y = g.matmul(x, w);
            g.add_row(y, b)
        }
        LayerKind::Qrnn => {
            let w = g.param(store, &format!("{n}.w"))?;
            let b = g.param(store, &format!("{n}.b"))?;
            qrnn(g, x, w, b, spec.width, spec.c_out)
        }
        LayerKind::Fg | LayerKind::Fgs => {
            let wf = g.param(store, &format!("{n}.wf"))?;
            let wg = g.param(store, &format!("{n}.wg"))?;
            let cf = g.param(store, &format!("{n}.cf"))?;
            let cg = g.param(store, &format!("{n}.cg"))?;
            let spk = if spec.speaker {
                speaker_rows(g, store, n, speaker)?
            } else {
                None
            };
            filter_gate(g, x, wf, wg, cf, cg, spk, spec.width, spec.dilation, pad)
        }
        LayerKind::Hw => {
            let wf = g.param(store, &format!("{n}.wf"))?;
            let wg = g.param(store, &format!("{n}.wg"))?;
            highway(g, x, wf, wg, spec.width, spec.dilation, pad)
        }
    };
    if spec.residual {
        y = g.add(x, y);
    }
    Ok(dropout(g, y, spec.dropout, pass))
}

/// Number of past frames an output row can see through `layers`.
pub fn past_radius<'a>(layers: impl IntoIterator<Item = &'a LayerSpec>) -> usize {
    layers
        .into_iter()
        .map(|l| match l.kind {
            LayerKind::Dense => 0,
            _ => crate::tensor::past_reach(l.width, l.dilation, padding(l.causal)),
        })
        .sum()
}

/// Weights of a stand-alone filter-gate layer.
#[derive(Debug, Clone)]
pub struct FilterGateParams {
    /// `(width·C_in) × C_out`, tap-major.
    pub wf: Mat,
    pub wg: Mat,
    /// `1 × C_out`.
    pub cf: Mat,
    pub cg: Mat,
    pub width: usize,
}

impl FilterGateParams {
    fn check(&self, h: &Mat) -> Result<usize> {
        let c_out = self.wf.cols();
        let ok = self.width > 0
            && self.wf.rows() == self.width * h.cols()
            && self.wg.shape() == self.wf.shape()
            && self.cf.shape() == (1, c_out)
            && self.cg.shape() == (1, c_out);
        if !ok {
            return Err(Error::model(format!(
                "filter-gate shapes: input {:?}, wf {:?}, wg {:?}, cf {:?}, cg {:?}, width {}",
                h.shape(),
                self.wf.shape(),
                self.wg.shape(),
                self.cf.shape(),
                self.cg.shape(),
                self.width
            )));
        }
        Ok(c_out)
    }
}

/// Per-speaker filter and gate biases (`K × C_out` each).
#[derive(Debug, Clone)]
pub struct SpeakerBiases {
    pub bf: Mat,
    pub bg: Mat,
}

fn check_dilation(dilation: usize, width: usize, causal: bool) -> Result<()> {
    if dilation == 0 {
        return Err(Error::model("dilation must be ≥ 1"));
    }
    if !causal && width.is_multiple_of(2) {
        return Err(Error::model("centered convolution needs an odd width"));
    }
    Ok(())
}

pub fn filter_gate_layer(h: &Mat, p: &FilterGateParams, dilation: usize, causal: bool) -> Result<Mat> {
    p.check(h)?;
    check_dilation(dilation, p.width, causal)?;
    let mut g = Graph::inference();
    let x = g.constant(h.clone());
    let [wf, wg, cf, cg] = [&p.wf, &p.wg, &p.cf, &p.cg].map(|m| g.constant(m.clone()));
    let y = filter_gate(&mut g, x, wf, wg, cf, cg, None, p.width, dilation, padding(causal));
    Ok(g.value(y).clone())
}

pub fn filter_gate_speaker_layer(
    h: &Mat,
    p: &FilterGateParams,
    biases: &SpeakerBiases,
    speaker: Option<usize>,
    dilation: usize,
    causal: bool,
) -> Result<Mat> {
    let c_out = p.check(h)?;
    check_dilation(dilation, p.width, causal)?;
    if biases.bf.cols() != c_out || biases.bg.shape() != biases.bf.shape() {
        return Err(Error::model("speaker bias table shape mismatch"));
    }
    if let Some(k) = speaker {
        if k >= biases.bf.rows() {
            return Err(Error::model(format!(
                "speaker {k} out of range for {} speakers",
                biases.bf.rows()
            )));
        }
    }
    let mut g = Graph::inference();
    let x = g.constant(h.clone());
    let [wf, wg, cf, cg] = [&p.wf, &p.wg, &p.cf, &p.cg].map(|m| g.constant(m.clone()));
    let spk = speaker.map(|k| {
        let bf = g.constant(biases.bf.slice_rows(k, 1));
        let bg = g.constant(biases.bg.slice_rows(k, 1));
        (bf, bg)
    });
    let y = filter_gate(&mut g, x, wf, wg, cf, cg, spk, p.width, dilation, padding(causal));
    Ok(g.value(y).clone())
}

/// Weights of a stand-alone highway layer (`(width·C) × C` each).
#[derive(Debug, Clone)]
pub struct HighwayParams {
    pub wf: Mat,
    pub wg: Mat,
    pub width: usize,
}

pub fn highway_layer(h: &Mat, p: &HighwayParams, dilation: usize, causal: bool) -> Result<Mat> {
    let c = h.cols();
    if p.width == 0 || p.wf.shape() != (p.width * c, c) || p.wg.shape() != p.wf.shape() {
        return Err(Error::model(format!(
            "highway layer must map {c} channels to {c}: wf {:?}, wg {:?}, width {}",
            p.wf.shape(),
            p.wg.shape(),
            p.width
        )));
    }
    check_dilation(dilation, p.width, causal)?;
    let mut g = Graph::inference();
    let x = g.constant(h.clone());
    let wf = g.constant(p.wf.clone());
    let wg = g.constant(p.wg.clone());
    let y = highway(&mut g, x, wf, wg, p.width, dilation, padding(causal));
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;

    fn fg_params(c_in: usize, c_out: usize, width: usize, fill: f64) -> FilterGateParams {
        FilterGateParams {
            wf: Mat::filled(width * c_in, c_out, fill),
            wg: Mat::filled(width * c_in, c_out, fill),
            cf: Mat::zeros(1, c_out),
            cg: Mat::zeros(1, c_out),
            width,
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let h = Mat::from_vec(4, 2, vec![0.3, -1.0, 2.0, 0.5, -0.7, 0.1, 1.2, 0.0]);
        let y = filter_gate_layer(&h, &fg_params(2, 3, 3, 0.0), 1, true).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_biases_give_one() {
        let h = Mat::from_vec(3, 1, vec![0.3, -1.0, 2.0]);
        let mut p = fg_params(1, 2, 3, 0.0);
        p.cf = Mat::filled(1, 2, 40.0);
        p.cg = Mat::filled(1, 2, 40.0);
        let y = filter_gate_layer(&h, &p, 2, false).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn single_channel_width_one_matches_scalar_formula() {
        let xs = [0.5, -1.5, 2.0, 0.25];
        let h = Mat::from_vec(4, 1, xs.to_vec());
        let p = FilterGateParams {
            wf: Mat::scalar(0.8),
            wg: Mat::scalar(-0.6),
            cf: Mat::scalar(0.1),
            cg: Mat::scalar(0.3),
            width: 1,
        };
        let y = filter_gate_layer(&h, &p, 1, true).unwrap();
        for (t, &x) in xs.iter().enumerate() {
            let want = (0.8 * x + 0.1f64).tanh() * sigmoid(-0.6 * x + 0.3);
            assert!((y.get(t, 0) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_width_three_matches_hand_taps() {
        // taps at t-2d, t-d, t with d = 1
        let xs = [1.0, 2.0, 3.0, 4.0];
        let h = Mat::from_vec(4, 1, xs.to_vec());
        let p = FilterGateParams {
            wf: Mat::from_vec(3, 1, vec![0.1, 0.2, 0.3]),
            wg: Mat::from_vec(3, 1, vec![0.0, 0.0, 0.0]),
            cf: Mat::scalar(0.0),
            cg: Mat::scalar(0.0),
            width: 3,
        };
        let y = filter_gate_layer(&h, &p, 1, true).unwrap();
        let at = |i: isize| if i < 0 { 0.0 } else { xs[i as usize] };
        for t in 0..4isize {
            let f = 0.1 * at(t - 2) + 0.2 * at(t - 1) + 0.3 * at(t);
            assert!((y.get(t as usize, 0) - f.tanh() * 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn speaker_layer_reduces_to_plain_layer() {
        let h = Mat::from_vec(3, 2, vec![0.3, -1.0, 2.0, 0.5, -0.7, 0.1]);
        let mut p = fg_params(2, 2, 3, 0.2);
        p.cf = Mat::from_vec(1, 2, vec![0.1, -0.1]);
        let zero = SpeakerBiases {
            bf: Mat::zeros(2, 2),
            bg: Mat::zeros(2, 2),
        };
        let plain = filter_gate_layer(&h, &p, 1, true).unwrap();
        assert_eq!(
            filter_gate_speaker_layer(&h, &p, &zero, Some(1), 1, true).unwrap(),
            plain
        );
        assert_eq!(filter_gate_speaker_layer(&h, &p, &zero, None, 1, true).unwrap(), plain);
        let diff = SpeakerBiases {
            bf: Mat::from_vec(2, 2, vec![0.0, 0.0, 0.5, 0.5]),
            bg: Mat::zeros(2, 2),
        };
        let a = filter_gate_speaker_layer(&h, &p, &diff, Some(0), 1, true).unwrap();
        let b = filter_gate_speaker_layer(&h, &p, &diff, Some(1), 1, true).unwrap();
        assert_ne!(a, b);
        assert!(filter_gate_speaker_layer(&h, &p, &diff, Some(2), 1, true).is_err());
    }

    #[test]
    fn shape_mismatch_is_model_error() {
        let h = Mat::zeros(3, 2);
        assert!(matches!(
            filter_gate_layer(&h, &fg_params(3, 2, 3, 0.0), 1, true),
            Err(Error::Model(_))
        ));
        let hw = HighwayParams {
            wf: Mat::zeros(2, 3),
            wg: Mat::zeros(2, 3),
            width: 1,
        };
        assert!(matches!(highway_layer(&h, &hw, 1, true), Err(Error::Model(_))));
    }

    #[test]
    fn highway_gate_extremes() {
        // positive inputs so a large-magnitude gate weight saturates σ
        let h = Mat::from_vec(2, 2, vec![0.4, 0.2, 1.0, 3.0]);
        let wf = Mat::from_vec(2, 2, vec![1.0, 2.0, -1.0, 0.5]);
        let closed = HighwayParams {
            wf: wf.clone(),
            wg: Mat::filled(2, 2, -500.0),
            width: 1,
        };
        let y = highway_layer(&h, &closed, 1, true).unwrap();
        assert!(y.max_abs_diff(&h) < 1e-12);
        let open = HighwayParams {
            wf: wf.clone(),
            wg: Mat::filled(2, 2, 500.0),
            width: 1,
        };
        let y = highway_layer(&h, &open, 1, true).unwrap();
        for t in 0..2 {
            for c in 0..2 {
                let hf = h.get(t, 0) * wf.get(0, c) + h.get(t, 1) * wf.get(1, c);
                assert!((y.get(t, c) - hf).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn highway_two_by_two_hand_case() {
        let h = Mat::from_vec(1, 2, vec![0.7, -0.3]);
        let wf = Mat::from_vec(2, 2, vec![0.2, -0.5, 0.9, 0.4]);
        let wg = Mat::from_vec(2, 2, vec![-0.3, 0.8, 0.6, 0.1]);
        let y = highway_layer(&h, &HighwayParams { wf, wg, width: 1 }, 1, true).unwrap();
        let hf = [0.7 * 0.2 + -0.3 * 0.9, 0.7 * -0.5 + -0.3 * 0.4];
        let hg = [sigmoid(0.7 * -0.3 + -0.3 * 0.6), sigmoid(0.7 * 0.8 + -0.3 * 0.1)];
        let x = [0.7, -0.3];
        for c in 0..2 {
            let want = hf[c] * hg[c] + x[c] * (1.0 - hg[c]);
            assert!((y.get(0, c) - want).abs() < 1e-15);
        }
    }
}
