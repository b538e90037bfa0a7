//! The four text-speech networks.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{apply_layer, dropout, past_radius, Pass};
use super::state::ModelState;
use crate::error::{Error, Result};
use crate::features::{MelMatrix, PhonemeTranscript};
use crate::graph::{Graph, Var};
use crate::tensor::Mat;

/// Frame-level diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LLEDistribution {
    pub mean: Mat,
    pub std: Mat,
}

impl LLEDistribution {
    pub fn new(mean: Mat, std: Mat) -> Result<Self> {
        if mean.shape() != std.shape() {
            return Err(Error::model("mean and std shapes differ"));
        }
        if !mean.is_finite() || std.data().iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::model("mean must be finite and std strictly positive"));
        }
        Ok(LLEDistribution { mean, std })
    }

    pub fn frames(&self) -> usize {
        self.mean.rows()
    }

    pub fn dims(&self) -> usize {
        self.mean.cols()
    }
}

/// A latent sequence `z` (T×Z).
#[derive(Debug, Clone, PartialEq)]
pub struct LLESequence {
    pub z: Mat,
}

/// Noise for [`reparameterize`].
pub enum Noise<'a> {
    /// ε = 0: the distribution mean.
    Zero,
    Draw(&'a Mat),
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize(dist: &LLEDistribution, noise: Noise<'_>) -> Result<LLESequence> {
    let z = match noise {
        Noise::Zero => dist.mean.clone(),
        Noise::Draw(eps) => {
            if eps.shape() != dist.mean.shape() {
                return Err(Error::model("noise shape differs from the distribution"));
            }
            let data = dist
                .mean
                .data()
                .iter()
                .zip(dist.std.data())
                .zip(eps.data())
                .map(|((m, s), e)| m + s * e)
                .collect();
            Mat::from_vec(dist.frames(), dist.dims(), data)
        }
    };
    Ok(LLESequence { z })
}

/// A T×Z standard-normal draw.
pub fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Mat::from_vec(rows, cols, data)
}

/// Splits a `2Z`-column head into `(μ, σ = exp(raw/2))`.
fn gaussian_head(g: &mut Graph, h: Var) -> (Var, Var) {
    let z = g.shape(h).1 / 2;
    let mu = g.slice_cols(h, 0, z);
    let raw = g.slice_cols(h, z, 2 * z);
    let half = g.scale(raw, 0.5);
    (mu, g.exp(half))
}

fn run_stack(
    g: &mut Graph,
    st: &ModelState,
    prefix: &str,
    mut x: Var,
    speaker: Option<usize>,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    for spec in st.manifest.stack(prefix) {
        x = apply_layer(g, &st.params, spec, x, speaker, pass)?;
    }
    Ok(x)
}

fn run_layer(g: &mut Graph, st: &ModelState, name: &str, x: Var, pass: &mut Pass<'_>) -> Result<Var> {
    let spec = st.manifest.layer(name)?;
    apply_layer(g, &st.params, spec, x, None, pass)
}

/// Maps raw log-mel to the normalised domain (inside the graph).
pub fn normalize_mel(g: &mut Graph, st: &ModelState, mel: Var) -> Result<Var> {
    let (scale, shift) = st.normalizer()?;
    check_mel_dims(st, g.shape(mel).1)?;
    Ok(g.affine_cols(mel, &scale, &shift))
}

fn check_mel_dims(st: &ModelState, d: usize) -> Result<()> {
    if d != st.manifest.dims.mel {
        return Err(Error::model(format!(
            "mel has {d} bands, model expects {}",
            st.manifest.dims.mel
        )));
    }
    Ok(())
}

/// Text encoder: embedding, bidirectional quasi-recurrent context at the
/// phoneme level, duration upsampling, dilated filter-gate stack, Gaussian head.
pub fn text_encoder_graph(
    g: &mut Graph,
    st: &ModelState,
    t: &PhonemeTranscript,
    pass: &mut Pass<'_>,
) -> Result<(Var, Var)> {
    let p = st.manifest.dims.phonemes;
    if let Some(&bad) = t.ids().iter().find(|&&i| i >= p) {
        return Err(Error::model(format!("phoneme id {bad} outside inventory of {p}")));
    }
    let embed = st.manifest.layer("tenc.embed")?;
    let table = g.param(&st.params, "tenc.embed.w")?;
    let bias = g.param(&st.params, "tenc.embed.b")?;
    let ids: Vec<Option<usize>> = t.ids().iter().map(|&i| Some(i)).collect();
    let x = g.gather_rows(table, &ids);
    let x = g.add_row(x, bias);
    let x = dropout(g, x, embed.dropout, pass);

    let fwd = run_layer(g, st, "tenc.ctx.fwd", x, pass)?;
    let rev = g.reverse_rows(x);
    let bwd = run_layer(g, st, "tenc.ctx.bwd", rev, pass)?;
    let bwd = g.reverse_rows(bwd);
    let ctx = g.concat_cols(fwd, bwd);

    let up = g.repeat_rows(ctx, t.durations());
    let h = run_stack(g, st, "tenc.latent", up, None, pass)?;
    let out = run_layer(g, st, "tenc.out", h, pass)?;
    Ok(gaussian_head(g, out))
}

/// Speech encoder: non-causal dilated filter-gate stack over normalised mel.
pub fn speech_encoder_graph(g: &mut Graph, st: &ModelState, mel: Var, pass: &mut Pass<'_>) -> Result<(Var, Var)> {
    let x = normalize_mel(g, st, mel)?;
    let x = run_layer(g, st, "senc.in", x, pass)?;
    let h = run_stack(g, st, "senc.latent", x, None, pass)?;
    let out = run_layer(g, st, "senc.out", h, pass)?;
    Ok(gaussian_head(g, out))
}

/// Context block of the speech decoder (speaker-dependent, causal in z).
pub fn decoder_context_graph(
    g: &mut Graph,
    st: &ModelState,
    z: Var,
    speaker: Option<usize>,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    if g.shape(z).1 != st.manifest.dims.latent {
        return Err(Error::model(format!(
            "latent has {} dims, model expects {}",
            g.shape(z).1,
            st.manifest.dims.latent
        )));
    }
    let x = run_layer(g, st, "sdec.ctx.in", z, pass)?;
    run_stack(g, st, "sdec.ctx", x, speaker, pass)
}

/// Prenet plus output stack applied to already-normalised, already-shifted
/// previous frames; returns raw log-mel.
fn decoder_output_graph(g: &mut Graph, st: &ModelState, ctx: Var, prev: Var, pass: &mut Pass<'_>) -> Result<Var> {
    let p = run_layer(g, st, "sdec.prenet.in", prev, pass)?;
    let p = run_stack(g, st, "sdec.prenet", p, None, pass)?;
    let h = g.concat_cols(ctx, p);
    let y = run_stack(g, st, "sdec.out", h, None, pass)?;
    let (scale, shift) = st.denormalizer()?;
    Ok(g.affine_cols(y, &scale, &shift))
}

/// Teacher-forced speech decoder: `past` holds the natural frames; frame
/// `t` sees frames `< t` only.
pub fn speech_decoder_graph(
    g: &mut Graph,
    st: &ModelState,
    z: Var,
    speaker: Option<usize>,
    past: Var,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    if g.shape(z).0 != g.shape(past).0 {
        return Err(Error::model(format!(
            "latent has {} frames but teacher mel has {}",
            g.shape(z).0,
            g.shape(past).0
        )));
    }
    let ctx = decoder_context_graph(g, st, z, speaker, pass)?;
    let prev = normalize_mel(g, st, past)?;
    let prev = g.shift_down(prev, 1);
    decoder_output_graph(g, st, ctx, prev, pass)
}

/// Text decoder: shallow stack ending in a softmax over phonemes.
pub fn text_decoder_graph(g: &mut Graph, st: &ModelState, z: Var, pass: &mut Pass<'_>) -> Result<Var> {
    if !st.manifest.has_text_decoder() {
        return Err(Error::model("model has no text decoder"));
    }
    let h = run_stack(g, st, "tdec", z, None, pass)?;
    Ok(g.softmax(h))
}

/// How many past frames one output frame can see through prenet and output stack.
pub fn decoder_output_radius(st: &ModelState) -> usize {
    let pre = st.manifest.stack("sdec.prenet");
    let out = st.manifest.stack("sdec.out");
    past_radius(pre.into_iter().chain(out))
}

pub fn text_encoder_forward(st: &ModelState, t: &PhonemeTranscript) -> Result<LLEDistribution> {
    let mut g = Graph::inference();
    let (mu, std) = text_encoder_graph(&mut g, st, t, &mut Pass::Eval)?;
    LLEDistribution::new(g.value(mu).clone(), g.value(std).clone())
}

pub fn speech_encoder_forward(st: &ModelState, mel: &MelMatrix) -> Result<LLEDistribution> {
    check_mel_dims(st, mel.dims())?;
    let mut g = Graph::inference();
    let x = g.constant(mel.to_mat());
    let (mu, std) = speech_encoder_graph(&mut g, st, x, &mut Pass::Eval)?;
    LLEDistribution::new(g.value(mu).clone(), g.value(std).clone())
}

/// Source of the decoder's previous frames.
pub enum PastMel<'a> {
    Teacher(&'a MelMatrix),
    Autoregressive,
}

pub fn speech_decoder_forward(
    st: &ModelState,
    z: &LLESequence,
    speaker: Option<usize>,
    past: PastMel<'_>,
) -> Result<MelMatrix> {
    let t_len = z.z.rows();
    if t_len == 0 {
        return Err(Error::model("empty latent sequence"));
    }
    match past {
        PastMel::Teacher(mel) => {
            check_mel_dims(st, mel.dims())?;
            let mut g = Graph::inference();
            let zv = g.constant(z.z.clone());
            let pv = g.constant(mel.to_mat());
            let y = speech_decoder_graph(&mut g, st, zv, speaker, pv, &mut Pass::Eval)?;
            MelMatrix::from_mat(g.value(y), st.frame_shift_ms, st.window_ms)
        }
        PastMel::Autoregressive => {
            let out = decode_autoregressive(st, &z.z, speaker)?;
            MelMatrix::from_mat(&out, st.frame_shift_ms, st.window_ms)
        }
    }
}

/// Frame-by-frame unrolling. Each frame is recomputed on a window that
/// covers its full receptive field, with the same kernels as the
/// teacher-forced graph, so feeding the result back as teacher frames
/// reproduces it exactly. Frames are rounded to `f32` before feedback to
/// match the stored mel precision.
fn decode_autoregressive(st: &ModelState, z: &Mat, speaker: Option<usize>) -> Result<Mat> {
    let t_len = z.rows();
    let d = st.manifest.dims.mel;
    let mut g = Graph::inference();
    let zv = g.constant(z.clone());
    let ctx_var = decoder_context_graph(&mut g, st, zv, speaker, &mut Pass::Eval)?;
    let ctx = g.value(ctx_var).clone();
    let (scale, shift) = st.normalizer()?;
    let radius = decoder_output_radius(st);

    let mut out = Mat::zeros(t_len, d);
    for t in 0..t_len {
        let w0 = t.saturating_sub(radius);
        let n = t - w0 + 1;
        let mut prev = Mat::zeros(n, d);
        for s in w0.max(1)..=t {
            let src = out.row(s - 1);
            for ((o, &v), (&a, &b)) in prev.row_mut(s - w0).iter_mut().zip(src).zip(scale.iter().zip(&shift)) {
                *o = v * a + b;
            }
        }
        let mut wg = Graph::inference();
        let c = wg.constant(ctx.slice_rows(w0, n));
        let p = wg.constant(prev);
        let y = decoder_output_graph(&mut wg, st, c, p, &mut Pass::Eval)?;
        let row = wg.value(y).row(n - 1);
        for (o, &v) in out.row_mut(t).iter_mut().zip(row) {
            *o = v as f32 as f64;
        }
    }
    Ok(out)
}

pub fn text_decoder_forward(st: &ModelState, z: &LLESequence) -> Result<Mat> {
    let mut g = Graph::inference();
    let zv = g.constant(z.z.clone());
    let p = text_decoder_graph(&mut g, st, zv, &mut Pass::Eval)?;
    Ok(g.value(p).clone())
}

/// A copy of `st` without speaker biases.
pub fn remove_speaker_biases(st: &ModelState) -> ModelState {
    let mut s = st.clone();
    s.remove_speaker_biases();
    s
}
