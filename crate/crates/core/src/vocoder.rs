//! Autoregressive sample-level vocoder: a stack of width-2 dilated causal
//! filter-gate layers with per-speaker biases, conditioned on mel frames
//! repeated to the sample rate, predicting μ-law classes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{MelMatrix, UtteranceRecord, WaveCodes};
use crate::graph::{Graph, Trainable, Var};
use crate::losses::{check_labels, LossReport};
use crate::net::{meta_tensors, split_meta, Checkpoint, StageFlags, NORM_MEAN, NORM_STD};
use crate::optim::{Adam, GradAccumulator};
use crate::params::ParamStore;
use crate::tensor::{argmax, conv_row, matmul_row_acc, sigmoid, softmax_row, Mat, Padding};

const WIDTH: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct VocoderConfig {
    pub mel_dims: usize,
    /// Output classes Q.
    pub classes: u32,
    /// Residual channels.
    pub channels: usize,
    pub skip_channels: usize,
    pub dilations: Vec<usize>,
    pub speakers: usize,
    pub samples_per_frame: usize,
    pub sample_rate: u32,
}

impl VocoderConfig {
    /// Ten layers, 32 channels, 256 classes.
    pub fn standard(mel_dims: usize, speakers: usize, samples_per_frame: usize, sample_rate: u32) -> Self {
        VocoderConfig {
            mel_dims,
            classes: 256,
            channels: 32,
            skip_channels: 32,
            dilations: vec![1, 2, 4, 8, 16, 32, 64, 1, 2, 4],
            speakers,
            samples_per_frame,
            sample_rate,
        }
    }

    /// Samples visible to one prediction (including the previous sample).
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations.iter().sum::<usize>() * (WIDTH - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mel_dims == 0
            || self.classes < 2
            || self.channels == 0
            || self.skip_channels == 0
            || self.dilations.is_empty()
            || self.dilations.contains(&0)
            || self.samples_per_frame == 0
        {
            return Err(Error::config(format!("invalid vocoder configuration {self:?}")));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let dil: Vec<String> = self.dilations.iter().map(usize::to_string).collect();
        format!(
            "vocoder mel={} classes={} channels={} skip={} speakers={} samples_per_frame={} sample_rate={} dilations={}\n",
            self.mel_dims,
            self.classes,
            self.channels,
            self.skip_channels,
            self.speakers,
            self.samples_per_frame,
            self.sample_rate,
            dil.join(",")
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let line = text.trim();
        let rest = line
            .strip_prefix("vocoder ")
            .ok_or_else(|| Error::config("vocoder config must start with `vocoder`"))?;
        let mut kv = std::collections::BTreeMap::new();
        for w in rest.split_whitespace() {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected key=value, got `{w}`")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::config(format!("vocoder config lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::config(format!("bad `{k}`"))) };
        let dilations = get("dilations")?
            .split(',')
            .map(|d| d.parse().map_err(|_| Error::config("bad dilation")))
            .collect::<Result<_>>()?;
        let cfg = VocoderConfig {
            mel_dims: num("mel")?,
            classes: num("classes")? as u32,
            channels: num("channels")?,
            skip_channels: num("skip")?,
            speakers: num("speakers")?,
            samples_per_frame: num("samples_per_frame")?,
            sample_rate: num("sample_rate")? as u32,
            dilations,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash in its own namespace so it never collides with a model manifest.
    pub fn hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(b"vocoder:");
        h.update(self.to_text().as_bytes());
        h.finalize().into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocoderState {
    pub config: VocoderConfig,
    pub params: ParamStore,
    pub step: u64,
    pub stages: StageFlags,
    pub speakers: Vec<String>,
}

fn layer_name(i: usize) -> String {
    format!("voc.layer.{i}")
}

impl VocoderState {
    pub fn new(config: VocoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (q, r, s, d, k) = (
            config.classes as usize,
            config.channels,
            config.skip_channels,
            config.mel_dims,
            config.speakers,
        );
        p.init_normal("voc.embed.w", q, r, 1, &mut rng);
        for i in 0..config.dilations.len() {
            let n = layer_name(i);
            p.init_normal(&format!("{n}.wf"), WIDTH * r, r, WIDTH * r, &mut rng);
            p.init_normal(&format!("{n}.wg"), WIDTH * r, r, WIDTH * r, &mut rng);
            p.init_const(&format!("{n}.cf"), 1, r, 0.0);
            p.init_const(&format!("{n}.cg"), 1, r, 0.0);
            p.init_normal(&format!("{n}.condf"), d, r, d, &mut rng);
            p.init_normal(&format!("{n}.condg"), d, r, d, &mut rng);
            p.init_const(&format!("{n}.spk_f"), k, r, 0.0);
            p.init_const(&format!("{n}.spk_g"), k, r, 0.0);
            p.init_normal(&format!("{n}.res"), r, r, r, &mut rng);
            p.init_normal(&format!("{n}.skip"), r, s, r, &mut rng);
        }
        p.init_normal("voc.out1.w", s, s, s, &mut rng);
        p.init_const("voc.out1.b", 1, s, 0.0);
        p.init_normal("voc.out2.w", s, q, s, &mut rng);
        p.init_const("voc.out2.b", 1, q, 0.0);
        p.init_const(NORM_MEAN, 1, d, 0.0);
        p.init_const(NORM_STD, 1, d, 1.0);
        Ok(VocoderState {
            params: p,
            step: 0,
            stages: StageFlags::default(),
            speakers: (0..k).map(|i| format!("spk{i}")).collect(),
            config,
        })
    }

    pub fn set_normalization(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let d = self.config.mel_dims;
        if mean.len() != d || std.len() != d || std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::model("normalisation needs D means and D positive stds"));
        }
        self.params.insert(NORM_MEAN, Mat::from_vec(1, d, mean.to_vec()));
        self.params.insert(NORM_STD, Mat::from_vec(1, d, std.to_vec()));
        Ok(())
    }

    pub fn speaker_index(&self, id: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s == id)
    }

    pub fn speaker_bias_names(&self) -> Vec<String> {
        (0..self.config.dilations.len())
            .flat_map(|i| [format!("{}.spk_f", layer_name(i)), format!("{}.spk_g", layer_name(i))])
            .filter(|n| self.params.contains(n))
            .collect()
    }

    pub fn has_speaker_biases(&self) -> bool {
        !self.speaker_bias_names().is_empty()
    }

    pub fn remove_speaker_biases(&mut self) -> usize {
        let names = self.speaker_bias_names();
        for n in &names {
            self.params.remove(n);
        }
        names.len()
    }

    pub fn config_hash(&self) -> [u8; 32] {
        self.config.hash()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Mat)> = self.params.iter().map(|(n, m)| (n.to_string(), m.clone())).collect();
        tensors.extend(meta_tensors(
            self.stages,
            &self.speakers,
            (self.config.samples_per_frame as f32, self.config.sample_rate as f32),
            &self.config.to_text(),
        ));
        Checkpoint {
            config_hash: self.config_hash(),
            step: self.step,
            tensors,
        }
        .save(path)
    }

    pub fn load(path: &Path, expected: Option<&VocoderConfig>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let (hash, step) = (ck.config_hash, ck.step);
        let meta = split_meta(path, ck)?;
        let config = VocoderConfig::parse(&meta.config_text)?;
        if config.hash() != hash {
            return Err(Error::data_file(
                path,
                "embedded vocoder config does not match the header hash",
            ));
        }
        if let Some(e) = expected {
            if e.hash() != hash {
                return Err(Error::model(format!(
                    "vocoder checkpoint {} was written for a different configuration",
                    path.display()
                )));
            }
        }
        let st = VocoderState {
            config,
            params: meta.params,
            step,
            stages: meta.stages,
            speakers: meta.speakers,
        };
        let fresh = VocoderState::new(st.config.clone(), 0)?;
        for (name, m) in fresh.params.iter() {
            let is_bias = name.ends_with(".spk_f") || name.ends_with(".spk_g");
            match st.params.get(name) {
                Ok(have) if have.shape() == m.shape() => {}
                Err(_) if is_bias => {}
                _ => return Err(Error::data_file(path, format!("parameter {name} missing or misshaped"))),
            }
        }
        Ok(st)
    }

    fn normalizer(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mean = self.params.get(NORM_MEAN)?.data();
        let std = self.params.get(NORM_STD)?.data();
        Ok((
            std.iter().map(|s| 1.0 / s).collect(),
            mean.iter().zip(std).map(|(m, s)| -m / s).collect(),
        ))
    }

    fn check_speaker(&self, speaker: Option<usize>) -> Result<Option<usize>> {
        match speaker {
            Some(k) if self.has_speaker_biases() => {
                if k >= self.config.speakers {
                    return Err(Error::model(format!(
                        "speaker {k} out of range for {} vocoder speakers",
                        self.config.speakers
                    )));
                }
                Ok(Some(k))
            }
            _ => Ok(None),
        }
    }
}

/// Teacher-forced graph. `prev[n]` is the code fed at sample `n` (the
/// previous sample, `None` = silence); `mel` is raw log-mel with one row
/// per frame and `counts[f]` samples per frame row (summing to `prev.len()`).
/// Returns the N×Q posterior matrix.
pub fn vocoder_graph(
    g: &mut Graph,
    st: &VocoderState,
    prev: &[Option<usize>],
    mel: Var,
    counts: &[usize],
    speaker: Option<usize>,
) -> Result<Var> {
    let cfg = &st.config;
    let (frames, d) = g.shape(mel);
    if d != cfg.mel_dims {
        return Err(Error::model(format!(
            "mel has {d} bands, vocoder expects {}",
            cfg.mel_dims
        )));
    }
    if frames != counts.len() || counts.iter().sum::<usize>() != prev.len() {
        return Err(Error::model("conditioning counts do not cover the samples"));
    }
    let speaker = st.check_speaker(speaker)?;
    let (scale, shift) = st.normalizer()?;
    let mel_n = g.affine_cols(mel, &scale, &shift);

    let embed = g.param(&st.params, "voc.embed.w")?;
    let mut h = g.gather_rows(embed, prev);
    let mut skip: Option<Var> = None;
    for (i, &dil) in cfg.dilations.iter().enumerate() {
        let n = layer_name(i);
        let p = |g: &mut Graph, s: &str| g.param(&st.params, &format!("{n}.{s}"));
        let (wf, wg, cf, cg) = (p(g, "wf")?, p(g, "wg")?, p(g, "cf")?, p(g, "cg")?);
        let condf = p(g, "condf")?;
        let condg = p(g, "condg")?;
        let kf = g.matmul(mel_n, condf);
        let kf = g.repeat_rows(kf, counts);
        let kg = g.matmul(mel_n, condg);
        let kg = g.repeat_rows(kg, counts);
        let spk = match speaker {
            Some(k) => {
                let tf = p(g, "spk_f")?;
                let tg = p(g, "spk_g")?;
                Some((g.select_row(tf, k), g.select_row(tg, k)))
            }
            None => None,
        };
        let out = gated_layer(g, h, wf, wg, cf, cg, kf, kg, spk, dil);
        let res = p(g, "res")?;
        let r = g.matmul(out, res);
        h = g.add(h, r);
        let sw = p(g, "skip")?;
        let s = g.matmul(out, sw);
        skip = Some(match skip {
            Some(acc) => g.add(acc, s),
            None => s,
        });
    }
    let x = g.relu(skip.expect("at least one layer"));
    let w1 = g.param(&st.params, "voc.out1.w")?;
    let b1 = g.param(&st.params, "voc.out1.b")?;
    let x = g.matmul(x, w1);
    let x = g.add_row(x, b1);
    let x = g.relu(x);
    let w2 = g.param(&st.params, "voc.out2.w")?;
    let b2 = g.param(&st.params, "voc.out2.b")?;
    let x = g.matmul(x, w2);
    let x = g.add_row(x, b2);
    Ok(g.softmax(x))
}

/// Filter-gate with conditioning added after the shared bias and before the
/// speaker bias; the incremental generator repeats this order exactly.
#[allow(clippy::too_many_arguments)]
fn gated_layer(
    g: &mut Graph,
    h: Var,
    wf: Var,
    wg: Var,
    cf: Var,
    cg: Var,
    kf: Var,
    kg: Var,
    spk: Option<(Var, Var)>,
    dilation: usize,
) -> Var {
    let mut f = g.conv(h, wf, WIDTH, dilation, Padding::Causal);
    f = g.add_row(f, cf);
    f = g.add(f, kf);
    let mut a = g.conv(h, wg, WIDTH, dilation, Padding::Causal);
    a = g.add_row(a, cg);
    a = g.add(a, kg);
    if let Some((bf, bg)) = spk {
        f = g.add_row(f, bf);
        a = g.add_row(a, bg);
    }
    let f = g.tanh(f);
    let a = g.sigmoid(a);
    g.mul(f, a)
}

fn previous_codes(codes: &[u16], start: usize, end: usize) -> Vec<Option<usize>> {
    (start..end).map(|n| (n > 0).then(|| codes[n - 1] as usize)).collect()
}

fn check_lengths(st: &VocoderState, codes: &WaveCodes, mel: &MelMatrix) -> Result<()> {
    let spf = st.config.samples_per_frame;
    if codes.len() != mel.frames() * spf {
        return Err(Error::model(format!(
            "{} codes for {} frames × {spf} samples",
            codes.len(),
            mel.frames()
        )));
    }
    if codes.classes() != st.config.classes {
        return Err(Error::model(format!(
            "codes use {} classes, vocoder predicts {}",
            codes.classes(),
            st.config.classes
        )));
    }
    Ok(())
}

/// Teacher-forced posteriors for every sample of an utterance.
pub fn vocoder_forward(st: &VocoderState, codes: &WaveCodes, mel: &MelMatrix, speaker: Option<usize>) -> Result<Mat> {
    check_lengths(st, codes, mel)?;
    let mut g = Graph::inference();
    let m = g.constant(mel.to_mat());
    let prev = previous_codes(codes.codes(), 0, codes.len());
    let counts = vec![st.config.samples_per_frame; mel.frames()];
    let p = vocoder_graph(&mut g, st, &prev, m, &counts, speaker)?;
    Ok(g.value(p).clone())
}

/// Mean next-sample cross entropy.
pub fn loss_voc(posteriors: &Mat, codes: &WaveCodes) -> Result<f64> {
    let labels: Vec<usize> = codes.codes().iter().map(|&c| c as usize).collect();
    check_labels(posteriors, &labels)?;
    Ok(crate::graph::frame_ce_value(posteriors, &labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerateMode {
    Sample,
    Argmax,
}

/// Sample-by-sample generation; also returns the posterior of every step.
pub fn vocoder_generate_with_posteriors(
    st: &VocoderState,
    mel: &MelMatrix,
    speaker: Option<usize>,
    seed: u64,
    mode: GenerateMode,
) -> Result<(WaveCodes, Mat)> {
    let cfg = &st.config;
    if mel.dims() != cfg.mel_dims {
        return Err(Error::model(format!(
            "mel has {} bands, vocoder expects {}",
            mel.dims(),
            cfg.mel_dims
        )));
    }
    let speaker = st.check_speaker(speaker)?;
    let spf = cfg.samples_per_frame;
    let n_samples = mel.frames() * spf;
    let (q, r, s) = (cfg.classes as usize, cfg.channels, cfg.skip_channels);
    let layers = cfg.dilations.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (scale, shift) = st.normalizer()?;
    let raw = mel.to_mat();
    let mut mel_n = raw.clone();
    for t in 0..mel_n.rows() {
        for ((o, &a), &b) in mel_n.row_mut(t).iter_mut().zip(&scale).zip(&shift) {
            *o = *o * a + b;
        }
    }
    struct Layer<'a> {
        wf: &'a Mat,
        wg: &'a Mat,
        cf: &'a [f64],
        cg: &'a [f64],
        kf: Mat,
        kg: Mat,
        bf: Option<&'a [f64]>,
        bg: Option<&'a [f64]>,
        res: &'a Mat,
        skip: &'a Mat,
        dilation: usize,
    }
    let mut ls = Vec::with_capacity(layers);
    for (i, &dil) in cfg.dilations.iter().enumerate() {
        let n = layer_name(i);
        let get = |s: &str| st.params.get(&format!("{n}.{s}"));
        let project = |w: &Mat| {
            let mut out = Mat::zeros(mel_n.rows(), w.cols());
            for t in 0..mel_n.rows() {
                matmul_row_acc(mel_n.row(t), w, out.row_mut(t));
            }
            out
        };
        let (bf, bg) = match speaker {
            Some(k) => (Some(get("spk_f")?.row(k)), Some(get("spk_g")?.row(k))),
            None => (None, None),
        };
        ls.push(Layer {
            wf: get("wf")?,
            wg: get("wg")?,
            cf: get("cf")?.row(0),
            cg: get("cg")?.row(0),
            kf: project(get("condf")?),
            kg: project(get("condg")?),
            bf,
            bg,
            res: get("res")?,
            skip: get("skip")?,
            dilation: dil,
        });
    }
    let embed = st.params.get("voc.embed.w")?;
    let (w1, b1) = (st.params.get("voc.out1.w")?, st.params.get("voc.out1.b")?.row(0));
    let (w2, b2) = (st.params.get("voc.out2.w")?, st.params.get("voc.out2.b")?.row(0));

    // history[i] holds the input rows of layer i for every sample so far
    let mut history: Vec<Mat> = (0..layers).map(|_| Mat::zeros(n_samples, r)).collect();
    let mut codes = Vec::with_capacity(n_samples);
    let mut post = Mat::zeros(n_samples, q);
    let (mut f, mut a, mut out, mut tmp) = (vec![0.0; r], vec![0.0; r], vec![0.0; r], vec![0.0; r]);
    let (mut skip_acc, mut stmp) = (vec![0.0; s], vec![0.0; s]);
    let (mut x1, mut logits) = (vec![0.0; s], vec![0.0; q]);
    for n in 0..n_samples {
        let frame = n / spf;
        let mut h: Vec<f64> = match n {
            0 => vec![0.0; r],
            _ => embed.row(codes[n - 1] as usize).to_vec(),
        };
        for (i, l) in ls.iter().enumerate() {
            history[i].row_mut(n).copy_from_slice(&h);
            let hist = &history[i];
            let acc = |src: isize| (src >= 0).then(|| hist.row(src as usize));
            conv_row(acc, n, l.wf, WIDTH, l.dilation, Padding::Causal, &mut f);
            conv_row(acc, n, l.wg, WIDTH, l.dilation, Padding::Causal, &mut a);
            for c in 0..r {
                f[c] += l.cf[c];
                f[c] += l.kf.get(frame, c);
                a[c] += l.cg[c];
                a[c] += l.kg.get(frame, c);
            }
            if let (Some(bf), Some(bg)) = (l.bf, l.bg) {
                for c in 0..r {
                    f[c] += bf[c];
                    a[c] += bg[c];
                }
            }
            for c in 0..r {
                out[c] = f[c].tanh() * sigmoid(a[c]);
            }
            tmp.iter_mut().for_each(|v| *v = 0.0);
            matmul_row_acc(&out, l.res, &mut tmp);
            for c in 0..r {
                h[c] += tmp[c];
            }
            stmp.iter_mut().for_each(|v| *v = 0.0);
            matmul_row_acc(&out, l.skip, &mut stmp);
            if i == 0 {
                skip_acc.copy_from_slice(&stmp);
            } else {
                for c in 0..s {
                    skip_acc[c] += stmp[c];
                }
            }
        }
        x1.iter_mut().for_each(|v| *v = 0.0);
        let relu_skip: Vec<f64> = skip_acc.iter().map(|v| v.max(0.0)).collect();
        matmul_row_acc(&relu_skip, w1, &mut x1);
        for c in 0..s {
            x1[c] = (x1[c] + b1[c]).max(0.0);
        }
        logits.iter_mut().for_each(|v| *v = 0.0);
        matmul_row_acc(&x1, w2, &mut logits);
        for c in 0..q {
            logits[c] += b2[c];
        }
        let row = post.row_mut(n);
        softmax_row(&logits, row);
        let code = match mode {
            GenerateMode::Argmax => argmax(row),
            GenerateMode::Sample => {
                let u: f64 = rng.gen();
                let mut cum = 0.0;
                let mut pick = q - 1;
                for (c, &p) in row.iter().enumerate() {
                    cum += p;
                    if u < cum {
                        pick = c;
                        break;
                    }
                }
                pick
            }
        };
        codes.push(code as u16);
    }
    Ok((WaveCodes::new(codes, cfg.classes, cfg.sample_rate)?, post))
}

pub fn vocoder_generate(
    st: &VocoderState,
    mel: &MelMatrix,
    speaker: Option<usize>,
    seed: u64,
    mode: GenerateMode,
) -> Result<WaveCodes> {
    Ok(vocoder_generate_with_posteriors(st, mel, speaker, seed, mode)?.0)
}

/// A training window: `warmup` context samples followed by the scored samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    /// First sample fed to the network (including warm-up context).
    pub start: usize,
    /// First scored sample.
    pub target: usize,
    pub end: usize,
    /// First conditioning frame and per-frame sample counts from `start`.
    pub frame: usize,
    pub counts: Vec<usize>,
}

impl Crop {
    /// Picks `frames` consecutive frames (all of them if shorter) and adds up
    /// to one receptive field of left context.
    pub fn pick(total_frames: usize, frames: usize, spf: usize, receptive_field: usize, rng: &mut ChaCha8Rng) -> Self {
        let frames = frames.min(total_frames).max(1);
        let f0 = rng.gen_range(0..=total_frames - frames);
        let target = f0 * spf;
        let end = (f0 + frames) * spf;
        let start = target.saturating_sub(receptive_field);
        let frame = start / spf;
        let last = (end - 1) / spf;
        let counts = (frame..=last)
            .map(|f| {
                let lo = (f * spf).max(start);
                let hi = ((f + 1) * spf).min(end);
                hi - lo
            })
            .collect();
        Crop {
            start,
            target,
            end,
            frame,
            counts,
        }
    }

    pub fn frames(&self) -> usize {
        self.counts.len()
    }
}

/// Vocoder loss on one crop as a graph node; `mel` is the full-utterance raw
/// mel node from which the crop's frames are sliced.
pub fn crop_loss_graph(
    g: &mut Graph,
    st: &VocoderState,
    codes: &WaveCodes,
    mel: Var,
    crop: &Crop,
    speaker: Option<usize>,
) -> Result<Var> {
    let prev = previous_codes(codes.codes(), crop.start, crop.end);
    let m = g.slice_rows(mel, crop.frame, crop.frames());
    let p = vocoder_graph(g, st, &prev, m, &crop.counts, speaker)?;
    let scored = g.slice_rows(p, crop.target - crop.start, crop.end - crop.target);
    let labels: Vec<usize> = codes.codes()[crop.target..crop.end]
        .iter()
        .map(|&c| c as usize)
        .collect();
    Ok(g.frame_ce(scored, &labels))
}

/// Options of vocoder training passes.
#[derive(Debug, Clone, PartialEq)]
pub struct VocoderTrainOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Scored frames per crop.
    pub crop_frames: usize,
    pub seed: u64,
}

/// Deterministic per-purpose random streams of one stage.
pub struct StageRngs {
    pub shuffle: ChaCha8Rng,
    pub crop: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub mixin: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl StageRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |i: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i);
            r
        };
        StageRngs {
            shuffle: stream(1),
            crop: stream(2),
            dropout: stream(3),
            mixin: stream(4),
            noise: stream(5),
        }
    }
}

/// One epoch over `records` in shuffled batches; returns the mean
/// pre-update loss of the epoch.
pub fn vocoder_epoch(
    st: &mut VocoderState,
    records: &[&UtteranceRecord],
    opts: &VocoderTrainOptions,
    rngs: &mut StageRngs,
    opt: &mut Adam,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rngs.shuffle);
    let rf = st.config.receptive_field();
    let spf = st.config.samples_per_frame;
    let mut total = 0.0;
    for batch in order.chunks(opts.batch_size.max(1)) {
        let mut acc = GradAccumulator::new();
        for &i in batch {
            let rec = records[i];
            check_lengths(st, &rec.waveform, &rec.mel)?;
            let crop = Crop::pick(rec.mel.frames(), opts.crop_frames, spf, rf, &mut rngs.crop);
            let speaker = st.speaker_index(&rec.speaker_id);
            let mut g = Graph::new(Trainable::All);
            let mel = g.constant(rec.mel.to_mat());
            let loss = crop_loss_graph(&mut g, st, &rec.waveform, mel, &crop, speaker)?;
            total += g.value(loss).item();
            acc.add(g.backward(loss).into_params());
        }
        let grads = acc.mean();
        let grads = grads.into_iter().filter(|(n, _)| n.starts_with("voc.")).collect();
        opt.step(&mut st.params, &grads);
        st.step += 1;
    }
    Ok(total / records.len() as f64)
}

/// Removes speaker biases, then fine-tunes every remaining vocoder
/// parameter on the target speaker's natural data. Returns one report per
/// epoch carrying `voc`.
pub fn adapt_vocoder(
    st: &VocoderState,
    slice: &[&UtteranceRecord],
    epochs: usize,
    opts: &VocoderTrainOptions,
) -> Result<(VocoderState, Vec<LossReport>)> {
    if slice.is_empty() {
        return Err(Error::data("vocoder adaptation slice is empty"));
    }
    let mut s = st.clone();
    s.remove_speaker_biases();
    let mut rngs = StageRngs::new(opts.seed);
    let mut opt = Adam::new(opts.learning_rate);
    let mut reports = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let voc = vocoder_epoch(&mut s, slice, opts, &mut rngs, &mut opt)?;
        let mut r = LossReport::new(e as u64 + 1);
        r.set("voc", voc);
        reports.push(r);
    }
    Ok((s, reports))
}
