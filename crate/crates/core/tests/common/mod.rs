//! Shared fixtures: small models and the gradient-check suite.

#![allow(dead_code)]

use nautilus::features::{PhonemeTranscript, WaveCodes};
use nautilus::gradcheck::{check_inputs, check_params, GradCheckReport};
use nautilus::graph::{Graph, Trainable, Var};
use nautilus::losses::{graph as lg, LossWeights};
use nautilus::net::{
    filter_gate, highway, qrnn, speech_decoder_graph, speech_encoder_graph, text_decoder_graph, text_encoder_graph,
    ArchManifest, ModelDims, ModelState, Pass,
};
use nautilus::tensor::{Mat, Padding};
use nautilus::vocoder::{vocoder_graph, VocoderConfig, VocoderState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Entries with magnitude in `[0.1, 1]`, away from the kinks of relu and |·|.
pub fn off_zero(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(
        r,
        c,
        (0..r * c)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen() {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
}

pub const DIMS: ModelDims = ModelDims {
    phonemes: 6,
    mel: 5,
    latent: 3,
    channels: 6,
    speakers: 3,
};

/// A small model with non-zero speaker biases and normalization.
pub fn small_model(seed: u64) -> ModelState {
    let mut st = ModelState::new(ArchManifest::standard(DIMS), seed).unwrap();
    let mut r = rng(seed + 100);
    for name in st.speaker_bias_names() {
        let m = st.params.get(&name).unwrap();
        let v = random_mat(m.rows(), m.cols(), 0.5, &mut r);
        st.params.insert(name, v);
    }
    let mean: Vec<f64> = (0..DIMS.mel).map(|i| -3.0 + i as f64 * 0.4).collect();
    let std: Vec<f64> = (0..DIMS.mel).map(|i| 1.0 + i as f64 * 0.3).collect();
    st.set_normalization(&mean, &std).unwrap();
    st
}

pub fn small_transcript() -> PhonemeTranscript {
    PhonemeTranscript::new(vec![0, 3, 5, 1], vec![2, 3, 1, 2]).unwrap()
}

pub fn tiny_vocoder_config() -> VocoderConfig {
    VocoderConfig {
        mel_dims: 3,
        classes: 8,
        channels: 4,
        skip_channels: 4,
        dilations: vec![1, 2],
        speakers: 2,
        samples_per_frame: 3,
        sample_rate: 240,
    }
}

/// A two-layer, eight-class vocoder with non-zero speaker and output biases
/// (zero output biases put relu inputs exactly on the kink).
pub fn tiny_vocoder(seed: u64) -> VocoderState {
    let mut st = VocoderState::new(tiny_vocoder_config(), seed).unwrap();
    let mut r = rng(seed + 7);
    let biases: Vec<String> = st
        .params
        .names()
        .filter(|n| n.ends_with(".b"))
        .map(String::from)
        .collect();
    for name in st.speaker_bias_names().into_iter().chain(biases) {
        let m = st.params.get(&name).unwrap();
        let v = random_mat(m.rows(), m.cols(), 0.5, &mut r);
        st.params.insert(name, v);
    }
    st.set_normalization(&[0.5, -0.5, 0.0], &[1.5, 0.8, 1.0]).unwrap();
    st
}

pub fn random_codes(n: usize, q: u32, sample_rate: u32, rng: &mut ChaCha8Rng) -> WaveCodes {
    WaveCodes::new((0..n).map(|_| rng.gen_range(0..q) as u16).collect(), q, sample_rate).unwrap()
}

/// `mean(v ⊙ R)` for a fixed random `R`: a scalar that depends on every entry.
fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let (r, c) = g.shape(v);
    let w = g.constant(random_mat(r, c, 1.0, &mut rng(seed)));
    let p = g.mul(v, w);
    g.mean(p)
}

type Suite = Vec<(String, GradCheckReport)>;

fn inputs(name: &str, xs: &[Mat], out: &mut Suite, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let rep = check_inputs(xs, |g, v| Ok(f(g, v))).unwrap();
    out.push((name.to_string(), rep));
}

/// One check per differentiable graph operation.
pub fn graph_op_checks() -> Suite {
    let mut r = rng(11);
    let mut out = Suite::new();
    let a = random_mat(4, 3, 1.0, &mut r);
    let b = random_mat(4, 3, 1.0, &mut r);
    let w = random_mat(3, 2, 1.0, &mut r);
    let row = random_mat(1, 3, 1.0, &mut r);
    inputs("matmul", &[a.clone(), w.clone()], &mut out, |g, v| {
        let y = g.matmul(v[0], v[1]);
        project(g, y, 1)
    });
    for (name, width, dil, pad) in [
        ("conv causal", 2, 1, Padding::Causal),
        ("conv causal dilated", 3, 2, Padding::Causal),
        ("conv centered", 3, 1, Padding::Centered),
        ("conv centered dilated", 3, 2, Padding::Centered),
    ] {
        let x = random_mat(6, 2, 1.0, &mut r);
        let k = random_mat(width * 2, 3, 1.0, &mut r);
        inputs(name, &[x, k], &mut out, |g, v| {
            let y = g.conv(v[0], v[1], width, dil, pad);
            project(g, y, 2)
        });
    }
    inputs("add_row", &[a.clone(), row.clone()], &mut out, |g, v| {
        let y = g.add_row(v[0], v[1]);
        project(g, y, 3)
    });
    inputs("select_row", std::slice::from_ref(&a), &mut out, |g, v| {
        let y = g.select_row(v[0], 2);
        project(g, y, 4)
    });
    inputs("add sub mul", &[a.clone(), b.clone()], &mut out, |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(v[0], v[1]);
        let m = g.mul(s, d);
        project(g, m, 5)
    });
    inputs("scale affine_cols one_minus", std::slice::from_ref(&a), &mut out, |g, v| {
        let s = g.scale(v[0], -1.7);
        let t = g.affine_cols(s, &[0.5, 2.0, -1.0], &[0.1, 0.2, 0.3]);
        let u = g.one_minus(t);
        project(g, u, 6)
    });
    inputs("tanh sigmoid exp", std::slice::from_ref(&a), &mut out, |g, v| {
        let t = g.tanh(v[0]);
        let s = g.sigmoid(v[0]);
        let e = g.exp(v[0]);
        let ts = g.mul(t, s);
        let y = g.add(ts, e);
        project(g, y, 7)
    });
    inputs("relu", &[off_zero(4, 3, &mut r)], &mut out, |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 8)
    });
    inputs(
        "concat_cols slice_cols",
        &[a.clone(), w.clone().map(|x| x * 0.5).slice_rows(0, 3)],
        &mut out,
        |g, v| {
            let x = g.slice_rows(v[0], 0, 3);
            let c = g.concat_cols(x, v[1]);
            let y = g.slice_cols(c, 1, 4);
            project(g, y, 9)
        },
    );
    inputs("slice_rows shift_down reverse_rows", std::slice::from_ref(&a), &mut out, |g, v| {
        let s = g.slice_rows(v[0], 1, 3);
        let d = g.shift_down(s, 1);
        let y = g.reverse_rows(d);
        project(g, y, 10)
    });
    inputs("repeat_rows gather_rows", std::slice::from_ref(&a), &mut out, |g, v| {
        let rep = g.repeat_rows(v[0], &[2, 0, 1, 3]);
        let y = g.gather_rows(rep, &[Some(5), None, Some(0), Some(0), Some(3)]);
        project(g, y, 11)
    });
    inputs("qrnn_scan", &[a.clone(), b.clone()], &mut out, |g, v| {
        let z = g.tanh(v[0]);
        let f = g.sigmoid(v[1]);
        let y = g.qrnn_scan(z, f);
        project(g, y, 12)
    });
    inputs("softmax", std::slice::from_ref(&a), &mut out, |g, v| {
        let y = g.softmax(v[0]);
        project(g, y, 13)
    });
    inputs("mae", &[a.clone(), b.clone()], &mut out, |g, v| g.mae(v[0], v[1]));
    inputs("frame_ce", std::slice::from_ref(&a), &mut out, |g, v| {
        let p = g.softmax(v[0]);
        g.frame_ce(p, &[0, 2, 1, 1])
    });
    inputs(
        "kld",
        &[
            a.clone(),
            b.clone(),
            random_mat(4, 3, 1.0, &mut r),
            random_mat(4, 3, 1.0, &mut r),
        ],
        &mut out,
        |g, v| {
            let sp = g.exp(v[1]);
            let sq = g.exp(v[3]);
            g.kld(v[0], sp, v[2], sq)
        },
    );
    inputs("mean", &[a], &mut out, |g, v| g.mean(v[0]));
    out
}

/// The three layer primitives and the recurrent block, on leaves.
pub fn layer_checks() -> Suite {
    let mut r = rng(21);
    let mut out = Suite::new();
    let (t, c) = (6, 3);
    for (name, pad, spk) in [
        ("filter-gate causal", Padding::Causal, false),
        ("filter-gate centered", Padding::Centered, false),
        ("filter-gate with speaker biases", Padding::Causal, true),
    ] {
        let mut xs = vec![
            random_mat(t, c, 1.0, &mut r),
            random_mat(3 * c, c, 0.6, &mut r),
            random_mat(3 * c, c, 0.6, &mut r),
            random_mat(1, c, 0.5, &mut r),
            random_mat(1, c, 0.5, &mut r),
        ];
        if spk {
            xs.push(random_mat(1, c, 0.5, &mut r));
            xs.push(random_mat(1, c, 0.5, &mut r));
        }
        inputs(name, &xs, &mut out, |g, v| {
            let b = (v.len() == 7).then(|| (v[5], v[6]));
            let y = filter_gate(g, v[0], v[1], v[2], v[3], v[4], b, 3, 2, pad);
            project(g, y, 21)
        });
    }
    let xs = [
        random_mat(t, c, 1.0, &mut r),
        random_mat(3 * c, c, 0.6, &mut r),
        random_mat(3 * c, c, 0.6, &mut r),
    ];
    inputs("highway", &xs, &mut out, |g, v| {
        let y = highway(g, v[0], v[1], v[2], 3, 1, Padding::Centered);
        project(g, y, 22)
    });
    let xs = [
        random_mat(t, c, 1.0, &mut r),
        random_mat(2 * c, 2 * 4, 0.6, &mut r),
        random_mat(1, 2 * 4, 0.5, &mut r),
    ];
    inputs("quasi-recurrent", &xs, &mut out, |g, v| {
        let y = qrnn(g, v[0], v[1], v[2], 2, 4);
        project(g, y, 23)
    });
    out
}

fn model_check(name: &str, prefix: &'static str, out: &mut Suite, build: impl Fn(&mut Graph, &ModelState) -> Var) {
    let template = small_model(3);
    let mut store = template.params.clone();
    let rep = check_params(
        &mut store,
        |n| n.starts_with(prefix),
        |s, tr: Trainable| {
            let mut st = template.clone();
            st.params = s.clone();
            let mut g = Graph::new(tr);
            let root = build(&mut g, &st);
            Ok((g, root))
        },
    )
    .unwrap();
    out.push((name.to_string(), rep));
}

/// Parameter gradients of the four networks and the vocoder.
pub fn network_checks() -> Suite {
    let mut out = Suite::new();
    let mut r = rng(31);
    let t = small_transcript();
    let frames = t.frames();
    let mel = random_mat(frames, DIMS.mel, 2.0, &mut r).map(|v| v - 3.0);
    let z = random_mat(frames, DIMS.latent, 1.0, &mut r);
    let labels = t.upsample();
    model_check("text encoder", "tenc.", &mut out, |g, st| {
        let (mu, sd) = text_encoder_graph(g, st, &t, &mut Pass::Eval).unwrap();
        let a = project(g, mu, 31);
        let b = project(g, sd, 32);
        g.add(a, b)
    });
    model_check("speech encoder", "senc.", &mut out, |g, st| {
        let m = g.constant(mel.clone());
        let (mu, sd) = speech_encoder_graph(g, st, m, &mut Pass::Eval).unwrap();
        let a = project(g, mu, 33);
        let b = project(g, sd, 34);
        g.add(a, b)
    });
    model_check("speech decoder", "sdec.", &mut out, |g, st| {
        let zv = g.constant(z.clone());
        let past = g.constant(mel.clone());
        let y = speech_decoder_graph(g, st, zv, Some(1), past, &mut Pass::Eval).unwrap();
        project(g, y, 35)
    });
    model_check("text decoder", "tdec.", &mut out, |g, st| {
        let zv = g.constant(z.clone());
        let p = text_decoder_graph(g, st, zv, &mut Pass::Eval).unwrap();
        g.frame_ce(p, &labels)
    });

    let voc = tiny_vocoder(5);
    let cfg = voc.config.clone();
    let frames = 4;
    let codes = random_codes(frames * cfg.samples_per_frame, cfg.classes, cfg.sample_rate, &mut r);
    let vmel = random_mat(frames, cfg.mel_dims, 1.0, &mut r);
    let labels: Vec<usize> = codes.codes().iter().map(|&c| c as usize).collect();
    let prev: Vec<Option<usize>> = std::iter::once(None)
        .chain(labels[..labels.len() - 1].iter().map(|&c| Some(c)))
        .collect();
    let counts = vec![cfg.samples_per_frame; frames];
    let mut store = voc.params.clone();
    let rep = check_params(
        &mut store,
        |n| n.starts_with("voc."),
        |s, tr| {
            let mut st = voc.clone();
            st.params = s.clone();
            let mut g = Graph::new(tr);
            let m = g.constant(vmel.clone());
            let post = vocoder_graph(&mut g, &st, &prev, m, &counts, Some(1))?;
            let l = g.frame_ce(post, &labels);
            Ok((g, l))
        },
    )
    .unwrap();
    out.push(("vocoder".to_string(), rep));
    out
}

/// Every composite objective, built on primitive terms of leaf inputs.
pub fn composite_loss_checks() -> Suite {
    let mut r = rng(41);
    let mut out = Suite::new();
    let w = LossWeights {
        alpha_sts: 0.3,
        alpha_stt: 0.2,
        beta: 0.7,
        gamma: 0.05,
        alpha_sup: 0.4,
    };
    let m = |r: &mut ChaCha8Rng| random_mat(5, 3, 1.0, r);
    // pred/target pairs for two MAE terms, logits for CE, two Gaussians.
    let xs: Vec<Mat> = (0..9).map(|_| m(&mut r)).collect();
    let labels = [0, 1, 2, 2, 1];
    let terms = |g: &mut Graph, v: &[Var]| {
        let mae1 = g.mae(v[0], v[1]);
        let mae2 = g.mae(v[2], v[3]);
        let p = g.softmax(v[4]);
        let ce = g.frame_ce(p, &labels);
        let s1 = g.exp(v[6]);
        let s2 = g.exp(v[8]);
        let (sym, _, _) = lg::symmetric_kld(g, (v[5], s1), (v[7], s2));
        (mae1, mae2, ce, sym)
    };
    inputs("tie / cycle (symmetric divergence)", &xs, &mut out, |g, v| {
        terms(g, v).3
    });
    inputs("joint goal", &xs, &mut out, |g, v| {
        let (a, b, c, _) = terms(g, v);
        lg::goals(g, a, b, Some(c), &w)
    });
    inputs("joint goal without text decoder", &xs, &mut out, |g, v| {
        let (a, b, _, _) = terms(g, v);
        lg::goals(g, a, b, None, &w)
    });
    inputs("training objective", &xs, &mut out, |g, v| {
        let (a, b, c, d) = terms(g, v);
        let goals = lg::goals(g, a, b, Some(c), &w);
        lg::train(g, goals, d, &w)
    });
    inputs("unsupervised adaptation", &xs, &mut out, |g, v| {
        let (_, b, _, d) = terms(g, v);
        lg::adapt_unsup(g, b, d, &w)
    });
    inputs("supervised adaptation", &xs, &mut out, |g, v| {
        let (a, b, _, d) = terms(g, v);
        lg::adapt_sup(g, a, b, d, &w)
    });
    inputs("vocoder cross entropy", &xs, &mut out, |g, v| terms(g, v).2);
    inputs("welding", &xs, &mut out, |g, v| {
        let (_, b, c, _) = terms(g, v);
        lg::weld(g, b, c, &w)
    });
    out
}

pub fn all_gradient_checks() -> Suite {
    let mut s = graph_op_checks();
    s.extend(layer_checks());
    s.extend(network_checks());
    s.extend(composite_loss_checks());
    s
}
