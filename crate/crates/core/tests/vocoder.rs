use nautilus::features::{MelMatrix, WaveCodes};
use nautilus::tensor::Mat;
use nautilus::vocoder::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> VocoderConfig {
    VocoderConfig {
        mel_dims: 4,
        classes: 16,
        channels: 6,
        skip_channels: 5,
        dilations: vec![1, 2, 4, 1],
        speakers: 3,
        samples_per_frame: 5,
        sample_rate: 1000,
    }
}

fn vocoder(seed: u64) -> VocoderState {
    let mut st = VocoderState::new(config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
    let names: Vec<String> = st.params.names().map(str::to_string).collect();
    for n in names {
        // give biases non-trivial values so every path is exercised
        if n.ends_with(".cf") || n.ends_with(".cg") || n.contains(".spk_") || n.ends_with(".b") {
            let m = st.params.get(&n).unwrap();
            let r = Mat::from_vec(
                m.rows(),
                m.cols(),
                (0..m.len()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            );
            st.params.insert(n, r);
        }
    }
    st.set_normalization(&[-2.0, -1.0, 0.0, 1.0], &[1.0, 2.0, 0.5, 1.5])
        .unwrap();
    st
}

fn mel(frames: usize, seed: u64) -> MelMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Mat::from_vec(frames, 4, (0..frames * 4).map(|_| rng.gen_range(-3.0..1.0)).collect());
    MelMatrix::from_mat(&m, 5.0, 20.0).unwrap()
}

#[test]
fn generation_matches_teacher_forcing_on_its_own_output() {
    let st = vocoder(1);
    let m = mel(9, 2);
    for (mode, spk) in [
        (GenerateMode::Sample, Some(1)),
        (GenerateMode::Argmax, None),
        (GenerateMode::Sample, None),
    ] {
        let (codes, post) = vocoder_generate_with_posteriors(&st, &m, spk, 7, mode).unwrap();
        assert_eq!(codes.len(), 45);
        let tf = vocoder_forward(&st, &codes, &m, spk).unwrap();
        assert_eq!(tf, post);
    }
}

#[test]
fn sampling_is_seeded() {
    let st = vocoder(3);
    let m = mel(6, 4);
    let a = vocoder_generate(&st, &m, Some(0), 11, GenerateMode::Sample).unwrap();
    let b = vocoder_generate(&st, &m, Some(0), 11, GenerateMode::Sample).unwrap();
    let c = vocoder_generate(&st, &m, Some(0), 12, GenerateMode::Sample).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn outputs_are_causal_in_the_samples() {
    let st = vocoder(5);
    let m = mel(6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let codes: Vec<u16> = (0..30).map(|_| rng.gen_range(0..16)).collect();
    let base = vocoder_forward(&st, &WaveCodes::new(codes.clone(), 16, 1000).unwrap(), &m, Some(2)).unwrap();
    let mut changed = codes.clone();
    changed[12] = (changed[12] + 5) % 16;
    let out = vocoder_forward(&st, &WaveCodes::new(changed, 16, 1000).unwrap(), &m, Some(2)).unwrap();
    // sample 12 is first seen as the previous code of sample 13
    for n in 0..=12 {
        assert_eq!(out.row(n), base.row(n));
    }
    assert_ne!(out.row(13), base.row(13));
}

#[test]
fn removed_biases_equal_none_speaker() {
    let st = vocoder(8);
    let m = mel(5, 9);
    let mut removed = st.clone();
    assert_eq!(removed.remove_speaker_biases(), 8);
    let codes = vocoder_generate(&st, &m, None, 1, GenerateMode::Argmax).unwrap();
    let a = vocoder_forward(&st, &codes, &m, None).unwrap();
    assert_eq!(vocoder_forward(&removed, &codes, &m, Some(1)).unwrap(), a);
    assert_ne!(vocoder_forward(&st, &codes, &m, Some(1)).unwrap(), a);
    assert!(vocoder_forward(&st, &codes, &m, Some(3)).is_err());
}

#[test]
fn posteriors_are_distributions_and_loss_is_finite() {
    let st = vocoder(10);
    let m = mel(4, 11);
    let codes = vocoder_generate(&st, &m, Some(0), 3, GenerateMode::Sample).unwrap();
    let p = vocoder_forward(&st, &codes, &m, Some(0)).unwrap();
    for n in 0..p.rows() {
        assert!((p.row(n).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let l = loss_voc(&p, &codes).unwrap();
    assert!(l.is_finite() && l > 0.0);
    let short = WaveCodes::new(vec![0; 7], 16, 1000).unwrap();
    assert!(vocoder_forward(&st, &short, &m, None).is_err());
}

#[test]
fn checkpoint_roundtrip_and_config_check() {
    let dir = tempfile::tempdir().unwrap();
    let mut st = vocoder(12);
    st.remove_speaker_biases();
    st.step = 17;
    let p = dir.path().join("v.ckpt");
    st.save(&p).unwrap();
    assert_eq!(VocoderState::load(&p, Some(&config())).unwrap(), st);
    let mut other = config();
    other.channels = 7;
    assert!(matches!(
        VocoderState::load(&p, Some(&other)),
        Err(nautilus::Error::Model(_))
    ));
}

#[test]
fn crop_training_reduces_loss() {
    use nautilus::features::UtteranceRecord;
    let st = vocoder(13);
    let m = mel(8, 14);
    let codes = vocoder_generate(&st, &m, Some(0), 5, GenerateMode::Sample).unwrap();
    // a periodic target the network can learn quickly
    let target: Vec<u16> = (0..codes.len()).map(|n| [2u16, 9, 14, 9][n % 4]).collect();
    let rec = UtteranceRecord {
        utterance_id: "u".into(),
        speaker_id: "spk0".into(),
        transcript: None,
        mel: m,
        waveform: WaveCodes::new(target, 16, 1000).unwrap(),
    };
    let opts = VocoderTrainOptions {
        learning_rate: 0.01,
        batch_size: 1,
        crop_frames: 3,
        seed: 1,
    };
    let (_, reports) = adapt_vocoder(&st, &[&rec], 40, &opts).unwrap();
    let first = reports[0].get("voc").unwrap();
    let last = reports.last().unwrap().get("voc").unwrap();
    assert!(last < 0.5 * first, "{first} -> {last}");
}
