mod common;

use std::path::Path;

use common::{rng, small_model};
use nautilus::features::{decode_codes, decode_mel, encode_codes, encode_mel, MelMatrix, PhonemeTranscript, WaveCodes};
use nautilus::losses::{kld_gaussian, symmetric_kld, LossReport};
use nautilus::net::{LLEDistribution, ModelState};
use nautilus::pipeline::{mixin_mask, ExperimentConfig};
use nautilus::tensor::Mat;
use proptest::prelude::*;

fn dist(frames: usize, dims: usize) -> impl Strategy<Value = LLEDistribution> {
    let n = frames * dims;
    (
        prop::collection::vec(-3.0f64..3.0, n),
        prop::collection::vec(0.05f64..4.0, n),
    )
        .prop_map(move |(m, s)| {
            LLEDistribution::new(Mat::from_vec(frames, dims, m), Mat::from_vec(frames, dims, s)).unwrap()
        })
}

fn pair() -> impl Strategy<Value = (LLEDistribution, LLEDistribution)> {
    (1usize..6, 1usize..5).prop_flat_map(|(f, d)| (dist(f, d), dist(f, d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kld_is_nonnegative_and_zero_on_itself((p, q) in pair()) {
        prop_assert!(kld_gaussian(&p, &q).unwrap() >= 0.0);
        prop_assert!(kld_gaussian(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn symmetric_kld_ignores_argument_order((p, q) in pair()) {
        let a = symmetric_kld(&p, &q).unwrap();
        let b = symmetric_kld(&q, &p).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn loss_reports_roundtrip_through_text(
        step in 0u64..1_000_000,
        vals in prop::collection::vec(-1e6f64..1e6, 1..6),
    ) {
        let names = ["tts", "sts", "stt", "tie", "extra"];
        let mut r = LossReport::new(step);
        for (n, v) in names.iter().zip(&vals) {
            r.set(n, *v);
        }
        prop_assert_eq!(LossReport::parse_line(&r.to_line()).unwrap(), r);
    }

    #[test]
    fn transcript_upsampling_follows_durations(
        segs in prop::collection::vec((0usize..10, 1usize..6), 1..8),
    ) {
        let (ids, durs): (Vec<_>, Vec<_>) = segs.iter().copied().unzip();
        let t = PhonemeTranscript::new(ids.clone(), durs.clone()).unwrap();
        let up = t.upsample();
        prop_assert_eq!(up.len(), durs.iter().sum::<usize>());
        prop_assert_eq!(t.frames(), up.len());
        let mut at = 0;
        for (&id, &d) in ids.iter().zip(&durs) {
            prop_assert!(up[at..at + d].iter().all(|&x| x == id));
            at += d;
        }
    }

    #[test]
    fn mel_and_codes_files_roundtrip(
        frames in 1usize..8,
        dims in 1usize..5,
        seed in any::<u64>(),
        bits in 2u32..11,
    ) {
        use rand::Rng;
        let mut r = rng(seed);
        let vals: Vec<f32> = (0..frames * dims).map(|_| r.gen_range(-12.0f32..2.0)).collect();
        let mel = MelMatrix::new(frames, dims, vals, 12.5, 50.0).unwrap();
        prop_assert_eq!(decode_mel(Path::new("m"), &encode_mel(&mel)).unwrap(), mel);
        let q = 1u32 << bits;
        let codes = WaveCodes::new((0..37).map(|_| r.gen_range(0..q) as u16).collect(), q, 4000).unwrap();
        prop_assert_eq!(decode_codes(Path::new("c"), &encode_codes(&codes)).unwrap(), codes);
    }

    #[test]
    fn mixin_masks_cover_every_frame(frames in 0usize..200, rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let m = mixin_mask(frames, rate, &mut rng(seed));
        prop_assert_eq!(m.len(), frames);
        prop_assert_eq!(m, mixin_mask(frames, rate, &mut rng(seed)));
    }

    #[test]
    fn config_text_roundtrips(
        lr in 1e-5f64..1.0,
        batch in 1usize..64,
        seed in any::<u64>(),
        mix in 0.0f64..=1.0,
        weld in any::<bool>(),
    ) {
        let mut c = ExperimentConfig::preset("toy").unwrap();
        c.stage.learning_rate = lr;
        c.stage.batch_size = batch;
        c.stage.seed = seed;
        c.stage.mixin_rate = mix;
        c.stage.weld_enabled = weld;
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        prop_assert!(back.diff(&c).is_empty(), "{:?}", back.diff(&c));
        prop_assert_eq!(back.to_text(), c.to_text());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_roundtrip_bit_exact(seed in any::<u64>()) {
        let st = small_model(seed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        st.save(&p).unwrap();
        let back = ModelState::load(&p, Some(&st.manifest)).unwrap();
        prop_assert_eq!(&back.params, &st.params);
        prop_assert_eq!(back.stages, st.stages);
        prop_assert_eq!(std::fs::read(&p).unwrap(), st.to_checkpoint().encode());
    }
}
