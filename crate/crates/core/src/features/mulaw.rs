use super::WaveCodes;
use crate::error::{Error, Result};

fn compand(x: f64, mu: f64) -> f64 {
    x.signum() * (1.0 + mu * x.abs()).ln() / (1.0 + mu).ln()
}

fn expand(y: f64, mu: f64) -> f64 {
    y.signum() * ((1.0 + mu).powf(y.abs()) - 1.0) / mu
}

/// μ-law companding followed by uniform quantisation into `2^bits` classes.
pub fn mu_law_encode(samples: &[f64], bits: u32, sample_rate: u32) -> Result<WaveCodes> {
    if !(2..=16).contains(&bits) {
        return Err(Error::data(format!("bits {bits} outside [2, 16]")));
    }
    let q = 1u32 << bits;
    let mu = (q - 1) as f64;
    let mut codes = Vec::with_capacity(samples.len());
    for (i, &x) in samples.iter().enumerate() {
        if !(-1.0..=1.0).contains(&x) {
            return Err(Error::data(format!("sample {i} = {x} outside [-1, 1]")));
        }
        let c = ((compand(x, mu) + 1.0) / 2.0 * q as f64).floor();
        codes.push(c.clamp(0.0, (q - 1) as f64) as u16);
    }
    WaveCodes::new(codes, q, sample_rate)
}

/// Inverse companding of each class's cell center.
pub fn mu_law_decode(codes: &WaveCodes) -> Result<Vec<f64>> {
    let q = codes.classes();
    let mu = (q - 1) as f64;
    codes
        .codes()
        .iter()
        .map(|&c| {
            if c as u32 >= q {
                return Err(Error::data(format!("code {c} >= {q}")));
            }
            let y = (c as f64 + 0.5) / q as f64 * 2.0 - 1.0;
            Ok(expand(y, mu))
        })
        .collect()
}

/// Companded value of a sample, for quantisation-bound checks.
#[cfg(test)]
pub(crate) fn companded(x: f64, bits: u32) -> f64 {
    compand(x, ((1u32 << bits) - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_evaluated_codes() {
        let c = mu_law_encode(&[0.0, 1.0, -1.0], 10, 4000).unwrap();
        assert_eq!(c.codes(), &[512, 1023, 0]);
    }

    #[test]
    fn center_code_decodes_near_zero() {
        let codes = WaveCodes::new(vec![512], 1024, 4000).unwrap();
        let v = mu_law_decode(&codes).unwrap()[0];
        assert!(v.abs() <= 2.0 / 1024.0);
    }

    #[test]
    fn end_codes_decode_near_unit() {
        let codes = WaveCodes::new(vec![0, 1023], 1024, 4000).unwrap();
        let v = mu_law_decode(&codes).unwrap();
        let cell = 2.0 / 1024.0;
        assert!((companded(v[0], 10) + 1.0).abs() <= cell);
        assert!((companded(v[1], 10) - 1.0).abs() <= cell);
    }

    #[test]
    fn out_of_range_sample_rejected() {
        assert!(mu_law_encode(&[1.5], 8, 4000).is_err());
        assert!(mu_law_encode(&[0.5], 1, 4000).is_err());
    }

    #[test]
    fn sinusoid_roundtrip_bound() {
        let bits = 10;
        let q = 1024.0;
        let x: Vec<f64> = (0..4000)
            .map(|n| 0.8 * (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin())
            .collect();
        let y = mu_law_decode(&mu_law_encode(&x, bits, 16000).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((companded(*a, bits) - companded(*b, bits)).abs() <= 2.0 / (q - 1.0));
        }
    }

    proptest! {
        #[test]
        fn roundtrip_within_half_cell(x in -1.0f64..=1.0, bits in 2u32..=16) {
            let q = (1u32 << bits) as f64;
            let y = mu_law_decode(&mu_law_encode(&[x], bits, 8000).unwrap()).unwrap()[0];
            let err = (companded(x, bits) - companded(y, bits)).abs();
            prop_assert!(err <= 1.0 / q + 1e-12, "err {err}");
        }
    }
}
