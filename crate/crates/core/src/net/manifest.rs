//! Architecture manifest: the complete layer list of a model as plain text.
//!
//! ```text
//! dims phonemes=10 mel=16 latent=16 channels=32 speakers=4
//! layer tenc.embed DENSE in=10 out=32 width=1 dilation=1 causal=0 speaker=0 residual=0 dropout=0.2
//! ...
//! ```
//! Blocks are identified by name prefix; a stack such as `tenc.latent` is
//! every layer named `tenc.latent.<i>` in file order.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Filter-gate convolution.
    Fg,
    /// Filter-gate convolution with per-speaker biases.
    Fgs,
    /// Highway convolution.
    Hw,
    /// Quasi-recurrent layer: causal candidate/forget convolution plus scan.
    Qrnn,
    /// Pointwise affine map.
    Dense,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Fg => "FG",
            LayerKind::Fgs => "FGS",
            LayerKind::Hw => "HW",
            LayerKind::Qrnn => "QRNN",
            LayerKind::Dense => "DENSE",
        })
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "FG" => LayerKind::Fg,
            "FGS" => LayerKind::Fgs,
            "HW" => LayerKind::Hw,
            "QRNN" => LayerKind::Qrnn,
            "DENSE" => LayerKind::Dense,
            other => return Err(Error::config(format!("unknown layer type `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub width: usize,
    pub dilation: usize,
    pub causal: bool,
    pub speaker: bool,
    pub residual: bool,
    pub dropout: f64,
}

impl LayerSpec {
    fn new(name: &str, kind: LayerKind, c_in: usize, c_out: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            c_in,
            c_out,
            width: 1,
            dilation: 1,
            causal: false,
            speaker: kind == LayerKind::Fgs,
            residual: false,
            dropout: 0.0,
        }
    }

    fn conv(mut self, width: usize, dilation: usize, causal: bool) -> Self {
        self.width = width;
        self.dilation = dilation;
        self.causal = causal;
        self
    }

    fn residual(mut self) -> Self {
        self.residual = true;
        self
    }

    fn dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(format!("layer {}: {msg}", self.name)));
        if self.c_in == 0 || self.c_out == 0 || self.width == 0 || self.dilation == 0 {
            return bad("channels, width and dilation must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !self.causal && self.width.is_multiple_of(2) {
            return bad("centered convolutions need an odd width");
        }
        if self.residual && self.c_in != self.c_out {
            return bad("residual layers must keep the channel count");
        }
        if self.kind == LayerKind::Hw && self.c_in != self.c_out {
            return bad("highway layers must be square");
        }
        if self.speaker != (self.kind == LayerKind::Fgs) {
            return bad("speaker biases exist exactly on FGS layers");
        }
        if self.kind == LayerKind::Qrnn && !self.causal {
            return bad("QRNN layers are causal");
        }
        Ok(())
    }
}

/// Global sizes shared by every network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Phoneme inventory size P.
    pub phonemes: usize,
    /// Mel bands D.
    pub mel: usize,
    /// Latent dimension Z.
    pub latent: usize,
    /// Hidden channels C.
    pub channels: usize,
    /// Training speakers K.
    pub speakers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchManifest {
    pub dims: ModelDims,
    pub layers: Vec<LayerSpec>,
}

const DILATIONS: [usize; 6] = [1, 2, 4, 1, 2, 4];
const DROPOUT: f64 = 0.2;
const DROPOUT_HEAVY: f64 = 0.5;

impl ArchManifest {
    /// Default topology for the given sizes.
    pub fn standard(dims: ModelDims) -> Self {
        use LayerKind::*;
        let ModelDims {
            phonemes: p,
            mel: d,
            latent: z,
            channels: c,
            ..
        } = dims;
        let half = c / 2;
        let mut l = Vec::new();

        l.push(LayerSpec::new("tenc.embed", Dense, p, c).dropout(DROPOUT));
        l.push(
            LayerSpec::new("tenc.ctx.fwd", Qrnn, c, half)
                .conv(2, 1, true)
                .dropout(DROPOUT_HEAVY),
        );
        l.push(
            LayerSpec::new("tenc.ctx.bwd", Qrnn, c, c - half)
                .conv(2, 1, true)
                .dropout(DROPOUT_HEAVY),
        );
        for (i, &dil) in DILATIONS.iter().enumerate() {
            l.push(
                LayerSpec::new(&format!("tenc.latent.{i}"), Fg, c, c)
                    .conv(3, dil, false)
                    .residual()
                    .dropout(DROPOUT),
            );
        }
        l.push(LayerSpec::new("tenc.out", Dense, c, 2 * z));

        l.push(LayerSpec::new("senc.in", Dense, d, c).dropout(DROPOUT));
        for (i, &dil) in DILATIONS.iter().enumerate() {
            l.push(
                LayerSpec::new(&format!("senc.latent.{i}"), Fg, c, c)
                    .conv(3, dil, false)
                    .residual()
                    .dropout(DROPOUT),
            );
        }
        l.push(LayerSpec::new("senc.out", Dense, c, 2 * z));

        l.push(LayerSpec::new("sdec.ctx.in", Dense, z, c).dropout(DROPOUT));
        for (i, &dil) in DILATIONS.iter().enumerate() {
            l.push(
                LayerSpec::new(&format!("sdec.ctx.{i}"), Fgs, c, c)
                    .conv(3, dil, true)
                    .residual()
                    .dropout(DROPOUT),
            );
        }
        l.push(LayerSpec::new("sdec.prenet.in", Dense, d, c).dropout(DROPOUT_HEAVY));
        for (i, dil) in [1, 2].into_iter().enumerate() {
            l.push(
                LayerSpec::new(&format!("sdec.prenet.{i}"), Hw, c, c)
                    .conv(3, dil, true)
                    .dropout(DROPOUT_HEAVY),
            );
        }
        l.push(
            LayerSpec::new("sdec.out.0", Fg, 2 * c, c)
                .conv(3, 1, true)
                .dropout(DROPOUT),
        );
        l.push(LayerSpec::new("sdec.out.1", Dense, c, d));

        l.push(LayerSpec::new("tdec.0", Fg, z, c).conv(3, 1, false).dropout(DROPOUT));
        l.push(LayerSpec::new("tdec.1", Dense, c, p));

        ArchManifest { dims, layers: l }
    }

    /// The same topology with every layer of `prefix` removed (used to build
    /// a model without a text decoder).
    pub fn without(&self, prefix: &str) -> Self {
        ArchManifest {
            dims: self.dims,
            layers: self
                .layers
                .iter()
                .filter(|l| !l.name.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::model(format!("manifest has no layer `{name}`")))
    }

    pub fn has_layer(&self, name: &str) -> bool {
        self.layers.iter().any(|l| l.name == name)
    }

    /// Layers named `<prefix>.<index>`, in file order.
    pub fn stack(&self, prefix: &str) -> Vec<&LayerSpec> {
        self.layers
            .iter()
            .filter(|l| {
                l.name
                    .strip_prefix(prefix)
                    .and_then(|r| r.strip_prefix('.'))
                    .is_some_and(|r| r.parse::<usize>().is_ok())
            })
            .collect()
    }

    pub fn has_text_decoder(&self) -> bool {
        self.layers.iter().any(|l| l.name.starts_with("tdec."))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.phonemes == 0 || d.mel == 0 || d.latent == 0 || d.channels < 2 {
            return Err(Error::config("manifest dims must be positive (channels ≥ 2)"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()?;
            if self.layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::config(format!("duplicate layer `{}`", l.name)));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let d = &self.dims;
        let mut s = format!(
            "dims phonemes={} mel={} latent={} channels={} speakers={}\n",
            d.phonemes, d.mel, d.latent, d.channels, d.speakers
        );
        for l in &self.layers {
            s.push_str(&format!(
                "layer {} {} in={} out={} width={} dilation={} causal={} speaker={} residual={} dropout={}\n",
                l.name,
                l.kind,
                l.c_in,
                l.c_out,
                l.width,
                l.dilation,
                l.causal as u8,
                l.speaker as u8,
                l.residual as u8,
                l.dropout
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut dims = None;
        let mut layers = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::config(format!("manifest line {}: {msg}", ln + 1));
            let mut words = line.split_whitespace();
            let head = words.next().unwrap();
            match head {
                "dims" => {
                    let kv = key_values(words).map_err(err)?;
                    let get = |k: &str| -> Result<usize> {
                        kv.iter()
                            .find(|(key, _)| key == k)
                            .ok_or_else(|| err(format!("missing `{k}`")))?
                            .1
                            .parse()
                            .map_err(|_| err(format!("bad value for `{k}`")))
                    };
                    dims = Some(ModelDims {
                        phonemes: get("phonemes")?,
                        mel: get("mel")?,
                        latent: get("latent")?,
                        channels: get("channels")?,
                        speakers: get("speakers")?,
                    });
                }
                "layer" => {
                    let name = words.next().ok_or_else(|| err("missing layer name".into()))?;
                    let kind: LayerKind = words.next().ok_or_else(|| err("missing layer type".into()))?.parse()?;
                    let kv = key_values(words).map_err(err)?;
                    let get = |k: &str| -> Result<&str> {
                        kv.iter()
                            .find(|(key, _)| key == k)
                            .map(|(_, v)| v.as_str())
                            .ok_or_else(|| err(format!("missing `{k}`")))
                    };
                    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| err(format!("bad `{k}`"))) };
                    let flag = |k: &str| -> Result<bool> {
                        match get(k)? {
                            "0" => Ok(false),
                            "1" => Ok(true),
                            _ => Err(err(format!("`{k}` must be 0 or 1"))),
                        }
                    };
                    layers.push(LayerSpec {
                        name: name.to_string(),
                        kind,
                        c_in: num("in")?,
                        c_out: num("out")?,
                        width: num("width")?,
                        dilation: num("dilation")?,
                        causal: flag("causal")?,
                        speaker: flag("speaker")?,
                        residual: flag("residual")?,
                        dropout: get("dropout")?.parse().map_err(|_| err("bad `dropout`".into()))?,
                    });
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        let dims = dims.ok_or_else(|| Error::config("manifest lacks a `dims` line"))?;
        let m = ArchManifest { dims, layers };
        m.validate()?;
        Ok(m)
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

fn key_values<'a>(words: impl Iterator<Item = &'a str>) -> std::result::Result<Vec<(String, String)>, String> {
    words
        .map(|w| {
            w.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format!("expected key=value, got `{w}`"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            phonemes: 10,
            mel: 16,
            latent: 8,
            channels: 12,
            speakers: 3,
        }
    }

    #[test]
    fn text_roundtrip() {
        let m = ArchManifest::standard(dims());
        m.validate().unwrap();
        let back = ArchManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash(), m.hash());
    }

    #[test]
    fn stacks_in_order() {
        let m = ArchManifest::standard(dims());
        let dil: Vec<usize> = m.stack("tenc.latent").iter().map(|l| l.dilation).collect();
        assert_eq!(dil, DILATIONS);
        assert_eq!(m.stack("sdec.prenet").len(), 2);
        assert_eq!(m.stack("sdec.out").len(), 2);
    }

    #[test]
    fn speaker_flags_only_in_decoder_context() {
        let m = ArchManifest::standard(dims());
        for l in &m.layers {
            assert_eq!(
                l.speaker,
                l.name.starts_with("sdec.ctx.") && l.name != "sdec.ctx.in",
                "{}",
                l.name
            );
        }
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(ArchManifest::parse("layer a FG in=1 out=1").is_err());
        assert!(ArchManifest::parse("dims phonemes=1 mel=1 latent=1 channels=4 speakers=1\nlayer a XX").is_err());
        let m = ArchManifest::standard(dims());
        let bad = m.to_text().replace(
            "layer sdec.prenet.0 HW in=12 out=12",
            "layer sdec.prenet.0 HW in=12 out=6",
        );
        assert!(ArchManifest::parse(&bad).is_err());
    }

    #[test]
    fn without_text_decoder() {
        let m = ArchManifest::standard(dims()).without("tdec.");
        assert!(!m.has_text_decoder());
        assert!(m.has_layer("sdec.out.1"));
    }
}
