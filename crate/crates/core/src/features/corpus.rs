//! On-disk corpus layout.
//!
//! ```text
//! <root>/phonemes.txt                      one symbol per line, line index = id
//! <root>/<speaker>/<utt>.mel               "MELF" v1, T, D, shift ms, window ms, T·D f32
//! <root>/<speaker>/<utt>.wav.codes         "MUQW" v1, Q, sample rate, N (u64), N u16
//! <root>/<speaker>/<utt>.lab               optional: `<symbol> <start> <end_exclusive>` per line
//! ```
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{MelMatrix, PhonemeTranscript, UtteranceRecord, WaveCodes};
use crate::error::{Error, Result};

const MEL_MAGIC: &[u8; 4] = b"MELF";
const CODES_MAGIC: &[u8; 4] = b"MUQW";
const VERSION: u32 = 1;

/// A phoneme inventory plus its records, in lexicographic utterance order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub phonemes: Vec<String>,
    pub records: Vec<UtteranceRecord>,
}

impl Corpus {
    /// Distinct speaker ids in sorted order.
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.records.iter().map(|r| r.speaker_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn by_speaker(&self, speaker: &str) -> Vec<&UtteranceRecord> {
        self.records.iter().filter(|r| r.speaker_id == speaker).collect()
    }

    /// Total audio duration in seconds.
    pub fn seconds(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.waveform.len() as f64 / r.waveform.sample_rate as f64)
            .sum()
    }
}

pub(crate) struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(path: &'a Path, buf: &'a [u8]) -> Self {
        Reader { path, buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data_file(self.path, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.finished() {
            Ok(())
        } else {
            Err(Error::data_file(self.path, "trailing bytes after declared data"))
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_mel(mel: &MelMatrix) -> Vec<u8> {
    let mut b = Vec::with_capacity(24 + mel.values().len() * 4);
    b.extend_from_slice(MEL_MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(mel.frames() as u32).to_le_bytes());
    b.extend_from_slice(&(mel.dims() as u32).to_le_bytes());
    b.extend_from_slice(&mel.frame_shift_ms.to_le_bytes());
    b.extend_from_slice(&mel.window_ms.to_le_bytes());
    for v in mel.values() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

pub fn decode_mel(path: &Path, bytes: &[u8]) -> Result<MelMatrix> {
    let mut r = Reader::new(path, bytes);
    if r.take(4)? != MEL_MAGIC {
        return Err(Error::data_file(path, "bad magic, expected MELF"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data_file(path, format!("unsupported version {version}")));
    }
    let t = r.u32()? as usize;
    let d = r.u32()? as usize;
    let shift = r.f32()?;
    let window = r.f32()?;
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::data_file(path, "header dimensions overflow"))?;
    if bytes.len() - 24 != expected {
        return Err(Error::data_file(
            path,
            format!(
                "header declares {t}x{d} values but payload has {} bytes",
                bytes.len() - 24
            ),
        ));
    }
    let mut values = Vec::with_capacity(t * d);
    for _ in 0..t * d {
        values.push(r.f32()?);
    }
    r.expect_end()?;
    MelMatrix::new(t, d, values, shift, window).map_err(|e| Error::data_file(path, e.to_string()))
}

pub fn write_mel_file(path: &Path, mel: &MelMatrix) -> Result<()> {
    write_file(path, &encode_mel(mel))
}

pub fn read_mel_file(path: &Path) -> Result<MelMatrix> {
    decode_mel(path, &read_file(path)?)
}

pub fn encode_codes(codes: &WaveCodes) -> Vec<u8> {
    let mut b = Vec::with_capacity(24 + codes.len() * 2);
    b.extend_from_slice(CODES_MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&codes.classes().to_le_bytes());
    b.extend_from_slice(&codes.sample_rate.to_le_bytes());
    b.extend_from_slice(&(codes.len() as u64).to_le_bytes());
    for c in codes.codes() {
        b.extend_from_slice(&c.to_le_bytes());
    }
    b
}

pub fn decode_codes(path: &Path, bytes: &[u8]) -> Result<WaveCodes> {
    let mut r = Reader::new(path, bytes);
    if r.take(4)? != CODES_MAGIC {
        return Err(Error::data_file(path, "bad magic, expected MUQW"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data_file(path, format!("unsupported version {version}")));
    }
    let q = r.u32()?;
    let sr = r.u32()?;
    let n = r.u64()? as usize;
    if (bytes.len() - 24) as u64 != n as u64 * 2 {
        return Err(Error::data_file(
            path,
            format!("header declares {n} samples but payload has {} bytes", bytes.len() - 24),
        ));
    }
    let mut codes = Vec::with_capacity(n);
    for _ in 0..n {
        codes.push(r.u16()?);
    }
    r.expect_end()?;
    WaveCodes::new(codes, q, sr).map_err(|e| Error::data_file(path, e.to_string()))
}

pub fn write_codes_file(path: &Path, codes: &WaveCodes) -> Result<()> {
    write_file(path, &encode_codes(codes))
}

pub fn read_codes_file(path: &Path) -> Result<WaveCodes> {
    decode_codes(path, &read_file(path)?)
}

pub fn format_lab(t: &PhonemeTranscript, symbols: &[String]) -> String {
    let mut s = String::new();
    let mut start = 0;
    for (&id, &d) in t.ids().iter().zip(t.durations()) {
        s.push_str(&format!("{} {} {}\n", symbols[id], start, start + d));
        start += d;
    }
    s
}

pub fn parse_lab(path: &Path, text: &str, symbols: &HashMap<&str, usize>) -> Result<PhonemeTranscript> {
    let mut ids = Vec::new();
    let mut durations = Vec::new();
    let mut expected_start = 0usize;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::data_file(path, format!("line {}: {msg}: `{line}`", ln + 1));
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(bad("expected `<symbol> <start> <end>`"));
        }
        let id = *symbols.get(parts[0]).ok_or_else(|| bad("unknown phoneme symbol"))?;
        let start: usize = parts[1].parse().map_err(|_| bad("bad start frame"))?;
        let end: usize = parts[2].parse().map_err(|_| bad("bad end frame"))?;
        if start != expected_start {
            return Err(bad("segments must tile the frames contiguously from 0"));
        }
        if end <= start {
            return Err(bad("empty or negative segment"));
        }
        ids.push(id);
        durations.push(end - start);
        expected_start = end;
    }
    PhonemeTranscript::new(ids, durations).map_err(|e| Error::data_file(path, e.to_string()))
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

pub fn read_phonemes(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Writes every record and the phoneme inventory under `root`.
pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut inv = String::new();
    for s in &corpus.phonemes {
        inv.push_str(s);
        inv.push('\n');
    }
    write_file(&root.join("phonemes.txt"), inv.as_bytes())?;
    for r in &corpus.records {
        let dir = root.join(&r.speaker_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_mel_file(&dir.join(format!("{}.mel", r.utterance_id)), &r.mel)?;
        write_codes_file(&dir.join(format!("{}.wav.codes", r.utterance_id)), &r.waveform)?;
        let lab = dir.join(format!("{}.lab", r.utterance_id));
        match &r.transcript {
            Some(t) => write_file(&lab, format_lab(t, &corpus.phonemes).as_bytes())?,
            None if lab.exists() => fs::remove_file(&lab).map_err(|e| Error::io(&lab, e))?,
            None => {}
        }
    }
    Ok(())
}

/// Reads and validates a corpus directory. An empty directory is an empty corpus.
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let entries = list_dir(root)?;
    if entries.is_empty() {
        return Ok(Corpus::default());
    }
    let inv_path = root.join("phonemes.txt");
    let phonemes = if inv_path.exists() {
        read_phonemes(&inv_path)?
    } else {
        Vec::new()
    };
    let symbols: HashMap<&str, usize> = phonemes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut records = Vec::new();
    for dir in entries.into_iter().filter(|p| p.is_dir()) {
        let speaker = dir
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::data_file(&dir, "speaker directory name is not utf-8"))?
            .to_string();
        for file in list_dir(&dir)? {
            let Some(name) = file.file_name().and_then(|s| s.to_str()) else {
                continue;
            };
            let Some(utt) = name.strip_suffix(".mel") else {
                continue;
            };
            let mel = read_mel_file(&file)?;
            let codes_path = dir.join(format!("{utt}.wav.codes"));
            if !codes_path.exists() {
                return Err(Error::data_file(&codes_path, "missing companion waveform codes"));
            }
            let waveform = read_codes_file(&codes_path)?;
            let lab_path = dir.join(format!("{utt}.lab"));
            let transcript = if lab_path.exists() {
                if inv_path.exists() {
                    let text = fs::read_to_string(&lab_path).map_err(|e| Error::io(&lab_path, e))?;
                    Some(parse_lab(&lab_path, &text, &symbols)?)
                } else {
                    return Err(Error::data_file(&inv_path, "missing phoneme inventory for alignments"));
                }
            } else {
                None
            };
            let rec = UtteranceRecord {
                utterance_id: utt.to_string(),
                speaker_id: speaker.clone(),
                transcript,
                mel,
                waveform,
            };
            rec.validate(Some(phonemes.len()).filter(|&n| n > 0)).map_err(|e| {
                let p = if rec.transcript.is_some() {
                    &lab_path
                } else {
                    &codes_path
                };
                Error::data_file(p, e.to_string())
            })?;
            records.push(rec);
        }
    }
    records.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    if let Some(w) = records.windows(2).find(|w| w[0].utterance_id == w[1].utterance_id) {
        return Err(Error::data(format!("duplicate utterance id {}", w[0].utterance_id)));
    }
    Ok(Corpus { phonemes, records })
}
