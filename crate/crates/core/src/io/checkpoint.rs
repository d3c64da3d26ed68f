//! Binary checkpoint: encoder parameters and norm statistics, the colour
//! palette, an optional optimizer state and the training step.
//!
//! Layout (little endian):
//!
//! ```text
//! "CFLW" | u32 version | u32 len + config text (sorted key=value lines)
//! u64 step | u32 k + k x 3 f32 palette
//! u32 n + n tensors (u16 len + name, u8 rank, rank x u32 extents, f32 data)
//! u8 has_optimizer [u64 adam step, u32 n + n tensors]
//! u32 crc32 of everything before it
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{AdamState, Tensor};
use crate::colour::Palette;
use crate::encoder::{EncoderConfig, EncoderParams, NormMode, NormStats};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CFLW";
const WIDTHS_KEY: &str = "encoder_widths";
const NORM_KEY: &str = "norm";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Run configuration snapshot. The encoder shape keys are always
    /// rewritten from `encoder` on save.
    pub config: BTreeMap<String, String>,
    pub step: u64,
    pub palette: Palette,
    pub encoder: EncoderParams<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    shape.iter().for_each(|&e| put_u32(out, e as u32));
    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
}

fn config_text(ck: &Checkpoint) -> String {
    let mut cfg = ck.config.clone();
    let ec = ck.encoder.config();
    cfg.insert(WIDTHS_KEY.into(), ec.widths.map(|w| w.to_string()).join(","));
    cfg.insert(NORM_KEY.into(), ec.norm.as_str().into());
    cfg.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, CHECKPOINT_VERSION);
    let text = config_text(ck);
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&ck.step.to_le_bytes());
    put_u32(&mut out, ck.palette.len() as u32);
    for c in ck.palette.centroids() {
        c.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes()));
    }
    let enc = &ck.encoder;
    put_u32(&mut out, (enc.tensors().len() + 2 * enc.norm_stats().len()) as u32);
    for (name, t) in enc.names().zip(enc.tensors()) {
        put_tensor(&mut out, name, t.shape(), t.data());
    }
    for (name, s) in enc.norm_names().zip(enc.norm_stats()) {
        put_tensor(&mut out, &format!("{name}.running_mean"), &[s.mean.len()], &s.mean);
        put_tensor(&mut out, &format!("{name}.running_var"), &[s.var.len()], &s.var);
    }
    match &ck.optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step.to_le_bytes());
            put_u32(&mut out, 2 * enc.tensors().len() as u32);
            for ((name, t), (m, v)) in enc.names().zip(enc.tensors()).zip(opt.first.iter().zip(&opt.second)) {
                put_tensor(&mut out, &format!("adam.first.{name}"), t.shape(), m);
                put_tensor(&mut out, &format!("adam.second.{name}"), t.shape(), v);
            }
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Truncated(what))?, what)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u16("tensor name length")? as usize;
        let name = String::from_utf8(self.take(len, "tensor name")?.to_vec())
            .map_err(|_| Error::CheckpointLayout("tensor name is not utf-8".into()))?;
        let rank = self.u8("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| self.u32("tensor extents").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or(Error::Truncated("tensor data"))?;
        let data = self.f32s(count, "tensor data")?;
        let t = Tensor::new(shape, data).map_err(|e| Error::CheckpointLayout(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let n = self.u32("tensor count")?;
        (0..n).map(|_| self.tensor()).collect()
    }
}

fn encoder_config(cfg: &BTreeMap<String, String>) -> Result<EncoderConfig> {
    let get = |k: &str| cfg.get(k).ok_or_else(|| Error::CheckpointLayout(format!("config snapshot lacks {k}")));
    let widths: Vec<usize> = get(WIDTHS_KEY)?
        .split(',')
        .map(|w| w.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::CheckpointLayout(format!("bad {WIDTHS_KEY}")))?;
    let widths: [usize; 5] = widths
        .try_into()
        .map_err(|_| Error::CheckpointLayout(format!("{WIDTHS_KEY} must list 5 widths")))?;
    let norm: NormMode = get(NORM_KEY)?.parse()?;
    Ok(EncoderConfig { widths, norm })
}

fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 8 };
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config text")?)
        .map_err(|_| Error::CheckpointLayout("config text is not utf-8".into()))?;
    let mut config = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::CheckpointLayout(format!("config line {line:?} lacks '='")))?;
        config.insert(k.to_string(), v.to_string());
    }
    let step = r.u64("step")?;
    let k = r.u32("palette size")? as usize;
    let flat = r.f32s(k.checked_mul(3).ok_or(Error::Truncated("palette"))?, "palette")?;
    let centroids = flat.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
    let palette = Palette::from_centroids(centroids).map_err(|e| Error::CheckpointLayout(e.to_string()))?;

    let tensors = r.tensors()?;
    let mut params = Vec::new();
    let mut stats: Vec<(String, NormStats<f32>)> = Vec::new();
    let mut pending_mean = None;
    for (name, t) in tensors {
        if let Some(layer) = name.strip_suffix(".running_mean") {
            pending_mean = Some((layer.to_string(), t.into_data()));
        } else if let Some(layer) = name.strip_suffix(".running_var") {
            match pending_mean.take() {
                Some((l, mean)) if l == layer => stats.push((l, NormStats { mean, var: t.into_data() })),
                _ => return Err(Error::CheckpointLayout(format!("{name} without matching running_mean"))),
            }
        } else {
            params.push((name, t));
        }
    }
    let encoder = EncoderParams::from_parts(&encoder_config(&config)?, params, stats)?;

    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let moments = r.tensors()?;
            if moments.len() != 2 * encoder.tensors().len() {
                return Err(Error::CheckpointLayout(format!(
                    "optimizer holds {} moment tensors for {} parameters",
                    moments.len(),
                    encoder.tensors().len()
                )));
            }
            let (mut first, mut second) = (Vec::new(), Vec::new());
            for (pair, (name, t)) in moments.chunks(2).zip(encoder.names().zip(encoder.tensors())) {
                let ok = pair[0].0 == format!("adam.first.{name}")
                    && pair[1].0 == format!("adam.second.{name}")
                    && pair[0].1.shape() == t.shape()
                    && pair[1].1.shape() == t.shape();
                if !ok {
                    return Err(Error::CheckpointLayout(format!("optimizer moments for {name} do not match")));
                }
                first.push(pair[0].1.data().to_vec());
                second.push(pair[1].1.data().to_vec());
            }
            Some(AdamState { first, second, step })
        }
        f => return Err(Error::CheckpointLayout(format!("optimizer flag {f}"))),
    };
    if r.pos != bytes.len() - 4 {
        return Err(Error::CheckpointLayout(format!(
            "{} unexpected bytes before the checksum",
            (bytes.len() - 4) as isize - r.pos as isize
        )));
    }
    Ok(Checkpoint {
        config,
        step,
        palette,
        encoder,
        optimizer,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let magic: [u8; 4] = bytes.get(..4).ok_or(Error::Truncated("magic"))?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes.get(4..8).ok_or(Error::Truncated("version"))?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        // a short file fails structurally before the checksum is reached
        return match parse(bytes) {
            Err(e @ Error::Truncated(_)) => Err(e),
            _ => Err(Error::Corrupt { stored, computed }),
        };
    }
    parse(bytes)
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(ck)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_opt: bool) -> Checkpoint {
        let encoder = EncoderParams::<f32>::init(&EncoderConfig::tiny(), 3).unwrap();
        let centroids = (0..16).map(|i| [i as f64 * 6.0, (i as f64 - 8.0) * 3.0, 1.5]).collect();
        let optimizer = with_opt.then(|| {
            let mut s = AdamState::new(encoder.tensors());
            s.step = 7;
            s.first[0][0] = 0.25;
            s
        });
        let mut config = BTreeMap::new();
        config.insert("seed".into(), "1".into());
        Checkpoint {
            config,
            step: 42,
            palette: Palette::from_centroids(centroids).unwrap(),
            encoder,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for opt in [false, true] {
            let ck = sample(opt);
            let bytes = encode_checkpoint(&ck);
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(encode_checkpoint(&back), bytes);
            assert_eq!(back.encoder, ck.encoder);
            assert_eq!(back.optimizer, ck.optimizer);
            assert_eq!(back.step, 42);
            assert_eq!(back.config["encoder_widths"], "8,8,16,32,32");
        }
    }

    #[test]
    fn distinct_failures() {
        let bytes = encode_checkpoint(&sample(true));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() / 2]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::UnsupportedVersion(9))));
        let mut bad = bytes.clone();
        let mid = bad.len() - 100;
        bad[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cflw");
        let ck = sample(false);
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().encoder, ck.encoder);
    }
}
