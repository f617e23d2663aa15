//! Weight and optimizer-state files.
//!
//! Both use the same container: a 4-byte magic, a u32 little-endian format
//! version, a u32 manifest byte length, the manifest as UTF-8 text (one
//! `name:d0,d1,...` line per array, fixed order), then the arrays as
//! contiguous little-endian f32 payloads in manifest order. Weights use
//! magic `PCAW`, optimizer state uses `PCAO`.
//!
//! A network is reconstructed purely from the manifest: the entry names
//! encode the structure (levels, second encoder, attention blocks), so no
//! separate config is needed to load weights.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kernels::ConvKernel;
use crate::model::{DoubleConv, ProcaNet, UpBlock};
use crate::attention::ProcaParams;
use crate::scalar::Scalar;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"PCAW";
pub const OPTIMIZER_MAGIC: [u8; 4] = *b"PCAO";
pub const FORMAT_VERSION: u32 = 1;

/// One named array in a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        Entry {
            name: name.into(),
            dims,
            data,
        }
    }
}

pub fn write_container(path: &Path, magic: [u8; 4], entries: &[Entry]) -> Result<()> {
    let mut manifest = String::new();
    for e in entries {
        let expect: usize = e.dims.iter().product();
        debug_assert_eq!(expect, e.data.len(), "entry {} dims disagree", e.name);
        manifest.push_str(&e.name);
        manifest.push(':');
        let dims: Vec<String> = e.dims.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&dims.join(","));
        manifest.push('\n');
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&magic)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(manifest.len() as u32).to_le_bytes())?;
    out.write_all(manifest.as_bytes())?;
    for e in entries {
        let mut buf = Vec::with_capacity(4 * e.data.len());
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_container(path: &Path, magic: [u8; 4]) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path)?;
    let truncated = || Error::Truncated {
        path: path.to_path_buf(),
    };
    if bytes.len() < 12 {
        return Err(truncated());
    }
    if bytes[0..4] != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12usize.checked_add(manifest_len).ok_or_else(truncated)?;
    if payload_start > bytes.len() {
        return Err(truncated());
    }
    let manifest = std::str::from_utf8(&bytes[12..payload_start]).map_err(|_| {
        Error::ManifestParse {
            path: path.to_path_buf(),
            line: "<manifest is not valid UTF-8>".into(),
        }
    })?;

    let mut entries = Vec::new();
    let mut payload_elems: usize = 0;
    for line in manifest.lines() {
        if line.is_empty() {
            continue;
        }
        let parse_err = || Error::ManifestParse {
            path: path.to_path_buf(),
            line: line.to_string(),
        };
        let (name, dims_text) = line.split_once(':').ok_or_else(parse_err)?;
        if name.is_empty() {
            return Err(parse_err());
        }
        let dims: Vec<usize> = dims_text
            .split(',')
            .map(|d| d.parse::<usize>().map_err(|_| parse_err()))
            .collect::<Result<_>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(Error::DimensionOverflow {
                path: path.to_path_buf(),
            })?;
        payload_elems = payload_elems
            .checked_add(count)
            .ok_or(Error::DimensionOverflow {
                path: path.to_path_buf(),
            })?;
        entries.push(Entry::new(name, dims, Vec::new()));
    }

    let got = (bytes.len() - payload_start) as u64;
    let expected = 4 * payload_elems as u64;
    if got != expected {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected,
            got,
        });
    }
    let mut offset = payload_start;
    for e in &mut entries {
        let count: usize = e.dims.iter().product();
        e.data = bytes[offset..offset + 4 * count]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 4 * count;
    }
    Ok(entries)
}

fn kernel_entries<F: Scalar>(name: &str, k: &ConvKernel<F>, out: &mut Vec<Entry>) {
    out.push(Entry::new(
        format!("{name}.weight"),
        vec![k.out_ch, k.in_ch, k.kh, k.kw],
        k.weight.iter().map(|v| v.as_f32()).collect(),
    ));
    out.push(Entry::new(
        format!("{name}.bias"),
        vec![k.out_ch],
        k.bias.iter().map(|v| v.as_f32()).collect(),
    ));
}

pub fn save_weights<F: Scalar>(net: &ProcaNet<F>, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    for (name, k) in net.named_kernels() {
        kernel_entries(&name, k, &mut entries);
    }
    write_container(path, WEIGHTS_MAGIC, &entries)
}

struct EntryCursor {
    path: PathBuf,
    entries: std::vec::IntoIter<Entry>,
}

impl EntryCursor {
    fn take(&mut self, expected: &str) -> Result<Entry> {
        match self.entries.next() {
            Some(e) if e.name == expected => Ok(e),
            Some(e) => Err(Error::ManifestParse {
                path: self.path.clone(),
                line: format!("expected entry {expected:?}, found {:?}", e.name),
            }),
            None => Err(Error::ManifestParse {
                path: self.path.clone(),
                line: format!("expected entry {expected:?}, but the manifest ended"),
            }),
        }
    }

    fn take_kernel<F: Scalar>(&mut self, name: &str) -> Result<ConvKernel<F>> {
        let w = self.take(&format!("{name}.weight"))?;
        let path = self.path.clone();
        let dims_err = move |e: &Entry| Error::ManifestParse {
            path: path.clone(),
            line: format!("entry {:?} has unexpected dims {:?}", e.name, e.dims),
        };
        let &[out_ch, in_ch, kh, kw] = w.dims.as_slice() else {
            return Err(dims_err(&w));
        };
        if kh != kw {
            return Err(dims_err(&w));
        }
        let b = self.take(&format!("{name}.bias"))?;
        if b.dims != [out_ch] {
            return Err(dims_err(&b));
        }
        ConvKernel::new(
            out_ch,
            in_ch,
            kh,
            w.data.iter().map(|&v| F::from_f32(v)).collect(),
            b.data.iter().map(|&v| F::from_f32(v)).collect(),
        )
    }

    fn take_double_conv<F: Scalar>(&mut self, prefix: &str) -> Result<DoubleConv<F>> {
        Ok(DoubleConv {
            conv1: self.take_kernel(&format!("{prefix}.conv1"))?,
            conv2: self.take_kernel(&format!("{prefix}.conv2"))?,
        })
    }
}

/// Rebuild a network from a weight file. The manifest names determine the
/// structure; every entry must appear in canonical order.
pub fn load_weights<F: Scalar>(path: &Path) -> Result<ProcaNet<F>> {
    let entries = read_container(path, WEIGHTS_MAGIC)?;
    let exists = |name: String| entries.iter().any(|e| e.name == name);
    let mut levels = 0;
    while exists(format!("enc1.level{}.conv1.weight", levels + 1)) {
        levels += 1;
    }
    if levels == 0 {
        return Err(Error::ManifestParse {
            path: path.to_path_buf(),
            line: "no enc1.level1.conv1.weight entry".into(),
        });
    }
    let has_enc2 = exists("enc2.level1.conv1.weight".into());
    let has_proca = exists("proca.level1.self_r.weight".into());

    let mut cur = EntryCursor {
        path: path.to_path_buf(),
        entries: entries.into_iter(),
    };
    let mut enc1 = Vec::with_capacity(levels);
    for lvl in 1..=levels {
        enc1.push(cur.take_double_conv(&format!("enc1.level{lvl}"))?);
    }
    let enc2 = if has_enc2 {
        let mut enc = Vec::with_capacity(levels);
        for lvl in 1..=levels {
            enc.push(cur.take_double_conv(&format!("enc2.level{lvl}"))?);
        }
        Some(enc)
    } else {
        None
    };
    let proca = if has_proca {
        let mut blocks = Vec::with_capacity(levels);
        for lvl in 1..=levels {
            blocks.push(ProcaParams::new(
                cur.take_kernel(&format!("proca.level{lvl}.self_r"))?,
                cur.take_kernel(&format!("proca.level{lvl}.self_n"))?,
                cur.take_kernel(&format!("proca.level{lvl}.cross_r_to_n"))?,
                cur.take_kernel(&format!("proca.level{lvl}.cross_n_to_r"))?,
            )?);
        }
        Some(blocks)
    } else {
        None
    };
    let bottleneck = cur.take_double_conv("bottleneck")?;
    let mut decoder = Vec::with_capacity(levels);
    for stage in 1..=levels {
        decoder.push(UpBlock {
            up: cur.take_kernel(&format!("decoder.stage{stage}.up"))?,
            conv1: cur.take_kernel(&format!("decoder.stage{stage}.conv1"))?,
            conv2: cur.take_kernel(&format!("decoder.stage{stage}.conv2"))?,
        });
    }
    let head = cur.take_kernel("head")?;
    if let Some(extra) = cur.entries.next() {
        return Err(Error::ManifestParse {
            path: path.to_path_buf(),
            line: format!("unexpected trailing entry {:?}", extra.name),
        });
    }
    if has_proca && !has_enc2 {
        return Err(Error::ManifestParse {
            path: path.to_path_buf(),
            line: "attention entries present without a second encoder".into(),
        });
    }
    Ok(ProcaNet {
        enc1,
        enc2,
        proca,
        bottleneck,
        decoder,
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_net(attention: bool) -> ProcaNet<f32> {
        ProcaNet::init(&ModelConfig {
            levels: 2,
            base_channels: 4,
            attention,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn weights_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for attention in [true, false] {
            let net = tiny_net(attention);
            let path = dir.path().join(format!("net_{attention}.pcaw"));
            save_weights(&net, &path).unwrap();
            let back: ProcaNet<f32> = load_weights(&path).unwrap();
            assert_eq!(net, back, "attention={attention}");
        }
    }

    #[test]
    fn single_encoder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = ProcaNet::<f32>::init(&ModelConfig {
            levels: 3,
            base_channels: 2,
            encoder2_bands: None,
            ..ModelConfig::default()
        })
        .unwrap();
        let path = dir.path().join("unet.pcaw");
        save_weights(&net, &path).unwrap();
        let back: ProcaNet<f32> = load_weights(&path).unwrap();
        assert_eq!(net, back);
        assert!(back.enc2.is_none());
        assert!(back.proca.is_none());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let net = tiny_net(true);
        let p1 = dir.path().join("a.pcaw");
        let p2 = dir.path().join("b.pcaw");
        save_weights(&net, &p1).unwrap();
        save_weights(&net, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_magic_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pcaw");
        save_weights(&tiny_net(true), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match load_weights::<f32>(&path) {
            Err(Error::BadMagic { found, .. }) => assert_eq!(found, "XCAW"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_version_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.pcaw");
        save_weights(&tiny_net(true), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        match load_weights::<f32>(&path) {
            Err(Error::UnsupportedVersion { found, .. }) => assert_eq!(found, 9),
            other => panic!("expected UnsupportedVersion, got {other:?}"),
        }
    }

    #[test]
    fn edited_manifest_shape_is_a_payload_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edit.pcaw");
        save_weights(&tiny_net(true), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // The first manifest line ends "...:4,4,3,3"; bump one dim without
        // changing the manifest length so only the payload no longer fits.
        let manifest_len =
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest = String::from_utf8(bytes[12..12 + manifest_len].to_vec()).unwrap();
        let edited = manifest.replacen(":4,4,3,3", ":4,5,3,3", 1);
        assert_ne!(manifest, edited, "expected dims not found");
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[12 + manifest_len..]);
        std::fs::write(&path, &out).unwrap();
        match load_weights::<f32>(&path) {
            Err(Error::PayloadLength { expected, got, .. }) => {
                // One extra 4x3x3 in-channel plane announced, 4 bytes per value.
                assert_eq!(expected - got, 4 * 4 * 3 * 3);
            }
            other => panic!("expected PayloadLength, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.pcaw");
        save_weights(&tiny_net(true), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Cut inside the header.
        std::fs::write(&path, &bytes[..8]).unwrap();
        assert!(matches!(
            load_weights::<f32>(&path),
            Err(Error::Truncated { .. })
        ));
        // Cut inside the payload: manifest still parses, payload short.
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            load_weights::<f32>(&path),
            Err(Error::PayloadLength { .. })
        ));
    }

    #[test]
    fn garbled_manifest_line_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbled.pcaw");
        let entries = [Entry::new("head.weight", vec![1, 2], vec![0.0, 0.0])];
        write_container(&path, WEIGHTS_MAGIC, &entries).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Replace the ':' separator with a space.
        let pos = 12 + "head.weight".len();
        assert_eq!(bytes[pos], b':');
        bytes[pos] = b' ';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_container(&path, WEIGHTS_MAGIC),
            Err(Error::ManifestParse { .. })
        ));
    }

    #[test]
    fn loader_rejects_leftover_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.pcaw");
        let net = tiny_net(true);
        let mut entries = Vec::new();
        for (name, k) in net.named_kernels() {
            kernel_entries(&name, k, &mut entries);
        }
        entries.push(Entry::new("stray", vec![1], vec![0.5]));
        write_container(&path, WEIGHTS_MAGIC, &entries).unwrap();
        match load_weights::<f32>(&path) {
            Err(Error::ManifestParse { line, .. }) => {
                assert!(line.contains("stray"), "line was {line:?}")
            }
            other => panic!("expected ManifestParse, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_constant_between_formats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.pcao");
        write_container(&path, OPTIMIZER_MAGIC, &[]).unwrap();
        assert!(matches!(
            read_container(&path, WEIGHTS_MAGIC),
            Err(Error::BadMagic { .. })
        ));
        assert!(read_container(&path, OPTIMIZER_MAGIC).unwrap().is_empty());
    }
}
