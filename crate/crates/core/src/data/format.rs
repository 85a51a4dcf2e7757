//! Portable dataset file.
//!
//! A short text header followed by raw bytes:
//!
//! ```text
//! CSTR-DATASET 1
//! height 64
//! width 64
//! count 200
//! seed 7
//! config <n>
//! <n bytes of TOML scene configuration>
//! digest <sha256 of the configuration bytes, hex>
//! end
//! ```
//!
//! The payload holds, per sample, the `3·H·W` image bytes (channel-major)
//! followed by the `H·W` label bytes.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Image, LabelMap, Sample, SceneConfig};

const MAGIC: &str = "CSTR-DATASET";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (magic {0:?})")]
    BadMagic(String),
    #[error("unsupported dataset version {0}")]
    BadVersion(String),
    #[error("malformed header: {0}")]
    Malformed(String),
    #[error("config digest mismatch: header says {expected}, config hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("sample {index} is {h}x{w}, header says {height}x{width}")]
    SampleSize {
        index: usize,
        h: usize,
        w: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
    pub config: SceneConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serialises `samples` (all sized like `config`) to `out`.
pub fn write_to<W: Write>(
    mut out: W,
    config: &SceneConfig,
    samples: &[Sample],
) -> Result<(), DatasetError> {
    let (height, width) = (config.height, config.width);
    for (index, s) in samples.iter().enumerate() {
        let (h, w) = (s.labels.height, s.labels.width);
        if (h, w) != (height, width) || (s.image.height, s.image.width) != (height, width) {
            return Err(DatasetError::SampleSize {
                index,
                h,
                w,
                height,
                width,
            });
        }
    }
    let cfg = config.canonical();
    write!(
        out,
        "{MAGIC} {VERSION}\nheight {height}\nwidth {width}\ncount {}\nseed {}\nconfig {}\n",
        samples.len(),
        config.seed,
        cfg.len()
    )?;
    out.write_all(cfg.as_bytes())?;
    write!(out, "\ndigest {}\nend\n", digest(cfg.as_bytes()))?;
    for s in samples {
        out.write_all(&s.image.data)?;
        out.write_all(&s.labels.data)?;
    }
    out.flush()?;
    Ok(())
}

fn line<R: BufRead>(r: &mut R) -> Result<String, DatasetError> {
    let mut s = String::new();
    if r.read_line(&mut s)? == 0 {
        return Err(DatasetError::Malformed("unexpected end of header".into()));
    }
    Ok(s.trim_end_matches('\n').to_string())
}

fn field<R: BufRead, V: std::str::FromStr>(r: &mut R, key: &str) -> Result<V, DatasetError> {
    let l = line(r)?;
    let v = l
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| DatasetError::Malformed(format!("expected {key:?}, found {l:?}")))?;
    v.parse()
        .map_err(|_| DatasetError::Malformed(format!("bad value for {key}: {v:?}")))
}

/// Parses a dataset written by [`write_to`].
pub fn read_from<R: Read>(input: R) -> Result<Dataset, DatasetError> {
    let mut r = BufReader::new(input);
    let first = line(&mut r)?;
    let mut parts = first.split(' ');
    let magic = parts.next().unwrap_or_default();
    if magic != MAGIC {
        return Err(DatasetError::BadMagic(magic.to_string()));
    }
    let version = parts.next().unwrap_or_default();
    if version != VERSION.to_string() {
        return Err(DatasetError::BadVersion(version.to_string()));
    }
    let height: usize = field(&mut r, "height")?;
    let width: usize = field(&mut r, "width")?;
    let count: usize = field(&mut r, "count")?;
    let seed: u64 = field(&mut r, "seed")?;
    let cfg_len: usize = field(&mut r, "config")?;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let nl = line(&mut r)?;
    if !nl.is_empty() {
        return Err(DatasetError::Malformed(
            "config block length is wrong".into(),
        ));
    }
    let expected: String = field(&mut r, "digest")?;
    let actual = digest(&cfg_bytes);
    if expected != actual {
        return Err(DatasetError::DigestMismatch { expected, actual });
    }
    if line(&mut r)? != "end" {
        return Err(DatasetError::Malformed("missing end marker".into()));
    }
    let text = String::from_utf8(cfg_bytes).map_err(|e| DatasetError::Malformed(e.to_string()))?;
    let config: SceneConfig =
        toml::from_str(&text).map_err(|e| DatasetError::Malformed(e.to_string()))?;
    if (config.height, config.width, config.seed) != (height, width, seed) {
        return Err(DatasetError::Malformed(
            "header fields disagree with config".into(),
        ));
    }

    let hw = height * width;
    let per = 4 * hw;
    let expected = count * per;
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(DatasetError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(DatasetError::Trailing(payload.len() - expected));
    }
    let samples = payload
        .chunks_exact(per.max(1))
        .take(count)
        .map(|c| Sample {
            image: Image::new(height, width, c[..3 * hw].to_vec()),
            labels: LabelMap::new(height, width, c[3 * hw..].to_vec()),
        })
        .collect();
    Ok(Dataset {
        header: DatasetHeader {
            height,
            width,
            count,
            seed,
            config,
        },
        samples,
    })
}

pub fn write_dataset(
    path: &Path,
    config: &SceneConfig,
    samples: &[Sample],
) -> Result<(), DatasetError> {
    let f = fs::File::create(path)?;
    write_to(std::io::BufWriter::new(f), config, samples)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    read_from(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn small() -> SceneConfig {
        SceneConfig {
            height: 32,
            width: 16,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_is_lossless() {
        let cfg = small();
        let samples = generate_dataset(&cfg, 0, 3);
        let mut buf = Vec::new();
        write_to(&mut buf, &cfg, &samples).unwrap();
        let back = read_from(&buf[..]).unwrap();
        assert_eq!(back.samples, samples);
        assert_eq!(back.header.config, cfg);
        assert_eq!(back.header.count, 3);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let mut buf = Vec::new();
        write_to(&mut buf, &small(), &[]).unwrap();
        assert!(read_from(&buf[..]).unwrap().samples.is_empty());
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let cfg = small();
        let mut buf = Vec::new();
        write_to(&mut buf, &cfg, &generate_dataset(&cfg, 0, 2)).unwrap();
        buf.truncate(buf.len() - 10);
        match read_from(&buf[..]) {
            Err(DatasetError::Truncated { expected, actual }) => {
                assert_eq!(expected, 2 * 4 * 32 * 16);
                assert_eq!(actual, expected - 10);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let cfg = small();
        let mut buf = Vec::new();
        write_to(&mut buf, &cfg, &[]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let bad_magic = text.replacen("CSTR-DATASET", "XSTR-DATASET", 1);
        assert!(matches!(
            read_from(bad_magic.as_bytes()),
            Err(DatasetError::BadMagic(_))
        ));
        let bad_version = text.replacen("CSTR-DATASET 1", "CSTR-DATASET 2", 1);
        assert!(matches!(
            read_from(bad_version.as_bytes()),
            Err(DatasetError::BadVersion(_))
        ));
        let bad_cfg = text.replacen("noise = 24.0", "noise = 25.0", 1);
        assert!(matches!(
            read_from(bad_cfg.as_bytes()),
            Err(DatasetError::DigestMismatch { .. })
        ));
    }
}
