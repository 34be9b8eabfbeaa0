//! Gallery / probe descriptor files.
//!
//! ```text
//! ESA-REID-DESCRIPTORS v1\n
//! n_regions = <N>\n
//! c_new = <C>\n
//! count = <M>\n
//! end\n
//! M records, each:
//!   u32 LE   byte length L of the image id
//!   L bytes  image id, UTF-8
//!   i64 LE   identity label
//!   (N−1)·C  f32 LE  region features, region 1 first
//!   C        f32 LE  unconfident feature
//!   N        f32 LE  scores S_1 … S_{N−1}, then S_un
//! ```

use std::path::Path;

use crate::align::PersonDescriptor;
use crate::io::{header_pairs, push_f32s, read_file, split_header, write_file, write_header, Reader};
use crate::{Error, Result};

const MAGIC: &str = "ESA-REID-DESCRIPTORS v1";
const KIND: &str = "descriptor";

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorRecord {
    pub image_id: String,
    pub identity: i64,
    pub descriptor: PersonDescriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub n_regions: usize,
    pub feature_dim: usize,
    pub records: Vec<DescriptorRecord>,
}

impl DescriptorSet {
    pub fn new(n_regions: usize, feature_dim: usize, records: Vec<DescriptorRecord>) -> Result<Self> {
        for r in &records {
            let d = &r.descriptor;
            if d.n_regions() != n_regions {
                return Err(Error::ShapeMismatch {
                    what: "descriptor region count",
                    expected: n_regions,
                    found: d.n_regions(),
                });
            }
            if d.feature_dim() != feature_dim
                || d.region_features.iter().any(|f| f.len() != feature_dim)
            {
                return Err(Error::ShapeMismatch {
                    what: "descriptor feature length",
                    expected: feature_dim,
                    found: d.feature_dim(),
                });
            }
        }
        Ok(Self {
            n_regions,
            feature_dim,
            records,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_header(
            &mut buf,
            MAGIC,
            &[
                format!("n_regions = {}", self.n_regions),
                format!("c_new = {}", self.feature_dim),
                format!("count = {}", self.records.len()),
            ],
        );
        for r in &self.records {
            buf.extend_from_slice(&(r.image_id.len() as u32).to_le_bytes());
            buf.extend_from_slice(r.image_id.as_bytes());
            buf.extend_from_slice(&r.identity.to_le_bytes());
            for f in &r.descriptor.region_features {
                push_f32s(&mut buf, f);
            }
            push_f32s(&mut buf, &r.descriptor.unconfident_feature);
            push_f32s(&mut buf, &r.descriptor.visibility);
            push_f32s(&mut buf, &[r.descriptor.unconfident_score]);
        }
        buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let (lines, payload) = split_header(bytes, MAGIC, KIND, path)?;
        let pairs = header_pairs(&lines, KIND, path)?;
        let field = |key: &str| -> Result<usize> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| Error::Format {
                    kind: KIND,
                    path: path.to_path_buf(),
                    reason: format!("missing or invalid `{key}`"),
                })
        };
        let (n_regions, dim, count) = (field("n_regions")?, field("c_new")?, field("count")?);
        if n_regions < 2 {
            return Err(Error::Format {
                kind: KIND,
                path: path.to_path_buf(),
                reason: "n_regions must be at least 2".into(),
            });
        }
        let mut reader = Reader::new(payload, KIND, path);
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let len = reader.u32()? as usize;
            let image_id = std::str::from_utf8(reader.bytes(len)?)
                .map_err(|_| Error::Format {
                    kind: KIND,
                    path: path.to_path_buf(),
                    reason: "image id is not UTF-8".into(),
                })?
                .to_string();
            let identity = reader.i64()?;
            let region_features = (0..n_regions - 1)
                .map(|_| reader.f32s(dim))
                .collect::<Result<Vec<_>>>()?;
            let unconfident_feature = reader.f32s(dim)?;
            let mut scores = reader.f32s(n_regions)?;
            let unconfident_score = scores.pop().expect("n_regions ≥ 2");
            records.push(DescriptorRecord {
                image_id,
                identity,
                descriptor: PersonDescriptor {
                    region_features,
                    visibility: scores,
                    unconfident_feature,
                    unconfident_score,
                },
            });
        }
        reader.finish()?;
        Ok(Self {
            n_regions,
            feature_dim: dim,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }

    /// The same set with every value rounded to `f32`, i.e. what a
    /// write/read cycle yields.
    pub fn quantized(&self) -> Self {
        let q = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
        Self {
            n_regions: self.n_regions,
            feature_dim: self.feature_dim,
            records: self
                .records
                .iter()
                .map(|r| DescriptorRecord {
                    image_id: r.image_id.clone(),
                    identity: r.identity,
                    descriptor: PersonDescriptor {
                        region_features: r.descriptor.region_features.iter().map(|f| q(f)).collect(),
                        visibility: q(&r.descriptor.visibility),
                        unconfident_feature: q(&r.descriptor.unconfident_feature),
                        unconfident_score: r.descriptor.unconfident_score as f32 as f64,
                    },
                })
                .collect(),
        }
    }
}
