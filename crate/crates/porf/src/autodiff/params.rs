//! Flat trainable parameter storage with named segments, plus the binary
//! checkpoint format (versioned header + 64-bit little-endian floats).

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"PORFPV01";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat array of trainable scalars with a named segment table. Segment
/// ranges are disjoint and cover the array in order of registration.
#[derive(Debug, Clone, Default)]
pub struct ParamVector {
    data: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new() -> Self {
        ParamVector::default()
    }

    /// Append a zero-initialized segment, returning its offset.
    pub fn add_segment(&mut self, name: &str, len: usize) -> usize {
        assert!(
            self.segment(name).is_none(),
            "duplicate segment name {name}"
        );
        let offset = self.data.len();
        self.data.resize(offset + len, 0.0);
        self.segments.push(Segment {
            name: name.to_string(),
            offset,
            len,
        });
        offset
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_slice(&self, name: &str) -> Option<&[f64]> {
        self.segment(name)
            .map(|s| &self.data[s.offset..s.offset + s.len])
    }

    pub fn segment_slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let seg = self.segment(name)?.clone();
        Some(&mut self.data[seg.offset..seg.offset + seg.len])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.data.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for seg in &self.segments {
            buf.extend_from_slice(&(seg.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(seg.name.as_bytes());
            buf.extend_from_slice(&(seg.offset as u64).to_le_bytes());
            buf.extend_from_slice(&(seg.len as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > bytes.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: "truncated checkpoint".to_string(),
                });
            }
            let s = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        if take(&mut cur, 8)? != MAGIC {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: "bad checkpoint magic/version".to_string(),
            });
        }
        let n_segs = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let mut segments = Vec::with_capacity(n_segs);
        for _ in 0..n_segs {
            let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut cur, name_len)?.to_vec()).map_err(|_| {
                Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: "segment name is not utf-8".to_string(),
                }
            })?;
            let offset = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
            let len = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
            segments.push(Segment { name, offset, len });
        }
        let total = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
        let mut data = Vec::with_capacity(total);
        for _ in 0..total {
            data.push(f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()));
        }
        // Segment table must tile the array.
        let mut expect = 0usize;
        for seg in &segments {
            if seg.offset != expect {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: format!("segment {} does not tile the parameter array", seg.name),
                });
            }
            expect += seg.len;
        }
        if expect != data.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: "segments do not cover the parameter array".to_string(),
            });
        }
        Ok(ParamVector { data, segments })
    }
}
