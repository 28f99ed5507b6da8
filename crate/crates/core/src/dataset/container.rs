//! `SIDS` dataset container.
//!
//! Layout (little-endian): `b"SIDS"`, `u16` version, `u32` header length,
//! JSON header, then `count` records of
//! `[u8 label][u8 circle_intensity][u8 circle_radius][u16 center_row][u16 center_col][S² pixels]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{make_permutation, ClassPartition, GenParams, Permutation, SyntheticImage};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SIDS";
const VERSION: u16 = 1;
const RECORD_PREFIX: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub params: GenParams,
    pub partition: ClassPartition,
    pub permutation_seed: Option<u64>,
    pub count: usize,
    pub image_size: usize,
}

impl DatasetHeader {
    pub fn permutation(&self) -> Option<Permutation> {
        self.permutation_seed.map(|s| make_permutation(self.image_size, s))
    }
}

pub struct DatasetWriter<W: Write> {
    out: W,
    header: DatasetHeader,
    written: usize,
}

impl DatasetWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: DatasetHeader) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), header)
    }
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(mut out: W, header: DatasetHeader) -> Result<Self> {
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        Ok(Self { out, header, written: 0 })
    }

    pub fn write(&mut self, image: &SyntheticImage) -> Result<()> {
        let s = self.header.image_size;
        if image.size != s || image.pixels.len() != s * s {
            return Err(Error::Shape(format!("image of size {} in a dataset of size {s}", image.size)));
        }
        if self.written == self.header.count {
            return Err(Error::Format(format!("header declares {} records", self.header.count)));
        }
        let mut prefix = [0u8; RECORD_PREFIX];
        prefix[0] = image.label as u8;
        prefix[1] = image.circle_intensity;
        prefix[2] = u8::try_from(image.circle_radius)
            .map_err(|_| Error::Format(format!("radius {} does not fit in u8", image.circle_radius)))?;
        prefix[3..5].copy_from_slice(&(image.circle_center.0 as u16).to_le_bytes());
        prefix[5..7].copy_from_slice(&(image.circle_center.1 as u16).to_le_bytes());
        self.out.write_all(&prefix)?;
        self.out.write_all(&image.pixels)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.header.count {
            return Err(Error::Format(format!(
                "wrote {} records but header declares {}",
                self.written, self.header.count
            )));
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

pub struct DatasetReader<R: Read> {
    input: R,
    header: DatasetHeader,
    read: usize,
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_or_truncated(&mut input, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected SIDS")));
        }
        let mut v = [0u8; 2];
        read_exact_or_truncated(&mut input, &mut v, "version")?;
        let version = u16::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let mut len = [0u8; 4];
        read_exact_or_truncated(&mut input, &mut len, "header length")?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        read_exact_or_truncated(&mut input, &mut json, "header")?;
        let header: DatasetHeader = serde_json::from_slice(&json)?;
        Ok(Self { input, header, read: 0 })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn next_record(&mut self) -> Result<SyntheticImage> {
        let s = self.header.image_size;
        let mut prefix = [0u8; RECORD_PREFIX];
        let what = format!("record {}", self.read);
        read_exact_or_truncated(&mut self.input, &mut prefix, &what)?;
        let mut pixels = vec![0u8; s * s];
        read_exact_or_truncated(&mut self.input, &mut pixels, &what)?;
        self.read += 1;
        Ok(SyntheticImage {
            size: s,
            pixels,
            circle_center: (
                u16::from_le_bytes([prefix[3], prefix[4]]) as usize,
                u16::from_le_bytes([prefix[5], prefix[6]]) as usize,
            ),
            circle_radius: prefix[2] as usize,
            circle_intensity: prefix[1],
            noise: Vec::new(),
            label: prefix[0] as usize,
            permuted: self.header.permutation_seed.is_some(),
        })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<SyntheticImage>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read == self.header.count {
            return None;
        }
        let rec = self.next_record();
        if rec.is_err() {
            // stop after the first failure
            self.read = self.header.count;
        }
        Some(rec)
    }
}

pub fn write_dataset<'a>(
    images: impl IntoIterator<Item = &'a SyntheticImage>,
    header: DatasetHeader,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = DatasetWriter::create(path, header)?;
    for img in images {
        w.write(img)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<SyntheticImage>)> {
    let reader = DatasetReader::open(path)?;
    let header = reader.header().clone();
    let images = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, images))
}
