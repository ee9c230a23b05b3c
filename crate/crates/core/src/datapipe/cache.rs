//! Streamable activation cache.
//!
//! Little-endian layout:
//!
//! ```text
//! "BVE1" | u32 version | u32 T | u32 H | u32 C | u8 schema | u8[3] reserved | u64 count
//! then per record: T*H*C f32 (token, hidden, channel order) followed by the label block
//! (two u32 for span labels, one u32 for class labels)
//! ```
//!
//! A sibling `<name>.manifest.json` carries the [`CacheManifest`].

use std::fs::{self, File};
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, DataError, Result};
use crate::heads::LayerStack;

pub const CACHE_MAGIC: &[u8; 4] = b"BVE1";
pub const CACHE_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSchema {
    Span,
    Class,
}

impl LabelSchema {
    pub fn tag(self) -> u8 {
        match self {
            Self::Span => 0,
            Self::Class => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Span),
            1 => Some(Self::Class),
            _ => None,
        }
    }

    /// Bytes of the label block following every record.
    pub fn label_bytes(self) -> u64 {
        match self {
            Self::Span => 8,
            Self::Class => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Span { start: u32, end: u32 },
    Class(u32),
}

impl Label {
    pub fn schema(&self) -> LabelSchema {
        match self {
            Self::Span { .. } => LabelSchema::Span,
            Self::Class(_) => LabelSchema::Class,
        }
    }
}

/// Identifies the window a record was produced from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub example_id: String,
    pub window_index: usize,
}

impl RecordKey {
    pub fn new(example_id: impl Into<String>, window_index: usize) -> Self {
        Self {
            example_id: example_id.into(),
            window_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowingMeta {
    pub max_len: usize,
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub version: u32,
    pub tokens: usize,
    pub hidden: usize,
    pub channels: usize,
    pub dtype: String,
    pub count: usize,
    pub offsets: Vec<u64>,
    pub split: String,
    pub label_schema: LabelSchema,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub windowing: Option<WindowingMeta>,
    #[serde(default)]
    pub keys: Vec<RecordKey>,
}

impl CacheManifest {
    pub fn new(tokens: usize, hidden: usize, channels: usize, label_schema: LabelSchema) -> Self {
        Self {
            version: CACHE_VERSION,
            tokens,
            hidden,
            channels,
            dtype: "f32".into(),
            count: 0,
            offsets: Vec::new(),
            split: "train".into(),
            label_schema,
            seed: None,
            source: String::new(),
            windowing: None,
            keys: Vec::new(),
        }
    }

    pub fn with_split(mut self, split: impl Into<String>) -> Self {
        self.split = split.into();
        self
    }

    pub fn with_source(mut self, source: impl Into<String>, seed: Option<u64>) -> Self {
        self.source = source.into();
        self.seed = seed;
        self
    }

    pub fn with_windowing(mut self, max_len: usize, overlap: usize) -> Self {
        self.windowing = Some(WindowingMeta { max_len, overlap });
        self
    }

    fn floats_per_record(&self) -> u64 {
        (self.tokens * self.hidden * self.channels) as u64
    }

    pub fn record_bytes(&self) -> u64 {
        self.floats_per_record() * 4 + self.label_schema.label_bytes()
    }

    pub fn offset_of(&self, index: usize) -> u64 {
        HEADER_LEN + index as u64 * self.record_bytes()
    }

    /// Total file size implied by the header fields.
    pub fn file_bytes(&self) -> u64 {
        self.offset_of(self.count)
    }
}

/// `dir/name.bve` -> `dir/name.manifest.json`.
pub fn manifest_path(cache: &Path) -> PathBuf {
    let stem = cache
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    cache.with_file_name(format!("{stem}.manifest.json"))
}

fn header_bytes(m: &CacheManifest, count: u64) -> [u8; HEADER_LEN as usize] {
    let mut h = [0u8; HEADER_LEN as usize];
    h[0..4].copy_from_slice(CACHE_MAGIC);
    h[4..8].copy_from_slice(&m.version.to_le_bytes());
    h[8..12].copy_from_slice(&(m.tokens as u32).to_le_bytes());
    h[12..16].copy_from_slice(&(m.hidden as u32).to_le_bytes());
    h[16..20].copy_from_slice(&(m.channels as u32).to_le_bytes());
    h[20] = m.label_schema.tag();
    h[24..32].copy_from_slice(&count.to_le_bytes());
    h
}

/// Appends records to a cache file; [`CacheWriter::finish`] patches the
/// header count and writes the manifest.
pub struct CacheWriter {
    path: PathBuf,
    out: BufWriter<File>,
    manifest: CacheManifest,
    buf: Vec<u8>,
}

impl CacheWriter {
    pub fn create(path: &Path, template: CacheManifest) -> Result<Self> {
        if template.tokens == 0 || template.hidden == 0 || template.channels == 0 {
            return Err(DataError::Config(format!(
                "cache dims must be positive, got ({}, {}, {})",
                template.tokens, template.hidden, template.channels
            )));
        }
        let mut manifest = template;
        manifest.version = CACHE_VERSION;
        manifest.dtype = "f32".into();
        manifest.count = 0;
        manifest.offsets.clear();
        manifest.keys.clear();
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        out.write_all(&header_bytes(&manifest, 0))
            .map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out,
            manifest,
            buf: Vec::new(),
        })
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn push(&mut self, stack: &LayerStack, label: Label, key: RecordKey) -> Result<()> {
        let m = &self.manifest;
        let dims = (stack.tokens(), stack.hidden(), stack.channels());
        let offset = m.offset_of(m.count);
        if dims != (m.tokens, m.hidden, m.channels) {
            return Err(DataError::Format {
                path: self.path.clone(),
                offset,
                message: format!(
                    "record {} has dims {dims:?}, cache expects ({}, {}, {})",
                    m.count, m.tokens, m.hidden, m.channels
                ),
            });
        }
        if label.schema() != m.label_schema {
            return Err(DataError::Format {
                path: self.path.clone(),
                offset,
                message: format!(
                    "record {} label {label:?} does not match schema {:?}",
                    m.count, m.label_schema
                ),
            });
        }
        self.buf.clear();
        for v in stack.tensor().data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        match label {
            Label::Span { start, end } => {
                self.buf.extend_from_slice(&start.to_le_bytes());
                self.buf.extend_from_slice(&end.to_le_bytes());
            }
            Label::Class(c) => self.buf.extend_from_slice(&c.to_le_bytes()),
        }
        self.out.write_all(&self.buf).map_err(io_err(&self.path))?;
        let m = &mut self.manifest;
        m.offsets.push(offset);
        m.keys.push(key);
        m.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<CacheManifest> {
        let path = self.path;
        let manifest = self.manifest;
        let mut file = self
            .out
            .into_inner()
            .map_err(|e| io_err(&path)(e.into_error()))?;
        file.seek(SeekFrom::Start(0)).map_err(io_err(&path))?;
        file.write_all(&header_bytes(&manifest, manifest.count as u64))
            .map_err(io_err(&path))?;
        file.sync_all().map_err(io_err(&path))?;
        let mpath = manifest_path(&path);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest always serializes");
        fs::write(&mpath, json).map_err(io_err(&mpath))?;
        Ok(manifest)
    }
}

/// Writes every record to `path` and returns the resulting manifest.
pub fn write_cache<I>(records: I, path: &Path, template: CacheManifest) -> Result<CacheManifest>
where
    I: IntoIterator<Item = (LayerStack, Label, RecordKey)>,
{
    let mut w = CacheWriter::create(path, template)?;
    for (stack, label, key) in records {
        w.push(&stack, label, key)?;
    }
    w.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub stack: LayerStack,
    pub label: Label,
}

/// Random-access reader. `&self` reads use positioned I/O, so one reader
/// can serve many threads.
#[derive(Debug)]
pub struct CacheReader {
    path: PathBuf,
    file: File,
    manifest: CacheManifest,
}

pub fn read_cache(path: &Path) -> Result<CacheReader> {
    CacheReader::open(path)
}

impl CacheReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        let len = file.metadata().map_err(io_err(path))?.len();
        let fmt = |offset: u64, message: String| DataError::Format {
            path: path.to_path_buf(),
            offset,
            message,
        };
        if len < HEADER_LEN {
            return Err(fmt(
                len,
                format!("file is {len} bytes, shorter than the {HEADER_LEN}-byte header"),
            ));
        }
        let mut h = [0u8; HEADER_LEN as usize];
        file.read_exact_at(&mut h, 0).map_err(io_err(path))?;
        if &h[0..4] != CACHE_MAGIC {
            return Err(fmt(0, format!("bad magic {:?}", &h[0..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CACHE_VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let (t, hd, c) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        for (off, v) in [(8, t), (12, hd), (16, c)] {
            if v == 0 {
                return Err(fmt(off, "zero dimension".into()));
            }
        }
        let schema = LabelSchema::from_tag(h[20])
            .ok_or_else(|| fmt(20, format!("unknown label schema {}", h[20])))?;
        if h[21..24] != [0, 0, 0] {
            return Err(fmt(21, "reserved bytes are not zero".into()));
        }
        let count = u64::from_le_bytes(h[24..32].try_into().unwrap()) as usize;

        let mut derived = CacheManifest::new(t, hd, c, schema);
        derived.count = count;
        derived.offsets = (0..count).map(|i| derived.offset_of(i)).collect();

        let expected = derived.file_bytes();
        if len < expected {
            let rb = derived.record_bytes();
            let k = (len - HEADER_LEN) / rb;
            return Err(fmt(
                derived.offset_of(k as usize),
                format!("truncated: record {k} of {count} incomplete, file ends at byte {len}"),
            ));
        }
        if len > expected {
            return Err(fmt(
                expected,
                format!("{} trailing bytes after {count} records", len - expected),
            ));
        }

        let mpath = manifest_path(path);
        let manifest = match fs::read_to_string(&mpath) {
            Ok(text) => {
                let m: CacheManifest =
                    serde_json::from_str(&text).map_err(|e| DataError::Json {
                        path: mpath.clone(),
                        message: e.to_string(),
                    })?;
                let same = (m.tokens, m.hidden, m.channels, m.count, m.label_schema)
                    == (t, hd, c, count, schema)
                    && m.offsets == derived.offsets
                    && (m.keys.is_empty() || m.keys.len() == count);
                if !same {
                    return Err(DataError::Json {
                        path: mpath,
                        message: "manifest disagrees with the cache header".into(),
                    });
                }
                m
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => derived,
            Err(e) => return Err(io_err(&mpath)(e)),
        };
        Ok(Self {
            path: path.to_path_buf(),
            file,
            manifest,
        })
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn key(&self, index: usize) -> Option<&RecordKey> {
        self.manifest.keys.get(index)
    }

    pub fn read(&self, index: usize) -> Result<Record> {
        let m = &self.manifest;
        if index >= m.count {
            return Err(DataError::Config(format!(
                "record {index} out of range ({} records)",
                m.count
            )));
        }
        let mut bytes = vec![0u8; m.record_bytes() as usize];
        self.file
            .read_exact_at(&mut bytes, m.offsets[index])
            .map_err(io_err(&self.path))?;
        let n = m.floats_per_record() as usize;
        let data = bytes[..n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let lab = &bytes[n * 4..];
        let u = |o: usize| u32::from_le_bytes(lab[o..o + 4].try_into().unwrap());
        let label = match m.label_schema {
            LabelSchema::Span => Label::Span {
                start: u(0),
                end: u(4),
            },
            LabelSchema::Class => Label::Class(u(0)),
        };
        let stack = LayerStack::from_data(m.tokens, m.hidden, m.channels, data)?;
        Ok(Record { stack, label })
    }
}
