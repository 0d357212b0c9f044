//! Little-endian binary containers for checkpoints, dense deltas, masks,
//! sparse vectors and corpora.
//!
//! Every file starts with a four-byte magic and a `u32` format version.
//! Loaders validate the whole payload before returning, so a failed load
//! never yields a partial object. Writes go to a temporary file in the
//! destination directory and are renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use deftx_core::deft::{BinaryMask, DeltaSet, MaskTensor, Provenance, SparseTensor, SparseVector, VectorKind};
use deftx_core::model::{ParameterSet, TensorClass};
use deftx_core::synthdata::Corpus;
use deftx_core::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFTX";
pub const DELTA_MAGIC: &[u8; 4] = b"DFTD";
pub const SPARSE_MAGIC: &[u8; 4] = b"DFTS";
pub const MASK_MAGIC: &[u8; 4] = b"DFTM";
pub const CORPUS_MAGIC: &[u8; 4] = b"DFTC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("validation error in tensor {tensor}: {message}")]
    Validation { tensor: String, message: String },
}

pub type StoreResult<T> = Result<T, StoreError>;

fn format_err<T>(offset: usize, message: impl Into<String>) -> StoreResult<T> {
    Err(StoreError::Format {
        offset,
        message: message.into(),
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> StoreResult<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return format_err(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            );
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> StoreResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> StoreResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> StoreResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> StoreResult<usize> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v).or_else(|_| format_err(at, format!("value {v} does not fit in usize")))
    }

    fn f64(&mut self) -> StoreResult<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    /// Count-prefixed element runs are checked against the remaining bytes
    /// before allocating.
    fn check_room(&self, count: usize, elem: usize) -> StoreResult<()> {
        let left = self.buf.len() - self.pos;
        if count.checked_mul(elem).is_none_or(|n| n > left) {
            return format_err(self.pos, format!("truncated: {count} elements of {elem} bytes announced, {left} bytes left"));
        }
        Ok(())
    }

    fn name(&mut self) -> StoreResult<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).or_else(|_| format_err(at, "tensor name is not UTF-8"))
    }

    fn shape(&mut self) -> StoreResult<Vec<usize>> {
        let rank = self.u32()? as usize;
        self.check_room(rank, 8)?;
        let at = self.pos;
        let shape = (0..rank).map(|_| self.usize()).collect::<StoreResult<Vec<_>>>()?;
        if shape.is_empty() || shape.contains(&0) {
            return format_err(at, format!("invalid shape {shape:?}"));
        }
        if shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e)).is_none() {
            return format_err(at, format!("shape {shape:?} overflows"));
        }
        Ok(shape)
    }

    fn header(&mut self, magic: &[u8; 4]) -> StoreResult<()> {
        let got = self.take(4)?;
        if got != magic {
            return format_err(0, format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return format_err(4, format!("unsupported format version {version}"));
        }
        Ok(())
    }

    fn finish(&self) -> StoreResult<()> {
        if self.pos != self.buf.len() {
            return format_err(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn header(&mut self, magic: &[u8; 4]) {
        self.0.extend_from_slice(magic);
        self.u32(FORMAT_VERSION);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn shape(&mut self, shape: &[usize]) {
        self.u32(shape.len() as u32);
        for &e in shape {
            self.u64(e as u64);
        }
    }
}

fn encode_params(magic: &[u8; 4], params: &ParameterSet, spec_digest: u64) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(magic);
    w.u64(spec_digest);
    w.u32(params.len() as u32);
    for e in params.iter() {
        w.name(&e.name);
        w.u8(e.class.tag());
        w.shape(e.tensor.shape());
        for &v in e.tensor.data() {
            w.f64(v);
        }
    }
    w.0
}

fn decode_params(magic: &[u8; 4], bytes: &[u8]) -> StoreResult<(ParameterSet, u64)> {
    let mut r = Reader::new(bytes);
    r.header(magic)?;
    let digest = r.u64()?;
    let n = r.u32()? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..n {
        let name = r.name()?;
        let at = r.pos;
        let class = TensorClass::from_tag(r.u8()?).map_or_else(|| format_err(at, "unknown tensor class tag"), Ok)?;
        let shape = r.shape()?;
        let len: usize = shape.iter().product();
        r.check_room(len, 8)?;
        let data = (0..len).map(|_| r.f64()).collect::<StoreResult<Vec<_>>>()?;
        let tensor = Tensor::from_vec(&shape, data).map_err(|e| StoreError::Validation {
            tensor: name.clone(),
            message: e.to_string(),
        })?;
        params.push(name.clone(), class, tensor).map_err(|e| StoreError::Validation {
            tensor: name,
            message: e.to_string(),
        })?;
    }
    r.finish()?;
    Ok((params, digest))
}

pub fn encode_checkpoint(params: &ParameterSet, spec_digest: u64) -> Vec<u8> {
    encode_params(CHECKPOINT_MAGIC, params, spec_digest)
}

/// Parameters and the model-spec digest they were saved with.
pub fn decode_checkpoint(bytes: &[u8]) -> StoreResult<(ParameterSet, u64)> {
    decode_params(CHECKPOINT_MAGIC, bytes)
}

pub fn encode_delta(delta: &DeltaSet, spec_digest: u64) -> Vec<u8> {
    encode_params(DELTA_MAGIC, delta.params(), spec_digest)
}

pub fn decode_delta(bytes: &[u8]) -> StoreResult<(DeltaSet, u64)> {
    let (p, d) = decode_params(DELTA_MAGIC, bytes)?;
    Ok((DeltaSet(p), d))
}

fn check_indices(r: &Reader<'_>, name: &str, indices: &[usize], len: usize) -> StoreResult<()> {
    let _ = r;
    if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
        return Err(StoreError::Validation {
            tensor: name.to_string(),
            message: format!("indices not strictly increasing ({} then {})", w[0], w[1]),
        });
    }
    if let Some(&last) = indices.last() {
        if last >= len {
            return Err(StoreError::Validation {
                tensor: name.to_string(),
                message: format!("index {last} out of range for {len} values"),
            });
        }
    }
    Ok(())
}

pub fn encode_sparse(v: &SparseVector) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(SPARSE_MAGIC);
    let p = &v.provenance;
    w.u8(p.kind.tag());
    w.u64(v.k() as u64);
    w.u64(p.config_digest);
    w.u64(p.spec_digest);
    w.u64(p.base_digest);
    w.u64(p.init_digest);
    w.u8(p.parent.is_some() as u8);
    w.u64(p.parent.unwrap_or(0));
    w.u32(v.tensors().len() as u32);
    for t in v.tensors() {
        w.name(&t.name);
        w.shape(&t.shape);
        w.u64(t.indices.len() as u64);
        for &i in &t.indices {
            w.u64(i as u64);
        }
        for &x in &t.values {
            w.f64(x);
        }
    }
    w.0
}

pub fn decode_sparse(bytes: &[u8]) -> StoreResult<SparseVector> {
    let mut r = Reader::new(bytes);
    r.header(SPARSE_MAGIC)?;
    let at = r.pos;
    let kind = VectorKind::from_tag(r.u8()?).map_or_else(|| format_err(at, "unknown vector kind"), Ok)?;
    let k = r.usize()?;
    let config_digest = r.u64()?;
    let spec_digest = r.u64()?;
    let base_digest = r.u64()?;
    let init_digest = r.u64()?;
    let at = r.pos;
    let has_parent = r.u8()?;
    let parent_value = r.u64()?;
    let parent = match has_parent {
        0 => None,
        1 => Some(parent_value),
        _ => return format_err(at, "parent flag must be 0 or 1"),
    };
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n.min(1024));
    let mut total = 0usize;
    for _ in 0..n {
        let name = r.name()?;
        let shape = r.shape()?;
        let nnz = r.usize()?;
        r.check_room(nnz, 16)?;
        let indices = (0..nnz).map(|_| r.usize()).collect::<StoreResult<Vec<_>>>()?;
        let values = (0..nnz).map(|_| r.f64()).collect::<StoreResult<Vec<_>>>()?;
        check_indices(&r, &name, &indices, shape.iter().product())?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::Validation {
                tensor: name,
                message: format!("non-finite value at index {}", indices[pos]),
            });
        }
        total += nnz;
        tensors.push(SparseTensor {
            name,
            shape,
            indices,
            values,
        });
    }
    r.finish()?;
    if total != k {
        return Err(StoreError::Validation {
            tensor: "*".into(),
            message: format!("header announces k = {k}, tensors hold {total}"),
        });
    }
    let provenance = Provenance {
        kind,
        config_digest,
        spec_digest,
        base_digest,
        init_digest,
        parent,
    };
    SparseVector::new(tensors, provenance).map_err(|e| StoreError::Validation {
        tensor: "*".into(),
        message: e.to_string(),
    })
}

pub fn encode_mask(m: &BinaryMask) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(MASK_MAGIC);
    w.u64(m.k() as u64);
    w.u32(m.tensors().len() as u32);
    for t in m.tensors() {
        w.name(&t.name);
        w.shape(&t.shape);
        w.u64(t.indices.len() as u64);
        for &i in &t.indices {
            w.u64(i as u64);
        }
    }
    w.0
}

pub fn decode_mask(bytes: &[u8]) -> StoreResult<BinaryMask> {
    let mut r = Reader::new(bytes);
    r.header(MASK_MAGIC)?;
    let k = r.usize()?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name = r.name()?;
        let shape = r.shape()?;
        let nnz = r.usize()?;
        r.check_room(nnz, 8)?;
        let indices = (0..nnz).map(|_| r.usize()).collect::<StoreResult<Vec<_>>>()?;
        check_indices(&r, &name, &indices, shape.iter().product())?;
        tensors.push(MaskTensor { name, shape, indices });
    }
    r.finish()?;
    let mask = BinaryMask::new(tensors).map_err(|e| StoreError::Validation {
        tensor: "*".into(),
        message: e.to_string(),
    })?;
    if mask.k() != k {
        return Err(StoreError::Validation {
            tensor: "*".into(),
            message: format!("header announces k = {k}, tensors hold {}", mask.k()),
        });
    }
    Ok(mask)
}

pub fn encode_corpus(c: &Corpus) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(CORPUS_MAGIC);
    w.u32(c.vocab_size as u32);
    w.u32(c.language_id);
    w.u64(c.seed);
    w.u64(c.sentences.len() as u64);
    for s in &c.sentences {
        w.u32(s.len() as u32);
    }
    for s in &c.sentences {
        for &t in s {
            w.u32(t);
        }
    }
    w.0
}

pub fn decode_corpus(bytes: &[u8]) -> StoreResult<Corpus> {
    let mut r = Reader::new(bytes);
    r.header(CORPUS_MAGIC)?;
    let vocab_size = r.u32()? as usize;
    let language_id = r.u32()?;
    let seed = r.u64()?;
    let n = r.usize()?;
    r.check_room(n, 4)?;
    let lengths = (0..n).map(|_| r.u32().map(|l| l as usize)).collect::<StoreResult<Vec<_>>>()?;
    let mut sentences = Vec::with_capacity(n);
    for len in lengths {
        r.check_room(len, 4)?;
        let at = r.pos;
        let s = (0..len).map(|_| r.u32()).collect::<StoreResult<Vec<_>>>()?;
        if let Some(bad) = s.iter().find(|&&t| t as usize >= vocab_size) {
            return format_err(at, format!("token {bad} >= vocab size {vocab_size}"));
        }
        sentences.push(s);
    }
    r.finish()?;
    Ok(Corpus {
        vocab_size,
        language_id,
        seed,
        sentences,
    })
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> StoreResult<()> {
    let io = |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io)?;
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

pub fn read_file(path: &Path) -> StoreResult<Vec<u8>> {
    fs::read(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet, spec_digest: u64) -> StoreResult<()> {
    write_atomic(path, &encode_checkpoint(params, spec_digest))
}

pub fn load_checkpoint(path: &Path) -> StoreResult<(ParameterSet, u64)> {
    decode_checkpoint(&read_file(path)?)
}

pub fn save_delta(path: &Path, delta: &DeltaSet, spec_digest: u64) -> StoreResult<()> {
    write_atomic(path, &encode_delta(delta, spec_digest))
}

pub fn load_delta(path: &Path) -> StoreResult<(DeltaSet, u64)> {
    decode_delta(&read_file(path)?)
}

pub fn save_sparse(path: &Path, v: &SparseVector) -> StoreResult<()> {
    write_atomic(path, &encode_sparse(v))
}

pub fn load_sparse(path: &Path) -> StoreResult<SparseVector> {
    decode_sparse(&read_file(path)?)
}

pub fn save_mask(path: &Path, m: &BinaryMask) -> StoreResult<()> {
    write_atomic(path, &encode_mask(m))
}

pub fn load_mask(path: &Path) -> StoreResult<BinaryMask> {
    decode_mask(&read_file(path)?)
}

pub fn save_corpus(path: &Path, c: &Corpus) -> StoreResult<()> {
    write_atomic(path, &encode_corpus(c))
}

pub fn load_corpus(path: &Path) -> StoreResult<Corpus> {
    decode_corpus(&read_file(path)?)
}

/// Magic of a file on disk, for dispatching between vector kinds.
pub fn sniff(bytes: &[u8]) -> Option<[u8; 4]> {
    bytes.get(..4).map(|m| m.try_into().unwrap())
}
