//! Binary index file.
//!
//! All integers are little-endian. Strings are a `u32` byte length followed
//! by UTF-8 bytes.
//!
//! ```text
//! magic      4 bytes  "ABIX"
//! version    u8       1
//! params     f64 k1, f64 b
//! doc table  u32 N, then N x (str passage_id, str title, str text, u32 length)
//! postings   u32 T, then T x (str term, u32 n, n x (u32 ordinal, u32 tf))
//! ```
//!
//! Terms are written in byte order and postings in ordinal order, so the same
//! index always produces the same file.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::bm25::{Bm25Index, Bm25Params, Posting};
use super::corpus::Passage;
use super::RetrieverError;

pub const MAGIC: &[u8; 4] = b"ABIX";
pub const FORMAT_VERSION: u8 = 1;

pub fn write_index<W: Write>(index: &Bm25Index, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&[FORMAT_VERSION])?;
    out.write_all(&index.params.k1.to_le_bytes())?;
    out.write_all(&index.params.b.to_le_bytes())?;
    put_u32(&mut out, index.passages.len() as u32)?;
    for (p, &len) in index.passages.iter().zip(&index.doc_lengths) {
        put_str(&mut out, &p.passage_id)?;
        put_str(&mut out, &p.title)?;
        put_str(&mut out, &p.text)?;
        put_u32(&mut out, len)?;
    }
    put_u32(&mut out, index.postings.len() as u32)?;
    for (term, list) in &index.postings {
        put_str(&mut out, term)?;
        put_u32(&mut out, list.len() as u32)?;
        for p in list {
            put_u32(&mut out, p.ordinal)?;
            put_u32(&mut out, p.tf)?;
        }
    }
    out.flush()
}

pub fn read_index<R: Read>(mut input: R) -> Result<Bm25Index, RetrieverError> {
    let mut buf = Vec::new();
    input
        .read_to_end(&mut buf)
        .map_err(|e| RetrieverError::Format(e.to_string()))?;
    let mut r = Reader { buf: &buf, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(RetrieverError::Format(
            "bad magic, not an index file".into(),
        ));
    }
    let version = r.take(1)?[0];
    if version != FORMAT_VERSION {
        return Err(RetrieverError::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let params = Bm25Params {
        k1: r.f64()?,
        b: r.f64()?,
    }
    .validate()
    .map_err(|e| RetrieverError::Format(e.to_string()))?;

    let n = r.u32()? as usize;
    if n == 0 {
        return Err(RetrieverError::Format("index has no passages".into()));
    }
    let mut passages = Vec::with_capacity(n.min(1 << 20));
    let mut doc_lengths = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        passages.push(Passage {
            passage_id: r.string()?,
            title: r.string()?,
            text: r.string()?,
        });
        doc_lengths.push(r.u32()?);
    }

    let terms = r.u32()? as usize;
    let mut postings = BTreeMap::new();
    for _ in 0..terms {
        let term = r.string()?;
        let count = r.u32()? as usize;
        let mut list = Vec::with_capacity(count.min(n));
        for _ in 0..count {
            let ordinal = r.u32()?;
            let tf = r.u32()?;
            if ordinal as usize >= n || list.last().is_some_and(|p: &Posting| p.ordinal >= ordinal)
            {
                return Err(RetrieverError::Format(format!(
                    "corrupt postings for term {term:?}"
                )));
            }
            list.push(Posting { ordinal, tf });
        }
        postings.insert(term, list);
    }
    if r.pos != buf.len() {
        return Err(RetrieverError::Format(
            "trailing bytes after postings".into(),
        ));
    }
    Ok(Bm25Index::from_parts(
        params,
        passages,
        doc_lengths,
        postings,
    ))
}

pub fn save_index(index: &Bm25Index, path: &Path) -> Result<(), RetrieverError> {
    let file = std::fs::File::create(path).map_err(|e| RetrieverError::io(path, e))?;
    write_index(index, std::io::BufWriter::new(file)).map_err(|e| RetrieverError::io(path, e))
}

pub fn load_index(path: &Path) -> Result<Bm25Index, RetrieverError> {
    let file = std::fs::File::open(path).map_err(|e| RetrieverError::io(path, e))?;
    read_index(std::io::BufReader::new(file))
}

fn put_u32<W: Write>(out: &mut W, v: u32) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn put_str<W: Write>(out: &mut W, s: &str) -> std::io::Result<()> {
    put_u32(out, s.len() as u32)?;
    out.write_all(s.as_bytes())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrieverError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| RetrieverError::Format("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, RetrieverError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, RetrieverError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String, RetrieverError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| RetrieverError::Format("invalid UTF-8 string".into()))
    }
}
