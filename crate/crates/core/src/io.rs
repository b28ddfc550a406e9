//! Binary tensor records, `.ten` files and the small image formats used by the
//! command line.
//!
//! A record is `u16` name length, UTF-8 name, `u8` dtype, `u8` rank, `u32`
//! dims, then the little-endian payload. Checkpoints are a header followed by
//! records; a `.ten` file is exactly one record.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

/// Cursor over an in-memory file that reports byte offsets in its errors.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// A decoded record. Values are widened to `f64`, which is exact for both
/// stored dtypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Byte offset where the record starts.
    pub offset: u64,
}

impl Record {
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_vec(&self.shape, self.values.iter().map(|&v| T::lit(v)).collect())
    }
}

pub fn write_record<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    let nb = name.as_bytes();
    let len = u16::try_from(nb.len()).map_err(|_| Error::Input(format!("tensor name too long: {} bytes", nb.len())))?;
    let rank = u8::try_from(t.ndim()).map_err(|_| Error::Input(format!("rank {} too large", t.ndim())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(nb);
    out.push(T::DTYPE as u8);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Input(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn read_record(r: &mut ByteReader<'_>) -> Result<Record> {
    let offset = r.offset();
    let len = r.u16("name length")? as usize;
    let name_at = r.offset();
    let name = std::str::from_utf8(r.take(len, "tensor name")?)
        .map_err(|_| Error::format(name_at, "tensor name is not UTF-8"))?
        .to_string();
    let code_at = r.offset();
    let code = r.u8("dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::format(code_at, format!("unknown dtype code {code}")))?;
    let rank = r.u8("rank")? as usize;
    if rank == 0 {
        return Err(Error::format(code_at + 1, format!("tensor {name} has rank 0")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let at = r.offset();
        let d = r.u32("dimension")? as usize;
        if d == 0 {
            return Err(Error::format(at, format!("tensor {name} has a zero dimension")));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::format(at, format!("tensor {name} is too large")))?;
        shape.push(d);
    }
    let size = dtype.size();
    let bytes = numel
        .checked_mul(size)
        .ok_or_else(|| Error::format(r.offset(), format!("tensor {name} is too large")))?;
    let payload = r.take(bytes, "tensor payload")?;
    let values = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
        DType::F64 => payload.chunks_exact(8).map(f64::read_le).collect(),
    };
    Ok(Record {
        name,
        dtype,
        shape,
        values,
        offset,
    })
}

/// Writes a single-record `.ten` file.
pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, name: &str, t: &Tensor<T>) -> Result<()> {
    let mut out = Vec::new();
    write_record(&mut out, name, t)?;
    fs::write(path, out)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Record> {
    let buf = fs::read(path)?;
    let mut r = ByteReader::new(&buf);
    let rec = read_record(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(rec)
}

fn skip_ws_and_comments(r: &mut ByteReader<'_>) {
    while r.pos < r.buf.len() {
        match r.buf[r.pos] {
            b'#' => {
                while r.pos < r.buf.len() && r.buf[r.pos] != b'\n' {
                    r.pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => r.pos += 1,
            _ => break,
        }
    }
}

fn header_number(r: &mut ByteReader<'_>, what: &str) -> Result<usize> {
    skip_ws_and_comments(r);
    let start = r.pos;
    while r.pos < r.buf.len() && r.buf[r.pos].is_ascii_digit() {
        r.pos += 1;
    }
    std::str::from_utf8(&r.buf[start..r.pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(start as u64, format!("expected {what}")))
}

/// Decodes a binary PPM (P6) into a `[3, H, W]` tensor scaled to `[-1, 1]`.
pub fn decode_ppm<T: Scalar>(buf: &[u8]) -> Result<Tensor<T>> {
    let mut r = ByteReader::new(buf);
    if r.take(2, "magic")? != b"P6" {
        return Err(Error::format(0, "not a binary PPM (P6) file"));
    }
    let w = header_number(&mut r, "width")?;
    let h = header_number(&mut r, "height")?;
    let maxval_at = r.offset();
    let maxval = header_number(&mut r, "maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::format(3, "image has a zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(maxval_at, format!("bad maxval {maxval}")));
    }
    r.u8("header terminator")?;
    let wide = maxval > 255;
    let bytes = r.take(w * h * 3 * if wide { 2 } else { 1 }, "pixel data")?;
    let sample = |i: usize| -> f64 {
        if wide {
            u16::from_be_bytes([bytes[2 * i], bytes[2 * i + 1]]) as f64
        } else {
            bytes[i] as f64
        }
    };
    let mut data = vec![T::zero(); 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = T::lit(2.0 * sample(3 * p + c) / maxval as f64 - 1.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn read_ppm<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_ppm(&fs::read(path)?)
}

/// Encodes values in `[0, 1]` as a 16-bit binary PGM (P5). Values outside
/// the range are clamped.
pub fn encode_pgm16(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::Input(format!(
            "{} values for a {height}x{width} image",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

/// Writes a row-major matrix as headerless CSV.
pub fn write_matrix_csv(path: impl AsRef<Path>, values: &[f64], width: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in values.chunks(width.max(1)) {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Input(format!("csv: {other:?}")),
    }
}
