//! Dense row-major tensors and the TSR1 file format.
//!
//! Values are kept as f64 in memory so that finite-difference gradient checks
//! at eps=1e-3 resolve gradients far below f32 noise; the on-disk format stays
//! `dtype f32` (reads widen losslessly, writes narrow).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor new", format!("dimensions must be positive, got {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(
                "tensor new",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rows of a 2-d tensor (panics on other ranks; internal layers are 2-d).
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a 2-d tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a 2-d tensor");
        self.shape[1]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let w = self.cols();
        self.data[r * w + c] = v;
    }

    // ── linear algebra ──

    /// Standard matrix product a[p×d] · b[d×q].
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        check_2d(self, "matmul lhs")?;
        check_2d(b, "matmul rhs")?;
        if self.cols() != b.rows() {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} vs {:?}", self.shape, b.shape),
            ));
        }
        let (p, d, q) = (self.rows(), self.cols(), b.cols());
        let mut out = vec![0.0; p * q];
        // i-k-j order keeps the inner loop contiguous in both b and out.
        for i in 0..p {
            for k in 0..d {
                let a_ik = self.data[i * d + k];
                if a_ik == 0.0 {
                    continue;
                }
                let brow = &b.data[k * q..(k + 1) * q];
                let orow = &mut out[i * q..(i + 1) * q];
                for j in 0..q {
                    orow[j] += a_ik * brow[j];
                }
            }
        }
        Tensor::new(vec![p, q], out)
    }

    /// a[p×d] · b[q×d]ᵀ, the query-key form.
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Tensor> {
        check_2d(self, "matmul_nt lhs")?;
        check_2d(b, "matmul_nt rhs")?;
        if self.cols() != b.cols() {
            return Err(Error::shape(
                "matmul_nt",
                format!("inner dimensions differ: {:?} vs {:?}ᵀ", self.shape, b.shape),
            ));
        }
        let (p, d, q) = (self.rows(), self.cols(), b.rows());
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            let arow = &self.data[i * d..(i + 1) * d];
            for j in 0..q {
                let brow = &b.data[j * d..(j + 1) * d];
                let mut acc = 0.0;
                for k in 0..d {
                    acc += arow[k] * brow[k];
                }
                out[i * q + j] = acc;
            }
        }
        Tensor::new(vec![p, q], out)
    }

    // ── elementwise ──

    pub fn add(&self, b: &Tensor) -> Result<Tensor> {
        self.zip(b, "add", |x, y| x + y)
    }

    pub fn sub(&self, b: &Tensor) -> Result<Tensor> {
        self.zip(b, "sub", |x, y| x - y)
    }

    pub fn mul(&self, b: &Tensor) -> Result<Tensor> {
        self.zip(b, "mul", |x, y| x * y)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| x * k).collect() }
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    fn zip(&self, b: &Tensor, ctx: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != b.shape {
            return Err(Error::shape(ctx, format!("shapes differ: {:?} vs {:?}", self.shape, b.shape)));
        }
        let data = self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    // ── TSR1 ──

    /// Writes the TSR1 form: `TSR1`, `dtype f32`, `shape d0 d1 ...`, `end`
    /// header lines (LF-terminated), then little-endian f32 payload.
    pub fn write_tsr<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "TSR1\ndtype f32\nshape")?;
        for d in &self.shape {
            write!(w, " {d}")?;
        }
        write!(w, "\nend\n")?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn save_tsr(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_tsr(&mut f).map_err(|e| Error::io(path, e))
    }

    /// Parses a TSR1 stream. Header errors are annotated with their 1-based
    /// line; payload errors with the byte offset where data ran out.
    pub fn read_tsr<R: Read>(r: &mut R, origin: Option<&Path>) -> Result<Tensor> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| match origin {
            Some(p) => Error::io(p, e),
            None => Error::parse(None, 0, format!("read failed: {e}")),
        })?;
        parse_tsr(&bytes, origin)
    }

    pub fn load_tsr(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Tensor::read_tsr(&mut f, Some(path))
    }
}

fn check_2d(t: &Tensor, ctx: &'static str) -> Result<()> {
    if t.shape.len() != 2 {
        return Err(Error::shape("matmul", format!("{ctx} must be 2-d, got {:?}", t.shape)));
    }
    Ok(())
}

fn parse_tsr(bytes: &[u8], origin: Option<&Path>) -> Result<Tensor> {
    let err = |line: usize, msg: String| Error::parse(origin, line, msg);
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let mut next_line = || -> Result<(usize, String)> {
        line_no += 1;
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b'\n' {
            pos += 1;
        }
        if pos == bytes.len() {
            return Err(err(line_no, "unterminated header line (missing line feed)".into()));
        }
        let mut end = pos;
        if end > start && bytes[end - 1] == b'\r' {
            end -= 1; // tolerate CRLF input; writers only emit LF
        }
        pos += 1;
        let text = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| err(line_no, "header line is not valid UTF-8".into()))?;
        Ok((line_no, text.to_string()))
    };

    let (l, magic) = next_line()?;
    if magic != "TSR1" {
        return Err(err(l, format!("bad magic: expected \"TSR1\", got \"{magic}\"")));
    }
    let (l, dtype) = next_line()?;
    if dtype != "dtype f32" {
        return Err(err(l, format!("unsupported dtype line \"{dtype}\" (only \"dtype f32\")")));
    }
    let (l, shape_line) = next_line()?;
    let mut parts = shape_line.split_whitespace();
    if parts.next() != Some("shape") {
        return Err(err(l, format!("expected \"shape d0 d1 ...\", got \"{shape_line}\"")));
    }
    let mut shape = Vec::new();
    for tok in parts {
        let d: usize = tok
            .parse()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| err(l, format!("bad shape dimension \"{tok}\" (positive integer required)")))?;
        shape.push(d);
    }
    if shape.is_empty() {
        return Err(err(l, "shape needs at least one dimension".into()));
    }
    let (l, end_line) = next_line()?;
    if end_line != "end" {
        return Err(err(l, format!("expected \"end\", got \"{end_line}\"")));
    }

    let count: usize = shape.iter().product();
    let payload = &bytes[pos..];
    if payload.len() < count * 4 {
        return Err(err(
            pos + payload.len(),
            format!("truncated payload: shape {shape:?} needs {} bytes, found {}", count * 4, payload.len()),
        ));
    }
    if payload.len() > count * 4 {
        return Err(err(
            pos + count * 4,
            format!("{} trailing bytes after payload", payload.len() - count * 4),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 1.0, 2.0, 5.0]).unwrap();
        assert_eq!(i2.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_inner_product() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[11.0]);
        // same product through the transposed form
        let bt = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul_nt(&bt).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[5, 2]);
        let e = a.matmul(&b).unwrap_err().to_string();
        assert!(e.contains("[3, 4]") && e.contains("[5, 2]"), "{e}");
    }

    #[test]
    fn matmul_associative_within_1e4() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let dims: Vec<usize> = (0..4).map(|_| rng.gen_range(1..=16)).collect();
            let rand_t = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize| {
                Tensor::from_fn(&[r, c], |_| rng.gen_range(-10.0..10.0))
            };
            let a = rand_t(&mut rng, dims[0], dims[1]);
            let b = rand_t(&mut rng, dims[1], dims[2]);
            let c = rand_t(&mut rng, dims[2], dims[3]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!((x - y).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn elementwise_basics() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.mul(&m).unwrap().data(), &[1.0, 0.0, 0.0, 4.0]);
        let v = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v.scale(0.5).data(), &[0.5, 1.0, 1.5]);
        let bad = Tensor::zeros(&[3, 1]);
        assert!(a.add(&bad).is_err());
    }

    #[test]
    fn tsr_round_trip_is_byte_identical() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 5.5, -6.75]).unwrap();
        let mut buf = Vec::new();
        t.write_tsr(&mut buf).unwrap();
        let back = Tensor::read_tsr(&mut buf.as_slice(), None).unwrap();
        let mut buf2 = Vec::new();
        back.write_tsr(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(back, t);
    }

    #[test]
    fn tsr_truncated_payload() {
        let t = Tensor::zeros(&[2, 3]);
        let mut buf = Vec::new();
        t.write_tsr(&mut buf).unwrap();
        buf.truncate(buf.len() - 4); // drop one value
        let e = Tensor::read_tsr(&mut buf.as_slice(), None).unwrap_err().to_string();
        assert!(e.contains("truncated"), "{e}");
    }

    #[test]
    fn tsr_large_payload_size() {
        let t = Tensor::zeros(&[1000, 1000]);
        let mut buf = Vec::new();
        t.write_tsr(&mut buf).unwrap();
        let header_len = "TSR1\ndtype f32\nshape 1000 1000\nend\n".len();
        assert_eq!(buf.len() - header_len, 4_000_000);
    }

    #[test]
    fn tsr_bad_magic_and_dtype() {
        let e = Tensor::read_tsr(&mut &b"TSR2\n"[..], None).unwrap_err().to_string();
        assert!(e.contains("bad magic"), "{e}");
        let e = Tensor::read_tsr(&mut &b"TSR1\ndtype f64\nshape 1\nend\n\0\0\0\0"[..], None)
            .unwrap_err()
            .to_string();
        assert!(e.contains("dtype"), "{e}");
    }

    #[test]
    fn tsr_accepts_crlf_headers() {
        let mut buf = b"TSR1\r\ndtype f32\r\nshape 1\r\nend\r\n".to_vec();
        buf.extend_from_slice(&1.5f32.to_le_bytes());
        let t = Tensor::read_tsr(&mut buf.as_slice(), None).unwrap();
        assert_eq!(t.data(), &[1.5]);
    }
}
