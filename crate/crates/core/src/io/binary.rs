//! Little-endian field encoding shared by the checkpoint and artifact formats.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// Upper bound on any single declared length, to reject garbage headers
/// before allocating.
const MAX_LEN: u64 = 1 << 34;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn shape(&mut self, shape: &[usize]) {
        self.u32(shape.len() as u32);
        shape.iter().for_each(|&d| self.u64(d as u64));
    }

    pub fn config(&mut self, c: &ModelConfig) {
        for v in [
            c.embed_dim,
            c.num_rstb,
            c.stl_per_rstb,
            c.num_heads,
            c.window_size,
            c.mlp_ratio,
            c.upscale,
            c.in_chans,
        ] {
            self.u32(v as u32);
        }
        c.img_mean.iter().for_each(|&m| self.f32(m));
    }

    /// Name, shape, payload byte length, then the float32 payload.
    pub fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.shape(t.shape());
        self.u64(t.numel() as u64 * 4);
        t.data().iter().for_each(|&v| self.f32(v));
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn bool(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("{what}: invalid flag byte {v}"))),
        }
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    pub fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        if v > MAX_LEN {
            return Err(Error::Format(format!("{what}: implausible length {v}")));
        }
        Ok(v as usize)
    }

    pub fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what}: invalid UTF-8")))
    }

    pub fn shape(&mut self, what: &str) -> Result<Vec<usize>> {
        let ndim = self.u32(what)? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("{what}: {ndim} dimensions")));
        }
        (0..ndim).map(|_| self.len(what)).collect()
    }

    pub fn config(&mut self) -> Result<ModelConfig> {
        let mut f = [0usize; 8];
        for v in &mut f {
            *v = self.u32("model config")? as usize;
        }
        let mut img_mean = [0f32; 3];
        for m in &mut img_mean {
            *m = self.f32("model config")?;
        }
        let c = ModelConfig {
            embed_dim: f[0],
            num_rstb: f[1],
            stl_per_rstb: f[2],
            num_heads: f[3],
            window_size: f[4],
            mlp_ratio: f[5],
            upscale: f[6],
            in_chans: f[7],
            img_mean,
        };
        c.validate().map_err(|e| Error::Format(format!("model config: {e}")))?;
        Ok(c)
    }

    pub fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str("tensor name")?;
        let shape = self.shape(&format!("shape of `{name}`"))?;
        let bytes = self.len(&format!("payload size of `{name}`"))?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if numel.and_then(|n| n.checked_mul(4)) != Some(bytes) {
            return Err(Error::Format(format!(
                "payload size mismatch for `{name}`: {bytes} bytes for shape {shape:?}"
            )));
        }
        let raw = self.take(bytes, &format!("payload of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor::new(shape, data)?))
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4], version: u32, kind: &str) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(Error::Format(format!("bad magic {m:?}: not a valid {kind} file")));
        }
        let v = self.u32("format version")?;
        if v != version {
            return Err(Error::Format(format!("unsupported {kind} format version {v}")));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}
