use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::Float;

/// Element type of every matrix: `f64` for oracles and tests, `f32` for
/// throughput benchmarks.
pub trait Real: Float + Sum + Default + Debug + Display + LowerExp + Send + Sync + 'static {
    const NAME: &'static str;
    const BYTES: usize;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Decodes one value; `bytes` must hold exactly [`Real::BYTES`] bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(bytes);
        f64::from_le_bytes(buf)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(bytes);
        f32::from_le_bytes(buf)
    }
}
