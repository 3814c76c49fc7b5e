//! Dense rank-4 tensors and convolution parameters.
//!
//! A [`Tensor`] is a plain value: a `(batch, channels, height, width)` shape
//! plus a row-major `f64` buffer, with an optional gradient buffer of the
//! same shape. Reverse-mode differentiation is handled by [`graph::Graph`],
//! which records operations and replays them backwards.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub mod graph;
pub mod ops;

pub use graph::{Graph, VarId};

/// Magic string prefixing every binary tensor dump.
pub const DUMP_MAGIC: &[u8; 6] = b"IADMT1";

/// Dimensions of a rank-4 tensor: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Linear index of element `(n, c, y, x)` in row-major order.
    #[inline]
    pub fn idx(self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    /// Elements in one spatial plane.
    pub fn plane(self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor with an optional gradient buffer.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
            grad: None,
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Tensor with elements drawn from `N(0, std^2)`.
    pub fn gaussian(shape: Shape, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..shape.numel()).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.shape.idx(n, c, y, x);
        self.data[i] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gradient buffer filled in by [`Graph::backward`], if any.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub(crate) fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Maximum elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Writes the binary dump: magic, four little-endian u32 dims, then
    /// little-endian f64 values in row-major order.
    pub fn write_dump<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        for dim in [self.shape.n, self.shape.c, self.shape.h, self.shape.w] {
            let dim = u32::try_from(dim).map_err(|_| {
                Error::config(format!("tensor dimension {dim} exceeds the dump format's u32 range"))
            })?;
            w.write_all(&dim.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::config(format!(
                "bad tensor dump magic {:?}, expected {:?}",
                magic, DUMP_MAGIC
            )));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            *d = u32::from_le_bytes(buf) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let mut data = vec![0.0f64; shape.numel()];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_dump(&mut w)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let mut r = BufReader::new(File::open(path)?);
        Tensor::read_dump(&mut r)
    }
}

/// Convolution filter bank plus geometry.
///
/// `weights` has shape (out_channels, in_channels, kernel_h, kernel_w);
/// `bias`, when present, has shape (1, out_channels, 1, 1).
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvParams {
    pub fn new(
        weights: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        let p = ConvParams {
            weights,
            bias,
            stride,
            padding,
            dilation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weights.shape();
        if s.h < 1 || s.w < 1 {
            return Err(Error::config(format!("kernel size {}x{} must be at least 1x1", s.h, s.w)));
        }
        if self.stride < 1 {
            return Err(Error::config("stride must be at least 1"));
        }
        if self.dilation < 1 {
            return Err(Error::config("dilation must be at least 1"));
        }
        if let Some(b) = &self.bias {
            let bs = b.shape();
            if bs != Shape::new(1, s.n, 1, 1) {
                return Err(Error::config(format!(
                    "bias shape {} does not match {} output channels",
                    bs, s.n
                )));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn kernel_h(&self) -> usize {
        self.weights.shape().h
    }

    pub fn kernel_w(&self) -> usize {
        self.weights.shape().w
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    /// Weights drawn from `N(0, std^2)`, bias (when requested) zero.
    #[allow(clippy::too_many_arguments)]
    pub fn gaussian(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        std: f64,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weights = Tensor::gaussian(Shape::new(out_channels, in_channels, kernel_h, kernel_w), std, rng);
        let bias = with_bias.then(|| Tensor::zeros(Shape::new(1, out_channels, 1, 1)));
        ConvParams {
            weights,
            bias,
            stride,
            padding,
            dilation,
        }
    }

    /// 1x1 convolution that maps each channel to itself, zero bias.
    pub fn identity_1x1(channels: usize) -> Self {
        let mut weights = Tensor::zeros(Shape::new(channels, channels, 1, 1));
        for c in 0..channels {
            weights.set(c, c, 0, 0, 1.0);
        }
        ConvParams {
            weights,
            bias: Some(Tensor::zeros(Shape::new(1, channels, 1, 1))),
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}
