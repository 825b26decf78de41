//! Neural and Gaussian reference demappers.
//!
//! Positive LLRs favour bit 0.

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::nn::{Mlp, MlpCache};
use crate::shaping::{label_bit, Constellation};

pub use crate::nn::init_glorot;

/// Fixed factors applied to the channel-parameter inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub sigma_n: f64,
    pub sigma_phi: f64,
}

impl Default for InputScaling {
    fn default() -> Self {
        Self {
            sigma_n: 1.0,
            sigma_phi: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemapperNet {
    pub mlp: Mlp,
    pub parameterized: bool,
    pub scaling: InputScaling,
}

impl DemapperNet {
    pub fn new<R: Rng + ?Sized>(m: usize, hidden: &[usize], parameterized: bool, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::glorot(&Self::widths(m, hidden, parameterized), rng),
            parameterized,
            scaling: InputScaling::default(),
        }
    }

    pub fn zeros(m: usize, hidden: &[usize], parameterized: bool) -> Self {
        Self {
            mlp: Mlp::zeros(&Self::widths(m, hidden, parameterized)),
            parameterized,
            scaling: InputScaling::default(),
        }
    }

    fn widths(m: usize, hidden: &[usize], parameterized: bool) -> Vec<usize> {
        let mut w = vec![if parameterized { 4 } else { 2 }];
        w.extend_from_slice(hidden);
        w.push(m);
        w
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.mlp.output_width()
    }

    fn inputs(&self, xs: &[Complex64], sigma_n: f64, sigma_phi: f64) -> Array2<f64> {
        let width = self.mlp.input_width();
        let sn = sigma_n * self.scaling.sigma_n;
        let sp = sigma_phi * self.scaling.sigma_phi;
        Array2::from_shape_fn((xs.len(), width), |(k, j)| match j {
            0 => xs[k].re,
            1 => xs[k].im,
            2 => sn,
            _ => sp,
        })
    }

    pub fn demap_batch(&self, xs: &[Complex64], sigma_n: f64, sigma_phi: f64) -> Array2<f64> {
        self.mlp.forward(self.inputs(xs, sigma_n, sigma_phi).view())
    }

    pub fn demap_batch_with_cache(
        &self,
        xs: &[Complex64],
        sigma_n: f64,
        sigma_phi: f64,
    ) -> (Array2<f64>, MlpCache) {
        self.mlp.forward_with_cache(self.inputs(xs, sigma_n, sigma_phi))
    }

    /// Parameter gradients and gradients w.r.t. the complex inputs.
    pub fn backward(&self, cache: &MlpCache, grad_llrs: Array2<f64>) -> (Vec<f64>, Vec<Complex64>) {
        let (g, gx) = self.mlp.backward(cache, grad_llrs);
        let gz = gx
            .rows()
            .into_iter()
            .map(|r| Complex64::new(r[0], r[1]))
            .collect();
        (g, gz)
    }
}

pub fn demap(x: Complex64, sigma_n: f64, sigma_phi: f64, net: &DemapperNet) -> Vec<f64> {
    net.demap_batch(&[x], sigma_n, sigma_phi)
        .into_raw_vec_and_offset()
        .0
}

/// LLRs and transmitted bits, both row-major `P x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct LlrBatch {
    llrs: Vec<f64>,
    bits: Vec<u8>,
    m: usize,
}

impl LlrBatch {
    pub fn new(llrs: Vec<f64>, bits: Vec<u8>, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("bits per symbol must be positive".into()));
        }
        if llrs.len() != bits.len() {
            return Err(Error::LengthMismatch {
                op: "LlrBatch::new",
                left: llrs.len(),
                right: bits.len(),
            });
        }
        if !llrs.len().is_multiple_of(m) {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form rows of width {m}",
                llrs.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("bits must be 0 or 1".into()));
        }
        ensure_finite(&llrs, "LlrBatch::new")?;
        Ok(Self { llrs, bits, m })
    }

    /// Bits taken from the labels of the transmitted symbol indices.
    pub fn from_labels(llrs: Vec<f64>, labels: &[usize], m: usize) -> Result<Self> {
        let bits = labels
            .iter()
            .flat_map(|&l| (0..m).map(move |j| label_bit(l, j, m)))
            .collect();
        Self::new(llrs, bits, m)
    }

    pub fn llrs(&self) -> &[f64] {
        &self.llrs
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.m
    }

    pub fn num_symbols(&self) -> usize {
        self.llrs.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.llrs.is_empty()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Exact bitwise LLRs for an AWGN channel with known constellation and priors.
pub fn gaussian_reference_demap(x: Complex64, constellation: &Constellation, sigma_n: f64) -> Vec<f64> {
    let m = constellation.bits_per_symbol;
    let var = sigma_n * sigma_n;
    let metric: Vec<f64> = constellation
        .points
        .iter()
        .zip(&constellation.probs)
        .map(|(c, &p)| {
            if p > 0.0 {
                p.ln() - (x - c).norm_sqr() / var
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    (0..m)
        .map(|j| {
            let zero = log_sum_exp(
                metric
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| label_bit(*i, j, m) == 0)
                    .map(|(_, &v)| v),
            );
            let one = log_sum_exp(
                metric
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| label_bit(*i, j, m) == 1)
                    .map(|(_, &v)| v),
            );
            zero - one
        })
        .collect()
}

/// Clip bound for exported decision-region LLRs.
pub const REGION_CLIP: f64 = 5.0;

/// Rectangle in the complex plane: `[re_min, re_max] x [im_min, im_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBounds {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
}

impl GridBounds {
    pub fn square(half_width: f64) -> Self {
        Self {
            re_min: -half_width,
            re_max: half_width,
            im_min: -half_width,
            im_max: half_width,
        }
    }
}

/// Clipped LLRs of one bit on a `resolution x resolution` grid.
/// Row `r` is the imaginary coordinate, column `c` the real one.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    pub bounds: GridBounds,
    pub resolution: usize,
    pub bit_index: usize,
    pub values: Vec<f64>,
}

impl RegionGrid {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.resolution + col]
    }

    pub fn to_csv(&self) -> String {
        let b = &self.bounds;
        let mut out = format!(
            "re_min={},re_max={},im_min={},im_max={},resolution={},bit={}\n",
            b.re_min, b.re_max, b.im_min, b.im_max, self.resolution, self.bit_index
        );
        for row in self.values.chunks(self.resolution) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

fn grid_axis(min: f64, max: f64, n: usize, i: usize) -> f64 {
    min + (max - min) * i as f64 / (n - 1) as f64
}

/// Demapper output for bit `bit_index` (1-based, MSB first) on a regular grid.
pub fn decision_region_grid(
    net: &DemapperNet,
    bit_index: usize,
    bounds: GridBounds,
    resolution: usize,
    sigma_n: f64,
    sigma_phi: f64,
) -> Result<RegionGrid> {
    let m = net.bits_per_symbol();
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid resolution must be at least 2, got {resolution}"
        )));
    }
    if bit_index == 0 || bit_index > m {
        return Err(Error::InvalidArgument(format!(
            "bit index must lie in [1, {m}], got {bit_index}"
        )));
    }
    if !(bounds.re_max > bounds.re_min && bounds.im_max > bounds.im_min) {
        return Err(Error::InvalidArgument("empty grid bounds".into()));
    }
    let xs: Vec<Complex64> = (0..resolution * resolution)
        .map(|k| {
            let (r, c) = (k / resolution, k % resolution);
            Complex64::new(
                grid_axis(bounds.re_min, bounds.re_max, resolution, c),
                grid_axis(bounds.im_min, bounds.im_max, resolution, r),
            )
        })
        .collect();
    let llrs = net.demap_batch(&xs, sigma_n, sigma_phi);
    let values = llrs
        .column(bit_index - 1)
        .iter()
        .map(|v| v.clamp(-REGION_CLIP, REGION_CLIP))
        .collect();
    Ok(RegionGrid {
        bounds,
        resolution,
        bit_index,
        values,
    })
}
