//! Discrete acquisition model: unitary 2D DFT, line-mask projector, zero-fill
//! backprojection and the PSNR quality measure.
//!
//! Conventions fixed here and relied on everywhere else:
//! * the DFT is unitary (1/sqrt(side) per direction), so the inverse equals the
//!   adjoint and Parseval holds exactly;
//! * readout lines are *rows* of k-space (transpose the input to sample columns);
//! * the DC bin sits at grid index (0, 0) and the DC line is row 0.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Spatial-domain signal on a square grid. `channels == 2` encodes a complex
/// image as interleaved (real, imaginary) pairs; `channels == 1` is real.
/// Values are row-major with the channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("image dimensions must be positive"));
        }
        if height != width {
            return Err(Error::dim(format!(
                "image must be square, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 2 {
            return Err(Error::dim(format!("channels must be 1 or 2, got {channels}")));
        }
        if values.len() != height * width * channels {
            return Err(Error::dim(format!(
                "value count {} does not match {}x{}x{}",
                values.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(side: usize, channels: usize) -> Result<Self> {
        Image::new(side, side, channels, vec![0.0; side * side * channels])
    }

    pub fn constant(side: usize, value: f64) -> Result<Self> {
        Image::new(side, side, 1, vec![value; side * side])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Side length of the square grid.
    pub fn side(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.values[(row * self.width + col) * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        self.values[(row * self.width + col) * self.channels + channel] = value;
    }

    /// Pixel as a complex number; a real image has zero imaginary part.
    pub fn pixel(&self, row: usize, col: usize) -> Complex64 {
        match self.channels {
            1 => Complex64::new(self.at(row, col, 0), 0.0),
            _ => Complex64::new(self.at(row, col, 0), self.at(row, col, 1)),
        }
    }

    /// The real channel as a single-channel image.
    pub fn real_channel(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let mut values = Vec::with_capacity(self.height * self.width);
        for px in 0..self.height * self.width {
            values.push(self.values[px * 2]);
        }
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            values,
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Complex k-space values on a square grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGrid {
    side: usize,
    values: Vec<Complex64>,
}

impl SpectralGrid {
    pub fn new(side: usize, values: Vec<Complex64>) -> Result<Self> {
        if side == 0 {
            return Err(Error::dim("spectral grid side must be positive"));
        }
        if values.len() != side * side {
            return Err(Error::dim(format!(
                "value count {} does not match side {}",
                values.len(),
                side
            )));
        }
        Ok(SpectralGrid { side, values })
    }

    pub fn zeros(side: usize) -> Self {
        SpectralGrid {
            side,
            values: vec![Complex64::new(0.0, 0.0); side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> Complex64 {
        self.values[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
        self.values[row * self.side + col] = value;
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Boolean vector over readout lines (k-space rows). A mask with `budget()`
/// sampled lines stands for the Boolean selection matrix of the sampling model.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LineMask {
    side: usize,
    sampled: Vec<bool>,
}

impl LineMask {
    pub fn empty(side: usize) -> Self {
        LineMask {
            side,
            sampled: vec![false; side],
        }
    }

    pub fn full(side: usize) -> Self {
        LineMask {
            side,
            sampled: vec![true; side],
        }
    }

    pub fn from_lines(side: usize, lines: &[usize]) -> Result<Self> {
        let mut mask = LineMask::empty(side);
        for &line in lines {
            if line >= side {
                return Err(Error::dim(format!("line {line} out of range for side {side}")));
            }
            mask.sampled[line] = true;
        }
        Ok(mask)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn is_sampled(&self, line: usize) -> bool {
        self.sampled[line]
    }

    pub fn set(&mut self, line: usize, sampled: bool) {
        self.sampled[line] = sampled;
    }

    /// Number of sampled lines.
    pub fn budget(&self) -> usize {
        self.sampled.iter().filter(|&&s| s).count()
    }

    pub fn sampled_lines(&self) -> Vec<usize> {
        (0..self.side).filter(|&k| self.sampled[k]).collect()
    }

    pub fn unsampled_lines(&self) -> Vec<usize> {
        (0..self.side).filter(|&k| !self.sampled[k]).collect()
    }

    /// True when `other` contains every line of `self`.
    pub fn is_subset_of(&self, other: &LineMask) -> bool {
        self.side == other.side
            && self
                .sampled
                .iter()
                .zip(&other.sampled)
                .all(|(&a, &b)| !a || b)
    }
}

/// Signed frequency of a line index under standard FFT ordering
/// (0, 1, ..., side/2 - 1, -side/2, ..., -1).
pub fn line_frequency(line: usize, side: usize) -> i64 {
    let half = side / 2;
    if line < side - half {
        line as i64
    } else {
        line as i64 - side as i64
    }
}

fn fft_pair(side: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (
        planner.plan_fft_forward(side),
        planner.plan_fft_inverse(side),
    )
}

/// Apply a 1D FFT along rows, then columns (via transpose), scaling by
/// 1/side overall so the 2D transform is unitary.
fn dft2(values: &mut Vec<Complex64>, side: usize, fft: &Arc<dyn Fft<f64>>) {
    // Rows.
    for row in values.chunks_exact_mut(side) {
        fft.process(row);
    }
    // Transpose, rows again, transpose back.
    let mut transposed = vec![Complex64::new(0.0, 0.0); side * side];
    for r in 0..side {
        for c in 0..side {
            transposed[c * side + r] = values[r * side + c];
        }
    }
    for row in transposed.chunks_exact_mut(side) {
        fft.process(row);
    }
    for r in 0..side {
        for c in 0..side {
            values[c * side + r] = transposed[r * side + c];
        }
    }
    let scale = 1.0 / side as f64;
    for v in values.iter_mut() {
        *v *= scale;
    }
}

/// Unitary 2D DFT of an image. DC ends up at grid index (0, 0).
pub fn dft2_forward(img: &Image) -> Result<SpectralGrid> {
    let side = img.side();
    let mut values = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            values.push(img.pixel(r, c));
        }
    }
    let (fft, _) = fft_pair(side);
    dft2(&mut values, side, &fft);
    SpectralGrid::new(side, values)
}

/// Exact inverse of [`dft2_forward`]. The output is dual-channel; call
/// [`Image::real_channel`] when the source signal is known to be real.
pub fn dft2_inverse(grid: &SpectralGrid) -> Result<Image> {
    let side = grid.side();
    let mut values = grid.values().to_vec();
    let (_, ifft) = fft_pair(side);
    dft2(&mut values, side, &ifft);
    let mut out = Vec::with_capacity(side * side * 2);
    for v in values {
        out.push(v.re);
        out.push(v.im);
    }
    Image::new(side, side, 2, out)
}

/// Zero out the rows whose lines are unsampled; sampled rows are copied
/// bit-exactly. This is the projector `P^T P` under the line-readout
/// convention, and it is idempotent.
pub fn mask_spectrum(grid: &SpectralGrid, mask: &LineMask) -> Result<SpectralGrid> {
    if grid.side() != mask.side() {
        return Err(Error::dim(format!(
            "grid side {} != mask side {}",
            grid.side(),
            mask.side()
        )));
    }
    let side = grid.side();
    let mut out = SpectralGrid::zeros(side);
    for row in 0..side {
        if mask.is_sampled(row) {
            for col in 0..side {
                out.set(row, col, grid.at(row, col));
            }
        }
    }
    Ok(out)
}

/// Inverse DFT of the masked spectrum: the aliased zf-IFT baseline and the
/// reconstruction network's input. The result keeps the input's channel count;
/// for a real input the (aliasing) imaginary part is dropped.
pub fn zero_fill_reconstruct(img: &Image, mask: &LineMask) -> Result<Image> {
    if img.side() != mask.side() {
        return Err(Error::dim(format!(
            "image side {} != mask side {}",
            img.side(),
            mask.side()
        )));
    }
    let spectrum = dft2_forward(img)?;
    let masked = mask_spectrum(&spectrum, mask)?;
    let full = dft2_inverse(&masked)?;
    if img.channels() == 1 {
        Ok(full.real_channel())
    } else {
        Ok(full)
    }
}

/// Zero-fill directly from an already-masked spectrum (no ground-truth image
/// in sight); used by the progressive sampler at test time.
pub fn zero_fill_from_spectrum(masked: &SpectralGrid, channels: usize) -> Result<Image> {
    let full = dft2_inverse(masked)?;
    if channels == 1 {
        Ok(full.real_channel())
    } else {
        Ok(full)
    }
}

/// PSNR in decibels: `-20 log10((|z - x|_2 / sqrt(N)) / |x|_inf)` with N the
/// total element count. An exact match returns `f64::INFINITY` as a documented
/// saturation sentinel so callers can still compare qualities.
pub fn psnr(z: &Image, x: &Image) -> Result<f64> {
    if z.side() != x.side() || z.channels() != x.channels() {
        return Err(Error::dim(format!(
            "psnr shapes differ: {}x{} vs {}x{}",
            z.side(),
            z.channels(),
            x.side(),
            x.channels()
        )));
    }
    let peak = x.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::UndefinedReference(
            "psnr reference signal is identically zero".into(),
        ));
    }
    let n = x.values().len() as f64;
    let sq: f64 = z
        .values()
        .iter()
        .zip(x.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if sq == 0.0 {
        return Ok(f64::INFINITY);
    }
    let rmse = (sq / n).sqrt();
    Ok(-20.0 * (rmse / peak).log10())
}
