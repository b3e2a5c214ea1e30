//! Discrete Fourier analysis of images and cross-domain amplitude alignment.
//!
//! The forward transform follows the unnormalized convention
//! `F(m, n) = Σ_{h,w} x(h, w) · exp(-2πi (hm/H + wn/W))`; the inverse carries
//! the `1/(HW)` factor. Any positive size is accepted: rows and columns are
//! transformed with `rustfft`, which picks a mixed-radix, Rader or Bluestein
//! plan per length.

use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Complex H×W spectrum, row-major, unshifted (DC at index 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    pub fn get(&self, m: usize, n: usize) -> Complex64 {
        self.data[m * self.width + n]
    }
}

#[derive(Clone, Copy)]
enum Direction {
    Forward,
    Inverse,
}

fn transform_2d(height: usize, width: usize, buf: &mut [Complex64], dir: Direction) {
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let (row_fft, col_fft) = match dir {
            Direction::Forward => (planner.plan_fft_forward(width), planner.plan_fft_forward(height)),
            Direction::Inverse => (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height)),
        };
        // rows are contiguous; one call processes all of them
        row_fft.process(buf);
        if height > 1 {
            let mut col = vec![Complex64::new(0.0, 0.0); height];
            for n in 0..width {
                for m in 0..height {
                    col[m] = buf[m * width + n];
                }
                col_fft.process(&mut col);
                for m in 0..height {
                    buf[m * width + n] = col[m];
                }
            }
        }
    });
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidInput(format!(
            "transform dims must be positive, got {height}x{width}"
        )));
    }
    if len != height * width {
        return Err(Error::InvalidInput(format!(
            "expected {} samples for {height}x{width}, got {len}",
            height * width
        )));
    }
    Ok(())
}

/// Forward 2D DFT of one real channel.
pub fn dft2d(plane: &[f64], height: usize, width: usize) -> Result<Spectrum> {
    check_dims(height, width, plane.len())?;
    if plane.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in transform input".into()));
    }
    let mut data: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_2d(height, width, &mut data, Direction::Forward);
    Ok(Spectrum {
        height,
        width,
        data,
    })
}

/// Inverse 2D DFT keeping the imaginary part.
pub fn idft2d_complex(spectrum: &Spectrum) -> Result<Vec<Complex64>> {
    check_dims(spectrum.height, spectrum.width, spectrum.data.len())?;
    if spectrum.data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in spectrum".into()));
    }
    let mut data = spectrum.data.clone();
    transform_2d(spectrum.height, spectrum.width, &mut data, Direction::Inverse);
    let scale = 1.0 / (spectrum.height * spectrum.width) as f64;
    for v in &mut data {
        *v *= scale;
    }
    Ok(data)
}

/// Inverse 2D DFT; the imaginary residue is discarded.
pub fn idft2d(spectrum: &Spectrum) -> Result<Vec<f64>> {
    Ok(idft2d_complex(spectrum)?.into_iter().map(|c| c.re).collect())
}

/// Phase in `(-π, π]`.
fn phase_of(c: Complex64) -> f64 {
    let p = c.im.atan2(c.re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

/// Per-channel amplitude and phase of an image's spectrum, planar like [`ImageTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralRep {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl SpectralRep {
    pub fn amplitude_channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.amplitude[c * n..(c + 1) * n]
    }

    pub fn phase_channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.phase[c * n..(c + 1) * n]
    }
}

pub fn decompose(image: &ImageTensor) -> Result<SpectralRep> {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    let mut amplitude = Vec::with_capacity(n * image.channels());
    let mut phase = Vec::with_capacity(n * image.channels());
    for c in 0..image.channels() {
        let spec = dft2d(image.channel(c), h, w)?;
        amplitude.extend(spec.data.iter().map(|v| v.norm()));
        phase.extend(spec.data.iter().map(|&v| phase_of(v)));
    }
    Ok(SpectralRep {
        height: h,
        width: w,
        channels: image.channels(),
        amplitude,
        phase,
    })
}

/// Inverse transform of `amplitude · e^{i·phase}` per channel, unclamped, planar.
pub fn recompose(rep: &SpectralRep) -> Result<Vec<f64>> {
    let n = rep.height * rep.width;
    if rep.amplitude.len() != n * rep.channels || rep.phase.len() != n * rep.channels {
        return Err(Error::InvalidInput("spectral rep size mismatch".into()));
    }
    let mut out = Vec::with_capacity(n * rep.channels);
    for c in 0..rep.channels {
        let spec = Spectrum {
            height: rep.height,
            width: rep.width,
            data: rep
                .amplitude_channel(c)
                .iter()
                .zip(rep.phase_channel(c))
                .map(|(&a, &p)| Complex64::from_polar(a, p))
                .collect(),
        };
        out.extend(idft2d(&spec)?);
    }
    Ok(out)
}

/// [`recompose`] followed by clamping into a valid image.
pub fn recompose_image(rep: &SpectralRep) -> Result<ImageTensor> {
    ImageTensor::from_clamped(rep.height, rep.width, rep.channels, recompose(rep)?)
}

/// Which part of the target amplitude spectrum replaces the source's.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum AmplitudeBand {
    /// Every bin.
    #[default]
    Full,
    /// Only bins within a centered square of half-width `fraction · min(H, W) / 2`
    /// around DC; the rest keep the source amplitude.
    LowFrequency { fraction: f64 },
}

fn in_low_band(m: usize, n: usize, height: usize, width: usize, fraction: f64) -> bool {
    let radius = (fraction * height.min(width) as f64 / 2.0).floor() as usize;
    let dm = m.min(height - m);
    let dn = n.min(width - n);
    dm <= radius && dn <= radius
}

fn check_pair(source: &ImageTensor, target: &ImageTensor) -> Result<()> {
    if source.channels() != target.channels() {
        return Err(Error::InvalidPair(format!(
            "source has {} channels, target has {}",
            source.channels(),
            target.channels()
        )));
    }
    Ok(())
}

/// Source phase combined with target amplitude, before clamping (planar, source dims).
pub fn fourier_align_unclamped(
    source: &ImageTensor,
    target: &ImageTensor,
    band: AmplitudeBand,
) -> Result<Vec<f64>> {
    check_pair(source, target)?;
    let (h, w) = (source.height(), source.width());
    let resized;
    let target = if target.height() != h || target.width() != w {
        resized = target.resize_bilinear(h, w)?;
        &resized
    } else {
        target
    };
    let mut out = Vec::with_capacity(source.data().len());
    for c in 0..source.channels() {
        let src = dft2d(source.channel(c), h, w)?;
        let tgt = dft2d(target.channel(c), h, w)?;
        let mut mixed = Spectrum::zeros(h, w);
        for m in 0..h {
            for n in 0..w {
                let i = m * w + n;
                let swap = match band {
                    AmplitudeBand::Full => true,
                    AmplitudeBand::LowFrequency { fraction } => in_low_band(m, n, h, w, fraction),
                };
                mixed.data[i] = if swap {
                    Complex64::from_polar(tgt.data[i].norm(), phase_of(src.data[i]))
                } else {
                    src.data[i]
                };
            }
        }
        out.extend(idft2d(&mixed)?);
    }
    Ok(out)
}

/// Reconstructs `source` with the full amplitude spectrum of `target`, clamped to `[0, 1]`.
///
/// A target of different spatial size is bilinearly resampled to the source's size first.
pub fn fourier_align(source: &ImageTensor, target: &ImageTensor) -> Result<ImageTensor> {
    fourier_align_band(source, target, AmplitudeBand::Full)
}

pub fn fourier_align_band(
    source: &ImageTensor,
    target: &ImageTensor,
    band: AmplitudeBand,
) -> Result<ImageTensor> {
    let raw = fourier_align_unclamped(source, target, band)?;
    ImageTensor::from_clamped(source.height(), source.width(), source.channels(), raw)
}

/// Swaps quadrants so DC sits at `(H/2, W/2)`.
pub fn fftshift<T: Copy>(data: &[T], height: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..height {
        let sy = (y + height - height / 2) % height;
        for x in 0..width {
            let sx = (x + width - width / 2) % width;
            out.push(data[sy * width + sx]);
        }
    }
    out
}

/// Spectral energy (excluding DC) accumulated into `bins` rings of normalized
/// radial frequency in `[0, 1]` and normalized to sum 1; channels are pooled.
pub fn radial_energy_profile(image: &ImageTensor, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::InvalidInput("profile needs at least one bin".into()));
    }
    let (h, w) = (image.height(), image.width());
    let mut profile = vec![0.0; bins];
    for c in 0..image.channels() {
        let spec = dft2d(image.channel(c), h, w)?;
        for m in 0..h {
            let fm = m.min(h - m) as f64 / (h as f64 / 2.0).max(1.0);
            for n in 0..w {
                if m == 0 && n == 0 {
                    continue;
                }
                let fn_ = n.min(w - n) as f64 / (w as f64 / 2.0).max(1.0);
                let r = ((fm * fm + fn_ * fn_).sqrt() / std::f64::consts::SQRT_2).min(1.0);
                let bin = ((r * bins as f64) as usize).min(bins - 1);
                profile[bin] += spec.data[m * w + n].norm_sqr();
            }
        }
    }
    let total: f64 = profile.iter().sum();
    if total > 0.0 {
        for p in &mut profile {
            *p /= total;
        }
    }
    Ok(profile)
}

/// Fraction of non-DC spectral energy below normalized radius `cutoff`.
pub fn low_frequency_fraction(image: &ImageTensor, cutoff: f64) -> Result<f64> {
    const BINS: usize = 64;
    let profile = radial_energy_profile(image, BINS)?;
    let keep = ((cutoff.clamp(0.0, 1.0) * BINS as f64).round() as usize).min(BINS);
    Ok(profile[..keep].iter().sum())
}

/// Log-scaled, DC-centered amplitude, max-normalized per channel.
pub fn amplitude_visual(rep: &SpectralRep) -> Result<ImageTensor> {
    let (h, w) = (rep.height, rep.width);
    let mut out = Vec::with_capacity(rep.amplitude.len());
    for c in 0..rep.channels {
        let logged: Vec<f64> = rep.amplitude_channel(c).iter().map(|a| a.ln_1p()).collect();
        let shifted = fftshift(&logged, h, w);
        let max = shifted.iter().cloned().fold(0.0, f64::max);
        out.extend(shifted.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }));
    }
    ImageTensor::from_clamped(h, w, rep.channels, out)
}

/// DC-centered phase mapped from `(-π, π]` to `[0, 1]`.
pub fn phase_visual(rep: &SpectralRep) -> Result<ImageTensor> {
    let (h, w) = (rep.height, rep.width);
    let mut out = Vec::with_capacity(rep.phase.len());
    for c in 0..rep.channels {
        let shifted = fftshift(rep.phase_channel(c), h, w);
        out.extend(shifted.iter().map(|p| (p + PI) / (2.0 * PI)));
    }
    ImageTensor::from_clamped(h, w, rep.channels, out)
}
