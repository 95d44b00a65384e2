//! Exact 2D frequency transforms: DFT with a log-magnitude feature, the
//! orthonormal DCT-II pair, and a single-level orthonormal Haar DWT.
//!
//! All transforms compute in f64; pixel data crosses the boundary as f32.
//! Forward DFT convention: `F[u,v] = sum_{m,n} x[m,n] exp(-2pi i (um/H + vn/W))`.
//! Haar subbands per row-major 2x2 block (a b / c d):
//! LL=(a+b+c+d)/2, LH=(a+b-c-d)/2, HL=(a-b+c-d)/2, HH=(a-b-c+d)/2.

use num_complex::Complex64;
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::sync::{Arc, Mutex, OnceLock};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("haar wavelet needs even extents, got {h}x{w}; pad the image first")]
    OddExtent { h: usize, w: usize },
    #[error("subband data length {got} does not match {expected}")]
    SubbandLength { expected: usize, got: usize },
}

/// Complex DFT grid stored as separate real/imaginary planes.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub h: usize,
    pub w: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn magnitude(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| (r * r + i * i).sqrt())
            .collect()
    }
}

/// Single-level Haar decomposition; each subband is (H/2) x (W/2).
#[derive(Debug, Clone)]
pub struct WaveletPyramid {
    pub half_h: usize,
    pub half_w: usize,
    pub ll: Vec<f64>,
    pub lh: Vec<f64>,
    pub hl: Vec<f64>,
    pub hh: Vec<f64>,
}

/// Orthonormal 2D DCT-II coefficients.
#[derive(Debug, Clone)]
pub struct DctGrid {
    pub h: usize,
    pub w: usize,
    pub coeffs: Vec<f64>,
}

/// Forward 2D DFT of a row-major real grid.
pub fn dft2(h: usize, w: usize, x: &[f64]) -> Spectrum {
    debug_assert_eq!(x.len(), h * w);
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(h, w, &mut buf, false);
    Spectrum {
        h,
        w,
        re: buf.iter().map(|c| c.re).collect(),
        im: buf.iter().map(|c| c.im).collect(),
    }
}

/// Inverse 2D DFT back to a real grid (imaginary residue discarded).
pub fn idft2(s: &Spectrum) -> Vec<f64> {
    let mut buf: Vec<Complex64> = s
        .re
        .iter()
        .zip(&s.im)
        .map(|(&r, &i)| Complex64::new(r, i))
        .collect();
    fft2_in_place(s.h, s.w, &mut buf, true);
    let scale = 1.0 / (s.h * s.w) as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

/// Rows then columns; inverse conjugates the twiddles without scaling.
fn fft2_in_place(h: usize, w: usize, buf: &mut [Complex64], inverse: bool) {
    let mut row = vec![Complex64::default(); w];
    for r in 0..h {
        row.copy_from_slice(&buf[r * w..(r + 1) * w]);
        fft1(&mut row, inverse);
        buf[r * w..(r + 1) * w].copy_from_slice(&row);
    }
    let mut col = vec![Complex64::default(); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        fft1(&mut col, inverse);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
}

fn fft1(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft1_radix2(buf, inverse);
    } else {
        dft1_definitional(buf, inverse);
    }
}

fn fft1_radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let angle = sign * TAU / len as f64;
        let wlen = Complex64::from_polar(1.0, angle);
        let half = len / 2;
        // Fresh twiddle table per stage keeps rounding independent of call order.
        let mut twiddles = Vec::with_capacity(half);
        let mut tw = Complex64::new(1.0, 0.0);
        for k in 0..half {
            if k % 16 == 0 {
                tw = Complex64::from_polar(1.0, angle * k as f64);
            }
            twiddles.push(tw);
            tw *= wlen;
        }
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn dft1_definitional(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![Complex64::default(); n];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::default();
        for (m, v) in buf.iter().enumerate() {
            let angle = sign * TAU * (k * m % n) as f64 / n as f64;
            acc += v * Complex64::from_polar(1.0, angle);
        }
        *o = acc;
    }
    buf.copy_from_slice(&out);
}

/// Roll so the zero-frequency bin lands at (H/2, W/2).
pub fn fftshift(h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let (dh, dw) = (h / 2, w / 2);
    for r in 0..h {
        for c in 0..w {
            out[((r + dh) % h) * w + (c + dw) % w] = x[r * w + c];
        }
    }
    out
}

/// Detector input feature: log(1+|DFT|), DC-centered, min-max normalized to
/// [0,1]. A constant spectrum (zero range) maps to all zeros.
pub fn log_magnitude_feature(h: usize, w: usize, x: &[f32]) -> Vec<f32> {
    let xf: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    let spectrum = dft2(h, w, &xf);
    let log_mag: Vec<f64> = spectrum.magnitude().iter().map(|m| m.ln_1p()).collect();
    let shifted = fftshift(h, w, &log_mag);
    let min = shifted.iter().copied().fold(f64::INFINITY, f64::min);
    let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0.0; shifted.len()];
    }
    let range = max - min;
    shifted.iter().map(|v| ((v - min) / range) as f32).collect()
}

/// Single-level Haar analysis. Requires even extents.
pub fn dwt_haar(h: usize, w: usize, x: &[f64]) -> Result<WaveletPyramid, TransformError> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TransformError::OddExtent { h, w });
    }
    let (hh2, ww2) = (h / 2, w / 2);
    let mut p = WaveletPyramid {
        half_h: hh2,
        half_w: ww2,
        ll: vec![0.0; hh2 * ww2],
        lh: vec![0.0; hh2 * ww2],
        hl: vec![0.0; hh2 * ww2],
        hh: vec![0.0; hh2 * ww2],
    };
    for i in 0..hh2 {
        for j in 0..ww2 {
            let a = x[(2 * i) * w + 2 * j];
            let b = x[(2 * i) * w + 2 * j + 1];
            let c = x[(2 * i + 1) * w + 2 * j];
            let d = x[(2 * i + 1) * w + 2 * j + 1];
            let o = i * ww2 + j;
            p.ll[o] = (a + b + c + d) / 2.0;
            p.lh[o] = (a + b - c - d) / 2.0;
            p.hl[o] = (a - b + c - d) / 2.0;
            p.hh[o] = (a - b - c + d) / 2.0;
        }
    }
    Ok(p)
}

/// Haar synthesis; exact inverse (and adjoint) of [`dwt_haar`].
pub fn idwt_haar(p: &WaveletPyramid) -> Vec<f64> {
    let (h, w) = (p.half_h * 2, p.half_w * 2);
    let mut x = vec![0.0; h * w];
    for i in 0..p.half_h {
        for j in 0..p.half_w {
            let o = i * p.half_w + j;
            let (ll, lh, hl, hh) = (p.ll[o], p.lh[o], p.hl[o], p.hh[o]);
            x[(2 * i) * w + 2 * j] = (ll + lh + hl + hh) / 2.0;
            x[(2 * i) * w + 2 * j + 1] = (ll + lh - hl - hh) / 2.0;
            x[(2 * i + 1) * w + 2 * j] = (ll - lh + hl - hh) / 2.0;
            x[(2 * i + 1) * w + 2 * j + 1] = (ll - lh - hl + hh) / 2.0;
        }
    }
    x
}

/// Orthonormal DCT-II basis matrix for size n, cached per size because the
/// spectrum attack applies it in a hot loop.
fn dct_basis(n: usize) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<Mutex<BTreeMap<usize, Arc<Vec<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    let mut guard = cache.lock().expect("dct basis cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| {
            let mut basis = vec![0.0; n * n];
            for u in 0..n {
                let alpha = if u == 0 {
                    (1.0 / n as f64).sqrt()
                } else {
                    (2.0 / n as f64).sqrt()
                };
                for m in 0..n {
                    basis[u * n + m] =
                        alpha * (std::f64::consts::PI * (2 * m + 1) as f64 * u as f64
                            / (2 * n) as f64)
                            .cos();
                }
            }
            Arc::new(basis)
        })
        .clone()
}

/// Out = rows of `x` transformed by `basis` (n x n), optionally transposed.
fn apply_basis_rows(h: usize, w: usize, x: &[f64], basis: &[f64], transpose: bool) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let row = &x[r * w..(r + 1) * w];
        let orow = &mut out[r * w..(r + 1) * w];
        for (u, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0;
            if transpose {
                for (m, &v) in row.iter().enumerate() {
                    acc += basis[m * w + u] * v;
                }
            } else {
                let brow = &basis[u * w..(u + 1) * w];
                for (bv, &v) in brow.iter().zip(row) {
                    acc += bv * v;
                }
            }
            *o = acc;
        }
    }
    out
}

fn transpose(h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..h {
        for c in 0..w {
            out[c * h + r] = x[r * w + c];
        }
    }
    out
}

/// Orthonormal 2D DCT-II.
pub fn dct2(h: usize, w: usize, x: &[f64]) -> DctGrid {
    let bw = dct_basis(w);
    let bh = dct_basis(h);
    let rows = apply_basis_rows(h, w, x, &bw, false);
    let t = transpose(h, w, &rows);
    let cols = apply_basis_rows(w, h, &t, &bh, false);
    DctGrid {
        h,
        w,
        coeffs: transpose(w, h, &cols),
    }
}

/// Inverse of [`dct2`] (DCT-III with orthonormal scaling).
pub fn idct2(g: &DctGrid) -> Vec<f64> {
    let bw = dct_basis(g.w);
    let bh = dct_basis(g.h);
    let rows = apply_basis_rows(g.h, g.w, &g.coeffs, &bw, true);
    let t = transpose(g.h, g.w, &rows);
    let cols = apply_basis_rows(g.w, g.h, &t, &bh, true);
    transpose(g.w, g.h, &cols)
}

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| f64::from(v)).collect()
}

pub fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_grid(h: usize, w: usize, stream: &mut RngStream) -> Vec<f64> {
        (0..h * w).map(|_| f64::from(stream.uniform(0.0, 1.0))).collect()
    }

    /// Definitional O(N^4) DFT, independent of the FFT path.
    fn dft2_brute(h: usize, w: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc_re = 0.0;
                let mut acc_im = 0.0;
                for m in 0..h {
                    for n in 0..w {
                        let angle = -TAU * (u as f64 * m as f64 / h as f64
                            + v as f64 * n as f64 / w as f64);
                        acc_re += x[m * w + n] * angle.cos();
                        acc_im += x[m * w + n] * angle.sin();
                    }
                }
                re[u * w + v] = acc_re;
                im[u * w + v] = acc_im;
            }
        }
        (re, im)
    }

    /// Definitional double-sum orthonormal DCT-II.
    fn dct2_brute(h: usize, w: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let au = if u == 0 { (1.0 / h as f64).sqrt() } else { (2.0 / h as f64).sqrt() };
                let av = if v == 0 { (1.0 / w as f64).sqrt() } else { (2.0 / w as f64).sqrt() };
                let mut acc = 0.0;
                for m in 0..h {
                    for n in 0..w {
                        acc += x[m * w + n]
                            * (std::f64::consts::PI * (2 * m + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                            * (std::f64::consts::PI * (2 * n + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                    }
                }
                out[u * w + v] = au * av * acc;
            }
        }
        out
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn dft_constant_image_concentrates_at_dc() {
        for n in [4usize, 6, 8] {
            let c = 0.37;
            let s = dft2(n, n, &vec![c; n * n]);
            assert!((s.re[0] - c * (n * n) as f64).abs() < 1e-5);
            assert!(s.im[0].abs() < 1e-5);
            for i in 1..n * n {
                assert!(s.re[i].abs() < 1e-5 && s.im[i].abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dft_delta_has_flat_magnitude() {
        let n = 8;
        let mut x = vec![0.0; n * n];
        x[0] = 1.0;
        let s = dft2(n, n, &x);
        for m in s.magnitude() {
            assert!((m - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dft_matches_brute_force_oracle() {
        let mut stream = RngStream::seed(21);
        for (h, w) in [(4, 4), (8, 8), (4, 8), (6, 6), (5, 7)] {
            let x = random_grid(h, w, &mut stream);
            let s = dft2(h, w, &x);
            let (re, im) = dft2_brute(h, w, &x);
            assert!(max_abs_diff(&s.re, &re) < 1e-5, "{h}x{w} re");
            assert!(max_abs_diff(&s.im, &im) < 1e-5, "{h}x{w} im");
        }
    }

    #[test]
    fn dft_round_trip_and_parseval() {
        let mut stream = RngStream::seed(22);
        for n in [4usize, 8, 16, 64] {
            for _ in 0..(if n == 64 { 5 } else { 100 }) {
                let x = random_grid(n, n, &mut stream);
                let s = dft2(n, n, &x);
                let back = idft2(&s);
                assert!(max_abs_diff(&x, &back) < 1e-5);
                let spatial: f64 = x.iter().map(|v| v * v).sum();
                let spectral: f64 = s
                    .re
                    .iter()
                    .zip(&s.im)
                    .map(|(r, i)| r * r + i * i)
                    .sum::<f64>()
                    / (n * n) as f64;
                assert!((spatial - spectral).abs() / spatial < 1e-4);
            }
        }
    }

    #[test]
    fn dft_is_linear() {
        let mut stream = RngStream::seed(23);
        let (h, w) = (8, 8);
        let x = random_grid(h, w, &mut stream);
        let y = random_grid(h, w, &mut stream);
        let (a, b) = (1.7, -0.4);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(xv, yv)| a * xv + b * yv).collect();
        let sc = dft2(h, w, &combo);
        let sx = dft2(h, w, &x);
        let sy = dft2(h, w, &y);
        for i in 0..h * w {
            assert!((sc.re[i] - (a * sx.re[i] + b * sy.re[i])).abs() < 1e-5);
            assert!((sc.im[i] - (a * sx.im[i] + b * sy.im[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn feature_of_zero_image_is_zero() {
        let f = log_magnitude_feature(8, 8, &[0.0; 64]);
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_of_constant_image_is_centered_spike() {
        let n = 8;
        let f = log_magnitude_feature(n, n, &vec![0.6f32; n * n]);
        for (i, &v) in f.iter().enumerate() {
            if i == (n / 2) * n + n / 2 {
                assert_eq!(v, 1.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn feature_matches_compositional_oracle() {
        let mut stream = RngStream::seed(24);
        let n = 8;
        let x: Vec<f32> = (0..n * n).map(|_| stream.uniform(0.0, 1.0)).collect();
        let f = log_magnitude_feature(n, n, &x);
        // Independent recomputation: brute DFT -> log1p -> shift -> minmax.
        let xf = to_f64(&x);
        let (re, im) = dft2_brute(n, n, &xf);
        let mag: Vec<f64> = re
            .iter()
            .zip(&im)
            .map(|(r, i)| (r * r + i * i).sqrt().ln_1p())
            .collect();
        let shifted = fftshift(n, n, &mag);
        let min = shifted.iter().copied().fold(f64::INFINITY, f64::min);
        let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (got, want) in f.iter().zip(shifted.iter().map(|v| (v - min) / (max - min))) {
            assert!((f64::from(*got) - want).abs() < 1e-5);
        }
        assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn haar_constant_image() {
        let p = dwt_haar(4, 4, &vec![0.9; 16]).unwrap();
        for i in 0..4 {
            assert!((p.ll[i] - 1.8).abs() < 1e-12);
            assert_eq!(p.lh[i], 0.0);
            assert_eq!(p.hl[i], 0.0);
            assert_eq!(p.hh[i], 0.0);
        }
    }

    #[test]
    fn haar_single_block_values() {
        let p = dwt_haar(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.ll[0], 5.0);
        assert_eq!(p.lh[0], -2.0);
        assert_eq!(p.hl[0], -1.0);
        assert_eq!(p.hh[0], 0.0);
    }

    #[test]
    fn haar_round_trip_energy_and_adjoint() {
        let mut stream = RngStream::seed(25);
        let (h, w) = (16, 16);
        for _ in 0..20 {
            let x = random_grid(h, w, &mut stream);
            let p = dwt_haar(h, w, &x).unwrap();
            let back = idwt_haar(&p);
            assert!(max_abs_diff(&x, &back) < 1e-6);
            let ex: f64 = x.iter().map(|v| v * v).sum();
            let ep: f64 = [&p.ll, &p.lh, &p.hl, &p.hh]
                .iter()
                .flat_map(|band| band.iter())
                .map(|v| v * v)
                .sum();
            assert!((ex - ep).abs() / ex < 1e-5);

            // <DWT(x), y> == <x, IDWT(y)> for random pyramids y.
            let y = WaveletPyramid {
                half_h: h / 2,
                half_w: w / 2,
                ll: random_grid(h / 2, w / 2, &mut stream),
                lh: random_grid(h / 2, w / 2, &mut stream),
                hl: random_grid(h / 2, w / 2, &mut stream),
                hh: random_grid(h / 2, w / 2, &mut stream),
            };
            let lhs: f64 = p
                .ll
                .iter()
                .zip(&y.ll)
                .chain(p.lh.iter().zip(&y.lh))
                .chain(p.hl.iter().zip(&y.hl))
                .chain(p.hh.iter().zip(&y.hh))
                .map(|(a, b)| a * b)
                .sum();
            let y_img = idwt_haar(&y);
            let rhs: f64 = x.iter().zip(&y_img).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-5);
        }
    }

    #[test]
    fn haar_rejects_odd_extents() {
        let err = dwt_haar(3, 4, &vec![0.0; 12]).unwrap_err();
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn dct_constant_image_single_coefficient() {
        let n = 8;
        let c = 0.4;
        let g = dct2(n, n, &vec![c; n * n]);
        assert!((g.coeffs[0] - c * n as f64).abs() < 1e-9);
        for i in 1..n * n {
            assert!(g.coeffs[i].abs() < 1e-9);
        }
    }

    #[test]
    fn dct_matches_brute_force_and_round_trips() {
        let mut stream = RngStream::seed(26);
        for (h, w) in [(4, 4), (8, 8), (4, 8)] {
            let x = random_grid(h, w, &mut stream);
            let g = dct2(h, w, &x);
            let brute = dct2_brute(h, w, &x);
            assert!(max_abs_diff(&g.coeffs, &brute) < 1e-5);
            let back = idct2(&g);
            assert!(max_abs_diff(&x, &back) < 1e-5);
        }
    }

    #[test]
    fn dct_is_an_isometry() {
        let mut stream = RngStream::seed(27);
        for n in [4usize, 8, 16, 64] {
            for _ in 0..(if n >= 16 { 10 } else { 100 }) {
                let x = random_grid(n, n, &mut stream);
                let g = dct2(n, n, &x);
                let ex: f64 = x.iter().map(|v| v * v).sum();
                let ec: f64 = g.coeffs.iter().map(|v| v * v).sum();
                assert!((ex - ec).abs() / ex < 1e-5);
            }
        }
    }
}
