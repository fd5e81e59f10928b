//! Real-input DFT with the convention c_j = Σ_t h_t · exp(−2πi·j·t/T).
//!
//! Radix-2 FFT when the length is a power of two, direct evaluation
//! otherwise (the default 60-frame window is not a power of two). Each
//! coefficient is linear in the input, so the adjoints used by the tape
//! primitives are exact cosine/sine accumulations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::fmath;

/// Returns the ⌊T/2⌋+1 complex pairs (Re, Im) of the real-input DFT.
pub fn real_dft(h: &[f64]) -> Result<Vec<(f64, f64)>> {
    let t = h.len();
    if t < 2 {
        return Err(invalid("real_dft", format!("signal length {t} < 2")));
    }
    if t.is_power_of_two() {
        Ok(radix2(h))
    } else {
        Ok(direct(h))
    }
}

fn direct(h: &[f64]) -> Vec<(f64, f64)> {
    let t = h.len();
    let bins = t / 2 + 1;
    let step = -2.0 * PI / t as f64;
    let mut out = Vec::with_capacity(bins);
    for j in 0..bins {
        let mut re = 0.0;
        let mut im = 0.0;
        for (n, &x) in h.iter().enumerate() {
            let ang = step * (j * n % t) as f64;
            re += x * fmath::cos(ang);
            im += x * fmath::sin(ang);
        }
        out.push((re, im));
    }
    out
}

fn radix2(h: &[f64]) -> Vec<(f64, f64)> {
    let t = h.len();
    let mut re: Vec<f64> = h.to_vec();
    let mut im = vec![0.0; t];

    // Bit-reversal permutation.
    let bits = t.trailing_zeros();
    for i in 0..t {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }

    let mut len = 2;
    while len <= t {
        let ang = -2.0 * PI / len as f64;
        let (w_re, w_im) = (fmath::cos(ang), fmath::sin(ang));
        for start in (0..t).step_by(len) {
            let mut cur_re = 1.0;
            let mut cur_im = 0.0;
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * cur_re - im[b] * cur_im;
                let ti = re[b] * cur_im + im[b] * cur_re;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
        }
        len <<= 1;
    }

    (0..t / 2 + 1).map(|j| (re[j], im[j])).collect()
}

/// Row-wise DFT of a [K, T] buffer into separate Re and Im [K, bins] buffers.
pub fn real_dft_rows(data: &[f64], k: usize, t: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let bins = t / 2 + 1;
    let mut re = Vec::with_capacity(k * bins);
    let mut im = Vec::with_capacity(k * bins);
    for row in 0..k {
        let coeffs = real_dft(&data[row * t..(row + 1) * t])?;
        for (r, i) in coeffs {
            re.push(r);
            im.push(i);
        }
    }
    Ok((re, im))
}

/// Adjoint of the Re part: grad_h[t] += Σ_j g[j]·cos(2πjt/T), row-wise.
pub fn dft_re_adjoint_rows(grad_out: &[f64], grad_h: &mut [f64], k: usize, t: usize) {
    let bins = t / 2 + 1;
    let step = -2.0 * PI / t as f64;
    for row in 0..k {
        let g = &grad_out[row * bins..(row + 1) * bins];
        let gh = &mut grad_h[row * t..(row + 1) * t];
        for (n, slot) in gh.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &gj) in g.iter().enumerate() {
                acc += gj * fmath::cos(step * (j * n % t) as f64);
            }
            *slot += acc;
        }
    }
}

/// Adjoint of the Im part: grad_h[t] += Σ_j g[j]·(−sin(2πjt/T)), row-wise.
pub fn dft_im_adjoint_rows(grad_out: &[f64], grad_h: &mut [f64], k: usize, t: usize) {
    let bins = t / 2 + 1;
    let step = -2.0 * PI / t as f64;
    for row in 0..k {
        let g = &grad_out[row * bins..(row + 1) * bins];
        let gh = &mut grad_h[row * t..(row + 1) * t];
        for (n, slot) in gh.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &gj) in g.iter().enumerate() {
                acc += gj * fmath::sin(step * (j * n % t) as f64);
            }
            *slot += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent O(T²) oracle, kept deliberately plain.
    fn oracle_dft(h: &[f64]) -> Vec<(f64, f64)> {
        let t = h.len();
        (0..t / 2 + 1)
            .map(|j| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (n, &x) in h.iter().enumerate() {
                    let ang = -2.0 * PI * (j as f64) * (n as f64) / t as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn rejects_short_signal() {
        assert!(real_dft(&[1.0]).is_err());
        assert!(real_dft(&[]).is_err());
    }

    #[test]
    fn dc_only_signal() {
        let c = real_dft(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((c[0].0 - 4.0).abs() < 1e-12 && c[0].1.abs() < 1e-12);
        for &(re, im) in &c[1..] {
            assert!(re.abs() < 1e-12 && im.abs() < 1e-12);
        }
    }

    #[test]
    fn sine_at_bin_one() {
        // Hand evaluation of the 4-point sum: c_1 = -2i.
        let c = real_dft(&[0.0, 1.0, 0.0, -1.0]).unwrap();
        assert!(c[1].0.abs() < 1e-12);
        assert!((c[1].1 + 2.0).abs() < 1e-12);
        let mag = (c[1].0 * c[1].0 + c[1].1 * c[1].1).sqrt();
        assert!((mag - 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_oracle_across_lengths() {
        let mut rng = crate::rng::Rng::new(42);
        for &t in &[4usize, 8, 16, 60, 64] {
            let h = rng.uniform_vec(t, -2.0, 2.0);
            let got = real_dft(&h).unwrap();
            let want = oracle_dft(&h);
            for (g, w) in got.iter().zip(&want) {
                assert!((g.0 - w.0).abs() < 1e-9, "re mismatch at T={t}");
                assert!((g.1 - w.1).abs() < 1e-9, "im mismatch at T={t}");
            }
        }
    }

    #[test]
    fn row_wise_matches_single() {
        let mut rng = crate::rng::Rng::new(9);
        let (k, t) = (3, 10);
        let data = rng.uniform_vec(k * t, -1.0, 1.0);
        let (re, im) = real_dft_rows(&data, k, t).unwrap();
        let bins = t / 2 + 1;
        for row in 0..k {
            let single = real_dft(&data[row * t..(row + 1) * t]).unwrap();
            for j in 0..bins {
                assert_eq!(re[row * bins + j], single[j].0);
                assert_eq!(im[row * bins + j], single[j].1);
            }
        }
    }
}
