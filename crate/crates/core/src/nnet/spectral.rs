use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

pub(crate) type C64 = Complex<f64>;

/// Zero-padded real FFT of a fixed length with reusable scratch space.
pub(crate) struct Spectral {
    pub n: usize,
    fwd: Arc<dyn RealToComplex<f64>>,
    inv: Arc<dyn ComplexToReal<f64>>,
    time: Vec<f64>,
    freq: Vec<C64>,
    scratch_f: Vec<C64>,
    scratch_i: Vec<C64>,
}

impl Spectral {
    /// Plan for linear (non-wrapping) convolution of `n_times` samples with a
    /// `kernel`-tap filter.
    pub fn for_conv(n_times: usize, kernel: usize) -> Self {
        let n = (n_times + kernel - 1).next_power_of_two().max(2);
        let mut planner = RealFftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let scratch_f = fwd.make_scratch_vec();
        let scratch_i = inv.make_scratch_vec();
        Self { n, time: vec![0.0; n], freq: vec![C64::new(0.0, 0.0); n / 2 + 1], fwd, inv, scratch_f, scratch_i }
    }

    pub fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    /// Spectrum of `x` zero-padded to the plan length, written into `out`.
    pub fn forward_into(&mut self, x: &[f64], out: &mut [C64]) {
        self.time[..x.len()].copy_from_slice(x);
        self.time[x.len()..].iter_mut().for_each(|v| *v = 0.0);
        self.fwd
            .process_with_scratch(&mut self.time, out, &mut self.scratch_f)
            .expect("planned lengths");
    }

    /// Inverse of a half spectrum; writes the first `out.len()` samples,
    /// normalized so that `inverse(forward(x)) == x`.
    pub fn inverse_into(&mut self, spectrum: &[C64], out: &mut [f64]) {
        self.freq.copy_from_slice(spectrum);
        let last = self.freq.len() - 1;
        self.freq[0].im = 0.0;
        self.freq[last].im = 0.0;
        self.inv
            .process_with_scratch(&mut self.freq, &mut self.time, &mut self.scratch_i)
            .expect("planned lengths");
        let scale = 1.0 / self.n as f64;
        for (o, v) in out.iter_mut().zip(&self.time) {
            *o = v * scale;
        }
    }

    /// Full-spectrum weights for sums over a half spectrum: Parseval-type
    /// inner products count the interior bins twice.
    pub fn bin_weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.n / 2 {
            1.0
        } else {
            2.0
        }
    }
}
