use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::spectral::{Spectral, C64};
use super::weights::{ModelWeights, Params};
use super::{ClassWeights, NetConfig, NetError, BN_EPS, TARGET};

/// One input epoch in the form the first block consumes: per-channel spectra
/// and, for training batches, the moments that give exact BatchNorm
/// statistics of the temporal convolution.
#[derive(Debug, Clone)]
pub struct PreparedEpoch {
    /// `[n_channels][bins]`
    spectra: Vec<C64>,
    /// `sum_c sum_t x_c[t + j - pad]` for each tap `j`.
    window_sums: Vec<f64>,
    /// `sum_c sum_t x_c[t + i - pad] x_c[t + j - pad]`, `[taps][taps]`.
    gram: Option<Vec<f64>>,
}

fn temporal_pad(cfg: &NetConfig) -> usize {
    (cfg.temporal_kernel - 1) / 2
}

/// Precomputes the spectral form of one `n_channels x n_times` epoch
/// (channel-major). `with_moments` is required for train-mode batches.
pub fn prepare(cfg: &NetConfig, n_channels: usize, n_times: usize, x: &[f64], with_moments: bool) -> Result<PreparedEpoch, NetError> {
    if x.len() != n_channels * n_times {
        return Err(NetError::Shape {
            layer: "input",
            detail: format!("{} values for {n_channels} x {n_times}", x.len()),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NetError::Shape { layer: "input", detail: "non-finite value".into() });
    }
    let mut sp = Spectral::for_conv(n_times, cfg.temporal_kernel);
    let bins = sp.bins();
    let mut spectra = vec![C64::new(0.0, 0.0); n_channels * bins];
    for c in 0..n_channels {
        sp.forward_into(&x[c * n_times..(c + 1) * n_times], &mut spectra[c * bins..(c + 1) * bins]);
    }

    let k = cfg.temporal_kernel;
    let pad = temporal_pad(cfg) as isize;
    let t_max = n_times as isize - 1;
    let mut window_sums = vec![0.0; k];
    for c in 0..n_channels {
        let row = &x[c * n_times..(c + 1) * n_times];
        let mut prefix = vec![0.0; n_times + 1];
        for (t, v) in row.iter().enumerate() {
            prefix[t + 1] = prefix[t] + v;
        }
        for (j, s) in window_sums.iter_mut().enumerate() {
            let lo = (j as isize - pad).max(0);
            let hi = (t_max + j as isize - pad).min(t_max);
            if lo <= hi {
                *s += prefix[hi as usize + 1] - prefix[lo as usize];
            }
        }
    }

    let gram = with_moments.then(|| {
        let mut g = vec![0.0; k * k];
        let mut lagged = vec![0.0; n_times + 1];
        for d in 0..k.min(n_times) {
            let len = n_times - d;
            lagged[0] = 0.0;
            for s in 0..len {
                let mut acc = 0.0;
                for c in 0..n_channels {
                    let row = &x[c * n_times..(c + 1) * n_times];
                    acc += row[s] * row[s + d];
                }
                lagged[s + 1] = lagged[s] + acc;
            }
            for i in 0..k - d {
                let lo = (i as isize - pad).max(0);
                let hi = (len as isize - 1).min(i as isize - pad + t_max);
                let v = if lo <= hi { lagged[hi as usize + 1] - lagged[lo as usize] } else { 0.0 };
                g[i * k + i + d] = v;
                g[(i + d) * k + i] = v;
            }
        }
        g
    });

    Ok(PreparedEpoch { spectra, window_sums, gram })
}

pub enum Mode<'r> {
    /// Batch statistics, dropout masks drawn from the given stream.
    Train(&'r mut ChaCha8Rng),
    /// Running statistics, no dropout.
    Eval,
}

/// Activations kept by a train-mode forward pass.
pub struct Cache<'a> {
    batch: Vec<&'a PreparedEpoch>,
    kernel_spectra: Vec<C64>,
    mixed: Vec<C64>,
    h: Vec<f64>,
    omega: Vec<f64>,
    window_sum: Vec<f64>,
    gram: Vec<f64>,
    bn1_mean: Vec<f64>,
    bn1_var: Vec<f64>,
    bn1_std: Vec<f64>,
    xhat2: Vec<f64>,
    act2: Vec<f64>,
    bn2_mean: Vec<f64>,
    bn2_var: Vec<f64>,
    bn2_std: Vec<f64>,
    mask1: Vec<f64>,
    d1: Vec<f64>,
    s1: Vec<f64>,
    xhat3: Vec<f64>,
    act3: Vec<f64>,
    bn3_mean: Vec<f64>,
    bn3_var: Vec<f64>,
    bn3_std: Vec<f64>,
    mask2: Vec<f64>,
    flat: Vec<f64>,
}

impl std::fmt::Debug for Cache<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cache").field("batch_len", &self.batch.len()).finish_non_exhaustive()
    }
}

impl Cache<'_> {
    pub fn batch_len(&self) -> usize {
        self.batch.len()
    }
}

/// `exp(x)` for `x <= 0`, branch-free so activation loops vectorize; about
/// 1e-15 relative error, and 0 below -700.
#[inline]
fn exp_nonpositive(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.max(-700.0);
    // round to nearest via the 1.5 * 2^52 trick (no libm call)
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let k = (x * std::f64::consts::LOG2_E + SHIFTER) - SHIFTER;
    let r = x - k * LN2_HI - k * LN2_LO;
    // Taylor series to r^12 on |r| <= ln2 / 2
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let scale = f64::from_bits(((k as i64 + 1023) as u64) << 52);
    p * scale
}

#[inline]
fn elu(v: f64) -> f64 {
    let neg = exp_nonpositive(v.min(0.0)) - 1.0;
    if v > 0.0 {
        v
    } else {
        neg
    }
}

/// ELU derivative expressed through the activation `e = elu(v)`.
#[inline]
fn elu_grad_from_output(e: f64) -> f64 {
    if e > 0.0 {
        1.0
    } else {
        e + 1.0
    }
}

/// `dst[t] (+)= sum_j k[j] src[t + j - pad]` over the in-range taps, one
/// contiguous run per tap.
fn same_corr_into(src: &[f64], k: &[f64], pad: usize, dst: &mut [f64]) {
    let len = src.len() as isize;
    for (j, &kv) in k.iter().enumerate() {
        let shift = j as isize - pad as isize;
        let lo = (-shift).max(0);
        let hi = (len - shift).min(len);
        if lo >= hi {
            continue;
        }
        let (lo, hi) = (lo as usize, hi as usize);
        let s = (lo as isize + shift) as usize;
        for (d, x) in dst[lo..hi].iter_mut().zip(&src[s..s + hi - lo]) {
            *d += kv * x;
        }
    }
}

/// Per-row (channel) mean and biased variance over `[n][rows][len]` data.
fn batch_moments(data: &[f64], n: usize, rows: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * len) as f64;
    let mut mean = vec![0.0; rows];
    let mut var = vec![0.0; rows];
    for r in 0..rows {
        let mut s = 0.0;
        for i in 0..n {
            s += data[(i * rows + r) * len..(i * rows + r + 1) * len].iter().sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for i in 0..n {
            q += data[(i * rows + r) * len..(i * rows + r + 1) * len].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[r] = m;
        var[r] = q / count;
    }
    (mean, var)
}

fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<f64> {
    if p == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

/// Convenience wrapper: prepares raw `n_channels x n_times` epochs and runs
/// [`forward_prepared`]. Returns logits only.
pub fn forward(weights: &ModelWeights, batch: &[&[f64]], mode: Mode<'_>) -> Result<Vec<f64>, NetError> {
    let train = matches!(mode, Mode::Train(_));
    let prepared = batch
        .iter()
        .map(|x| prepare(&weights.config, weights.n_channels, weights.n_times, x, train))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&PreparedEpoch> = prepared.iter().collect();
    Ok(forward_prepared(weights, &refs, mode)?.0)
}

/// Forward pass over a batch; returns `N x n_classes` logits (row-major) and,
/// in train mode, the cache needed by [`backward`].
pub fn forward_prepared<'a>(
    w: &ModelWeights,
    batch: &[&'a PreparedEpoch],
    mode: Mode<'_>,
) -> Result<(Vec<f64>, Option<Cache<'a>>), NetError> {
    let cfg = &w.config;
    let p = &w.params;
    let (n, ch, t_len) = (batch.len(), w.n_channels, w.n_times);
    let (f1, dm, g_n, f2) = (cfg.f1, cfg.d, cfg.n_spatial(), cfg.f2);
    let (k1, k2) = (cfg.temporal_kernel, cfg.separable_kernel);
    let (t1, t2) = cfg.pooled_lens(t_len);
    let flat_len = f2 * t2;
    let nc = cfg.n_classes;
    let mut sp = Spectral::for_conv(t_len, k1);
    let bins = sp.bins();
    let fft_n = sp.n;
    if n == 0 {
        return Err(NetError::Shape { layer: "input", detail: "empty batch".into() });
    }
    for e in batch {
        if e.spectra.len() != ch * bins {
            return Err(NetError::Shape {
                layer: "temporal conv",
                detail: format!("prepared input has {} bins, expected {} channels x {bins}", e.spectra.len(), ch),
            });
        }
    }
    let (train, mut rng) = match mode {
        Mode::Train(r) => (true, Some(r)),
        Mode::Eval => (false, None),
    };
    if train && batch.iter().any(|e| e.gram.is_none()) {
        return Err(NetError::Shape { layer: "bn1", detail: "train-mode input prepared without moments".into() });
    }

    // Temporal kernels as circular filters: q[(pad - j) mod N] = k[j].
    let pad = temporal_pad(cfg) as isize;
    let mut kernel_spectra = vec![C64::new(0.0, 0.0); f1 * bins];
    let mut q = vec![0.0; fft_n];
    for f in 0..f1 {
        q.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..k1 {
            q[(pad - j as isize).rem_euclid(fft_n as isize) as usize] = p.temporal[f * k1 + j];
        }
        sp.forward_into(&q, &mut kernel_spectra[f * bins..(f + 1) * bins]);
    }
    let omega: Vec<f64> = (0..g_n).map(|g| p.depthwise[g * ch..(g + 1) * ch].iter().sum()).collect();

    // BN1 statistics of the (implicit) temporal conv output over (n, c, t).
    let mut window_sum = vec![0.0; k1];
    let mut gram = Vec::new();
    let (bn1_mean, bn1_var) = if train {
        gram = vec![0.0; k1 * k1];
        for e in batch {
            window_sum.iter_mut().zip(&e.window_sums).for_each(|(a, b)| *a += b);
            gram.iter_mut().zip(e.gram.as_ref().unwrap()).for_each(|(a, b)| *a += b);
        }
        let count = (n * ch * t_len) as f64;
        let mut mean = vec![0.0; f1];
        let mut var = vec![0.0; f1];
        for f in 0..f1 {
            let kf = &p.temporal[f * k1..(f + 1) * k1];
            let m = kf.iter().zip(&window_sum).map(|(a, b)| a * b).sum::<f64>() / count;
            let mut quad = 0.0;
            for i in 0..k1 {
                let row = &gram[i * k1..(i + 1) * k1];
                quad += kf[i] * row.iter().zip(kf).map(|(a, b)| a * b).sum::<f64>();
            }
            mean[f] = m;
            var[f] = (quad / count - m * m).max(0.0);
        }
        (mean, var)
    } else {
        (w.running.bn1_mean.clone(), w.running.bn1_var.clone())
    };
    let bn1_std: Vec<f64> = bn1_var.iter().map(|v| (v + BN_EPS).sqrt()).collect();

    // Block 1: mix channels per spatial filter, then convolve in frequency.
    let mut mixed = vec![C64::new(0.0, 0.0); n * g_n * bins];
    let mut h = vec![0.0; n * g_n * t_len];
    let mut u = vec![0.0; n * g_n * t_len];
    let mut spectrum = vec![C64::new(0.0, 0.0); bins];
    for (i, e) in batch.iter().enumerate() {
        for g in 0..g_n {
            let f = g / dm;
            let m = &mut mixed[(i * g_n + g) * bins..(i * g_n + g + 1) * bins];
            for c in 0..ch {
                let wgc = p.depthwise[g * ch + c];
                for (a, x) in m.iter_mut().zip(&e.spectra[c * bins..(c + 1) * bins]) {
                    *a += x * wgc;
                }
            }
            for ((s, a), qk) in spectrum.iter_mut().zip(m.iter()).zip(&kernel_spectra[f * bins..(f + 1) * bins]) {
                *s = a * qk;
            }
            let hrow = &mut h[(i * g_n + g) * t_len..(i * g_n + g + 1) * t_len];
            sp.inverse_into(&spectrum, hrow);
            let alpha = p.bn1_gamma[f] / bn1_std[f];
            let shift = -alpha * bn1_mean[f] * omega[g] + p.bn1_beta[f] * omega[g];
            for (uo, hv) in u[(i * g_n + g) * t_len..(i * g_n + g + 1) * t_len].iter_mut().zip(hrow.iter()) {
                *uo = alpha * hv + shift;
            }
        }
    }

    // BN2 -> ELU -> avgpool1 -> dropout1
    let (bn2_mean, bn2_var) = if train { batch_moments(&u, n, g_n, t_len) } else { (w.running.bn2_mean.clone(), w.running.bn2_var.clone()) };
    let bn2_std: Vec<f64> = bn2_var.iter().map(|v| (v + BN_EPS).sqrt()).collect();
    let mut xhat2 = u;
    let mut act2 = vec![0.0; n * g_n * t_len];
    let mut d1 = vec![0.0; n * g_n * t1];
    for i in 0..n {
        for g in 0..g_n {
            let base = (i * g_n + g) * t_len;
            let (m, inv, gam, bet) = (bn2_mean[g], 1.0 / bn2_std[g], p.bn2_gamma[g], p.bn2_beta[g]);
            let arow = &mut act2[base..base + t_len];
            for (xh, a) in xhat2[base..base + t_len].iter_mut().zip(arow.iter_mut()) {
                let z = (*xh - m) * inv;
                *xh = z;
                *a = elu(gam * z + bet);
            }
            for (o, win) in d1[(i * g_n + g) * t1..(i * g_n + g + 1) * t1].iter_mut().zip(arow.chunks_exact(cfg.pool1)) {
                *o = win.iter().sum::<f64>() / cfg.pool1 as f64;
            }
        }
    }
    let mask1 = match rng.as_deref_mut() {
        Some(r) => dropout_mask(r, d1.len(), cfg.dropout1),
        None => Vec::new(),
    };
    if train {
        d1.iter_mut().zip(&mask1).for_each(|(v, m)| *v *= m);
    }

    // separable: depthwise time conv (same padding) then pointwise mixing
    let pad2 = (k2 - 1) / 2;
    let mut s1 = vec![0.0; n * g_n * t1];
    for i in 0..n {
        for g in 0..g_n {
            let src = &d1[(i * g_n + g) * t1..(i * g_n + g + 1) * t1];
            let ker = &p.sep_depthwise[g * k2..(g + 1) * k2];
            same_corr_into(src, ker, pad2, &mut s1[(i * g_n + g) * t1..(i * g_n + g + 1) * t1]);
        }
    }
    let mut s2 = vec![0.0; n * f2 * t1];
    for i in 0..n {
        for o in 0..f2 {
            let dst = &mut s2[(i * f2 + o) * t1..(i * f2 + o + 1) * t1];
            for g in 0..g_n {
                let wv = p.sep_pointwise[o * g_n + g];
                for (d, s) in dst.iter_mut().zip(&s1[(i * g_n + g) * t1..(i * g_n + g + 1) * t1]) {
                    *d += wv * s;
                }
            }
        }
    }

    // BN3 -> ELU -> avgpool2 -> dropout2 -> flatten
    let (bn3_mean, bn3_var) = if train { batch_moments(&s2, n, f2, t1) } else { (w.running.bn3_mean.clone(), w.running.bn3_var.clone()) };
    let bn3_std: Vec<f64> = bn3_var.iter().map(|v| (v + BN_EPS).sqrt()).collect();
    let mut xhat3 = s2;
    let mut act3 = vec![0.0; n * f2 * t1];
    let mut flat = vec![0.0; n * flat_len];
    for i in 0..n {
        for o in 0..f2 {
            let base = (i * f2 + o) * t1;
            let (m, inv, gam, bet) = (bn3_mean[o], 1.0 / bn3_std[o], p.bn3_gamma[o], p.bn3_beta[o]);
            let arow = &mut act3[base..base + t1];
            for (xh, a) in xhat3[base..base + t1].iter_mut().zip(arow.iter_mut()) {
                let z = (*xh - m) * inv;
                *xh = z;
                *a = elu(gam * z + bet);
            }
            let out = &mut flat[i * flat_len + o * t2..i * flat_len + (o + 1) * t2];
            for (f, win) in out.iter_mut().zip(arow.chunks_exact(cfg.pool2)) {
                *f = win.iter().sum::<f64>() / cfg.pool2 as f64;
            }
        }
    }
    let mask2 = match rng {
        Some(r) => dropout_mask(r, flat.len(), cfg.dropout2),
        None => Vec::new(),
    };
    if train {
        flat.iter_mut().zip(&mask2).for_each(|(v, m)| *v *= m);
    }

    let mut logits = vec![0.0; n * nc];
    for i in 0..n {
        let x = &flat[i * flat_len..(i + 1) * flat_len];
        for k in 0..nc {
            let row = &p.dense_w[k * flat_len..(k + 1) * flat_len];
            logits[i * nc + k] = p.dense_b[k] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    let cache = train.then(|| Cache {
        batch: batch.to_vec(),
        kernel_spectra,
        mixed,
        h,
        omega,
        window_sum,
        gram,
        bn1_mean,
        bn1_var,
        bn1_std,
        xhat2,
        act2,
        bn2_mean,
        bn2_var,
        bn2_std,
        mask1,
        d1,
        s1,
        xhat3,
        act3,
        bn3_mean,
        bn3_var,
        bn3_std,
        mask2,
        flat,
    });
    Ok((logits, cache))
}

/// BatchNorm backward over `[n][rows][len]`: returns `dx`, accumulating
/// `dgamma`, `dbeta`.
fn bn_backward(
    dy: &[f64],
    xhat: &[f64],
    gamma: &[f64],
    std: &[f64],
    n: usize,
    rows: usize,
    len: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let count = (n * len) as f64;
    let mut dx = vec![0.0; dy.len()];
    for r in 0..rows {
        let (mut sdy, mut sdyx) = (0.0, 0.0);
        for i in 0..n {
            let b = (i * rows + r) * len;
            for t in 0..len {
                sdy += dy[b + t];
                sdyx += dy[b + t] * xhat[b + t];
            }
        }
        dgamma[r] += sdyx;
        dbeta[r] += sdy;
        let k = gamma[r] / std[r];
        let (mdy, mdyx) = (sdy / count, sdyx / count);
        for i in 0..n {
            let b = (i * rows + r) * len;
            for t in 0..len {
                dx[b + t] = k * (dy[b + t] - mdy - xhat[b + t] * mdyx);
            }
        }
    }
    dx
}

/// Exact gradients of the loss with respect to every trainable tensor, given
/// `grad_logits` (`N x n_classes`) from a train-mode forward pass.
pub fn backward(w: &ModelWeights, cache: &Cache<'_>, grad_logits: &[f64]) -> Result<Params, NetError> {
    let cfg = &w.config;
    let p = &w.params;
    let n = cache.batch.len();
    let (ch, t_len) = (w.n_channels, w.n_times);
    let (f1, dm, g_n, f2) = (cfg.f1, cfg.d, cfg.n_spatial(), cfg.f2);
    let (k1, k2) = (cfg.temporal_kernel, cfg.separable_kernel);
    let (t1, t2) = cfg.pooled_lens(t_len);
    let flat_len = f2 * t2;
    let nc = cfg.n_classes;
    if grad_logits.len() != n * nc {
        return Err(NetError::Shape { layer: "logits", detail: format!("{} gradients for {n} x {nc}", grad_logits.len()) });
    }
    if cache.flat.len() != n * flat_len || cache.h.len() != n * g_n * t_len {
        return Err(NetError::MissingCache);
    }
    let mut gr = Params::zeros_like(p);

    // dense
    let mut dflat = vec![0.0; n * flat_len];
    for i in 0..n {
        let x = &cache.flat[i * flat_len..(i + 1) * flat_len];
        for k in 0..nc {
            let gz = grad_logits[i * nc + k];
            gr.dense_b[k] += gz;
            let row = &p.dense_w[k * flat_len..(k + 1) * flat_len];
            let grow = &mut gr.dense_w[k * flat_len..(k + 1) * flat_len];
            for j in 0..flat_len {
                grow[j] += gz * x[j];
                dflat[i * flat_len + j] += gz * row[j];
            }
        }
    }
    dflat.iter_mut().zip(&cache.mask2).for_each(|(d, m)| *d *= m);

    // avgpool2 + ELU
    let mut dv3 = vec![0.0; n * f2 * t1];
    for i in 0..n {
        for o in 0..f2 {
            let base = (i * f2 + o) * t1;
            for k in 0..t2 {
                let gsh = dflat[i * flat_len + o * t2 + k] / cfg.pool2 as f64;
                for t in k * cfg.pool2..(k + 1) * cfg.pool2 {
                    dv3[base + t] = gsh * elu_grad_from_output(cache.act3[base + t]);
                }
            }
        }
    }
    let ds2 = bn_backward(&dv3, &cache.xhat3, &p.bn3_gamma, &cache.bn3_std, n, f2, t1, &mut gr.bn3_gamma, &mut gr.bn3_beta);

    // pointwise
    let mut ds1 = vec![0.0; n * g_n * t1];
    for i in 0..n {
        for o in 0..f2 {
            let dsrc = &ds2[(i * f2 + o) * t1..(i * f2 + o + 1) * t1];
            for g in 0..g_n {
                let s1row = &cache.s1[(i * g_n + g) * t1..(i * g_n + g + 1) * t1];
                gr.sep_pointwise[o * g_n + g] += dsrc.iter().zip(s1row).map(|(a, b)| a * b).sum::<f64>();
                let wv = p.sep_pointwise[o * g_n + g];
                for (d, s) in ds1[(i * g_n + g) * t1..(i * g_n + g + 1) * t1].iter_mut().zip(dsrc) {
                    *d += wv * s;
                }
            }
        }
    }

    // separable depthwise
    let pad2 = (k2 - 1) as isize / 2;
    let t1i = t1 as isize;
    let mut dd1 = vec![0.0; n * g_n * t1];
    for i in 0..n {
        for g in 0..g_n {
            let b = (i * g_n + g) * t1;
            let gs = &ds1[b..b + t1];
            let src = &cache.d1[b..b + t1];
            let dst = &mut dd1[b..b + t1];
            for j in 0..k2 {
                // output t reads input t + shift
                let shift = j as isize - pad2;
                let lo = (-shift).max(0) as usize;
                let hi = (t1i - shift).min(t1i);
                if (lo as isize) >= hi {
                    continue;
                }
                let hi = hi as usize;
                let s = (lo as isize + shift) as usize;
                let kv = p.sep_depthwise[g * k2 + j];
                let mut acc = 0.0;
                for ((gv, x), d) in gs[lo..hi].iter().zip(&src[s..s + hi - lo]).zip(&mut dst[s..s + hi - lo]) {
                    acc += gv * x;
                    *d += kv * gv;
                }
                gr.sep_depthwise[g * k2 + j] += acc;
            }
        }
    }
    dd1.iter_mut().zip(&cache.mask1).for_each(|(d, m)| *d *= m);

    // avgpool1 + ELU
    let mut dv2 = vec![0.0; n * g_n * t_len];
    for i in 0..n {
        for g in 0..g_n {
            let base = (i * g_n + g) * t_len;
            for k in 0..t1 {
                let gsh = dd1[(i * g_n + g) * t1 + k] / cfg.pool1 as f64;
                for t in k * cfg.pool1..(k + 1) * cfg.pool1 {
                    dv2[base + t] = gsh * elu_grad_from_output(cache.act2[base + t]);
                }
            }
        }
    }
    let du = bn_backward(&dv2, &cache.xhat2, &p.bn2_gamma, &cache.bn2_std, n, g_n, t_len, &mut gr.bn2_gamma, &mut gr.bn2_beta);

    // Block 1 (temporal conv + BN1 + depthwise), in mixed / frequency form.
    let mut sp = Spectral::for_conv(t_len, k1);
    let bins = sp.bins();
    let fft_n = sp.n as f64;
    let bin_w: Vec<f64> = (0..bins).map(|k| sp.bin_weight(k)).collect();
    let mut sum_d = vec![0.0; g_n];
    let mut sum_dh = vec![0.0; g_n];
    let mut corr = vec![C64::new(0.0, 0.0); f1 * bins];
    let mut dw_conv = vec![0.0; g_n * ch];
    let mut dspec = vec![C64::new(0.0, 0.0); bins];
    let mut proj = vec![C64::new(0.0, 0.0); bins];
    for (i, e) in cache.batch.iter().enumerate() {
        for g in 0..g_n {
            let f = g / dm;
            let drow = &du[(i * g_n + g) * t_len..(i * g_n + g + 1) * t_len];
            let hrow = &cache.h[(i * g_n + g) * t_len..(i * g_n + g + 1) * t_len];
            sum_d[g] += drow.iter().sum::<f64>();
            sum_dh[g] += drow.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>();

            sp.forward_into(drow, &mut dspec);
            let m = &cache.mixed[(i * g_n + g) * bins..(i * g_n + g + 1) * bins];
            let qf = &cache.kernel_spectra[f * bins..(f + 1) * bins];
            for k in 0..bins {
                corr[f * bins + k] += dspec[k] * m[k].conj();
                proj[k] = dspec[k].conj() * qf[k] * bin_w[k];
            }
            for c in 0..ch {
                let xs = &e.spectra[c * bins..(c + 1) * bins];
                let mut acc = 0.0;
                for k in 0..bins {
                    acc += proj[k].re * xs[k].re - proj[k].im * xs[k].im;
                }
                dw_conv[g * ch + c] += acc / fft_n;
            }
        }
    }

    let count = (n * ch * t_len) as f64;
    let pad = temporal_pad(cfg) as isize;
    let mut r = vec![0.0; sp.n];
    for f in 0..f1 {
        let (mu, sd, var_unused) = (cache.bn1_mean[f], cache.bn1_std[f], cache.bn1_var[f]);
        let _ = var_unused;
        let alpha = p.bn1_gamma[f] / sd;
        let mut d_alpha = 0.0;
        let mut s_omega_a = 0.0;
        for g in f * dm..(f + 1) * dm {
            d_alpha += sum_dh[g] - mu * cache.omega[g] * sum_d[g];
            s_omega_a += cache.omega[g] * sum_d[g];
        }
        gr.bn1_gamma[f] = d_alpha / sd;
        gr.bn1_beta[f] = s_omega_a;
        let d_std = -d_alpha * p.bn1_gamma[f] / (sd * sd);
        let d_var = d_std / (2.0 * sd);
        let d_mean = -alpha * s_omega_a;

        for g in f * dm..(f + 1) * dm {
            let d_omega = sum_d[g] * (p.bn1_beta[f] - alpha * mu);
            for c in 0..ch {
                gr.depthwise[g * ch + c] = d_omega + alpha * dw_conv[g * ch + c];
            }
        }

        sp.inverse_into(&corr[f * bins..(f + 1) * bins], &mut r);
        let kf = &p.temporal[f * k1..(f + 1) * k1];
        let coef_s = (d_mean - 2.0 * d_var * mu) / count;
        for j in 0..k1 {
            let circ = r[(pad - j as isize).rem_euclid(sp.n as isize) as usize];
            let gk: f64 = cache.gram[j * k1..(j + 1) * k1].iter().zip(kf).map(|(a, b)| a * b).sum();
            gr.temporal[f * k1 + j] = alpha * circ + coef_s * cache.window_sum[j] + d_var * 2.0 * gk / count;
        }
    }
    Ok(gr)
}

impl ModelWeights {
    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates used in eval mode.
    pub fn update_running(&mut self, cache: &Cache<'_>, momentum: f64) {
        let upd = |run: &mut Vec<f64>, batch: &[f64]| {
            run.iter_mut().zip(batch).for_each(|(r, b)| *r = (1.0 - momentum) * *r + momentum * b);
        };
        upd(&mut self.running.bn1_mean, &cache.bn1_mean);
        upd(&mut self.running.bn1_var, &cache.bn1_var);
        upd(&mut self.running.bn2_mean, &cache.bn2_mean);
        upd(&mut self.running.bn2_var, &cache.bn2_var);
        upd(&mut self.running.bn3_mean, &cache.bn3_mean);
        upd(&mut self.running.bn3_var, &cache.bn3_var);
    }
}

pub fn softmax_rows(logits: &[f64], n_classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, o) in logits.chunks(n_classes).zip(out.chunks_mut(n_classes)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (v, r) in o.iter_mut().zip(row) {
            *v = (r - m).exp();
            z += *v;
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Class-weighted mean cross-entropy `sum_i w_i CE_i / sum_i w_i` and its
/// gradient with respect to the logits.
pub fn weighted_cross_entropy(logits: &[f64], is_target: &[bool], weights: &ClassWeights) -> (f64, Vec<f64>) {
    let nc = logits.len() / is_target.len().max(1);
    let probs = softmax_rows(logits, nc);
    let total_w: f64 = is_target.iter().map(|&t| weights.for_label(t)).sum();
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, &t) in is_target.iter().enumerate() {
        let y = if t { TARGET } else { super::NONTARGET };
        let wi = weights.for_label(t) / total_w;
        loss -= wi * probs[i * nc + y].max(f64::MIN_POSITIVE).ln();
        for k in 0..nc {
            grad[i * nc + k] = wi * (probs[i * nc + k] - if k == y { 1.0 } else { 0.0 });
        }
    }
    (loss, grad)
}
