use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NetConfig, NetError};

/// Trainable tensors, flat row-major. The same layout holds gradients and
/// Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `[F1, temporal_kernel]`
    pub temporal: Vec<f64>,
    pub bn1_gamma: Vec<f64>,
    pub bn1_beta: Vec<f64>,
    /// `[F1*D, n_channels]`; row `g` belongs to temporal kernel `g / D`.
    pub depthwise: Vec<f64>,
    pub bn2_gamma: Vec<f64>,
    pub bn2_beta: Vec<f64>,
    /// `[F2, separable_kernel]`
    pub sep_depthwise: Vec<f64>,
    /// `[F2, F2]` (out, in)
    pub sep_pointwise: Vec<f64>,
    pub bn3_gamma: Vec<f64>,
    pub bn3_beta: Vec<f64>,
    /// `[n_classes, F2 * T2]`, input index `o * T2 + t`.
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

pub const PARAM_NAMES: [&str; 12] = [
    "temporal.kernel",
    "bn1.gamma",
    "bn1.beta",
    "depthwise.kernel",
    "bn2.gamma",
    "bn2.beta",
    "separable.depthwise",
    "separable.pointwise",
    "bn3.gamma",
    "bn3.beta",
    "dense.weight",
    "dense.bias",
];

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        let mut p = other.clone();
        p.tensors_mut().into_iter().for_each(|(_, t)| t.iter_mut().for_each(|v| *v = 0.0));
        p
    }

    pub fn tensors(&self) -> [(&'static str, &Vec<f64>); 12] {
        [
            (PARAM_NAMES[0], &self.temporal),
            (PARAM_NAMES[1], &self.bn1_gamma),
            (PARAM_NAMES[2], &self.bn1_beta),
            (PARAM_NAMES[3], &self.depthwise),
            (PARAM_NAMES[4], &self.bn2_gamma),
            (PARAM_NAMES[5], &self.bn2_beta),
            (PARAM_NAMES[6], &self.sep_depthwise),
            (PARAM_NAMES[7], &self.sep_pointwise),
            (PARAM_NAMES[8], &self.bn3_gamma),
            (PARAM_NAMES[9], &self.bn3_beta),
            (PARAM_NAMES[10], &self.dense_w),
            (PARAM_NAMES[11], &self.dense_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 12] {
        [
            (PARAM_NAMES[0], &mut self.temporal),
            (PARAM_NAMES[1], &mut self.bn1_gamma),
            (PARAM_NAMES[2], &mut self.bn1_beta),
            (PARAM_NAMES[3], &mut self.depthwise),
            (PARAM_NAMES[4], &mut self.bn2_gamma),
            (PARAM_NAMES[5], &mut self.bn2_beta),
            (PARAM_NAMES[6], &mut self.sep_depthwise),
            (PARAM_NAMES[7], &mut self.sep_pointwise),
            (PARAM_NAMES[8], &mut self.bn3_gamma),
            (PARAM_NAMES[9], &mut self.bn3_beta),
            (PARAM_NAMES[10], &mut self.dense_w),
            (PARAM_NAMES[11], &mut self.dense_b),
        ]
    }

    pub fn scale(&mut self, k: f64) {
        self.tensors_mut().into_iter().for_each(|(_, t)| t.iter_mut().for_each(|v| *v *= k));
    }
}

/// BatchNorm running statistics (not trained by gradient descent).
#[derive(Debug, Clone, PartialEq)]
pub struct Running {
    pub bn1_mean: Vec<f64>,
    pub bn1_var: Vec<f64>,
    pub bn2_mean: Vec<f64>,
    pub bn2_var: Vec<f64>,
    pub bn3_mean: Vec<f64>,
    pub bn3_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: NetConfig,
    pub n_channels: usize,
    pub n_times: usize,
    pub params: Params,
    pub running: Running,
}

fn glorot(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

impl ModelWeights {
    /// Glorot-uniform kernels, unit BN scales, zero shifts and biases; the
    /// max-norm constraints hold from the start.
    pub fn init(config: &NetConfig, n_channels: usize, n_times: usize, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        config.validate(n_times)?;
        if n_channels == 0 {
            return Err(NetError::Config("n_channels must be >= 1".into()));
        }
        let (f1, g, f2) = (config.f1, config.n_spatial(), config.f2);
        let (k1, k2) = (config.temporal_kernel, config.separable_kernel);
        let flat = config.flat_len(n_times);
        let nc = config.n_classes;
        let params = Params {
            temporal: glorot(rng, f1 * k1, k1, f1 * k1),
            bn1_gamma: vec![1.0; f1],
            bn1_beta: vec![0.0; f1],
            depthwise: glorot(rng, g * n_channels, n_channels, config.d * n_channels),
            bn2_gamma: vec![1.0; g],
            bn2_beta: vec![0.0; g],
            sep_depthwise: glorot(rng, f2 * k2, k2, k2),
            sep_pointwise: glorot(rng, f2 * f2, f2, f2),
            bn3_gamma: vec![1.0; f2],
            bn3_beta: vec![0.0; f2],
            dense_w: glorot(rng, nc * flat, flat, nc),
            dense_b: vec![0.0; nc],
        };
        let running = Running {
            bn1_mean: vec![0.0; f1],
            bn1_var: vec![1.0; f1],
            bn2_mean: vec![0.0; g],
            bn2_var: vec![1.0; g],
            bn3_mean: vec![0.0; f2],
            bn3_var: vec![1.0; f2],
        };
        let mut w = Self { config: config.clone(), n_channels, n_times, params, running };
        w.apply_max_norm();
        Ok(w)
    }

    pub fn dims(&self, name: &str) -> Vec<usize> {
        let c = &self.config;
        let (f1, g, f2) = (c.f1, c.n_spatial(), c.f2);
        match name {
            "temporal.kernel" => vec![f1, 1, c.temporal_kernel],
            "bn1.gamma" | "bn1.beta" | "bn1.running_mean" | "bn1.running_var" => vec![f1],
            "depthwise.kernel" => vec![g, self.n_channels, 1],
            "bn2.gamma" | "bn2.beta" | "bn2.running_mean" | "bn2.running_var" => vec![g],
            "separable.depthwise" => vec![f2, 1, c.separable_kernel],
            "separable.pointwise" => vec![f2, f2, 1],
            "bn3.gamma" | "bn3.beta" | "bn3.running_mean" | "bn3.running_var" => vec![f2],
            "dense.weight" => vec![c.n_classes, c.flat_len(self.n_times)],
            "dense.bias" => vec![c.n_classes],
            _ => Vec::new(),
        }
    }

    /// Rescales every depthwise spatial kernel and dense row whose L2 norm
    /// exceeds its bound back onto the norm ball.
    pub fn apply_max_norm(&mut self) {
        let c = self.n_channels;
        project_rows(&mut self.params.depthwise, c, self.config.depthwise_maxnorm);
        let flat = self.config.flat_len(self.n_times);
        project_rows(&mut self.params.dense_w, flat, self.config.dense_maxnorm);
    }

    pub fn check_max_norm(&self) -> Result<(), NetError> {
        let tol = 1e-9;
        for (tensor, data, row, bound) in [
            ("depthwise.kernel", &self.params.depthwise, self.n_channels, self.config.depthwise_maxnorm),
            ("dense.weight", &self.params.dense_w, self.config.flat_len(self.n_times), self.config.dense_maxnorm),
        ] {
            for r in data.chunks(row) {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > bound * (1.0 + tol) {
                    return Err(NetError::MaxNorm { tensor, norm, bound });
                }
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn scalar_records(&self) -> Vec<(String, f64)> {
        let c = &self.config;
        vec![
            ("config.F1".into(), c.f1 as f64),
            ("config.D".into(), c.d as f64),
            ("config.F2".into(), c.f2 as f64),
            ("config.temporal_kernel".into(), c.temporal_kernel as f64),
            ("config.separable_kernel".into(), c.separable_kernel as f64),
            ("config.pool1".into(), c.pool1 as f64),
            ("config.pool2".into(), c.pool2 as f64),
            ("config.dropout1".into(), c.dropout1),
            ("config.dropout2".into(), c.dropout2),
            ("config.depthwise_maxnorm".into(), c.depthwise_maxnorm),
            ("config.dense_maxnorm".into(), c.dense_maxnorm),
            ("config.n_classes".into(), c.n_classes as f64),
            ("input.n_channels".into(), self.n_channels as f64),
            ("input.n_times".into(), self.n_times as f64),
        ]
    }

    /// All tensors as `(name, dims, data)`: scalars (rank 0) describing the
    /// architecture first, then trainable tensors, then BN running stats.
    pub fn records(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> =
            self.scalar_records().into_iter().map(|(n, v)| (n, vec![], vec![v])).collect();
        for (name, t) in self.params.tensors() {
            out.push((name.to_string(), self.dims(name), t.clone()));
        }
        let r = &self.running;
        for (name, t) in [
            ("bn1.running_mean", &r.bn1_mean),
            ("bn1.running_var", &r.bn1_var),
            ("bn2.running_mean", &r.bn2_mean),
            ("bn2.running_var", &r.bn2_var),
            ("bn3.running_mean", &r.bn3_mean),
            ("bn3.running_var", &r.bn3_var),
        ] {
            out.push((name.to_string(), self.dims(name), t.clone()));
        }
        out
    }

    pub fn from_records(records: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self, NetError> {
        let get = |name: &str| -> Result<&(String, Vec<usize>, Vec<f64>), NetError> {
            records
                .iter()
                .find(|r| r.0 == name)
                .ok_or_else(|| NetError::Format(format!("missing record {name}")))
        };
        let scalar = |name: &str| -> Result<f64, NetError> {
            let r = get(name)?;
            if !r.1.is_empty() || r.2.len() != 1 {
                return Err(NetError::Format(format!("{name} must be a scalar")));
            }
            Ok(r.2[0])
        };
        let config = NetConfig {
            f1: scalar("config.F1")? as usize,
            d: scalar("config.D")? as usize,
            f2: scalar("config.F2")? as usize,
            temporal_kernel: scalar("config.temporal_kernel")? as usize,
            separable_kernel: scalar("config.separable_kernel")? as usize,
            pool1: scalar("config.pool1")? as usize,
            pool2: scalar("config.pool2")? as usize,
            dropout1: scalar("config.dropout1")?,
            dropout2: scalar("config.dropout2")?,
            depthwise_maxnorm: scalar("config.depthwise_maxnorm")?,
            dense_maxnorm: scalar("config.dense_maxnorm")?,
            n_classes: scalar("config.n_classes")? as usize,
        };
        let n_channels = scalar("input.n_channels")? as usize;
        let n_times = scalar("input.n_times")? as usize;
        let mut w = ModelWeights::init(&config, n_channels, n_times, &mut crate::seeds::rng(0))?;
        let dims: Vec<(&'static str, Vec<usize>)> =
            PARAM_NAMES.iter().map(|&n| (n, w.dims(n))).collect();
        for ((name, t), (_, want)) in w.params.tensors_mut().into_iter().zip(dims) {
            let r = get(name)?;
            if r.1 != want || r.2.len() != t.len() {
                return Err(NetError::Format(format!("{name}: dims {:?}, expected {want:?}", r.1)));
            }
            t.copy_from_slice(&r.2);
        }
        let running = [
            ("bn1.running_mean", config.f1),
            ("bn1.running_var", config.f1),
            ("bn2.running_mean", config.n_spatial()),
            ("bn2.running_var", config.n_spatial()),
            ("bn3.running_mean", config.f2),
            ("bn3.running_var", config.f2),
        ];
        let mut vals = Vec::new();
        for (name, len) in running {
            let r = get(name)?;
            if r.2.len() != len {
                return Err(NetError::Format(format!("{name}: {} values, expected {len}", r.2.len())));
            }
            vals.push(r.2.clone());
        }
        let mut it = vals.into_iter();
        w.running = Running {
            bn1_mean: it.next().unwrap(),
            bn1_var: it.next().unwrap(),
            bn2_mean: it.next().unwrap(),
            bn2_var: it.next().unwrap(),
            bn3_mean: it.next().unwrap(),
            bn3_var: it.next().unwrap(),
        };
        Ok(w)
    }
}

fn project_rows(data: &mut [f64], row: usize, bound: f64) {
    for r in data.chunks_mut(row) {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > bound {
            let s = bound / norm;
            r.iter_mut().for_each(|v| *v *= s);
        }
    }
}

// Flat tensor container:
//   magic "AIW1", version u16 = 1, n_records u32,
//   records: name_len u16, name bytes, rank u8, dims u32[rank], f64 data (product of dims, 1 for rank 0)
pub const WEIGHTS_MAGIC: [u8; 4] = *b"AIW1";

pub fn encode_records(records: &[(String, Vec<usize>, Vec<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, dims, data) in records {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>, NetError> {
    use crate::iostream::ByteReader;
    let fmt = |e: crate::iostream::FormatError| NetError::Format(e.to_string());
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic").map_err(fmt)? != WEIGHTS_MAGIC {
        return Err(NetError::Format("bad magic, expected \"AIW1\"".into()));
    }
    let version = r.u16("header").map_err(fmt)?;
    if version != 1 {
        return Err(NetError::Format(format!("unsupported version {version}")));
    }
    let n = r.u32("header").map_err(fmt)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u16("record").map_err(fmt)? as usize;
        let name = String::from_utf8(r.take(len, "record").map_err(fmt)?.to_vec())
            .map_err(|_| NetError::Format("record name is not UTF-8".into()))?;
        let rank = r.take(1, "record").map_err(fmt)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("record").map_err(fmt)? as usize);
        }
        let count: usize = dims.iter().product();
        let raw = r.take(count * 8, "record data").map_err(fmt)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, dims, data));
    }
    if r.remaining() != 0 {
        return Err(NetError::Format(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

impl ModelWeights {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode_records(&self.records())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        Self::from_records(&decode_records(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_respects_max_norm() {
        let w = ModelWeights::init(&NetConfig::default(), 8, 410, &mut crate::seeds::rng(1)).unwrap();
        w.check_max_norm().unwrap();
        assert_eq!(w.params.dense_w.len(), 2 * 16 * 12);
        assert_eq!(w.dims("dense.weight"), vec![2, 192]);
    }

    #[test]
    fn projection_rescales_long_rows() {
        let mut w = ModelWeights::init(&NetConfig::default(), 8, 410, &mut crate::seeds::rng(1)).unwrap();
        let flat = 192;
        // first dense row: norm 0.5
        for v in &mut w.params.dense_w[..flat] {
            *v = 0.5 / (flat as f64).sqrt();
        }
        w.apply_max_norm();
        let norm = w.params.dense_w[..flat].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 0.25).abs() < 1e-9);
    }

    #[test]
    fn records_roundtrip() {
        let w = ModelWeights::init(&NetConfig::default(), 4, 410, &mut crate::seeds::rng(2)).unwrap();
        let back = ModelWeights::from_bytes(&w.to_bytes()).unwrap();
        assert_eq!(back, w);
        let mut bytes = w.to_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(ModelWeights::from_bytes(&bytes).is_err());
    }
}
