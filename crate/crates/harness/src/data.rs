//! Synthetic tiered classification data and its on-disk layout.
//!
//! Easy classes are a fixed prototype plus noise, so a linear model separates
//! them. Hard classes draw one of several prototypes and flip its sign at
//! random: their class mean is zero and only nonlinear features (the
//! magnitude of the match against each prototype) identify them.
//!
//! Directory layout written by [`save_dataset`]:
//!
//! ```text
//! index.txt   text index: `TNDS 1` header line, then `key = value` lines
//!             (shape, classes, easy_classes, seed, train, val)
//! train.bin   records for the training split
//! val.bin     records for the validation split
//! ```
//!
//! Each `.bin` file is little-endian: magic `TNDS`, u32 version, u32 record
//! count, u32 rank, rank × u32 dims, then per record a u32 label followed by
//! the sample as f32 values in row-major order.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use tnn_core::rng::seeded;
use tnn_core::tensor::{Graph, OptimAlgo, Optimizer};
use tnn_core::tmodule::{ArchSpec, LayerSpec, TNetwork};
use tnn_core::trainer::Samples;
use tnn_core::Tensor;

use crate::config::{Config, ConfigError};

const MAGIC: &[u8; 4] = b"TNDS";
const VERSION: u32 = 1;

#[derive(Debug)]
pub enum DataError {
    Io(io::Error),
    Format(String),
    Spec(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "dataset i/o: {e}"),
            DataError::Format(m) => write!(f, "malformed dataset: {m}"),
            DataError::Spec(m) => write!(f, "invalid dataset spec: {m}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<io::Error> for DataError {
    fn from(e: io::Error) -> Self {
        DataError::Io(e)
    }
}

impl From<ConfigError> for DataError {
    fn from(e: ConfigError) -> Self {
        DataError::Spec(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub classes: usize,
    /// Classes `0..easy_classes` are easy, the rest hard.
    pub easy_classes: usize,
    pub shape: Vec<usize>,
    pub samples_per_class: usize,
    pub easy_amplitude: f64,
    pub hard_amplitude: f64,
    pub noise: f64,
    /// Prototypes per hard class; each sample draws one.
    pub hard_modes: usize,
    pub val_fraction: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            classes: 10,
            easy_classes: 8,
            shape: vec![1, 8, 8],
            samples_per_class: 1000,
            easy_amplitude: 2.0,
            hard_amplitude: 4.0,
            noise: 0.5,
            hard_modes: 16,
            val_fraction: 0.2,
        }
    }
}

pub const SPEC_KEYS: &[&str] = &[
    "data.classes",
    "data.easy_classes",
    "data.shape",
    "data.samples_per_class",
    "data.easy_amplitude",
    "data.hard_amplitude",
    "data.noise",
    "data.hard_modes",
    "data.val_fraction",
];

impl DataSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.easy_classes > self.classes {
            return bad("easy_classes exceeds classes");
        }
        if self.shape.is_empty() || self.shape.contains(&0) {
            return bad("shape must be nonempty with positive dims");
        }
        if self.hard_modes == 0 {
            return bad("hard_modes must be >= 1");
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be >= 1");
        }
        let amps = [self.easy_amplitude, self.hard_amplitude, self.noise];
        if amps.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad("amplitudes and noise must be finite and >= 0");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must be in (0, 1)");
        }
        Ok(())
    }

    /// Reads `data.*` keys; missing keys keep their defaults.
    pub fn from_config(cfg: &Config) -> Result<Self, DataError> {
        let d = DataSpec::default();
        let shape = match cfg.get_str("data.shape") {
            None => d.shape,
            Some(s) => parse_shape(s).ok_or_else(|| DataError::Spec(format!("bad shape `{s}`")))?,
        };
        let spec = DataSpec {
            classes: cfg.get_or("data.classes", d.classes, "integer")?,
            easy_classes: cfg.get_or("data.easy_classes", d.easy_classes, "integer")?,
            shape,
            samples_per_class: cfg.get_or("data.samples_per_class", d.samples_per_class, "integer")?,
            easy_amplitude: cfg.get_or("data.easy_amplitude", d.easy_amplitude, "number")?,
            hard_amplitude: cfg.get_or("data.hard_amplitude", d.hard_amplitude, "number")?,
            noise: cfg.get_or("data.noise", d.noise, "number")?,
            hard_modes: cfg.get_or("data.hard_modes", d.hard_modes, "integer")?,
            val_fraction: cfg.get_or("data.val_fraction", d.val_fraction, "number")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn features(&self) -> usize {
        self.shape.iter().product()
    }
}

/// `1x8x8` or `1 8 8`.
pub fn parse_shape(s: &str) -> Option<Vec<usize>> {
    let dims: Option<Vec<usize>> = s
        .split(|c: char| c == 'x' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().ok())
        .collect();
    dims.filter(|d| !d.is_empty() && !d.contains(&0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Samples,
    pub val: Samples,
    pub classes: usize,
    pub easy_classes: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn is_easy(&self, label: usize) -> bool {
        label < self.easy_classes
    }
}

/// Draws a class-balanced dataset and splits it by a seeded shuffle.
pub fn generate(spec: &DataSpec, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = seeded(seed);
    let d = spec.features();
    let modes = |c: usize| {
        if c < spec.easy_classes {
            1
        } else {
            spec.hard_modes
        }
    };
    let prototypes: Vec<Vec<Vec<f32>>> = (0..spec.classes)
        .map(|c| {
            (0..modes(c))
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let rms = (v.iter().map(|x| x * x).sum::<f64>() / d as f64).sqrt();
                    v.iter().map(|x| (x / rms) as f32).collect()
                })
                .collect()
        })
        .collect();
    let n = spec.classes * spec.samples_per_class;
    let mut records: Vec<(usize, Vec<f32>)> = Vec::with_capacity(n);
    for class in 0..spec.classes {
        for _ in 0..spec.samples_per_class {
            let (amp, sign) = if class < spec.easy_classes {
                (spec.easy_amplitude, 1.0)
            } else {
                (spec.hard_amplitude, if rng.gen::<bool>() { 1.0 } else { -1.0 })
            };
            let mode = rng.gen_range(0..modes(class));
            let x = prototypes[class][mode]
                .iter()
                .map(|&p| (sign * amp * p as f64 + spec.noise * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            records.push((class, x));
        }
    }
    records.shuffle(&mut rng);
    let n_val = ((n as f64) * spec.val_fraction).round() as usize;
    let to_samples = |rs: &[(usize, Vec<f32>)]| -> Samples {
        let mut shape = vec![rs.len()];
        shape.extend_from_slice(&spec.shape);
        let data = rs.iter().flat_map(|(_, x)| x.iter().copied()).collect();
        Samples::new(
            Tensor::new(shape, data).expect("sized"),
            rs.iter().map(|(y, _)| *y).collect(),
        )
        .expect("sized")
    };
    Ok(Dataset {
        train: to_samples(&records[n_val..]),
        val: to_samples(&records[..n_val]),
        classes: spec.classes,
        easy_classes: spec.easy_classes,
        seed,
    })
}

fn write_split(path: &Path, s: &Samples) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(16 + s.x().numel() * 4 + s.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(s.sample_shape().len() as u32).to_le_bytes());
    for &dim in s.sample_shape() {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    let d: usize = s.sample_shape().iter().product();
    for (i, &y) in s.labels().iter().enumerate() {
        buf.extend_from_slice(&(y as u32).to_le_bytes());
        for v in &s.x().data()[i * d..(i + 1) * d] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| DataError::Format("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_split(path: &Path) -> Result<Samples, DataError> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| DataError::Format("file too short".into()))?;
    if &magic != MAGIC {
        return Err(DataError::Format(format!("{} is not a dataset file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DataError::Format(format!("unsupported dataset version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let rank = read_u32(&mut r)? as usize;
    let shape: Vec<usize> = (0..rank)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<_, _>>()?;
    let d: usize = shape.iter().product();
    if r.len() != n * (4 + 4 * d) {
        return Err(DataError::Format(format!(
            "expected {} record bytes, found {}",
            n * (4 + 4 * d),
            r.len()
        )));
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for rec in r.chunks_exact(4 + 4 * d) {
        labels.push(u32::from_le_bytes(rec[..4].try_into().unwrap()) as usize);
        data.extend(
            rec[4..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
    }
    let mut full = vec![n];
    full.extend(shape);
    Samples::new(
        Tensor::new(full, data).map_err(|e| DataError::Format(e.to_string()))?,
        labels,
    )
    .map_err(|e| DataError::Format(e.to_string()))
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    write_split(&dir.join("train.bin"), &ds.train)?;
    write_split(&dir.join("val.bin"), &ds.val)?;
    let shape: Vec<String> = ds.train.sample_shape().iter().map(|d| d.to_string()).collect();
    let index = format!(
        "TNDS {VERSION}\nshape = {}\nclasses = {}\neasy_classes = {}\nseed = {}\ntrain = train.bin {}\nval = val.bin {}\n",
        shape.join("x"),
        ds.classes,
        ds.easy_classes,
        ds.seed,
        ds.train.len(),
        ds.val.len()
    );
    fs::write(dir.join("index.txt"), index)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(dir.join("index.txt"))?;
    let (header, body) = text.split_once('\n').unwrap_or((&text, ""));
    if header.trim() != format!("TNDS {VERSION}") {
        return Err(DataError::Format(format!(
            "unexpected index header `{}`",
            header.trim()
        )));
    }
    let cfg = Config::parse(body)?;
    let split = |key: &str| -> Result<Samples, DataError> {
        let entry = cfg
            .get_str(key)
            .ok_or_else(|| DataError::Format(format!("index lacks `{key}`")))?;
        let (file, count) = entry
            .split_once(' ')
            .ok_or_else(|| DataError::Format(format!("bad `{key}` entry")))?;
        let s = read_split(&dir.join(file.trim()))?;
        if count.trim().parse::<usize>().ok() != Some(s.len()) {
            return Err(DataError::Format(format!("`{key}` count disagrees with {file}")));
        }
        Ok(s)
    };
    let ds = Dataset {
        train: split("train")?,
        val: split("val")?,
        classes: cfg
            .get("classes", "integer")?
            .ok_or_else(|| DataError::Format("index lacks `classes`".into()))?,
        easy_classes: cfg.get_or("easy_classes", 0, "integer")?,
        seed: cfg.get_or("seed", 0, "integer")?,
    };
    let declared = cfg.get_str("shape").and_then(parse_shape);
    if declared.as_deref() != Some(ds.train.sample_shape()) || ds.train.sample_shape() != ds.val.sample_shape() {
        return Err(DataError::Format("sample shapes disagree with the index".into()));
    }
    if ds
        .train
        .labels()
        .iter()
        .chain(ds.val.labels())
        .any(|&y| y >= ds.classes)
    {
        return Err(DataError::Format("label out of range".into()));
    }
    Ok(ds)
}

/// Per-class validation accuracy of a multinomial logistic regression
/// trained on the raw pixels.
pub fn linear_probe(ds: &Dataset, epochs: usize, seed: u64) -> Vec<f64> {
    let spec = ArchSpec {
        input: ds.train.sample_shape().to_vec(),
        layers: vec![LayerSpec::Flatten, LayerSpec::Dense { out: ds.classes }],
    };
    let mut rng = seeded(seed);
    let mut net: TNetwork = TNetwork::build(&spec, &mut rng).expect("valid probe");
    let mut opt = Optimizer::new(OptimAlgo::adam(), 1e-2).expect("valid lr");
    let mut idx: Vec<usize> = (0..ds.train.len()).collect();
    for _ in 0..epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(64) {
            let (x, y) = ds.train.batch(chunk);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let (logits, params) = net.forward_graph(&mut g, xv, &[], true).expect("probe forward");
            let loss = g.softmax_cross_entropy(logits, &y, None).expect("probe loss");
            g.backward(loss).expect("probe backward");
            let grads: Vec<Vec<f32>> = params.iter().map(|&p| g.grad(p).unwrap().to_vec()).collect();
            opt.step(&mut net.params_mut(), &grads).expect("probe step");
        }
    }
    let pred = net.predict(ds.val.x(), &[]).expect("probe predict");
    let mut right = vec![0usize; ds.classes];
    let mut total = vec![0usize; ds.classes];
    for (&p, &y) in pred.iter().zip(ds.val.labels()) {
        total[y] += 1;
        right[y] += (p == y) as usize;
    }
    right
        .iter()
        .zip(&total)
        .map(|(&r, &t)| r as f64 / t.max(1) as f64)
        .collect()
}
