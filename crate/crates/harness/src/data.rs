//! Image classification data for desk-scale experiments.
//!
//! The bundled task is procedural: each of eight classes is a sinusoidal
//! grating with a class-specific orientation and frequency, drawn with a
//! random phase, contrast and color mix under additive noise. External data
//! can be supplied as a directory of tensor files.

use std::f64::consts::PI;
use std::path::Path;

use tqt_core::io::{read_tensor, write_tensor};
use tqt_core::scalar::DType;
use tqt_core::{IntTensor, Rng, Tensor64};

use crate::error::{HarnessError, Result};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const CLASSES: usize = 8;

/// File names inside a dataset directory. Images are `[N, H, W, C]` float
/// tensors (f32 or f64), labels are `[N]` i32 tensors.
pub const TRAIN_X: &str = "train_x.tqt";
pub const TRAIN_Y: &str = "train_y.tqt";
pub const VAL_X: &str = "val_x.tqt";
pub const VAL_Y: &str = "val_y.tqt";

/// Images in NHWC layout with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor64,
    pub y: Vec<usize>,
}

impl Split {
    pub fn new(x: Tensor64, y: Vec<usize>) -> Result<Self> {
        if x.rank() != 4 || x.shape()[0] != y.len() {
            return Err(HarnessError::Data(format!(
                "images {:?} do not match {} labels",
                x.shape(),
                y.len()
            )));
        }
        Ok(Split { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Shape of one image, `[H, W, C]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor64, Vec<usize>) {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.image_shape());
        let x = Tensor64::new(shape, data).expect("gathered batch matches its shape");
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }

    /// Consecutive batches of at most `size` samples in storage order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = (Tensor64, Vec<usize>)> + '_ {
        let n = self.len();
        (0..n.div_ceil(size)).map(move |b| {
            let idx: Vec<usize> = (b * size..((b + 1) * size).min(n)).collect();
            self.batch(&idx)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub classes: usize,
}

/// Parameters of the bundled grating task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub train: usize,
    pub val: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train: 4800,
            val: 2000,
            noise: 1.5,
            seed: 0,
        }
    }
}

fn grating(rng: &mut Rng, class: usize, noise: f64) -> Vec<f64> {
    let angle = (class % 4) as f64 * PI / 4.0 + rng.uniform_range(-0.15, 0.15);
    let cycles = if class < 4 { 2.5 } else { 4.5 } * rng.uniform_range(0.9, 1.1);
    let k = 2.0 * PI * cycles / IMAGE_SIZE as f64;
    let (kx, ky) = (k * angle.cos(), k * angle.sin());
    let phase = rng.uniform_range(0.0, 2.0 * PI);
    let contrast = rng.uniform_range(0.5, 1.0);
    let mut color = [0.0; CHANNELS];
    for c in &mut color {
        *c = rng.uniform_range(0.2, 1.0);
    }
    let offset = rng.uniform_range(-0.3, 0.3);
    let mut px = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * CHANNELS);
    for h in 0..IMAGE_SIZE {
        for w in 0..IMAGE_SIZE {
            let v = contrast * (kx * w as f64 + ky * h as f64 + phase).sin();
            for c in color {
                px.push(offset + c * v + noise * rng.normal());
            }
        }
    }
    px
}

fn synthetic_split(rng: &mut Rng, n: usize, noise: f64) -> Split {
    let mut data = Vec::with_capacity(n * IMAGE_SIZE * IMAGE_SIZE * CHANNELS);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = if i < CLASSES { i } else { rng.below(CLASSES) };
        data.extend(grating(rng, class, noise));
        y.push(class);
    }
    let x = Tensor64::new(vec![n, IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data).expect("synthetic shape");
    Split { x, y }
}

/// Generates the bundled task; the same config always yields the same data.
pub fn synthetic(cfg: &SyntheticConfig) -> Dataset {
    let mut rng = Rng::new(cfg.seed);
    let mut train_rng = rng.fork();
    let mut val_rng = rng.fork();
    Dataset {
        train: synthetic_split(&mut train_rng, cfg.train, cfg.noise),
        val: synthetic_split(&mut val_rng, cfg.val, cfg.noise),
        classes: CLASSES,
    }
}

/// Reads an f32 or f64 tensor file as f64.
pub fn read_real_tensor(path: &Path) -> Result<Tensor64> {
    let bytes = std::fs::read(path)?;
    match tqt_core::io::peek_dtype(&bytes)? {
        DType::F32 => Ok(tqt_core::io::decode::<f32>(&bytes)?.cast::<f64>()),
        DType::F64 => Ok(tqt_core::io::decode::<f64>(&bytes)?),
        other => Err(HarnessError::Data(format!(
            "{}: expected f32 or f64 values, found {other:?}",
            path.display()
        ))),
    }
}

fn read_images(path: &Path) -> Result<Tensor64> {
    let t = read_real_tensor(path)?;
    if t.rank() != 4 {
        return Err(HarnessError::Data(format!(
            "{}: images must be [N, H, W, C], found {:?}",
            path.display(),
            t.shape()
        )));
    }
    Ok(t)
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let t: IntTensor = read_tensor(path)?;
    t.data()
        .iter()
        .map(|&l| {
            usize::try_from(l).map_err(|_| HarnessError::Data(format!("{}: negative label {l}", path.display())))
        })
        .collect()
}

/// Reads a dataset directory holding [`TRAIN_X`], [`TRAIN_Y`], [`VAL_X`]
/// and [`VAL_Y`].
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let train = Split::new(read_images(&dir.join(TRAIN_X))?, read_labels(&dir.join(TRAIN_Y))?)?;
    let val = Split::new(read_images(&dir.join(VAL_X))?, read_labels(&dir.join(VAL_Y))?)?;
    if train.image_shape() != val.image_shape() {
        return Err(HarnessError::Data(format!(
            "train images {:?} and validation images {:?} differ in shape",
            train.image_shape(),
            val.image_shape()
        )));
    }
    let classes = train.y.iter().chain(&val.y).max().map_or(0, |m| m + 1);
    Ok(Dataset { train, val, classes })
}

pub fn save_dir(data: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let labels = |y: &[usize]| IntTensor::from_vec(y.iter().map(|&l| l as i32).collect());
    write_tensor(dir.join(TRAIN_X), &data.train.x)?;
    write_tensor(dir.join(TRAIN_Y), &labels(&data.train.y))?;
    write_tensor(dir.join(VAL_X), &data.val.x)?;
    write_tensor(dir.join(VAL_Y), &labels(&data.val.y))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        synthetic(&SyntheticConfig {
            train: 64,
            val: 16,
            ..SyntheticConfig::default()
        })
    }

    #[test]
    fn synthetic_is_deterministic_and_covers_every_class() {
        let a = small();
        assert_eq!(a, small());
        assert_eq!(a.train.x.shape(), &[64, 32, 32, 3]);
        let mut seen = [false; CLASSES];
        for &l in &a.train.y {
            seen[l] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn batches_gather_the_requested_images() {
        let d = small();
        let (x, y) = d.train.batch(&[3, 0]);
        let per = 32 * 32 * 3;
        assert_eq!(&x.data()[..per], &d.train.x.data()[3 * per..4 * per]);
        assert_eq!(y, vec![d.train.y[3], d.train.y[0]]);
        let sizes: Vec<usize> = d.val.chunks(6).map(|(_, y)| y.len()).collect();
        assert_eq!(sizes, vec![6, 6, 4]);
    }

    #[test]
    fn directory_round_trip() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dir(&d, dir.path()).unwrap();
        let back = load_dir(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn mismatched_labels_are_rejected() {
        let x = Tensor64::zeros(&[2, 4, 4, 1]);
        assert!(Split::new(x, vec![0]).is_err());
    }
}
