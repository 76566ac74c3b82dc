//! Synthetic datasets and an IDX (MNIST-style) reader.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::GateMode;
use crate::model::{argmax_rows, Model, ModelSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, ..sample_shape]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split, provenance: String) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} labels for inputs {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index(format!("label {bad} but only {num_classes} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// Fraction of the most frequent label.
    pub fn majority_rate(&self) -> f64 {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.len().max(1) as f64
    }
}

/// Two interleaved half circles: class 0 on the upper unit half circle,
/// class 1 on the lower one shifted by `(1, -0.5)`. Classes alternate so any
/// prefix of even length is balanced.
pub fn gen_two_moons(n: usize, noise_sd: f64, seed: u64, split: Split) -> Result<Dataset> {
    if !n.is_multiple_of(2) {
        return Err(Error::Contract(format!("two-moons needs an even sample count, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd.max(0.0)).map_err(|e| Error::Contract(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y) = if class == 0 {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        let (dx, dy) = if noise_sd > 0.0 {
            (noise.sample(&mut rng), noise.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        data.push(x + dx);
        data.push(y + dy);
        labels.push(class);
    }
    Dataset::new(
        Tensor::new(vec![n, 2], data)?,
        labels,
        2,
        split,
        format!("two-moons(n={n}, noise_sd={noise_sd}, seed={seed})"),
    )
}

/// Train and test sets drawn from independent seeds.
pub fn two_moons_split(n_train: usize, n_test: usize, noise_sd: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = gen_two_moons(n_train, noise_sd, seed.wrapping_mul(2), Split::Train)?;
    let test = gen_two_moons(n_test, noise_sd, seed.wrapping_mul(2).wrapping_add(1), Split::Test)?;
    Ok((train, test))
}

/// A sparse two-class teacher network and the data it labels.
pub struct Teacher {
    pub model: Model,
    /// Nonzero pattern of the teacher weights, flat over all its layers.
    pub mask: Vec<bool>,
}

/// Labels Gaussian inputs with a `d_in → hidden → 2` teacher holding
/// exactly `⌈density · |w|⌉` nonzero weights.
pub fn gen_sparse_teacher(d_in: usize, hidden: usize, density: f64, n: usize, seed: u64) -> Result<(Dataset, Teacher)> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Contract(format!("teacher density must lie in (0, 1], got {density}")));
    }
    let spec = ModelSpec::mlp(&[d_in, hidden, 2], &[true, true])?;
    let mut model = Model::build(spec, seed)?;
    model.configure_masks(GateMode::Hard, 0.0);
    let total = model.maskable_count();
    let keep = ((density * total as f64).ceil() as usize).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7eac_4e55);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let mut mask = vec![false; total];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    let mut offset = 0;
    for g in model.groups.iter_mut() {
        let len = g.numel();
        g.alive = mask[offset..offset + len].to_vec();
        offset += len;
    }
    // Bake the mask into the weights so the teacher is sparse as stored.
    for gi in 0..model.groups.len() {
        let alive = model.groups[gi].alive.clone();
        let w = model.groups[gi].weight;
        for (v, a) in model.params[w.0].value.data_mut().iter_mut().zip(alive) {
            if !a {
                *v = 0.0;
            }
        }
    }
    let inputs: Vec<f64> = (0..n * d_in).map(|_| rng.sample(StandardNormal)).collect();
    let inputs = Tensor::new(vec![n, d_in], inputs)?;
    let mut tape = Tape::default();
    let fwd = model.forward(&mut tape, &inputs, &mut crate::model::GateCtx::inference(1.0))?;
    let labels = argmax_rows(tape.value(fwd.logits));
    let data = Dataset::new(
        inputs,
        labels,
        2,
        Split::Train,
        format!("sparse-teacher(d_in={d_in}, hidden={hidden}, density={density}, n={n}, seed={seed})"),
    )?;
    Ok((data, Teacher { model, mask }))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_be_bytes(buf))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads an IDX image file (`0x00000803`) and label file (`0x00000801`),
/// keeping at most `limit` items. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>, split: Split) -> Result<Dataset> {
    let mut img = open(images_path)?;
    let magic = read_u32_be(&mut img, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            msg: format!("bad magic 0x{magic:08X}, expected 0x{IDX_IMAGES_MAGIC:08X}"),
        });
    }
    let count = read_u32_be(&mut img, images_path)? as usize;
    let rows = read_u32_be(&mut img, images_path)? as usize;
    let cols = read_u32_be(&mut img, images_path)? as usize;

    let mut lab = open(labels_path)?;
    let magic = read_u32_be(&mut lab, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            msg: format!("bad magic 0x{magic:08X}, expected 0x{IDX_LABELS_MAGIC:08X}"),
        });
    }
    let label_count = read_u32_be(&mut lab, labels_path)? as usize;
    if label_count != count {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            msg: format!("{label_count} labels for {count} images"),
        });
    }

    let n = limit.map_or(count, |l| l.min(count));
    let mut pixels = vec![0u8; n * rows * cols];
    img.read_exact(&mut pixels).map_err(|e| Error::io(images_path, e))?;
    let mut raw_labels = vec![0u8; n];
    lab.read_exact(&mut raw_labels).map_err(|e| Error::io(labels_path, e))?;

    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(
        Tensor::new(
            vec![n, 1, rows, cols],
            pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        )?,
        labels,
        num_classes,
        split,
        format!("idx({}, {}, limit={n})", images_path.display(), labels_path.display()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn noiseless_class_zero_on_unit_half_circle() {
        let d = gen_two_moons(200, 0.0, 1, Split::Train).unwrap();
        for (i, &l) in d.labels.iter().enumerate() {
            if l == 0 {
                let (x, y) = (d.inputs.data()[2 * i], d.inputs.data()[2 * i + 1]);
                assert!((x * x + y * y - 1.0).abs() < 1e-12);
                assert!(y >= 0.0);
            }
        }
        assert_eq!(d.labels.iter().filter(|&&l| l == 0).count(), 100);
    }

    #[test]
    fn two_moons_is_deterministic() {
        let a = gen_two_moons(1000, 0.1, 3, Split::Train).unwrap();
        let b = gen_two_moons(1000, 0.1, 3, Split::Train).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn two_moons_rejects_odd_n() {
        assert!(gen_two_moons(7, 0.1, 0, Split::Train).is_err());
    }

    #[test]
    fn teacher_density() {
        let (_, t) = gen_sparse_teacher(5, 8, 1.0, 10, 1).unwrap();
        assert!(t.mask.iter().all(|&m| m));
        let total = 5 * 8 + 8 * 2;
        let (_, t) = gen_sparse_teacher(5, 8, 0.3, 10, 1).unwrap();
        assert_eq!(t.mask.iter().filter(|&&m| m).count(), (0.3f64 * total as f64).ceil() as usize);
        assert!(gen_sparse_teacher(5, 8, 0.0, 10, 1).is_err());
    }

    #[test]
    fn teacher_labels_reproducible() {
        let (a, _) = gen_sparse_teacher(4, 6, 0.5, 64, 8).unwrap();
        let (b, _) = gen_sparse_teacher(4, 6, 0.5, 64, 8).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inputs, b.inputs);
    }

    fn write_idx(dir: &Path, n: u32, magic_img: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");
        let mut f = File::create(&ip).unwrap();
        for v in [magic_img, n, 0x1C, 0x1C] {
            f.write_all(&v.to_be_bytes()).unwrap();
        }
        f.write_all(&vec![255u8; (n * 28 * 28) as usize]).unwrap();
        let mut f = File::create(&lp).unwrap();
        for v in [IDX_LABELS_MAGIC, n] {
            f.write_all(&v.to_be_bytes()).unwrap();
        }
        f.write_all(&(0..n as u8).collect::<Vec<_>>()).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_roundtrip_and_limit() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 5, IDX_IMAGES_MAGIC);
        let d = load_idx(&ip, &lp, Some(3), Split::Test).unwrap();
        assert_eq!(d.inputs.shape(), &[3, 1, 28, 28]);
        assert_eq!(d.labels, vec![0, 1, 2]);
        assert!(d.inputs.data().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn idx_bad_magic_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 2, 0xDEAD_BEEF);
        match load_idx(&ip, &lp, None, Split::Train) {
            Err(Error::Format { path, msg }) => {
                assert_eq!(path, ip);
                assert!(msg.contains("0xDEADBEEF"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 4, IDX_IMAGES_MAGIC);
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(load_idx(&ip, &lp, None, Split::Train), Err(Error::Io { .. })));
    }
}
