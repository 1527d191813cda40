//! Small image-classification datasets stored as raw bytes plus a manifest.
//!
//! Layout of a dataset directory:
//!
//! * `images.bin`: `u8` pixels, `N x C x H x W`, training images first.
//! * `labels.bin`: one little-endian `u16` per image.
//! * `manifest.json`: [`DatasetMeta`], including a SHA-256 over both files.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ghnforge_tape::{lit, Scalar};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub name: String,
    pub num_classes: usize,
    pub channels: usize,
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Per-channel statistics of the training split in `[0, 1]` units.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub sha256: String,
}

/// A labelled mini-batch, images normalised to zero mean and unit variance
/// per channel.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `B x C x H x W`.
    pub images: ArrayD<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Every sample repeated `times` times in place.
    pub fn repeated(&self, times: usize) -> Batch<T> {
        let per = self.images.len() / self.len();
        let src = self.images.as_slice().expect("standard layout");
        let mut data = Vec::with_capacity(src.len() * times);
        let mut labels = Vec::with_capacity(self.len() * times);
        for (i, &y) in self.labels.iter().enumerate() {
            for _ in 0..times {
                data.extend_from_slice(&src[i * per..(i + 1) * per]);
                labels.push(y);
            }
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] *= times;
        Batch {
            images: ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap(),
            labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    meta: DatasetMeta,
    images: Vec<u8>,
    labels: Vec<u16>,
}

/// Parameters of the procedural dataset: each class is a colour tint plus
/// a grating with a class-specific orientation and frequency, hidden under a
/// random distractor grating and pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub name: String,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub size: usize,
    pub channels: usize,
    /// Pixel noise standard deviation in `[0, 1]` units.
    pub noise: f64,
    /// Amplitude of the distractor grating relative to the class grating.
    pub distractor: f64,
    /// Standard deviation of per-image orientation jitter, radians.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synth10".into(),
            num_classes: 10,
            n_train: 20_000,
            n_val: 2_000,
            size: 32,
            channels: 3,
            noise: 0.5,
            distractor: 1.5,
            jitter: 0.3,
            seed: 0,
        }
    }
}

struct ClassStyle {
    tint: Vec<f64>,
    grating_color: Vec<f64>,
    angle: f64,
    freq: f64,
}

impl Dataset {
    pub fn synthetic(cfg: &SynthConfig) -> Result<Dataset> {
        if cfg.num_classes < 2 || cfg.n_train == 0 || cfg.size < 4 || cfg.channels == 0 {
            return Err(Error::Config(
                "synthetic data needs >= 2 classes, a training split and images of at least 4x4".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k = cfg.num_classes;
        let styles: Vec<ClassStyle> = (0..k)
            .map(|c| ClassStyle {
                tint: (0..cfg.channels).map(|_| rng.random_range(-0.12..0.12)).collect(),
                grating_color: (0..cfg.channels).map(|_| rng.random_range(0.3..1.0)).collect(),
                angle: PI * c as f64 / k as f64,
                freq: [2.0, 3.0, 4.5][c % 3],
            })
            .collect();

        let n = cfg.n_train + cfg.n_val;
        let (c, s) = (cfg.channels, cfg.size);
        let mut images = vec![0u8; n * c * s * s];
        let mut labels = Vec::with_capacity(n);
        for (i, img) in images.chunks_mut(c * s * s).enumerate() {
            let y = i % k;
            labels.push(y as u16);
            let st = &styles[y];
            let angle = st.angle + cfg.jitter * rng.sample::<f64, _>(StandardNormal);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.15..0.3);
            let d_angle = rng.random_range(0.0..PI);
            let d_freq = rng.random_range(1.5..5.0);
            let d_phase = rng.random_range(0.0..2.0 * PI);
            let d_color: Vec<f64> = (0..c).map(|_| rng.random_range(0.3..1.0)).collect();
            let brightness = rng.random_range(-0.1..0.1);
            let (ca, sa) = (angle.cos(), angle.sin());
            let (cd, sd) = (d_angle.cos(), d_angle.sin());
            for py in 0..s {
                for px in 0..s {
                    let (u, v) = (px as f64 / s as f64, py as f64 / s as f64);
                    let g = (2.0 * PI * st.freq * (u * ca + v * sa) + phase).sin();
                    let dg = (2.0 * PI * d_freq * (u * cd + v * sd) + d_phase).sin();
                    for ch in 0..c {
                        let val = 0.5
                            + brightness
                            + st.tint[ch]
                            + amp * st.grating_color[ch] * g
                            + cfg.distractor * amp * d_color[ch] * dg
                            + cfg.noise * rng.sample::<f64, _>(StandardNormal);
                        img[(ch * s + py) * s + px] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
        // Interleaved labels make every prefix balanced; shuffle within splits.
        let mut data = Dataset {
            meta: DatasetMeta {
                name: cfg.name.clone(),
                num_classes: k,
                channels: c,
                size: s,
                n_train: cfg.n_train,
                n_val: cfg.n_val,
                mean: Vec::new(),
                std: Vec::new(),
                sha256: String::new(),
            },
            images,
            labels,
        };
        data.shuffle_splits(&mut rng);
        data.finish_meta();
        Ok(data)
    }

    fn shuffle_splits(&mut self, rng: &mut ChaCha8Rng) {
        let per = self.per_image();
        let mut perm: Vec<usize> = (0..self.meta.n_train).collect();
        perm.shuffle(rng);
        let mut val: Vec<usize> = (self.meta.n_train..self.total()).collect();
        val.shuffle(rng);
        perm.extend(val);
        let mut images = Vec::with_capacity(self.images.len());
        let mut labels = Vec::with_capacity(self.labels.len());
        for &i in &perm {
            images.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        self.images = images;
        self.labels = labels;
    }

    fn finish_meta(&mut self) {
        let (c, hw) = (self.meta.channels, self.meta.size * self.meta.size);
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in self.images[..self.meta.n_train * c * hw].chunks(c * hw) {
            for ch in 0..c {
                for &p in &img[ch * hw..(ch + 1) * hw] {
                    let v = p as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (self.meta.n_train * hw) as f64;
        self.meta.mean = sum.iter().map(|s| s / count).collect();
        self.meta.std = sq
            .iter()
            .zip(&self.meta.mean)
            .map(|(q, m)| (q / count - m * m).max(1e-12).sqrt())
            .collect();
        self.meta.sha256 = checksum(&self.images, &self.labels);
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    fn per_image(&self) -> usize {
        self.meta.channels * self.meta.size * self.meta.size
    }

    fn total(&self) -> usize {
        self.meta.n_train + self.meta.n_val
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.meta.n_train,
            Split::Val => self.meta.n_val,
        }
    }

    fn offset(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => self.meta.n_train,
        }
    }

    pub fn label(&self, split: Split, i: usize) -> usize {
        self.labels[self.offset(split) + i] as usize
    }

    /// Normalised batch of the given split positions; `flips[i]` mirrors
    /// sample `i` horizontally.
    pub fn batch<T: Scalar>(&self, split: Split, indices: &[usize], flips: Option<&[bool]>) -> Batch<T> {
        let (c, s) = (self.meta.channels, self.meta.size);
        let per = self.per_image();
        let scale: Vec<T> = self.meta.std.iter().map(|sd| lit(1.0 / (255.0 * sd))).collect();
        let shift: Vec<T> = self
            .meta
            .mean
            .iter()
            .zip(&self.meta.std)
            .map(|(m, sd)| lit(-m / sd))
            .collect();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for (bi, &i) in indices.iter().enumerate() {
            assert!(i < self.len(split), "sample {i} out of range for {split:?}");
            let g = self.offset(split) + i;
            let img = &self.images[g * per..(g + 1) * per];
            let flip = flips.is_some_and(|f| f[bi]);
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let sx = if flip { s - 1 - x } else { x };
                        let p: T = lit(img[(ch * s + y) * s + sx] as f64);
                        data.push(p * scale[ch] + shift[ch]);
                    }
                }
            }
            labels.push(self.labels[g] as usize);
        }
        Batch {
            images: ArrayD::from_shape_vec(IxDyn(&[indices.len(), c, s, s]), data).unwrap(),
            labels,
        }
    }

    /// The first `n` positions of `split` (no augmentation).
    pub fn head<T: Scalar>(&self, split: Split, n: usize) -> Batch<T> {
        let idx: Vec<usize> = (0..n.min(self.len(split))).collect();
        self.batch(split, &idx, None)
    }

    /// Seeded sample of `n` distinct training positions, sorted.
    pub fn subset_ids(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = rand::seq::index::sample(&mut rng, self.meta.n_train, n.min(self.meta.n_train)).into_vec();
        ids.sort_unstable();
        ids
    }

    /// A dataset whose training split holds only the given training
    /// positions; the validation split is unchanged.
    pub fn with_train_subset(&self, ids: &[usize]) -> Dataset {
        let per = self.per_image();
        let mut images = Vec::with_capacity((ids.len() + self.meta.n_val) * per);
        let mut labels = Vec::with_capacity(ids.len() + self.meta.n_val);
        for &i in ids {
            images.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        images.extend_from_slice(&self.images[self.meta.n_train * per..]);
        labels.extend_from_slice(&self.labels[self.meta.n_train..]);
        let mut meta = self.meta.clone();
        meta.n_train = ids.len();
        meta.sha256 = checksum(&images, &labels);
        Dataset { meta, images, labels }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("images.bin"), &self.images)?;
        let labels: Vec<u8> = self.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        fs::write(dir.join("labels.bin"), labels)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    /// Loads a dataset directory and verifies sizes and checksum.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join("manifest.json");
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&mpath)?)
            .map_err(|e| Error::format(&mpath, e.to_string()))?;
        let images = fs::read(dir.join("images.bin"))?;
        let raw = fs::read(dir.join("labels.bin"))?;
        let n = meta.n_train + meta.n_val;
        if images.len() != n * meta.channels * meta.size * meta.size || raw.len() != 2 * n {
            return Err(Error::format(dir, "file sizes disagree with the manifest"));
        }
        let labels: Vec<u16> = raw.chunks(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        if labels.iter().any(|&l| l as usize >= meta.num_classes) {
            return Err(Error::format(dir, "label out of range"));
        }
        if checksum(&images, &labels) != meta.sha256 {
            return Err(Error::format(dir, "checksum mismatch"));
        }
        Ok(Dataset { meta, images, labels })
    }
}

fn checksum(images: &[u8], labels: &[u16]) -> String {
    let mut h = Sha256::new();
    h.update(images);
    for l in labels {
        h.update(l.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Endless shuffled stream of training mini-batches; reshuffles after every
/// pass. Serializable so training can resume mid-epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    flip: bool,
}

impl Sampler {
    pub fn new(n: usize, seed: u64, flip: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            rng,
            flip,
        }
    }

    /// Next `b` positions and their flip flags.
    pub fn next_indices(&mut self, b: usize) -> (Vec<usize>, Vec<bool>) {
        let mut idx = Vec::with_capacity(b);
        while idx.len() < b {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (b - idx.len()).min(self.order.len() - self.cursor);
            idx.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        let flips = (0..b).map(|_| self.flip && self.rng.random_bool(0.5)).collect();
        (idx, flips)
    }

    pub fn next_batch<T: Scalar>(&mut self, data: &Dataset, b: usize) -> Batch<T> {
        let (idx, flips) = self.next_indices(b);
        data.batch(Split::Train, &idx, Some(&flips))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::synthetic(&SynthConfig {
            n_train: 40,
            n_val: 10,
            size: 8,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_and_checksum() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let e = Dataset::load(dir.path()).unwrap();
        assert_eq!(d.meta(), e.meta());
        let mut bytes = fs::read(dir.path().join("images.bin")).unwrap();
        bytes[5] ^= 1;
        fs::write(dir.path().join("images.bin"), bytes).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn normalisation_centres_the_training_split() {
        let d = tiny();
        let b: Batch<f64> = d.head(Split::Train, 40);
        let hw = 64.0 * 40.0;
        for ch in 0..3 {
            let v = b.images.index_axis(ndarray::Axis(1), ch);
            let mean = v.sum() / hw;
            let var = v.mapv(|x| (x - mean) * (x - mean)).sum() / hw;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_mirrors_columns() {
        let d = tiny();
        let a: Batch<f64> = d.batch(Split::Val, &[3], None);
        let b: Batch<f64> = d.batch(Split::Val, &[3], Some(&[true]));
        assert_eq!(a.images[[0, 1, 2, 0]], b.images[[0, 1, 2, 7]]);
    }

    #[test]
    fn sampler_covers_every_sample_each_pass() {
        let mut s = Sampler::new(10, 1, false);
        let (mut a, _) = s.next_indices(10);
        a.sort_unstable();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
        let (b, _) = s.next_indices(15);
        assert_eq!(b.len(), 15);
    }

    #[test]
    fn subsets_are_deterministic() {
        let d = tiny();
        assert_eq!(d.subset_ids(7, 3), d.subset_ids(7, 3));
        assert_eq!(d.with_train_subset(&d.subset_ids(7, 3)).len(Split::Train), 7);
    }
}
