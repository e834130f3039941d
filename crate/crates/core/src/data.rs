//! Dataset ingestion: CIFAR-10/100 binary archives, a deterministic
//! synthetic task for desk-scale runs, train/validation splitting, and
//! seeded augmented batch iteration.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{mix, rng_from};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Label bytes per record (CIFAR-100 stores coarse then fine).
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }
}

/// Images in normalized space, channel-planar (count, C, side, side).
#[derive(Clone, Debug)]
pub struct LabeledImageSet<T> {
    pub images: Vec<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub channels: usize,
    pub side: usize,
    /// Per-channel normalization statistics the images were normalized with.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl<T: Scalar> LabeledImageSet<T> {
    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    /// First `n` samples (for subset smoke runs).
    pub fn take(mut self, n: usize) -> Result<Self> {
        if n == 0 || n > self.count() {
            return Err(Error::arg(format!("cannot take {n} of {} samples", self.count())));
        }
        self.images.truncate(n * self.image_len());
        self.labels.truncate(n);
        Ok(self)
    }

    /// Seeded, disjoint, exhaustive split.
    pub fn split_train_val(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::arg(format!("split fraction {fraction} outside (0,1)")));
        }
        let n = self.count();
        let n_train = (n as f64 * fraction) as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::arg(format!("degenerate split {n_train}/{}", n - n_train)));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_from(mix(seed, 0x5911)));
        let gather = |ids: &[usize]| -> LabeledImageSet<T> {
            let il = self.image_len();
            let mut images = Vec::with_capacity(ids.len() * il);
            let mut labels = Vec::with_capacity(ids.len());
            for &i in ids {
                images.extend_from_slice(&self.images[i * il..(i + 1) * il]);
                labels.push(self.labels[i]);
            }
            LabeledImageSet {
                images,
                labels,
                classes: self.classes,
                channels: self.channels,
                side: self.side,
                mean: self.mean.clone(),
                std: self.std.clone(),
            }
        };
        Ok((gather(&idx[..n_train]), gather(&idx[n_train..])))
    }
}

/// Computes per-channel mean/std (in f64) and normalizes in place.
fn normalize_channels<T: Scalar>(images: &mut [T], count: usize, channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    for i in 0..count {
        for c in 0..channels {
            let blk = &images[(i * channels + c) * plane..(i * channels + c + 1) * plane];
            for &v in blk {
                let v = v.to_f64_lossy();
                mean[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let m = (count * plane) as f64;
    let mut std = vec![0.0f64; channels];
    for c in 0..channels {
        mean[c] /= m;
        std[c] = (sq[c] / m - mean[c] * mean[c]).max(1e-12).sqrt();
    }
    apply_normalization(images, count, channels, plane, &mean, &std);
    (mean, std)
}

fn apply_normalization<T: Scalar>(
    images: &mut [T],
    count: usize,
    channels: usize,
    plane: usize,
    mean: &[f64],
    std: &[f64],
) {
    for i in 0..count {
        for c in 0..channels {
            let (mu, sd) = (sc::<T>(mean[c]), sc::<T>(std[c]));
            let blk = &mut images[(i * channels + c) * plane..(i * channels + c + 1) * plane];
            for v in blk.iter_mut() {
                *v = (*v - mu) / sd;
            }
        }
    }
}

fn load_cifar_bytes(path: &Path, variant: CifarVariant) -> Result<(Vec<u8>, usize)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::format(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let rec = variant.record_bytes();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        let full = bytes.len() / rec;
        return Err(Error::format(format!(
            "{}: truncated record at byte offset {} (file is {} bytes, {} bytes per record)",
            path.display(),
            full * rec,
            bytes.len(),
            rec
        )));
    }
    let n = bytes.len() / rec;
    Ok((bytes, n))
}

/// Loads CIFAR binary batch files, scales pixels to [0,1], then normalizes
/// by per-channel statistics computed from the loaded data (recorded on the
/// returned set).
pub fn load_cifar_binary<T: Scalar>(paths: &[impl AsRef<Path>], variant: CifarVariant) -> Result<LabeledImageSet<T>> {
    load_cifar_inner(paths, variant, None)
}

/// Same loader, but normalizes with externally supplied statistics (e.g.
/// test data normalized by the train-set stats).
pub fn load_cifar_binary_with_stats<T: Scalar>(
    paths: &[impl AsRef<Path>],
    variant: CifarVariant,
    mean: &[f64],
    std: &[f64],
) -> Result<LabeledImageSet<T>> {
    load_cifar_inner(paths, variant, Some((mean.to_vec(), std.to_vec())))
}

fn load_cifar_inner<T: Scalar>(
    paths: &[impl AsRef<Path>],
    variant: CifarVariant,
    stats: Option<(Vec<f64>, Vec<f64>)>,
) -> Result<LabeledImageSet<T>> {
    let rec = variant.record_bytes();
    let lb = variant.label_bytes();
    let mut images: Vec<T> = Vec::new();
    let mut labels = Vec::new();
    let inv = 1.0 / 255.0;
    for p in paths {
        let (bytes, n) = load_cifar_bytes(p.as_ref(), variant)?;
        images.reserve(n * CIFAR_PIXELS);
        labels.reserve(n);
        for r in 0..n {
            let base = r * rec;
            // CIFAR-100 records carry (coarse, fine); the fine label is used.
            let label = bytes[base + lb - 1] as usize;
            if label >= variant.classes() {
                return Err(Error::format(format!(
                    "{}: record {r} label {label} out of range 0..{}",
                    p.as_ref().display(),
                    variant.classes()
                )));
            }
            labels.push(label);
            for &b in &bytes[base + lb..base + rec] {
                images.push(sc(b as f64 * inv));
            }
        }
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let count = labels.len();
    let (mean, std) = match stats {
        Some((mean, std)) => {
            apply_normalization(&mut images, count, 3, plane, &mean, &std);
            (mean, std)
        }
        None => normalize_channels(&mut images, count, 3, plane),
    };
    Ok(LabeledImageSet { images, labels, classes: variant.classes(), channels: 3, side: CIFAR_SIDE, mean, std })
}

/// Deterministic class-conditional gratings: class c fixes an orientation
/// and spatial frequency, each image draws a random phase plus Gaussian
/// pixel noise. A small CNN separates the classes easily, which is the
/// point — desk-scale search runs need a learnable task.
pub fn make_synthetic<T: Scalar>(classes: usize, count: usize, side: usize, seed: u64, noise: f64) -> Result<LabeledImageSet<T>> {
    make_synthetic_range(classes, count, side, seed, noise, 0)
}

/// Same generator over the index range [offset, offset+count): disjoint
/// offsets give disjoint deterministic sets (e.g. a held-out test set).
pub fn make_synthetic_range<T: Scalar>(
    classes: usize,
    count: usize,
    side: usize,
    seed: u64,
    noise: f64,
    offset: usize,
) -> Result<LabeledImageSet<T>> {
    if side % 2 != 0 {
        return Err(Error::arg("synthetic image side must be even (two stride-2 reductions)"));
    }
    if classes < 2 || count == 0 {
        return Err(Error::arg("synthetic set needs >= 2 classes and > 0 samples"));
    }
    let channels = 3;
    let plane = side * side;
    let mut images: Vec<T> = Vec::with_capacity(count * channels * plane);
    let mut labels = Vec::with_capacity(count);
    let tau = std::f64::consts::TAU;
    for i in 0..count {
        let gi = offset + i;
        let label = gi % classes;
        labels.push(label);
        let mut rng = rng_from(mix(seed, 0x5e_0000 ^ gi as u64));
        let phase = tau * rng.random::<f64>();
        let theta = std::f64::consts::PI * label as f64 / classes as f64;
        let freq = 2.0 + (label % 3) as f64 * 1.5;
        let (ct, st) = (theta.cos(), theta.sin());
        for ch in 0..channels {
            let ch_shift = ch as f64 * tau / 3.0;
            for y in 0..side {
                for x in 0..side {
                    let proj = x as f64 * ct + y as f64 * st;
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    let v = (tau * freq * proj / side as f64 + phase + ch_shift).sin() + noise * z;
                    images.push(sc(v));
                }
            }
        }
    }
    let (mean, std) = normalize_channels(&mut images, count, channels, plane);
    Ok(LabeledImageSet { images, labels, classes, channels, side, mean, std })
}

/// Augmentation settings: zero-pad + random crop, horizontal flip, optional
/// cutout (a zeroed square in normalized space).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub pad: usize,
    pub flip_prob: f64,
    pub cutout: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { pad: 4, flip_prob: 0.5, cutout: None }
    }
}

impl AugmentConfig {
    pub fn validate(&self, side: usize) -> Result<()> {
        if let Some(len) = self.cutout {
            if len > side {
                return Err(Error::arg(format!("cutout length {len} exceeds image side {side}")));
            }
        }
        Ok(())
    }
}

/// Applies pad-crop / flip / cutout to one sample. Randomness is a pure
/// function of (seed, epoch, dataset index), so prefetching or reordering
/// cannot change results.
fn augment_sample<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    channels: usize,
    side: usize,
    cfg: &AugmentConfig,
    seed: u64,
    epoch: usize,
    index: usize,
) {
    let mut rng = rng_from(mix(mix(seed, 0xa06e), ((epoch as u64) << 32) | index as u64));
    let pad = cfg.pad;
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let flip = rng.random::<f64>() < cfg.flip_prob;
    for c in 0..channels {
        let splane = &src[c * side * side..(c + 1) * side * side];
        let dplane = &mut dst[c * side * side..(c + 1) * side * side];
        for y in 0..side {
            let sy = y as isize + dy;
            for x in 0..side {
                let sx0 = if flip { side - 1 - x } else { x };
                let sx = sx0 as isize + dx;
                dplane[y * side + x] = if sy >= 0 && sy < side as isize && sx >= 0 && sx < side as isize {
                    splane[sy as usize * side + sx as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
    if let Some(len) = cfg.cutout {
        let cy = rng.random_range(0..side) as isize;
        let cx = rng.random_range(0..side) as isize;
        let half = (len / 2) as isize;
        let y0 = (cy - half).max(0) as usize;
        let y1 = ((cy + half).max(0) as usize).min(side);
        let x0 = (cx - half).max(0) as usize;
        let x1 = ((cx + half).max(0) as usize).min(side);
        for c in 0..channels {
            let dplane = &mut dst[c * side * side..(c + 1) * side * side];
            for y in y0..y1 {
                for v in dplane[y * side + x0..y * side + x1].iter_mut() {
                    *v = T::zero();
                }
            }
        }
    }
}

/// Seeded batch stream: per-epoch reshuffle keyed by (seed, epoch),
/// per-sample augmentation keyed by (seed, epoch, dataset index). The final
/// partial batch is kept.
pub struct Batches<'a, T> {
    set: &'a LabeledImageSet<T>,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    augment: Option<AugmentConfig>,
    seed: u64,
    epoch: usize,
}

pub fn batches<'a, T: Scalar>(
    set: &'a LabeledImageSet<T>,
    batch_size: usize,
    augment: Option<AugmentConfig>,
    seed: u64,
    epoch: usize,
) -> Result<Batches<'a, T>> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be >= 1"));
    }
    if let Some(cfg) = &augment {
        cfg.validate(set.side)?;
    }
    let mut order: Vec<usize> = (0..set.count()).collect();
    order.shuffle(&mut rng_from(mix(mix(seed, 0xba7c), epoch as u64)));
    Ok(Batches { set, order, batch_size, cursor: 0, augment, seed, epoch })
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = (Tensor<T>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let ids = &self.order[self.cursor..end];
        self.cursor = end;
        let il = self.set.image_len();
        let mut buf = vec![T::zero(); ids.len() * il];
        let mut labels = Vec::with_capacity(ids.len());
        for (b, &i) in ids.iter().enumerate() {
            let src = &self.set.images[i * il..(i + 1) * il];
            let dst = &mut buf[b * il..(b + 1) * il];
            match &self.augment {
                Some(cfg) => augment_sample(src, dst, self.set.channels, self.set.side, cfg, self.seed, self.epoch, i),
                None => dst.copy_from_slice(src),
            }
            labels.push(self.set.labels[i]);
        }
        let t = Tensor::from_vec(vec![ids.len(), self.set.channels, self.set.side, self.set.side], buf)
            .expect("batch shape");
        Some((t, labels))
    }
}

// ── Flat binary export/import for synthetic sets ─────────────────────

const FLAT_MAGIC: &[u8; 4] = b"SYNB";
const FLAT_VERSION: u32 = 1;

/// Writes a set as: magic, version, count, classes, side (u32 LE), then
/// float32 images, then uint16 labels.
pub fn export_flat<T: Scalar>(set: &LabeledImageSet<T>, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(20 + set.images.len() * 4 + set.labels.len() * 2);
    out.extend_from_slice(FLAT_MAGIC);
    out.extend_from_slice(&FLAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.count() as u32).to_le_bytes());
    out.extend_from_slice(&(set.classes as u32).to_le_bytes());
    out.extend_from_slice(&(set.side as u32).to_le_bytes());
    for v in &set.images {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    for &l in &set.labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a flat binary set. Values are taken as stored (already normalized
/// at export time), so the recorded stats are the identity.
pub fn import_flat<T: Scalar>(path: &Path) -> Result<LabeledImageSet<T>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 || &bytes[0..4] != FLAT_MAGIC {
        return Err(Error::format(format!("{}: not a flat image set", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != FLAT_VERSION {
        return Err(Error::format(format!("{}: unsupported version {}", path.display(), u32_at(4))));
    }
    let count = u32_at(8) as usize;
    let classes = u32_at(12) as usize;
    let side = u32_at(16) as usize;
    let channels = 3;
    let img_bytes = count * channels * side * side * 4;
    let expect = 20 + img_bytes + count * 2;
    if bytes.len() != expect {
        return Err(Error::format(format!(
            "{}: expected {expect} bytes, found {} (truncated at byte {})",
            path.display(),
            bytes.len(),
            bytes.len().min(expect)
        )));
    }
    let mut images = Vec::with_capacity(count * channels * side * side);
    for i in 0..count * channels * side * side {
        let o = 20 + i * 4;
        images.push(sc(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64));
    }
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let o = 20 + img_bytes + i * 2;
        let l = u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap()) as usize;
        if l >= classes {
            return Err(Error::format(format!("{}: label {l} out of range 0..{classes}", path.display())));
        }
        labels.push(l);
    }
    Ok(LabeledImageSet { images, labels, classes, channels, side, mean: vec![0.0; 3], std: vec![1.0; 3] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar10_record_arithmetic() {
        assert_eq!(CifarVariant::Cifar10.record_bytes(), 3073);
        assert_eq!(CifarVariant::Cifar100.record_bytes(), 3074);
        // A 10,000-record CIFAR-10 batch file is exactly 30,730,000 bytes.
        assert_eq!(10_000 * CifarVariant::Cifar10.record_bytes(), 30_730_000);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = make_synthetic::<f32>(10, 200, 16, 3, 0.25).unwrap();
        let b = make_synthetic::<f32>(10, 200, 16, 3, 0.25).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 20);
        }
        let c = make_synthetic::<f32>(10, 200, 16, 4, 0.25).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synthetic_ranges_are_disjoint_extensions() {
        let train = make_synthetic::<f64>(10, 100, 16, 9, 0.2).unwrap();
        let test = make_synthetic_range::<f64>(10, 50, 16, 9, 0.2, 100).unwrap();
        // Same generator, different indices: raw patterns differ.
        assert_ne!(&train.images[..100], &test.images[..100]);
    }

    #[test]
    fn split_is_disjoint_exhaustive_seeded() {
        let set = make_synthetic::<f32>(10, 100, 16, 5, 0.2).unwrap();
        let (tr, va) = set.split_train_val(0.5, 11).unwrap();
        assert_eq!(tr.count(), 50);
        assert_eq!(va.count(), 50);
        let (tr2, _) = set.split_train_val(0.5, 11).unwrap();
        assert_eq!(tr.images, tr2.images);
        // Union of label multisets equals the original.
        let mut all: Vec<usize> = tr.labels.iter().chain(va.labels.iter()).copied().collect();
        let mut orig = set.labels.clone();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
        assert!(set.split_train_val(0.0, 1).is_err());
        assert!(set.split_train_val(1.0, 1).is_err());
    }

    #[test]
    fn batches_are_reproducible_and_keep_partial() {
        let set = make_synthetic::<f32>(10, 50, 16, 5, 0.2).unwrap();
        let a: Vec<_> = batches(&set, 16, None, 7, 0).unwrap().collect();
        let b: Vec<_> = batches(&set, 16, None, 7, 0).unwrap().collect();
        assert_eq!(a.len(), 4);
        assert_eq!(a[3].1.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0.to_vec(), y.0.to_vec());
            assert_eq!(x.1, y.1);
        }
        let c: Vec<_> = batches(&set, 16, None, 7, 1).unwrap().collect();
        assert_ne!(a[0].1, c[0].1, "epochs reshuffle");
    }

    #[test]
    fn flip_is_an_involution() {
        let set = make_synthetic::<f64>(4, 4, 8, 2, 0.1).unwrap();
        let src = &set.images[0..set.image_len()];
        let flip_x = |v: &[f64]| -> Vec<f64> {
            let mut out = v.to_vec();
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        out[(c * 8 + y) * 8 + x] = v[(c * 8 + y) * 8 + (7 - x)];
                    }
                }
            }
            out
        };
        assert_eq!(flip_x(&flip_x(src)), src);
    }

    #[test]
    fn cutout_zeroes_clipped_square() {
        let mut set = make_synthetic::<f64>(4, 8, 16, 2, 0.1).unwrap();
        // Make every pixel nonzero so zeroes are attributable to cutout.
        for v in set.images.iter_mut() {
            *v = v.abs() + 1.0;
        }
        let cfg = AugmentConfig { pad: 0, flip_prob: 0.0, cutout: Some(8) };
        let (x, _) = batches(&set, 8, Some(cfg), 3, 0).unwrap().next().unwrap();
        let v = x.to_vec();
        let il = set.image_len();
        for b in 0..8 {
            let zeros = v[b * il..(b + 1) * il].iter().filter(|&&p| p == 0.0).count();
            // Clipped square area per channel: between (len/2)^2 and len^2.
            assert!(zeros % 3 == 0);
            let per_ch = zeros / 3;
            assert!((16..=64).contains(&per_ch), "sample {b}: {per_ch} zeroed pixels");
        }
    }

    #[test]
    fn augment_preserves_shape_and_label() {
        let set = make_synthetic::<f32>(10, 30, 16, 5, 0.2).unwrap();
        let cfg = AugmentConfig::default();
        let raw: Vec<_> = batches(&set, 30, None, 7, 0).unwrap().collect();
        let aug: Vec<_> = batches(&set, 30, Some(cfg), 7, 0).unwrap().collect();
        assert_eq!(raw[0].0.shape(), aug[0].0.shape());
        assert_eq!(raw[0].1, aug[0].1);
    }

    #[test]
    fn cifar_loader_round_trip_and_errors() {
        let dir = std::env::temp_dir().join(format!("cifar_rt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        // Two synthetic records.
        let mut bytes = Vec::new();
        bytes.push(3u8);
        bytes.extend((0..3072u32).map(|i| (i % 251) as u8));
        bytes.push(7u8);
        bytes.extend((0..3072u32).map(|i| (i * 3 % 256) as u8));
        let good = dir.join("batch.bin");
        std::fs::write(&good, &bytes).unwrap();
        let set = load_cifar_binary::<f64>(&[&good], CifarVariant::Cifar10).unwrap();
        assert_eq!(set.count(), 2);
        assert_eq!(set.labels, vec![3, 7]);
        // Un-normalize and compare to the raw pixel bytes.
        let plane = 1024;
        for c in 0..3 {
            for j in 0..plane {
                let v = set.images[c * plane + j] * set.std[c] + set.mean[c];
                let orig = ((c * plane + j) % 251) as f64 / 255.0;
                assert!((v - orig).abs() < 1e-9);
            }
        }

        let truncated = dir.join("trunc.bin");
        std::fs::write(&truncated, &bytes[..4000]).unwrap();
        let err = load_cifar_binary::<f64>(&[&truncated], CifarVariant::Cifar10).unwrap_err();
        assert!(err.to_string().contains("byte offset 3073"), "{err}");

        let mut bad = bytes.clone();
        bad[0] = 10;
        let badf = dir.join("bad.bin");
        std::fs::write(&badf, &bad).unwrap();
        assert!(load_cifar_binary::<f64>(&[&badf], CifarVariant::Cifar10).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn flat_binary_round_trip() {
        let set = make_synthetic::<f32>(6, 12, 8, 2, 0.3).unwrap();
        let path = std::env::temp_dir().join(format!("flat_rt_{}.bin", std::process::id()));
        export_flat(&set, &path).unwrap();
        let back = import_flat::<f32>(&path).unwrap();
        assert_eq!(back.count(), 12);
        assert_eq!(back.classes, 6);
        assert_eq!(back.side, 8);
        assert_eq!(back.labels, set.labels);
        assert_eq!(back.images, set.images);
        std::fs::remove_file(&path).ok();
    }
}
