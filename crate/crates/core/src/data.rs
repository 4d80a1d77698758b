//! Dataset ingestion: CIFAR-10 binary files, a synthetic oriented-bar
//! generator, deterministic splits, batching, and validation sampling.
//!
//! Pruning decisions are made on a sample drawn from the validation pool,
//! which is carved out of the training images; the test split is touched
//! only by accuracy evaluation. All three splits are disjoint by example.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// CIFAR-10 binary record: 1 label byte + 3 channel planes of 32x32 bytes.
const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_HW: usize = 32;
const CIFAR_CLASSES: usize = 10;

/// Fraction of the (capped) training examples carved out per class as the
/// validation pool.
const VAL_FRACTION: f64 = 0.2;

/// One batch of images scaled to [0, 1] with class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    /// [N, C, H, W]
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// An in-memory split: flattened images plus labels and the originating
/// example ids (unique across the splits of one dataset).
#[derive(Debug, Clone)]
pub struct SplitData {
    images: Vec<f32>,
    labels: Vec<usize>,
    origin: Vec<usize>,
    image_shape: (usize, usize, usize),
}

impl SplitData {
    /// Build a split from raw row-major pixels (`n * c * h * w` values in
    /// [0, 1]) and labels; example ids are assigned sequentially.
    pub fn from_parts(
        images: Vec<f32>,
        labels: Vec<usize>,
        image_shape: (usize, usize, usize),
    ) -> Result<Self> {
        let (c, h, w) = image_shape;
        if images.len() != labels.len() * c * h * w {
            return Err(Error::shape_mismatch(
                "split data",
                labels.len() * c * h * w,
                images.len(),
            ));
        }
        let origin = (0..labels.len()).collect();
        Ok(SplitData {
            images,
            labels,
            origin,
            image_shape,
        })
    }

    pub(crate) fn with_capacity(image_shape: (usize, usize, usize), n: usize) -> Self {
        let (c, h, w) = image_shape;
        SplitData {
            images: Vec::with_capacity(n * c * h * w),
            labels: Vec::with_capacity(n),
            origin: Vec::with_capacity(n),
            image_shape,
        }
    }

    fn push(&mut self, pixels: &[f32], label: usize, origin: usize) {
        self.images.extend_from_slice(pixels);
        self.labels.push(label);
        self.origin.push(origin);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn origin_ids(&self) -> &[usize] {
        &self.origin
    }

    pub fn pixels(&self) -> &[f32] {
        &self.images
    }

    /// Assemble a batch from example indices within this split.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let (c, h, w) = self.image_shape;
        let stride = c * h * w;
        let mut images = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(&self.images[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        Batch {
            images: Tensor::new(vec![indices.len(), c, h, w], images)
                .expect("split data is consistent"),
            labels,
        }
    }

    /// Sequential batches covering the whole split (last may be short).
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        let all: Vec<usize> = (0..self.len()).collect();
        all.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }
}

/// Disjoint train / validation-pool / test splits.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: SplitData,
    pub val_pool: SplitData,
    pub test: SplitData,
    pub num_classes: usize,
}

/// A fixed sample of the validation pool, drawn once per pruning run and
/// reused by every metric and every oracle probe of that run.
#[derive(Debug, Clone)]
pub struct ValidationSample {
    pub batches: Vec<Batch>,
    pub seed: u64,
    pub total_images: usize,
    /// Indices into the validation pool, in sampled order.
    pub indices: Vec<usize>,
}

impl ValidationSample {
    pub fn n_val(&self) -> usize {
        self.batches.len()
    }
}

/// Load a desk-scale subset of the CIFAR-10 binary dataset.
///
/// Train records come from `data_batch_1.bin` .. `data_batch_5.bin`
/// (whichever exist), the test split from `test_batch.bin`. Records are
/// 1 label byte + 1024 red + 1024 green + 1024 blue bytes, row-major
/// 32x32; pixels are scaled by 1/255. Labels are remapped densely in
/// `class_subset` order. `max_per_class` caps the train-side examples per
/// class (selection seeded); the validation pool takes a fixed fraction
/// of the capped train examples.
pub fn load_cifar10(
    dir: &Path,
    class_subset: &[usize],
    max_per_class: Option<usize>,
    seed: u64,
) -> Result<DatasetSplits> {
    if class_subset.is_empty() {
        return Err(Error::Config("class_subset must not be empty".into()));
    }
    for &cls in class_subset {
        if cls >= CIFAR_CLASSES {
            return Err(Error::Config(format!(
                "unknown CIFAR-10 class id {cls} (valid: 0..=9)"
            )));
        }
    }
    let mut remap = [None::<usize>; CIFAR_CLASSES];
    for (new, &old) in class_subset.iter().enumerate() {
        if remap[old].is_some() {
            return Err(Error::Config(format!("duplicate class id {old} in class_subset")));
        }
        remap[old] = Some(new);
    }

    let image_shape = (3, CIFAR_HW, CIFAR_HW);
    let mut per_class: Vec<Vec<(usize, Vec<f32>)>> = vec![Vec::new(); class_subset.len()];
    let mut next_origin = 0usize;
    let mut found_any = false;
    for file_idx in 1..=5 {
        let path = dir.join(format!("data_batch_{file_idx}.bin"));
        if !path.exists() {
            continue;
        }
        found_any = true;
        for (label, pixels) in parse_cifar_file(&path)? {
            let origin = next_origin;
            next_origin += 1;
            if let Some(new) = remap[label] {
                per_class[new].push((origin, pixels));
            }
        }
    }
    if !found_any {
        return Err(Error::Config(format!(
            "no data_batch_*.bin files found under {}",
            dir.display()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = SplitData::with_capacity(image_shape, 0);
    let mut val_pool = SplitData::with_capacity(image_shape, 0);
    for (label, examples) in per_class.iter_mut().enumerate() {
        examples.shuffle(&mut rng);
        let keep = max_per_class.unwrap_or(usize::MAX).min(examples.len());
        let val_count = (keep as f64 * VAL_FRACTION).floor() as usize;
        for (i, (origin, pixels)) in examples.iter().take(keep).enumerate() {
            let split = if i < val_count { &mut val_pool } else { &mut train };
            split.push(pixels, label, *origin);
        }
    }

    let test_path = dir.join("test_batch.bin");
    let mut test = SplitData::with_capacity(image_shape, 0);
    if test_path.exists() {
        for (label, pixels) in parse_cifar_file(&test_path)? {
            let origin = next_origin;
            next_origin += 1;
            if let Some(new) = remap[label] {
                test.push(&pixels, new, origin);
            }
        }
    }

    Ok(DatasetSplits {
        train,
        val_pool,
        test,
        num_classes: class_subset.len(),
    })
}

/// Generate a deterministic class-conditional dataset of oriented bars.
///
/// Class `c` draws a soft bar at angle `pi * c / num_classes` with a small
/// positional jitter over a dim background, plus uniform pixel noise. The
/// classes are linearly well separated, so a small CNN learns the task to
/// well above chance. Examples are balanced by construction and split
/// 60/20/20 into train/val/test per class.
pub fn synth_dataset(
    num_classes: usize,
    size: usize,
    image_hw: usize,
    seed: u64,
) -> Result<DatasetSplits> {
    if num_classes < 2 {
        return Err(Error::Config("synth dataset needs at least 2 classes".into()));
    }
    if size < num_classes {
        return Err(Error::Config(format!(
            "synth dataset size {size} is smaller than num_classes {num_classes}"
        )));
    }
    if image_hw < 4 {
        return Err(Error::Config("synth image side must be at least 4".into()));
    }
    let image_shape = (1, image_hw, image_hw);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = SplitData::with_capacity(image_shape, size);
    let mut val_pool = SplitData::with_capacity(image_shape, size / 4);
    let mut test = SplitData::with_capacity(image_shape, size / 4);
    let mut origin = 0usize;
    for class in 0..num_classes {
        let count = size / num_classes + usize::from(class < size % num_classes);
        let test_count = count / 5;
        let val_count = count / 5;
        for i in 0..count {
            let pixels = synth_image(class, num_classes, image_hw, &mut rng);
            let split = if i < test_count {
                &mut test
            } else if i < test_count + val_count {
                &mut val_pool
            } else {
                &mut train
            };
            split.push(&pixels, class, origin);
            origin += 1;
        }
    }
    Ok(DatasetSplits {
        train,
        val_pool,
        test,
        num_classes,
    })
}

fn synth_image(class: usize, num_classes: usize, hw: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let angle = std::f64::consts::PI * class as f64 / num_classes as f64;
    // Normal of the bar line; distance to the line is |d . normal|.
    let (nx, ny) = (-angle.sin(), angle.cos());
    let jitter = hw as f64 / 5.0;
    let cx = hw as f64 / 2.0 + rng.gen_range(-jitter..=jitter);
    let cy = hw as f64 / 2.0 + rng.gen_range(-jitter..=jitter);
    let sigma = (hw as f64 / 20.0).max(0.8);
    let amplitude = rng.gen_range(0.45..=0.85);
    let mut pixels = Vec::with_capacity(hw * hw);
    for y in 0..hw {
        for x in 0..hw {
            let d = (x as f64 - cx) * nx + (y as f64 - cy) * ny;
            let bar = amplitude * (-d * d / (2.0 * sigma * sigma)).exp();
            let noise = rng.gen_range(-0.15..=0.15);
            pixels.push((0.1 + bar + noise).clamp(0.0, 1.0) as f32);
        }
    }
    pixels
}

/// Draw `total_images` examples from the validation pool uniformly without
/// replacement and chunk them into batches of `batch_size`.
pub fn sample_validation(
    splits: &DatasetSplits,
    total_images: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ValidationSample> {
    if total_images == 0 || batch_size == 0 {
        return Err(Error::Config(
            "validation sample size and batch size must be positive".into(),
        ));
    }
    if total_images % batch_size != 0 {
        return Err(Error::Config(format!(
            "batch size {batch_size} does not divide validation sample size {total_images}"
        )));
    }
    if total_images > splits.val_pool.len() {
        return Err(Error::Oversample {
            requested: total_images,
            available: splits.val_pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, splits.val_pool.len(), total_images).into_vec();
    let batches = indices
        .chunks(batch_size)
        .map(|chunk| splits.val_pool.batch(chunk))
        .collect();
    Ok(ValidationSample {
        batches,
        seed,
        total_images,
        indices,
    })
}

/// Write a synthetic dataset in the exact CIFAR-10 binary layout
/// (`data_batch_1.bin` + `test_batch.bin`), for exercising the loader and
/// the full pipeline where the real dataset is not on disk. Three-channel
/// oriented-bar patterns, one angle per class, deterministic in `seed`.
pub fn write_synth_cifar(
    dir: &Path,
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<()> {
    if num_classes < 2 || num_classes > CIFAR_CLASSES {
        return Err(Error::Config("num_classes must be in 2..=10".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let write_file = |name: &str, per_class: usize, rng: &mut ChaCha8Rng| -> Result<()> {
        let mut bytes = Vec::with_capacity(per_class * num_classes * CIFAR_RECORD_BYTES);
        for i in 0..per_class {
            let _ = i;
            for class in 0..num_classes {
                bytes.push(class as u8);
                let gray = synth_image(class, num_classes, CIFAR_HW, rng);
                // Per-channel scaling adds color structure on top of the
                // grayscale bar.
                for scale in [1.0f32, 0.7, 0.4] {
                    for &v in &gray {
                        bytes.push((v * scale * 255.0).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
        std::fs::write(dir.join(name), bytes)?;
        Ok(())
    };
    write_file("data_batch_1.bin", train_per_class, &mut rng)?;
    write_file("test_batch.bin", test_per_class, &mut rng)?;
    Ok(())
}

pub(crate) fn parse_cifar_file(path: &Path) -> Result<Vec<(usize, Vec<f32>)>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            detail: format!(
                "length {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
                bytes.len()
            ),
        });
    }
    let mut records = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES);
    for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                detail: format!("label byte {label} out of range 0..=9"),
            });
        }
        let pixels: Vec<f32> = record[1..].iter().map(|&b| b as f32 / 255.0).collect();
        records.push((label, pixels));
    }
    Ok(records)
}
