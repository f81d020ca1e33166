//! In-memory datasets, deterministic splits, few-shot subsampling and
//! augmentation.
//!
//! Raw samples are `u8` pixel grids (the on-disk container payload); loading
//! scales them to `[0,1]` and applies a per-channel normalization. All
//! sampling is seeded and reproducible.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample as index_sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::seeded_rng;
use crate::tensor::Tensor;

/// Undecoded samples: labels plus `u8` pixels in NCHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub class_count: usize,
    pub labels: Vec<u32>,
    pub pixels: Vec<u8>,
}

impl RawDataset {
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        class_count: usize,
        labels: Vec<u32>,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 || class_count == 0 {
            return Err(Error::Data("raw dataset with zero extent".into()));
        }
        if pixels.len() != labels.len() * c * h * w {
            return Err(Error::Data(alloc::format!(
                "pixel buffer holds {} bytes but {} samples of {}x{}x{} need {}",
                pixels.len(),
                labels.len(),
                c,
                h,
                w,
                labels.len() * c * h * w
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::Data(alloc::format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(RawDataset {
            c,
            h,
            w,
            class_count,
            labels,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-channel normalization applied after scaling pixels to `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalize {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalize {
    /// (x - 0.5) / 0.5 per channel: values in [-1, 1].
    pub fn centered(channels: usize) -> Self {
        Normalize {
            mean: vec![0.5; channels],
            std: vec![0.5; channels],
        }
    }

    /// Plain [0,1] scaling.
    pub fn unit(channels: usize) -> Self {
        Normalize {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Data(alloc::format!(
                "normalization for {} channels applied to {channels}-channel data",
                self.mean.len()
            )));
        }
        if self.std.iter().any(|&s| s == 0.0) {
            return Err(Error::Data("zero std in normalization".into()));
        }
        Ok(())
    }
}

/// Decoded, normalized dataset held fully in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    c: usize,
    h: usize,
    w: usize,
    class_count: usize,
    labels: Vec<u32>,
    images: Vec<f32>,
}

impl Dataset {
    pub fn from_raw(raw: &RawDataset, norm: &Normalize) -> Result<Dataset> {
        norm.validate(raw.c)?;
        let plane = raw.h * raw.w;
        let mut images = Vec::with_capacity(raw.pixels.len());
        for i in 0..raw.len() {
            for ch in 0..raw.c {
                let base = (i * raw.c + ch) * plane;
                for s in 0..plane {
                    let v = raw.pixels[base + s] as f32 / 255.0;
                    images.push((v - norm.mean[ch]) / norm.std[ch]);
                }
            }
        }
        Ok(Dataset {
            c: raw.c,
            h: raw.h,
            w: raw.w,
            class_count: raw.class_count,
            labels: raw.labels.clone(),
            images,
        })
    }

    pub fn from_parts(
        c: usize,
        h: usize,
        w: usize,
        class_count: usize,
        labels: Vec<u32>,
        images: Vec<f32>,
    ) -> Result<Dataset> {
        if images.len() != labels.len() * c * h * w {
            return Err(Error::Data("image buffer does not match label count".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::Data(alloc::format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            c,
            h,
            w,
            class_count,
            labels,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let sz = self.c * self.h * self.w;
        &self.images[i * sz..(i + 1) * sz]
    }

    /// New dataset holding the given samples, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let sz = self.c * self.h * self.w;
        let mut labels = Vec::with_capacity(indices.len());
        let mut images = Vec::with_capacity(indices.len() * sz);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(alloc::format!(
                    "subset index {i} out of range ({} samples)",
                    self.len()
                )));
            }
            labels.push(self.labels[i]);
            images.extend_from_slice(self.image(i));
        }
        Ok(Dataset {
            c: self.c,
            h: self.h,
            w: self.w,
            class_count: self.class_count,
            labels,
            images,
        })
    }

    /// Assembles a `[B,C,H,W]` batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<u32>)> {
        let sz = self.c * self.h * self.w;
        let mut data = Vec::with_capacity(indices.len() * sz);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(vec![indices.len(), self.c, self.h, self.w], data)?;
        Ok((t, labels))
    }

    /// Sample indices grouped by class, ascending within each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        by_class
    }
}

/// Few-shot sampling request: exactly `shots` training samples per class.
#[derive(Debug, Clone, Copy)]
pub struct FewShotSpec {
    pub shots: usize,
    pub seed: u64,
}

/// Index selection behind [`sample_few_shot`]: `shots` indices per class,
/// drawn without replacement, deterministic in the seed. Errors (naming the
/// class) when a class is too small.
pub fn few_shot_indices(labels: &[u32], class_count: usize, spec: &FewShotSpec) -> Result<Vec<usize>> {
    if spec.shots == 0 {
        return Err(Error::Config("few-shot sampling needs shots >= 1".into()));
    }
    let mut by_class = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = seeded_rng(spec.seed, 50);
    let mut picked = Vec::with_capacity(spec.shots * class_count);
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < spec.shots {
            return Err(Error::Data(alloc::format!(
                "class {class} has {} samples, fewer than {} shots",
                members.len(),
                spec.shots
            )));
        }
        let mut chosen: Vec<usize> = index_sample(&mut rng, members.len(), spec.shots)
            .into_iter()
            .map(|j| members[j])
            .collect();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    Ok(picked)
}

/// Draws `shots` samples per class without replacement, deterministically in
/// the seed.
pub fn sample_few_shot(dataset: &Dataset, spec: &FewShotSpec) -> Result<Dataset> {
    let picked = few_shot_indices(dataset.labels(), dataset.class_count(), spec)?;
    dataset.subset(&picked)
}

/// Seeded split into (train, val) with `val_fraction` of the samples held out.
pub fn split_train_val(dataset: &Dataset, val_fraction: f32, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0 < val_fraction && val_fraction < 1.0) {
        return Err(Error::Config(alloc::format!(
            "val_fraction must lie in (0,1), got {val_fraction}"
        )));
    }
    let n = dataset.len();
    let n_val = ((n as f32 * val_fraction) as usize).clamp(1, n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, 51));
    let val = dataset.subset(&order[..n_val])?;
    let train = dataset.subset(&order[n_val..])?;
    Ok((train, val))
}

// ── Augmentation ─────────────────────────────────────────────────────

/// Training-time augmentation recipe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentRecipe {
    None,
    /// Random resized crop (area scale in `[min_scale, 1]`, aspect ratio in
    /// `[3/4, 4/3]`, bilinear resize back) plus horizontal flip.
    Fgvc { min_scale: f32, flip_prob: f32 },
}

impl AugmentRecipe {
    pub fn fgvc() -> Self {
        AugmentRecipe::Fgvc {
            min_scale: 0.2,
            flip_prob: 0.5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AugmentRecipe::None => "none",
            AugmentRecipe::Fgvc { .. } => "fgvc",
        }
    }
}

/// Applies the recipe to every sample of a `[B,C,H,W]` batch in place.
/// Labels and batch shape are never altered.
pub fn augment_batch(batch: &mut Tensor, recipe: &AugmentRecipe, rng: &mut ChaCha8Rng) -> Result<()> {
    let AugmentRecipe::Fgvc { min_scale, flip_prob } = *recipe else {
        return Ok(());
    };
    let shape = batch.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape {
            op: "augment",
            detail: alloc::format!("expected NCHW batch, got {shape:?}"),
        });
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let sz = c * h * w;
    for i in 0..b {
        let img = &mut batch.data_mut()[i * sz..(i + 1) * sz];
        let (top, left, ch, cw) = sample_crop(h, w, min_scale, rng);
        if (top, left, ch, cw) != (0, 0, h, w) {
            let resized = crop_resize(img, c, h, w, top, left, ch, cw);
            img.copy_from_slice(&resized);
        }
        if rng.gen_range(0.0f32..1.0) < flip_prob {
            hflip(img, c, h, w);
        }
    }
    Ok(())
}

/// Samples (top, left, crop_h, crop_w): area scale uniform in
/// `[min_scale, 1]`, aspect ratio log-uniform in `[3/4, 4/3]`, with a
/// full-image fallback after ten rejected draws.
fn sample_crop(h: usize, w: usize, min_scale: f32, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f32;
    for _ in 0..10 {
        let target = area * rng.gen_range(min_scale..=1.0);
        let log_ratio = rng.gen_range(libm::logf(0.75)..=libm::logf(4.0 / 3.0));
        let ratio = libm::expf(log_ratio);
        let cw = libm::roundf(libm::sqrtf(target * ratio)) as usize;
        let ch = libm::roundf(libm::sqrtf(target / ratio)) as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Crops `[top..top+ch, left..left+cw]` and bilinearly resizes back to
/// `(h, w)`. With the full-image crop this is the identity up to rounding.
pub fn crop_resize(
    img: &[f32],
    c: usize,
    h: usize,
    w: usize,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(c * h * w);
    let sy_scale = ch as f32 / h as f32;
    let sx_scale = cw as f32 / w as f32;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for oy in 0..h {
            let sy = (oy as f32 + 0.5) * sy_scale - 0.5;
            let y0f = libm::floorf(sy);
            let wy = (sy - y0f).clamp(0.0, 1.0);
            let y0 = (y0f.max(0.0) as usize).min(ch - 1);
            let y1 = (y0 + 1).min(ch - 1);
            for ox in 0..w {
                let sx = (ox as f32 + 0.5) * sx_scale - 0.5;
                let x0f = libm::floorf(sx);
                let wx = (sx - x0f).clamp(0.0, 1.0);
                let x0 = (x0f.max(0.0) as usize).min(cw - 1);
                let x1 = (x0 + 1).min(cw - 1);
                let at = |y: usize, x: usize| plane[(top + y) * w + (left + x)];
                let top_row = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bot_row = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out.push(top_row * (1.0 - wy) + bot_row * wy);
            }
        }
    }
    out
}

/// Mirrors each row of each channel in place.
pub fn hflip(img: &mut [f32], c: usize, h: usize, w: usize) {
    for ci in 0..c {
        for y in 0..h {
            let row = &mut img[(ci * h + y) * w..(ci * h + y + 1) * w];
            row.reverse();
        }
    }
}

/// Splits an index range into disjoint parts by fraction; used by callers
/// that need named partitions. Every index lands in exactly one part.
pub fn partition_indices(n: usize, fractions: &[f32], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() {
        return Err(Error::Config("partition needs at least one fraction".into()));
    }
    let total: f32 = fractions.iter().sum();
    if fractions.iter().any(|&f| f <= 0.0) || (total - 1.0).abs() > 1e-5 {
        return Err(Error::Config(alloc::format!(
            "fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, 52));
    let mut out = Vec::with_capacity(fractions.len());
    let mut start = 0usize;
    for (i, &f) in fractions.iter().enumerate() {
        let take = if i + 1 == fractions.len() {
            n - start
        } else {
            ((n as f32 * f) as usize).min(n - start)
        };
        out.push(order[start..start + take].to_vec());
        start += take;
    }
    Ok(out)
}

/// Human-readable class histogram, for diagnostics.
pub fn class_histogram(dataset: &Dataset) -> String {
    let counts: Vec<usize> = dataset.class_indices().iter().map(|v| v.len()).collect();
    alloc::format!("{counts:?}")
}
