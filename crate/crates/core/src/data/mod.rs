//! Datasets, splits and mean subtraction.

mod idx;
mod synth;

pub use idx::{load_idx, write_idx, IMAGES4_MAGIC, IMAGES_MAGIC, LABELS_MAGIC};
pub use synth::{synth_dataset, synth_dataset_with, SynthParams};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Images `(N, C, H, W)` with intensities in `[0, 255]` and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "dataset images must be (N, C, H, W), got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() || labels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if images.data().iter().any(|&p| !(0.0..=255.0).contains(&p)) {
            return Err(Error::InvalidArgument(
                "intensities must lie in [0, 255]".into(),
            ));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            class_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample `(C, H, W)`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Per-channel mean intensity.
    pub fn channel_mean(&self) -> Vec<f32> {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        let mut sums = vec![0.0f64; c];
        for i in 0..self.len() {
            for (ch, chunk) in self.images.sample(i).chunks(plane).enumerate() {
                sums[ch] += chunk.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let n = (self.len() * plane) as f64;
        sums.into_iter().map(|s| (s / n) as f32).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Distributes `target` items over classes proportionally to `ideal`, never
/// exceeding `caps`: floors first, then the largest remainders.
fn allocate(ideal: &[f64], caps: &[usize], target: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = ideal
        .iter()
        .zip(caps)
        .map(|(&x, &cap)| (x.floor() as usize).min(cap))
        .collect();
    let mut order: Vec<usize> = (0..ideal.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(counts.iter().sum());
    while missing > 0 {
        let before = missing;
        for &c in &order {
            if missing == 0 {
                break;
            }
            if counts[c] < caps[c] {
                counts[c] += 1;
                missing -= 1;
            }
        }
        if missing == before {
            break;
        }
    }
    counts
}

/// Stratified, seeded train/val/test split. Every class contributes to each
/// split in proportion to its size (within one sample).
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    let fr = [spec.train, spec.val, spec.test];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || fr.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fr:?} must be nonnegative and sum to at most 1"
        )));
    }
    let n = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    for idx in &mut per_class {
        idx.shuffle(&mut rng);
    }
    let mut remaining: Vec<usize> = per_class.iter().map(Vec::len).collect();
    let mut offsets = vec![0usize; ds.num_classes];
    let mut parts: Vec<Vec<usize>> = Vec::with_capacity(3);
    for f in fr {
        let target = ((f * n as f64).round() as usize).min(remaining.iter().sum());
        let ideal: Vec<f64> = per_class.iter().map(|c| f * c.len() as f64).collect();
        let counts = allocate(&ideal, &remaining, target);
        let mut chosen = Vec::with_capacity(target);
        for (c, &k) in counts.iter().enumerate() {
            chosen.extend_from_slice(&per_class[c][offsets[c]..offsets[c] + k]);
            offsets[c] += k;
            remaining[c] -= k;
        }
        chosen.sort_unstable();
        parts.push(chosen);
    }
    for (name, p) in ["train", "val", "test"].iter().zip(&parts) {
        if p.is_empty() {
            return Err(Error::InvalidArgument(format!("{name} split is empty")));
        }
    }
    Ok(Splits {
        train: ds.subset(&parts[0]),
        val: ds.subset(&parts[1]),
        test: ds.subset(&parts[2]),
    })
}

/// Subtracts a per-channel mean from an `(N, C, H, W)` batch.
pub fn preprocess(batch: &Tensor, mean: &[f32]) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != mean.len() {
        return Err(Error::Shape(format!(
            "mean has {} channels, batch shape is {s:?}",
            mean.len()
        )));
    }
    let plane = s[2] * s[3];
    let mut out = batch.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let m = mean[i % mean.len()];
        chunk.iter_mut().for_each(|v| *v -= m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, classes: usize) -> Dataset {
        let images = Tensor::new(
            vec![n, 1, 2, 2],
            (0..n * 4).map(|i| (i % 200) as f32).collect(),
        )
        .unwrap();
        Dataset::new(images, (0..n).map(|i| i % classes).collect(), classes).unwrap()
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = toy(100, 4);
        let spec = SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 3,
        };
        let s = split(&ds, &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let again = split(&ds, &spec).unwrap();
        assert_eq!(s.train, again.train);
        assert_eq!(s.test, again.test);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        // Uneven class sizes: 0 -> 40, 1 -> 35, 2 -> 25 samples.
        let labels: Vec<usize> = (0..100)
            .map(|i| if i < 40 { 0 } else if i < 75 { 1 } else { 2 })
            .collect();
        let images = Tensor::new(vec![100, 1, 1, 1], (0..100).map(|i| i as f32).collect())
            .unwrap();
        let ds = Dataset::new(images, labels, 3).unwrap();
        let s = split(
            &ds,
            &SplitSpec {
                train: 0.7,
                val: 0.15,
                test: 0.15,
                seed: 9,
            },
        )
        .unwrap();
        // Pixel values are the original indices, so they identify samples.
        let ids = |d: &Dataset| d.images.data().iter().map(|&v| v as usize).collect::<Vec<_>>();
        let mut all = ids(&s.train);
        all.extend(ids(&s.val));
        all.extend(ids(&s.test));
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), total);
        for (c, &n_c) in [40usize, 35, 25].iter().enumerate() {
            let got = s.train.class_counts()[c] as f64;
            assert!((got - 0.7 * n_c as f64).abs() <= 1.0, "class {c}: {got}");
        }
    }

    #[test]
    fn split_rejects_oversized_fractions() {
        let ds = toy(10, 2);
        let spec = SplitSpec {
            train: 0.8,
            val: 0.3,
            test: 0.1,
            seed: 0,
        };
        assert!(split(&ds, &spec).is_err());
    }

    #[test]
    fn preprocess_subtracts_channel_mean() {
        let x = Tensor::full(vec![2, 3, 2, 2], 128.0);
        assert_eq!(preprocess(&x, &[0.0; 3]).unwrap(), x);
        let y = preprocess(&x, &[128.0; 3]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(preprocess(&x, &[1.0; 2]).is_err());
    }

    #[test]
    fn training_mean_centers_training_split() {
        let ds = synth_dataset(3, 20, 16, 5).unwrap();
        let mean = ds.channel_mean();
        let centered = preprocess(&ds.images, &mean).unwrap();
        let n = centered.len() as f64;
        let m = centered.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        assert!(m.abs() < 1e-3, "{m}");
    }
}
