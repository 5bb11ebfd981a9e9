//! Synthetic labeled datasets, semi-supervised splits and batching.

use crate::error::{Error, Result};
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;

/// How a dataset was generated; enough to evaluate the true class-conditional
/// density at any point.
#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorSpec {
    Mixture {
        k: usize,
        radius: f64,
        sigma: f64,
        dim: usize,
    },
    Moons {
        sigma: f64,
    },
    Rings {
        k: usize,
        sigma: f64,
    },
}

impl GeneratorSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            GeneratorSpec::Mixture { k, .. } => *k,
            GeneratorSpec::Moons { .. } => 2,
            GeneratorSpec::Rings { k, .. } => *k,
        }
    }

    /// Mean of class c for the mixture spec.
    pub fn mixture_mean(&self, c: usize) -> Option<Vec<f64>> {
        match self {
            GeneratorSpec::Mixture { k, radius, dim, .. } => {
                let angle = std::f64::consts::TAU * c as f64 / *k as f64;
                let mut mean = vec![0.0; *dim];
                mean[0] = radius * angle.cos();
                mean[1] = radius * angle.sin();
                Some(mean)
            }
            _ => None,
        }
    }

    /// Log of the class-conditional density p(x | y = c). Closed form for the
    /// mixture; 512-point quadrature along the generating arc for moons and
    /// rings.
    pub fn class_log_density(&self, x: &[f64], c: usize) -> f64 {
        match self {
            GeneratorSpec::Mixture { sigma, dim, .. } => {
                let mean = self.mixture_mean(c).unwrap();
                let mut sq = 0.0;
                for (xi, mi) in x.iter().zip(&mean) {
                    sq += (xi - mi) * (xi - mi);
                }
                let d = *dim as f64;
                -0.5 * sq / (sigma * sigma) - d * (sigma * std::f64::consts::TAU.sqrt()).ln()
            }
            GeneratorSpec::Moons { sigma } => {
                arc_log_density(x, *sigma, |t| moon_point(c, t * std::f64::consts::PI))
            }
            GeneratorSpec::Rings { k, sigma } => {
                let r = (c + 1) as f64 / *k as f64;
                arc_log_density(x, *sigma, |t| {
                    let a = t * std::f64::consts::TAU;
                    [r * a.cos(), r * a.sin()]
                })
            }
        }
    }
}

fn arc_log_density(x: &[f64], sigma: f64, arc: impl Fn(f64) -> [f64; 2]) -> f64 {
    // p(x|c) = (1/|T|) \int N(x; arc(t), sigma^2 I) dt over t in [0, 1]
    let steps = 512;
    let norm = 1.0 / (std::f64::consts::TAU * sigma * sigma);
    let mut acc = 0.0;
    for s in 0..steps {
        let t = (s as f64 + 0.5) / steps as f64;
        let p = arc(t);
        let sq = (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
        acc += norm * (-0.5 * sq / (sigma * sigma)).exp();
    }
    (acc / steps as f64).ln()
}

/// Canonical moons geometry, mapped into roughly (-1, 1).
fn moon_point(class: usize, t: f64) -> [f64; 2] {
    let raw = if class == 0 {
        [t.cos(), t.sin()]
    } else {
        [1.0 - t.cos(), 0.5 - t.sin()]
    };
    [(raw[0] - 0.5) * (2.0 / 3.0), (raw[1] - 0.25) * (2.0 / 3.0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Labeled sample matrix plus generation metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub tag: SplitTag,
    pub spec: GeneratorSpec,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Indices of every sample in class c.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == c)
            .map(|(i, _)| i)
            .collect()
    }
}

/// K isotropic Gaussians with means on a circle of the given radius. The
/// defaults (radius 0.75, sigma 0.08) keep essentially all mass inside
/// (-1, 1), matching the generator's tanh range.
pub fn make_mixture(
    k: usize,
    n_per_class: usize,
    radius: f64,
    sigma: f64,
    dim: usize,
    seed: u64,
    tag: SplitTag,
) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::Contract(format!(
            "make_mixture: k must be >= 2, got {k}"
        )));
    }
    if dim < 2 {
        return Err(Error::Contract(format!(
            "make_mixture: dim must be >= 2, got {dim}"
        )));
    }
    let spec = GeneratorSpec::Mixture {
        k,
        radius,
        sigma,
        dim,
    };
    let mut rng = RngStream::new(seed, streams::DATA_GEN).substream(tag_index(tag));
    let mut data = Vec::with_capacity(k * n_per_class * dim);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for c in 0..k {
        let mean = spec.mixture_mean(c).unwrap();
        for _ in 0..n_per_class {
            for m in &mean {
                data.push(m + sigma * rng.normal());
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        features: Tensor::new(vec![k * n_per_class, dim], data)?,
        labels,
        num_classes: k,
        tag,
        spec,
    })
}

/// Two interleaved half-circles (K = 2) in (-1, 1).
pub fn make_moons(n_per_class: usize, sigma: f64, seed: u64, tag: SplitTag) -> Result<Dataset> {
    let mut rng = RngStream::new(seed, streams::DATA_GEN).substream(tag_index(tag));
    let mut data = Vec::with_capacity(2 * n_per_class * 2);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for c in 0..2 {
        for _ in 0..n_per_class {
            let t = rng.uniform() * std::f64::consts::PI;
            let p = moon_point(c, t);
            data.push(p[0] + sigma * rng.normal());
            data.push(p[1] + sigma * rng.normal());
            labels.push(c);
        }
    }
    Ok(Dataset {
        features: Tensor::new(vec![2 * n_per_class, 2], data)?,
        labels,
        num_classes: 2,
        tag,
        spec: GeneratorSpec::Moons { sigma },
    })
}

/// K concentric circles; class c sits on radius (c + 1) / K.
pub fn make_rings(
    k: usize,
    n_per_class: usize,
    sigma: f64,
    seed: u64,
    tag: SplitTag,
) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::Contract(format!(
            "make_rings: k must be >= 2, got {k}"
        )));
    }
    let mut rng = RngStream::new(seed, streams::DATA_GEN).substream(tag_index(tag));
    let mut data = Vec::with_capacity(k * n_per_class * 2);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for c in 0..k {
        let r = (c + 1) as f64 / k as f64;
        for _ in 0..n_per_class {
            let a = rng.uniform() * std::f64::consts::TAU;
            data.push(r * a.cos() + sigma * rng.normal());
            data.push(r * a.sin() + sigma * rng.normal());
            labels.push(c);
        }
    }
    Ok(Dataset {
        features: Tensor::new(vec![k * n_per_class, 2], data)?,
        labels,
        num_classes: k,
        tag,
        spec: GeneratorSpec::Rings { k, sigma },
    })
}

fn tag_index(tag: SplitTag) -> u64 {
    match tag {
        SplitTag::Train => 0,
        SplitTag::Val => 1,
        SplitTag::Test => 2,
    }
}

/// Balanced labeled subset plus the remaining unlabeled pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemiSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub seed: u64,
}

impl SemiSplit {
    /// Drop the unlabeled pool (the no-unlabeled-data regime).
    pub fn without_unlabeled(mut self) -> Self {
        self.unlabeled.clear();
        self
    }
}

/// Pick `labels_per_class` samples of each class uniformly at random; the
/// remainder becomes the unlabeled pool.
pub fn split_semi(dataset: &Dataset, labels_per_class: usize, seed: u64) -> Result<SemiSplit> {
    let mut rng = RngStream::new(seed, streams::SPLIT);
    let mut labeled = Vec::with_capacity(labels_per_class * dataset.num_classes);
    let mut taken = vec![false; dataset.len()];
    for c in 0..dataset.num_classes {
        let mut idx = dataset.class_indices(c);
        if idx.len() < labels_per_class {
            return Err(Error::Contract(format!(
                "split_semi: class {c} has {} samples, need {labels_per_class}",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        for &i in idx.iter().take(labels_per_class) {
            labeled.push(i);
            taken[i] = true;
        }
    }
    labeled.sort_unstable();
    let unlabeled: Vec<usize> = (0..dataset.len()).filter(|&i| !taken[i]).collect();
    Ok(SemiSplit {
        labeled,
        unlabeled,
        seed,
    })
}

/// Epoch-shuffled index batches. The batch at global position t is a pure
/// function of (indices, m, seed, t): epoch e reshuffles with a seed derived
/// from e, so a consumer can resume mid-stream by setting the cursor.
#[derive(Debug, Clone)]
pub struct Batcher {
    indices: Vec<usize>,
    m: usize,
    seed: u64,
    cycle: bool,
    cursor: u64,
    // cached shuffle for the cursor's epoch
    epoch: u64,
    perm: Vec<usize>,
}

impl Batcher {
    pub fn new(indices: Vec<usize>, m: usize, seed: u64, cycle: bool) -> Result<Self> {
        if m == 0 {
            return Err(Error::Contract("batcher: m must be >= 1".into()));
        }
        if indices.is_empty() && cycle {
            return Err(Error::Contract(
                "batcher: cycling over an empty index set".into(),
            ));
        }
        let mut b = Batcher {
            indices,
            m,
            seed,
            cycle,
            cursor: 0,
            epoch: u64::MAX,
            perm: Vec::new(),
        };
        if !b.indices.is_empty() {
            b.load_epoch(0);
        }
        Ok(b)
    }

    /// Batches per epoch (the last batch may be short).
    pub fn batches_per_epoch(&self) -> u64 {
        self.indices.len().div_ceil(self.m) as u64
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Jump to an absolute batch position (used when resuming).
    pub fn seek(&mut self, cursor: u64) {
        self.cursor = cursor;
    }

    fn load_epoch(&mut self, epoch: u64) {
        if self.epoch == epoch {
            return;
        }
        let mut perm = self.indices.clone();
        let mut rng = RngStream::new(self.seed, streams::SHUFFLE_LABELED).substream(epoch);
        rng.shuffle(&mut perm);
        self.perm = perm;
        self.epoch = epoch;
    }

    /// The batch at absolute position t, independent of the cursor.
    pub fn batch_at(&mut self, t: u64) -> Option<Vec<usize>> {
        if self.indices.is_empty() {
            return None;
        }
        let bpe = self.batches_per_epoch();
        let (epoch, pos) = (t / bpe, (t % bpe) as usize);
        if !self.cycle && epoch > 0 {
            return None;
        }
        self.load_epoch(epoch);
        let start = pos * self.m;
        let end = (start + self.m).min(self.perm.len());
        Some(self.perm[start..end].to_vec())
    }
}

impl Iterator for Batcher {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let batch = self.batch_at(self.cursor)?;
        self.cursor += 1;
        Some(batch)
    }
}

/// i.i.d. uniform class draws (the class prior p(y)).
pub fn class_prior_sample(k: usize, n: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..n).map(|_| rng.below(k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentPolicy {
    None,
    Jitter { sigma: f64 },
}

/// Isotropic Gaussian jitter; `None` and sigma = 0 are the identity.
pub fn augment(x: &Tensor, policy: AugmentPolicy, rng: &mut RngStream) -> Tensor {
    match policy {
        AugmentPolicy::None => x.clone(),
        AugmentPolicy::Jitter { sigma } => {
            if sigma == 0.0 {
                return x.clone();
            }
            let data = x.data().iter().map(|v| v + sigma * rng.normal()).collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_counts_and_point_classes() {
        let d = make_mixture(8, 250, 0.75, 0.08, 2, 1, SplitTag::Train).unwrap();
        assert_eq!(d.len(), 2000);
        assert!(d.per_class_counts().iter().all(|&c| c == 250));

        let d0 = make_mixture(4, 10, 0.5, 0.0, 2, 1, SplitTag::Train).unwrap();
        for (i, &y) in d0.labels.iter().enumerate() {
            let mean = d0.spec.mixture_mean(y).unwrap();
            assert_eq!(d0.features.row(i), &mean[..]);
        }
    }

    #[test]
    fn mixture_sample_means_near_true_means() {
        let (k, n, sigma) = (8, 250, 0.08);
        let d = make_mixture(k, n, 0.75, sigma, 2, 7, SplitTag::Train).unwrap();
        let bound = 3.0 * sigma / (n as f64).sqrt();
        for c in 0..k {
            let idx = d.class_indices(c);
            let mean = d.spec.mixture_mean(c).unwrap();
            for dim in 0..2 {
                let m: f64 =
                    idx.iter().map(|&i| d.features.at(i, dim)).sum::<f64>() / idx.len() as f64;
                assert!((m - mean[dim]).abs() < bound, "class {c} dim {dim}");
            }
        }
    }

    #[test]
    fn datasets_are_bitwise_reproducible() {
        let a = make_mixture(4, 50, 0.75, 0.08, 2, 9, SplitTag::Train).unwrap();
        let b = make_mixture(4, 50, 0.75, 0.08, 2, 9, SplitTag::Train).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        // different tags draw from different substreams
        let c = make_mixture(4, 50, 0.75, 0.08, 2, 9, SplitTag::Test).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn noiseless_moons_lie_on_the_arcs() {
        let d = make_moons(100, 0.0, 3, SplitTag::Train).unwrap();
        for (i, &y) in d.labels.iter().enumerate() {
            // invert the affine map back to the raw circles
            let rx = d.features.at(i, 0) * 1.5 + 0.5;
            let ry = d.features.at(i, 1) * 1.5 + 0.25;
            let (r, on_arc) = if y == 0 {
                ((rx * rx + ry * ry).sqrt(), ry >= -1e-12)
            } else {
                let (cx, cy) = (rx - 1.0, ry - 0.5);
                ((cx * cx + cy * cy).sqrt(), cy <= 1e-12)
            };
            assert!((r - 1.0).abs() < 1e-12, "sample {i} radius {r}");
            assert!(on_arc, "sample {i} on wrong side of the arc");
        }
    }

    #[test]
    fn noiseless_rings_have_exact_radii() {
        let d = make_rings(3, 50, 0.0, 4, SplitTag::Train).unwrap();
        for (i, &y) in d.labels.iter().enumerate() {
            let r = (d.features.at(i, 0).powi(2) + d.features.at(i, 1).powi(2)).sqrt();
            let expect = (y + 1) as f64 / 3.0;
            assert!((r - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_density_peaks_at_class_mean() {
        let spec = GeneratorSpec::Mixture {
            k: 4,
            radius: 0.75,
            sigma: 0.1,
            dim: 2,
        };
        let mean = spec.mixture_mean(1).unwrap();
        let at_mean = spec.class_log_density(&mean, 1);
        let far = spec.class_log_density(&[0.0, 0.0], 1);
        assert!(at_mean > far);
    }

    #[test]
    fn split_is_balanced_and_disjoint() {
        let d = make_mixture(8, 100, 0.75, 0.08, 2, 5, SplitTag::Train).unwrap();
        for seed in [1u64, 2, 3] {
            let s = split_semi(&d, 4, seed).unwrap();
            assert_eq!(s.labeled.len(), 32);
            assert_eq!(s.unlabeled.len(), d.len() - 32);
            let mut counts = vec![0usize; 8];
            for &i in &s.labeled {
                counts[d.labels[i]] += 1;
            }
            assert!(counts.iter().all(|&c| c == 4));
            for &i in &s.labeled {
                assert!(!s.unlabeled.contains(&i));
            }
        }
        // different seeds give different (balanced) labeled sets
        let s1 = split_semi(&d, 4, 1).unwrap();
        let s2 = split_semi(&d, 4, 2).unwrap();
        assert_ne!(s1.labeled, s2.labeled);
    }

    #[test]
    fn split_degenerate_cases() {
        let d = make_mixture(4, 10, 0.75, 0.08, 2, 5, SplitTag::Train).unwrap();
        let full = split_semi(&d, 10, 1).unwrap();
        assert!(full.unlabeled.is_empty());
        assert!(split_semi(&d, 11, 1).is_err());
        let low = split_semi(&d, 4, 1).unwrap().without_unlabeled();
        assert!(low.unlabeled.is_empty());
        assert_eq!(low.labeled.len(), 16);
    }

    #[test]
    fn batcher_covers_one_epoch() {
        let mut b = Batcher::new((0..10).collect(), 3, 7, false).unwrap();
        let sizes: Vec<usize> = b.by_ref().map(|batch| batch.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut b2 = Batcher::new((0..10).collect(), 3, 7, false).unwrap();
        let mut seen: Vec<usize> = b2.by_ref().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batcher_fixed_seed_is_reproducible() {
        let a: Vec<Vec<usize>> = Batcher::new((0..10).collect(), 3, 7, true)
            .unwrap()
            .take(20)
            .collect();
        let b: Vec<Vec<usize>> = Batcher::new((0..10).collect(), 3, 7, true)
            .unwrap()
            .take(20)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn batcher_cycling_counts_each_index_per_epoch() {
        let n = 10usize;
        let mut counts = vec![0usize; n];
        let epochs = 100;
        let bpe = n.div_ceil(3);
        let b = Batcher::new((0..n).collect(), 3, 11, true).unwrap();
        for batch in b.take(epochs * bpe) {
            for i in batch {
                counts[i] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == epochs));
    }

    #[test]
    fn batcher_seek_matches_fresh_iteration() {
        let mut a = Batcher::new((0..10).collect(), 3, 13, true).unwrap();
        let skipped: Vec<Vec<usize>> = a.by_ref().take(9).collect();
        assert_eq!(skipped.len(), 9);
        let tail: Vec<Vec<usize>> = a.take(5).collect();

        let mut b = Batcher::new((0..10).collect(), 3, 13, true).unwrap();
        b.seek(9);
        let tail2: Vec<Vec<usize>> = b.take(5).collect();
        assert_eq!(tail, tail2);
    }

    #[test]
    fn batcher_rejects_empty_cycling() {
        assert!(Batcher::new(vec![], 3, 1, true).is_err());
        assert!(Batcher::new(vec![1], 0, 1, false).is_err());
    }

    #[test]
    fn class_prior_frequencies() {
        let mut rng = RngStream::new(5, streams::CLASS_PRIOR);
        let k = 8;
        let draws = class_prior_sample(k, 100_000, &mut rng);
        assert!(draws.iter().all(|&y| y < k));
        let mut counts = vec![0usize; k];
        for &y in &draws {
            counts[y] += 1;
        }
        for c in counts {
            assert!((c as f64 / 100_000.0 - 0.125).abs() < 0.01);
        }
        // reproducible
        let mut rng2 = RngStream::new(5, streams::CLASS_PRIOR);
        assert_eq!(draws, class_prior_sample(k, 100_000, &mut rng2));
    }

    #[test]
    fn augment_identity_and_centering() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = RngStream::new(1, streams::AUGMENT);
        assert_eq!(augment(&x, AugmentPolicy::None, &mut rng), x);
        assert_eq!(
            augment(&x, AugmentPolicy::Jitter { sigma: 0.0 }, &mut rng),
            x
        );

        let big = Tensor::zeros(&[100_000, 1]);
        let j = augment(&big, AugmentPolicy::Jitter { sigma: 0.1 }, &mut rng);
        let mean: f64 = j.data().iter().sum::<f64>() / j.len() as f64;
        // CLT bound: 3 standard errors of the mean
        assert!(mean.abs() < 3.0 * 0.1 / (j.len() as f64).sqrt());
    }

    #[test]
    fn default_mixture_features_mostly_in_unit_box() {
        let d = make_mixture(8, 250, 0.75, 0.08, 2, 42, SplitTag::Train).unwrap();
        let total = d.features.len();
        let out = d.features.data().iter().filter(|v| v.abs() >= 1.0).count();
        assert!(
            (out as f64) < 0.001 * total as f64,
            "{out} of {total} features outside (-1, 1)"
        );
    }
}
