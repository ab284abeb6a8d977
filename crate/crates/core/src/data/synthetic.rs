use rand::seq::SliceRandom;

use super::LabeledPool;
use crate::rng::{std_normal, Purpose, RngStream};

/// Gaussian-blob classification task: one unit-variance blob per label.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub means: Vec<Vec<f64>>,
    pub n_features: usize,
}

impl SyntheticTask {
    /// Places the label means so that any two are `cluster_sep` apart: on
    /// scaled coordinate axes when there are enough features, otherwise on
    /// random directions of the same radius (approximately `cluster_sep` apart).
    pub fn new(n_features: usize, n_labels: usize, cluster_sep: f64, stream: RngStream) -> Self {
        let radius = cluster_sep / std::f64::consts::SQRT_2;
        let means = if n_features >= n_labels {
            (0..n_labels)
                .map(|l| {
                    let mut m = vec![0.0; n_features];
                    m[l] = radius;
                    m
                })
                .collect()
        } else {
            let mut rng = stream.rng();
            (0..n_labels)
                .map(|_| {
                    let v: Vec<f64> = (0..n_features)
                        .map(|_| std_normal(&mut rng))
                        .collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.into_iter().map(|x| x * radius / norm).collect()
                })
                .collect()
        };
        SyntheticTask { means, n_features }
    }

    pub fn n_labels(&self) -> usize {
        self.means.len()
    }

    /// Draws `n_samples` points with labels balanced to within one.
    pub fn sample(&self, n_samples: usize, stream: RngStream) -> LabeledPool {
        let mut rng = stream.rng();
        let k = self.n_labels();
        let mut labels: Vec<usize> = (0..n_samples).map(|i| i % k).collect();
        labels.shuffle(&mut rng);
        let mut features = Vec::with_capacity(n_samples * self.n_features);
        for &l in &labels {
            for m in &self.means[l] {
                let z: f64 = std_normal(&mut rng);
                features.push(m + z);
            }
        }
        LabeledPool {
            features,
            dim: self.n_features,
            labels,
            n_labels: k,
        }
    }
}

pub fn make_synthetic_classification(
    n_samples: usize,
    n_features: usize,
    n_labels: usize,
    cluster_sep: f64,
    stream: RngStream,
) -> LabeledPool {
    let task = SyntheticTask::new(
        n_features,
        n_labels,
        cluster_sep,
        stream.with_purpose(Purpose::DataTask),
    );
    task.sample(n_samples, stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(i: u64) -> RngStream {
        RngStream::new(3, 0, i, Purpose::DataPool)
    }

    #[test]
    fn labels_are_balanced() {
        let pool = make_synthetic_classification(10_000, 5, 10, 3.0, s(0));
        assert_eq!(pool.len(), 10_000);
        for c in pool.label_counts() {
            assert!((999..=1001).contains(&c), "{c}");
        }
        let pool = make_synthetic_classification(10_003, 5, 10, 3.0, s(0));
        for c in pool.label_counts() {
            assert!((1000..=1001).contains(&c));
        }
    }

    #[test]
    fn means_are_separated() {
        for (f, l) in [(10, 4), (3, 10)] {
            let t = SyntheticTask::new(f, l, 5.0, s(1));
            let d: f64 = t.means[0]
                .iter()
                .zip(&t.means[1])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            if f >= l {
                assert!((d - 5.0).abs() < 1e-12);
            } else {
                assert!(d > 0.0 && d <= 10.0 + 1e-12);
            }
        }
    }

    #[test]
    fn zero_separation_makes_features_label_blind() {
        // Per-label feature means agree to within sampling noise.
        let pool = make_synthetic_classification(20_000, 2, 4, 0.0, s(2));
        let mut sums = vec![[0.0f64; 2]; 4];
        let counts = pool.label_counts();
        for i in 0..pool.len() {
            let r = pool.row(i);
            sums[pool.labels[i]][0] += r[0];
            sums[pool.labels[i]][1] += r[1];
        }
        for l in 0..4 {
            for j in 0..2 {
                let m = sums[l][j] / counts[l] as f64;
                // 5 standard errors with n = 5000
                assert!(m.abs() < 5.0 / (counts[l] as f64).sqrt());
            }
        }
    }

    #[test]
    fn deterministic_per_stream() {
        let a = make_synthetic_classification(100, 3, 3, 2.0, s(4));
        let b = make_synthetic_classification(100, 3, 3, 2.0, s(4));
        let c = make_synthetic_classification(100, 3, 3, 2.0, s(5));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
