use serde::{Deserialize, Serialize};

/// Flat parameter (or gradient) vector of a model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams(pub Vec<f64>);

impl ModelParams {
    pub fn zeros(dim: usize) -> Self {
        ModelParams(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.0 {
            *a *= alpha;
        }
    }

    /// `self - other`
    pub fn sub(&self, other: &ModelParams) -> ModelParams {
        debug_assert_eq!(self.dim(), other.dim());
        ModelParams(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn dot(&self, other: &ModelParams) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

impl From<Vec<f64>> for ModelParams {
    fn from(v: Vec<f64>) -> Self {
        ModelParams(v)
    }
}

/// Neumaier-compensated running sum of vectors. Accumulation order is the
/// caller's responsibility; the aggregators feed it in ascending client id.
#[derive(Debug, Clone)]
pub struct CompensatedSum {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl CompensatedSum {
    pub fn new(dim: usize) -> Self {
        CompensatedSum {
            sum: vec![0.0; dim],
            comp: vec![0.0; dim],
        }
    }

    /// Adds `weight * v`.
    pub fn add_scaled(&mut self, weight: f64, v: &ModelParams) {
        for ((s, c), x) in self.sum.iter_mut().zip(&mut self.comp).zip(&v.0) {
            let y = weight * x;
            let t = *s + y;
            if s.abs() >= y.abs() {
                *c += (*s - t) + y;
            } else {
                *c += (y - t) + *s;
            }
            *s = t;
        }
    }

    pub fn finish(self) -> ModelParams {
        ModelParams(self.sum.iter().zip(&self.comp).map(|(s, c)| s + c).collect())
    }
}

/// Neumaier-compensated scalar sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for y in values {
        let t = sum + y;
        if sum.abs() >= y.abs() {
            comp += (sum - t) + y;
        } else {
            comp += (y - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensation_recovers_cancelled_terms() {
        let vals = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(compensated_sum(vals), 2.0);
        let mut acc = CompensatedSum::new(1);
        for v in vals {
            acc.add_scaled(1.0, &ModelParams(vec![v]));
        }
        assert_eq!(acc.finish().0, vec![2.0]);
    }

    #[test]
    fn axpy_and_norm() {
        let mut a = ModelParams(vec![1.0, 2.0]);
        a.axpy(2.0, &ModelParams(vec![1.0, -1.0]));
        assert_eq!(a.0, vec![3.0, 0.0]);
        assert_eq!(a.norm(), 3.0);
        assert!(!ModelParams(vec![f64::NAN]).is_finite());
    }
}
