use serde::{Deserialize, Serialize};

const EPS: f64 = 1e-8;

/// Running per-component mean and variance (population), merged batch by
/// batch with the parallel-variance formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNormalizer {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    /// Frozen normalizers ignore updates.
    pub frozen: bool,
}

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        Self { count: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim], frozen: false }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn var(&self) -> Vec<f64> {
        if self.count == 0.0 {
            return vec![1.0; self.dim()];
        }
        self.m2.iter().map(|m| m / self.count).collect()
    }

    pub fn update<R: AsRef<[f64]>>(&mut self, batch: &[R]) {
        if self.frozen || batch.is_empty() {
            return;
        }
        let n = batch.len() as f64;
        let d = self.dim();
        let mut bmean = vec![0.0; d];
        for row in batch {
            for (m, x) in bmean.iter_mut().zip(row.as_ref()) {
                *m += x;
            }
        }
        bmean.iter_mut().for_each(|m| *m /= n);
        let mut bm2 = vec![0.0; d];
        for row in batch {
            for ((s, x), m) in bm2.iter_mut().zip(row.as_ref()).zip(&bmean) {
                *s += (x - m) * (x - m);
            }
        }
        let total = self.count + n;
        for c in 0..d {
            let delta = bmean[c] - self.mean[c];
            self.mean[c] += delta * n / total;
            self.m2[c] += bm2[c] + delta * delta * self.count * n / total;
        }
        self.count = total;
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        if self.count == 0.0 {
            return x.to_vec();
        }
        x.iter()
            .zip(&self.mean)
            .zip(&self.m2)
            .map(|((x, m), m2)| (x - m) / (m2 / self.count + EPS).sqrt())
            .collect()
    }
}
