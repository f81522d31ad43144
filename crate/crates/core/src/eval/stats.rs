use serde::Serialize;

/// Kahan-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Mean with the standard error `s / sqrt(n)` (sample standard deviation;
/// zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStat {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl MeanStat {
    pub fn of(values: &[f64]) -> Option<MeanStat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().copied().collect::<KahanSum>().total() / n;
        let stderr = if values.len() > 1 {
            let ss = values
                .iter()
                .map(|x| (x - mean) * (x - mean))
                .collect::<KahanSum>()
                .total();
            (ss / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        Some(MeanStat {
            mean,
            stderr,
            count: values.len(),
        })
    }

    /// Sample standard deviation recovered from the standard error.
    pub fn stddev(&self) -> f64 {
        self.stderr * (self.count as f64).sqrt()
    }
}
