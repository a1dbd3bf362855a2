//! Small sample statistics used by the Monte Carlo reports.

#[allow(unused_imports)]
use crate::Float;

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: 0.0, std_error: 0.0, samples: 0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_error, samples: n }
    }

    /// Whether `target` lies within `k` standard errors, with an absolute
    /// floor for estimators that happen to have zero spread.
    pub fn within(&self, target: f64, k: f64, floor: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error + floor
    }
}

/// Complex-valued sample mean with the standard error of `|Ẑ − E Z|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexMeanEstimate {
    pub re: f64,
    pub im: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl ComplexMeanEstimate {
    pub fn from_samples(zs: &[(f64, f64)]) -> Self {
        let n = zs.len();
        if n == 0 {
            return Self { re: 0.0, im: 0.0, std_error: 0.0, samples: 0 };
        }
        let re = zs.iter().map(|z| z.0).sum::<f64>() / n as f64;
        let im = zs.iter().map(|z| z.1).sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = zs
                .iter()
                .map(|z| (z.0 - re) * (z.0 - re) + (z.1 - im) * (z.1 - im))
                .sum::<f64>()
                / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { re, im, std_error, samples: n }
    }

    pub fn distance_to(&self, re: f64, im: f64) -> f64 {
        ((self.re - re) * (self.re - re) + (self.im - im) * (self.im - im)).sqrt()
    }
}

/// Weights of the composite trapezoid rule on `n + 1` equispaced nodes.
pub(crate) fn trapezoid_weight(index: usize, last: usize, h: f64) -> f64 {
    if last == 0 {
        0.0
    } else if index == 0 || index == last {
        0.5 * h
    } else {
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_error_of_small_sample() {
        let e = MeanEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        // sample variance 5/3, se = sqrt(5/12)
        assert!((e.std_error - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert!(e.within(2.5 + 1.5 * e.std_error, 2.0, 0.0));
    }

    #[test]
    fn trapezoid_weights_integrate_linear_exactly() {
        let h = 0.25;
        let s: f64 = (0..=4).map(|i| trapezoid_weight(i, 4, h) * (i as f64 * h)).sum();
        assert!((s - 0.5).abs() < 1e-15);
    }
}
