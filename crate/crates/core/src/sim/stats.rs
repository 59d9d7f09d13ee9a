use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Point estimate with a symmetric confidence half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn relative_half_width(&self) -> f64 {
        if self.mean == 0.0 {
            if self.half_width == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.half_width / self.mean.abs()
        }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn contains(&self, x: f64) -> bool {
        (self.lower()..=self.upper()).contains(&x)
    }

    /// Whether the two intervals overlap.
    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.lower() <= other.upper() && other.lower() <= self.upper()
    }
}

/// Student-t interval over i.i.d. batch means.
pub fn t_interval(samples: &[f64], confidence: f64) -> Estimate {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n.max(1) as f64;
    if n < 2 {
        return Estimate {
            mean,
            half_width: f64::INFINITY,
        };
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.5 + confidence / 2.0);
    Estimate {
        mean,
        half_width: t * (var / n as f64).sqrt(),
    }
}
