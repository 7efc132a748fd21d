/// Sample mean with standard error `sd / sqrt(n)`; the error is `None`
/// for fewer than two samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: Option<f64>,
}

impl MeanSe {
    /// Two-pass, in iteration order.
    pub fn of(values: &[f64]) -> MeanSe {
        let n = values.len();
        if n == 0 {
            return MeanSe { mean: f64::NAN, se: None };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return MeanSe { mean, se: None };
        }
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        MeanSe { mean, se: Some(sd / (n as f64).sqrt()) }
    }

    /// Standard error with the undefined case read as zero.
    pub fn se_or_zero(&self) -> f64 {
        self.se.unwrap_or(0.0)
    }
}

/// Least-squares line `y = a + b x`; returns `(intercept, slope)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return (my, 0.0);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_has_no_error() {
        let s = MeanSe::of(&[3.0]);
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.se, None);
    }

    #[test]
    fn constant_samples_have_zero_error() {
        let s = MeanSe::of(&[1.0; 10]);
        assert_eq!((s.mean, s.se), (1.0, Some(0.0)));
    }

    #[test]
    fn line_fit_recovers_intercept() {
        let xs = [0.02, 0.01, 0.005];
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 - 2.0 * x).collect();
        let (a, b) = linear_fit(&xs, &ys);
        assert!((a - 0.5).abs() < 1e-14 && (b + 2.0).abs() < 1e-12);
    }
}
