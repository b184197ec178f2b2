//! Small sample statistics used by the evaluation harness.

/// Mean and standard error of the mean (sample std / sqrt(n)).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn mean_se(xs: &[f64]) -> MeanSe {
    let n = xs.len();
    let m = mean(xs);
    let stderr = if n > 1 {
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    MeanSe { mean: m, stderr, n }
}

/// Sample covariance of the means of two paired series.
pub fn cov_of_means(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let c = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / (n - 1) as f64;
    c / n as f64
}

/// Pearson chi-square statistic of observed counts against a uniform expectation.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum()
}

/// Upper 1% critical value of the chi-square distribution, for 1..=10 degrees of freedom.
pub fn chi_square_crit_p01(dof: usize) -> f64 {
    const TABLE: [f64; 10] = [
        6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475, 20.090, 21.666, 23.209,
    ];
    TABLE[dof.clamp(1, 10) - 1]
}
