//! Two-sample distribution distance used to score generated points.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::themes::{make_dataset, ThemeSpec};

fn mean_pairwise_distance(a: &Tensor, b: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let p = a.row(i);
        for j in 0..b.rows() {
            let q = b.row(j);
            total += p
                .iter()
                .zip(q)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    }
    total / (a.rows() * b.rows()) as f64
}

/// `2·E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖` over all pairs (V-statistic, so identical
/// sets score exactly zero and the value is never negative).
pub fn energy_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.is_empty() || y.is_empty() || x.rows() == 0 || y.rows() == 0 {
        return Err(Error::arg("energy distance of an empty sample set"));
    }
    if x.cols() != y.cols() {
        return Err(Error::arg(
            "energy distance of sets with different dimension",
        ));
    }
    let xy = mean_pairwise_distance(x, y);
    let xx = mean_pairwise_distance(x, x);
    let yy = mean_pairwise_distance(y, y);
    Ok((2.0 * xy - xx - yy).max(0.0))
}

/// Energy distance between `samples` and a fresh draw of `n_ref` theme points.
pub fn eval_sample_quality(
    samples: &Tensor,
    theme: &ThemeSpec,
    n_ref: usize,
    seed: u64,
) -> Result<f64> {
    let reference = make_dataset(theme, n_ref, seed)?;
    energy_distance(samples, &reference.points)
}
