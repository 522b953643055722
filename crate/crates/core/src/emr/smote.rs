use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::standardize;
use crate::error::{Error, Result};

pub const DEFAULT_K_NEIGHBORS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoteOutput {
    pub samples: Array2<f64>,
    /// For each synthetic row: `(parent row, neighbor row, u)` with
    /// `sample = parent + u * (neighbor - parent)`.
    pub provenance: Vec<(usize, usize, f64)>,
}

fn dist2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// The `k` nearest other rows of every row (Euclidean, ties by index).
fn neighbor_lists(x: &Array2<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = x.nrows();
    (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(x.row(i), x.row(j)), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Synthesizes `n_synthetic` rows on segments between random minority rows
/// and one of their `k_neighbors` nearest neighbors.
pub fn smote_oversample(minority: &Array2<f64>, k_neighbors: usize, n_synthetic: usize, seed: u64) -> Result<SmoteOutput> {
    let n = minority.nrows();
    if k_neighbors == 0 {
        return Err(Error::invalid("k_neighbors must be at least 1"));
    }
    if n <= k_neighbors {
        return Err(Error::invalid(format!(
            "{n} minority rows cannot supply {k_neighbors} neighbors each"
        )));
    }
    if minority.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("SMOTE needs finite numeric features"));
    }
    let neighbors = neighbor_lists(minority, k_neighbors);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array2::zeros((n_synthetic, minority.ncols()));
    let mut provenance = Vec::with_capacity(n_synthetic);
    for mut row in samples.rows_mut() {
        let i = rng.gen_range(0..n);
        let j = neighbors[i][rng.gen_range(0..k_neighbors)];
        let u: f64 = rng.gen_range(0.0..=1.0);
        let (a, b) = (minority.row(i), minority.row(j));
        row.assign(&(&a + &((&b - &a) * u)));
        provenance.push((i, j, u));
    }
    Ok(SmoteOutput { samples, provenance })
}

/// Oversamples every class up to the largest class count. Neighbors are
/// found in z-scored space; synthetic rows are returned in original units
/// after the real rows. Classes smaller than `k + 1` use `size - 1` neighbors.
pub fn balance_classes(features: &Array2<f64>, labels: &[usize], k_neighbors: usize, seed: u64) -> Result<(Array2<f64>, Vec<usize>)> {
    if features.nrows() != labels.len() {
        return Err(Error::invalid(format!("{} rows but {} labels", features.nrows(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::invalid("nothing to balance"));
    }
    let z = standardize(features)?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut rows: Vec<f64> = features.iter().copied().collect();
    let mut out_labels = labels.to_vec();
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 || count == target {
            continue;
        }
        if count < 2 {
            return Err(Error::invalid(format!("class {class} has a single row; SMOTE needs two")));
        }
        let idx: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == class).collect();
        let members = z.data.select(ndarray::Axis(0), &idx);
        let k = k_neighbors.min(count - 1);
        let synth = smote_oversample(&members, k, target - count, seed.wrapping_add(class as u64))?;
        rows.extend(z.restore(&synth.samples).iter().copied());
        out_labels.extend(std::iter::repeat_n(class, target - count));
    }
    let out = Array2::from_shape_vec((out_labels.len(), features.ncols()), rows).expect("rows are complete");
    Ok((out, out_labels))
}
