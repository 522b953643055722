use std::io::Write;

use ndarray::{Array2, ArrayView1};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::table::mode;
use super::{Column, EmrTable};
use crate::error::{Error, Result};

pub const MAX_LLOYD_ITERATIONS: usize = 300;

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// `k x d`, one row per cluster.
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Mean silhouette; 0 when fewer than two clusters are populated.
    pub silhouette_mean: f64,
    /// Inertia after each assignment step of the winning run.
    pub inertia_history: Vec<f64>,
    /// Final inertia of every restart, in order.
    pub restart_inertias: Vec<f64>,
}

impl ClusterModel {
    pub fn centroid_matrix(&self) -> Array2<f64> {
        let d = self.centroids.first().map_or(0, Vec::len);
        Array2::from_shape_fn((self.k, d), |(i, j)| self.centroids[i][j])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Index of the nearest centroid.
    pub fn predict(&self, point: &[f64]) -> Result<usize> {
        let c = self.centroid_matrix();
        if point.len() != c.ncols() {
            return Err(Error::invalid(format!("point has {} features, model {}", point.len(), c.ncols())));
        }
        Ok(nearest(&c, ArrayView1::from(point)).0)
    }
}

fn nearest(centroids: &Array2<f64>, p: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every point already coincides with a centroid.
            Err(_) => rng.gen_range(0..n),
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (d, p) in d2.iter_mut().zip(points.rows()) {
            *d = d.min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

struct Run {
    centroids: Array2<f64>,
    assignments: Vec<usize>,
    inertia: f64,
    history: Vec<f64>,
}

fn lloyd(points: &Array2<f64>, mut centroids: Array2<f64>) -> Run {
    let k = centroids.nrows();
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut next = Vec::with_capacity(points.nrows());
        let mut inertia = 0.0;
        for p in points.rows() {
            let (j, d) = nearest(&centroids, p);
            next.push(j);
            inertia += d;
        }
        history.push(inertia);
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (p, &j) in points.rows().into_iter().zip(&assignments) {
            let mut row = sums.row_mut(j);
            row += &p;
            counts[j] += 1;
        }
        for (j, &count) in counts.iter().enumerate() {
            if count > 0 {
                centroids.row_mut(j).assign(&(&sums.row(j) / count as f64));
            } else {
                // Re-seed an empty cluster at the point worst served by its centroid.
                let far = points
                    .rows()
                    .into_iter()
                    .zip(&assignments)
                    .map(|(p, &a)| sq_dist(p, centroids.row(a)))
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map_or(0, |(i, _)| i);
                centroids.row_mut(j).assign(&points.row(far));
            }
        }
    }
    let inertia = points
        .rows()
        .into_iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, centroids.row(a)))
        .sum();
    Run {
        centroids,
        assignments,
        inertia,
        history,
    }
}

/// Best of `restarts` seeded k-means++ / Lloyd runs, by inertia.
pub fn kmeans_fit(points: &Array2<f64>, k: usize, seed: u64, restarts: usize) -> Result<ClusterModel> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the {n} points")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("points must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Run> = None;
    let mut restart_inertias = Vec::new();
    for _ in 0..restarts.max(1) {
        let run = lloyd(points, plus_plus_init(points, k, &mut rng));
        restart_inertias.push(run.inertia);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    let populated = {
        let mut seen = best.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    };
    let silhouette_mean = if populated >= 2 {
        silhouette(points, &best.assignments)?.mean
    } else {
        0.0
    };
    Ok(ClusterModel {
        k,
        centroids: best.centroids.rows().into_iter().map(|r| r.to_vec()).collect(),
        assignments: best.assignments,
        inertia: best.inertia,
        silhouette_mean,
        inertia_history: best.history,
        restart_inertias,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Silhouette {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

/// Euclidean silhouette. Members of singleton clusters score 0.
pub fn silhouette(points: &Array2<f64>, assignments: &[usize]) -> Result<Silhouette> {
    let n = points.nrows();
    if assignments.len() != n {
        return Err(Error::invalid(format!("{} assignments for {n} points", assignments.len())));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::invalid("silhouette needs at least two populated clusters"));
    }
    let per_sample: Vec<f64> = (0..n)
        .map(|i| {
            let own = assignments[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                if j != i {
                    sums[assignments[j]] += sq_dist(points.row(i), points.row(j)).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect();
    let mean = per_sample.iter().sum::<f64>() / n as f64;
    Ok(Silhouette { per_sample, mean })
}

#[derive(Debug, Clone)]
pub struct KSelection {
    pub best_k: usize,
    pub model: ClusterModel,
    /// `(k, mean silhouette)` for every k tried.
    pub scores: Vec<(usize, f64)>,
}

/// Fits every k and keeps the one with the highest mean silhouette (ties
/// toward smaller k).
pub fn select_k(points: &Array2<f64>, k_range: impl IntoIterator<Item = usize>, seed: u64, restarts: usize) -> Result<KSelection> {
    let n = points.nrows();
    let mut ks: Vec<usize> = k_range.into_iter().collect();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        return Err(Error::invalid("empty k range"));
    }
    if let Some(&bad) = ks.iter().find(|&&k| k < 2 || k + 1 > n) {
        return Err(Error::invalid(format!("k = {bad} outside [2, {}]", n.saturating_sub(1))));
    }
    let mut best: Option<(usize, ClusterModel)> = None;
    let mut scores = Vec::new();
    for k in ks {
        let m = kmeans_fit(points, k, seed, restarts)?;
        scores.push((k, m.silhouette_mean));
        if best.as_ref().is_none_or(|(_, b)| m.silhouette_mean > b.silhouette_mean) {
            best = Some((k, m));
        }
    }
    let (best_k, model) = best.expect("non-empty range");
    Ok(KSelection { best_k, model, scores })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummaryRow {
    pub cluster: usize,
    pub count: usize,
    pub percentage: f64,
    pub numeric_means: Vec<(String, f64)>,
    pub categorical_modes: Vec<(String, String)>,
}

/// Per-cluster counts, numeric means and categorical modes, largest cluster first.
pub fn cluster_summary(table: &EmrTable, model: &ClusterModel) -> Result<Vec<ClusterSummaryRow>> {
    let n = table.n_rows();
    if model.assignments.len() != n {
        return Err(Error::invalid(format!(
            "{} assignments for a table of {n} rows",
            model.assignments.len()
        )));
    }
    let mut rows: Vec<ClusterSummaryRow> = (0..model.k)
        .filter_map(|c| {
            let members: Vec<usize> = (0..n).filter(|&r| model.assignments[r] == c).collect();
            if members.is_empty() {
                return None;
            }
            let mut numeric_means = Vec::new();
            let mut categorical_modes = Vec::new();
            for (name, col) in table.columns() {
                match col {
                    Column::Numeric(v) => {
                        let m = members.iter().map(|&r| v[r]).sum::<f64>() / members.len() as f64;
                        numeric_means.push((name.to_string(), m));
                    }
                    Column::Categorical(v) => {
                        let m = mode(members.iter().map(|&r| v[r].as_str())).expect("non-empty");
                        categorical_modes.push((name.to_string(), m.to_string()));
                    }
                }
            }
            Some(ClusterSummaryRow {
                cluster: c,
                count: members.len(),
                percentage: 100.0 * members.len() as f64 / n as f64,
                numeric_means,
                categorical_modes,
            })
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.cluster.cmp(&b.cluster)));
    Ok(rows)
}

pub fn write_summary_csv(rows: &[ClusterSummaryRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = rows.first() {
        let mut header = vec!["cluster".to_string(), "count".into(), "percentage".into()];
        header.extend(first.numeric_means.iter().map(|(n, _)| format!("mean_{n}")));
        header.extend(first.categorical_modes.iter().map(|(n, _)| format!("mode_{n}")));
        w.write_record(&header)?;
    }
    for r in rows {
        let mut rec = vec![r.cluster.to_string(), r.count.to_string(), format!("{:.2}", r.percentage)];
        rec.extend(r.numeric_means.iter().map(|(_, v)| v.to_string()));
        rec.extend(r.categorical_modes.iter().map(|(_, v)| v.clone()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};

    /// Points jittered uniformly in a small box around each center.
    fn blobs(centers: &[(f64, f64)], per: usize, spread: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, &(x, y)) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(x + rng.gen_range(-spread..spread));
                pts.push(y + rng.gen_range(-spread..spread));
                labels.push(c);
            }
        }
        (Array2::from_shape_vec((labels.len(), 2), pts).unwrap(), labels)
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn two_blobs_recovered() {
        let (pts, truth) = blobs(&[(0.0, 0.0), (50.0, 50.0)], 20, 1.0, 3);
        let m = kmeans_fit(&pts, 2, 7, 3).unwrap();
        assert!(same_partition(&m.assignments, &truth));
        assert!(m.silhouette_mean > 0.9);
    }

    #[test]
    fn one_cluster_is_the_mean() {
        let (pts, _) = blobs(&[(1.0, 2.0), (5.0, -3.0)], 10, 2.0, 1);
        let m = kmeans_fit(&pts, 1, 0, 1).unwrap();
        let mean = pts.mean_axis(Axis(0)).unwrap();
        for (a, b) in m.centroids[0].iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let total_var_n: f64 = pts.rows().into_iter().map(|p| sq_dist(p, mean.view())).sum();
        assert!((m.inertia - total_var_n).abs() < 1e-9);
        assert_eq!(m.silhouette_mean, 0.0);
    }

    #[test]
    fn inertia_history_is_non_increasing_and_best_restart_wins() {
        let (pts, _) = blobs(&[(0.0, 0.0), (3.0, 0.0), (0.0, 3.0), (3.0, 3.0)], 15, 1.5, 9);
        let m = kmeans_fit(&pts, 4, 2, 5).unwrap();
        for w in m.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(m.restart_inertias.iter().all(|&r| m.inertia <= r));
        assert!(m.inertia <= *m.inertia_history.last().unwrap() + 1e-12);
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let pts = array![[0.0], [1.0]];
        assert!(kmeans_fit(&pts, 3, 0, 1).is_err());
        assert!(kmeans_fit(&pts, 0, 0, 1).is_err());
    }

    #[test]
    fn worked_silhouette_pair() {
        let pts = array![[0.0], [1.0], [10.0], [11.0]];
        let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        assert!((s.per_sample[0] - (10.5 - 1.0) / 10.5).abs() < 1e-15);
        assert!((s.per_sample[0] - 0.90476).abs() < 1e-5);
        assert!(s.per_sample.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn silhouette_edge_cases() {
        // Symmetric layout: a(i) = b(i) for the middle point.
        let pts = array![[0.0], [1.0], [2.0]];
        let s = silhouette(&pts, &[0, 0, 1]).unwrap();
        assert_eq!(s.per_sample[2], 0.0);
        assert_eq!(s.per_sample[1], 0.0);
        assert!(silhouette(&pts, &[0, 0, 0]).is_err());
    }

    #[test]
    fn select_k_finds_three_blobs() {
        let (pts, _) = blobs(&[(0.0, 0.0), (20.0, 0.0), (10.0, 17.0)], 15, 1.0, 4);
        let sel = select_k(&pts, 2..=6, 1, 3).unwrap();
        assert_eq!(sel.best_k, 3);
        assert_eq!(sel.scores.len(), 5);
        assert_eq!(select_k(&pts, [2], 1, 1).unwrap().best_k, 2);
        assert!(select_k(&pts, Vec::<usize>::new(), 1, 1).is_err());
        assert!(select_k(&pts, [1], 1, 1).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let (pts, _) = blobs(&[(0.0, 0.0), (9.0, 9.0)], 5, 1.0, 2);
        let m = kmeans_fit(&pts, 2, 0, 2).unwrap();
        let back = ClusterModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.predict(&[9.0, 9.0]).unwrap(), m.assignments[5]);
    }

    #[test]
    fn summary_rows() {
        let t = EmrTable::new(
            vec!["age".into(), "diagnosis".into()],
            vec![
                Column::Numeric(vec![60.0, 70.0, 20.0, 30.0, 25.0]),
                Column::Categorical(vec!["COPD".into(), "COPD".into(), "Healthy".into(), "URTI".into(), "Healthy".into()]),
            ],
        )
        .unwrap();
        let model = ClusterModel {
            k: 2,
            centroids: vec![vec![0.0], vec![0.0]],
            assignments: vec![0, 0, 1, 1, 1],
            inertia: 0.0,
            silhouette_mean: 0.0,
            inertia_history: vec![],
            restart_inertias: vec![],
        };
        let rows = cluster_summary(&t, &model).unwrap();
        assert_eq!(rows[0].cluster, 1);
        assert_eq!(rows[0].count, 3);
        assert!((rows[0].numeric_means[0].1 - 25.0).abs() < 1e-12);
        assert_eq!(rows[0].categorical_modes[0].1, "Healthy");
        assert!((rows.iter().map(|r| r.percentage).sum::<f64>() - 100.0).abs() < 1e-9);
        let single = ClusterModel { k: 1, assignments: vec![0; 5], ..model };
        let rows = cluster_summary(&t, &single).unwrap();
        assert_eq!(rows[0].percentage, 100.0);
        assert!((rows[0].numeric_means[0].1 - 41.0).abs() < 1e-12);
        let mut buf = Vec::new();
        write_summary_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("cluster,count,percentage,mean_age,mode_diagnosis\n0,5,100.00,41,COPD"));
    }
}
