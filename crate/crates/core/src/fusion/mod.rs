//! Late fusion of audio and tabular class probabilities, challenge-style
//! sensitivity/specificity scoring and the fusion-weight sweep.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;

/// Class probabilities with their label names.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    probs: Vec<f64>,
    labels: Vec<String>,
}

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if probs.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} probabilities but {} labels",
                probs.len(),
                labels.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::invalid(format!("probability {p} is negative or not finite")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs, labels })
    }

    /// Softmax of `logits`.
    pub fn from_logits(logits: &[f64], labels: Vec<String>) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite logit"));
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        Self::new(exps.iter().map(|e| e / z).collect(), labels)
    }

    /// Indices are used as labels: `"0"`, `"1"`, ...
    pub fn unlabeled(probs: Vec<f64>) -> Result<Self> {
        let labels = (0..probs.len()).map(|i| i.to_string()).collect();
        Self::new(probs, labels)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable class; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the largest value, preferring the lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `alpha * audio + (1 - alpha) * tabular`, elementwise.
pub fn fuse_probabilities(p_rene: &ProbabilityVector, p_gbdt: &ProbabilityVector, alpha: f64) -> Result<ProbabilityVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if p_rene.labels != p_gbdt.labels {
        return Err(Error::invalid(format!(
            "label maps differ: {:?} vs {:?}",
            p_rene.labels, p_gbdt.labels
        )));
    }
    let probs = if alpha == 1.0 {
        p_rene.probs.clone()
    } else if alpha == 0.0 {
        p_gbdt.probs.clone()
    } else {
        p_rene
            .probs
            .iter()
            .zip(&p_gbdt.probs)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect()
    };
    Ok(ProbabilityVector {
        probs,
        labels: p_rene.labels.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

/// Correct/total counts per adventitious class and for the normal class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    /// Keyed by class index; the normal class is not included.
    pub adventitious: BTreeMap<usize, Tally>,
    pub normal: Tally,
    pub normal_class: usize,
}

pub fn confusion_counts(predictions: &[usize], truths: &[usize], normal_class: usize) -> Result<ConfusionCounts> {
    if predictions.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    let mut counts = ConfusionCounts {
        adventitious: BTreeMap::new(),
        normal: Tally::default(),
        normal_class,
    };
    for (&p, &t) in predictions.iter().zip(truths) {
        let tally = if t == normal_class {
            &mut counts.normal
        } else {
            counts.adventitious.entry(t).or_default()
        };
        tally.total += 1;
        if p == t {
            tally.correct += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskMetrics {
    pub se: f64,
    pub sp: f64,
    pub as_score: f64,
    pub hs: f64,
    pub final_score: f64,
}

impl TaskMetrics {
    pub fn from_se_sp(se: f64, sp: f64) -> Self {
        let as_score = (se + sp) / 2.0;
        let hs = if se + sp == 0.0 { 0.0 } else { 2.0 * se * sp / (se + sp) };
        Self {
            se,
            sp,
            as_score,
            hs,
            final_score: (as_score + hs) / 2.0,
        }
    }
}

pub fn compute_metrics(counts: &ConfusionCounts) -> Result<TaskMetrics> {
    let (p, n) = counts
        .adventitious
        .values()
        .fold((0, 0), |(p, n), t| (p + t.correct, n + t.total));
    if n == 0 {
        return Err(Error::invalid("no adventitious samples: sensitivity undefined"));
    }
    if counts.normal.total == 0 {
        return Err(Error::invalid("no normal samples: specificity undefined"));
    }
    let se = p as f64 / n as f64;
    let sp = counts.normal.correct as f64 / counts.normal.total as f64;
    Ok(TaskMetrics::from_se_sp(se, sp))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub metrics: TaskMetrics,
}

/// Scores the fused predictions at alpha = 0.0, 0.1, ..., 1.0.
pub fn alpha_sweep(
    p_rene: &[ProbabilityVector],
    p_gbdt: &[ProbabilityVector],
    truths: &[usize],
    normal_class: usize,
) -> Result<Vec<SweepRow>> {
    if p_rene.len() != p_gbdt.len() || p_rene.len() != truths.len() {
        return Err(Error::invalid(format!(
            "misaligned sweep inputs: {} audio, {} tabular, {} labels",
            p_rene.len(),
            p_gbdt.len(),
            truths.len()
        )));
    }
    (0..=10)
        .map(|i| {
            let alpha = i as f64 / 10.0;
            let preds = p_rene
                .iter()
                .zip(p_gbdt)
                .map(|(a, b)| fuse_probabilities(a, b, alpha).map(|f| f.argmax()))
                .collect::<Result<Vec<_>>>()?;
            let metrics = compute_metrics(&confusion_counts(&preds, truths, normal_class)?)?;
            Ok(SweepRow { alpha, metrics })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha", "se", "sp", "as", "hs", "score"])?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            format!("{:.1}", r.alpha),
            m.se.to_string(),
            m.sp.to_string(),
            m.as_score.to_string(),
            m.hs.to_string(),
            m.final_score.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    /// Elementwise maximum, renormalized to sum to one.
    Max,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(Error::invalid(format!("unknown aggregation {other:?} (mean or max)"))),
        }
    }
}

/// Combines per-recording probabilities into one vector per patient,
/// ordered by patient id.
pub fn aggregate_by_patient(
    items: &[(String, ProbabilityVector)],
    how: Aggregation,
) -> Result<Vec<(String, ProbabilityVector)>> {
    let mut groups: BTreeMap<&str, Vec<&ProbabilityVector>> = BTreeMap::new();
    for (pid, p) in items {
        groups.entry(pid.as_str()).or_default().push(p);
    }
    groups
        .into_iter()
        .map(|(pid, ps)| {
            let first = ps[0];
            if ps.iter().any(|p| p.labels != first.labels) {
                return Err(Error::invalid(format!("patient {pid}: recordings disagree on labels")));
            }
            let k = first.len();
            let probs: Vec<f64> = match how {
                Aggregation::Mean => (0..k)
                    .map(|c| ps.iter().map(|p| p.probs[c]).sum::<f64>() / ps.len() as f64)
                    .collect(),
                Aggregation::Max => {
                    let m: Vec<f64> = (0..k)
                        .map(|c| ps.iter().map(|p| p.probs[c]).fold(0.0, f64::max))
                        .collect();
                    let z: f64 = m.iter().sum();
                    m.iter().map(|v| v / z).collect()
                }
            };
            Ok((pid.to_string(), ProbabilityVector::new(probs, first.labels.clone())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(p: &[f64]) -> ProbabilityVector {
        ProbabilityVector::unlabeled(p.to_vec()).unwrap()
    }

    #[test]
    fn fusion_endpoints_and_midpoint() {
        let a = pv(&[0.7, 0.3]);
        let b = pv(&[0.1, 0.9]);
        assert_eq!(fuse_probabilities(&a, &b, 1.0).unwrap(), a);
        assert_eq!(fuse_probabilities(&a, &b, 0.0).unwrap(), b);
        let f = fuse_probabilities(&a, &b, 0.2).unwrap();
        assert!((f.probs()[0] - 0.22).abs() < 1e-12);
        assert!((f.probs()[1] - 0.78).abs() < 1e-12);
    }

    #[test]
    fn fusion_rejects_bad_inputs() {
        let a = pv(&[0.5, 0.5]);
        let b = ProbabilityVector::new(vec![0.5, 0.5], vec!["x".into(), "y".into()]).unwrap();
        assert!(fuse_probabilities(&a, &b, 0.5).is_err());
        assert!(fuse_probabilities(&a, &a, 1.5).is_err());
        assert!(fuse_probabilities(&a, &a, -0.1).is_err());
        assert!(ProbabilityVector::unlabeled(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::unlabeled(vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(pv(&[0.25, 0.375, 0.375]).argmax(), 1);
    }

    #[test]
    fn six_sample_tally() {
        // Normal = 0. Truths: 0,0,1,1,2,2; predictions: 0,1,1,0,2,2.
        let c = confusion_counts(&[0, 1, 1, 0, 2, 2], &[0, 0, 1, 1, 2, 2], 0).unwrap();
        assert_eq!(c.normal, Tally { correct: 1, total: 2 });
        assert_eq!(c.adventitious[&1], Tally { correct: 1, total: 2 });
        assert_eq!(c.adventitious[&2], Tally { correct: 2, total: 2 });
        assert!(confusion_counts(&[], &[], 0).is_err());
        assert!(confusion_counts(&[0], &[0, 1], 0).is_err());
    }

    #[test]
    fn perfect_and_all_wrong() {
        let t = [0, 1, 2, 1, 0];
        let c = confusion_counts(&t, &t, 0).unwrap();
        let m = compute_metrics(&c).unwrap();
        assert_eq!((m.se, m.sp, m.as_score, m.hs, m.final_score), (1.0, 1.0, 1.0, 1.0, 1.0));
        let c = confusion_counts(&[1, 2, 0, 0, 1], &t, 0).unwrap();
        assert!(c.adventitious.values().all(|t| t.correct == 0) && c.normal.correct == 0);
        let m = compute_metrics(&c).unwrap();
        assert_eq!(m.hs, 0.0);
    }

    #[test]
    fn worked_metric_example() {
        let mut adventitious = BTreeMap::new();
        adventitious.insert(1, Tally { correct: 30, total: 40 });
        let c = ConfusionCounts {
            adventitious,
            normal: Tally { correct: 50, total: 60 },
            normal_class: 0,
        };
        let m = compute_metrics(&c).unwrap();
        let round4 = |v: f64| (v * 1e4).round() / 1e4;
        assert_eq!(round4(m.se), 0.75);
        assert_eq!(round4(m.sp), 0.8333);
        assert_eq!(round4(m.as_score), 0.7917);
        assert_eq!(round4(m.hs), 0.7895);
        assert_eq!(round4(m.final_score), 0.7906);
    }

    #[test]
    fn zero_denominators_error() {
        let c = confusion_counts(&[0, 0], &[0, 0], 0).unwrap();
        assert!(compute_metrics(&c).is_err());
        let c = confusion_counts(&[1, 1], &[1, 1], 0).unwrap();
        assert!(compute_metrics(&c).is_err());
    }

    #[test]
    fn sweep_prefers_perfect_tabular_model() {
        let truths: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let mut next = || rng.gen_range(0.0..1.0);
        let audio: Vec<ProbabilityVector> = truths
            .iter()
            .map(|_| {
                let raw = [next(), next(), next()];
                let z: f64 = raw.iter().sum();
                pv(&raw.map(|v| v / z))
            })
            .collect();
        let tab: Vec<ProbabilityVector> = truths
            .iter()
            .map(|&t| {
                let mut p = [0.0; 3];
                p[t] = 1.0;
                pv(&p)
            })
            .collect();
        let rows = alpha_sweep(&audio, &tab, &truths, 0).unwrap();
        assert_eq!(rows.len(), 11);
        let best = rows
            .iter()
            .max_by(|a, b| a.metrics.final_score.partial_cmp(&b.metrics.final_score).unwrap().then(b.alpha.partial_cmp(&a.alpha).unwrap()))
            .unwrap();
        assert_eq!(best.alpha, 0.0);
        assert_eq!(rows[0].metrics.final_score, 1.0);
        let pure: Vec<usize> = audio.iter().map(|p| p.argmax()).collect();
        let m = compute_metrics(&confusion_counts(&pure, &truths, 0).unwrap()).unwrap();
        assert_eq!(rows[10].metrics, m);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("alpha,se,sp,as,hs,score\n0.0,"));
        assert_eq!(text.lines().count(), 12);
    }

    #[test]
    fn patient_aggregation() {
        let items = vec![
            ("p2".to_string(), pv(&[0.2, 0.8])),
            ("p1".to_string(), pv(&[0.6, 0.4])),
            ("p1".to_string(), pv(&[0.2, 0.8])),
        ];
        let mean = aggregate_by_patient(&items, Aggregation::Mean).unwrap();
        assert_eq!(mean[0].0, "p1");
        assert!((mean[0].1.probs()[0] - 0.4).abs() < 1e-12);
        let max = aggregate_by_patient(&items, Aggregation::Max).unwrap();
        // max = [0.6, 0.8] -> renormalized by 1.4
        assert!((max[0].1.probs()[0] - 0.6 / 1.4).abs() < 1e-12);
        assert_eq!(max[1].1, pv(&[0.2, 0.8]));
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
            let z: f64 = v.iter().sum();
            v.into_iter().map(|x| x / z).collect()
        })
    }

    proptest! {
        #[test]
        fn fused_vectors_stay_on_the_simplex(a in simplex(4), b in simplex(4), alpha in 0.0f64..=1.0) {
            let f = fuse_probabilities(&pv(&a), &pv(&b), alpha).unwrap();
            prop_assert!((f.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for c in 0..4 {
                let expected = b[c] + alpha * (a[c] - b[c]);
                prop_assert!((f.probs()[c] - expected).abs() < 1e-12);
            }
        }

        #[test]
        fn harmonic_never_exceeds_arithmetic(se in 0.0f64..=1.0, sp in 0.0f64..=1.0) {
            let m = TaskMetrics::from_se_sp(se, sp);
            prop_assert!(m.hs <= m.as_score + 1e-15);
        }

        #[test]
        fn metrics_are_ratio_invariant(p in 0usize..20, extra in 1usize..20, pn in 0usize..20, extra_n in 1usize..20, k in 1usize..6) {
            let build = |s: usize| {
                let mut adventitious = BTreeMap::new();
                adventitious.insert(1, Tally { correct: p * s, total: (p + extra) * s });
                ConfusionCounts { adventitious, normal: Tally { correct: pn * s, total: (pn + extra_n) * s }, normal_class: 0 }
            };
            let a = compute_metrics(&build(1)).unwrap();
            let b = compute_metrics(&build(k)).unwrap();
            prop_assert!((a.final_score - b.final_score).abs() < 1e-12);
        }

        #[test]
        fn metrics_ignore_sample_order(seed in 0u64..1000) {
            let truths: Vec<usize> = (0..30).map(|i| (i * 7 + seed as usize) % 3).collect();
            let preds: Vec<usize> = (0..30).map(|i| (i * 5 + 1) % 3).collect();
            let a = compute_metrics(&confusion_counts(&preds, &truths, 0).unwrap()).unwrap();
            let (mut rp, mut rt) = (preds.clone(), truths.clone());
            rp.reverse();
            rt.reverse();
            let b = compute_metrics(&confusion_counts(&rp, &rt, 0).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
