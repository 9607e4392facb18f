//! Sequence evaluation metrics: per-step recall@k, exact-sequence match,
//! label-set IoU, Levenshtein edit distance, and per-horizon aggregation.
//!
//! Predictions and ground truth are compared at the text-id level, so
//! paraphrases of one action count as the same answer (mirroring the
//! duplicate-aware training objective).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranked per-step predictions for one plan sample. Rank lists hold
/// duplicate-free text ids, best first; `steps[0]` is Start, `steps[h+1]`
/// is Goal, the rest are mids.
#[derive(Clone, Debug)]
pub struct SequencePrediction {
    pub ranked: Vec<Vec<usize>>,
    pub truth: Vec<usize>,
    pub horizon: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Mid,
    Full,
}

impl SequencePrediction {
    pub fn new(ranked: Vec<Vec<usize>>, truth: Vec<usize>, horizon: usize) -> Result<Self> {
        if ranked.len() != horizon || truth.len() != horizon {
            return Err(Error::Invalid(format!(
                "expected {horizon} steps, got {} ranked / {} truth",
                ranked.len(),
                truth.len()
            )));
        }
        for list in &ranked {
            let set: BTreeSet<usize> = list.iter().copied().collect();
            if set.len() != list.len() {
                return Err(Error::Invalid("rank list contains duplicates".into()));
            }
        }
        Ok(SequencePrediction {
            ranked,
            truth,
            horizon,
        })
    }

    fn step_range(&self, scope: Scope) -> std::ops::Range<usize> {
        match scope {
            Scope::Mid => 1..self.horizon - 1,
            Scope::Full => 0..self.horizon,
        }
    }

    pub fn top1(&self, scope: Scope) -> Vec<usize> {
        self.step_range(scope).map(|i| self.ranked[i][0]).collect()
    }

    pub fn truth_slice(&self, scope: Scope) -> Vec<usize> {
        self.step_range(scope).map(|i| self.truth[i]).collect()
    }
}

/// Fraction of in-scope steps whose ground truth appears in the top-k.
pub fn step_recall_at_k(pred: &SequencePrediction, k: usize, scope: Scope) -> f64 {
    let range = pred.step_range(scope);
    let n = range.len();
    if n == 0 {
        return 0.0;
    }
    let hits = range
        .filter(|&i| pred.ranked[i].iter().take(k).any(|&l| l == pred.truth[i]))
        .count();
    hits as f64 / n as f64
}

/// 1 iff every in-scope step is top-1 correct.
pub fn sequence_match(pred: &SequencePrediction, scope: Scope) -> f64 {
    let range = pred.step_range(scope);
    let ok = range.clone().all(|i| pred.ranked[i][0] == pred.truth[i]);
    if range.len() > 0 && ok {
        1.0
    } else if range.len() == 0 {
        1.0
    } else {
        0.0
    }
}

/// Label-set IoU of top-1 predictions vs ground truth (duplicates collapse).
/// Both sets empty counts as 1 (vacuous agreement).
pub fn sequence_iou(pred_top1: &[usize], truth: &[usize]) -> f64 {
    let p: BTreeSet<usize> = pred_top1.iter().copied().collect();
    let t: BTreeSet<usize> = truth.iter().copied().collect();
    if p.is_empty() && t.is_empty() {
        return 1.0;
    }
    let inter = p.intersection(&t).count();
    let union = p.union(&t).count();
    inter as f64 / union as f64
}

/// Levenshtein distance with unit insert/delete/substitute costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let (n, m) = (a.len(), b.len());
    if n == 0 {
        return m;
    }
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// All metrics for one sample.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub m_at_1: f64,
    pub m_at_5: f64,
    pub mseq: f64,
    pub f_at_1: f64,
    pub f_at_5: f64,
    pub fseq: f64,
    pub sr: f64,
    pub macc: f64,
    pub miou: f64,
    pub edit: f64,
}

pub fn sample_metrics(pred: &SequencePrediction) -> SampleMetrics {
    let full_top1 = pred.top1(Scope::Full);
    let full_truth = pred.truth_slice(Scope::Full);
    SampleMetrics {
        m_at_1: step_recall_at_k(pred, 1, Scope::Mid),
        m_at_5: step_recall_at_k(pred, 5, Scope::Mid),
        mseq: sequence_match(pred, Scope::Mid),
        f_at_1: step_recall_at_k(pred, 1, Scope::Full),
        f_at_5: step_recall_at_k(pred, 5, Scope::Full),
        fseq: sequence_match(pred, Scope::Full),
        sr: sequence_match(pred, Scope::Full),
        macc: step_recall_at_k(pred, 1, Scope::Mid),
        miou: sequence_iou(&full_top1, &full_truth),
        edit: edit_distance(&full_top1, &full_truth) as f64,
    }
}

pub const METRIC_NAMES: [&str; 10] = [
    "M@1", "M@5", "MSeq", "F@1", "F@5", "FSeq", "SR", "mAcc", "mIoU", "edit",
];

impl SampleMetrics {
    pub fn as_array(&self) -> [f64; 10] {
        [
            self.m_at_1, self.m_at_5, self.mseq, self.f_at_1, self.f_at_5, self.fseq, self.sr,
            self.macc, self.miou, self.edit,
        ]
    }

    pub fn from_array(a: [f64; 10]) -> Self {
        SampleMetrics {
            m_at_1: a[0],
            m_at_5: a[1],
            mseq: a[2],
            f_at_1: a[3],
            f_at_5: a[4],
            fseq: a[5],
            sr: a[6],
            macc: a[7],
            miou: a[8],
            edit: a[9],
        }
    }
}

/// Per-horizon means plus a sample-weighted overall row.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// (horizon, sample count, mean metrics) sorted by horizon.
    pub per_horizon: Vec<(usize, usize, SampleMetrics)>,
    pub overall: SampleMetrics,
    pub total_samples: usize,
}

pub fn aggregate(per_sample: &[(usize, SampleMetrics)]) -> Result<EvalReport> {
    if per_sample.is_empty() {
        return Err(Error::Invalid("no samples to aggregate".into()));
    }
    let mut horizons: Vec<usize> = per_sample.iter().map(|(h, _)| *h).collect();
    horizons.sort_unstable();
    horizons.dedup();
    let mut per_horizon = Vec::with_capacity(horizons.len());
    let mut overall = [0.0; 10];
    for &h in &horizons {
        let rows: Vec<&SampleMetrics> = per_sample
            .iter()
            .filter(|(hh, _)| *hh == h)
            .map(|(_, m)| m)
            .collect();
        let mut mean = [0.0; 10];
        for m in &rows {
            for (acc, v) in mean.iter_mut().zip(m.as_array()) {
                *acc += v;
            }
        }
        for v in mean.iter_mut() {
            *v /= rows.len() as f64;
        }
        per_horizon.push((h, rows.len(), SampleMetrics::from_array(mean)));
    }
    for (_, m) in per_sample {
        for (acc, v) in overall.iter_mut().zip(m.as_array()) {
            *acc += v;
        }
    }
    for v in overall.iter_mut() {
        *v /= per_sample.len() as f64;
    }
    Ok(EvalReport {
        per_horizon,
        overall: SampleMetrics::from_array(overall),
        total_samples: per_sample.len(),
    })
}

impl EvalReport {
    /// CSV with one row per (horizon, metric), plus overall rows.
    pub fn to_csv(&self, method: &str) -> String {
        let mut out = String::from("method,horizon,samples,metric,value\n");
        for (h, n, m) in &self.per_horizon {
            for (name, v) in METRIC_NAMES.iter().zip(m.as_array()) {
                out.push_str(&format!("{method},{h},{n},{name},{v:.6}\n"));
            }
        }
        for (name, v) in METRIC_NAMES.iter().zip(self.overall.as_array()) {
            out.push_str(&format!(
                "{method},overall,{},{name},{v:.6}\n",
                self.total_samples
            ));
        }
        out
    }

    /// Aligned text table mirroring the per-horizon layout.
    pub fn to_table(&self, method: &str) -> String {
        let mut out = format!("{method}\n{:>8}", "H");
        for name in METRIC_NAMES {
            out.push_str(&format!("{name:>8}"));
        }
        out.push('\n');
        for (h, _, m) in &self.per_horizon {
            out.push_str(&format!("{h:>8}"));
            for v in m.as_array() {
                out.push_str(&format!("{v:>8.3}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:>8}", "all"));
        for v in self.overall.as_array() {
            out.push_str(&format!("{v:>8.3}"));
        }
        out.push('\n');
        out
    }

    pub fn mean(&self, horizon: usize) -> Option<&SampleMetrics> {
        self.per_horizon
            .iter()
            .find(|(h, _, _)| *h == horizon)
            .map(|(_, _, m)| m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn pred_from_rows(rows: Vec<Vec<usize>>, truth: Vec<usize>) -> SequencePrediction {
        let h = truth.len();
        SequencePrediction::new(rows, truth, h).unwrap()
    }

    #[test]
    fn recall_trivial_cases() {
        let p = pred_from_rows(
            vec![vec![0], vec![1], vec![2], vec![3]],
            vec![0, 1, 2, 3],
        );
        assert_eq!(step_recall_at_k(&p, 1, Scope::Full), 1.0);
        assert_eq!(step_recall_at_k(&p, 1, Scope::Mid), 1.0);

        // ground truth at rank 3 everywhere
        let rows: Vec<Vec<usize>> = (0..4).map(|t| vec![10, 11, t, 12, 13]).collect();
        let p = pred_from_rows(rows, vec![0, 1, 2, 3]);
        assert_eq!(step_recall_at_k(&p, 1, Scope::Full), 0.0);
        assert_eq!(step_recall_at_k(&p, 5, Scope::Full), 1.0);
    }

    #[test]
    fn recall_matches_membership_oracle_on_seeded_batches() {
        let mut r = rng::stream(41, "recall-oracle");
        for _ in 0..200 {
            let h = r.gen_range(3..=8);
            let rows: Vec<Vec<usize>> = (0..h)
                .map(|_| {
                    let mut list: Vec<usize> = (0..10).collect();
                    for i in (1..list.len()).rev() {
                        let j = r.gen_range(0..=i);
                        list.swap(i, j);
                    }
                    list.truncate(r.gen_range(5..=10));
                    list
                })
                .collect();
            let truth: Vec<usize> = (0..h).map(|_| r.gen_range(0..12)).collect();
            let p = pred_from_rows(rows.clone(), truth.clone());
            for k in [1usize, 5] {
                for scope in [Scope::Mid, Scope::Full] {
                    let range = match scope {
                        Scope::Mid => 1..h - 1,
                        Scope::Full => 0..h,
                    };
                    let mut hits = 0;
                    let mut n = 0;
                    for i in range {
                        n += 1;
                        if rows[i][..k.min(rows[i].len())].contains(&truth[i]) {
                            hits += 1;
                        }
                    }
                    let want = hits as f64 / n as f64;
                    assert_eq!(step_recall_at_k(&p, k, scope), want);
                }
            }
        }
    }

    #[test]
    fn sequence_match_is_conjunction() {
        let good = pred_from_rows(vec![vec![5], vec![6], vec![7]], vec![5, 6, 7]);
        assert_eq!(sequence_match(&good, Scope::Full), 1.0);
        // one wrong mid: MSeq 0 while per-step recall can be high
        let rows = vec![vec![0], vec![9, 1], vec![2], vec![3]];
        let one_bad = pred_from_rows(rows, vec![0, 1, 2, 3]);
        assert_eq!(sequence_match(&one_bad, Scope::Mid), 0.0);
        assert_eq!(step_recall_at_k(&one_bad, 1, Scope::Mid), 0.5);

        let mut r = rng::stream(43, "seq-oracle");
        for _ in 0..200 {
            let h = r.gen_range(3..=8);
            let rows: Vec<Vec<usize>> = (0..h).map(|_| vec![r.gen_range(0..4)]).collect();
            let truth: Vec<usize> = (0..h).map(|_| r.gen_range(0..4)).collect();
            let p = pred_from_rows(rows.clone(), truth.clone());
            let want = (1..h - 1).all(|i| rows[i][0] == truth[i]);
            assert_eq!(sequence_match(&p, Scope::Mid) == 1.0, want);
        }
    }

    #[test]
    fn iou_cases() {
        assert_eq!(sequence_iou(&[0, 1, 2], &[0, 1, 3]), 0.5);
        assert_eq!(sequence_iou(&[4, 5], &[4, 5]), 1.0);
        assert_eq!(sequence_iou(&[], &[]), 1.0);
        // duplicates collapse before the set arithmetic
        assert_eq!(sequence_iou(&[7, 7, 8], &[7, 8, 8]), 1.0);
        let mut r = rng::stream(44, "iou-oracle");
        for _ in 0..200 {
            let a: Vec<usize> = (0..r.gen_range(1..8)).map(|_| r.gen_range(0..5)).collect();
            let b: Vec<usize> = (0..r.gen_range(1..8)).map(|_| r.gen_range(0..5)).collect();
            let sa: BTreeSet<usize> = a.iter().copied().collect();
            let sb: BTreeSet<usize> = b.iter().copied().collect();
            let want = sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64;
            assert_eq!(sequence_iou(&a, &b), want);
        }
    }

    /// Full-matrix DP, kept deliberately separate from the two-row version.
    fn edit_distance_oracle(a: &[usize], b: &[usize]) -> usize {
        let (n, m) = (a.len(), b.len());
        let mut dp = vec![vec![0usize; m + 1]; n + 1];
        for (i, row) in dp.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=m {
            dp[0][j] = j;
        }
        for i in 1..=n {
            for j in 1..=m {
                dp[i][j] = (dp[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]))
                    .min(dp[i - 1][j] + 1)
                    .min(dp[i][j - 1] + 1);
            }
        }
        dp[n][m]
    }

    #[test]
    fn edit_distance_cases_and_oracle() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[0, 1, 2], &[0, 1, 9]), 1);
        assert_eq!(edit_distance(&[], &[4, 5]), 2);
        let mut r = rng::stream(45, "edit-oracle");
        for _ in 0..200 {
            let a: Vec<usize> = (0..r.gen_range(0..10)).map(|_| r.gen_range(0..6)).collect();
            let b: Vec<usize> = (0..r.gen_range(0..10)).map(|_| r.gen_range(0..6)).collect();
            assert_eq!(edit_distance(&a, &b), edit_distance_oracle(&a, &b));
        }
    }

    proptest! {
        #[test]
        fn edit_distance_metric_axioms(
            a in prop::collection::vec(0usize..5, 0..8),
            b in prop::collection::vec(0usize..5, 0..8),
            c in prop::collection::vec(0usize..5, 0..8),
        ) {
            // identity
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert!(edit_distance(&a, &b) > 0 || a == b);
            // symmetry
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            // triangle inequality
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }

        #[test]
        fn recall_monotone_in_k(truth in prop::collection::vec(0usize..6, 3..8), seed in 0u64..400) {
            let mut r = rng::stream(seed, "recall-mono");
            let h = truth.len();
            let rows: Vec<Vec<usize>> = (0..h).map(|_| {
                let mut list: Vec<usize> = (0..8).collect();
                for i in (1..list.len()).rev() {
                    let j = r.gen_range(0..=i);
                    list.swap(i, j);
                }
                list
            }).collect();
            let p = SequencePrediction::new(rows, truth, h).unwrap();
            let mut prev = 0.0;
            for k in 1..=8 {
                let v = step_recall_at_k(&p, k, Scope::Full);
                prop_assert!(v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn mseq_mean_never_exceeds_m1_mean() {
        let mut r = rng::stream(46, "mseq-le-m1");
        let mut samples = Vec::new();
        for _ in 0..100 {
            let h = r.gen_range(3..=8);
            let rows: Vec<Vec<usize>> = (0..h).map(|_| vec![r.gen_range(0..3)]).collect();
            let truth: Vec<usize> = (0..h).map(|_| r.gen_range(0..3)).collect();
            let p = pred_from_rows(rows, truth);
            samples.push((h, sample_metrics(&p)));
        }
        let rep = aggregate(&samples).unwrap();
        assert!(rep.overall.mseq <= rep.overall.m_at_1 + 1e-12);
        for (_, _, m) in &rep.per_horizon {
            assert!(m.mseq <= m.m_at_1 + 1e-12);
        }
    }

    #[test]
    fn aggregate_single_sample_and_weighting() {
        let p = pred_from_rows(vec![vec![0], vec![1], vec![5]], vec![0, 1, 2]);
        let m = sample_metrics(&p);
        let rep = aggregate(&[(3, m)]).unwrap();
        assert_eq!(rep.total_samples, 1);
        assert_eq!(rep.overall.m_at_1, m.m_at_1);

        // two horizons with counts (10, 30): overall weights 0.25/0.75
        let mut samples = Vec::new();
        let a = SampleMetrics {
            m_at_1: 1.0,
            ..Default::default()
        };
        let b = SampleMetrics {
            m_at_1: 0.0,
            ..Default::default()
        };
        for _ in 0..10 {
            samples.push((3, a));
        }
        for _ in 0..30 {
            samples.push((5, b));
        }
        let rep = aggregate(&samples).unwrap();
        assert!((rep.overall.m_at_1 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn aggregate_csv_sums_match_recomputation() {
        let mut r = rng::stream(47, "csv-oracle");
        let mut samples = Vec::new();
        for _ in 0..60 {
            let h = r.gen_range(3..=8);
            let rows: Vec<Vec<usize>> = (0..h).map(|_| vec![r.gen_range(0..4)]).collect();
            let truth: Vec<usize> = (0..h).map(|_| r.gen_range(0..4)).collect();
            samples.push((h, sample_metrics(&pred_from_rows(rows, truth))));
        }
        let rep = aggregate(&samples).unwrap();
        // recomputation oracle: weighted per-horizon means equal the overall
        for (idx, name) in METRIC_NAMES.iter().enumerate() {
            let weighted: f64 = rep
                .per_horizon
                .iter()
                .map(|(_, n, m)| m.as_array()[idx] * *n as f64)
                .sum::<f64>()
                / rep.total_samples as f64;
            assert!(
                (weighted - rep.overall.as_array()[idx]).abs() < 1e-12,
                "{name} mismatch"
            );
        }
        let csv = rep.to_csv("oracle-test");
        assert_eq!(
            csv.lines().count(),
            1 + 10 * (rep.per_horizon.len() + 1),
            "one row per (horizon, metric) plus header and overall"
        );
    }

    #[test]
    fn rank_lists_must_be_duplicate_free() {
        assert!(SequencePrediction::new(vec![vec![1, 1]], vec![0], 1).is_err());
    }
}
