//! Summary statistics over benchmark records: the "matched or outperformed"
//! matrix and the average/min/max improvement breakdown, per token-space rank.

use std::collections::BTreeMap;

use nattn_core::DType;
use serde::{Deserialize, Serialize};

use crate::grid::{PassKind, Strategy};
use crate::run::BenchRecord;

/// A is counted as matching B when `t_A <= t_B * MATCH_SLACK`.
pub const MATCH_SLACK: f64 = 1.02;

/// Pairs reported in the improvement breakdown, as (new, baseline).
pub const IMPROVEMENT_PAIRS: [(Strategy, Strategy); 3] = [
    (Strategy::Tiled, Strategy::Naive),
    (Strategy::Fused, Strategy::Naive),
    (Strategy::Fused, Strategy::Tiled),
];

/// Speedup of `t_new` over `t_base` in percent.
pub fn improvement_pct(t_base: f64, t_new: f64) -> f64 {
    assert!(t_base > 0.0 && t_new > 0.0, "timings must be positive");
    (t_base / t_new - 1.0) * 100.0
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SummaryError {
    #[error("no benchmark records to summarize")]
    EmptyInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementStats {
    pub average: f64,
    pub min: f64,
    pub max: f64,
    pub problems: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub new: Strategy,
    pub base: Strategy,
    /// `None` when no problem has both strategies.
    pub stats: Option<ImprovementStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub rank: usize,
    pub problems: usize,
    /// Rows and columns of `matched`.
    pub strategies: Vec<Strategy>,
    /// `matched[a][b]`: percent of problems where row `a` matched or beat
    /// column `b`. The diagonal, and pairs never run together, are `None`.
    pub matched: Vec<Vec<Option<f64>>>,
    pub improvements: Vec<Improvement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub pass: PassKind,
    pub dtype: DType,
    pub ranks: Vec<RankSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTables {
    pub sections: Vec<PassSummary>,
}

fn stats(values: &[f64]) -> Option<ImprovementStats> {
    if values.is_empty() {
        return None;
    }
    Some(ImprovementStats {
        average: values.iter().sum::<f64>() / values.len() as f64,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        problems: values.len(),
    })
}

type Timings = BTreeMap<String, BTreeMap<Strategy, f64>>;

fn rank_summary(rank: usize, timings: &Timings) -> RankSummary {
    let strategies: Vec<Strategy> = Strategy::ALL
        .into_iter()
        .filter(|s| timings.values().any(|t| t.contains_key(s)))
        .collect();
    let matched = strategies
        .iter()
        .map(|&a| {
            strategies
                .iter()
                .map(|&b| {
                    if a == b {
                        return None;
                    }
                    let pairs: Vec<(f64, f64)> = timings
                        .values()
                        .filter_map(|t| Some((*t.get(&a)?, *t.get(&b)?)))
                        .collect();
                    if pairs.is_empty() {
                        return None;
                    }
                    let wins = pairs
                        .iter()
                        .filter(|(ta, tb)| *ta <= tb * MATCH_SLACK)
                        .count();
                    Some(100.0 * wins as f64 / pairs.len() as f64)
                })
                .collect()
        })
        .collect();
    let improvements = IMPROVEMENT_PAIRS
        .iter()
        .map(|&(new, base)| {
            let values: Vec<f64> = timings
                .values()
                .filter_map(|t| Some(improvement_pct(*t.get(&base)?, *t.get(&new)?)))
                .collect();
            Improvement {
                new,
                base,
                stats: stats(&values),
            }
        })
        .collect();
    RankSummary {
        rank,
        problems: timings.len(),
        strategies,
        matched,
        improvements,
    }
}

/// Groups records by pass, dtype and rank. A pure function of the records:
/// problems are keyed and ordered by their display string.
pub fn summarize(records: &[BenchRecord]) -> Result<SummaryTables, SummaryError> {
    if records.is_empty() {
        return Err(SummaryError::EmptyInput);
    }
    let mut groups: BTreeMap<(PassKind, DType, usize), Timings> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.pass, r.problem.dtype, r.problem.rank()))
            .or_default()
            .entry(r.problem.to_string())
            .or_default()
            .insert(r.strategy, r.median_seconds);
    }
    let mut sections: Vec<PassSummary> = Vec::new();
    for ((pass, dtype, rank), timings) in &groups {
        let summary = rank_summary(*rank, timings);
        match sections.last_mut() {
            Some(s) if s.pass == *pass && s.dtype == *dtype => s.ranks.push(summary),
            _ => sections.push(PassSummary {
                pass: *pass,
                dtype: *dtype,
                ranks: vec![summary],
            }),
        }
    }
    Ok(SummaryTables { sections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ProblemId;
    use nattn_core::{AxisParams, NaParams, ProblemSpec};

    fn rec(n: usize, strategy: Strategy, t: f64) -> BenchRecord {
        let p = ProblemSpec::new(1, 1, &[n], 4);
        let params = NaParams::new(vec![AxisParams::window(3)], 4);
        BenchRecord {
            problem: ProblemId::new(&p, &params, DType::Fp32),
            strategy,
            pass: PassKind::Forward,
            median_seconds: t,
            repeats: 1,
            peak_transient_bytes: None,
            flops: 0,
            bytes: 0,
            intensity: 0.0,
            q_tile: vec![64],
            kv_tile: vec![64],
        }
    }

    #[test]
    fn improvement_examples() {
        assert_eq!(improvement_pct(10e-3, 2e-3), 400.0);
        assert_eq!(improvement_pct(5e-3, 5e-3), 0.0);
        assert_eq!(improvement_pct(2e-3, 4e-3), -50.0);
    }

    #[test]
    fn equal_counts_as_matched() {
        let mut r = Vec::new();
        for (n, ta) in [(8, 1.0), (9, 1.0), (10, 1.0), (11, 2.0)] {
            r.push(rec(n, Strategy::Fused, ta));
            r.push(rec(n, Strategy::Naive, if n == 11 { 2.0 } else { 3.0 }));
        }
        let s = summarize(&r).unwrap();
        let rank = &s.sections[0].ranks[0];
        assert_eq!(rank.strategies, vec![Strategy::Naive, Strategy::Fused]);
        assert_eq!(rank.matched[1][0], Some(100.0));
        assert_eq!(rank.matched[0][1], Some(25.0));
        assert_eq!(rank.matched[0][0], None);

        r.pop();
        r.push(rec(11, Strategy::Naive, 1.0));
        let s = summarize(&r).unwrap();
        assert_eq!(s.sections[0].ranks[0].matched[1][0], Some(75.0));
    }

    #[test]
    fn single_pair_stats() {
        let s = summarize(&[
            rec(8, Strategy::Naive, 0.010),
            rec(8, Strategy::Fused, 0.002),
        ])
        .unwrap();
        let imp = &s.sections[0].ranks[0].improvements;
        assert!(imp[0].stats.is_none());
        let st = imp[1].stats.as_ref().unwrap();
        assert!((st.average - 400.0).abs() < 1e-9);
        assert_eq!((st.average, st.average), (st.min, st.max));
    }

    #[test]
    fn empty_input() {
        assert_eq!(summarize(&[]), Err(SummaryError::EmptyInput));
    }
}
