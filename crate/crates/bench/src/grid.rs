//! Benchmark grids: the cartesian product of problem dimensions, expanded into
//! validated problems.

use std::fmt;

use nattn_core::autotune::AxisKey;
use nattn_core::{validate, AxisParams, DType, NaParams, ProblemSpec, TileConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Naive,
    Tiled,
    Fused,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Naive, Strategy::Tiled, Strategy::Fused];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Tiled => "tiled",
            Strategy::Fused => "fused",
        }
    }

    /// Column/row label used in the markdown tables.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::Naive => "Naive",
            Strategy::Tiled => "GEMM",
            Strategy::Fused => "Fused",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PassKind {
    Forward,
    ForwardBackward,
}

impl PassKind {
    pub fn name(self) -> &'static str {
        match self {
            PassKind::Forward => "forward",
            PassKind::ForwardBackward => "forward-backward",
        }
    }
}

impl fmt::Display for PassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which axes are causal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CausalSpec {
    None,
    All,
    /// Only the first axis.
    Leading,
    /// Every per-axis combination.
    Every,
}

impl CausalSpec {
    fn expand(self, rank: usize) -> Vec<Vec<bool>> {
        match self {
            CausalSpec::None => vec![vec![false; rank]],
            CausalSpec::All => vec![vec![true; rank]],
            CausalSpec::Leading => vec![(0..rank).map(|a| a == 0).collect()],
            CausalSpec::Every => (0..1usize << rank)
                .map(|bits| (0..rank).map(|a| bits >> a & 1 == 1).collect())
                .collect(),
        }
    }
}

fn one() -> Vec<usize> {
    vec![1]
}
fn no_causal() -> Vec<CausalSpec> {
    vec![CausalSpec::None]
}
fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}
fn fp32() -> DType {
    DType::Fp32
}
fn forward() -> PassKind {
    PassKind::Forward
}
fn warmups() -> usize {
    3
}
fn repeats() -> usize {
    10
}
fn gate_fraction() -> f64 {
    0.05
}
fn seed() -> u64 {
    0
}

/// A benchmark sweep. Windows and dilations apply to every axis of a shape;
/// shapes of different ranks may be mixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default = "one")]
    pub batches: Vec<usize>,
    /// Token-space shapes, e.g. `[[4096], [64, 64], [16, 16, 16]]`.
    pub extents: Vec<Vec<usize>>,
    #[serde(default = "one")]
    pub heads: Vec<usize>,
    pub head_dims: Vec<usize>,
    pub windows: Vec<usize>,
    #[serde(default = "one")]
    pub dilations: Vec<usize>,
    #[serde(default = "no_causal")]
    pub causal: Vec<CausalSpec>,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "fp32")]
    pub dtype: DType,
    #[serde(default = "forward")]
    pub pass: PassKind,
    #[serde(default = "warmups")]
    pub warmups: usize,
    #[serde(default = "repeats")]
    pub repeats: usize,
    /// Fraction of problems spot-checked against the reference before timing.
    #[serde(default = "gate_fraction")]
    pub gate_fraction: f64,
    /// Seed for inputs and for the correctness subsample.
    #[serde(default = "seed")]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GridError {
    #[error("grid field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("repeats must be at least 1")]
    NoRepeats,
    #[error("gate fraction {0} is outside (0, 1]")]
    GateFraction(String),
    #[error("no valid problem in grid ({skipped} combinations skipped)")]
    NoProblems { skipped: usize },
}

/// Problem identity shared by every record of the same problem.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProblemId {
    pub batch: usize,
    pub heads: usize,
    pub extents: Vec<usize>,
    pub head_dim: usize,
    pub axes: Vec<AxisKey>,
    pub dtype: DType,
}

impl ProblemId {
    pub fn new(problem: &ProblemSpec, params: &NaParams, dtype: DType) -> Self {
        Self {
            batch: problem.batch,
            heads: problem.heads,
            extents: problem.extents.clone(),
            head_dim: problem.head_dim,
            axes: params
                .axes
                .iter()
                .map(|a| AxisKey {
                    window: a.window,
                    dilation: a.dilation,
                    causal: a.causal,
                })
                .collect(),
            dtype,
        }
    }

    pub fn rank(&self) -> usize {
        self.extents.len()
    }

    pub fn problem(&self) -> ProblemSpec {
        ProblemSpec::new(self.batch, self.heads, &self.extents, self.head_dim)
    }

    pub fn params(&self) -> NaParams {
        let axes = self
            .axes
            .iter()
            .map(|a| AxisParams::new(a.window, a.dilation, a.causal))
            .collect();
        NaParams::new(axes, self.head_dim)
    }
}

pub(crate) fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

impl fmt::Display for ProblemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let windows: Vec<usize> = self.axes.iter().map(|a| a.window).collect();
        let dilations: Vec<usize> = self.axes.iter().map(|a| a.dilation).collect();
        let causal: String = self
            .axes
            .iter()
            .map(|a| if a.causal { 'c' } else { '-' })
            .collect();
        write!(
            f,
            "b{} h{} n{} d{} k{} dil{} {} {}",
            self.batch,
            self.heads,
            join(&self.extents),
            self.head_dim,
            join(&windows),
            join(&dilations),
            causal,
            self.dtype
        )
    }
}

/// A combination that failed validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub problem: String,
    pub reason: String,
}

impl GridSpec {
    pub fn check(&self) -> Result<(), GridError> {
        let fields: [(&'static str, bool); 8] = [
            ("batches", self.batches.is_empty()),
            ("extents", self.extents.is_empty()),
            ("heads", self.heads.is_empty()),
            ("head_dims", self.head_dims.is_empty()),
            ("windows", self.windows.is_empty()),
            ("dilations", self.dilations.is_empty()),
            ("causal", self.causal.is_empty()),
            ("strategies", self.strategies.is_empty()),
        ];
        if let Some((name, _)) = fields.iter().find(|f| f.1) {
            return Err(GridError::EmptyField(name));
        }
        if self.repeats == 0 {
            return Err(GridError::NoRepeats);
        }
        if !(self.gate_fraction > 0.0 && self.gate_fraction <= 1.0) {
            return Err(GridError::GateFraction(self.gate_fraction.to_string()));
        }
        Ok(())
    }

    /// Every distinct combination, in grid order; invalid ones come back as
    /// [`Skipped`].
    pub fn expand(&self) -> (Vec<ProblemId>, Vec<Skipped>) {
        let mut problems = Vec::new();
        let mut skipped = Vec::new();
        for extents in &self.extents {
            let rank = extents.len();
            let mut combos: Vec<Vec<bool>> = Vec::new();
            for c in &self.causal {
                for m in c.expand(rank) {
                    if !combos.contains(&m) {
                        combos.push(m);
                    }
                }
            }
            for &batch in &self.batches {
                for &heads in &self.heads {
                    for &d in &self.head_dims {
                        for &window in &self.windows {
                            for &dilation in &self.dilations {
                                for causal in &combos {
                                    let axes = causal
                                        .iter()
                                        .map(|&c| AxisParams::new(window, dilation, c))
                                        .collect();
                                    let problem = ProblemSpec::new(batch, heads, extents, d);
                                    let params = NaParams::new(axes, d.max(1));
                                    let id = ProblemId::new(&problem, &params, self.dtype);
                                    match validate(&problem, &params) {
                                        Ok(()) if problems.contains(&id) => {}
                                        Ok(()) => problems.push(id),
                                        Err(e) => skipped.push(Skipped {
                                            problem: id.to_string(),
                                            reason: e.to_string(),
                                        }),
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (problems, skipped)
    }

    /// A small mixed-rank grid that runs in seconds.
    pub fn smoke() -> Self {
        Self {
            batches: vec![1],
            extents: vec![vec![256], vec![16, 16], vec![10, 10, 10]],
            heads: vec![2],
            head_dims: vec![16],
            windows: vec![3, 5],
            dilations: vec![1, 2],
            causal: vec![CausalSpec::None],
            strategies: all_strategies(),
            dtype: DType::Fp32,
            pass: PassKind::Forward,
            warmups: 1,
            repeats: 3,
            gate_fraction: gate_fraction(),
            seed: 0,
        }
    }
}

/// Tile shape used when the tuning cache has no entry.
pub fn default_tile(rank: usize) -> TileConfig {
    TileConfig::default_for_rank(rank)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(json: &str) -> GridSpec {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let g = grid(r#"{"extents": [[8]], "head_dims": [4], "windows": [3]}"#);
        assert_eq!(g.strategies, Strategy::ALL);
        assert_eq!((g.warmups, g.repeats), (3, 10));
        assert_eq!(g.expand().0.len(), 1);
    }

    #[test]
    fn even_non_causal_window_is_skipped() {
        let g = grid(
            r#"{"extents": [[8]], "head_dims": [4], "windows": [3, 4], "causal": ["none", "all"]}"#,
        );
        let (problems, skipped) = g.expand();
        assert_eq!(problems.len(), 3);
        assert_eq!(skipped.len(), 1);
        assert!(skipped[0].reason.contains("odd"), "{}", skipped[0].reason);
    }

    #[test]
    fn every_causal_combination() {
        let g = grid(
            r#"{"extents": [[5, 5, 5]], "head_dims": [1], "windows": [3], "causal": ["every", "none"]}"#,
        );
        assert_eq!(g.expand().0.len(), 8);
    }

    #[test]
    fn smoke_grid_is_large_enough() {
        let (problems, skipped) = GridSpec::smoke().expand();
        assert!(problems.len() >= 12, "{}", problems.len());
        assert!(skipped.is_empty(), "{skipped:?}");
    }

    #[test]
    fn empty_fields_rejected() {
        let mut g = GridSpec::smoke();
        g.windows.clear();
        assert_eq!(g.check(), Err(GridError::EmptyField("windows")));
    }
}
