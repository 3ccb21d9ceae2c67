//! Correctness gate and timing loop.

use std::collections::BTreeSet;
use std::time::Instant;

use nattn_core::autotune::{median, ProblemKey, StrategyKind, TuneCache};
use nattn_core::fused::{fused_backward_composed, fused_forward};
use nattn_core::reference::{na_backward, na_forward};
use nattn_core::roofline::{roofline, CostModelInput};
use nattn_core::tiled::{tiled_backward, tiled_forward};
use nattn_core::{DType, Element, NaError, Tensor, TileConfig};
use rand::rngs::StdRng;
use rand::seq::index::sample;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::grid::{default_tile, GridError, GridSpec, PassKind, ProblemId, Skipped, Strategy};

/// Per-element tolerance of the gate, relative to `max(1, max |reference|)`.
pub fn gate_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::Fp32 => 1e-4,
        DType::Fp64 => 1e-10,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("correctness gate failed: {strategy} on {problem}: {detail}")]
    CorrectnessGate {
        problem: String,
        strategy: Strategy,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub problem: ProblemId,
    pub strategy: Strategy,
    pub pass: PassKind,
    pub median_seconds: f64,
    pub repeats: usize,
    /// Largest transient working set reported by the strategy, if it tracks one.
    pub peak_transient_bytes: Option<u64>,
    pub flops: u64,
    pub bytes: u64,
    pub intensity: f64,
    pub q_tile: Vec<usize>,
    pub kv_tile: Vec<usize>,
}

/// A problem/strategy pair that errored while being timed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub problem: String,
    pub strategy: Strategy,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<BenchRecord>,
    pub skipped: Vec<Skipped>,
    pub failures: Vec<Failure>,
    /// Problems (by display string) covered by the correctness gate.
    pub gated: Vec<String>,
}

pub struct Inputs<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub d_out: Tensor<T>,
}

impl<T: Element> Inputs<T> {
    pub fn random(id: &ProblemId, seed: u64) -> Self {
        let shape = id.problem().qkv_shape();
        Self {
            q: Tensor::random(&shape, seed),
            k: Tensor::random(&shape, seed.wrapping_add(1)),
            v: Tensor::random(&shape, seed.wrapping_add(2)),
            d_out: Tensor::random(&shape, seed.wrapping_add(3)),
        }
    }
}

/// Result of one execution: forward output, gradients for the
/// forward+backward pass, and the peak transient bytes if tracked.
pub struct Outcome<T> {
    pub out: Tensor<T>,
    pub grads: Option<[Tensor<T>; 3]>,
    pub peak_bytes: Option<u64>,
}

/// Executes one strategy on one problem. Injectable so the gate can be tested.
pub trait Runner {
    fn run<T: Element>(
        &self,
        strategy: Strategy,
        pass: PassKind,
        id: &ProblemId,
        cfg: &TileConfig,
        inputs: &Inputs<T>,
    ) -> Result<Outcome<T>, NaError>;
}

/// The library's own strategies.
pub struct CoreRunner;

impl Runner for CoreRunner {
    fn run<T: Element>(
        &self,
        strategy: Strategy,
        pass: PassKind,
        id: &ProblemId,
        cfg: &TileConfig,
        x: &Inputs<T>,
    ) -> Result<Outcome<T>, NaError> {
        let (p, params) = (id.problem(), id.params());
        let backward = pass == PassKind::ForwardBackward;
        match strategy {
            Strategy::Naive => {
                let (out, _, w) = na_forward(&x.q, &x.k, &x.v, &p, &params)?;
                let grads = if backward {
                    let (dq, dk, dv) =
                        na_backward(&x.d_out, &x.q, &x.k, &x.v, &w, &out, &p, &params)?;
                    Some([dq, dk, dv])
                } else {
                    None
                };
                Ok(Outcome {
                    out,
                    grads,
                    peak_bytes: None,
                })
            }
            Strategy::Tiled => {
                let f = tiled_forward(&x.q, &x.k, &x.v, &p, &params, cfg)?;
                let grads = if backward {
                    let (dq, dk, dv) = tiled_backward(
                        &x.d_out, &x.q, &x.k, &x.v, &f.weights, &f.out, &p, &params, cfg,
                    )?;
                    Some([dq, dk, dv])
                } else {
                    None
                };
                Ok(Outcome {
                    out: f.out,
                    grads,
                    peak_bytes: Some(f.ledger.peak_bytes as u64),
                })
            }
            Strategy::Fused => {
                let f = fused_forward(&x.q, &x.k, &x.v, &p, &params, cfg)?;
                let grads = if backward {
                    let (dq, dk, dv) = fused_backward_composed(
                        &x.d_out, &x.q, &x.k, &x.v, &f.out, &f.lse, &p, &params, cfg,
                    )?;
                    Some([dq, dk, dv])
                } else {
                    None
                };
                Ok(Outcome {
                    out: f.out,
                    grads,
                    peak_bytes: Some(f.ledger.peak_bytes as u64),
                })
            }
        }
    }
}

pub struct RunOptions<'a> {
    /// Tile shapes come from here when the problem has been tuned.
    pub cache: Option<&'a TuneCache>,
    /// Seed of the correctness subsample; defaults to the grid seed.
    pub gate_seed: Option<u64>,
    /// Gate every problem and skip timing.
    pub check_only: bool,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            cache: None,
            gate_seed: None,
            check_only: false,
        }
    }
}

fn tile_for(id: &ProblemId, strategy: Strategy, cache: Option<&TuneCache>) -> TileConfig {
    let kind = match strategy {
        Strategy::Fused => StrategyKind::Fused,
        _ => StrategyKind::TiledPn,
    };
    cache
        .and_then(|c| {
            c.get(&ProblemKey::new(
                kind,
                &id.problem(),
                &id.params(),
                id.dtype,
            ))
        })
        .map(|e| e.tile)
        .unwrap_or_else(|| default_tile(id.rank()))
}

fn input_seed(grid_seed: u64, index: usize) -> u64 {
    grid_seed.wrapping_add(1000 * index as u64)
}

/// Largest element-wise deviation relative to the reference magnitude.
fn deviation<T: Element>(got: &Tensor<T>, want: &Tensor<T>) -> f64 {
    let scale = want
        .data()
        .iter()
        .fold(1.0f64, |m, x| m.max(x.as_f64().abs()));
    got.max_abs_diff(want) / scale
}

fn gate_one<T: Element, R: Runner>(
    runner: &R,
    spec: &GridSpec,
    id: &ProblemId,
    index: usize,
    cache: Option<&TuneCache>,
) -> Result<(), BenchError> {
    let x = Inputs::<T>::random(id, input_seed(spec.seed, index));
    let reference = CoreRunner
        .run(Strategy::Naive, spec.pass, id, &default_tile(id.rank()), &x)
        .map_err(|e| BenchError::CorrectnessGate {
            problem: id.to_string(),
            strategy: Strategy::Naive,
            detail: format!("reference failed: {e}"),
        })?;
    let tol = gate_tolerance(id.dtype);
    for &strategy in &spec.strategies {
        let fail = |detail: String| BenchError::CorrectnessGate {
            problem: id.to_string(),
            strategy,
            detail,
        };
        let got = runner
            .run(strategy, spec.pass, id, &tile_for(id, strategy, cache), &x)
            .map_err(|e| fail(e.to_string()))?;
        let mut worst = deviation(&got.out, &reference.out);
        if let (Some(g), Some(r)) = (&got.grads, &reference.grads) {
            for (a, b) in g.iter().zip(r) {
                worst = worst.max(deviation(a, b));
            }
        }
        if !(worst <= tol) {
            return Err(fail(format!("deviation {worst:e} exceeds {tol:e}")));
        }
    }
    Ok(())
}

fn time_one<T: Element, R: Runner>(
    runner: &R,
    spec: &GridSpec,
    id: &ProblemId,
    index: usize,
    strategy: Strategy,
    cache: Option<&TuneCache>,
) -> Result<BenchRecord, NaError> {
    let x = Inputs::<T>::random(id, input_seed(spec.seed, index));
    let cfg = tile_for(id, strategy, cache);
    let mut peak = None;
    for _ in 0..spec.warmups {
        peak = runner.run(strategy, spec.pass, id, &cfg, &x)?.peak_bytes;
    }
    let mut samples = Vec::with_capacity(spec.repeats);
    for _ in 0..spec.repeats {
        let start = Instant::now();
        let o = runner.run(strategy, spec.pass, id, &cfg, &x)?;
        samples.push(start.elapsed().as_secs_f64());
        peak = o.peak_bytes;
        drop(o);
    }
    // a zero reading means the timer is coarser than the run
    let median_seconds = median(&mut samples).max(f64::MIN_POSITIVE);
    let model = roofline(&CostModelInput::new(
        id.problem(),
        Some(id.params()),
        id.dtype.size_bytes(),
        strategy == Strategy::Fused,
    ));
    Ok(BenchRecord {
        problem: id.clone(),
        strategy,
        pass: spec.pass,
        median_seconds,
        repeats: spec.repeats,
        peak_transient_bytes: peak,
        flops: model.flops,
        bytes: model.bytes,
        intensity: model.intensity,
        q_tile: cfg.q_tile,
        kv_tile: cfg.kv_tile,
    })
}

/// Indices of the gated problems: `ceil(fraction * n)`, at least one.
pub fn gate_sample(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let count = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let mut rng = StdRng::seed_from_u64(seed);
    let picked: BTreeSet<usize> = sample(&mut rng, n, count).into_iter().collect();
    picked.into_iter().collect()
}

/// Expands the grid, gates a random subsample of problems against the
/// reference, then times every problem and strategy.
pub fn run_grid<R: Runner>(
    spec: &GridSpec,
    runner: &R,
    opts: &RunOptions<'_>,
) -> Result<RunReport, BenchError> {
    spec.check()?;
    let (problems, skipped) = spec.expand();
    if problems.is_empty() {
        return Err(GridError::NoProblems {
            skipped: skipped.len(),
        }
        .into());
    }
    let gated = if opts.check_only {
        (0..problems.len()).collect()
    } else {
        gate_sample(
            problems.len(),
            spec.gate_fraction,
            opts.gate_seed.unwrap_or(spec.seed),
        )
    };
    for &i in &gated {
        match spec.dtype {
            DType::Fp32 => gate_one::<f32, R>(runner, spec, &problems[i], i, opts.cache)?,
            DType::Fp64 => gate_one::<f64, R>(runner, spec, &problems[i], i, opts.cache)?,
        }
    }
    let mut report = RunReport {
        skipped,
        gated: gated.iter().map(|&i| problems[i].to_string()).collect(),
        ..Default::default()
    };
    if opts.check_only {
        return Ok(report);
    }
    for (i, id) in problems.iter().enumerate() {
        for &strategy in &spec.strategies {
            let r = match spec.dtype {
                DType::Fp32 => time_one::<f32, R>(runner, spec, id, i, strategy, opts.cache),
                DType::Fp64 => time_one::<f64, R>(runner, spec, id, i, strategy, opts.cache),
            };
            match r {
                Ok(rec) => report.records.push(rec),
                Err(e) => report.failures.push(Failure {
                    problem: id.to_string(),
                    strategy,
                    reason: e.to_string(),
                }),
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CausalSpec;

    fn tiny() -> GridSpec {
        GridSpec {
            batches: vec![1],
            extents: vec![vec![12]],
            heads: vec![1],
            head_dims: vec![4],
            windows: vec![3],
            dilations: vec![1],
            causal: vec![CausalSpec::None],
            strategies: Strategy::ALL.to_vec(),
            dtype: DType::Fp64,
            pass: PassKind::Forward,
            warmups: 0,
            repeats: 2,
            gate_fraction: 0.05,
            seed: 3,
        }
    }

    #[test]
    fn one_problem_three_records() {
        let r = run_grid(&tiny(), &CoreRunner, &RunOptions::default()).unwrap();
        assert_eq!(r.records.len(), 3);
        assert_eq!(r.gated.len(), 1);
        assert!(r
            .records
            .iter()
            .all(|x| x.median_seconds > 0.0 && x.repeats == 2));
        let fused = r
            .records
            .iter()
            .find(|x| x.strategy == Strategy::Fused)
            .unwrap();
        assert!(fused.peak_transient_bytes.is_some());
        assert_eq!(fused.flops, 4 * 12 * 3 * 4);
    }

    #[test]
    fn backward_pass_is_gated_and_timed() {
        let mut g = tiny();
        g.pass = PassKind::ForwardBackward;
        g.causal = vec![CausalSpec::All];
        let r = run_grid(&g, &CoreRunner, &RunOptions::default()).unwrap();
        assert_eq!(r.records.len(), 3);
        assert!(r
            .records
            .iter()
            .all(|x| x.pass == PassKind::ForwardBackward));
    }

    struct Broken;

    impl Runner for Broken {
        fn run<T: Element>(
            &self,
            strategy: Strategy,
            pass: PassKind,
            id: &ProblemId,
            cfg: &TileConfig,
            x: &Inputs<T>,
        ) -> Result<Outcome<T>, NaError> {
            let mut o = CoreRunner.run(strategy, pass, id, cfg, x)?;
            if strategy == Strategy::Fused {
                o.out.data_mut()[0] += T::from_f64(0.5);
            }
            Ok(o)
        }
    }

    #[test]
    fn faulty_strategy_trips_the_gate() {
        let err = run_grid(&tiny(), &Broken, &RunOptions::default()).unwrap_err();
        assert!(
            matches!(
                err,
                BenchError::CorrectnessGate {
                    strategy: Strategy::Fused,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn gate_sample_size() {
        assert_eq!(gate_sample(10, 0.05, 0).len(), 1);
        assert_eq!(gate_sample(100, 0.05, 0).len(), 5);
        assert_eq!(gate_sample(101, 0.05, 0).len(), 6);
        assert_eq!(gate_sample(3, 1.0, 0), vec![0, 1, 2]);
        assert_eq!(gate_sample(50, 0.1, 9), gate_sample(50, 0.1, 9));
    }

    #[test]
    fn all_invalid_grid_is_an_error() {
        let mut g = tiny();
        g.windows = vec![4];
        assert!(matches!(
            run_grid(&g, &CoreRunner, &RunOptions::default()),
            Err(BenchError::Grid(GridError::NoProblems { skipped: 1 }))
        ));
    }
}
