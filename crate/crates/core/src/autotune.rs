//! Per-problem tile-shape search with a process-wide winner cache.
//!
//! Candidates are the factorizations of a base row tile (64 queries) into one
//! factor per token axis. Thorough mode adds base tiles of 32 and 128. Each
//! candidate is timed and the fastest is cached under a structural problem key;
//! the cache can be persisted to JSON and merged across runs.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::NaError;
use crate::fused::fused_forward;
use crate::problem::{class_extent, AxisParams, NaParams, ProblemSpec, TileConfig};
use crate::reference;
use crate::tensor::{DType, Element, Tensor};
use crate::tiled::{tiled_in, tiled_nn, tiled_pn};

pub const BASE_TILE: usize = 64;
pub const THOROUGH_BASES: [usize; 2] = [32, 128];
pub const CACHE_VERSION: u32 = 1;
pub const CACHE_ENV: &str = "NATTN_TUNE_CACHE";
pub const WARMUP_RUNS: usize = 2;
pub const TIMED_RUNS: usize = 5;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("no tile candidates")]
    NoCandidates,
    #[error("timer failed: {0}")]
    Timer(String),
    #[error(transparent)]
    Na(#[from] NaError),
    #[error("cache file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cache file {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("cache file {path} has version {found}, expected {CACHE_VERSION}")]
    Version { path: PathBuf, found: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    TiledPn,
    TiledNn,
    TiledIn,
    Fused,
}

/// Structural identity of a tuning problem. The softmax scale is not part of
/// the key since it does not affect the schedule.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProblemKey {
    pub strategy: StrategyKind,
    pub batch: usize,
    pub heads: usize,
    pub extents: Vec<usize>,
    pub head_dim: usize,
    pub axes: Vec<AxisKey>,
    pub dtype: DType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AxisKey {
    pub window: usize,
    pub dilation: usize,
    pub causal: bool,
}

impl ProblemKey {
    pub fn new(
        strategy: StrategyKind,
        problem: &ProblemSpec,
        params: &NaParams,
        dtype: DType,
    ) -> Self {
        Self {
            strategy,
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

    pub fn problem(&self) -> ProblemSpec {
        ProblemSpec::new(self.batch, self.heads, &self.extents, self.head_dim)
    }

    /// Parameters with the default scale.
    pub fn params(&self) -> NaParams {
        let axes = self
            .axes
            .iter()
            .map(|a| AxisParams::new(a.window, a.dilation, a.causal))
            .collect();
        NaParams::new(axes, self.head_dim)
    }
}

fn factorizations(volume: usize, rank: usize) -> Vec<Vec<usize>> {
    if rank == 1 {
        return vec![vec![volume]];
    }
    (1..=volume)
        .filter(|f| volume % f == 0)
        .flat_map(|f| {
            factorizations(volume / f, rank - 1)
                .into_iter()
                .map(move |mut rest| {
                    rest.insert(0, f);
                    rest
                })
        })
        .collect()
}

/// Squarest first (smallest largest factor), then lexicographic.
fn squarest_first(tiles: &mut [Vec<usize>]) {
    tiles.sort_by(|a, b| {
        let ma = a.iter().max();
        let mb = b.iter().max();
        ma.cmp(&mb).then_with(|| a.cmp(b))
    });
}

/// Tile shapes worth timing for a problem. Every factor fits the largest
/// residue-class extent of its axis; if nothing fits, the squarest base tile is
/// clamped to the extents.
pub fn candidate_configs(
    problem: &ProblemSpec,
    params: &NaParams,
    thorough: bool,
) -> Vec<TileConfig> {
    let bounds: Vec<usize> = problem
        .extents
        .iter()
        .zip(&params.axes)
        .map(|(&e, a)| class_extent(e, a.dilation.max(1), 0))
        .collect();
    let rank = problem.rank();
    let mut bases = vec![BASE_TILE];
    if thorough {
        bases.extend(THOROUGH_BASES);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for base in bases {
        let mut tiles = factorizations(base, rank);
        squarest_first(&mut tiles);
        for t in tiles {
            if t.iter().zip(&bounds).all(|(f, b)| f <= b) && seen.insert(t.clone()) {
                out.push(TileConfig::square(t));
            }
        }
    }
    if out.is_empty() {
        let mut tiles = factorizations(BASE_TILE, rank);
        squarest_first(&mut tiles);
        let clamped = tiles[0]
            .iter()
            .zip(&bounds)
            .map(|(&f, &b)| f.min(b))
            .collect();
        out.push(TileConfig::square(clamped));
    }
    out
}

/// Produces a runtime estimate (seconds) for one candidate.
pub trait Benchmarker {
    fn measure(&mut self, key: &ProblemKey, cfg: &TileConfig) -> Result<f64, TuneError>;
}

/// Fixed costs per tile shape; counts how often it was asked.
#[derive(Debug, Default)]
pub struct CostTable {
    pub costs: HashMap<Vec<usize>, f64>,
    pub default_cost: f64,
    pub runs: usize,
}

impl Benchmarker for CostTable {
    fn measure(&mut self, _key: &ProblemKey, cfg: &TileConfig) -> Result<f64, TuneError> {
        self.runs += 1;
        Ok(*self.costs.get(&cfg.q_tile).unwrap_or(&self.default_cost))
    }
}

/// Median of `TIMED_RUNS` wall-clock runs after `WARMUP_RUNS` warmups, on
/// sample inputs matching the key.
pub struct WallClock<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    weights: Option<reference::CompactWeights<T>>,
    pub runs: usize,
}

impl<T: Element> WallClock<T> {
    pub fn new(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>) -> Self {
        Self {
            q,
            k,
            v,
            weights: None,
            runs: 0,
        }
    }

    /// Random inputs shaped for `key`.
    pub fn for_key(key: &ProblemKey, seed: u64) -> Self {
        let shape = key.problem().qkv_shape();
        Self::new(
            Tensor::random(&shape, seed),
            Tensor::random(&shape, seed + 1),
            Tensor::random(&shape, seed + 2),
        )
    }

    fn run_once(&mut self, key: &ProblemKey, cfg: &TileConfig) -> Result<(), NaError> {
        let (problem, params) = (key.problem(), key.params());
        match key.strategy {
            StrategyKind::TiledPn => {
                tiled_pn(&self.q, &self.k, &problem, &params, cfg)?;
            }
            StrategyKind::TiledNn | StrategyKind::TiledIn => {
                if self.weights.is_none() {
                    let (_, _, p) =
                        reference::na_forward(&self.q, &self.k, &self.v, &problem, &params)?;
                    self.weights = Some(p);
                }
                let p = self.weights.as_ref().expect("weights computed above");
                if key.strategy == StrategyKind::TiledNn {
                    tiled_nn(p, &self.v, &problem, &params, cfg)?;
                } else {
                    tiled_in(p, &self.v, &problem, &params, cfg)?;
                }
            }
            StrategyKind::Fused => {
                fused_forward(&self.q, &self.k, &self.v, &problem, &params, cfg)?;
            }
        }
        Ok(())
    }
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

impl<T: Element> Benchmarker for WallClock<T> {
    fn measure(&mut self, key: &ProblemKey, cfg: &TileConfig) -> Result<f64, TuneError> {
        self.runs += 1;
        for _ in 0..WARMUP_RUNS {
            self.run_once(key, cfg)?;
        }
        let mut times = Vec::with_capacity(TIMED_RUNS);
        for _ in 0..TIMED_RUNS {
            let t0 = Instant::now();
            self.run_once(key, cfg)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        let m = median(&mut times);
        if !m.is_finite() {
            return Err(TuneError::Timer(format!("non-finite median {m}")));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneEntry {
    pub tile: TileConfig,
    pub measured_s: f64,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    #[serde(flatten)]
    key: ProblemKey,
    tile: Vec<usize>,
    kv_tile: Vec<usize>,
    measured_s: f64,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    entries: Vec<CacheRecord>,
}

/// Problem key to winning tile. Entries are never overwritten in memory.
#[derive(Debug, Default)]
pub struct TuneCache {
    entries: RwLock<HashMap<ProblemKey, TuneEntry>>,
}

impl TuneCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &ProblemKey) -> Option<TuneEntry> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    /// Stores `entry` unless the key is already present; returns the stored entry.
    pub fn publish(&self, key: ProblemKey, entry: TuneEntry) -> TuneEntry {
        self.entries
            .write()
            .expect("cache lock")
            .entry(key)
            .or_insert(entry)
            .clone()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries sorted by key.
    pub fn snapshot(&self) -> Vec<(ProblemKey, TuneEntry)> {
        let mut v: Vec<_> = self
            .entries
            .read()
            .expect("cache lock")
            .iter()
            .map(|(k, e)| (k.clone(), e.clone()))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Adds every entry of `other`, replacing existing keys.
    pub fn merge(&self, other: &TuneCache) {
        let mut mine = self.entries.write().expect("cache lock");
        for (k, e) in other.snapshot() {
            mine.insert(k, e);
        }
    }

    /// Path from `NATTN_TUNE_CACHE`, or `nattn-tune-cache.json` in the working directory.
    pub fn default_path() -> PathBuf {
        std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("nattn-tune-cache.json"))
    }

    /// Reads a cache file; a missing file is an empty cache.
    pub fn load(path: &Path) -> Result<Self, TuneError> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::new()),
            Err(source) => {
                return Err(TuneError::Io {
                    path: path.to_owned(),
                    source,
                })
            }
        };
        let file: CacheFile = serde_json::from_str(&text).map_err(|source| TuneError::Json {
            path: path.to_owned(),
            source,
        })?;
        if file.version != CACHE_VERSION {
            return Err(TuneError::Version {
                path: path.to_owned(),
                found: file.version,
            });
        }
        let cache = Self::new();
        {
            let mut map = cache.entries.write().expect("cache lock");
            for r in file.entries {
                map.insert(
                    r.key,
                    TuneEntry {
                        tile: TileConfig::new(r.tile, r.kv_tile),
                        measured_s: r.measured_s,
                    },
                );
            }
        }
        Ok(cache)
    }

    /// Writes the cache, merging with what is already on disk (this cache wins
    /// on conflicting keys).
    pub fn save(&self, path: &Path) -> Result<(), TuneError> {
        let merged = Self::load(path)?;
        merged.merge(self);
        let file = CacheFile {
            version: CACHE_VERSION,
            entries: merged
                .snapshot()
                .into_iter()
                .map(|(key, e)| CacheRecord {
                    key,
                    tile: e.tile.q_tile,
                    kv_tile: e.tile.kv_tile,
                    measured_s: e.measured_s,
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|source| TuneError::Json {
            path: path.to_owned(),
            source,
        })?;
        std::fs::write(path, text).map_err(|source| TuneError::Io {
            path: path.to_owned(),
            source,
        })
    }
}

/// Returns the cached tile for `key`, or times every candidate, caches the
/// fastest (first in candidate order on ties) and returns it.
pub fn tune(
    key: &ProblemKey,
    cache: &TuneCache,
    bench: &mut dyn Benchmarker,
    thorough: bool,
) -> Result<TileConfig, TuneError> {
    if let Some(hit) = cache.get(key) {
        return Ok(hit.tile);
    }
    let (problem, params) = (key.problem(), key.params());
    crate::problem::validate(&problem, &params)?;
    let candidates = candidate_configs(&problem, &params, thorough);
    let mut best: Option<(TileConfig, f64)> = None;
    for cfg in candidates {
        let t = bench.measure(key, &cfg)?;
        if best.as_ref().is_none_or(|(_, bt)| t < *bt) {
            best = Some((cfg, t));
        }
    }
    let (tile, measured_s) = best.ok_or(TuneError::NoCandidates)?;
    Ok(cache
        .publish(key.clone(), TuneEntry { tile, measured_s })
        .tile)
}
