//! Problem and parameter types shared by every execution strategy.

use serde::{Deserialize, Serialize};

use crate::error::{NaError, Result};

pub const MAX_RANK: usize = 3;

/// A token coordinate padded to [`MAX_RANK`] axes; unused trailing axes are 0.
pub type Coord = [usize; MAX_RANK];

/// Shape of an attention problem: `[batch, heads, extents..., head_dim]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub batch: usize,
    pub heads: usize,
    pub extents: Vec<usize>,
    pub head_dim: usize,
}

impl ProblemSpec {
    pub fn new(batch: usize, heads: usize, extents: &[usize], head_dim: usize) -> Self {
        Self {
            batch,
            heads,
            extents: extents.to_vec(),
            head_dim,
        }
    }

    pub fn rank(&self) -> usize {
        self.extents.len()
    }

    /// Total number of tokens per (batch, head).
    pub fn num_tokens(&self) -> usize {
        self.extents.iter().product()
    }

    /// Extents padded with 1 up to [`MAX_RANK`].
    pub fn padded_extents(&self) -> Coord {
        let mut out = [1; MAX_RANK];
        out[..self.rank()].copy_from_slice(&self.extents);
        out
    }

    /// `[batch, heads, extents..., head_dim]`
    pub fn qkv_shape(&self) -> Vec<usize> {
        self.shape_with_last(self.head_dim)
    }

    /// `[batch, heads, extents...]`
    pub fn token_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.heads];
        s.extend_from_slice(&self.extents);
        s
    }

    pub(crate) fn shape_with_last(&self, last: usize) -> Vec<usize> {
        let mut s = self.token_shape();
        s.push(last);
        s
    }

    fn check_shape(&self) -> Result<()> {
        if !(1..=MAX_RANK).contains(&self.rank()) {
            return Err(NaError::BadRank(self.rank()));
        }
        for (name, v) in [
            ("batch", self.batch),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
        ] {
            if v == 0 {
                return Err(NaError::EmptyDimension { name });
            }
        }
        if self.extents.iter().any(|&e| e == 0) {
            return Err(NaError::EmptyDimension { name: "extent" });
        }
        Ok(())
    }
}

/// Neighborhood parameters for one token axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AxisParams {
    pub window: usize,
    pub dilation: usize,
    pub causal: bool,
}

impl AxisParams {
    pub fn new(window: usize, dilation: usize, causal: bool) -> Self {
        Self {
            window,
            dilation,
            causal,
        }
    }

    pub fn window(window: usize) -> Self {
        Self::new(window, 1, false)
    }

    pub fn causal(window: usize) -> Self {
        Self::new(window, 1, true)
    }

    /// Identity axis used to pad problems of rank < 3.
    pub(crate) const UNIT: AxisParams = AxisParams {
        window: 1,
        dilation: 1,
        causal: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaParams {
    pub axes: Vec<AxisParams>,
    pub scale: f64,
}

impl NaParams {
    /// Parameters with the default `1/sqrt(head_dim)` softmax scale.
    pub fn new(axes: Vec<AxisParams>, head_dim: usize) -> Self {
        Self {
            axes,
            scale: 1.0 / (head_dim as f64).sqrt(),
        }
    }

    pub fn with_scale(&self, scale: f64) -> Self {
        Self {
            axes: self.axes.clone(),
            scale,
        }
    }

    /// Number of attention slots per query (product of per-axis windows).
    pub fn window_volume(&self) -> usize {
        self.axes.iter().map(|a| a.window).product()
    }

    pub fn windows(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.window).collect()
    }

    pub fn is_dilated(&self) -> bool {
        self.axes.iter().any(|a| a.dilation > 1)
    }

    pub(crate) fn padded_axes(&self) -> [AxisParams; MAX_RANK] {
        let mut out = [AxisParams::UNIT; MAX_RANK];
        out[..self.axes.len()].copy_from_slice(&self.axes);
        out
    }
}

/// Number of tokens in residue class `residue` of an axis of `extent` tokens
/// split with stride `dilation`.
pub fn class_extent(extent: usize, dilation: usize, residue: usize) -> usize {
    debug_assert!(residue < dilation);
    if residue >= extent {
        0
    } else {
        (extent - residue).div_ceil(dilation)
    }
}

/// Checks every constraint on a problem and its parameters, reporting the first
/// violation found.
pub fn validate(problem: &ProblemSpec, params: &NaParams) -> Result<()> {
    problem.check_shape()?;
    if params.axes.len() != problem.rank() {
        return Err(NaError::RankMismatch {
            expected: problem.rank(),
            got: params.axes.len(),
        });
    }
    if !params.scale.is_finite() {
        return Err(NaError::BadScale(params.scale));
    }
    for (axis, (p, &extent)) in params.axes.iter().zip(&problem.extents).enumerate() {
        if p.dilation == 0 || p.dilation > extent {
            return Err(NaError::BadDilation {
                axis,
                dilation: p.dilation,
                extent,
            });
        }
        if p.window == 0 {
            return Err(NaError::ZeroWindow { axis });
        }
        if !p.causal && p.window % 2 == 0 {
            return Err(NaError::EvenWindowNonCausal {
                axis,
                window: p.window,
            });
        }
        // the last residue class is the smallest one
        let smallest = extent / p.dilation;
        if p.window > smallest {
            return Err(NaError::WindowExceedsExtent {
                axis,
                window: p.window,
                class_extent: smallest,
            });
        }
    }
    Ok(())
}

/// Per-axis query tile and key/value tile extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileConfig {
    pub q_tile: Vec<usize>,
    pub kv_tile: Vec<usize>,
}

impl TileConfig {
    pub fn new(q_tile: Vec<usize>, kv_tile: Vec<usize>) -> Self {
        Self { q_tile, kv_tile }
    }

    /// Same shape for query and key/value tiles.
    pub fn square(tile: Vec<usize>) -> Self {
        Self {
            kv_tile: tile.clone(),
            q_tile: tile,
        }
    }

    /// Base row tile of 64 queries, factored as squarely as possible for the rank.
    pub fn default_for_rank(rank: usize) -> Self {
        let tile = match rank {
            1 => vec![64],
            2 => vec![8, 8],
            _ => vec![4, 4, 4],
        };
        Self::square(tile)
    }

    pub fn q_volume(&self) -> usize {
        self.q_tile.iter().product()
    }

    pub fn kv_volume(&self) -> usize {
        self.kv_tile.iter().product()
    }

    pub fn check(&self, rank: usize) -> Result<()> {
        for (name, tile) in [("q_tile", &self.q_tile), ("kv_tile", &self.kv_tile)] {
            if tile.len() != rank {
                return Err(NaError::TileConfigInvalid(format!(
                    "{name} has {} axes, problem has rank {rank}",
                    tile.len()
                )));
            }
            if tile.iter().any(|&t| t == 0) {
                return Err(NaError::TileConfigInvalid(format!(
                    "{name} {tile:?} has a zero extent"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_axis(extent: usize, axis: AxisParams) -> Result<()> {
        let p = ProblemSpec::new(1, 1, &[extent], 4);
        validate(&p, &NaParams::new(vec![axis], 4))
    }

    #[test]
    fn accepts_odd_window() {
        assert_eq!(one_axis(5, AxisParams::window(3)), Ok(()));
    }

    #[test]
    fn rejects_even_non_causal_window() {
        assert!(matches!(
            one_axis(5, AxisParams::window(4)),
            Err(NaError::EvenWindowNonCausal { axis: 0, window: 4 })
        ));
        assert_eq!(one_axis(5, AxisParams::causal(4)), Ok(()));
    }

    #[test]
    fn rejects_window_larger_than_residue_class() {
        assert!(matches!(
            one_axis(8, AxisParams::new(5, 2, false)),
            Err(NaError::WindowExceedsExtent {
                window: 5,
                class_extent: 4,
                ..
            })
        ));
        // 7 tokens with dilation 2 split into classes of 4 and 3
        assert!(one_axis(7, AxisParams::new(3, 2, false)).is_ok());
        assert!(one_axis(7, AxisParams::new(5, 2, false)).is_err());
    }

    #[test]
    fn rejects_bad_dilation_and_rank() {
        assert!(matches!(
            one_axis(5, AxisParams::new(1, 0, false)),
            Err(NaError::BadDilation { .. })
        ));
        assert!(matches!(
            one_axis(5, AxisParams::new(1, 6, false)),
            Err(NaError::BadDilation { .. })
        ));
        let p = ProblemSpec::new(1, 1, &[4, 4], 4);
        assert!(matches!(
            validate(&p, &NaParams::new(vec![AxisParams::window(3)], 4)),
            Err(NaError::RankMismatch {
                expected: 2,
                got: 1
            })
        ));
        let p = ProblemSpec::new(1, 1, &[2, 2, 2, 2], 4);
        assert_eq!(
            validate(&p, &NaParams::new(vec![AxisParams::window(1); 4], 4)),
            Err(NaError::BadRank(4))
        );
    }

    #[test]
    fn class_extents_use_ceiling() {
        assert_eq!(class_extent(7, 2, 0), 4);
        assert_eq!(class_extent(7, 2, 1), 3);
        assert_eq!(class_extent(8, 2, 1), 4);
        assert_eq!(class_extent(2, 3, 2), 0);
    }

    #[test]
    fn tile_config_checks() {
        assert!(TileConfig::default_for_rank(2).check(2).is_ok());
        assert!(TileConfig::default_for_rank(2).check(3).is_err());
        assert!(TileConfig::square(vec![0, 4]).check(2).is_err());
        assert_eq!(TileConfig::default_for_rank(3).q_volume(), 64);
    }
}
