//! Analytical FLOP and memory-traffic model for self attention and neighborhood
//! attention, fused and unfused.
//!
//! Only the two batched matrix multiplications are counted; softmax is ignored.
//! With `b` batch, `h` heads, `n` tokens, `d` head dim, `l` window volume and
//! `s` bytes per element:
//!
//! | | FLOPs | bytes |
//! |---|---|---|
//! | self, unfused | `4bhn²d` | `(4bhnd + 2bhn²)s` |
//! | NA, unfused | `4bhnld` | `(4bhnd + 2bhnl)s` |
//! | fused (either) | as above | `4bhnd·s` |
//!
//! The fused neighborhood byte count is a worst case: halo re-reads are not
//! modeled. The unfused neighborhood byte count substitutes `l` for `n` in the
//! attention-weight term.

use serde::{Serialize, Serializer};

use crate::problem::{NaParams, ProblemSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct CostModelInput {
    pub problem: ProblemSpec,
    /// `None` models self attention.
    pub params: Option<NaParams>,
    /// Bytes per tensor element: 2, 4 or 8.
    pub dtype_size: usize,
    pub fused: bool,
}

impl CostModelInput {
    pub fn new(
        problem: ProblemSpec,
        params: Option<NaParams>,
        dtype_size: usize,
        fused: bool,
    ) -> Self {
        assert!(
            matches!(dtype_size, 2 | 4 | 8),
            "dtype size must be 2, 4 or 8 bytes"
        );
        Self {
            problem,
            params,
            dtype_size,
            fused,
        }
    }

    fn bhn_d(&self) -> (u64, u64, u64) {
        let p = &self.problem;
        (
            (p.batch * p.heads) as u64,
            p.num_tokens() as u64,
            p.head_dim as u64,
        )
    }

    /// Keys each query attends to: the window volume, or every token.
    fn context(&self) -> u64 {
        match &self.params {
            Some(p) => p.window_volume() as u64,
            None => self.problem.num_tokens() as u64,
        }
    }
}

pub fn attention_flops(input: &CostModelInput) -> u64 {
    let (bh, n, d) = input.bhn_d();
    4 * bh * n * input.context() * d
}

pub fn attention_bytes(input: &CostModelInput) -> u64 {
    let (bh, n, d) = input.bhn_d();
    let s = input.dtype_size as u64;
    if input.fused {
        4 * bh * n * d * s
    } else {
        (4 * bh * n * d + 2 * bh * n * input.context()) * s
    }
}

/// Arithmetic intensity as the token count grows without bound. Fused self
/// attention has no limit and returns `f64::INFINITY`.
pub fn intensity_limit(input: &CostModelInput) -> f64 {
    let d = input.problem.head_dim as f64;
    let s = input.dtype_size as f64;
    match (&input.params, input.fused) {
        (None, false) => 2.0 * d / s,
        (None, true) => f64::INFINITY,
        (Some(p), true) => p.window_volume() as f64 / s,
        (Some(p), false) => {
            // independent of n: 4nld / ((4nd + 2nl) s)
            let l = p.window_volume() as f64;
            2.0 * l * d / ((2.0 * d + l) * s)
        }
    }
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RooflineReport {
    pub flops: u64,
    pub bytes: u64,
    pub intensity: f64,
    /// Serialized as `null` when unbounded.
    #[serde(serialize_with = "finite_or_null")]
    pub intensity_limit: f64,
}

impl RooflineReport {
    /// Flat key/value pairs for tabular output.
    pub fn to_record(&self) -> Vec<(&'static str, String)> {
        vec![
            ("flops", self.flops.to_string()),
            ("bytes", self.bytes.to_string()),
            ("intensity", self.intensity.to_string()),
            ("intensity_limit", self.intensity_limit.to_string()),
        ]
    }
}

pub fn roofline(input: &CostModelInput) -> RooflineReport {
    let flops = attention_flops(input);
    let bytes = attention_bytes(input);
    RooflineReport {
        flops,
        bytes,
        intensity: flops as f64 / bytes as f64,
        intensity_limit: intensity_limit(input),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::AxisParams;

    fn self_attn(n: usize, d: usize, s: usize, fused: bool) -> CostModelInput {
        CostModelInput::new(ProblemSpec::new(1, 1, &[n], d), None, s, fused)
    }

    fn na(n: usize, window: usize, d: usize, s: usize, fused: bool) -> CostModelInput {
        let problem = ProblemSpec::new(1, 1, &[n], d);
        let params = NaParams::new(vec![AxisParams::window(window)], d);
        CostModelInput::new(problem, Some(params), s, fused)
    }

    #[test]
    fn flop_counts() {
        assert_eq!(attention_flops(&self_attn(128, 64, 2, false)), 4_194_304);
        assert_eq!(
            attention_flops(&na(127, 127, 64, 2, false)),
            attention_flops(&self_attn(127, 64, 2, false))
        );
        assert_eq!(attention_flops(&na(128, 1, 64, 2, false)), 4 * 128 * 64);
    }

    #[test]
    fn byte_counts() {
        assert_eq!(attention_bytes(&self_attn(16, 8, 4, false)), 4096);
        assert_eq!(attention_bytes(&self_attn(16, 8, 4, true)), 2048);
        assert_eq!(
            attention_bytes(&na(16, 3, 8, 4, true)),
            attention_bytes(&na(16, 13, 8, 4, true))
        );
    }

    #[test]
    fn limits() {
        assert_eq!(intensity_limit(&self_attn(128, 64, 2, false)), 64.0);
        assert_eq!(intensity_limit(&na(128, 7, 64, 2, true)), 3.5);
        assert!(intensity_limit(&self_attn(128, 64, 2, true)).is_infinite());
    }

    #[test]
    fn fused_na_intensity_is_constant_in_n() {
        let a = roofline(&na(64, 7, 32, 4, true));
        let b = roofline(&na(4096, 7, 32, 4, true));
        assert_eq!(a.intensity, b.intensity);
        assert_eq!(a.intensity, a.intensity_limit);
    }

    #[test]
    fn report_serializes_unbounded_limit_as_null() {
        let r = roofline(&self_attn(16, 8, 4, true));
        let json = serde_json::to_value(r).unwrap();
        assert!(json["intensity_limit"].is_null());
        assert_eq!(json["bytes"], 2048);
    }
}
