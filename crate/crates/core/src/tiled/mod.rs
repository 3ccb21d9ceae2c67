//! Unfused neighborhood attention as batched GEMMs over space-aware tiles.
//!
//! Queries are tiled in their multi-dimensional layout. Each query tile is paired
//! with its halo, the smallest context block holding every token the tile attends
//! to, and the tile-by-halo product is computed with a dense GEMM. Products are
//! scattered into (or gathered from) [`CompactWeights`] in main memory, so the
//! attention weights are always materialized.
//!
//! Dilated problems are split into residue-class sub-problems first; all of
//! their tiles are planned together and run in one parallel sweep.

mod gemm;

use rayon::prelude::*;

pub(crate) use gemm::gemm_nt_ranges;
pub use gemm::{microkernel_gemm, BLayout};

use crate::error::Result;
use crate::ledger::{AllocationLedger, ScratchTracker};
use crate::neighborhood::{
    block_coords, block_volume, halo_range, pad_range, partition_dilated, AxisRange, Geometry,
    SubProblem,
};
use crate::problem::{validate, Coord, NaParams, ProblemSpec, TileConfig, MAX_RANK};
use crate::reference::{
    masked_softmax, operand, scaled, softmax_backward, weights_operand, CompactWeights, LseTensor,
};
use crate::tensor::{Element, Tensor};

/// A query tile of one (batch, head) together with its halo.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileWorkItem {
    pub batch: usize,
    pub head: usize,
    pub q_range: Vec<AxisRange>,
    pub halo: Vec<AxisRange>,
}

/// Covers the token space of a non-dilated problem with `cfg.q_tile` blocks,
/// ragged at the upper borders, in lexicographic order per (batch, head).
pub fn plan_tiles(problem: &ProblemSpec, params: &NaParams, cfg: &TileConfig) -> Vec<TileWorkItem> {
    let ranges = tile_grid(&problem.extents, &cfg.q_tile);
    let mut items = Vec::with_capacity(problem.batch * problem.heads * ranges.len());
    for batch in 0..problem.batch {
        for head in 0..problem.heads {
            for q_range in &ranges {
                items.push(TileWorkItem {
                    batch,
                    head,
                    halo: halo_range(q_range, problem, params),
                    q_range: q_range.clone(),
                });
            }
        }
    }
    items
}

pub(crate) fn tile_grid(extents: &[usize], tile: &[usize]) -> Vec<Vec<AxisRange>> {
    let mut out = vec![Vec::new()];
    for (&e, &t) in extents.iter().zip(tile) {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..e).step_by(t).map(move |lo| {
                    let mut v = prefix.clone();
                    v.push((lo, (lo + t - 1).min(e - 1)));
                    v
                })
            })
            .collect();
    }
    out
}

/// Rows of a shared buffer handed to tasks that write disjoint row sets.
pub(crate) struct SharedRows<T> {
    ptr: *mut T,
    len: usize,
}

unsafe impl<T: Send> Send for SharedRows<T> {}
unsafe impl<T: Send> Sync for SharedRows<T> {}

impl<T> SharedRows<T> {
    pub fn new(buf: &mut [T]) -> Self {
        Self {
            ptr: buf.as_mut_ptr(),
            len: buf.len(),
        }
    }

    /// # Safety
    /// No two live slices returned by this method may overlap.
    #[allow(clippy::mut_from_ref)]
    pub unsafe fn slice(&self, start: usize, len: usize) -> &mut [T] {
        assert!(start + len <= self.len, "row out of bounds");
        std::slice::from_raw_parts_mut(self.ptr.add(start), len)
    }
}

/// A tile of one sub-problem: its geometry and how its tokens map back to the
/// original problem.
pub(crate) struct PlannedSub {
    pub sub: SubProblem,
    pub geo: Geometry,
    /// Original token of the sub-problem's first coordinate.
    pub origin: usize,
    /// Original token offset of a unit step along each padded sub-problem axis.
    pub steps: Coord,
}

pub(crate) struct Plan {
    pub subs: Vec<PlannedSub>,
    pub orig: Geometry,
    /// `(sub index, batch * heads index, padded query range)`
    pub items: Vec<(usize, usize, [AxisRange; MAX_RANK])>,
}

impl Plan {
    pub fn new(problem: &ProblemSpec, params: &NaParams, tile: &[usize]) -> Self {
        let orig = Geometry::flat(problem);
        let subs: Vec<PlannedSub> = partition_dilated(problem, params)
            .into_iter()
            .map(|sub| {
                let origin = orig.linear(sub.to_original_padded([0; MAX_RANK]));
                let mut steps = [0; MAX_RANK];
                for (a, step) in steps.iter_mut().enumerate() {
                    let mut unit = [0; MAX_RANK];
                    unit[a] = 1;
                    *step = orig.linear(sub.to_original_padded(unit)) - origin;
                }
                PlannedSub {
                    geo: Geometry::new(&sub.problem, &sub.params),
                    origin,
                    steps,
                    sub,
                }
            })
            .collect();
        let mut items = Vec::new();
        for (s, ps) in subs.iter().enumerate() {
            let grid = tile_grid(&ps.sub.problem.extents, tile);
            for g in 0..problem.batch * problem.heads {
                for r in &grid {
                    items.push((s, g, pad_range(r)));
                }
            }
        }
        Self { subs, orig, items }
    }

    /// Original token index of a sub-problem coordinate.
    #[inline]
    pub fn token(&self, s: usize, c: Coord) -> usize {
        self.orig.linear(self.subs[s].sub.to_original_padded(c))
    }

    /// Halo of a query block within sub-problem `s`.
    pub fn halo(&self, s: usize, q: &[AxisRange; MAX_RANK]) -> [AxisRange; MAX_RANK] {
        let ps = &self.subs[s];
        let r = ps.sub.problem.rank();
        pad_range(&halo_range(&q[..r], &ps.sub.problem, &ps.sub.params))
    }
}

/// Index of `c` inside a padded block, row-major.
#[inline]
pub(crate) fn block_index(block: &[AxisRange; MAX_RANK], c: Coord) -> usize {
    let e1 = block[1].1 - block[1].0 + 1;
    let e2 = block[2].1 - block[2].0 + 1;
    ((c[0] - block[0].0) * e1 + (c[1] - block[1].0)) * e2 + (c[2] - block[2].0)
}

#[inline]
pub(crate) fn in_block(block: &[AxisRange; MAX_RANK], c: Coord) -> bool {
    (0..MAX_RANK).all(|a| block[a].0 <= c[a] && c[a] <= block[a].1)
}

/// Work items per rayon job: a few jobs per thread, so per-job scratch is
/// built a handful of times rather than once per split.
pub(crate) fn min_chunk(items: usize) -> usize {
    items.div_ceil(4 * rayon::current_num_threads()).max(1)
}

/// Copies the rows of `src` for every token of `block` into `dst`.
pub(crate) fn gather_rows<T: Element>(
    plan: &Plan,
    s: usize,
    g: usize,
    block: &[AxisRange; MAX_RANK],
    src: &[T],
    d: usize,
    dst: &mut [T],
) {
    let ps = &plan.subs[s];
    let base = g * plan.orig.tokens + ps.origin;
    let run = block[2].1 - block[2].0 + 1;
    let mut i = 0;
    for a in block[0].0..=block[0].1 {
        for b in block[1].0..=block[1].1 {
            let first = base + a * ps.steps[0] + b * ps.steps[1] + block[2].0 * ps.steps[2];
            if ps.steps[2] == 1 {
                dst[i * d..][..run * d].copy_from_slice(&src[first * d..][..run * d]);
                i += run;
                continue;
            }
            for c in 0..run {
                let row = (first + c * ps.steps[2]) * d;
                dst[i * d..][..d].copy_from_slice(&src[row..row + d]);
                i += 1;
            }
        }
    }
}

fn prepare(problem: &ProblemSpec, params: &NaParams, cfg: &TileConfig) -> Result<()> {
    validate(problem, params)?;
    cfg.check(problem.rank())
}

/// Largest halo volume over all tiles of a plan.
fn max_halo(plan: &Plan) -> usize {
    plan.items
        .iter()
        .map(|(s, _, q)| block_volume(&plan.halo(*s, q)))
        .max()
        .unwrap_or(0)
}

/// [`crate::reference::pn`] through tile-by-halo GEMMs.
pub fn tiled_pn<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
    cfg: &TileConfig,
) -> Result<CompactWeights<T>> {
    prepare(problem, params, cfg)?;
    let shape = problem.qkv_shape();
    let a = operand(a, &shape, "pn lhs")?;
    let b = operand(b, &shape, "pn rhs")?;
    let plan = Plan::new(problem, params, &cfg.q_tile);
    let (n, d, l) = (
        problem.num_tokens(),
        problem.head_dim,
        params.window_volume(),
    );
    let (tq, th) = (cfg.q_volume(), max_halo(&plan));
    let scale = T::from_f64(params.scale);

    let rows = problem.batch * problem.heads * n;
    let mut data = vec![T::masked(); rows * l];
    let mut valid = vec![false; rows * l];
    let data_w = SharedRows::new(&mut data);
    let valid_w = SharedRows::new(&mut valid);
    plan.items
        .par_iter()
        .with_min_len(min_chunk(plan.items.len()))
        .for_each_init(
            || {
                (
                    vec![T::zero(); tq * d],
                    vec![T::zero(); th * d],
                    vec![T::zero(); tq * th],
                )
            },
            |(qs, ks, prod), &(s, g, qr)| {
                let geo = &plan.subs[s].geo;
                let halo = plan.halo(s, &qr);
                let (m, h) = (block_volume(&qr), block_volume(&halo));
                gather_rows(&plan, s, g, &qr, a.data(), d, qs);
                gather_rows(&plan, s, g, &halo, b.data(), d, ks);
                prod[..m * h].fill(T::zero());
                microkernel_gemm(m, h, d, qs, ks, BLayout::Transposed, prod);
                for (i, qc) in block_coords(qr).enumerate() {
                    let row = g * n + plan.token(s, qc);
                    // SAFETY: every query row belongs to exactly one work item.
                    let (out, ok) =
                        unsafe { (data_w.slice(row * l, l), valid_w.slice(row * l, l)) };
                    for (w, slot) in geo.slots(qc).enumerate() {
                        if let Some(c) = slot {
                            out[w] = scale * prod[i * h + block_index(&halo, c)];
                            ok[w] = true;
                        }
                    }
                }
            },
        );
    Ok(CompactWeights {
        data: Tensor::from_vec(&problem.shape_with_last(l), data)?,
        valid,
    })
}

/// [`crate::reference::nn`] through gathered dense weight blocks.
pub fn tiled_nn<T: Element>(
    a: &CompactWeights<T>,
    b: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
    cfg: &TileConfig,
) -> Result<Tensor<T>> {
    prepare(problem, params, cfg)?;
    let w8 = weights_operand(a, problem, params, "nn weights")?;
    let b = operand(b, &problem.qkv_shape(), "nn rhs")?;
    let plan = Plan::new(problem, params, &cfg.q_tile);
    let (n, d, l) = (
        problem.num_tokens(),
        problem.head_dim,
        params.window_volume(),
    );
    let (tq, th) = (cfg.q_volume(), max_halo(&plan));

    let mut out = Tensor::zeros(&problem.qkv_shape());
    let out_w = SharedRows::new(out.data_mut());
    plan.items
        .par_iter()
        .with_min_len(min_chunk(plan.items.len()))
        .for_each_init(
            || {
                (
                    vec![T::zero(); tq * th],
                    vec![T::zero(); th * d],
                    vec![T::zero(); tq * d],
                )
            },
            |(ps, vs, acc), &(s, g, qr)| {
                let geo = &plan.subs[s].geo;
                let halo = plan.halo(s, &qr);
                let (m, h) = (block_volume(&qr), block_volume(&halo));
                ps[..m * h].fill(T::zero());
                for (i, qc) in block_coords(qr).enumerate() {
                    let row = g * n + plan.token(s, qc);
                    for (w, slot) in geo.slots(qc).enumerate() {
                        if a.valid[row * l + w] {
                            let c = slot.expect("valid slot decodes");
                            ps[i * h + block_index(&halo, c)] = w8.data()[row * l + w];
                        }
                    }
                }
                gather_rows(&plan, s, g, &halo, b.data(), d, vs);
                acc[..m * d].fill(T::zero());
                microkernel_gemm(m, d, h, ps, vs, BLayout::Normal, acc);
                for (i, qc) in block_coords(qr).enumerate() {
                    let row = g * n + plan.token(s, qc);
                    // SAFETY: every query row belongs to exactly one work item.
                    unsafe { out_w.slice(row * d, d) }.copy_from_slice(&acc[i * d..][..d]);
                }
            },
        );
    Ok(out)
}

/// Queries of a non-dilated sub-problem whose windows reach into `block`.
fn query_halo(geo: &Geometry, block: &[AxisRange; MAX_RANK]) -> [AxisRange; MAX_RANK] {
    let mut out = [(0, 0); MAX_RANK];
    for a in 0..MAX_RANK {
        let t = &geo.tables[a];
        let (lo, hi) = block[a];
        let reach = geo.windows[a] - 1;
        let cand = lo.saturating_sub(reach)..=(hi + reach).min(geo.extents[a] - 1);
        let hits = cand.filter(|&q| {
            let first = t.start[q];
            let last = first + t.valid[q] - 1;
            first <= hi && last >= lo
        });
        let (mut qlo, mut qhi) = (usize::MAX, 0);
        for q in hits {
            qlo = qlo.min(q);
            qhi = qhi.max(q);
        }
        out[a] = (qlo, qhi);
    }
    out
}

/// [`crate::reference::in_`], tiled over context tokens so that every output
/// row has a single writer.
pub fn tiled_in<T: Element>(
    a: &CompactWeights<T>,
    b: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
    cfg: &TileConfig,
) -> Result<Tensor<T>> {
    prepare(problem, params, cfg)?;
    let w8 = weights_operand(a, problem, params, "in weights")?;
    let b = operand(b, &problem.qkv_shape(), "in rhs")?;
    let plan = Plan::new(problem, params, &cfg.q_tile);
    let (n, d, l) = (
        problem.num_tokens(),
        problem.head_dim,
        params.window_volume(),
    );
    let halos: Vec<_> = plan
        .items
        .iter()
        .map(|&(s, _, cr)| query_halo(&plan.subs[s].geo, &cr))
        .collect();
    let tc = cfg.q_volume();
    let tqh = halos.iter().map(block_volume).max().unwrap_or(0);

    let mut out = Tensor::zeros(&problem.qkv_shape());
    let out_w = SharedRows::new(out.data_mut());
    plan.items
        .par_iter()
        .zip(&halos)
        .with_min_len(min_chunk(plan.items.len()))
        .for_each_init(
            || {
                (
                    vec![T::zero(); tc * tqh],
                    vec![T::zero(); tqh * d],
                    vec![T::zero(); tc * d],
                )
            },
            |(ws, bs, acc), (&(s, g, cr), qh)| {
                let geo = &plan.subs[s].geo;
                let (m, h) = (block_volume(&cr), block_volume(qh));
                ws[..m * h].fill(T::zero());
                for (j, qc) in block_coords(*qh).enumerate() {
                    let row = g * n + plan.token(s, qc);
                    for (w, slot) in geo.slots(qc).enumerate() {
                        if !a.valid[row * l + w] {
                            continue;
                        }
                        let c = slot.expect("valid slot decodes");
                        if in_block(&cr, c) {
                            ws[block_index(&cr, c) * h + j] = w8.data()[row * l + w];
                        }
                    }
                }
                gather_rows(&plan, s, g, qh, b.data(), d, bs);
                acc[..m * d].fill(T::zero());
                microkernel_gemm(m, d, h, ws, bs, BLayout::Normal, acc);
                for (i, cc) in block_coords(cr).enumerate() {
                    let row = g * n + plan.token(s, cc);
                    // SAFETY: every context row belongs to exactly one work item.
                    unsafe { out_w.slice(row * d, d) }.copy_from_slice(&acc[i * d..][..d]);
                }
            },
        );
    Ok(out)
}

/// Output, log-sum-exp, attention weights and scratch accounting of a tiled forward pass.
pub struct TiledForward<T> {
    pub out: Tensor<T>,
    pub lse: LseTensor<T>,
    pub weights: CompactWeights<T>,
    pub ledger: AllocationLedger,
}

/// `nn(softmax(pn(q, k)), v)` through the tiled operators. The logits and the
/// attention weights are both materialized and show up in the ledger.
pub fn tiled_forward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
    cfg: &TileConfig,
) -> Result<TiledForward<T>> {
    let tracker = ScratchTracker::new();
    let logits = tiled_pn(q, k, problem, params, cfg)?;
    tracker.record_alloc(logits.bytes());
    let (weights, lse) = masked_softmax(&logits);
    tracker.record_alloc(weights.bytes());
    tracker.record_free(logits.bytes());
    drop(logits);
    let out = tiled_nn(&weights, v, problem, params, cfg)?;
    tracker.record_free(weights.bytes());
    Ok(TiledForward {
        out,
        lse,
        weights,
        ledger: tracker.ledger(),
    })
}

/// Backward pass composed from the tiled operators, mirroring
/// [`crate::reference::na_backward`].
#[allow(clippy::too_many_arguments)]
pub fn tiled_backward<T: Element>(
    d_out: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    p: &CompactWeights<T>,
    out: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
    cfg: &TileConfig,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let shape = problem.qkv_shape();
    let d_out = operand(d_out, &shape, "output gradient")?;
    let out = operand(out, &shape, "forward output")?;
    let dp = tiled_pn(&d_out, v, problem, &params.with_scale(1.0), cfg)?;
    let da = softmax_backward(p, &dp, &d_out, &out, problem.head_dim);
    let dq = scaled(tiled_nn(&da, k, problem, params, cfg)?, params.scale);
    let dk = scaled(tiled_in(&da, q, problem, params, cfg)?, params.scale);
    let dv = tiled_in(p, &d_out, problem, params, cfg)?;
    Ok((dq, dk, dv))
}
