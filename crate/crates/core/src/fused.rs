//! Fused neighborhood attention.
//!
//! Each query tile streams the key/value blocks of its halo, masks the logits
//! with the neighborhood predicate and folds them into an online softmax. Only
//! the output and the per-query log-sum-exp are written back; attention weights
//! exist only as one tile-by-block scratch matrix per task.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::error::Result;
use crate::ledger::{AllocationLedger, Scratch, ScratchTracker};
use crate::neighborhood::{block_coords, block_volume, AxisRange};
use crate::problem::{validate, NaParams, ProblemSpec, TileConfig, MAX_RANK};
use crate::reference::{operand, out_buffer, scaled, softmax_backward, CompactWeights, LseTensor};
use crate::tensor::{Element, Tensor};
use crate::tiled::{
    gather_rows, gemm_nt_ranges, min_chunk, tile_grid, tiled_in, tiled_nn, tiled_pn, Plan,
    SharedRows,
};

/// Running softmax statistics and output accumulator for a block of query rows.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineSoftmaxState<T> {
    /// Running maximum of the valid logits seen so far, `-inf` before any.
    pub m: Vec<T>,
    /// Running sum of `exp(logit - m)`.
    pub l: Vec<T>,
    /// Unnormalized output, `rows x dim`.
    pub acc: Vec<T>,
    pub dim: usize,
}

impl<T: Element> OnlineSoftmaxState<T> {
    pub fn new(rows: usize, dim: usize) -> Self {
        Self {
            m: vec![T::neg_infinity(); rows],
            l: vec![T::zero(); rows],
            acc: vec![T::zero(); rows * dim],
            dim,
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len()
    }

    pub fn reset(&mut self) {
        self.m.fill(T::neg_infinity());
        self.l.fill(T::zero());
        self.acc.fill(T::zero());
    }

    /// Folds a block of masked logits (`rows x cols`, masked entries set to
    /// [`Element::masked`]) and the matching values (`cols x dim`) into the state.
    /// The logits are overwritten with their unnormalized probabilities.
    pub fn online_update(&mut self, s_block: &mut [T], cols: usize, v_block: &[T]) {
        let full = vec![(0, cols); self.rows()];
        online_update_rows(
            &mut self.m,
            &mut self.l,
            &mut self.acc,
            self.dim,
            s_block,
            cols,
            &full,
            v_block,
        );
    }

    /// Writes `acc / l` and `m + ln(l)` for the first `rows` rows.
    pub fn finalize(&self, rows: usize, out: &mut [T], lse: &mut [T]) {
        finalize_rows(&self.m, &self.l, &self.acc, self.dim, rows, out, lse);
    }
}

/// Row `i` may only hold valid logits in columns `ranges[i].0..ranges[i].1`;
/// everything outside is treated as masked and neither read nor written.
#[allow(clippy::too_many_arguments)]
fn online_update_rows<T: Element>(
    m: &mut [T],
    l: &mut [T],
    acc: &mut [T],
    dim: usize,
    s: &mut [T],
    cols: usize,
    ranges: &[(usize, usize)],
    v: &[T],
) {
    let rows = m.len();
    for i in 0..rows {
        let row = &mut s[i * cols..][..cols];
        let (lo, hi) = ranges[i];
        let band = &mut row[lo..hi];
        let block_max = band.iter().copied().fold(T::neg_infinity(), T::max);
        if block_max <= T::masked() {
            // nothing valid in this row
            band.fill(T::zero());
            continue;
        }
        let m_new = m[i].max(block_max);
        let alpha = (m[i] - m_new).exp();
        let mut sum = T::zero();
        for x in band.iter_mut() {
            *x = if *x <= T::masked() {
                T::zero()
            } else {
                (*x - m_new).exp()
            };
            sum += *x;
        }
        if l[i] != T::zero() && alpha != T::one() {
            for a in &mut acc[i * dim..][..dim] {
                *a *= alpha;
            }
        }
        l[i] = l[i] * alpha + sum;
        m[i] = m_new;
        // acc += p * v over the band, in column order
        let acc_row = &mut acc[i * dim..][..dim];
        for (j, &p) in row.iter().enumerate().take(hi).skip(lo) {
            if p == T::zero() {
                continue;
            }
            for (a, &x) in acc_row.iter_mut().zip(&v[j * dim..][..dim]) {
                *a += p * x;
            }
        }
    }
}

fn finalize_rows<T: Element>(
    m: &[T],
    l: &[T],
    acc: &[T],
    dim: usize,
    rows: usize,
    out: &mut [T],
    lse: &mut [T],
) {
    for i in 0..rows {
        let inv = T::one() / l[i];
        for x in 0..dim {
            out[i * dim + x] = acc[i * dim + x] * inv;
        }
        lse[i] = m[i] + l[i].ln();
    }
}

/// Order in which the key/value blocks of a halo are visited.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum KvOrder {
    #[default]
    Lexicographic,
    Reversed,
    Shuffled(u64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FusedOptions {
    pub kv_order: KvOrder,
}

pub struct FusedForward<T> {
    pub out: Tensor<T>,
    pub lse: LseTensor<T>,
    pub ledger: AllocationLedger,
}

/// Scratch owned by one task.
struct TileScratch<'a, T> {
    q: Scratch<'a, T>,
    k: Scratch<'a, T>,
    v: Scratch<'a, T>,
    s: Scratch<'a, T>,
    m: Scratch<'a, T>,
    l: Scratch<'a, T>,
    acc: Scratch<'a, T>,
    out: Scratch<'a, T>,
    lse: Scratch<'a, T>,
    /// Per query and axis: inclusive window bounds in sub-problem coordinates.
    windows: Scratch<'a, (usize, usize)>,
    /// Per query: reachable column span of the current key/value block.
    ranges: Scratch<'a, (usize, usize)>,
}

impl<'a, T: Element> TileScratch<'a, T> {
    fn new(tracker: &'a ScratchTracker, tq: usize, tk: usize, d: usize) -> Self {
        Self {
            q: tracker.alloc(tq * d),
            k: tracker.alloc(tk * d),
            v: tracker.alloc(tk * d),
            s: tracker.alloc(tq * tk),
            m: tracker.alloc(tq),
            l: tracker.alloc(tq),
            acc: tracker.alloc(tq * d),
            out: tracker.alloc(tq * d),
            lse: tracker.alloc(tq),
            windows: tracker.alloc(tq * MAX_RANK),
            ranges: tracker.alloc(tq),
        }
    }
}

/// Fused forward pass writing into caller-provided `out` (`[batch, heads,
/// spatial..., dim]`) and `lse` (`[batch, heads, spatial...]`).
#[allow(clippy::too_many_arguments)]
pub fn fused_forward_into<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
    cfg: &TileConfig,
    opts: FusedOptions,
    out: &mut Tensor<T>,
    lse: &mut Tensor<T>,
) -> Result<AllocationLedger> {
    validate(problem, params)?;
    cfg.check(problem.rank())?;
    let shape = problem.qkv_shape();
    let (q, k, v) = (
        operand(q, &shape, "query")?,
        operand(k, &shape, "key")?,
        operand(v, &shape, "value")?,
    );
    out_buffer(out, &shape, "output buffer")?;
    out_buffer(lse, &problem.token_shape(), "lse buffer")?;

    let tracker = ScratchTracker::new();
    let plan = Plan::new(problem, params, &cfg.q_tile);
    let plan_bytes =
        plan.items.len() * std::mem::size_of::<(usize, usize, [AxisRange; MAX_RANK])>();
    tracker.record_alloc(plan_bytes);

    let (n, d) = (problem.num_tokens(), problem.head_dim);
    let (tq, tk) = (cfg.q_volume(), cfg.kv_volume());
    let scale = T::from_f64(params.scale);
    let kv_tile = cfg.kv_tile.clone();
    let out_w = SharedRows::new(out.data_mut());
    let lse_w = SharedRows::new(lse.data_mut());

    plan.items
        .par_iter()
        .with_min_len(min_chunk(plan.items.len()))
        .for_each_init(
            || TileScratch::new(&tracker, tq, tk, d),
            |sc, &(s, g, qr)| {
                let geo = &plan.subs[s].geo;
                let halo = plan.halo(s, &qr);
                let m = block_volume(&qr);
                gather_rows(&plan, s, g, &qr, q.data(), d, &mut sc.q);
                for (i, qc) in block_coords(qr).enumerate() {
                    for a in 0..MAX_RANK {
                        let t = &geo.tables[a];
                        sc.windows[i * MAX_RANK + a] =
                            (t.start[qc[a]], t.start[qc[a]] + t.valid[qc[a]] - 1);
                    }
                }
                sc.m[..m].fill(T::neg_infinity());
                sc.l[..m].fill(T::zero());
                sc.acc[..m * d].fill(T::zero());

                let rank = plan.subs[s].sub.problem.rank();
                let mut blocks: Vec<Vec<AxisRange>> = {
                    let lens: Vec<usize> = halo[..rank].iter().map(|r| r.1 - r.0 + 1).collect();
                    tile_grid(&lens, &kv_tile)
                        .into_iter()
                        .map(|b| {
                            b.iter()
                                .zip(&halo)
                                .map(|(r, h)| (r.0 + h.0, r.1 + h.0))
                                .collect()
                        })
                        .collect()
                };
                match opts.kv_order {
                    KvOrder::Lexicographic => {}
                    KvOrder::Reversed => blocks.reverse(),
                    KvOrder::Shuffled(seed) => {
                        blocks.shuffle(&mut StdRng::seed_from_u64(seed ^ g as u64))
                    }
                }
                for block in &blocks {
                    let kb = crate::neighborhood::pad_range(block);
                    let cols = block_volume(&kb);
                    gather_rows(&plan, s, g, &kb, k.data(), d, &mut sc.k);
                    gather_rows(&plan, s, g, &kb, v.data(), d, &mut sc.v);
                    // per query: the span of block columns its window can reach
                    for i in 0..m {
                        let win = &sc.windows[i * MAX_RANK..][..MAX_RANK];
                        let (mut first, mut last) = (0, 0);
                        let mut empty = false;
                        for a in 0..MAX_RANK {
                            let lo = win[a].0.max(kb[a].0);
                            let hi = win[a].1.min(kb[a].1);
                            if lo > hi {
                                empty = true;
                                break;
                            }
                            let len = kb[a].1 - kb[a].0 + 1;
                            first = first * len + (lo - kb[a].0);
                            last = last * len + (hi - kb[a].0);
                        }
                        sc.ranges[i] = if empty { (0, 0) } else { (first, last + 1) };
                    }
                    let sblk = &mut sc.s[..m * cols];
                    gemm_nt_ranges(m, cols, d, &sc.q, &sc.k, sblk, &sc.ranges[..m]);
                    // masking in runs along the innermost axis
                    let inner = rank - 1;
                    let run = kb[inner].1 - kb[inner].0 + 1;
                    for i in 0..m {
                        let win = &sc.windows[i * MAX_RANK..][..MAX_RANK];
                        let (lo, hi) = sc.ranges[i];
                        let row = &mut sblk[i * cols..][..cols];
                        let mut j = lo;
                        while j < hi {
                            let start = j - j % run;
                            let end = (start + run).min(hi);
                            let mut outer = j / run;
                            let mut outer_in = true;
                            for a in (0..inner).rev() {
                                let len = kb[a].1 - kb[a].0 + 1;
                                let c = kb[a].0 + outer % len;
                                outer /= len;
                                outer_in &= win[a].0 <= c && c <= win[a].1;
                            }
                            // inside columns of this run: [w0, w1)
                            let (w0, w1) = if outer_in
                                && win[inner].0 <= kb[inner].1
                                && kb[inner].0 <= win[inner].1
                            {
                                let base = start + win[inner].0.max(kb[inner].0) - kb[inner].0;
                                let top = start + win[inner].1.min(kb[inner].1) + 1 - kb[inner].0;
                                (base.clamp(j, end), top.clamp(j, end))
                            } else {
                                (end, end)
                            };
                            let w1 = w1.max(w0);
                            row[j..w0].fill(T::masked());
                            for x in &mut row[w0..w1] {
                                *x = scale * *x;
                            }
                            row[w1..end].fill(T::masked());
                            j = end;
                        }
                    }
                    online_update_rows(
                        &mut sc.m[..m],
                        &mut sc.l[..m],
                        &mut sc.acc[..m * d],
                        d,
                        sblk,
                        cols,
                        &sc.ranges[..m],
                        &sc.v,
                    );
                }
                finalize_rows(&sc.m, &sc.l, &sc.acc, d, m, &mut sc.out, &mut sc.lse);
                for (i, qc) in block_coords(qr).enumerate() {
                    let row = g * n + plan.token(s, qc);
                    // SAFETY: every query row belongs to exactly one work item.
                    unsafe {
                        out_w
                            .slice(row * d, d)
                            .copy_from_slice(&sc.out[i * d..][..d]);
                        lse_w.slice(row, 1)[0] = sc.lse[i];
                    }
                }
            },
        );
    tracker.record_free(plan_bytes);
    Ok(tracker.ledger())
}

pub fn fused_forward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
    cfg: &TileConfig,
) -> Result<FusedForward<T>> {
    fused_forward_with(q, k, v, problem, params, cfg, FusedOptions::default())
}

pub fn fused_forward_with<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
    cfg: &TileConfig,
    opts: FusedOptions,
) -> Result<FusedForward<T>> {
    let mut out = Tensor::zeros(&problem.qkv_shape());
    let mut lse = Tensor::zeros(&problem.token_shape());
    let ledger = fused_forward_into(q, k, v, problem, params, cfg, opts, &mut out, &mut lse)?;
    Ok(FusedForward {
        out,
        lse: LseTensor(lse),
        ledger,
    })
}

/// Attention weights recomputed from the logits and the saved log-sum-exp.
fn recompute_weights<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    lse: &LseTensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
    cfg: &TileConfig,
) -> Result<CompactWeights<T>> {
    let logits = tiled_pn(q, k, problem, params, cfg)?;
    let lse = operand(&lse.0, &problem.token_shape(), "lse")?;
    let l = params.window_volume();
    Ok(logits.map_valid(|i, x| (x - lse.data()[i / l]).exp()))
}

/// Backward pass from the forward output and log-sum-exp only: the attention
/// weights are recomputed tile by tile, then the gradients are composed from
/// the tiled operators.
#[allow(clippy::too_many_arguments)]
pub fn fused_backward_composed<T: Element>(
    d_out: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    out: &Tensor<T>,
    lse: &LseTensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
    cfg: &TileConfig,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let shape = problem.qkv_shape();
    let d_out = operand(d_out, &shape, "output gradient")?;
    let out = operand(out, &shape, "forward output")?;
    let p = recompute_weights(q, k, lse, problem, params, cfg)?;
    let dp = tiled_pn(&d_out, v, problem, &params.with_scale(1.0), cfg)?;
    let da = softmax_backward(&p, &dp, &d_out, &out, problem.head_dim);
    let dq = scaled(tiled_nn(&da, k, problem, params, cfg)?, params.scale);
    let dk = scaled(tiled_in(&da, q, problem, params, cfg)?, params.scale);
    let dv = tiled_in(&p, &d_out, problem, params, cfg)?;
    Ok((dq, dk, dv))
}
