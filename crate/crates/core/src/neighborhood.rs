//! Coordinate algebra for neighborhood membership.
//!
//! A query attends to a window of `window` tokens per axis. Non-causal windows are
//! centered on the query and shifted inward at the borders so that every query sees
//! a full window; causal windows end at the query and are truncated at the start
//! of the axis. Dilation splits an axis into `dilation` residue classes which are
//! treated as independent, non-dilated axes.

use crate::problem::{class_extent, AxisParams, Coord, NaParams, ProblemSpec, MAX_RANK};
use crate::tensor::{Element, Tensor};

/// Inclusive per-axis coordinate range.
pub type AxisRange = (usize, usize);

/// First token of the window for position `i` on a non-dilated axis.
///
/// Non-causal windows are `[start, start + window)`; causal windows are
/// `[start, i]` and can hold fewer than `window` tokens.
pub fn window_start(i: usize, extent: usize, axis: AxisParams) -> usize {
    debug_assert!(i < extent);
    if axis.causal {
        (i + 1).saturating_sub(axis.window)
    } else {
        debug_assert!(axis.window <= extent);
        i.saturating_sub((axis.window - 1) / 2)
            .min(extent - axis.window)
    }
}

fn axis_contains(q: usize, c: usize, extent: usize, axis: AxisParams) -> bool {
    let d = axis.dilation;
    if q % d != c % d {
        return false;
    }
    let class_len = class_extent(extent, d, q % d);
    let (qc, cc) = (q / d, c / d);
    let start = window_start(qc, class_len, axis);
    if axis.causal {
        start <= cc && cc <= qc
    } else {
        start <= cc && cc < start + axis.window
    }
}

/// Whether query `q` attends to context token `c`.
pub fn neighborhood_contains(
    q: &[usize],
    c: &[usize],
    problem: &ProblemSpec,
    params: &NaParams,
) -> bool {
    debug_assert_eq!(q.len(), problem.rank());
    debug_assert_eq!(c.len(), problem.rank());
    (0..problem.rank()).all(|a| axis_contains(q[a], c[a], problem.extents[a], params.axes[a]))
}

fn axis_inverse(c: usize, extent: usize, axis: AxisParams) -> Vec<usize> {
    let reach = (axis.window - 1) * axis.dilation;
    let lo = c.saturating_sub(reach);
    let lo = lo + (c - lo) % axis.dilation;
    let hi = (c + reach).min(extent - 1);
    (lo..=hi)
        .step_by(axis.dilation)
        .filter(|&q| axis_contains(q, c, extent, axis))
        .collect()
}

/// Every query that attends to context token `c`, in lexicographic order.
pub fn inverse_neighborhood(
    c: &[usize],
    problem: &ProblemSpec,
    params: &NaParams,
) -> Vec<Vec<usize>> {
    let per_axis: Vec<Vec<usize>> = (0..problem.rank())
        .map(|a| axis_inverse(c[a], problem.extents[a], params.axes[a]))
        .collect();
    let mut out = vec![Vec::new()];
    for candidates in &per_axis {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                candidates.iter().map(move |&q| {
                    let mut v = prefix.clone();
                    v.push(q);
                    v
                })
            })
            .collect();
    }
    out
}

/// Smallest context block holding every token attended to by any query in
/// `q_range`. Requires dilation 1 on every axis.
pub fn halo_range(
    q_range: &[AxisRange],
    problem: &ProblemSpec,
    params: &NaParams,
) -> Vec<AxisRange> {
    assert!(
        !params.is_dilated(),
        "halo_range requires non-dilated parameters"
    );
    q_range
        .iter()
        .zip(&problem.extents)
        .zip(&params.axes)
        .map(|((&(lo, hi), &extent), &axis)| {
            let start = window_start(lo, extent, axis);
            if axis.causal {
                (start, hi)
            } else {
                (start, window_start(hi, extent, axis) + axis.window - 1)
            }
        })
        .collect()
}

/// One residue-class combination of a dilated problem, expressed as a
/// non-dilated problem plus the map back to original coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SubProblem {
    pub problem: ProblemSpec,
    pub params: NaParams,
    pub residue: Vec<usize>,
    pub dilation: Vec<usize>,
}

impl SubProblem {
    pub fn to_original(&self, sub: &[usize]) -> Vec<usize> {
        sub.iter()
            .zip(&self.residue)
            .zip(&self.dilation)
            .map(|((&c, &r), &d)| r + c * d)
            .collect()
    }

    pub(crate) fn to_original_padded(&self, sub: Coord) -> Coord {
        let mut out = sub;
        for a in 0..self.residue.len() {
            out[a] = self.residue[a] + sub[a] * self.dilation[a];
        }
        out
    }
}

/// Splits a dilated problem into `prod(dilation)` non-dilated sub-problems, one per
/// residue-class combination, in lexicographic residue order.
pub fn partition_dilated(problem: &ProblemSpec, params: &NaParams) -> Vec<SubProblem> {
    let dilation: Vec<usize> = params.axes.iter().map(|a| a.dilation).collect();
    let count: usize = dilation.iter().product();
    let sub_axes: Vec<AxisParams> = params
        .axes
        .iter()
        .map(|a| AxisParams::new(a.window, 1, a.causal))
        .collect();
    (0..count)
        .map(|mut idx| {
            let mut residue = vec![0; dilation.len()];
            for a in (0..dilation.len()).rev() {
                residue[a] = idx % dilation[a];
                idx /= dilation[a];
            }
            let extents: Vec<usize> = (0..dilation.len())
                .map(|a| class_extent(problem.extents[a], dilation[a], residue[a]))
                .collect();
            SubProblem {
                problem: ProblemSpec::new(problem.batch, problem.heads, &extents, problem.head_dim),
                params: NaParams {
                    axes: sub_axes.clone(),
                    scale: params.scale,
                },
                residue,
                dilation: dilation.clone(),
            }
        })
        .collect()
}

/// Copies the tokens of `sub` out of a `[batch, heads, spatial..., last]` tensor
/// laid out for `problem`.
pub fn gather_subproblem<T: Element>(
    t: &Tensor<T>,
    problem: &ProblemSpec,
    sub: &SubProblem,
) -> Tensor<T> {
    let t = t.to_contiguous();
    let last = *t.shape().last().expect("tensor has a trailing axis");
    let src = Geometry::flat(problem);
    let dst = Geometry::flat(&sub.problem);
    let mut out = Tensor::zeros(&sub.problem.shape_with_last(last));
    let bh = problem.batch * problem.heads;
    for g in 0..bh {
        for tok in 0..dst.tokens {
            let orig = src.linear(sub.to_original_padded(dst.coord(tok)));
            let from = (g * src.tokens + orig) * last;
            let to = (g * dst.tokens + tok) * last;
            out.data_mut()[to..to + last].copy_from_slice(&t.data()[from..from + last]);
        }
    }
    out
}

/// Inverse of [`gather_subproblem`]: writes the sub-problem tensor back into place.
pub fn scatter_subproblem<T: Element>(
    sub_t: &Tensor<T>,
    problem: &ProblemSpec,
    sub: &SubProblem,
    out: &mut Tensor<T>,
) {
    assert!(out.is_contiguous());
    let sub_t = sub_t.to_contiguous();
    let last = *sub_t.shape().last().expect("tensor has a trailing axis");
    let dst = Geometry::flat(problem);
    let src = Geometry::flat(&sub.problem);
    let bh = problem.batch * problem.heads;
    for g in 0..bh {
        for tok in 0..src.tokens {
            let orig = dst.linear(sub.to_original_padded(src.coord(tok)));
            let to = (g * dst.tokens + orig) * last;
            let from = (g * src.tokens + tok) * last;
            out.data_mut()[to..to + last].copy_from_slice(&sub_t.data()[from..from + last]);
        }
    }
}

/// Per-axis lookup: where the window of each position starts (in original
/// coordinates) and how many of its slots are valid.
#[derive(Debug, Clone)]
pub(crate) struct AxisTable {
    pub start: Vec<usize>,
    pub valid: Vec<usize>,
    pub dilation: usize,
}

impl AxisTable {
    fn new(extent: usize, axis: AxisParams) -> Self {
        let d = axis.dilation;
        let mut start = Vec::with_capacity(extent);
        let mut valid = Vec::with_capacity(extent);
        for i in 0..extent {
            let r = i % d;
            let qc = i / d;
            let s = window_start(qc, class_extent(extent, d, r), axis);
            start.push(r + s * d);
            valid.push(if axis.causal { qc - s + 1 } else { axis.window });
        }
        Self {
            start,
            valid,
            dilation: d,
        }
    }

    #[cfg(test)]
    /// Slot offset of context position `c` in the window of `q`, if attended.
    #[inline]
    pub fn offset_of(&self, q: usize, c: usize) -> Option<usize> {
        let s = self.start[q];
        if c < s || (c - s) % self.dilation != 0 {
            return None;
        }
        let o = (c - s) / self.dilation;
        (o < self.valid[q]).then_some(o)
    }
}

/// Precomputed window geometry of a problem, padded to three axes.
#[derive(Debug, Clone)]
pub(crate) struct Geometry {
    pub extents: Coord,
    pub windows: Coord,
    pub tokens: usize,
    pub volume: usize,
    pub tables: Vec<AxisTable>,
}

impl Geometry {
    pub fn new(problem: &ProblemSpec, params: &NaParams) -> Self {
        let extents = problem.padded_extents();
        let axes = params.padded_axes();
        let tables = (0..MAX_RANK)
            .map(|a| AxisTable::new(extents[a], axes[a]))
            .collect();
        Self {
            extents,
            windows: axes.map(|a| a.window),
            tokens: problem.num_tokens(),
            volume: params.window_volume(),
            tables,
        }
    }

    /// Geometry used only for coordinate linearization.
    pub fn flat(problem: &ProblemSpec) -> Self {
        let axes = vec![AxisParams::UNIT; problem.rank()];
        Self::new(problem, &NaParams { axes, scale: 1.0 })
    }

    #[inline]
    pub fn linear(&self, c: Coord) -> usize {
        (c[0] * self.extents[1] + c[1]) * self.extents[2] + c[2]
    }

    #[inline]
    pub fn coord(&self, t: usize) -> Coord {
        let c2 = t % self.extents[2];
        let rest = t / self.extents[2];
        [rest / self.extents[1], rest % self.extents[1], c2]
    }

    #[cfg(test)]
    #[inline]
    pub fn slot_offsets(&self, w: usize) -> Coord {
        let o2 = w % self.windows[2];
        let rest = w / self.windows[2];
        [rest / self.windows[1], rest % self.windows[1], o2]
    }

    #[inline]
    pub fn slot_index(&self, o: Coord) -> usize {
        (o[0] * self.windows[1] + o[1]) * self.windows[2] + o[2]
    }

    /// `decode(q, w)` for every slot `w` in order, without the per-slot
    /// index arithmetic.
    #[inline]
    pub fn slots(&self, q: Coord) -> Slots {
        let mut start = [0; MAX_RANK];
        let mut valid = [0; MAX_RANK];
        let mut dilation = [0; MAX_RANK];
        for a in 0..MAX_RANK {
            let t = &self.tables[a];
            start[a] = t.start[q[a]];
            valid[a] = t.valid[q[a]];
            dilation[a] = t.dilation;
        }
        Slots {
            start,
            valid,
            dilation,
            windows: self.windows,
            o: [0; MAX_RANK],
            left: self.volume,
        }
    }

    /// Context coordinate of slot `w` of query `q`, or `None` for an invalid slot.
    #[cfg(test)]
    #[inline]
    pub fn decode(&self, q: Coord, w: usize) -> Option<Coord> {
        let o = self.slot_offsets(w);
        let mut c = [0; MAX_RANK];
        for a in 0..MAX_RANK {
            let t = &self.tables[a];
            if o[a] >= t.valid[q[a]] {
                return None;
            }
            c[a] = t.start[q[a]] + o[a] * t.dilation;
        }
        Some(c)
    }

    #[cfg(test)]
    /// Slot of context `c` in the window of query `q`, if attended.
    #[inline]
    pub fn slot_of(&self, q: Coord, c: Coord) -> Option<usize> {
        let mut o = [0; MAX_RANK];
        for a in 0..MAX_RANK {
            o[a] = self.tables[a].offset_of(q[a], c[a])?;
        }
        Some(self.slot_index(o))
    }

    #[cfg(test)]
    #[inline]
    pub fn contains(&self, q: Coord, c: Coord) -> bool {
        (0..MAX_RANK).all(|a| self.tables[a].offset_of(q[a], c[a]).is_some())
    }

    /// Per-axis lists of `(query, slot offset)` pairs that reach each context position.
    pub fn inverse_tables(&self) -> Vec<Vec<Vec<(usize, usize)>>> {
        (0..MAX_RANK)
            .map(|a| {
                let t = &self.tables[a];
                let mut inv = vec![Vec::new(); self.extents[a]];
                for q in 0..self.extents[a] {
                    for o in 0..t.valid[q] {
                        inv[t.start[q] + o * t.dilation].push((q, o));
                    }
                }
                inv
            })
            .collect()
    }
}

/// Iterates the coordinates of a padded block of inclusive ranges in lexicographic order.
pub(crate) fn block_coords(range: [AxisRange; MAX_RANK]) -> BlockCoords {
    BlockCoords {
        range,
        next: Some([range[0].0, range[1].0, range[2].0]),
    }
}

/// Row-major walk over an inclusive coordinate box.
pub(crate) struct BlockCoords {
    range: [AxisRange; MAX_RANK],
    next: Option<Coord>,
}

impl Iterator for BlockCoords {
    type Item = Coord;

    #[inline]
    fn next(&mut self) -> Option<Coord> {
        let c = self.next?;
        let mut n = c;
        let mut a = MAX_RANK;
        self.next = loop {
            if a == 0 {
                break None;
            }
            a -= 1;
            if n[a] < self.range[a].1 {
                n[a] += 1;
                break Some(n);
            }
            n[a] = self.range[a].0;
        };
        Some(c)
    }
}

/// Iterator returned by [`Geometry::slots`].
pub(crate) struct Slots {
    start: Coord,
    valid: Coord,
    dilation: Coord,
    windows: Coord,
    o: Coord,
    left: usize,
}

impl Iterator for Slots {
    type Item = Option<Coord>;

    #[inline]
    fn next(&mut self) -> Option<Option<Coord>> {
        if self.left == 0 {
            return None;
        }
        self.left -= 1;
        let o = self.o;
        let item = (0..MAX_RANK)
            .all(|a| o[a] < self.valid[a])
            .then(|| std::array::from_fn(|a| self.start[a] + o[a] * self.dilation[a]));
        for a in (0..MAX_RANK).rev() {
            self.o[a] += 1;
            if self.o[a] < self.windows[a] {
                break;
            }
            self.o[a] = 0;
        }
        Some(item)
    }
}

pub(crate) fn block_volume(range: &[AxisRange; MAX_RANK]) -> usize {
    range.iter().map(|&(lo, hi)| hi - lo + 1).product()
}

pub(crate) fn pad_range(r: &[AxisRange]) -> [AxisRange; MAX_RANK] {
    let mut out = [(0, 0); MAX_RANK];
    out[..r.len()].copy_from_slice(r);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::validate;

    fn all_coords(extents: &[usize]) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for &e in extents {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..e).map(move |i| {
                        let mut v = p.clone();
                        v.push(i);
                        v
                    })
                })
                .collect();
        }
        out
    }

    fn setup(extents: &[usize], axes: Vec<AxisParams>) -> (ProblemSpec, NaParams) {
        let p = ProblemSpec::new(1, 1, extents, 4);
        let params = NaParams::new(axes, 4);
        validate(&p, &params).unwrap();
        (p, params)
    }

    #[test]
    fn window_start_examples() {
        assert_eq!(window_start(0, 5, AxisParams::window(3)), 0);
        assert_eq!(window_start(4, 5, AxisParams::window(3)), 2);
        assert_eq!(window_start(2, 5, AxisParams::window(5)), 0);
        assert_eq!(window_start(1, 5, AxisParams::causal(3)), 0);
        assert_eq!(window_start(4, 5, AxisParams::causal(3)), 2);
    }

    #[test]
    fn window_sizes_per_axis() {
        for extent in 1..=9 {
            for window in (1..=extent).step_by(2) {
                for i in 0..extent {
                    let s = window_start(i, extent, AxisParams::window(window));
                    assert!(s <= i && i < s + window && s + window <= extent);
                }
            }
            for window in 1..=extent {
                for i in 0..extent {
                    let s = window_start(i, extent, AxisParams::causal(window));
                    assert_eq!(i - s + 1, window.min(i + 1));
                }
            }
        }
    }

    #[test]
    fn predicate_examples() {
        let (p, params) = setup(&[5, 5], vec![AxisParams::window(3); 2]);
        assert!(neighborhood_contains(&[0, 0], &[1, 1], &p, &params));
        assert!(!neighborhood_contains(&[0, 0], &[3, 0], &p, &params));

        let (p, params) = setup(&[5], vec![AxisParams::causal(3)]);
        assert!(!neighborhood_contains(&[2], &[3], &p, &params));
        assert!(neighborhood_contains(&[2], &[0], &p, &params));

        let (p, params) = setup(&[8], vec![AxisParams::new(3, 2, false)]);
        assert!(!neighborhood_contains(&[0], &[1], &p, &params));
        assert!(neighborhood_contains(&[0], &[4], &p, &params));
        assert!(!neighborhood_contains(&[0], &[6], &p, &params));
    }

    #[test]
    fn window_one_is_identity_and_full_window_is_dense() {
        let (p, ones) = setup(&[4, 3], vec![AxisParams::window(1); 2]);
        let (pf, fullp) = setup(&[5, 3], vec![AxisParams::window(5), AxisParams::window(3)]);
        for q in all_coords(&p.extents) {
            for c in all_coords(&p.extents) {
                assert_eq!(neighborhood_contains(&q, &c, &p, &ones), q == c);
            }
        }
        for q in all_coords(&pf.extents) {
            for c in all_coords(&pf.extents) {
                assert!(neighborhood_contains(&q, &c, &pf, &fullp));
            }
        }
    }

    #[test]
    fn inverse_examples() {
        let (p, params) = setup(&[5], vec![AxisParams::window(3)]);
        assert_eq!(
            inverse_neighborhood(&[0], &p, &params),
            vec![vec![0], vec![1]]
        );
        // the border queries 0 and 4 shift inward and also cover token 2
        assert_eq!(inverse_neighborhood(&[2], &p, &params).len(), 5);
        assert_eq!(
            inverse_neighborhood(&[1], &p, &params),
            vec![vec![0], vec![1], vec![2]]
        );
        let (p, params) = setup(&[5], vec![AxisParams::window(5)]);
        assert_eq!(inverse_neighborhood(&[3], &p, &params).len(), 5);
    }

    #[test]
    fn halo_examples() {
        let (p, params) = setup(&[10], vec![AxisParams::window(3)]);
        assert_eq!(halo_range(&[(4, 7)], &p, &params), vec![(3, 8)]);
        assert_eq!(halo_range(&[(0, 9)], &p, &params), vec![(0, 9)]);
        let (p, params) = setup(&[10], vec![AxisParams::causal(3)]);
        assert_eq!(halo_range(&[(4, 7)], &p, &params), vec![(2, 7)]);
    }

    #[test]
    fn partition_examples() {
        let (p, params) = setup(&[8], vec![AxisParams::new(3, 2, false)]);
        let subs = partition_dilated(&p, &params);
        assert_eq!(subs.len(), 2);
        assert_eq!(subs[0].problem.extents, vec![4]);
        let class0: Vec<_> = (0..4).map(|i| subs[0].to_original(&[i])[0]).collect();
        let class1: Vec<_> = (0..4).map(|i| subs[1].to_original(&[i])[0]).collect();
        assert_eq!(class0, vec![0, 2, 4, 6]);
        assert_eq!(class1, vec![1, 3, 5, 7]);

        let (p, params) = setup(&[7], vec![AxisParams::new(3, 2, false)]);
        let subs = partition_dilated(&p, &params);
        assert_eq!(subs[0].problem.extents, vec![4]);
        assert_eq!(subs[1].problem.extents, vec![3]);

        let (p, params) = setup(&[5, 4], vec![AxisParams::window(3); 2]);
        let subs = partition_dilated(&p, &params);
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].problem, p);
        assert_eq!(subs[0].to_original(&[3, 2]), vec![3, 2]);
    }

    #[test]
    fn gather_scatter_round_trip() {
        let (p, params) = setup(
            &[6, 5],
            vec![AxisParams::new(3, 2, false), AxisParams::new(1, 2, false)],
        );
        let p = ProblemSpec { batch: 2, ..p };
        let t = Tensor::<f64>::random(&[2, 1, 6, 5, 3], 1);
        let mut back = Tensor::zeros(t.shape());
        let subs = partition_dilated(&p, &params);
        assert_eq!(subs.len(), 4);
        for sub in subs {
            let g = gather_subproblem(&t, &p, &sub);
            scatter_subproblem(&g, &p, &sub, &mut back);
        }
        assert!(back.bitwise_eq(&t));
    }

    #[test]
    fn geometry_matches_predicate() {
        let cases = vec![
            (vec![7], vec![AxisParams::new(3, 2, false)]),
            (vec![6], vec![AxisParams::new(2, 1, true)]),
            (
                vec![5, 6],
                vec![AxisParams::causal(3), AxisParams::new(3, 2, false)],
            ),
            (
                vec![4, 3, 5],
                vec![
                    AxisParams::window(3),
                    AxisParams::causal(2),
                    AxisParams::new(1, 2, true),
                ],
            ),
        ];
        for (extents, axes) in cases {
            let (p, params) = setup(&extents, axes);
            let g = Geometry::new(&p, &params);
            for q in all_coords(&extents) {
                let mut qc = [0; MAX_RANK];
                qc[..q.len()].copy_from_slice(&q);
                let mut attended = 0;
                for c in all_coords(&extents) {
                    let mut cc = [0; MAX_RANK];
                    cc[..c.len()].copy_from_slice(&c);
                    let expect = neighborhood_contains(&q, &c, &p, &params);
                    assert_eq!(g.contains(qc, cc), expect, "q={q:?} c={c:?}");
                    if let Some(w) = g.slot_of(qc, cc) {
                        assert_eq!(g.decode(qc, w), Some(cc));
                    }
                    attended += expect as usize;
                }
                let walked: Vec<Option<Coord>> = g.slots(qc).collect();
                let direct: Vec<Option<Coord>> = (0..g.volume).map(|w| g.decode(qc, w)).collect();
                assert_eq!(walked, direct);
                let decoded = (0..g.volume).filter(|&w| g.decode(qc, w).is_some()).count();
                assert_eq!(decoded, attended);
            }
        }
    }
}
