//! Cache-blocked matrix multiply on contiguous scratch operands.
//!
//! Every output element accumulates its inner products in increasing `k` order,
//! so a product with `c = 0` is bitwise equal to a sequential dot product.

use crate::tensor::Element;

/// Layout of the right-hand operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BLayout {
    /// `b` is `k x n`; computes `c += a * b`.
    Normal,
    /// `b` is `n x k`; computes `c += a * b^T`.
    Transposed,
}

const MR: usize = 4;
const NR: usize = 4;
const KC: usize = 256;
const NC: usize = 256;

/// `c (m x n) += a (m x k) * op(b)`, all row-major.
pub fn microkernel_gemm<T: Element>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    layout: BLayout,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "lhs too short");
    assert!(b.len() >= n * k, "rhs too short");
    assert!(c.len() >= m * n, "output too short");
    match layout {
        BLayout::Transposed => gemm_nt(m, n, k, a, b, c),
        BLayout::Normal => gemm_nn(m, n, k, a, b, c),
    }
}

fn gemm_nt<T: Element>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in (0..m).step_by(MR) {
        row_group_nt(i, MR.min(m - i), 0, n, n, k, a, b, c);
    }
}

/// `c = a * b^T` on a per-row column range: row `i` gets columns
/// `ranges[i].0..ranges[i].1` (an empty range skips the row). Each row group
/// of the micro-kernel either runs the register-blocked kernel over the union
/// of its ranges, when that wastes little, or row by row. Entries outside the
/// ranges may or may not be written; entries inside are bitwise equal to the
/// full product.
pub(crate) fn gemm_nt_ranges<T: Element>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    ranges: &[(usize, usize)],
) {
    assert!(ranges.len() >= m, "one range per row");
    for i in (0..m).step_by(MR) {
        let mr = MR.min(m - i);
        let rows = &ranges[i..i + mr];
        let (lo, hi) = rows
            .iter()
            .filter(|r| r.0 < r.1)
            .fold((usize::MAX, 0), |(lo, hi), r| (lo.min(r.0), hi.max(r.1)));
        if lo >= hi {
            continue;
        }
        assert!(hi <= n, "range exceeds the output");
        // rough load+multiply counts per reduction step: the blocked kernel
        // covers whole 4x4 tiles, the row kernel reloads `a` per row
        let span = (hi - lo).next_multiple_of(NR);
        let by_rows: usize = rows.iter().map(|r| 2 * r.1.saturating_sub(r.0) + 1).sum();
        if mr == MR && lo + span <= n && 6 * span < by_rows {
            for ii in 0..MR {
                c[(i + ii) * n + lo..(i + ii) * n + lo + span].fill(T::zero());
            }
            row_group_nt(i, MR, lo, lo + span, n, k, a, b, c);
        } else {
            for (ii, &(lo, hi)) in rows.iter().enumerate() {
                row_nt(
                    k,
                    &a[(i + ii) * k..][..k],
                    b,
                    lo,
                    hi,
                    &mut c[(i + ii) * n..],
                );
            }
        }
    }
}

/// One row of `a * b^T` over columns `lo..hi`, up to four columns at a time.
fn row_nt<T: Element>(k: usize, a: &[T], b: &[T], lo: usize, hi: usize, c: &mut [T]) {
    let mut j = lo;
    while j + NR <= hi {
        row_tile::<T, NR>(k, a, &b[j * k..], &mut c[j..]);
        j += NR;
    }
    match hi - j {
        0 => {}
        1 => row_tile::<T, 1>(k, a, &b[j * k..], &mut c[j..]),
        2 => row_tile::<T, 2>(k, a, &b[j * k..], &mut c[j..]),
        _ => row_tile::<T, 3>(k, a, &b[j * k..], &mut c[j..]),
    }
}

#[inline(always)]
fn row_tile<T: Element, const W: usize>(k: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bs: [&[T]; W] = std::array::from_fn(|jj| &b[jj * k..][..k]);
    let mut acc = [T::zero(); W];
    for p in 0..k {
        let x = a[p];
        for jj in 0..W {
            acc[jj] += x * bs[jj][p];
        }
    }
    c[..W].copy_from_slice(&acc);
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn row_group_nt<T: Element>(
    i: usize,
    mr: usize,
    j0: usize,
    j1: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    let mut j = j0;
    while j < j1 {
        let nr = NR.min(j1 - j);
        if mr == MR && nr == NR {
            micro_nt(k, &a[i * k..], &b[j * k..], &mut c[i * n + j..], n);
        } else {
            for ii in 0..mr {
                let ar = &a[(i + ii) * k..][..k];
                for jj in 0..nr {
                    let br = &b[(j + jj) * k..][..k];
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += ar[p] * br[p];
                    }
                    c[(i + ii) * n + j + jj] += acc;
                }
            }
        }
        j += NR;
    }
}

#[inline(always)]
fn micro_nt<T: Element>(k: usize, a: &[T], b: &[T], c: &mut [T], ldc: usize) {
    let (a0, a1, a2, a3) = (&a[..k], &a[k..2 * k], &a[2 * k..3 * k], &a[3 * k..4 * k]);
    let (b0, b1, b2, b3) = (&b[..k], &b[k..2 * k], &b[2 * k..3 * k], &b[3 * k..4 * k]);
    let mut acc = [[T::zero(); NR]; MR];
    for p in 0..k {
        let av = [a0[p], a1[p], a2[p], a3[p]];
        let bv = [b0[p], b1[p], b2[p], b3[p]];
        for ii in 0..MR {
            for jj in 0..NR {
                acc[ii][jj] += av[ii] * bv[jj];
            }
        }
    }
    for ii in 0..MR {
        let row = &mut c[ii * ldc..][..NR];
        for jj in 0..NR {
            row[jj] += acc[ii][jj];
        }
    }
}

fn gemm_nn<T: Element>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            for i in 0..m {
                let crow = &mut c[i * n + jc..][..nc];
                let arow = &a[i * k + pc..][..kc];
                for (p, &av) in arow.iter().enumerate() {
                    if av == T::zero() {
                        continue;
                    }
                    let brow = &b[(pc + p) * n + jc..][..nc];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
    }
}
