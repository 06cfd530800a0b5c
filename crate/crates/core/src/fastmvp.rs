//! Structured matrix-vector products over the incomplete grid: the generic
//! chopped one-mode contraction, the L/U/M/K/C products, derivative
//! products, batched quadratic terms, single kernel columns and the kernel
//! diagonal.
//!
//! The kernel matrix factorizes as `K = L M U` where `L` and `U` are
//! Kronecker products of unit-triangular one-mode factors (`L = I + D`,
//! `U = I + S`, with `D` carrying ones in column 0 and `S` ones in row 0)
//! and `M` is a sum over kernel terms, each confined to the complete
//! sub-grid spanned by the term's modes. All products stay on the incomplete
//! grid; out-of-range mode combinations are never touched, which is what
//! keeps the total cost at `O(n alpha N)`.

use crate::grid::{GridError, IncompleteGrid, McrTensor, ModeCombination};
use crate::kernel::{AdditiveKernel, HyperParam, HyperValues, KernelError};

/// Block partition of a one-mode matrix `A` into the passive scalar
/// `p = A[0,0]`, the down row `d = A[0,1:]`, the up column `u = A[1:,0]` and
/// the forward block `F = A[1:,1:]`, alongside the full row-major matrix.
#[derive(Debug, Clone)]
pub struct OneModeBlocks {
    pub mode: usize,
    pub p: f64,
    pub d: Vec<f64>,
    pub u: Vec<f64>,
    /// Forward block, row-major `(n-1) x (n-1)`.
    pub f: Vec<f64>,
    /// Full matrix, row-major `n x n`.
    full: Vec<f64>,
    n: usize,
}

impl OneModeBlocks {
    /// Partitions a dense row-major `n x n` matrix.
    pub fn from_matrix(mode: usize, a: &[f64], n: usize) -> Self {
        assert_eq!(a.len(), n * n);
        let bar = n - 1;
        let mut d = vec![0.0; bar];
        let mut u = vec![0.0; bar];
        let mut f = vec![0.0; bar * bar];
        for j in 0..bar {
            d[j] = a[j + 1];
            u[j] = a[(j + 1) * n];
        }
        for i in 0..bar {
            for j in 0..bar {
                f[i * bar + j] = a[(i + 1) * n + (j + 1)];
            }
        }
        OneModeBlocks {
            mode,
            p: a[0],
            d,
            u,
            f,
            full: a.to_vec(),
            n,
        }
    }

    /// The identity partition (`p = 1`, `F = I`, `d = u = 0`).
    pub fn identity(mode: usize, n: usize) -> Self {
        let mut full = vec![0.0; n * n];
        for i in 0..n {
            full[i * n + i] = 1.0;
        }
        OneModeBlocks::from_matrix(mode, &full, n)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Full matrix entry `A[i,j]`.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.full[i * self.n + j]
    }

    pub(crate) fn full(&self) -> &[f64] {
        &self.full
    }

    /// Column `j` of the full matrix.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.full[i * self.n + j]).collect()
    }
}

/// Axis geometry of a subtensor around one of its axes.
fn axis_split(extents: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = extents[..axis].iter().product();
    let len = extents[axis];
    let inner: usize = extents[axis + 1..].iter().product();
    (outer, len, inner)
}

/// `dst[o, i] += sum_c d[c] * src[o, c, i]` (one-index contraction that
/// removes the axis).
fn contract_down(d: &[f64], src: &[f64], dst: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        let dst_o = &mut dst[o * inner..(o + 1) * inner];
        for (c, &w) in d.iter().enumerate().take(len) {
            let src_oc = &src[(o * len + c) * inner..(o * len + c + 1) * inner];
            for (t, &s) in dst_o.iter_mut().zip(src_oc) {
                *t += w * s;
            }
        }
    }
}

/// `dst[o, b, i] += sum_c F[b, c] * src[o, c, i]` (in-axis contraction).
fn contract_forward(
    f: &[f64],
    src: &[f64],
    dst: &mut [f64],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        for b in 0..len {
            let row = &f[b * len..(b + 1) * len];
            let dst_ob = &mut dst[(o * len + b) * inner..(o * len + b + 1) * inner];
            for (c, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let src_oc = &src[(o * len + c) * inner..(o * len + c + 1) * inner];
                for (t, &s) in dst_ob.iter_mut().zip(src_oc) {
                    *t += w * s;
                }
            }
        }
    }
}

/// `dst[o, b, i] += u[b] * src[o, i]` (outer product inserting the axis).
fn contract_up(u: &[f64], src: &[f64], dst: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        let src_o = &src[o * inner..(o + 1) * inner];
        for (b, &w) in u.iter().enumerate().take(len) {
            let dst_ob = &mut dst[(o * len + b) * inner..(o * len + b + 1) * inner];
            for (t, &s) in dst_ob.iter_mut().zip(src_o) {
                *t += w * s;
            }
        }
    }
}

/// Accumulates `w += A^[m] v` for the one-mode bracket matrix described by
/// `blocks`, staying on the incomplete grid.
///
/// For combinations containing the mode this contributes the down and
/// forward contractions; for the others the passive scaling and, when the
/// enlarged combination is in range, the up contraction. Combinations whose
/// enlargement is out of range are skipped.
pub fn one_mode_contract(
    blocks: &OneModeBlocks,
    v: &McrTensor,
    w: &mut McrTensor,
) -> Result<(), GridError> {
    if !v.same_grid(w) {
        return Err(GridError::InvalidArgument(
            "input and output tensors live on different grids".into(),
        ));
    }
    let grid = v.grid().clone();
    if blocks.mode >= grid.dims() {
        return Err(GridError::InvalidArgument(format!(
            "mode {} out of range for {} dims",
            blocks.mode,
            grid.dims()
        )));
    }
    let mode = blocks.mode;
    for (id, mc) in grid.mcr().iter().enumerate() {
        let info = grid.info(id);
        if info.size == 0 && !mc.contains(mode) {
            continue;
        }
        if mc.contains(mode) {
            let axis = mc.modes().position(|m| m == mode).unwrap();
            let (outer, len, inner) = axis_split(&info.extents, axis);
            if len == 0 {
                continue;
            }
            let child = grid.mcr().id_of(&mc.without(mode)).unwrap();
            let src = v.subtensor(id);
            contract_down(&blocks.d, src, w.subtensor_mut(child), outer, len, inner);
            contract_forward(&blocks.f, src, w.subtensor_mut(id), outer, len, inner);
        } else {
            let src = v.subtensor(id);
            if blocks.p != 0.0 {
                let dst = w.subtensor_mut(id);
                for (t, &s) in dst.iter_mut().zip(src) {
                    *t += blocks.p * s;
                }
            }
            if let Some(parent) = grid.mcr().id_of(&mc.with(mode)) {
                let pinfo = grid.info(parent);
                let axis = mc.modes().filter(|&m| m < mode).count();
                let (outer, len, inner) = axis_split(&pinfo.extents, axis);
                if len > 0 {
                    contract_up(&blocks.u, src, w.subtensor_mut(parent), outer, len, inner);
                }
            }
        }
    }
    Ok(())
}

/// In-place sweep `v <- (I + S^[m]) v` for every mode ascending, realizing
/// the product with `U`. The `S` term is a pure down contraction with unit
/// weights.
pub(crate) fn apply_u_inplace(grid: &IncompleteGrid, data: &mut [f64]) {
    for mode in 0..grid.dims() {
        for edge in grid.edges_for_mode(mode) {
            let info = grid.info(edge.mc as usize);
            if info.size == 0 {
                continue;
            }
            let (outer, len, inner) = axis_split(&info.extents, edge.axis as usize);
            let child = grid.info(edge.child as usize);
            let src_off = info.offset;
            let dst_off = child.offset;
            if inner == 1 {
                for o in 0..outer {
                    let s0 = src_off + o * len;
                    let mut acc = 0.0;
                    for c in 0..len {
                        acc += data[s0 + c];
                    }
                    data[dst_off + o] += acc;
                }
                continue;
            }
            for o in 0..outer {
                for c in 0..len {
                    let s0 = src_off + (o * len + c) * inner;
                    let d0 = dst_off + o * inner;
                    for i in 0..inner {
                        data[d0 + i] += data[s0 + i];
                    }
                }
            }
        }
    }
}

/// In-place sweep `v <- (I + D^[m]) v` for every mode ascending, realizing
/// the product with `L`. The `D` term is a pure up contraction with unit
/// weights.
pub(crate) fn apply_l_inplace(grid: &IncompleteGrid, data: &mut [f64]) {
    for mode in 0..grid.dims() {
        for edge in grid.edges_for_mode(mode) {
            let info = grid.info(edge.mc as usize);
            if info.size == 0 {
                continue;
            }
            let (outer, len, inner) = axis_split(&info.extents, edge.axis as usize);
            let child = grid.info(edge.child as usize);
            let dst_off = info.offset;
            let src_off = child.offset;
            if inner == 1 {
                for o in 0..outer {
                    let s = data[src_off + o];
                    let d0 = dst_off + o * len;
                    for b in 0..len {
                        data[d0 + b] += s;
                    }
                }
                continue;
            }
            for o in 0..outer {
                let s0 = src_off + o * inner;
                for b in 0..len {
                    let d0 = dst_off + (o * len + b) * inner;
                    for i in 0..inner {
                        data[d0 + i] += data[s0 + i];
                    }
                }
            }
        }
    }
}

/// `L v`: unit-lower-triangular product, `O(alpha N)`.
pub fn mvp_l(v: &McrTensor) -> McrTensor {
    let mut out = v.clone();
    apply_l_inplace(out.grid().clone().as_ref(), out.as_mut_slice());
    out
}

/// `U v`: unit-upper-triangular product, `O(alpha N)`.
pub fn mvp_u(v: &McrTensor) -> McrTensor {
    let mut out = v.clone();
    apply_u_inplace(out.grid().clone().as_ref(), out.as_mut_slice());
    out
}

/// Scratch buffers for the per-term complete sub-grid work inside the `M`
/// products. One set per in-flight MVP.
struct MiniScratch {
    gathered: Vec<f64>,
    work_a: Vec<f64>,
    work_b: Vec<f64>,
}

impl MiniScratch {
    fn new(kernel: &AdditiveKernel) -> Self {
        let cap = kernel.max_mini_len();
        MiniScratch {
            gathered: vec![0.0; cap],
            work_a: vec![0.0; cap],
            work_b: vec![0.0; cap],
        }
    }
}

/// Hard cap on the order of one kernel term (mode count of one mini
/// tensor); keeps the per-term bookkeeping on the stack.
const MAX_TERM_ORDER: usize = 32;

/// Per-term mini-tensor geometry: full axis sizes and row-major strides.
struct TermGeom {
    k: usize,
    mini_len: usize,
    sizes: [usize; MAX_TERM_ORDER],
    strides: [usize; MAX_TERM_ORDER],
}

fn term_geom(kernel: &AdditiveKernel, term: usize) -> TermGeom {
    let mut sizes = [0usize; MAX_TERM_ORDER];
    let mut k = 0;
    for m in kernel.term_modes(term) {
        sizes[k] = kernel.grid().shape().grid_1d(m).len();
        k += 1;
    }
    let mut strides = [0usize; MAX_TERM_ORDER];
    let mut acc = 1usize;
    for i in (0..k).rev() {
        strides[i] = acc;
        acc *= sizes[i];
    }
    TermGeom {
        k,
        mini_len: acc,
        sizes,
        strides,
    }
}

/// Copies the subtensor for subset `mask` of a term into the mini tensor.
/// Axis `t` of the term runs over the full 1D size; subset axes start at
/// index 1, all other axes sit at the reference index 0.
/// Stack-resident view of one subset's axes within a term.
struct SubsetGeom {
    j: usize,
    extents: [usize; MAX_TERM_ORDER],
    pstrides: [usize; MAX_TERM_ORDER],
    start: usize,
    empty: bool,
}

fn subset_geom(mask: usize, geom: &TermGeom) -> SubsetGeom {
    let mut extents = [0usize; MAX_TERM_ORDER];
    let mut pstrides = [0usize; MAX_TERM_ORDER];
    let mut j = 0;
    let mut start = 0;
    let mut empty = false;
    for t in 0..geom.k {
        if mask >> t & 1 == 1 {
            let e = geom.sizes[t] - 1;
            empty |= e == 0;
            extents[j] = e;
            pstrides[j] = geom.strides[t];
            start += geom.strides[t];
            j += 1;
        }
    }
    SubsetGeom {
        j,
        extents,
        pstrides,
        start,
        empty,
    }
}

fn gather_subset(src: &[f64], dst: &mut [f64], mask: usize, geom: &TermGeom) {
    let sg = subset_geom(mask, geom);
    if sg.j == 0 {
        dst[0] = src[0];
        return;
    }
    if sg.empty {
        return;
    }
    let extents = &sg.extents[..sg.j];
    let pstrides = &sg.pstrides[..sg.j];
    if pstrides[sg.j - 1] == 1 {
        // Contiguous runs along the innermost axis on both sides.
        let run = extents[sg.j - 1];
        let lead = sg.j - 1;
        let mut odo = [0usize; MAX_TERM_ORDER];
        let mut dpos = sg.start;
        let mut s = 0usize;
        loop {
            dst[dpos..dpos + run].copy_from_slice(&src[s..s + run]);
            s += run;
            let mut t = lead;
            loop {
                if t == 0 {
                    return;
                }
                t -= 1;
                odo[t] += 1;
                dpos += pstrides[t];
                if odo[t] < extents[t] {
                    break;
                }
                odo[t] = 0;
                dpos -= extents[t] * pstrides[t];
            }
        }
    }
    let mut odo = [0usize; MAX_TERM_ORDER];
    let mut dpos = sg.start;
    for &s in src {
        dst[dpos] = s;
        for t in (0..sg.j).rev() {
            odo[t] += 1;
            dpos += pstrides[t];
            if odo[t] < extents[t] {
                break;
            }
            odo[t] = 0;
            dpos -= extents[t] * pstrides[t];
        }
    }
}

/// Adds `scale` times the mini-tensor block for subset `mask` into the
/// subtensor. Mirror of [`gather_subset`].
fn scatter_subset(src: &[f64], dst: &mut [f64], scale: f64, mask: usize, geom: &TermGeom) {
    let sg = subset_geom(mask, geom);
    if sg.j == 0 {
        dst[0] += scale * src[0];
        return;
    }
    if sg.empty {
        return;
    }
    let extents = &sg.extents[..sg.j];
    let pstrides = &sg.pstrides[..sg.j];
    if pstrides[sg.j - 1] == 1 {
        let run = extents[sg.j - 1];
        let lead = sg.j - 1;
        let mut odo = [0usize; MAX_TERM_ORDER];
        let mut spos = sg.start;
        let mut d = 0usize;
        loop {
            let dst_run = &mut dst[d..d + run];
            let src_run = &src[spos..spos + run];
            for (t, &s) in dst_run.iter_mut().zip(src_run) {
                *t += scale * s;
            }
            d += run;
            let mut t = lead;
            loop {
                if t == 0 {
                    return;
                }
                t -= 1;
                odo[t] += 1;
                spos += pstrides[t];
                if odo[t] < extents[t] {
                    break;
                }
                odo[t] = 0;
                spos -= extents[t] * pstrides[t];
            }
        }
    }
    let mut odo = [0usize; MAX_TERM_ORDER];
    let mut spos = sg.start;
    for d in dst.iter_mut() {
        *d += scale * src[spos];
        for t in (0..sg.j).rev() {
            odo[t] += 1;
            spos += pstrides[t];
            if odo[t] < extents[t] {
                break;
            }
            odo[t] = 0;
            spos -= extents[t] * pstrides[t];
        }
    }
}

/// Gathers the complete sub-grid tensor of one kernel term from `v`.
fn gather_term(
    kernel: &AdditiveKernel,
    term: usize,
    geom: &TermGeom,
    v: &McrTensor,
    dst: &mut [f64],
) {
    dst[..geom.mini_len].fill(0.0);
    for (mask, &mc_id) in kernel.term_subsets(term).iter().enumerate() {
        gather_subset(v.subtensor(mc_id as usize), &mut dst[..geom.mini_len], mask, geom);
    }
}

/// Scatter-accumulates `scale` times a term mini tensor into `out`.
fn scatter_term(
    kernel: &AdditiveKernel,
    term: usize,
    geom: &TermGeom,
    src: &[f64],
    scale: f64,
    out: &mut McrTensor,
) {
    for (mask, &mc_id) in kernel.term_subsets(term).iter().enumerate() {
        scatter_subset(src, out.subtensor_mut(mc_id as usize), scale, mask, geom);
    }
}

/// One ordinary one-mode product on a mini tensor: `out[o,b,i] =
/// sum_c mat[b,c] * src[o,c,i]` with `mat` row-major `n x n`.
fn mini_mode_product(
    mat: &[f64],
    n: usize,
    src: &[f64],
    dst: &mut [f64],
    outer: usize,
    inner: usize,
) {
    if inner == 1 {
        // Contiguous dot products per output element.
        for o in 0..outer {
            let src_o = &src[o * n..(o + 1) * n];
            let dst_o = &mut dst[o * n..(o + 1) * n];
            for (b, d) in dst_o.iter_mut().enumerate() {
                let row = &mat[b * n..(b + 1) * n];
                let mut acc = 0.0;
                for (w, s) in row.iter().zip(src_o) {
                    acc += w * s;
                }
                *d = acc;
            }
        }
        return;
    }
    for o in 0..outer {
        for b in 0..n {
            let row = &mat[b * n..(b + 1) * n];
            let dst_ob = &mut dst[(o * n + b) * inner..(o * n + b + 1) * inner];
            // First factor writes, the rest accumulate.
            let src_o0 = &src[o * n * inner..(o * n + 1) * inner];
            let w0 = row[0];
            for (t, &s) in dst_ob.iter_mut().zip(src_o0) {
                *t = w0 * s;
            }
            for (c, &w) in row.iter().enumerate().skip(1) {
                let src_oc = &src[(o * n + c) * inner..(o * n + c + 1) * inner];
                for (t, &s) in dst_ob.iter_mut().zip(src_oc) {
                    *t += w * s;
                }
            }
        }
    }
}

/// Applies the factor chain of one term to a gathered mini tensor in
/// `work_a`, modes ascending. `deriv_axis` substitutes the length-scale
/// derivative factor at one axis. Result ends in `work_a`.
fn apply_term_chain(
    kernel: &AdditiveKernel,
    term: usize,
    deriv_axis: Option<usize>,
    geom: &TermGeom,
    work_a: &mut Vec<f64>,
    work_b: &mut Vec<f64>,
) {
    let mini_len = geom.mini_len;
    let mut inner = mini_len;
    for (axis, mode) in kernel.term_modes(term).enumerate() {
        let n = geom.sizes[axis];
        let outer = mini_len / (inner);
        inner /= n;
        let mat = if deriv_axis == Some(axis) {
            kernel.dm_blocks(mode).full()
        } else {
            kernel.m_blocks(mode).full()
        };
        mini_mode_product(mat, n, &work_a[..mini_len], &mut work_b[..mini_len], outer, inner);
        std::mem::swap(work_a, work_b);
    }
}

/// `M v`: the sum over kernel terms of `sigma^2 M^[m] R^[not m] v`. Each
/// term touches only the complete sub-grid spanned by its modes.
pub fn mvp_m(kernel: &AdditiveKernel, v: &McrTensor) -> McrTensor {
    let mut out = McrTensor::zeros(v.grid().clone());
    accumulate_m(kernel, v, &mut out, &MTermFilter::All);
    out
}

/// Which kernel terms and factor substitutions an `M`-type product uses.
enum MTermFilter {
    /// All terms, weighted by their order variances.
    All,
    /// Terms containing one mode, order-variance weighted, with the
    /// derivative factor at that mode.
    DerivLengthScale(usize),
    /// Terms of one order, unit weight.
    DerivOrderVariance(usize),
}

fn accumulate_m(kernel: &AdditiveKernel, v: &McrTensor, out: &mut McrTensor, filter: &MTermFilter) {
    let mut scratch = MiniScratch::new(kernel);
    for term in 0..kernel.term_count() {
        let order = kernel.term_order(term);
        let (scale, deriv_axis) = match filter {
            MTermFilter::All => {
                let s = kernel.sigma2()[order];
                if s == 0.0 {
                    continue;
                }
                (s, None)
            }
            MTermFilter::DerivLengthScale(mode) => {
                let Some(axis) = kernel.term_modes(term).position(|m| m == *mode) else {
                    continue;
                };
                let s = kernel.sigma2()[order];
                if s == 0.0 {
                    continue;
                }
                (s, Some(axis))
            }
            MTermFilter::DerivOrderVariance(k) => {
                if order != *k {
                    continue;
                }
                (1.0, None)
            }
        };
        let geom = term_geom(kernel, term);
        gather_term(kernel, term, &geom, v, &mut scratch.work_a);
        apply_term_chain(
            kernel,
            term,
            deriv_axis,
            &geom,
            &mut scratch.work_a,
            &mut scratch.work_b,
        );
        scatter_term(kernel, term, &geom, &scratch.work_a[..geom.mini_len], scale, out);
    }
}

/// `K v = L M U v`, total complexity `O(n alpha N)`.
pub fn mvp_k(kernel: &AdditiveKernel, v: &McrTensor) -> McrTensor {
    let mut scratch = McrTensor::zeros(v.grid().clone());
    let mut out = McrTensor::zeros(v.grid().clone());
    mvp_k_reusing(kernel, v, &mut scratch, &mut out);
    out
}

/// `K v` into a caller-owned output, reusing one scratch tensor for the
/// `U` image. Avoids the per-call allocations of [`mvp_k`] in hot loops.
pub fn mvp_k_reusing(
    kernel: &AdditiveKernel,
    v: &McrTensor,
    scratch: &mut McrTensor,
    out: &mut McrTensor,
) {
    let grid = v.grid().clone();
    scratch.as_mut_slice().copy_from_slice(v.as_slice());
    apply_u_inplace(grid.as_ref(), scratch.as_mut_slice());
    out.fill(0.0);
    accumulate_m(kernel, scratch, out, &MTermFilter::All);
    apply_l_inplace(grid.as_ref(), out.as_mut_slice());
}

/// `C v = (K + sigma^2 I) v`.
pub fn mvp_c(kernel: &AdditiveKernel, noise: f64, v: &McrTensor) -> Result<McrTensor, KernelError> {
    if noise < 0.0 {
        return Err(KernelError::InvalidArgument(format!(
            "noise variance must be nonnegative, got {noise}"
        )));
    }
    let mut out = mvp_k(kernel, v);
    out.axpy(noise, v);
    Ok(out)
}

/// `(dC/dtheta) v` for one hyperparameter.
pub fn mvp_dc(kernel: &AdditiveKernel, param: HyperParam, v: &McrTensor) -> Result<McrTensor, KernelError> {
    let filter = match param {
        HyperParam::Noise => return Ok(v.clone()),
        HyperParam::LengthScale(mode) => {
            if mode >= kernel.grid().dims() {
                return Err(KernelError::InvalidArgument(format!(
                    "length scale index {mode} out of range"
                )));
            }
            MTermFilter::DerivLengthScale(mode)
        }
        HyperParam::OrderVariance(k) => {
            if k >= kernel.sigma2().len() {
                return Err(KernelError::InvalidArgument(format!(
                    "order variance index {k} out of range"
                )));
            }
            MTermFilter::DerivOrderVariance(k)
        }
    };
    let grid = v.grid().clone();
    let mut uimage = v.clone();
    apply_u_inplace(grid.as_ref(), uimage.as_mut_slice());
    let mut out = McrTensor::zeros(grid.clone());
    accumulate_m(kernel, &uimage, &mut out, &filter);
    apply_l_inplace(grid.as_ref(), out.as_mut_slice());
    Ok(out)
}

fn slice_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// All bilinear forms `a^T (dC/dtheta) b` in one sweep.
///
/// Both vectors are pushed through `U` once; each kernel term then yields
/// its order-variance contribution and, per contained mode, its length-scale
/// contribution from a factor chain with the derivative matrix substituted
/// at that mode. Total cost over all length scales is `O(n alpha^2 N)`.
/// The noise entry is the plain dot product.
pub fn quadratic_terms(kernel: &AdditiveKernel, a: &McrTensor, b: &McrTensor) -> HyperValues {
    let grid = a.grid().clone();
    let mut ua = a.clone();
    apply_u_inplace(grid.as_ref(), ua.as_mut_slice());
    let same = std::ptr::eq(a.as_slice().as_ptr(), b.as_slice().as_ptr());
    let ub = if same {
        None
    } else {
        let mut ub = b.clone();
        apply_u_inplace(grid.as_ref(), ub.as_mut_slice());
        Some(ub)
    };
    let mut values = m_bilinear(kernel, &ua, ub.as_ref().unwrap_or(&ua));
    values.noise = a.dot(b);
    values
}

/// Bilinear forms `ua^T (dM/dtheta) ub` for all order variances and length
/// scales, with `ua`, `ub` already in `U`-image form. The noise entry is
/// left at zero.
pub(crate) fn m_bilinear(kernel: &AdditiveKernel, ua: &McrTensor, ub: &McrTensor) -> HyperValues {
    let grid = ua.grid().clone();
    let mut values = HyperValues::zeros(kernel.omega(), grid.dims());
    let mut scratch = MiniScratch::new(kernel);
    let mut a_mini = vec![0.0; kernel.max_mini_len()];
    for term in 0..kernel.term_count() {
        let order = kernel.term_order(term);
        let geom = term_geom(kernel, term);
        let mini_len = geom.mini_len;
        gather_term(kernel, term, &geom, ub, &mut scratch.gathered);
        gather_term(kernel, term, &geom, ua, &mut a_mini);
        // Order-variance contribution: plain factor chain, unit weight.
        scratch.work_a[..mini_len].copy_from_slice(&scratch.gathered[..mini_len]);
        apply_term_chain(kernel, term, None, &geom, &mut scratch.work_a, &mut scratch.work_b);
        values.order_variances[order] += slice_dot(&a_mini[..mini_len], &scratch.work_a[..mini_len]);
        // Length-scale contributions: derivative factor at each axis.
        let sig = kernel.sigma2()[order];
        if sig != 0.0 {
            for (axis, mode) in kernel.term_modes(term).enumerate() {
                scratch.work_a[..mini_len].copy_from_slice(&scratch.gathered[..mini_len]);
                apply_term_chain(
                    kernel,
                    term,
                    Some(axis),
                    &geom,
                    &mut scratch.work_a,
                    &mut scratch.work_b,
                );
                values.length_scales[mode] +=
                    sig * slice_dot(&a_mini[..mini_len], &scratch.work_a[..mini_len]);
            }
        }
    }
    values
}

/// Contracts a gathered mini tensor against one factor vector per axis.
fn dot_rank_one(mini: &[f64], sizes: &[usize], factors: &[&[f64]], work: &mut [f64]) -> f64 {
    let mut len = mini.len();
    work[..len].copy_from_slice(mini);
    for axis in (0..sizes.len()).rev() {
        let n = sizes[axis];
        let rows = len / n;
        let f = factors[axis];
        for r in 0..rows {
            let mut acc = 0.0;
            for (c, &fc) in f.iter().enumerate() {
                acc += work[r * n + c] * fc;
            }
            work[r] = acc;
        }
        len = rows;
    }
    work[0]
}

/// Accumulates `weight * p^T (dM/dtheta) (U e_i)` into `out` for all order
/// variances and length scales, where `e_i` is the basis vector of the grid
/// point displacing `displaced` (mode, index) pairs.
///
/// `U e_i` restricted to one kernel term is the rank-one tensor of per-mode
/// factors `e_0 + e_a` (displaced) or `e_0`, so every factor chain collapses
/// to column selections of `M` (or its derivative) and the per-term work is
/// a single gather plus vector contractions: `O(alpha N)` overall.
pub(crate) fn accumulate_basis_bilinear(
    kernel: &AdditiveKernel,
    p: &McrTensor,
    displaced: &[(usize, usize)],
    weight: f64,
    out: &mut HyperValues,
) {
    let cap = kernel.max_mini_len();
    let mut gathered = vec![0.0; cap];
    let mut work = vec![0.0; cap];
    let dims = kernel.grid().dims();
    // Per-mode factor columns: M and dM columns at the basis image.
    let mut cols: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; dims];
    let col_pair = |mode: usize, cols: &mut Vec<Option<(Vec<f64>, Vec<f64>)>>| {
        if cols[mode].is_none() {
            let a = displaced.iter().find(|(m, _)| *m == mode).map(|&(_, a)| a);
            let m = kernel.m_blocks(mode);
            let dm = kernel.dm_blocks(mode);
            let mut mc = m.column(0);
            let mut dmc = dm.column(0);
            if let Some(a) = a {
                for (x, y) in mc.iter_mut().zip(m.column(a)) {
                    *x += y;
                }
                for (x, y) in dmc.iter_mut().zip(dm.column(a)) {
                    *x += y;
                }
            }
            cols[mode] = Some((mc, dmc));
        }
    };
    for term in 0..kernel.term_count() {
        let order = kernel.term_order(term);
        let geom = term_geom(kernel, term);
        let modes: Vec<usize> = kernel.term_modes(term).collect();
        for &mode in &modes {
            col_pair(mode, &mut cols);
        }
        gather_term(kernel, term, &geom, p, &mut gathered);
        let m_factors: Vec<&[f64]> = modes
            .iter()
            .map(|&m| cols[m].as_ref().unwrap().0.as_slice())
            .collect();
        let sizes = &geom.sizes[..geom.k];
        let val = dot_rank_one(&gathered[..geom.mini_len], sizes, &m_factors, &mut work);
        out.order_variances[order] += weight * val;
        let sig = kernel.sigma2()[order];
        if sig != 0.0 {
            for (axis, &mode) in modes.iter().enumerate() {
                let mut factors = m_factors.clone();
                factors[axis] = cols[mode].as_ref().unwrap().1.as_slice();
                let val_d = dot_rank_one(&gathered[..geom.mini_len], sizes, &factors, &mut work);
                out.length_scales[mode] += weight * sig * val_d;
            }
        }
    }
}

/// Builds the rank-one mini tensor `prod_t factors[t]` (outer product).
fn outer_product(factors: &[&[f64]], dst: &mut Vec<f64>) {
    dst.clear();
    dst.push(1.0);
    for f in factors {
        let prev_len = dst.len();
        let mut next = vec![0.0; prev_len * f.len()];
        for (i, &x) in dst.iter().enumerate() {
            for (j, &y) in f.iter().enumerate() {
                next[i * f.len() + j] = x * y;
            }
        }
        *dst = next;
        let _ = prev_len;
    }
}

/// Column `i` of `K`, computed from per-term Kronecker products of factor
/// columns followed by one `L` product; cost `O(alpha N)`.
pub fn kernel_column(kernel: &AdditiveKernel, i: u64) -> Result<McrTensor, KernelError> {
    let grid = kernel.grid().clone();
    let (mc_id, a) = grid
        .locate(i)
        .map_err(|e| KernelError::InvalidArgument(e.to_string()))?;
    let point_mc = grid.mcr().mc(mc_id).clone();
    let displaced: Vec<(usize, usize)> = point_mc.modes().zip(a.iter().copied()).collect();
    column_from_factors(kernel, |mode| {
        let m = kernel.m_blocks(mode);
        match displaced.iter().find(|(dm, _)| *dm == mode) {
            Some(&(_, ai)) => {
                let mut c = m.column(0);
                for (x, y) in c.iter_mut().zip(m.column(ai)) {
                    *x += y;
                }
                c
            }
            None => m.column(0),
        }
    })
}

/// Cross-covariance column for an arbitrary test point: per-mode train-test
/// base columns (centered consistently with the kernel) are folded through
/// the same per-term Kronecker assembly.
pub fn cross_column(kernel: &AdditiveKernel, x_star: &[f64]) -> Result<McrTensor, KernelError> {
    let dims = kernel.grid().dims();
    if x_star.len() != dims {
        return Err(KernelError::InvalidArgument(format!(
            "expected {dims} coordinates, got {}",
            x_star.len()
        )));
    }
    // (I - D) b per mode: subtract the reference entry from displaced rows.
    let mut folded: Vec<Vec<f64>> = Vec::with_capacity(dims);
    for (mode, &xs) in x_star.iter().enumerate() {
        let b = kernel.cross_base_column(mode, xs);
        let mut c = b.clone();
        for x in c.iter_mut().skip(1) {
            *x -= b[0];
        }
        folded.push(c);
    }
    column_from_factors(kernel, |mode| folded[mode].clone())
}

fn column_from_factors<F>(kernel: &AdditiveKernel, factor: F) -> Result<McrTensor, KernelError>
where
    F: Fn(usize) -> Vec<f64>,
{
    let grid = kernel.grid().clone();
    let mut out = McrTensor::zeros(grid.clone());
    let mut mini = Vec::new();
    for term in 0..kernel.term_count() {
        let sig = kernel.sigma2()[kernel.term_order(term)];
        if sig == 0.0 {
            continue;
        }
        let factors: Vec<Vec<f64>> = kernel.term_modes(term).map(&factor).collect();
        let refs: Vec<&[f64]> = factors.iter().map(|f| f.as_slice()).collect();
        outer_product(&refs, &mut mini);
        let geom = term_geom(kernel, term);
        scatter_term(kernel, term, &geom, &mini, sig, &mut out);
    }
    apply_l_inplace(grid.as_ref(), out.as_mut_slice());
    Ok(out)
}

/// Result of a diagonal computation.
#[derive(Debug)]
pub struct DiagonalResult {
    pub diagonal: McrTensor,
    /// True when a near-zero reference base value forced the direct
    /// per-element evaluation path.
    pub used_fallback: bool,
}

/// Exact diagonal of `K`.
///
/// The fast path groups kernel terms by their intersection with each grid
/// combination and back-substitutes a small triangular system per
/// combination; it divides by the per-mode reference values `K[0,0]`. When
/// any of those is near zero the direct per-element evaluation (which never
/// divides) is used instead and flagged.
pub fn kernel_diagonal(kernel: &AdditiveKernel) -> DiagonalResult {
    let grid = kernel.grid().clone();
    let dims = grid.dims();
    let mut degenerate = false;
    for mode in 0..dims {
        let base = kernel.base(mode);
        let n = base.size();
        let max_diag = (0..n).map(|j| base.k(j, j).abs()).fold(0.0f64, f64::max);
        if base.k(0, 0).abs() <= 1e-12 * max_diag {
            degenerate = true;
            break;
        }
    }
    if degenerate {
        return DiagonalResult {
            diagonal: diagonal_direct(kernel),
            used_fallback: true,
        };
    }

    // Per-mode ratios K[a,a] / K[0,0] over displaced indices.
    let ratios: Vec<Vec<f64>> = (0..dims)
        .map(|mode| {
            let base = kernel.base(mode);
            let k00 = base.k(0, 0);
            (1..base.size()).map(|j| base.k(j, j) / k00).collect()
        })
        .collect();

    // Y per grid combination: sum of products over kernel terms containing it.
    let mcr = grid.mcr();
    let mut y = vec![0.0f64; mcr.len()];
    for term in 0..kernel.term_count() {
        let mut p = kernel.sigma2()[kernel.term_order(term)];
        for mode in kernel.term_modes(term) {
            p *= kernel.base(mode).k(0, 0);
        }
        for &sub_id in kernel.term_subsets(term) {
            y[sub_id as usize] += p;
        }
    }

    let mut diag = McrTensor::zeros(grid.clone());
    for (id, mc) in mcr.iter().enumerate() {
        let info = grid.info(id);
        if info.size == 0 {
            continue;
        }
        let k = mc.order();
        let modes: Vec<usize> = mc.modes().collect();
        // X over subset masks: start from Y, subtract supersets descending.
        let mut x = vec![0.0f64; 1 << k];
        for (mask, slot) in x.iter_mut().enumerate() {
            let sub = subset_combination(&modes, mask, grid.dims());
            *slot = y[mcr.id_of(&sub).expect("grid range is subset closed")];
        }
        for mask in (1..(1usize << k)).rev() {
            let xm = x[mask];
            if xm == 0.0 {
                continue;
            }
            let mut sub = (mask - 1) & mask;
            loop {
                x[sub] -= xm;
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & mask;
            }
        }
        // diag[(mc, a)] = sum_mask X[mask] * prod_{axis in mask} ratio[a_axis].
        let extents = info.extents.clone();
        let dst = diag.subtensor_mut(id);
        for (mask, &coeff) in x.iter().enumerate() {
            if coeff == 0.0 {
                continue;
            }
            accumulate_separable(dst, &extents, |axis| {
                if mask >> axis & 1 == 1 {
                    Some(&ratios[modes[axis]])
                } else {
                    None
                }
            }, coeff);
        }
    }
    DiagonalResult {
        diagonal: diag,
        used_fallback: false,
    }
}

fn subset_combination(modes: &[usize], mask: usize, dims: usize) -> ModeCombination {
    let picked: Vec<usize> = modes
        .iter()
        .enumerate()
        .filter(|(i, _)| mask >> i & 1 == 1)
        .map(|(_, &m)| m)
        .collect();
    ModeCombination::new(&picked, dims).expect("subset of a valid combination")
}

/// `dst[a] += coeff * prod_axis w_axis[a_axis]` where `w_axis` is either a
/// per-axis weight vector or implicit ones.
fn accumulate_separable<'a, W>(dst: &mut [f64], extents: &[usize], weight: W, coeff: f64)
where
    W: Fn(usize) -> Option<&'a Vec<f64>>,
{
    let k = extents.len();
    if k == 0 {
        dst[0] += coeff;
        return;
    }
    let mut odo = vec![0usize; k];
    let mut partial = vec![coeff; k + 1];
    for axis in 0..k {
        partial[axis + 1] = partial[axis] * weight(axis).map_or(1.0, |w| w[0]);
    }
    for d in dst.iter_mut() {
        *d += partial[k];
        // Advance odometer and refresh partial products from the changed axis.
        let mut axis = k;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            odo[axis] += 1;
            if odo[axis] < extents[axis] {
                break;
            }
            odo[axis] = 0;
        }
        for ax in axis..k {
            partial[ax + 1] = partial[ax] * weight(ax).map_or(1.0, |w| w[odo[ax]]);
        }
    }
}

/// Direct per-element diagonal: never divides by reference values.
fn diagonal_direct(kernel: &AdditiveKernel) -> McrTensor {
    let grid = kernel.grid().clone();
    let mcr = grid.mcr();
    let mut diag = McrTensor::zeros(grid.clone());
    for term in 0..kernel.term_count() {
        let sig = kernel.sigma2()[kernel.term_order(term)];
        if sig == 0.0 {
            continue;
        }
        let term_modes: Vec<usize> = kernel.term_modes(term).collect();
        for (id, mc) in mcr.iter().enumerate() {
            let info = grid.info(id);
            if info.size == 0 {
                continue;
            }
            // Constant part: modes of the term not displaced by this point.
            let mut constant = sig;
            for &m in &term_modes {
                if !mc.contains(m) {
                    constant *= kernel.base(m).k(0, 0);
                }
            }
            if constant == 0.0 {
                continue;
            }
            let modes: Vec<usize> = mc.modes().collect();
            let diags: Vec<Vec<f64>> = modes
                .iter()
                .map(|&m| {
                    let base = kernel.base(m);
                    (1..base.size()).map(|j| base.k(j, j)).collect()
                })
                .collect();
            let extents = info.extents.clone();
            let in_term: Vec<bool> = modes.iter().map(|m| term_modes.contains(m)).collect();
            let dst = diag.subtensor_mut(id);
            accumulate_separable(dst, &extents, |axis| {
                if in_term[axis] {
                    Some(&diags[axis])
                } else {
                    None
                }
            }, constant);
        }
    }
    diag
}

/// `K**` for a test point: the additive kernel evaluated at `(x*, x*)` with
/// centering applied consistently.
pub fn test_test_value(kernel: &AdditiveKernel, x_star: &[f64]) -> Result<f64, KernelError> {
    let dims = kernel.grid().dims();
    if x_star.len() != dims {
        return Err(KernelError::InvalidArgument(format!(
            "expected {dims} coordinates, got {}",
            x_star.len()
        )));
    }
    let per_mode: Vec<f64> = (0..dims)
        .map(|mode| kernel.cross_test_value(mode, x_star[mode]))
        .collect();
    let mut total = 0.0;
    for term in 0..kernel.term_count() {
        let mut p = kernel.sigma2()[kernel.term_order(term)];
        for mode in kernel.term_modes(term) {
            p *= per_mode[mode];
        }
        total += p;
    }
    Ok(total)
}


#[cfg(test)]
mod tests;
