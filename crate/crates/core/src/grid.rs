//! Mode combinations, incomplete-grid index sets, canonical ordering,
//! grid-point coordinate enumeration, and the subtensor container for
//! vectors over the grid.
//!
//! An incomplete grid is a union of low-dimensional subgrids ("cuts"), each
//! anchored at a common reference point and labelled by the sorted set of
//! modes it displaces (its mode combination). The set of mode combinations
//! (the MCR) must be closed under taking subsets; this hierarchy is what
//! makes the index set downward closed and the fast contractions valid.
//!
//! Canonical element order, used everywhere including file formats and pivot
//! indices: mode combinations ascending by (order, lexicographic mode list),
//! the empty combination first; within a combination, row-major over the
//! displaced indices with modes ascending.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Errors from grid construction and indexing.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("grid size overflows 64-bit arithmetic ({0})")]
    Overflow(String),
    #[error("mode combination range is not closed under subsets: {0}")]
    NotCuts(CutsViolation),
}

/// One missing-subset witness from a hierarchy check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CutsViolation {
    /// The member whose subset is missing (0-based modes).
    pub mc: Vec<usize>,
    /// A subset of `mc` that is not in the range (0-based modes).
    pub missing: Vec<usize>,
}

impl fmt::Display for CutsViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} present but subset {} absent",
            display_modes(&self.mc),
            display_modes(&self.missing)
        )
    }
}

fn display_modes(modes: &[usize]) -> String {
    // 1-based in human-facing output.
    let inner: Vec<String> = modes.iter().map(|m| (m + 1).to_string()).collect();
    format!("({})", inner.join(","))
}

/// A sorted set of displaced modes labelling one subgrid/subtensor.
///
/// Modes are 0-based internally; `Display` shows them 1-based. The empty
/// combination denotes the reference point.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModeCombination {
    modes: Vec<u16>,
}

impl ModeCombination {
    /// The empty combination (reference point).
    pub fn empty() -> Self {
        ModeCombination { modes: Vec::new() }
    }

    /// Builds from 0-based mode indices; must be strictly ascending and < dims.
    pub fn new(modes: &[usize], dims: usize) -> Result<Self, GridError> {
        if modes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GridError::InvalidArgument(format!(
                "modes must be strictly ascending, got {modes:?}"
            )));
        }
        if let Some(&m) = modes.last() {
            if m >= dims {
                return Err(GridError::InvalidArgument(format!(
                    "mode {m} out of range for {dims} dims"
                )));
            }
        }
        Ok(ModeCombination {
            modes: modes.iter().map(|&m| m as u16).collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// 0-based modes, ascending.
    pub fn modes(&self) -> impl Iterator<Item = usize> + '_ {
        self.modes.iter().map(|&m| m as usize)
    }

    pub fn contains(&self, mode: usize) -> bool {
        self.modes.binary_search(&(mode as u16)).is_ok()
    }

    pub fn is_subset_of(&self, other: &ModeCombination) -> bool {
        self.modes().all(|m| other.contains(m))
    }

    /// All subsets, including the empty set and self.
    pub fn subsets(&self) -> impl Iterator<Item = ModeCombination> + '_ {
        let k = self.modes.len();
        (0u32..(1 << k)).map(move |mask| {
            let modes = self
                .modes
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, &m)| m)
                .collect();
            ModeCombination { modes }
        })
    }

    /// The combination with `mode` removed (must be present).
    pub fn without(&self, mode: usize) -> ModeCombination {
        let modes = self
            .modes
            .iter()
            .copied()
            .filter(|&m| m as usize != mode)
            .collect();
        ModeCombination { modes }
    }

    /// The combination with `mode` inserted (must be absent).
    pub fn with(&self, mode: usize) -> ModeCombination {
        let mut modes = self.modes.clone();
        let pos = modes.partition_point(|&m| (m as usize) < mode);
        modes.insert(pos, mode as u16);
        ModeCombination { modes }
    }

    /// Canonical order: ascending by (order, lexicographic mode list).
    pub fn canonical_cmp(&self, other: &ModeCombination) -> std::cmp::Ordering {
        self.modes
            .len()
            .cmp(&other.modes.len())
            .then_with(|| self.modes.cmp(&other.modes))
    }
}

impl fmt::Display for ModeCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner: Vec<String> = self.modes.iter().map(|m| (m + 1).to_string()).collect();
        write!(f, "({})", inner.join(","))
    }
}

/// An ordered, subset-closed set of mode combinations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeCombinationRange {
    dims: usize,
    mcs: Vec<ModeCombination>,
}

/// Checks the hierarchy property on a raw list: every subset of every member
/// must itself be a member. Returns a witness for the first violation found
/// (scanning members in the given order), or `None` if the list is closed.
pub fn validate_cuts(mcs: &[ModeCombination]) -> Option<CutsViolation> {
    for mc in mcs {
        for sub in mc.subsets() {
            if !mcs.contains(&sub) {
                return Some(CutsViolation {
                    mc: mc.modes().collect(),
                    missing: sub.modes().collect(),
                });
            }
        }
    }
    None
}

impl ModeCombinationRange {
    /// Builds a validated range from arbitrary combinations: sorts them
    /// canonically, rejects duplicates and subset-closure violations.
    pub fn new(dims: usize, mut mcs: Vec<ModeCombination>) -> Result<Self, GridError> {
        if dims == 0 {
            return Err(GridError::InvalidArgument("dims must be positive".into()));
        }
        for mc in &mcs {
            if let Some(m) = mc.modes().find(|&m| m >= dims) {
                return Err(GridError::InvalidArgument(format!(
                    "mode {m} out of range for {dims} dims"
                )));
            }
        }
        mcs.sort_by(|a, b| a.canonical_cmp(b));
        if mcs.windows(2).any(|w| w[0] == w[1]) {
            return Err(GridError::InvalidArgument(
                "duplicate mode combinations".into(),
            ));
        }
        let range = ModeCombinationRange { dims, mcs };
        // Closure check against the sorted list (binary search per subset).
        for mc in &range.mcs {
            for sub in mc.subsets() {
                if range.id_of(&sub).is_none() {
                    return Err(GridError::NotCuts(CutsViolation {
                        mc: mc.modes().collect(),
                        missing: sub.modes().collect(),
                    }));
                }
            }
        }
        Ok(range)
    }

    /// All combinations of order 0, 1, ..., `alpha` over `dims` modes.
    pub fn simple(dims: usize, alpha: usize) -> Result<Self, GridError> {
        if dims == 0 {
            return Err(GridError::InvalidArgument("dims must be positive".into()));
        }
        if alpha > dims {
            return Err(GridError::InvalidArgument(format!(
                "cut level {alpha} exceeds {dims} dims"
            )));
        }
        let mut mcs = vec![ModeCombination::empty()];
        // Enumerate order-k combinations in lexicographic order per order.
        for k in 1..=alpha {
            let mut comb: Vec<u16> = (0..k as u16).collect();
            loop {
                mcs.push(ModeCombination {
                    modes: comb.clone(),
                });
                // Next lexicographic k-combination of {0..dims}.
                let mut i = k;
                loop {
                    if i == 0 {
                        break;
                    }
                    i -= 1;
                    if (comb[i] as usize) < dims - (k - i) {
                        comb[i] += 1;
                        for j in i + 1..k {
                            comb[j] = comb[j - 1] + 1;
                        }
                        break;
                    }
                    if i == 0 {
                        comb.clear();
                        break;
                    }
                }
                if comb.is_empty() {
                    break;
                }
            }
        }
        Ok(ModeCombinationRange { dims, mcs })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.mcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mcs.is_empty()
    }

    pub fn mc(&self, id: usize) -> &ModeCombination {
        &self.mcs[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModeCombination> {
        self.mcs.iter()
    }

    /// Position of `mc` in canonical order, if present.
    pub fn id_of(&self, mc: &ModeCombination) -> Option<usize> {
        self.mcs.binary_search_by(|probe| probe.canonical_cmp(mc)).ok()
    }

    /// Maximum order over all members.
    pub fn max_order(&self) -> usize {
        self.mcs.iter().map(|mc| mc.order()).max().unwrap_or(0)
    }

    /// True if every member of `self` is a member of `other`.
    pub fn is_subrange_of(&self, other: &ModeCombinationRange) -> bool {
        self.dims == other.dims && self.mcs.iter().all(|mc| other.id_of(mc).is_some())
    }
}

/// Exact number of grid points for a range with per-mode 1D sizes `n`.
///
/// Checked 64-bit arithmetic; sizes well beyond `2^32` are legitimate for
/// counting even when no vector of that length could be held in memory.
pub fn grid_size(mcr: &ModeCombinationRange, n: &[usize]) -> Result<u64, GridError> {
    if n.len() != mcr.dims() {
        return Err(GridError::InvalidArgument(format!(
            "expected {} per-mode sizes, got {}",
            mcr.dims(),
            n.len()
        )));
    }
    if n.contains(&0) {
        return Err(GridError::InvalidArgument(
            "per-mode sizes must be at least 1".into(),
        ));
    }
    let mut total: u64 = 0;
    for mc in mcr.iter() {
        let mut size: u64 = 1;
        for m in mc.modes() {
            size = size
                .checked_mul((n[m] - 1) as u64)
                .ok_or_else(|| GridError::Overflow(format!("subtensor of {mc}")))?;
        }
        total = total
            .checked_add(size)
            .ok_or_else(|| GridError::Overflow("total point count".into()))?;
    }
    Ok(total)
}

/// Per-mode 1D grids. Index 0 of every mode is the reference coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GridShape {
    grids_1d: Vec<Vec<f64>>,
}

impl GridShape {
    pub fn new(grids_1d: Vec<Vec<f64>>) -> Result<Self, GridError> {
        if grids_1d.is_empty() {
            return Err(GridError::InvalidArgument("no modes".into()));
        }
        for (m, g) in grids_1d.iter().enumerate() {
            if g.is_empty() {
                return Err(GridError::InvalidArgument(format!(
                    "mode {} has an empty 1D grid",
                    m + 1
                )));
            }
            for (i, &x) in g.iter().enumerate() {
                if !x.is_finite() {
                    return Err(GridError::InvalidArgument(format!(
                        "mode {} coordinate {i} is not finite",
                        m + 1
                    )));
                }
                if g[..i].contains(&x) {
                    return Err(GridError::InvalidArgument(format!(
                        "mode {} has duplicate coordinate {x}",
                        m + 1
                    )));
                }
            }
        }
        Ok(GridShape { grids_1d })
    }

    /// Uniform shape: every mode carries the same 1D grid.
    pub fn uniform(dims: usize, grid_1d: Vec<f64>) -> Result<Self, GridError> {
        GridShape::new(vec![grid_1d; dims])
    }

    pub fn dims(&self) -> usize {
        self.grids_1d.len()
    }

    /// Per-mode 1D grid sizes.
    pub fn sizes(&self) -> Vec<usize> {
        self.grids_1d.iter().map(|g| g.len()).collect()
    }

    pub fn grid_1d(&self, mode: usize) -> &[f64] {
        &self.grids_1d[mode]
    }

    pub fn reference(&self, mode: usize) -> f64 {
        self.grids_1d[mode][0]
    }

    /// Applies an affine map `x -> (x - shift) / scale` per mode.
    pub fn transformed(&self, shift: &[f64], scale: &[f64]) -> GridShape {
        let grids_1d = self
            .grids_1d
            .iter()
            .enumerate()
            .map(|(m, g)| g.iter().map(|&x| (x - shift[m]) / scale[m]).collect())
            .collect();
        GridShape { grids_1d }
    }
}

/// Per-combination layout record.
#[derive(Debug, Clone)]
pub(crate) struct SubtensorInfo {
    /// Per-axis extents `n_m - 1`, modes ascending.
    pub extents: Vec<usize>,
    /// Element count (product of extents).
    pub size: usize,
    /// Start offset in the canonical flat ordering.
    pub offset: usize,
}

/// One down edge: removing `axis` (carrying `mode`) from combination `mc`
/// lands on combination `child`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ModeEdge {
    pub mc: u32,
    pub child: u32,
    pub axis: u8,
}

/// A cut-based incomplete grid: shape, hierarchy and canonical flat layout.
///
/// Immutable after construction and cheap to share via [`Arc`].
#[derive(Debug)]
pub struct IncompleteGrid {
    shape: GridShape,
    mcr: ModeCombinationRange,
    infos: Vec<SubtensorInfo>,
    /// Down edges grouped by mode, each group sorted by combination id.
    edges_by_mode: Vec<Vec<ModeEdge>>,
    total: u64,
}

impl IncompleteGrid {
    pub fn new(shape: GridShape, mcr: ModeCombinationRange) -> Result<Arc<Self>, GridError> {
        if shape.dims() != mcr.dims() {
            return Err(GridError::InvalidArgument(format!(
                "shape has {} dims but range has {}",
                shape.dims(),
                mcr.dims()
            )));
        }
        let n = shape.sizes();
        let total = grid_size(&mcr, &n)?;
        if total > usize::MAX as u64 {
            return Err(GridError::Overflow(
                "grid too large for in-memory vectors".into(),
            ));
        }
        let mut infos = Vec::with_capacity(mcr.len());
        let mut offset = 0usize;
        for mc in mcr.iter() {
            let extents: Vec<usize> = mc.modes().map(|m| n[m] - 1).collect();
            let size = extents.iter().product();
            infos.push(SubtensorInfo {
                extents,
                size,
                offset,
            });
            offset += size;
        }
        let mut edges_by_mode: Vec<Vec<ModeEdge>> = vec![Vec::new(); shape.dims()];
        for (id, mc) in mcr.iter().enumerate() {
            for (axis, m) in mc.modes().enumerate() {
                let child = mcr
                    .id_of(&mc.without(m))
                    .expect("subset closure guarantees the child combination");
                edges_by_mode[m].push(ModeEdge {
                    mc: id as u32,
                    child: child as u32,
                    axis: axis as u8,
                });
            }
        }
        Ok(Arc::new(IncompleteGrid {
            shape,
            mcr,
            infos,
            edges_by_mode,
            total,
        }))
    }

    /// Convenience constructor: simple range of cut level `alpha` over a
    /// uniform 1D grid.
    pub fn simple(dims: usize, alpha: usize, grid_1d: Vec<f64>) -> Result<Arc<Self>, GridError> {
        IncompleteGrid::new(
            GridShape::uniform(dims, grid_1d)?,
            ModeCombinationRange::simple(dims, alpha)?,
        )
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn mcr(&self) -> &ModeCombinationRange {
        &self.mcr
    }

    pub fn dims(&self) -> usize {
        self.shape.dims()
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.total as usize
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub(crate) fn info(&self, mc_id: usize) -> &SubtensorInfo {
        &self.infos[mc_id]
    }

    pub(crate) fn edges_for_mode(&self, mode: usize) -> &[ModeEdge] {
        &self.edges_by_mode[mode]
    }

    /// Subtensor start offset in the canonical flat ordering.
    pub fn offset(&self, mc_id: usize) -> usize {
        self.infos[mc_id].offset
    }

    /// Subtensor element count.
    pub fn subtensor_len(&self, mc_id: usize) -> usize {
        self.infos[mc_id].size
    }

    /// Canonical flat index of the point `(mc, a)` where `a` holds the
    /// displaced (nonzero) 1D indices for the modes of `mc`, ascending.
    pub fn flat_index(&self, mc: &ModeCombination, a: &[usize]) -> Result<u64, GridError> {
        let id = self
            .mcr
            .id_of(mc)
            .ok_or_else(|| GridError::InvalidArgument(format!("{mc} not in range")))?;
        let info = &self.infos[id];
        if a.len() != info.extents.len() {
            return Err(GridError::InvalidArgument(format!(
                "expected {} indices for {mc}, got {}",
                info.extents.len(),
                a.len()
            )));
        }
        let mut within = 0usize;
        for (axis, (&ai, &ext)) in a.iter().zip(&info.extents).enumerate() {
            if ai == 0 || ai > ext {
                return Err(GridError::InvalidArgument(format!(
                    "index {ai} out of range [1, {}] on axis {axis} of {mc}",
                    ext
                )));
            }
            within = within * ext + (ai - 1);
        }
        Ok((info.offset + within) as u64)
    }

    /// Inverse of [`flat_index`](Self::flat_index): recovers `(mc id, a)`.
    pub fn locate(&self, flat: u64) -> Result<(usize, Vec<usize>), GridError> {
        if flat >= self.total {
            return Err(GridError::InvalidArgument(format!(
                "flat index {flat} out of range [0, {})",
                self.total
            )));
        }
        let flat = flat as usize;
        // Last combination whose offset is <= flat; empty subtensors share
        // offsets with their successor, so skip zero-sized ones.
        let mut id = self
            .infos
            .partition_point(|info| info.offset <= flat)
            .saturating_sub(1);
        while self.infos[id].size == 0 {
            id -= 1;
        }
        let info = &self.infos[id];
        let mut within = flat - info.offset;
        let mut a = vec![0usize; info.extents.len()];
        for (axis, &ext) in info.extents.iter().enumerate().rev() {
            a[axis] = within % ext + 1;
            within /= ext;
        }
        Ok((id, a))
    }

    /// Streams `(flat index, coordinate vector)` in canonical order.
    ///
    /// Undisplaced modes carry the reference coordinate.
    pub fn coordinates(&self) -> impl Iterator<Item = (u64, Vec<f64>)> + '_ {
        let reference: Vec<f64> = (0..self.dims()).map(|m| self.shape.reference(m)).collect();
        self.mcr
            .iter()
            .enumerate()
            .flat_map(move |(id, mc)| {
                let info = &self.infos[id];
                let modes: Vec<usize> = mc.modes().collect();
                let extents = info.extents.clone();
                let offset = info.offset;
                let reference = reference.clone();
                (0..info.size).map(move |within| {
                    let mut coord = reference.clone();
                    let mut rem = within;
                    for axis in (0..extents.len()).rev() {
                        let ai = rem % extents[axis] + 1;
                        rem /= extents[axis];
                        coord[modes[axis]] = self.shape.grid_1d(modes[axis])[ai];
                    }
                    ((offset + within) as u64, coord)
                })
            })
    }

    /// How many grid points carry each 1D index of `mode`. Entry 0 counts the
    /// reference index; all displaced indices share one count.
    pub fn mode_value_counts(&self, mode: usize) -> Vec<f64> {
        let n_m = self.shape.grid_1d(mode).len();
        let mut displaced_total = 0u64; // points with this mode displaced
        for edge in &self.edges_by_mode[mode] {
            displaced_total += self.infos[edge.mc as usize].size as u64;
        }
        let mut w = vec![0.0; n_m];
        w[0] = (self.total - displaced_total) as f64;
        if n_m > 1 {
            let per_value = displaced_total / (n_m as u64 - 1);
            for slot in w.iter_mut().skip(1) {
                *slot = per_value as f64;
            }
        }
        w
    }
}

/// A vector over an incomplete grid, stored as one dense subtensor per mode
/// combination in canonical order.
///
/// The flat serialization order coincides with the storage order; cloning is
/// a deep copy of the data and a shared handle on the grid.
#[derive(Debug, Clone)]
pub struct McrTensor {
    grid: Arc<IncompleteGrid>,
    data: Vec<f64>,
}

impl McrTensor {
    pub fn zeros(grid: Arc<IncompleteGrid>) -> Self {
        let len = grid.len();
        McrTensor {
            grid,
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(grid: Arc<IncompleteGrid>, data: Vec<f64>) -> Result<Self, GridError> {
        if data.len() != grid.len() {
            return Err(GridError::InvalidArgument(format!(
                "expected {} elements, got {}",
                grid.len(),
                data.len()
            )));
        }
        Ok(McrTensor { grid, data })
    }

    /// A standard basis vector.
    pub fn basis(grid: Arc<IncompleteGrid>, flat: u64) -> Result<Self, GridError> {
        if flat >= grid.len() as u64 {
            return Err(GridError::InvalidArgument(format!(
                "flat index {flat} out of range"
            )));
        }
        let mut t = McrTensor::zeros(grid);
        t.data[flat as usize] = 1.0;
        Ok(t)
    }

    pub fn grid(&self) -> &Arc<IncompleteGrid> {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn subtensor(&self, mc_id: usize) -> &[f64] {
        let info = self.grid.info(mc_id);
        &self.data[info.offset..info.offset + info.size]
    }

    pub fn subtensor_mut(&mut self, mc_id: usize) -> &mut [f64] {
        let info = self.grid.info(mc_id);
        &mut self.data[info.offset..info.offset + info.size]
    }

    /// The reference-point entry (first element).
    pub fn reference(&self) -> f64 {
        self.data[0]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn dot(&self, other: &McrTensor) -> f64 {
        debug_assert!(Arc::ptr_eq(&self.grid, &other.grid) || self.len() == other.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &McrTensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn same_grid(&self, other: &McrTensor) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid)
    }
}
