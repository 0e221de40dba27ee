//! Occupancy grids built from labeled point clouds.
//!
//! Voxels are linearized as `(k * Y + j) * X + i` with `i` fastest.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::geometry::{LabeledCloud, Point3};
use crate::par::{self, Execution};

/// Label of an unoccupied or unlabeled voxel.
pub const FREE: u8 = 255;

/// Voxels supported by fewer points than this are dropped by default.
pub const DEFAULT_MIN_POINTS: u32 = 10;

pub const DEFAULT_VOXEL_SIZE: f64 = 0.5;

pub const DEFAULT_DIMS: [usize; 3] = [256, 256, 32];

#[derive(Debug, Error, PartialEq)]
pub enum VoxelError {
    #[error("grid dims must all be at least 1, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("voxel size must be positive and finite, got {0}")]
    BadVoxelSize(f64),
    #[error("origin must be finite")]
    BadOrigin,
    #[error("grid specs differ")]
    SpecMismatch,
}

/// Grid extent: voxel counts, edge length and the minimum corner of voxel (0,0,0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
}

impl Default for GridSpec {
    /// 256 x 256 x 32 voxels of 0.5 m, centered on the camera in x and y
    /// and starting at the camera plane along z.
    fn default() -> Self {
        Self::ego_centered(DEFAULT_DIMS, DEFAULT_VOXEL_SIZE)
    }
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: f64, origin: [f64; 3]) -> Result<Self, VoxelError> {
        let spec = Self {
            dims,
            voxel_size,
            origin,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Grid centered on the camera in x and y, with z running forward from 0.
    pub fn ego_centered(dims: [usize; 3], voxel_size: f64) -> Self {
        Self {
            dims,
            voxel_size,
            origin: [
                -(dims[0] as f64) * voxel_size / 2.0,
                -(dims[1] as f64) * voxel_size / 2.0,
                0.0,
            ],
        }
    }

    pub fn validate(&self) -> Result<(), VoxelError> {
        if self.dims.contains(&0) {
            return Err(VoxelError::EmptyDims(self.dims));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(VoxelError::BadVoxelSize(self.voxel_size));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(VoxelError::BadOrigin);
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn linear_index(&self, [i, j, k]: [usize; 3]) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn unlinearize(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }
}

/// Voxel containing `p`, or `None` outside the grid. Faces belong to the
/// voxel above them.
pub fn voxel_index(p: &Point3, spec: &GridSpec) -> Option<[usize; 3]> {
    let coords = [p.x, p.y, p.z];
    let mut out = [0usize; 3];
    for axis in 0..3 {
        let cell = ((coords[axis] - spec.origin[axis]) / spec.voxel_size).floor();
        // NaN fails both comparisons.
        if !(cell >= 0.0 && cell < spec.dims[axis] as f64) {
            return None;
        }
        out[axis] = cell as usize;
    }
    Some(out)
}

/// Per-voxel point counts plus class histograms of the labeled points.
///
/// Histograms are stored sparsely, keyed by linear voxel index.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub counts: Vec<u32>,
    pub histograms: BTreeMap<usize, BTreeMap<u8, u32>>,
}

impl OccupancyGrid {
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            spec,
            counts: vec![0; spec.voxel_count()],
            histograms: BTreeMap::new(),
        }
    }

    pub fn histogram(&self, idx: usize) -> Option<&BTreeMap<u8, u32>> {
        self.histograms.get(&idx)
    }

    pub fn occupied(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn total_points(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    fn add_point(&mut self, idx: usize, label: Option<u8>) {
        self.counts[idx] += 1;
        if let Some(l) = label {
            *self.histograms.entry(idx).or_default().entry(l).or_insert(0) += 1;
        }
    }
}

/// Result of [`voxelize`]: the grid and the number of points outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Voxelized {
    pub grid: OccupancyGrid,
    pub dropped: usize,
}

/// Points per shard when voxelizing in parallel.
const SHARD_POINTS: usize = 16 * 1024;

pub fn voxelize(cloud: &LabeledCloud, spec: &GridSpec) -> Voxelized {
    voxelize_with(cloud, spec, Execution::default())
}

/// Accumulate a cloud into a grid. The parallel path bins shards into sparse
/// partial grids and merges them; integer addition makes the result
/// independent of sharding.
pub fn voxelize_with(cloud: &LabeledCloud, spec: &GridSpec, exec: Execution) -> Voxelized {
    let mut grid = OccupancyGrid::empty(*spec);
    if !exec.is_parallel() || cloud.len() <= SHARD_POINTS {
        let mut dropped = 0;
        for p in &cloud.points {
            match voxel_index(p, spec) {
                Some(ijk) => grid.add_point(spec.linear_index(ijk), p.label),
                None => dropped += 1,
            }
        }
        return Voxelized { grid, dropped };
    }

    type Partial = (BTreeMap<usize, (u32, BTreeMap<u8, u32>)>, usize);
    let partials: Vec<Partial> = par::map_chunks(exec, &cloud.points, SHARD_POINTS, |shard| {
        let mut cells: BTreeMap<usize, (u32, BTreeMap<u8, u32>)> = BTreeMap::new();
        let mut dropped = 0;
        for p in shard {
            match voxel_index(p, spec) {
                Some(ijk) => {
                    let cell = cells.entry(spec.linear_index(ijk)).or_default();
                    cell.0 += 1;
                    if let Some(l) = p.label {
                        *cell.1.entry(l).or_insert(0) += 1;
                    }
                }
                None => dropped += 1,
            }
        }
        (cells, dropped)
    });

    let mut dropped = 0;
    for (cells, d) in partials {
        dropped += d;
        for (idx, (count, hist)) in cells {
            grid.counts[idx] += count;
            if !hist.is_empty() {
                let into = grid.histograms.entry(idx).or_default();
                for (label, n) in hist {
                    *into.entry(label).or_insert(0) += n;
                }
            }
        }
    }
    Voxelized { grid, dropped }
}

/// Zero every voxel supported by fewer than `min_points` points.
pub fn voting_filter(grid: &OccupancyGrid, min_points: u32) -> OccupancyGrid {
    let mut out = grid.clone();
    for (idx, c) in out.counts.iter_mut().enumerate() {
        if *c < min_points && *c > 0 {
            *c = 0;
            out.histograms.remove(&idx);
        }
    }
    out
}

/// Per-voxel class labels with [`FREE`] for empty or unlabeled voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    pub spec: GridSpec,
    pub labels: Vec<u8>,
}

impl SemanticGrid {
    pub fn label_at(&self, ijk: [usize; 3]) -> u8 {
        self.labels[self.spec.linear_index(ijk)]
    }

    pub fn count_of(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Majority class of a histogram, lowest id on ties.
pub fn majority_label(hist: &BTreeMap<u8, u32>) -> Option<u8> {
    // BTreeMap iterates ascending, so keeping the first maximum breaks ties low.
    let mut best: Option<(u8, u32)> = None;
    for (&label, &n) in hist {
        if n > 0 && best.is_none_or(|(_, m)| n > m) {
            best = Some((label, n));
        }
    }
    best.map(|(l, _)| l)
}

pub fn resolve_semantics(grid: &OccupancyGrid) -> SemanticGrid {
    let mut labels = vec![FREE; grid.spec.voxel_count()];
    for (&idx, hist) in &grid.histograms {
        if grid.counts[idx] == 0 {
            continue;
        }
        if let Some(l) = majority_label(hist) {
            labels[idx] = l;
        }
    }
    SemanticGrid {
        spec: grid.spec,
        labels,
    }
}

/// IoU of the voxels carrying `class` in two grids; 1 when neither has any.
pub fn grid_iou(a: &SemanticGrid, b: &SemanticGrid, class: u8) -> Result<f64, VoxelError> {
    if a.spec != b.spec {
        return Err(VoxelError::SpecMismatch);
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        let (ia, ib) = (x == class, y == class);
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> GridSpec {
        GridSpec::new([4, 4, 4], 0.5, [0.0; 3]).unwrap()
    }

    #[test]
    fn index_examples() {
        let s = small();
        assert_eq!(voxel_index(&Point3::new(0.9, 0.2, 0.3), &s), Some([1, 0, 0]));
        assert_eq!(voxel_index(&Point3::new(0.0, 0.0, 0.0), &s), Some([0, 0, 0]));
        assert_eq!(voxel_index(&Point3::new(-0.1, 0.0, 0.0), &s), None);
        assert_eq!(voxel_index(&Point3::new(2.0, 0.0, 0.0), &s), None);
        assert_eq!(voxel_index(&Point3::new(f64::NAN, 0.0, 0.0), &s), None);
    }

    #[test]
    fn linearization_is_i_fastest() {
        let s = GridSpec::new([3, 4, 5], 1.0, [0.0; 3]).unwrap();
        assert_eq!(s.linear_index([1, 0, 0]), 1);
        assert_eq!(s.linear_index([0, 1, 0]), 3);
        assert_eq!(s.linear_index([0, 0, 1]), 12);
        for idx in 0..s.voxel_count() {
            assert_eq!(s.linear_index(s.unlinearize(idx)), idx);
        }
    }

    #[test]
    fn default_spec() {
        let s = GridSpec::default();
        assert_eq!(s.dims, [256, 256, 32]);
        assert_eq!(s.voxel_size, 0.5);
        assert_eq!(s.origin, [-64.0, -64.0, 0.0]);
        assert!(GridSpec::new([0, 1, 1], 1.0, [0.0; 3]).is_err());
        assert!(GridSpec::new([1, 1, 1], 0.0, [0.0; 3]).is_err());
    }

    #[test]
    fn empty_cloud() {
        let v = voxelize(&LabeledCloud::default(), &small());
        assert!(v.grid.counts.iter().all(|&c| c == 0));
        assert!(v.grid.histograms.is_empty());
        assert_eq!(v.dropped, 0);
    }

    #[test]
    fn one_voxel_histogram() {
        let mut points = vec![Point3::labeled(0.1, 0.1, 0.1, 1); 7];
        points.extend(vec![Point3::labeled(0.2, 0.3, 0.4, 2); 5]);
        let v = voxelize(&LabeledCloud { points }, &small());
        assert_eq!(v.grid.counts[0], 12);
        let hist = v.grid.histogram(0).unwrap();
        assert_eq!(hist.get(&1), Some(&7));
        assert_eq!(hist.get(&2), Some(&5));
        assert_eq!(resolve_semantics(&v.grid).labels[0], 1);
    }

    fn random_cloud(seed: u64, n: usize) -> LabeledCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                let mut p = Point3::new(
                    rng.random_range(-0.5..2.5),
                    rng.random_range(-0.5..2.5),
                    rng.random_range(-0.5..2.5),
                );
                let l: u8 = rng.random_range(0..4);
                if l < 3 {
                    p.label = Some(l);
                }
                p
            })
            .collect();
        LabeledCloud { points }
    }

    #[test]
    fn matches_brute_force_loop() {
        let spec = small();
        let cloud = random_cloud(7, 1000);
        let v = voxelize(&cloud, &spec);
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let lo = [i as f64 * 0.5, j as f64 * 0.5, k as f64 * 0.5];
                    let expected = cloud
                        .points
                        .iter()
                        .filter(|p| {
                            let c = [p.x, p.y, p.z];
                            (0..3).all(|a| c[a] >= lo[a] && c[a] < lo[a] + 0.5)
                        })
                        .count() as u32;
                    assert_eq!(v.grid.counts[spec.linear_index([i, j, k])], expected);
                }
            }
        }
    }

    #[test]
    fn sharded_equals_sequential() {
        let spec = small();
        let cloud = random_cloud(11, 100_000);
        let a = voxelize_with(&cloud, &spec, Execution::Sequential);
        let b = voxelize_with(&cloud, &spec, Execution::Parallel);
        assert_eq!(a, b);
    }

    #[test]
    fn voting_boundary() {
        let spec = small();
        let mut points = vec![Point3::labeled(0.1, 0.1, 0.1, 0); 9];
        points.extend(vec![Point3::labeled(1.1, 0.1, 0.1, 0); 10]);
        let v = voxelize(&LabeledCloud { points }, &spec);
        let f = voting_filter(&v.grid, DEFAULT_MIN_POINTS);
        assert_eq!(f.counts[spec.linear_index([0, 0, 0])], 0);
        assert!(f.histogram(spec.linear_index([0, 0, 0])).is_none());
        assert_eq!(f.counts[spec.linear_index([2, 0, 0])], 10);
        assert_eq!(voting_filter(&v.grid, 0), v.grid);
    }

    #[test]
    fn resolution_rules() {
        let spec = GridSpec::new([3, 1, 1], 1.0, [0.0; 3]).unwrap();
        let mut g = OccupancyGrid::empty(spec);
        g.counts = vec![10, 10, 3];
        g.histograms.insert(0, BTreeMap::from([(4, 7), (9, 5)]));
        g.histograms.insert(1, BTreeMap::from([(4, 5), (2, 5)]));
        let s = resolve_semantics(&g);
        assert_eq!(s.labels, vec![4, 2, FREE]);
        assert_eq!(g.counts[2], 3);
    }

    #[test]
    fn iou_examples() {
        let spec = GridSpec::new([4, 1, 1], 1.0, [0.0; 3]).unwrap();
        let a = SemanticGrid {
            spec,
            labels: vec![1, 1, FREE, FREE],
        };
        let b = SemanticGrid {
            spec,
            labels: vec![FREE, 1, 1, FREE],
        };
        assert_eq!(grid_iou(&a, &a, 1).unwrap(), 1.0);
        assert!((grid_iou(&a, &b, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(grid_iou(&a, &b, 7).unwrap(), 1.0);
        let other = SemanticGrid {
            spec: GridSpec::new([2, 2, 1], 1.0, [0.0; 3]).unwrap(),
            labels: vec![FREE; 4],
        };
        assert_eq!(grid_iou(&a, &other, 1), Err(VoxelError::SpecMismatch));
    }

    proptest! {
        #[test]
        fn conservation_and_filter_laws(seed in any::<u64>(), n in 0usize..3000, thr in 0u32..20) {
            let spec = small();
            let cloud = random_cloud(seed, n);
            let v = voxelize(&cloud, &spec);
            prop_assert_eq!(v.grid.total_points() as usize + v.dropped, n);
            for (&idx, h) in &v.grid.histograms {
                prop_assert!(h.values().sum::<u32>() <= v.grid.counts[idx]);
            }
            let once = voting_filter(&v.grid, thr);
            prop_assert_eq!(&voting_filter(&once, thr), &once);
            let higher = voting_filter(&v.grid, thr + 1);
            for (a, b) in higher.counts.iter().zip(&once.counts) {
                prop_assert!(a <= b);
            }
            for (idx, &c) in once.counts.iter().enumerate() {
                if c == 0 {
                    prop_assert!(once.histogram(idx).is_none());
                }
            }
        }
    }
}
