//! Region derivation: six horizontal slice vectors of a pedestrian image
//! become four region embeddings (head, upper body, lower body, feet).
//!
//! Counting slices top to bottom as 1..6: head = slices 1–2, upper body =
//! slices 2–3, lower body = slices 4–5, feet = slice 6. Head and upper
//! body deliberately share slice 2 — hair, scarves and similar span both.
//! Paired slices combine by arithmetic mean, which keeps the scale of the
//! inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{matvec_s, Mat64, Scalar, Vec64};

pub const SLICE_COUNT: usize = 6;
pub const REGION_COUNT: usize = 4;

/// Number of vectors an image contributes to cross-attention: the global
/// embedding plus the four regions.
pub const ENTITY_COUNT: usize = REGION_COUNT + 1;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("expected exactly {SLICE_COUNT} slices, got {0}")]
    SliceCount(usize),
    #[error("slice {index} has dimension {got}, expected {expected}")]
    SliceDim {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("projection dimension {proj} does not match slice dimension {slices}")]
    ProjectionDim { proj: usize, slices: usize },
    #[error("row grid must have at least {SLICE_COUNT} rows, got {0}")]
    GridTooSmall(usize),
}

/// Optional per-region linear adjustment applied after the band means.
///
/// Identity-initialized so that an enabled but untrained projection scores
/// exactly like a disabled one; only the toy trainer ever moves it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionProjection {
    params: Option<ProjectionParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub weights: [Mat64; REGION_COUNT],
    pub biases: [Vec64; REGION_COUNT],
}

impl RegionProjection {
    pub fn disabled() -> Self {
        Self { params: None }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            params: Some(ProjectionParams {
                weights: std::array::from_fn(|_| Mat64::identity(dim)),
                biases: std::array::from_fn(|_| Vec64::zeros(dim)),
            }),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.params.is_some()
    }

    pub fn dim(&self) -> Option<usize> {
        self.params.as_ref().map(|p| p.weights[0].rows())
    }

    pub fn params(&self) -> Option<&ProjectionParams> {
        self.params.as_ref()
    }

    pub fn params_mut(&mut self) -> Option<&mut ProjectionParams> {
        self.params.as_mut()
    }
}

/// Band combination before any projection: [head, upper, lower, foot].
pub fn region_bands_s<S: Scalar>(slices: &[Vec<S>]) -> [Vec<S>; REGION_COUNT] {
    assert_eq!(slices.len(), SLICE_COUNT, "exactly six slices required");
    let mean2 = |a: &[S], b: &[S]| -> Vec<S> {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x + y).scale(0.5))
            .collect()
    };
    [
        mean2(&slices[0], &slices[1]),
        mean2(&slices[1], &slices[2]),
        mean2(&slices[3], &slices[4]),
        slices[5].clone(),
    ]
}

/// Derive the four region embeddings from six slices.
pub fn partition(
    slices: &[Vec64],
    proj: &RegionProjection,
) -> Result<[Vec64; REGION_COUNT], PartitionError> {
    if slices.len() != SLICE_COUNT {
        return Err(PartitionError::SliceCount(slices.len()));
    }
    let dim = slices[0].dim();
    for (index, s) in slices.iter().enumerate() {
        if s.dim() != dim {
            return Err(PartitionError::SliceDim {
                index,
                expected: dim,
                got: s.dim(),
            });
        }
    }
    if let Some(proj_dim) = proj.dim() {
        if proj_dim != dim {
            return Err(PartitionError::ProjectionDim {
                proj: proj_dim,
                slices: dim,
            });
        }
    }

    let raw: Vec<Vec<f64>> = slices.iter().map(|s| s.as_slice().to_vec()).collect();
    let bands = region_bands_s(&raw);
    let mut out: Vec<Vec64> = Vec::with_capacity(REGION_COUNT);
    for (r, band) in bands.into_iter().enumerate() {
        let region = match proj.params() {
            Some(p) => {
                let mut y = matvec_s(p.weights[r].as_slice(), dim, dim, &band);
                for (yi, bi) in y.iter_mut().zip(p.biases[r].as_slice()) {
                    *yi += bi;
                }
                y
            }
            None => band,
        };
        out.push(Vec64::new(region).expect("finite inputs produce finite regions"));
    }
    Ok(out.try_into().expect("region count is fixed"))
}

/// Pool an H-row feature grid into the six slice vectors, band `r` covering
/// rows `[floor(r*H/6), floor((r+1)*H/6))`. The bands cover every row and
/// never overlap.
pub fn pool_rows(grid: &[Vec64]) -> Result<Vec<Vec64>, PartitionError> {
    let h = grid.len();
    if h < SLICE_COUNT {
        return Err(PartitionError::GridTooSmall(h));
    }
    let dim = grid[0].dim();
    for (index, row) in grid.iter().enumerate() {
        if row.dim() != dim {
            return Err(PartitionError::SliceDim {
                index,
                expected: dim,
                got: row.dim(),
            });
        }
    }
    let mut out = Vec::with_capacity(SLICE_COUNT);
    for r in 0..SLICE_COUNT {
        let start = r * h / SLICE_COUNT;
        let end = (r + 1) * h / SLICE_COUNT;
        let mut acc = vec![0.0; dim];
        for row in &grid[start..end] {
            for (a, x) in acc.iter_mut().zip(row.as_slice()) {
                *a += x;
            }
        }
        let count = (end - start) as f64;
        for a in &mut acc {
            *a /= count;
        }
        out.push(Vec64::new(acc).expect("finite rows produce finite bands"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn basis(dim: usize, i: usize) -> Vec64 {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Vec64::new(v).unwrap()
    }

    #[test]
    fn equal_slices_give_equal_regions() {
        let v = Vec64::new(vec![0.3, -1.2, 0.8]).unwrap();
        let slices = vec![v.clone(); 6];
        let regions = partition(&slices, &RegionProjection::disabled()).unwrap();
        for r in &regions {
            assert_eq!(r, &v);
        }
    }

    #[test]
    fn standard_basis_slices() {
        let slices: Vec<Vec64> = (0..6).map(|i| basis(6, i)).collect();
        let regions = partition(&slices, &RegionProjection::disabled()).unwrap();
        let expect = |pairs: &[(usize, f64)]| {
            let mut v = vec![0.0; 6];
            for &(i, x) in pairs {
                v[i] = x;
            }
            v
        };
        assert_eq!(regions[0].as_slice(), &expect(&[(0, 0.5), (1, 0.5)])[..]);
        assert_eq!(regions[1].as_slice(), &expect(&[(1, 0.5), (2, 0.5)])[..]);
        assert_eq!(regions[2].as_slice(), &expect(&[(3, 0.5), (4, 0.5)])[..]);
        assert_eq!(regions[3].as_slice(), &expect(&[(5, 1.0)])[..]);
    }

    #[test]
    fn identity_projection_matches_disabled() {
        let slices: Vec<Vec64> = (0..6)
            .map(|i| Vec64::new(vec![i as f64 + 0.5, -(i as f64), 2.0]).unwrap())
            .collect();
        let off = partition(&slices, &RegionProjection::disabled()).unwrap();
        let on = partition(&slices, &RegionProjection::identity(3)).unwrap();
        assert_eq!(off, on);
    }

    #[test]
    fn wrong_slice_count_rejected() {
        let slices: Vec<Vec64> = (0..5).map(|i| basis(4, i % 4)).collect();
        assert!(matches!(
            partition(&slices, &RegionProjection::disabled()),
            Err(PartitionError::SliceCount(5))
        ));
    }

    #[test]
    fn linearity_in_slices() {
        let a: Vec<Vec64> = (0..6)
            .map(|i| Vec64::new(vec![i as f64, 1.0 - i as f64]).unwrap())
            .collect();
        let b: Vec<Vec64> = (0..6)
            .map(|i| Vec64::new(vec![0.5 * i as f64, 2.0]).unwrap())
            .collect();
        let (alpha, beta) = (0.7, -1.3);
        let combo: Vec<Vec64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                Vec64::new(
                    x.as_slice()
                        .iter()
                        .zip(y.as_slice())
                        .map(|(xi, yi)| alpha * xi + beta * yi)
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let proj = RegionProjection::disabled();
        let ra = partition(&a, &proj).unwrap();
        let rb = partition(&b, &proj).unwrap();
        let rc = partition(&combo, &proj).unwrap();
        for r in 0..REGION_COUNT {
            for c in 0..2 {
                let expected = alpha * ra[r].as_slice()[c] + beta * rb[r].as_slice()[c];
                assert_relative_eq!(rc[r].as_slice()[c], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn slice_influence_pattern() {
        // Perturbing slice 2 (index 1) moves head and upper only; slice 1
        // only head; slice 6 only foot.
        let base: Vec<Vec64> = (0..6)
            .map(|i| Vec64::new(vec![i as f64, 2.0 * i as f64]).unwrap())
            .collect();
        let proj = RegionProjection::disabled();
        let r0 = partition(&base, &proj).unwrap();
        let perturb = |idx: usize| {
            let mut s = base.clone();
            let mut data: Vec<f64> = s[idx].as_slice().to_vec();
            data[0] += 1.0;
            s[idx] = Vec64::new(data).unwrap();
            partition(&s, &proj).unwrap()
        };
        let changed = |a: &[Vec64; 4], b: &[Vec64; 4]| -> Vec<bool> {
            a.iter().zip(b.iter()).map(|(x, y)| x != y).collect()
        };
        assert_eq!(changed(&r0, &perturb(1)), vec![true, true, false, false]);
        assert_eq!(changed(&r0, &perturb(0)), vec![true, false, false, false]);
        assert_eq!(changed(&r0, &perturb(5)), vec![false, false, false, true]);
    }

    #[test]
    fn pool_rows_identity_when_h_is_six() {
        let grid: Vec<Vec64> = (0..6).map(|i| basis(3, i % 3)).collect();
        let bands = pool_rows(&grid).unwrap();
        assert_eq!(bands, grid);
    }

    #[test]
    fn pool_rows_h12_pairs() {
        let grid: Vec<Vec64> = (0..12)
            .map(|i| Vec64::new(vec![i as f64]).unwrap())
            .collect();
        let bands = pool_rows(&grid).unwrap();
        let got: Vec<f64> = bands.iter().map(|b| b.as_slice()[0]).collect();
        assert_eq!(got, vec![0.5, 2.5, 4.5, 6.5, 8.5, 10.5]);
    }

    #[test]
    fn pool_rows_h7_band_sizes_follow_floor_rule() {
        // floor(r*7/6) boundaries are 0,1,2,3,4,5,7: the trailing band
        // absorbs the extra row.
        let grid: Vec<Vec64> = (0..7)
            .map(|i| Vec64::new(vec![i as f64]).unwrap())
            .collect();
        let bands = pool_rows(&grid).unwrap();
        let got: Vec<f64> = bands.iter().map(|b| b.as_slice()[0]).collect();
        assert_eq!(got, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.5]);
    }

    #[test]
    fn pool_rows_rejects_small_grids() {
        let grid: Vec<Vec64> = (0..5).map(|_| basis(2, 0)).collect();
        assert!(matches!(
            pool_rows(&grid),
            Err(PartitionError::GridTooSmall(5))
        ));
    }

    #[test]
    fn pool_rows_bands_disjointly_cover_all_rows() {
        for h in 6..=64 {
            let mut covered = vec![0usize; h];
            for r in 0..SLICE_COUNT {
                let start = r * h / SLICE_COUNT;
                let end = (r + 1) * h / SLICE_COUNT;
                assert!(start < end, "empty band {r} at h={h}");
                for item in covered.iter_mut().take(end).skip(start) {
                    *item += 1;
                }
            }
            assert!(covered.iter().all(|&c| c == 1), "cover broken at h={h}");
        }
    }
}
