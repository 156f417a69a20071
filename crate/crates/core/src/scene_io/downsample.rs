use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use super::{normals::pca_normal, PointCloud, SceneError};
use crate::spatial::PointIndex;

const PCA_NEIGHBORS: usize = 8;

#[derive(Default)]
struct Cell {
    count: u64,
    position: Vector3<f64>,
    color: [u64; 3],
    normal: Vector3<f64>,
    normal_count: u64,
}

fn voxel_key(p: &Point3<f64>, voxel_size: f64) -> [i64; 3] {
    [p.x, p.y, p.z].map(|c| (c / voxel_size).floor() as i64)
}

/// Collapses each occupied voxel to one point.
///
/// Output order follows each voxel's first input point. Position is the
/// member centroid, color the channelwise mean rounded half-up, normal the
/// normalized mean of the members' valid normals. Voxels whose normals
/// cancel get a PCA normal from neighboring output points; if that is also
/// degenerate the point is kept with its normal flagged invalid.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud, SceneError> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(SceneError::InvalidArgument(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    if cloud.is_empty() {
        return Err(SceneError::InvalidArgument("cannot downsample an empty cloud".into()));
    }

    let mut slots: HashMap<[i64; 3], usize> = HashMap::new();
    let mut cells: Vec<Cell> = Vec::new();
    for i in 0..cloud.len() {
        let key = voxel_key(&cloud.positions[i], voxel_size);
        let slot = *slots.entry(key).or_insert_with(|| {
            cells.push(Cell::default());
            cells.len() - 1
        });
        let cell = &mut cells[slot];
        cell.count += 1;
        cell.position += cloud.positions[i].coords;
        for (acc, c) in cell.color.iter_mut().zip(cloud.colors[i]) {
            *acc += u64::from(c);
        }
        if cloud.normal_valid[i] {
            cell.normal += cloud.normals[i];
            cell.normal_count += 1;
        }
    }

    let n = cells.len();
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut normal_valid = Vec::with_capacity(n);
    let mut cancelled = Vec::new();
    for (slot, cell) in cells.iter().enumerate() {
        positions.push(Point3::from(cell.position / cell.count as f64));
        // floor(sum / n + 1/2) without floating point
        colors.push(cell.color.map(|s| ((2 * s + cell.count) / (2 * cell.count)) as u8));
        if cell.normal_count == 0 {
            normals.push(Vector3::zeros());
            normal_valid.push(false);
            continue;
        }
        let mean = cell.normal / cell.normal_count as f64;
        let norm = mean.norm();
        if norm < 1e-3 {
            cancelled.push(slot);
            normals.push(Vector3::zeros());
            normal_valid.push(false);
        } else {
            normals.push(mean / norm);
            normal_valid.push(true);
        }
    }

    if !cancelled.is_empty() {
        let index = PointIndex::new(&positions);
        let center = positions.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
        for slot in cancelled {
            let p = positions[slot];
            let nbrs: Vec<Point3<f64>> = index
                .knn(&p, PCA_NEIGHBORS)
                .into_iter()
                .map(|(j, _)| positions[j])
                .collect();
            if let Some(mut nrm) = pca_normal(&nbrs) {
                if nrm.dot(&(p.coords - center)) < 0.0 {
                    nrm = -nrm;
                }
                normals[slot] = nrm;
                normal_valid[slot] = true;
            }
        }
    }

    Ok(PointCloud {
        positions,
        colors,
        normals,
        normal_valid,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cloud(points: Vec<Point3<f64>>) -> PointCloud {
        let n = points.len();
        PointCloud::new(points, vec![[100, 101, 102]; n], Some(vec![Vector3::z(); n])).unwrap()
    }

    #[test]
    fn same_voxel_collapses_to_centroid() {
        let out = voxel_downsample(
            &cloud(vec![Point3::origin(), Point3::new(0.001, 0.0, 0.0)]),
            0.005,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.positions[0], Point3::new(0.0005, 0.0, 0.0));
    }

    #[test]
    fn distinct_voxels_unchanged() {
        let pts = vec![Point3::origin(), Point3::new(0.010, 0.0, 0.0)];
        let out = voxel_downsample(&cloud(pts.clone()), 0.005).unwrap();
        assert_eq!(out.positions, pts);
    }

    #[test]
    fn color_rounds_half_up() {
        let mut c = cloud(vec![Point3::origin(), Point3::new(0.001, 0.0, 0.0)]);
        c.colors = vec![[0, 10, 255], [1, 11, 254]];
        let out = voxel_downsample(&c, 0.005).unwrap();
        assert_eq!(out.colors[0], [1, 11, 255]);
    }

    #[test]
    fn count_matches_hash_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point3<f64>> = (0..10_000)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let expected: HashSet<(i64, i64, i64)> = pts
            .iter()
            .map(|p| {
                (
                    (p.x / 0.005).floor() as i64,
                    (p.y / 0.005).floor() as i64,
                    (p.z / 0.005).floor() as i64,
                )
            })
            .collect();
        let out = voxel_downsample(&cloud(pts), 0.005).unwrap();
        assert_eq!(out.len(), expected.len());
    }

    #[test]
    fn opposing_normals_fall_back_to_pca() {
        // A flat 5x5 patch; the first voxel holds two points with opposite normals.
        let mut pts = Vec::new();
        let mut nrm = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                pts.push(Point3::new(i as f64 * 0.01 + 0.002, j as f64 * 0.01 + 0.002, 0.0));
                nrm.push(Vector3::z());
            }
        }
        pts.push(Point3::new(0.003, 0.003, 0.0));
        nrm.push(-Vector3::z());
        let n = pts.len();
        let c = PointCloud::new(pts, vec![[0; 3]; n], Some(nrm)).unwrap();
        let out = voxel_downsample(&c, 0.005).unwrap();
        assert_eq!(out.len(), 25);
        assert!(out.normal_valid[0]);
        assert!((out.normals[0].z.abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_args() {
        assert!(voxel_downsample(&cloud(vec![Point3::origin()]), 0.0).is_err());
        assert!(voxel_downsample(&PointCloud::default(), 0.005).is_err());
    }

    proptest! {
        #[test]
        fn idempotent_and_non_increasing(
            coords in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..300),
            size in 0.01f64..0.5,
        ) {
            let c = cloud(coords.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect());
            let once = voxel_downsample(&c, size).unwrap();
            let twice = voxel_downsample(&once, size).unwrap();
            prop_assert!(once.len() <= c.len());
            prop_assert_eq!(once.len(), twice.len());
        }

        #[test]
        fn tiny_voxels_keep_every_point(
            coords in prop::collection::hash_set((-1000i32..1000, -1000i32..1000, -1000i32..1000), 1..200),
        ) {
            let pts: Vec<Point3<f64>> = coords
                .iter()
                .map(|&(x, y, z)| Point3::new(x as f64 * 1e-3, y as f64 * 1e-3, z as f64 * 1e-3))
                .collect();
            let out = voxel_downsample(&cloud(pts.clone()), 1e-7).unwrap();
            prop_assert_eq!(out.len(), pts.len());
        }
    }
}
