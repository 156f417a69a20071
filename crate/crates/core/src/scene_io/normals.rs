use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};

use super::{PointCloud, SceneError};
use crate::spatial::PointIndex;

/// Smallest-variance direction of a neighborhood, or `None` when the points
/// are coincident or collinear.
pub fn pca_normal(points: &[Point3<f64>]) -> Option<Vector3<f64>> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lo, mid, hi) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if hi.is_nan() || hi <= 0.0 || mid <= 1e-10 * hi {
        return None;
    }
    debug_assert!(lo <= mid);
    let v = eig.eigenvectors.column(order[0]).into_owned();
    Some(v.normalize())
}

/// Flips `n` to point away from `center`; falls back to +z (then +y, +x)
/// when the point lies on the plane through `center`.
fn orient(n: Vector3<f64>, p: &Point3<f64>, center: &Point3<f64>) -> Vector3<f64> {
    let out = p - center;
    let d = n.dot(&out);
    if d.abs() > 1e-6 * out.norm() {
        return if d < 0.0 { -n } else { n };
    }
    for axis in [2, 1, 0] {
        if n[axis].abs() > 1e-12 {
            return if n[axis] < 0.0 { -n } else { n };
        }
    }
    n
}

fn check_k(cloud: &PointCloud, k: usize) -> Result<(), SceneError> {
    if k < 3 {
        return Err(SceneError::InvalidArgument(format!("normal estimation needs k >= 3, got {k}")));
    }
    if cloud.len() < k {
        return Err(SceneError::InvalidArgument(format!(
            "normal estimation with k = {k} needs at least {k} points, cloud has {}",
            cloud.len()
        )));
    }
    Ok(())
}

fn estimate_where(cloud: &PointCloud, k: usize, only_invalid: bool) -> Result<PointCloud, SceneError> {
    check_k(cloud, k)?;
    let index = PointIndex::new(&cloud.positions);
    let center = cloud.centroid().expect("non-empty");
    let mut out = cloud.clone();
    let results = crate::par::map_range(cloud.len(), |i| {
        if only_invalid && cloud.normal_valid[i] {
            return None;
        }
        let p = &cloud.positions[i];
        let nbrs: Vec<Point3<f64>> = index
            .knn(p, k)
            .into_iter()
            .map(|(j, _)| cloud.positions[j])
            .collect();
        Some(pca_normal(&nbrs).map(|n| orient(n, p, &center)))
    });
    for (i, r) in results.into_iter().enumerate() {
        match r {
            None => {}
            Some(Some(n)) => {
                out.normals[i] = n;
                out.normal_valid[i] = true;
            }
            Some(None) => {
                out.normals[i] = Vector3::z();
                out.normal_valid[i] = false;
            }
        }
    }
    Ok(out)
}

/// Recomputes every normal from its `k`-nearest-neighbor covariance.
///
/// Normals point away from the cloud centroid, or up (+z) for points whose
/// offset from the centroid is tangent to the surface. Collinear or
/// coincident neighborhoods get +z and are flagged invalid.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud, SceneError> {
    estimate_where(cloud, k, false)
}

/// Like [`estimate_normals`] but leaves already-valid normals untouched.
pub fn fill_invalid_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud, SceneError> {
    estimate_where(cloud, k, true)
}
