//! Nearest-neighbour queries over 3D positions, backed by `kiddo`.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Point3;

pub(crate) struct PointIndex {
    tree: Option<ImmutableKdTree<f64, 3>>,
}

impl PointIndex {
    pub(crate) fn new(points: &[Point3<f64>]) -> Self {
        let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Self::from_coords(&coords)
    }

    pub(crate) fn from_coords(coords: &[[f64; 3]]) -> Self {
        let tree = if coords.is_empty() {
            None
        } else {
            Some(ImmutableKdTree::new_from_slice(coords))
        };
        Self { tree }
    }

    /// The `k` nearest items (including an item at the query position),
    /// ordered by squared distance then index.
    pub(crate) fn knn(&self, q: &Point3<f64>, k: usize) -> Vec<(usize, f64)> {
        let (Some(tree), Some(k)) = (&self.tree, NonZero::new(k)) else {
            return Vec::new();
        };
        let mut out: Vec<(usize, f64)> = tree
            .nearest_n::<SquaredEuclidean>(&[q.x, q.y, q.z], k)
            .into_iter()
            .map(|nn| (nn.item as usize, nn.distance))
            .collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    /// All items within Euclidean distance `radius` (inclusive), sorted by index.
    pub(crate) fn within(&self, q: &Point3<f64>, radius: f64) -> Vec<usize> {
        let Some(tree) = &self.tree else {
            return Vec::new();
        };
        let r2 = radius * radius;
        let mut out: Vec<usize> = tree
            .within_unsorted::<SquaredEuclidean>(&[q.x, q.y, q.z], r2)
            .into_iter()
            .filter(|nn| nn.distance <= r2)
            .map(|nn| nn.item as usize)
            .collect();
        out.sort_unstable();
        out
    }

    pub(crate) fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        self.knn(q, 1).into_iter().next()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knn_and_radius_match_brute_force() {
        let pts: Vec<Point3<f64>> = (0..200)
            .map(|i| {
                let f = i as f64;
                Point3::new((f * 0.37).sin(), (f * 0.11).cos(), (f * 0.07).sin() * 0.5)
            })
            .collect();
        let index = PointIndex::new(&pts);
        let q = Point3::new(0.1, 0.2, 0.0);
        let mut brute: Vec<(usize, f64)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm_squared()))
            .collect();
        brute.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let got: Vec<usize> = index.knn(&q, 7).iter().map(|x| x.0).collect();
        let want: Vec<usize> = brute.iter().take(7).map(|x| x.0).collect();
        assert_eq!(got, want);

        let mut within: Vec<usize> = brute.iter().filter(|x| x.1 <= 0.25).map(|x| x.0).collect();
        within.sort_unstable();
        assert_eq!(index.within(&q, 0.5), within);
    }

    #[test]
    fn empty_index() {
        let index = PointIndex::new(&[]);
        assert!(index.knn(&Point3::origin(), 3).is_empty());
        assert!(index.nearest(&Point3::origin()).is_none());
    }
}
