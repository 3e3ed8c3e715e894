//! Point-cloud preprocessing: workspace cropping, farthest point sampling,
//! and k-nearest-neighbor grouping into translation-invariant offsets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, u: [f64; 3]) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + u[0], p[1] + u[1], p[2] + u[2]])
                .collect(),
        }
    }
}

/// Axis-aligned crop box; both faces inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl CropBox {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Keep exactly the points inside the closed box, order preserved.
pub fn crop_workspace(cloud: &PointCloud, bounds: &CropBox) -> Result<PointCloud> {
    for i in 0..3 {
        if !(bounds.min[i] < bounds.max[i]) {
            return Err(Error::InvalidArgument(format!(
                "crop box degenerate on axis {i}: {} vs {}",
                bounds.min[i], bounds.max[i]
            )));
        }
    }
    let points: Vec<[f64; 3]> =
        cloud.points.iter().filter(|p| bounds.contains(p)).copied().collect();
    if points.is_empty() {
        return Err(Error::EmptyCrop);
    }
    Ok(PointCloud::new(points))
}

/// Greedy farthest point sampling. Returns `k` indices into the cloud:
/// first is `start_index`, each subsequent one maximizes the minimum
/// distance to the already-selected set, ties broken by lowest index.
pub fn fps(cloud: &PointCloud, k: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("fps: k={k} with n={n}")));
    }
    if start_index >= n {
        return Err(Error::InvalidArgument(format!(
            "fps: start_index={start_index} with n={n}"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    selected.push(start_index);
    // min squared distance from each point to the selected set
    let mut min_d2: Vec<f64> = cloud
        .points
        .iter()
        .map(|p| dist2(p, &cloud.points[start_index]))
        .collect();
    while selected.len() < k {
        let mut best = 0;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, d2) in min_d2.iter().enumerate() {
            if *d2 > best_d2 {
                best_d2 = *d2;
                best = i;
            }
        }
        selected.push(best);
        for (i, d2) in min_d2.iter_mut().enumerate() {
            let nd = dist2(&cloud.points[i], &cloud.points[best]);
            if nd < *d2 {
                *d2 = nd;
            }
        }
    }
    Ok(selected)
}

/// For each center, the `m` nearest cloud points (Euclidean, ties by index)
/// expressed as offsets `point − center`. Centers are cloud indices, so each
/// center's nearest neighbor is itself at zero offset.
pub fn group_neighborhoods(
    cloud: &PointCloud,
    centers: &[usize],
    m: usize,
) -> Result<Vec<Vec<[f64; 3]>>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("group: m={m} with n={n}")));
    }
    let mut out = Vec::with_capacity(centers.len());
    for &ci in centers {
        let c = &cloud.points[ci];
        let mut order: Vec<(f64, usize)> = cloud
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (dist2(p, c), i))
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let offsets = order[..m]
            .iter()
            .map(|(_, i)| {
                let p = &cloud.points[*i];
                [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
            })
            .collect();
        out.push(offsets);
    }
    Ok(out)
}
