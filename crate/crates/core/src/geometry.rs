//! Sampling and neighborhood construction: farthest point sampling, ball
//! query, k-nearest neighbors and relative grouping.
//!
//! All searches are exhaustive O(N·M) scans in double precision.

use std::cmp::Ordering;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Positions, per-point features and optional labels for `batch` clouds of
/// `points` points each.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSetBatch {
    batch: usize,
    points: usize,
    channels: usize,
    positions: Vec<f64>,
    features: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl PointSetBatch {
    pub fn new(
        batch: usize,
        points: usize,
        channels: usize,
        positions: Vec<f64>,
        features: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if batch == 0 || points == 0 {
            return Err(Error::Size(format!("empty cloud batch ({batch} x {points})")));
        }
        if channels == 0 {
            return Err(Error::Size("point features need at least one channel".into()));
        }
        if positions.len() != batch * points * 3 {
            return Err(Error::Size(format!(
                "expected {} position values, got {}",
                batch * points * 3,
                positions.len()
            )));
        }
        if features.len() != batch * points * channels {
            return Err(Error::Size(format!(
                "expected {} feature values, got {}",
                batch * points * channels,
                features.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != batch * points {
                return Err(Error::Size("label count differs from point count".into()));
            }
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite position".into()));
        }
        Ok(Self {
            batch,
            points,
            channels,
            positions,
            features,
            labels,
        })
    }

    /// Builds a batch whose features are derived from positions:
    /// `(x, y, z, z - min z)` per cloud.
    pub fn from_positions(
        batch: usize,
        points: usize,
        positions: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if batch == 0 || points == 0 || positions.len() != batch * points * 3 {
            return Err(Error::Size(format!(
                "expected {} position values for {batch} x {points} points, got {}",
                batch * points * 3,
                positions.len()
            )));
        }
        let features = position_features(&positions, batch, points, 1.0);
        Self::new(batch, points, 4, positions, features, labels)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn cloud_positions(&self, b: usize) -> &[f64] {
        let n = self.points * 3;
        &self.positions[b * n..(b + 1) * n]
    }

    pub fn position(&self, b: usize, i: usize) -> [f64; 3] {
        let p = &self.positions[(b * self.points + i) * 3..][..3];
        [p[0], p[1], p[2]]
    }

    pub fn feature(&self, b: usize, i: usize) -> &[f64] {
        &self.features[(b * self.points + i) * self.channels..][..self.channels]
    }

    pub fn with_features(&self, channels: usize, features: Vec<f64>) -> Result<Self> {
        Self::new(
            self.batch,
            self.points,
            channels,
            self.positions.clone(),
            features,
            self.labels.clone(),
        )
    }

    pub fn with_labels(mut self, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.batch * self.points {
                return Err(Error::Size("label count differs from point count".into()));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    /// Reorders the points of every cloud: new point `i` is old point `perm[i]`.
    pub fn permute_points(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.points {
            return Err(Error::Size("permutation length differs from point count".into()));
        }
        let mut pos = Vec::with_capacity(self.positions.len());
        let mut feat = Vec::with_capacity(self.features.len());
        let mut labels = self.labels.as_ref().map(|_| Vec::with_capacity(self.batch * self.points));
        for b in 0..self.batch {
            for &i in perm {
                pos.extend_from_slice(&self.position(b, i));
                feat.extend_from_slice(self.feature(b, i));
                if let (Some(out), Some(l)) = (&mut labels, &self.labels) {
                    out.push(l[b * self.points + i]);
                }
            }
        }
        Self::new(self.batch, self.points, self.channels, pos, feat, labels)
    }

    /// Concatenates equally sized batches along the batch axis.
    pub fn concat(parts: &[&PointSetBatch]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Size("cannot concatenate zero batches".into()))?;
        let mut pos = Vec::new();
        let mut feat = Vec::new();
        let mut labels = first.labels.as_ref().map(|_| Vec::new());
        let mut batch = 0;
        for p in parts {
            if p.points != first.points || p.channels != first.channels {
                return Err(Error::Size("batches differ in point or channel count".into()));
            }
            pos.extend_from_slice(&p.positions);
            feat.extend_from_slice(&p.features);
            match (&mut labels, &p.labels) {
                (Some(out), Some(l)) => out.extend_from_slice(l),
                (None, None) => {}
                _ => return Err(Error::Size("batches disagree on label presence".into())),
            }
            batch += p.batch;
        }
        Self::new(batch, first.points, first.channels, pos, feat, labels)
    }

    /// Splits into single-cloud batches.
    pub fn split(&self) -> Vec<PointSetBatch> {
        (0..self.batch)
            .map(|b| {
                let np = self.points;
                PointSetBatch {
                    batch: 1,
                    points: np,
                    channels: self.channels,
                    positions: self.positions[b * np * 3..(b + 1) * np * 3].to_vec(),
                    features: self.features[b * np * self.channels..(b + 1) * np * self.channels]
                        .to_vec(),
                    labels: self.labels.as_ref().map(|l| l[b * np..(b + 1) * np].to_vec()),
                }
            })
            .collect()
    }
}

/// `(x, y, z, z - min z) / scale` per point, cloud by cloud.
pub fn position_features(positions: &[f64], batch: usize, points: usize, scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * points * 4);
    for cloud in positions.chunks_exact(points * 3).take(batch) {
        let zmin = cloud
            .chunks_exact(3)
            .map(|p| p[2])
            .fold(f64::INFINITY, f64::min);
        for p in cloud.chunks_exact(3) {
            out.extend_from_slice(&[p[0] / scale, p[1] / scale, p[2] / scale, (p[2] - zmin) / scale]);
        }
    }
    out
}

/// Per-center neighbor table for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    pub batch: usize,
    /// Centers per cloud.
    pub m: usize,
    pub k: usize,
    /// `[batch][m][k]` indices into the source cloud.
    pub indices: Vec<usize>,
    /// True where the entry duplicates an earlier neighbor as padding.
    pub pad_mask: Vec<bool>,
    /// `[batch][m]` index of each center in the source cloud.
    pub centers: Vec<usize>,
}

impl NeighborIndex {
    pub fn neighbors(&self, b: usize, i: usize) -> &[usize] {
        &self.indices[(b * self.m + i) * self.k..][..self.k]
    }

    pub fn pads(&self, b: usize, i: usize) -> &[bool] {
        &self.pad_mask[(b * self.m + i) * self.k..][..self.k]
    }

    pub fn has_padding(&self) -> bool {
        self.pad_mask.iter().any(|&p| p)
    }

    /// Neighbor indices offset into the flattened `[batch * n]` row space.
    pub fn flat_neighbors(&self, n: usize) -> Arc<[usize]> {
        self.indices
            .iter()
            .enumerate()
            .map(|(e, &j)| (e / (self.m * self.k)) * n + j)
            .collect()
    }

    /// Center indices offset into the flattened `[batch * n]` row space.
    pub fn flat_centers(&self, n: usize) -> Arc<[usize]> {
        self.centers
            .iter()
            .enumerate()
            .map(|(e, &i)| (e / self.m) * n + i)
            .collect()
    }

    pub fn pad_mask_arc(&self) -> Option<Arc<[bool]>> {
        self.has_padding().then(|| self.pad_mask.iter().copied().collect())
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Farthest point sampling on one cloud given as flat `[n * 3]` positions.
/// Ties in the max-min distance go to the lower index.
pub fn fps_cloud(positions: &[f64], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = positions.len() / 3;
    if n == 0 {
        return Err(Error::Size("farthest point sampling on an empty cloud".into()));
    }
    if m == 0 || m > n {
        return Err(Error::Size(format!("cannot sample {m} of {n} points")));
    }
    if start >= n {
        return Err(Error::Size(format!("start index {start} out of range {n}")));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    chosen.push(current);
    while chosen.len() < m {
        let c = &positions[current * 3..current * 3 + 3];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, d) in min_d.iter_mut().enumerate() {
            let dd = dist2(&positions[i * 3..i * 3 + 3], c);
            if dd < *d {
                *d = dd;
            }
            if *d > best.0 {
                best = (*d, i);
            }
        }
        current = best.1;
        chosen.push(current);
    }
    Ok(chosen)
}

/// Farthest point sampling for every cloud of the batch; returns `[B][m]`.
pub fn farthest_point_sample(cloud: &PointSetBatch, m: usize, start: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(cloud.batch() * m);
    for b in 0..cloud.batch() {
        out.extend(fps_cloud(cloud.cloud_positions(b), m, start)?);
    }
    Ok(out)
}

/// Ball query of arbitrary query points against one cloud. Returns `[q][k]`
/// indices and pad flags.
pub fn ball_query_cloud(
    positions: &[f64],
    queries: &[f64],
    radius: f64,
    k: usize,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("ball query radius must be positive, got {radius}")));
    }
    if k == 0 {
        return Err(Error::Config("ball query needs k >= 1".into()));
    }
    let r2 = radius * radius;
    let nq = queries.len() / 3;
    let mut idx = Vec::with_capacity(nq * k);
    let mut pad = Vec::with_capacity(nq * k);
    for (q, qp) in queries.chunks_exact(3).enumerate() {
        let start = idx.len();
        for (j, p) in positions.chunks_exact(3).enumerate() {
            if dist2(p, qp) <= r2 {
                idx.push(j);
                pad.push(false);
                if idx.len() - start == k {
                    break;
                }
            }
        }
        let found = idx.len() - start;
        if found == 0 {
            return Err(Error::EmptyNeighborhood { query: q, radius });
        }
        let first = idx[start];
        for _ in found..k {
            idx.push(first);
            pad.push(true);
        }
    }
    Ok((idx, pad))
}

/// Up to `k` points within `radius` of each center, in scan order; short
/// neighborhoods repeat the first neighbor with the pad flag set.
pub fn ball_query(
    centers: &[usize],
    cloud: &PointSetBatch,
    radius: f64,
    k: usize,
) -> Result<NeighborIndex> {
    let b = cloud.batch();
    if !centers.len().is_multiple_of(b) {
        return Err(Error::Size("center table does not split evenly over the batch".into()));
    }
    let m = centers.len() / b;
    let mut indices = Vec::with_capacity(centers.len() * k);
    let mut pad_mask = Vec::with_capacity(centers.len() * k);
    for bi in 0..b {
        let pos = cloud.cloud_positions(bi);
        let queries = gather_positions(pos, &centers[bi * m..(bi + 1) * m])?;
        let (i, p) = ball_query_cloud(pos, &queries, radius, k)?;
        indices.extend(i);
        pad_mask.extend(p);
    }
    Ok(NeighborIndex {
        batch: b,
        m,
        k,
        indices,
        pad_mask,
        centers: centers.to_vec(),
    })
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` nearest points of one cloud for each query, ordered by distance
/// with ties broken by lower index. Returns `[q][k]` indices and squared
/// distances.
pub fn knn_cloud(positions: &[f64], queries: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = positions.len() / 3;
    if k == 0 || k > n {
        return Err(Error::Size(format!("cannot take {k} nearest of {n} points")));
    }
    let nq = queries.len() / 3;
    let mut idx = Vec::with_capacity(nq * k);
    let mut d2 = Vec::with_capacity(nq * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for qp in queries.chunks_exact(3) {
        scratch.clear();
        scratch.extend(positions.chunks_exact(3).enumerate().map(|(j, p)| (dist2(p, qp), j)));
        if k < n {
            scratch.select_nth_unstable_by(k - 1, by_distance);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(by_distance);
        for &(d, j) in head.iter() {
            idx.push(j);
            d2.push(d);
        }
    }
    Ok((idx, d2))
}

/// k-nearest-neighbor grouping around the given centers.
pub fn knn(centers: &[usize], cloud: &PointSetBatch, k: usize) -> Result<NeighborIndex> {
    let b = cloud.batch();
    if !centers.len().is_multiple_of(b) {
        return Err(Error::Size("center table does not split evenly over the batch".into()));
    }
    let m = centers.len() / b;
    let mut indices = Vec::with_capacity(centers.len() * k);
    for bi in 0..b {
        let pos = cloud.cloud_positions(bi);
        let queries = gather_positions(pos, &centers[bi * m..(bi + 1) * m])?;
        indices.extend(knn_cloud(pos, &queries, k)?.0);
    }
    Ok(NeighborIndex {
        batch: b,
        m,
        k,
        pad_mask: vec![false; indices.len()],
        indices,
        centers: centers.to_vec(),
    })
}

/// Flat `[len * 3]` positions of the listed points.
pub fn gather_positions(positions: &[f64], idx: &[usize]) -> Result<Vec<f64>> {
    let n = positions.len() / 3;
    let mut out = Vec::with_capacity(idx.len() * 3);
    for &i in idx {
        if i >= n {
            return Err(Error::Size(format!("point index {i} out of range {n}")));
        }
        out.extend_from_slice(&positions[i * 3..i * 3 + 3]);
    }
    Ok(out)
}

/// Relative features `f_j - f_i` (`[B][M][K][C]`) and positions `p_j - p_i`
/// (`[B][M][K][3]`) for every neighbor entry.
pub fn group_relative(cloud: &PointSetBatch, nbr: &NeighborIndex) -> Result<(Vec<f64>, Vec<f64>)> {
    if nbr.batch != cloud.batch() || nbr.centers.len() != nbr.batch * nbr.m {
        return Err(Error::Size("neighbor table does not match the cloud batch".into()));
    }
    let n = cloud.points();
    if nbr.indices.iter().chain(&nbr.centers).any(|&i| i >= n) {
        return Err(Error::Size("neighbor index out of range".into()));
    }
    let c = cloud.channels();
    let mut rel_feat = Vec::with_capacity(nbr.indices.len() * c);
    let mut rel_pos = Vec::with_capacity(nbr.indices.len() * 3);
    for b in 0..nbr.batch {
        for i in 0..nbr.m {
            let center = nbr.centers[b * nbr.m + i];
            let (fi, pi) = (cloud.feature(b, center), cloud.position(b, center));
            for &j in nbr.neighbors(b, i) {
                let (fj, pj) = (cloud.feature(b, j), cloud.position(b, j));
                rel_feat.extend(fj.iter().zip(fi).map(|(a, b)| a - b));
                rel_pos.extend((0..3).map(|d| pj[d] - pi[d]));
            }
        }
    }
    Ok((rel_feat, rel_pos))
}

/// Reorders each neighborhood's real entries by (distance, index) and moves
/// padded entries to the end, giving a canonical slot order.
pub fn sort_by_distance(nbr: &mut NeighborIndex, cloud: &PointSetBatch) {
    for b in 0..nbr.batch {
        let pos = cloud.cloud_positions(b);
        for i in 0..nbr.m {
            let center = nbr.centers[b * nbr.m + i];
            let c = &pos[center * 3..center * 3 + 3];
            let base = (b * nbr.m + i) * nbr.k;
            let mut real: Vec<(f64, usize)> = (0..nbr.k)
                .filter(|&s| !nbr.pad_mask[base + s])
                .map(|s| {
                    let j = nbr.indices[base + s];
                    (dist2(&pos[j * 3..j * 3 + 3], c), j)
                })
                .collect();
            real.sort_by(by_distance);
            let first = real[0].1;
            for s in 0..nbr.k {
                if let Some(&(_, j)) = real.get(s) {
                    nbr.indices[base + s] = j;
                    nbr.pad_mask[base + s] = false;
                } else {
                    nbr.indices[base + s] = first;
                    nbr.pad_mask[base + s] = true;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> PointSetBatch {
        let pos = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 10.0, 0.0, 0.0];
        PointSetBatch::from_positions(1, 4, pos, None).unwrap()
    }

    #[test]
    fn fps_examples() {
        let c = line();
        assert_eq!(farthest_point_sample(&c, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_sample(&c, 3, 0).unwrap(), vec![0, 3, 2]);
        assert_eq!(farthest_point_sample(&c, 1, 0).unwrap(), vec![0]);
    }

    #[test]
    fn fps_rejects_oversampling() {
        assert!(matches!(farthest_point_sample(&line(), 5, 0), Err(Error::Size(_))));
        assert!(matches!(fps_cloud(&[], 1, 0), Err(Error::Size(_))));
    }

    #[test]
    fn ball_query_examples() {
        let c = line();
        let n = ball_query(&[0], &c, 1.5, 2).unwrap();
        assert_eq!(n.indices, vec![0, 1]);
        assert_eq!(n.pad_mask, vec![false, false]);

        let n = ball_query(&[0], &c, 0.5, 2).unwrap();
        assert_eq!(n.indices, vec![0, 0]);
        assert_eq!(n.pad_mask, vec![false, true]);

        let n = ball_query(&[0], &c, 2.5, 3).unwrap();
        assert_eq!(n.indices, vec![0, 1, 2]);
    }

    #[test]
    fn ball_query_cross_cloud_can_be_empty() {
        let c = line();
        let err = ball_query_cloud(c.positions(), &[50.0, 0.0, 0.0], 1.0, 2).unwrap_err();
        assert!(matches!(err, Error::EmptyNeighborhood { query: 0, .. }));
    }

    #[test]
    fn knn_examples() {
        let c = line();
        assert_eq!(knn(&[0], &c, 2).unwrap().indices, vec![0, 1]);
        assert!(matches!(knn(&[0], &c, 5), Err(Error::Size(_))));

        // center at the origin, equidistant points at x = +1 and x = -1
        let pos = vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let (idx, _) = knn_cloud(&pos, &[0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(idx, vec![2, 0]);
    }

    #[test]
    fn group_relative_examples() {
        let pos = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let cloud = PointSetBatch::new(1, 2, 2, pos, vec![1.0, 2.0, 3.0, 5.0], None).unwrap();
        let nbr = NeighborIndex {
            batch: 1,
            m: 1,
            k: 2,
            indices: vec![0, 1],
            pad_mask: vec![false, false],
            centers: vec![0],
        };
        let (f, p) = group_relative(&cloud, &nbr).unwrap();
        assert_eq!(&f[..2], &[0.0, 0.0]);
        assert_eq!(&p[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&f[2..], &[2.0, 3.0]);
        assert_eq!(&p[3..], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn group_relative_rejects_bad_indices() {
        let c = line();
        let nbr = NeighborIndex {
            batch: 1,
            m: 1,
            k: 1,
            indices: vec![9],
            pad_mask: vec![false],
            centers: vec![0],
        };
        assert!(matches!(group_relative(&c, &nbr), Err(Error::Size(_))));
    }

    #[test]
    fn sort_by_distance_moves_pads_last() {
        let c = line();
        let mut n = NeighborIndex {
            batch: 1,
            m: 1,
            k: 4,
            indices: vec![2, 2, 0, 1],
            pad_mask: vec![false, true, false, false],
            centers: vec![0],
        };
        sort_by_distance(&mut n, &c);
        assert_eq!(n.indices, vec![0, 1, 2, 0]);
        assert_eq!(n.pad_mask, vec![false, false, false, true]);
    }
}
