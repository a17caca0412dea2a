//! k-d tree over a point cloud snapshot.
//!
//! Queries return original point indices and match a brute-force scan
//! exactly: radius search is inclusive (`dist <= r`), k-NN ties resolve to
//! the lower index.

use crate::geom::{Point3, PointCloud};

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
struct Node {
    /// 0..=2 for split nodes, 3 marks a leaf.
    axis: u8,
    split: f64,
    /// Right child node id; the left child is always `self + 1`.
    right: u32,
    start: u32,
    end: u32,
}

/// Immutable spatial index; safe to share across threads.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    pts: Vec<Point3>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> SpatialIndex {
        Self::from_points(cloud.points())
    }

    pub fn from_points(points: &[Point3]) -> SpatialIndex {
        let mut pts = points.to_vec();
        let mut ids: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        if !pts.is_empty() {
            build_node(&mut pts, &mut ids, 0, points.len(), &mut nodes);
        }
        SpatialIndex { pts, ids, nodes }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Indices of all points with `|p - query| <= r`, ascending.
    pub fn radius_neighbors(&self, query: &Point3, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.radius_rec(0, query, r, r * r, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn radius_rec(&self, node: usize, q: &Point3, r: f64, r2: f64, out: &mut Vec<usize>) {
        let n = &self.nodes[node];
        if n.axis == 3 {
            for i in n.start as usize..n.end as usize {
                if (self.pts[i] - q).norm_squared() <= r2 {
                    out.push(self.ids[i] as usize);
                }
            }
            return;
        }
        let c = q[n.axis as usize];
        if c - r <= n.split {
            self.radius_rec(node + 1, q, r, r2, out);
        }
        if c + r >= n.split {
            self.radius_rec(n.right as usize, q, r, r2, out);
        }
    }

    /// Whether any indexed point lies within `r` of the query.
    pub fn has_neighbor_within(&self, query: &Point3, r: f64) -> bool {
        !self.nodes.is_empty() && self.any_rec(0, query, r, r * r)
    }

    fn any_rec(&self, node: usize, q: &Point3, r: f64, r2: f64) -> bool {
        let n = &self.nodes[node];
        if n.axis == 3 {
            return (n.start as usize..n.end as usize)
                .any(|i| (self.pts[i] - q).norm_squared() <= r2);
        }
        let c = q[n.axis as usize];
        // Visit the near side first; a hit there skips the far side.
        let (near, far) = if c <= n.split {
            (node + 1, n.right as usize)
        } else {
            (n.right as usize, node + 1)
        };
        if self.any_rec(near, q, r, r2) {
            return true;
        }
        if (c - n.split).abs() <= r && self.any_rec(far, q, r, r2) {
            return true;
        }
        false
    }

    /// Number of points within `r`, stopping early once `cap` are found.
    pub fn count_within(&self, query: &Point3, r: f64, cap: usize) -> usize {
        if self.nodes.is_empty() || cap == 0 {
            return 0;
        }
        let mut count = 0;
        self.count_rec(0, query, r, r * r, cap, &mut count);
        count
    }

    fn count_rec(&self, node: usize, q: &Point3, r: f64, r2: f64, cap: usize, count: &mut usize) {
        if *count >= cap {
            return;
        }
        let n = &self.nodes[node];
        if n.axis == 3 {
            for i in n.start as usize..n.end as usize {
                if (self.pts[i] - q).norm_squared() <= r2 {
                    *count += 1;
                    if *count >= cap {
                        return;
                    }
                }
            }
            return;
        }
        let c = q[n.axis as usize];
        if c - r <= n.split {
            self.count_rec(node + 1, q, r, r2, cap, count);
        }
        if c + r >= n.split {
            self.count_rec(n.right as usize, q, r, r2, cap, count);
        }
    }

    /// Index and distance of the closest point, if any.
    pub fn nearest(&self, query: &Point3) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(0, query, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    fn nearest_rec(&self, node: usize, q: &Point3, best: &mut (usize, f64)) {
        let n = &self.nodes[node];
        if n.axis == 3 {
            for i in n.start as usize..n.end as usize {
                let d2 = (self.pts[i] - q).norm_squared();
                let id = self.ids[i] as usize;
                if d2 < best.1 || (d2 == best.1 && id < best.0) {
                    *best = (id, d2);
                }
            }
            return;
        }
        let c = q[n.axis as usize];
        let (near, far) = if c <= n.split {
            (node + 1, n.right as usize)
        } else {
            (n.right as usize, node + 1)
        };
        self.nearest_rec(near, q, best);
        let gap = c - n.split;
        if gap * gap <= best.1 {
            self.nearest_rec(far, q, best);
        }
    }

    /// The `k` nearest points as `(index, distance)` sorted by distance
    /// (ties by index). Returns fewer when the cloud is smaller than `k`.
    pub fn knn(&self, query: &Point3, k: usize) -> Vec<(usize, f64)> {
        if self.nodes.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut heap = KnnHeap::new(k);
        self.knn_rec(0, query, &mut heap);
        heap.into_sorted()
    }

    fn knn_rec(&self, node: usize, q: &Point3, heap: &mut KnnHeap) {
        let n = &self.nodes[node];
        if n.axis == 3 {
            for i in n.start as usize..n.end as usize {
                let d2 = (self.pts[i] - q).norm_squared();
                heap.push(d2, self.ids[i] as usize);
            }
            return;
        }
        let c = q[n.axis as usize];
        let (near, far) = if c <= n.split {
            (node + 1, n.right as usize)
        } else {
            (n.right as usize, node + 1)
        };
        self.knn_rec(near, q, heap);
        let gap = c - n.split;
        if !heap.full() || gap * gap <= heap.worst() {
            self.knn_rec(far, q, heap);
        }
    }
}

fn build_node(pts: &mut [Point3], ids: &mut [u32], start: usize, end: usize, nodes: &mut Vec<Node>) {
    let len = end - start;
    if len <= LEAF_SIZE {
        nodes.push(Node {
            axis: 3,
            split: 0.0,
            right: 0,
            start: start as u32,
            end: end as u32,
        });
        return;
    }
    // Split on the axis with the largest extent.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &pts[start..end] {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
        .unwrap();
    let mid = len / 2;
    partition_by_axis(&mut pts[start..end], &mut ids[start..end], mid, axis);
    let split = pts[start + mid][axis];

    let this = nodes.len();
    nodes.push(Node {
        axis: axis as u8,
        split,
        right: 0,
        start: start as u32,
        end: end as u32,
    });
    build_node(pts, ids, start, start + mid, nodes);
    let right = nodes.len() as u32;
    nodes[this].right = right;
    build_node(pts, ids, start + mid, end, nodes);
}

/// Partitions both slices in lockstep so element `mid` is the median along
/// `axis`, everything before is `<=` and everything after is `>=`.
fn partition_by_axis(pts: &mut [Point3], ids: &mut [u32], mid: usize, axis: usize) {
    // Quickselect on a scratch permutation, then apply it to both slices.
    let mut order: Vec<u32> = (0..pts.len() as u32).collect();
    order.select_nth_unstable_by(mid, |&a, &b| {
        pts[a as usize][axis]
            .partial_cmp(&pts[b as usize][axis])
            .unwrap()
    });
    let new_pts: Vec<Point3> = order.iter().map(|&i| pts[i as usize]).collect();
    let new_ids: Vec<u32> = order.iter().map(|&i| ids[i as usize]).collect();
    pts.copy_from_slice(&new_pts);
    ids.copy_from_slice(&new_ids);
}

/// Bounded max-heap keeping the k smallest squared distances.
struct KnnHeap {
    k: usize,
    // (squared distance, index), worst entry first.
    items: Vec<(f64, usize)>,
}

impl KnnHeap {
    fn new(k: usize) -> KnnHeap {
        KnnHeap {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn full(&self) -> bool {
        self.items.len() >= self.k
    }

    fn worst(&self) -> f64 {
        self.items.first().map_or(f64::INFINITY, |x| x.0)
    }

    fn push(&mut self, d2: f64, id: usize) {
        if self.full() {
            let worst = self.items[0];
            if d2 > worst.0 || (d2 == worst.0 && id > worst.1) {
                return;
            }
            self.pop_root();
        }
        self.items.push((d2, id));
        let mut i = self.items.len() - 1;
        while i > 0 {
            let parent = (i - 1) / 2;
            if greater(self.items[i], self.items[parent]) {
                self.items.swap(i, parent);
                i = parent;
            } else {
                break;
            }
        }
    }

    fn pop_root(&mut self) {
        let last = self.items.len() - 1;
        self.items.swap(0, last);
        self.items.pop();
        let n = self.items.len();
        let mut i = 0;
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut largest = i;
            if l < n && greater(self.items[l], self.items[largest]) {
                largest = l;
            }
            if r < n && greater(self.items[r], self.items[largest]) {
                largest = r;
            }
            if largest == i {
                break;
            }
            self.items.swap(i, largest);
            i = largest;
        }
    }

    fn into_sorted(mut self) -> Vec<(usize, f64)> {
        self.items
            .sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        self.items.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }
}

/// Heap ordering: larger distance first, ties broken by larger index so the
/// retained k-set is deterministic.
fn greater(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
}
