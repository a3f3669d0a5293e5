//! Static 3-d tree for exact nearest-neighbour queries.
//!
//! Ties on squared distance resolve to the lowest point index, the same
//! rule a linear scan uses, so both give identical answers bit for bit.

const LEAF: usize = 8;

#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// `(squared distance, index)` of the nearest point by linear scan.
pub fn nearest_bruteforce(points: &[[f64; 3]], q: &[f64; 3]) -> (f64, usize) {
    let mut best = (f64::INFINITY, usize::MAX);
    for (j, p) in points.iter().enumerate() {
        let d = dist2(p, q);
        if d < best.0 {
            best = (d, j);
        }
    }
    best
}

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [[f64; 3]]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_range(0, points.len());
        }
        tree
    }

    fn build_range(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        if hi[axis] == lo[axis] {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = (start + end) / 2;
        let pts = self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = pts[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_range(start, mid);
        let right = self.build_range(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// `(squared distance, index)`; `None` for an empty tree.
    pub fn nearest(&self, q: &[f64; 3]) -> Option<(f64, usize)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: &[f64; 3], best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &j in &self.order[start..end] {
                    let d = dist2(&self.points[j], q);
                    if d < best.0 || (d == best.0 && j < best.1) {
                        *best = (d, j);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                // left holds coordinates <= value, right holds >= value
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.0 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn matches_linear_scan_with_duplicates() {
        let mut rng = RngState::new(3);
        let mut pts: Vec<[f64; 3]> = (0..500)
            .map(|_| [rng.below(10) as f64, rng.below(10) as f64, rng.below(4) as f64])
            .collect();
        pts.extend_from_within(..50);
        let tree = KdTree::build(&pts);
        for _ in 0..300 {
            let q = [rng.uniform(-1.0, 11.0).unwrap(), rng.below(10) as f64, rng.below(5) as f64];
            assert_eq!(tree.nearest(&q).unwrap(), nearest_bruteforce(&pts, &q));
        }
    }

    #[test]
    fn empty_tree() {
        assert!(KdTree::build(&[]).nearest(&[0.0; 3]).is_none());
    }
}
