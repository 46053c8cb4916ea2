//! Static KD-tree for exact k-nearest-neighbor queries in 3D.
//!
//! The tree is built once over a snapshot of point positions. Queries may be
//! answered against *moved* positions as long as every point stayed within
//! `slack` of its snapshot: boxes are inflated by the slack when pruning, so
//! the result is still exact. Ties are resolved by the lowest point index.

use super::{dist2, Vec3};

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: `[start, end)` into `perm`. Inner: children indices.
    kind: NodeKind,
}

#[derive(Clone, Debug)]
enum NodeKind {
    Leaf { start: usize, end: usize },
    Inner { left: usize, right: usize },
}

#[derive(Clone, Debug)]
pub struct KdTree {
    snapshot: Vec<Vec3>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = Self {
            snapshot: points.to_vec(),
            perm: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.snapshot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshot.is_empty()
    }

    /// Positions the tree was built from.
    pub fn snapshot(&self) -> &[Vec3] {
        &self.snapshot
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let mut lo = self.snapshot[self.perm[start]];
        let mut hi = lo;
        for &i in &self.perm[start..end] {
            lo = lo.inf(&self.snapshot[i]);
            hi = hi.sup(&self.snapshot[i]);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            kind: NodeKind::Leaf { start, end },
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let extent = hi - lo;
        let axis = extent.imax();
        let mid = start + (end - start) / 2;
        let pts = &self.snapshot;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id].kind = NodeKind::Inner { left, right };
        id
    }

    /// Exact k nearest neighbors of `query` among the snapshot positions.
    /// Returns `(squared distance, index)` sorted ascending.
    pub fn nearest(&self, query: &Vec3, k: usize) -> Vec<(f64, usize)> {
        self.nearest_moved(&self.snapshot, 0.0, query, k)
    }

    /// Exact k nearest neighbors among `current` positions, where no point
    /// has moved farther than `slack` from the snapshot.
    pub fn nearest_moved(&self, current: &[Vec3], slack: f64, query: &Vec3, k: usize) -> Vec<(f64, usize)> {
        debug_assert_eq!(current.len(), self.snapshot.len());
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k == 0 || self.nodes.is_empty() {
            return best;
        }
        let mut search = Search {
            tree: self,
            current,
            slack,
            query,
            k,
            best: &mut best,
        };
        search.visit(0);
        best
    }
}

struct Search<'a> {
    tree: &'a KdTree,
    current: &'a [Vec3],
    slack: f64,
    query: &'a Vec3,
    k: usize,
    best: &'a mut Vec<(f64, usize)>,
}

impl Search<'_> {
    fn lower_bound(&self, node: &Node) -> f64 {
        let mut g2 = 0.0;
        for a in 0..3 {
            let q = self.query[a];
            let g = if q < node.lo[a] {
                node.lo[a] - q
            } else if q > node.hi[a] {
                q - node.hi[a]
            } else {
                0.0
            };
            g2 += g * g;
        }
        if self.slack == 0.0 {
            return g2;
        }
        // Shrink a hair so rounding never prunes a point at the boundary.
        let lb = (g2.sqrt() - self.slack) * (1.0 - 1e-12);
        if lb <= 0.0 {
            0.0
        } else {
            lb * lb
        }
    }

    fn worst(&self) -> Option<f64> {
        if self.best.len() == self.k {
            self.best.last().map(|b| b.0)
        } else {
            None
        }
    }

    fn offer(&mut self, d2: f64, idx: usize) {
        let key = (d2, idx);
        if self.best.len() == self.k {
            let last = *self.best.last().unwrap();
            if !lex_less(key, last) {
                return;
            }
            self.best.pop();
        }
        let pos = self.best.partition_point(|&b| lex_less(b, key));
        self.best.insert(pos, key);
    }

    fn visit(&mut self, id: usize) {
        let node = &self.tree.nodes[id];
        if let Some(w) = self.worst() {
            // Equal bounds may still hide a lower-index tie.
            if self.lower_bound(node) > w {
                return;
            }
        }
        match node.kind {
            NodeKind::Leaf { start, end } => {
                for &i in &self.tree.perm[start..end] {
                    let d = dist2(&self.current[i], self.query);
                    self.offer(d, i);
                }
            }
            NodeKind::Inner { left, right } => {
                let bl = self.lower_bound(&self.tree.nodes[left]);
                let br = self.lower_bound(&self.tree.nodes[right]);
                if bl <= br {
                    self.visit(left);
                    self.visit(right);
                } else {
                    self.visit(right);
                    self.visit(left);
                }
            }
        }
    }
}

#[inline]
fn lex_less(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}
