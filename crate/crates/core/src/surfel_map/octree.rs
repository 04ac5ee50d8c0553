//! Dynamic octree over surfel centroids.

use std::collections::HashMap;

use crate::Vec3;

const MAX_DEPTH: usize = 16;

#[derive(Clone, Debug)]
enum Node {
    Leaf(Vec<(u64, Vec3)>),
    Inner(Box<[usize; 8]>),
}

#[derive(Clone, Debug)]
struct Cell {
    center: Vec3,
    half: f64,
    node: Node,
}

/// Octree keyed by surfel id. Points outside the current bounds grow the root.
#[derive(Clone, Debug)]
pub struct SurfelIndex {
    cells: Vec<Cell>,
    free: Vec<usize>,
    root: usize,
    leaf_capacity: usize,
    positions: HashMap<u64, Vec3>,
}

impl SurfelIndex {
    pub fn new(center: Vec3, half_extent: f64, leaf_capacity: usize) -> Self {
        let half = if half_extent.is_finite() && half_extent > 0.0 { half_extent } else { 1.0 };
        Self {
            cells: vec![Cell {
                center,
                half,
                node: Node::Leaf(Vec::new()),
            }],
            free: Vec::new(),
            root: 0,
            leaf_capacity: leaf_capacity.max(1),
            positions: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.positions.contains_key(&id)
    }

    /// World bounds of the root cell as (center, half extent).
    pub fn bounds(&self) -> (Vec3, f64) {
        let c = &self.cells[self.root];
        (c.center, c.half)
    }

    /// Inserts or moves `id` to `p`.
    pub fn insert(&mut self, id: u64, p: Vec3) {
        if self.positions.contains_key(&id) {
            self.remove(id);
        }
        while !self.inside(self.root, &p) {
            self.grow_towards(&p);
        }
        self.positions.insert(id, p);
        let mut cell = self.root;
        let mut depth = 0;
        loop {
            let center = self.cells[cell].center;
            match &mut self.cells[cell].node {
                Node::Inner(children) => {
                    cell = children[octant_of(&center, &p)];
                    depth += 1;
                }
                Node::Leaf(items) => {
                    items.push((id, p));
                    if items.len() > self.leaf_capacity && depth < MAX_DEPTH {
                        self.split(cell);
                    }
                    return;
                }
            }
        }
    }

    pub fn remove(&mut self, id: u64) -> bool {
        let Some(p) = self.positions.remove(&id) else {
            return false;
        };
        let mut path = vec![self.root];
        let mut cell = self.root;
        loop {
            let center = self.cells[cell].center;
            match &mut self.cells[cell].node {
                Node::Inner(children) => {
                    cell = children[octant_of(&center, &p)];
                    path.push(cell);
                }
                Node::Leaf(items) => {
                    if let Some(k) = items.iter().position(|(i, _)| *i == id) {
                        items.swap_remove(k);
                    }
                    break;
                }
            }
        }
        path.pop();
        while let Some(parent) = path.pop() {
            if !self.try_collapse(parent) {
                break;
            }
        }
        true
    }

    /// Ids whose stored point lies within `r` of `p` (inclusive).
    pub fn query_radius(&self, p: &Vec3, r: f64) -> Vec<u64> {
        let mut out = Vec::new();
        if !(r >= 0.0) || self.positions.is_empty() {
            return out;
        }
        let r2 = r * r;
        let mut stack = vec![self.root];
        while let Some(cell) = stack.pop() {
            let c = &self.cells[cell];
            let d = (p - c.center).abs().map(|v| (v - c.half).max(0.0));
            if d.norm_squared() > r2 {
                continue;
            }
            match &c.node {
                Node::Leaf(items) => out.extend(items.iter().filter(|(_, q)| (q - p).norm_squared() <= r2).map(|(i, _)| *i)),
                Node::Inner(children) => stack.extend(children.iter().copied()),
            }
        }
        out
    }

    /// Nearest stored id to `p`, if any.
    pub fn nearest(&self, p: &Vec3) -> Option<(u64, f64)> {
        let mut best: Option<(u64, f64)> = None;
        let mut stack = vec![self.root];
        while let Some(cell) = stack.pop() {
            let c = &self.cells[cell];
            let d = (p - c.center).abs().map(|v| (v - c.half).max(0.0)).norm_squared();
            if best.is_some_and(|(_, b)| d > b) {
                continue;
            }
            match &c.node {
                Node::Leaf(items) => {
                    for (i, q) in items {
                        let dq = (q - p).norm_squared();
                        if best.is_none_or(|(bi, b)| dq < b || (dq == b && *i < bi)) {
                            best = Some((*i, dq));
                        }
                    }
                }
                Node::Inner(children) => {
                    let mut order: Vec<usize> = children.to_vec();
                    order.sort_by(|&a, &b| {
                        let da = (self.cells[a].center - p).norm_squared();
                        let db = (self.cells[b].center - p).norm_squared();
                        db.total_cmp(&da)
                    });
                    stack.extend(order);
                }
            }
        }
        best.map(|(i, d)| (i, d.sqrt()))
    }

    fn inside(&self, cell: usize, p: &Vec3) -> bool {
        let c = &self.cells[cell];
        (p - c.center).abs().max() <= c.half
    }

    fn alloc(&mut self, cell: Cell) -> usize {
        if let Some(i) = self.free.pop() {
            self.cells[i] = cell;
            i
        } else {
            self.cells.push(cell);
            self.cells.len() - 1
        }
    }

    fn split(&mut self, cell: usize) {
        let Node::Leaf(items) = std::mem::replace(&mut self.cells[cell].node, Node::Leaf(Vec::new())) else {
            return;
        };
        let (center, half) = (self.cells[cell].center, self.cells[cell].half * 0.5);
        let mut children = [0usize; 8];
        for (o, child) in children.iter_mut().enumerate() {
            *child = self.alloc(Cell {
                center: center + octant_offset(o) * half,
                half,
                node: Node::Leaf(Vec::new()),
            });
        }
        for (id, p) in items {
            if let Node::Leaf(v) = &mut self.cells[children[octant_of(&center, &p)]].node {
                v.push((id, p));
            }
        }
        self.cells[cell].node = Node::Inner(Box::new(children));
    }

    fn try_collapse(&mut self, cell: usize) -> bool {
        let Node::Inner(children) = &self.cells[cell].node else {
            return false;
        };
        let children = **children;
        let mut items = Vec::new();
        for &c in &children {
            match &self.cells[c].node {
                Node::Leaf(v) => items.extend(v.iter().copied()),
                Node::Inner(_) => return false,
            }
        }
        if items.len() > self.leaf_capacity {
            return false;
        }
        self.free.extend(children);
        self.cells[cell].node = Node::Leaf(items);
        true
    }

    fn grow_towards(&mut self, p: &Vec3) {
        let old = self.root;
        let (center, half) = (self.cells[old].center, self.cells[old].half);
        let dir = (p - center).map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let new_center = center + dir * half;
        let mut children = [0usize; 8];
        let old_octant = octant_of(&new_center, &center);
        for (o, child) in children.iter_mut().enumerate() {
            *child = if o == old_octant {
                old
            } else {
                self.alloc(Cell {
                    center: new_center + octant_offset(o) * half,
                    half,
                    node: Node::Leaf(Vec::new()),
                })
            };
        }
        self.root = self.alloc(Cell {
            center: new_center,
            half: 2.0 * half,
            node: Node::Inner(Box::new(children)),
        });
    }
}

fn octant_of(center: &Vec3, p: &Vec3) -> usize {
    (p.x >= center.x) as usize | ((p.y >= center.y) as usize) << 1 | ((p.z >= center.z) as usize) << 2
}

fn octant_offset(o: usize) -> Vec3 {
    let s = |bit: usize| if o & bit != 0 { 1.0 } else { -1.0 };
    Vec3::new(s(1), s(2), s(4))
}
