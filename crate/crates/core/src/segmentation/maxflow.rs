//! s-t minimum cut via the Boykov-Kolmogorov augmenting-path algorithm.
//!
//! Two search trees grow from the terminals; augmenting paths are found where
//! they touch, saturated edges turn nodes into orphans, and orphans are
//! re-adopted or freed. Distance/timestamp marks keep paths short.

use std::collections::VecDeque;

const NONE: u32 = u32::MAX;
const FREE: u32 = u32::MAX;
const TERMINAL: u32 = u32::MAX - 1;
const ORPHAN: u32 = u32::MAX - 2;
const INFINITE_D: u32 = u32::MAX;

/// Capacity description of an s-t graph over `n` nodes.
///
/// `source_caps[i]` is the capacity of `s -> i`, `sink_caps[i]` of `i -> t`.
/// A node that ends on the sink side has its `s -> i` edge cut.
#[derive(Debug, Clone, Default)]
pub struct FlowGraph {
    pub source_caps: Vec<f64>,
    pub sink_caps: Vec<f64>,
    /// `(a, b, cap a->b, cap b->a)`
    pub edges: Vec<(u32, u32, f64, f64)>,
}

impl FlowGraph {
    pub fn new(nodes: usize) -> Self {
        FlowGraph {
            source_caps: vec![0.0; nodes],
            sink_caps: vec![0.0; nodes],
            edges: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.source_caps.len()
    }

    pub fn add_terminal_caps(&mut self, node: usize, source: f64, sink: f64) {
        self.source_caps[node] += source;
        self.sink_caps[node] += sink;
    }

    pub fn add_edge(&mut self, a: usize, b: usize, cap_ab: f64, cap_ba: f64) {
        debug_assert!(a != b);
        self.edges.push((a as u32, b as u32, cap_ab, cap_ba));
    }

    /// Total capacity of every edge, terminal or not.
    pub fn total_capacity(&self) -> f64 {
        self.source_caps.iter().sum::<f64>()
            + self.sink_caps.iter().sum::<f64>()
            + self.edges.iter().map(|e| e.2 + e.3).sum::<f64>()
    }

    /// Cut value of a labeling (`true` = source side).
    pub fn cut_value(&self, source_side: &[bool]) -> f64 {
        let mut v = 0.0;
        for (i, &s) in source_side.iter().enumerate() {
            v += if s { self.sink_caps[i] } else { self.source_caps[i] };
        }
        for &(a, b, ab, ba) in &self.edges {
            match (source_side[a as usize], source_side[b as usize]) {
                (true, false) => v += ab,
                (false, true) => v += ba,
                _ => {}
            }
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct MinCut {
    pub flow: f64,
    /// `true` for nodes on the source side. Nodes reachable from neither
    /// terminal are placed on the sink side.
    pub source_side: Vec<bool>,
}

pub fn min_cut(graph: &FlowGraph) -> MinCut {
    let mut solver = Solver::new(graph);
    let flow = solver.run();
    let source_side = (0..graph.node_count())
        .map(|i| solver.parent[i] != FREE && !solver.is_sink[i])
        .collect();
    MinCut { flow, source_side }
}

struct Solver {
    first: Vec<u32>,
    parent: Vec<u32>,
    ts: Vec<u64>,
    dist: Vec<u32>,
    is_sink: Vec<bool>,
    tr_cap: Vec<f64>,
    in_queue: Vec<bool>,

    head: Vec<u32>,
    next: Vec<u32>,
    r_cap: Vec<f64>,

    active: VecDeque<u32>,
    orphans: VecDeque<u32>,
    time: u64,
    flow: f64,
}

impl Solver {
    fn new(g: &FlowGraph) -> Self {
        let n = g.node_count();
        let m = g.edges.len() * 2;
        let mut s = Solver {
            first: vec![NONE; n],
            parent: vec![FREE; n],
            ts: vec![0; n],
            dist: vec![0; n],
            is_sink: vec![false; n],
            tr_cap: vec![0.0; n],
            in_queue: vec![false; n],
            head: Vec::with_capacity(m),
            next: Vec::with_capacity(m),
            r_cap: Vec::with_capacity(m),
            active: VecDeque::new(),
            orphans: VecDeque::new(),
            time: 0,
            flow: 0.0,
        };
        // direct s -> i -> t flow is pushed immediately
        for i in 0..n {
            let (cs, ct) = (g.source_caps[i], g.sink_caps[i]);
            s.flow += cs.min(ct);
            s.tr_cap[i] = cs - ct;
        }
        for &(a, b, ab, ba) in &g.edges {
            let e = s.head.len() as u32;
            s.head.push(b);
            s.next.push(s.first[a as usize]);
            s.r_cap.push(ab);
            s.first[a as usize] = e;
            s.head.push(a);
            s.next.push(s.first[b as usize]);
            s.r_cap.push(ba);
            s.first[b as usize] = e + 1;
        }
        s
    }

    #[inline]
    fn set_active(&mut self, i: u32) {
        if !self.in_queue[i as usize] {
            self.in_queue[i as usize] = true;
            self.active.push_back(i);
        }
    }

    fn next_active(&mut self) -> Option<u32> {
        while let Some(i) = self.active.pop_front() {
            self.in_queue[i as usize] = false;
            if self.parent[i as usize] != FREE {
                return Some(i);
            }
        }
        None
    }

    fn run(&mut self) -> f64 {
        for i in 0..self.tr_cap.len() {
            let c = self.tr_cap[i];
            if c != 0.0 {
                self.is_sink[i] = c < 0.0;
                self.parent[i] = TERMINAL;
                self.ts[i] = 0;
                self.dist[i] = 1;
                self.set_active(i as u32);
            }
        }

        let mut current: Option<u32> = None;
        loop {
            let i = match current.filter(|&i| self.parent[i as usize] != FREE) {
                Some(i) => i,
                None => match self.next_active() {
                    Some(i) => i,
                    None => break,
                },
            };
            let iu = i as usize;
            let mut bridge = NONE;
            let mut a = self.first[iu];
            if !self.is_sink[iu] {
                while a != NONE {
                    if self.r_cap[a as usize] > 0.0 {
                        let j = self.head[a as usize] as usize;
                        if self.parent[j] == FREE {
                            self.is_sink[j] = false;
                            self.parent[j] = a ^ 1;
                            self.ts[j] = self.ts[iu];
                            self.dist[j] = self.dist[iu] + 1;
                            self.set_active(j as u32);
                        } else if self.is_sink[j] {
                            bridge = a;
                            break;
                        } else if self.ts[j] <= self.ts[iu] && self.dist[j] > self.dist[iu] {
                            self.parent[j] = a ^ 1;
                            self.ts[j] = self.ts[iu];
                            self.dist[j] = self.dist[iu] + 1;
                        }
                    }
                    a = self.next[a as usize];
                }
            } else {
                while a != NONE {
                    if self.r_cap[(a ^ 1) as usize] > 0.0 {
                        let j = self.head[a as usize] as usize;
                        if self.parent[j] == FREE {
                            self.is_sink[j] = true;
                            self.parent[j] = a ^ 1;
                            self.ts[j] = self.ts[iu];
                            self.dist[j] = self.dist[iu] + 1;
                            self.set_active(j as u32);
                        } else if !self.is_sink[j] {
                            bridge = a ^ 1;
                            break;
                        } else if self.ts[j] <= self.ts[iu] && self.dist[j] > self.dist[iu] {
                            self.parent[j] = a ^ 1;
                            self.ts[j] = self.ts[iu];
                            self.dist[j] = self.dist[iu] + 1;
                        }
                    }
                    a = self.next[a as usize];
                }
            }

            self.time += 1;
            if bridge != NONE {
                current = Some(i);
                self.augment(bridge);
                while let Some(o) = self.orphans.pop_front() {
                    if self.is_sink[o as usize] {
                        self.process_sink_orphan(o);
                    } else {
                        self.process_source_orphan(o);
                    }
                }
            } else {
                current = None;
            }
        }
        self.flow
    }

    fn make_orphan_front(&mut self, i: u32) {
        self.parent[i as usize] = ORPHAN;
        self.orphans.push_front(i);
    }

    fn make_orphan_rear(&mut self, i: u32) {
        self.parent[i as usize] = ORPHAN;
        self.orphans.push_back(i);
    }

    /// `bridge` runs from a source-tree node to a sink-tree node.
    fn augment(&mut self, bridge: u32) {
        let mut bottleneck = self.r_cap[bridge as usize];

        let mut i = self.head[(bridge ^ 1) as usize] as usize;
        loop {
            let a = self.parent[i];
            if a == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.r_cap[(a ^ 1) as usize]);
            i = self.head[a as usize] as usize;
        }
        bottleneck = bottleneck.min(self.tr_cap[i]);

        let mut i = self.head[bridge as usize] as usize;
        loop {
            let a = self.parent[i];
            if a == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.r_cap[a as usize]);
            i = self.head[a as usize] as usize;
        }
        bottleneck = bottleneck.min(-self.tr_cap[i]);

        self.r_cap[(bridge ^ 1) as usize] += bottleneck;
        self.r_cap[bridge as usize] -= bottleneck;

        let mut i = self.head[(bridge ^ 1) as usize] as usize;
        loop {
            let a = self.parent[i];
            if a == TERMINAL {
                break;
            }
            self.r_cap[a as usize] += bottleneck;
            self.r_cap[(a ^ 1) as usize] -= bottleneck;
            if self.r_cap[(a ^ 1) as usize] <= 0.0 {
                self.make_orphan_front(i as u32);
            }
            i = self.head[a as usize] as usize;
        }
        self.tr_cap[i] -= bottleneck;
        if self.tr_cap[i] <= 0.0 {
            self.make_orphan_front(i as u32);
        }

        let mut i = self.head[bridge as usize] as usize;
        loop {
            let a = self.parent[i];
            if a == TERMINAL {
                break;
            }
            self.r_cap[(a ^ 1) as usize] += bottleneck;
            self.r_cap[a as usize] -= bottleneck;
            if self.r_cap[a as usize] <= 0.0 {
                self.make_orphan_front(i as u32);
            }
            i = self.head[a as usize] as usize;
        }
        self.tr_cap[i] += bottleneck;
        if self.tr_cap[i] >= 0.0 {
            self.make_orphan_front(i as u32);
        }

        self.flow += bottleneck;
    }

    /// Distance from `j` to its terminal, or `INFINITE_D` if the path hits an orphan.
    fn origin_distance(&mut self, start: usize) -> u32 {
        let mut j = start;
        let mut d: u32 = 0;
        loop {
            if self.ts[j] == self.time {
                d += self.dist[j];
                break;
            }
            let a = self.parent[j];
            d += 1;
            if a == TERMINAL {
                self.ts[j] = self.time;
                self.dist[j] = 1;
                break;
            }
            if a == ORPHAN {
                return INFINITE_D;
            }
            j = self.head[a as usize] as usize;
        }
        // mark the path so later walks stop early
        let mut j = start;
        let mut dd = d;
        while self.ts[j] != self.time {
            self.ts[j] = self.time;
            self.dist[j] = dd;
            dd -= 1;
            j = self.head[self.parent[j] as usize] as usize;
        }
        d
    }

    fn process_source_orphan(&mut self, i: u32) {
        self.process_orphan(i, false);
    }

    fn process_sink_orphan(&mut self, i: u32) {
        self.process_orphan(i, true);
    }

    fn process_orphan(&mut self, i: u32, sink: bool) {
        let iu = i as usize;
        let mut best = NONE;
        let mut best_d = INFINITE_D;

        let mut a0 = self.first[iu];
        while a0 != NONE {
            // residual capacity toward i for the source tree, away from i for the sink tree
            let cap = if sink {
                self.r_cap[a0 as usize]
            } else {
                self.r_cap[(a0 ^ 1) as usize]
            };
            if cap > 0.0 {
                let j = self.head[a0 as usize] as usize;
                if self.is_sink[j] == sink && self.parent[j] != FREE {
                    let d = self.origin_distance(j);
                    if d < best_d {
                        best = a0;
                        best_d = d;
                    }
                }
            }
            a0 = self.next[a0 as usize];
        }

        if best != NONE {
            self.parent[iu] = best;
            self.ts[iu] = self.time;
            self.dist[iu] = best_d + 1;
            return;
        }

        self.parent[iu] = FREE;
        let mut a0 = self.first[iu];
        while a0 != NONE {
            let j = self.head[a0 as usize] as usize;
            let a = self.parent[j];
            if self.is_sink[j] == sink && a != FREE {
                let cap = if sink {
                    self.r_cap[a0 as usize]
                } else {
                    self.r_cap[(a0 ^ 1) as usize]
                };
                if cap > 0.0 {
                    self.set_active(j as u32);
                }
                if a != TERMINAL && a != ORPHAN && self.head[a as usize] == i {
                    self.make_orphan_rear(j as u32);
                }
            }
            a0 = self.next[a0 as usize];
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;

    /// Exhaustive minimum over all 2^n labelings.
    fn brute_force(g: &FlowGraph) -> f64 {
        let n = g.node_count();
        (0u32..1 << n)
            .map(|bits| {
                let side: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
                g.cut_value(&side)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn single_node_cuts_smaller_terminal_edge() {
        let mut g = FlowGraph::new(1);
        g.add_terminal_caps(0, 1.0, 2.0);
        let cut = min_cut(&g);
        assert_eq!(cut.flow, 1.0);
        assert_eq!(cut.source_side, vec![false]);
    }

    #[test]
    fn chain_bottleneck() {
        // s -> 0 -> 1 -> 2 -> t with a weak middle link
        let mut g = FlowGraph::new(3);
        g.add_terminal_caps(0, 5.0, 0.0);
        g.add_terminal_caps(2, 0.0, 5.0);
        g.add_edge(0, 1, 4.0, 0.0);
        g.add_edge(1, 2, 1.5, 0.0);
        let cut = min_cut(&g);
        assert_eq!(cut.flow, 1.5);
        assert_eq!(cut.source_side, vec![true, true, false]);
        assert_eq!(g.cut_value(&cut.source_side), cut.flow);
    }

    #[test]
    fn isolated_node_goes_to_sink_side() {
        let g = FlowGraph::new(2);
        let cut = min_cut(&g);
        assert_eq!(cut.source_side, vec![false, false]);
        assert_eq!(cut.flow, 0.0);
    }

    #[test]
    fn matches_brute_force_on_random_graphs() {
        let mut rng = seeded(7);
        for _ in 0..300 {
            let n = rng.gen_range(1..=10);
            let mut g = FlowGraph::new(n);
            for i in 0..n {
                g.add_terminal_caps(i, rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
            }
            for a in 0..n {
                for b in a + 1..n {
                    if rng.gen_bool(0.4) {
                        g.add_edge(a, b, rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0));
                    }
                }
            }
            let cut = min_cut(&g);
            let best = brute_force(&g);
            let got = g.cut_value(&cut.source_side);
            assert!((got - best).abs() < 1e-9, "cut {got} vs brute {best}");
            assert!((cut.flow - best).abs() < 1e-9, "flow {} vs {best}", cut.flow);
        }
    }

    #[test]
    fn grid_flow_equals_cut() {
        let mut rng = seeded(11);
        let (w, h) = (40, 30);
        let mut g = FlowGraph::new(w * h);
        for i in 0..w * h {
            g.add_terminal_caps(i, rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let c = rng.gen_range(0.0..0.5);
                    g.add_edge(i, i + 1, c, c);
                }
                if y + 1 < h {
                    let c = rng.gen_range(0.0..0.5);
                    g.add_edge(i, i + w, c, c);
                }
            }
        }
        let cut = min_cut(&g);
        assert!((g.cut_value(&cut.source_side) - cut.flow).abs() < 1e-9);
    }

    fn seeded(seed: u64) -> rand::rngs::StdRng {
        rand::rngs::StdRng::seed_from_u64(seed)
    }
}
