//! Synthetic grid road networks: directed lanes with curb parking
//! spaces, blocks, fixed-time signals, routing, and walking distances.
//!
//! Networks are immutable after construction, so any number of
//! simulation replicas can read one instance concurrently.

use std::collections::BTreeMap;

use thiserror::Error;

/// Cell size of the microscopic model. Lane lengths must be multiples
/// of this so occupancy and queue capacity are exact integers.
pub const CELL_LENGTH_M: f64 = 7.5;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("configuration error: field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error("routing error: no path from node {from} to node {to}")]
    Routing { from: u32, to: u32 },
    #[error("contract violation: {0}")]
    Contract(String),
}

macro_rules! id_type {
    ($name:ident) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(NodeId);
id_type!(LaneId);
id_type!(SpaceId);
id_type!(BlockId);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Intersection { row: u32, col: u32 },
    /// Boundary trip source/sink attached to one intersection.
    External { attached: NodeId },
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub x_m: f64,
    pub y_m: f64,
}

/// Travel direction, with rows growing southward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    North,
    South,
    East,
    West,
}

impl Direction {
    pub fn is_ns(self) -> bool {
        matches!(self, Direction::North | Direction::South)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LaneKind {
    Internal,
    EntryStub,
    ExitStub,
}

#[derive(Clone, Debug)]
pub struct Lane {
    pub id: LaneId,
    pub from: NodeId,
    pub to: NodeId,
    pub length_m: f64,
    pub speed_mps: f64,
    /// Cell count per sub-lane: `length / CELL_LENGTH_M`.
    pub cells: usize,
    /// Free-flow speed in cells per second.
    pub vmax_cells: usize,
    pub kind: LaneKind,
    pub dir: Direction,
    /// Space ids ordered by position ascending.
    pub spaces: Vec<SpaceId>,
    /// Lanes sharing this lane's start or end intersection, sorted by id.
    pub neighbors: Vec<LaneId>,
    /// Blocks this lane geometrically borders (one or two for internal lanes).
    pub blocks: Vec<BlockId>,
    /// The single block agent that gates this lane's actions.
    pub owner_block: Option<BlockId>,
}

impl Lane {
    /// M_j: number of parking spaces on the lane.
    pub fn space_count(&self) -> usize {
        self.spaces.len()
    }

    pub fn free_flow_s(&self) -> f64 {
        self.length_m / self.speed_mps
    }
}

#[derive(Clone, Debug)]
pub struct ParkingSpace {
    pub id: SpaceId,
    pub lane: LaneId,
    /// Meters from the lane start.
    pub position_m: f64,
    /// Curb cell the space occupies.
    pub cell: usize,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub id: BlockId,
    /// Closed directed cycle around the block, usable as a cruising loop.
    pub cycle: Vec<LaneId>,
    /// All directed lanes on the block's four edges.
    pub lanes: Vec<LaneId>,
    pub spaces: Vec<SpaceId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    pub green_ns: bool,
    pub green_ew: bool,
    pub duration_s: u32,
}

/// Fixed-time plan shared by all intersections, with optional
/// per-intersection cycle offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalPlan {
    pub phases: Vec<Phase>,
    pub offsets: BTreeMap<NodeId, u32>,
}

impl SignalPlan {
    pub fn two_phase(ns_green_s: u32, ew_green_s: u32) -> Self {
        Self {
            phases: vec![
                Phase { green_ns: true, green_ew: false, duration_s: ns_green_s },
                Phase { green_ns: false, green_ew: true, duration_s: ew_green_s },
            ],
            offsets: BTreeMap::new(),
        }
    }

    pub fn all_green() -> Self {
        Self {
            phases: vec![Phase { green_ns: true, green_ew: true, duration_s: 1 }],
            offsets: BTreeMap::new(),
        }
    }

    pub fn cycle_s(&self) -> u32 {
        self.phases.iter().map(|p| p.duration_s).sum()
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.phases.is_empty() || self.phases.iter().any(|p| p.duration_s == 0) {
            return Err(NetError::Config {
                field: "signal_plan",
                message: "phases must be nonempty with positive durations".into(),
            });
        }
        Ok(())
    }

    /// The single phase active at time `t` for an intersection.
    pub fn phase_at(&self, intersection: NodeId, t: u32) -> &Phase {
        let cycle = self.cycle_s();
        let offset = self.offsets.get(&intersection).copied().unwrap_or(0);
        let mut rem = (t + offset) % cycle;
        for p in &self.phases {
            if rem < p.duration_s {
                return p;
            }
            rem -= p.duration_s;
        }
        unreachable!("phase durations sum to the cycle length")
    }

    pub fn is_green(&self, intersection: NodeId, dir: Direction, t: u32) -> bool {
        let p = self.phase_at(intersection, t);
        if dir.is_ns() {
            p.green_ns
        } else {
            p.green_ew
        }
    }
}

#[derive(Clone, Debug)]
pub struct RoadNetwork {
    pub nodes: Vec<Node>,
    pub lanes: Vec<Lane>,
    pub spaces: Vec<ParkingSpace>,
    pub blocks: Vec<Block>,
    pub entries: Vec<NodeId>,
    pub exits: Vec<NodeId>,
    pub signal: SignalPlan,
    pub rows: u32,
    pub cols: u32,
    out_lanes: Vec<Vec<LaneId>>,
    in_lanes: Vec<Vec<LaneId>>,
    /// Undirected node-to-node walking metric, meters.
    node_dist: Vec<f64>,
    /// Per space: all spaces sorted by (walking distance, id). Self first.
    space_order: Vec<Vec<(SpaceId, f64)>>,
    lane_by_nodes: BTreeMap<(NodeId, NodeId), LaneId>,
}

/// Build a grid of `rows x cols` intersections joined by bidirectional
/// lanes, with entry/exit stubs on every boundary intersection, evenly
/// spaced curb parking on internal lanes, and enumerated blocks.
pub fn build_grid(
    rows: u32,
    cols: u32,
    lane_length_m: f64,
    spaces_per_lane: u32,
    speed_mps: f64,
    signal: SignalPlan,
) -> Result<RoadNetwork, NetError> {
    if rows < 2 {
        return Err(NetError::Config { field: "rows", message: format!("must be >= 2, got {rows}") });
    }
    if cols < 2 {
        return Err(NetError::Config { field: "cols", message: format!("must be >= 2, got {cols}") });
    }
    let cells_f = lane_length_m / CELL_LENGTH_M;
    if !(lane_length_m > 0.0) || (cells_f - cells_f.round()).abs() > 1e-9 || cells_f.round() < 2.0 {
        return Err(NetError::Config {
            field: "lane_length",
            message: format!("must be a positive multiple of {CELL_LENGTH_M} m (>= 2 cells), got {lane_length_m}"),
        });
    }
    let cells = cells_f.round() as usize;
    let vmax_f = speed_mps / CELL_LENGTH_M;
    if !(speed_mps > 0.0) || (vmax_f - vmax_f.round()).abs() > 1e-9 || vmax_f.round() < 1.0 {
        return Err(NetError::Config {
            field: "speed",
            message: format!("must be a positive multiple of {CELL_LENGTH_M} m/s, got {speed_mps}"),
        });
    }
    let vmax = vmax_f.round() as usize;
    if spaces_per_lane as usize > cells - 1 {
        return Err(NetError::Config {
            field: "spaces_per_lane",
            message: format!("exceeds curb cell capacity {} of a {lane_length_m} m lane", cells - 1),
        });
    }
    signal.validate()?;

    let l = lane_length_m;
    let mut nodes = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            nodes.push(Node {
                id: NodeId((r * cols + c) as u32),
                kind: NodeKind::Intersection { row: r, col: c },
                x_m: c as f64 * l,
                y_m: r as f64 * l,
            });
        }
    }
    let node_at = |r: u32, c: u32| NodeId(r * cols + c);

    // External trip sources/sinks on every boundary intersection.
    let mut externals: Vec<NodeId> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let boundary = r == 0 || r == rows - 1 || c == 0 || c == cols - 1;
            if !boundary {
                continue;
            }
            let id = NodeId(nodes.len() as u32);
            let dx = if c == 0 { -1.0 } else if c == cols - 1 { 1.0 } else { 0.0 };
            let dy = if r == 0 { -1.0 } else if r == rows - 1 { 1.0 } else { 0.0 };
            nodes.push(Node {
                id,
                kind: NodeKind::External { attached: node_at(r, c) },
                x_m: c as f64 * l + dx * l,
                y_m: r as f64 * l + dy * l,
            });
            externals.push(id);
        }
    }

    let mut lanes: Vec<Lane> = Vec::new();
    let mut lane_by_nodes = BTreeMap::new();
    let mut push_lane = |lanes: &mut Vec<Lane>,
                         lane_by_nodes: &mut BTreeMap<(NodeId, NodeId), LaneId>,
                         from: NodeId,
                         to: NodeId,
                         dir: Direction,
                         kind: LaneKind| {
        let id = LaneId(lanes.len() as u32);
        lanes.push(Lane {
            id,
            from,
            to,
            length_m: l,
            speed_mps,
            cells,
            vmax_cells: vmax,
            kind,
            dir,
            spaces: Vec::new(),
            neighbors: Vec::new(),
            blocks: Vec::new(),
            owner_block: None,
        });
        lane_by_nodes.insert((from, to), id);
        id
    };

    for r in 0..rows {
        for c in 0..cols - 1 {
            let a = node_at(r, c);
            let b = node_at(r, c + 1);
            push_lane(&mut lanes, &mut lane_by_nodes, a, b, Direction::East, LaneKind::Internal);
            push_lane(&mut lanes, &mut lane_by_nodes, b, a, Direction::West, LaneKind::Internal);
        }
    }
    for c in 0..cols {
        for r in 0..rows - 1 {
            let a = node_at(r, c);
            let b = node_at(r + 1, c);
            push_lane(&mut lanes, &mut lane_by_nodes, a, b, Direction::South, LaneKind::Internal);
            push_lane(&mut lanes, &mut lane_by_nodes, b, a, Direction::North, LaneKind::Internal);
        }
    }
    for &ext in &externals {
        let attached = match nodes[ext.index()].kind {
            NodeKind::External { attached } => attached,
            _ => unreachable!(),
        };
        // Stub direction from geometry, used only for bookkeeping; stub
        // stop lines are uncontrolled.
        let (nx, ny) = (nodes[ext.index()].x_m, nodes[ext.index()].y_m);
        let (ax, ay) = (nodes[attached.index()].x_m, nodes[attached.index()].y_m);
        let dir_in = if (ax - nx).abs() >= (ay - ny).abs() {
            if ax >= nx { Direction::East } else { Direction::West }
        } else if ay >= ny {
            Direction::South
        } else {
            Direction::North
        };
        let dir_out = match dir_in {
            Direction::East => Direction::West,
            Direction::West => Direction::East,
            Direction::North => Direction::South,
            Direction::South => Direction::North,
        };
        push_lane(&mut lanes, &mut lane_by_nodes, ext, attached, dir_in, LaneKind::EntryStub);
        push_lane(&mut lanes, &mut lane_by_nodes, attached, ext, dir_out, LaneKind::ExitStub);
    }

    // Evenly spaced spaces along the curb, excluding the final cell
    // before the stop line.
    let mut spaces: Vec<ParkingSpace> = Vec::new();
    for lane in lanes.iter_mut() {
        if lane.kind != LaneKind::Internal {
            continue;
        }
        let usable = lane.length_m - CELL_LENGTH_M;
        let m = spaces_per_lane as usize;
        let mut last_cell: Option<usize> = None;
        for k in 0..m {
            let pos = (k as f64 + 0.5) * usable / m as f64;
            let cell = (pos / CELL_LENGTH_M).floor() as usize;
            assert!(cell + 1 < lane.cells, "space placed in the stop-line cell");
            assert!(last_cell != Some(cell), "two spaces share a curb cell");
            last_cell = Some(cell);
            let id = SpaceId(spaces.len() as u32);
            spaces.push(ParkingSpace { id, lane: lane.id, position_m: pos, cell });
            lane.spaces.push(id);
        }
    }

    // Blocks: (rows-1)(cols-1), each with a clockwise cruising cycle.
    let mut blocks: Vec<Block> = Vec::new();
    for br in 0..rows - 1 {
        for bc in 0..cols - 1 {
            let id = BlockId(blocks.len() as u32);
            let tl = node_at(br, bc);
            let tr = node_at(br, bc + 1);
            let brn = node_at(br + 1, bc + 1);
            let bl = node_at(br + 1, bc);
            let cyc = [(tl, tr), (tr, brn), (brn, bl), (bl, tl)];
            let cycle: Vec<LaneId> = cyc.iter().map(|k| lane_by_nodes[k]).collect();
            let mut members: Vec<LaneId> = Vec::new();
            for (a, b) in [(tl, tr), (tr, brn), (brn, bl), (bl, tl)] {
                members.push(lane_by_nodes[&(a, b)]);
                members.push(lane_by_nodes[&(b, a)]);
            }
            members.sort();
            let mut block_spaces: Vec<SpaceId> = Vec::new();
            for &lid in &members {
                block_spaces.extend(lanes[lid.index()].spaces.iter().copied());
                lanes[lid.index()].blocks.push(id);
            }
            for &lid in &cycle {
                lanes[lid.index()].owner_block = Some(id);
            }
            blocks.push(Block { id, cycle, lanes: members, spaces: block_spaces });
        }
    }
    for lane in lanes.iter_mut() {
        if lane.kind == LaneKind::Internal && lane.owner_block.is_none() {
            lane.owner_block = lane.blocks.first().copied();
        }
    }

    // Neighborhoods: lanes sharing either endpoint, sorted by id.
    let mut touching: BTreeMap<NodeId, Vec<LaneId>> = BTreeMap::new();
    for lane in &lanes {
        touching.entry(lane.from).or_default().push(lane.id);
        touching.entry(lane.to).or_default().push(lane.id);
    }
    for i in 0..lanes.len() {
        let me = lanes[i].id;
        let mut n: Vec<LaneId> = touching[&lanes[i].from]
            .iter()
            .chain(touching[&lanes[i].to].iter())
            .copied()
            .filter(|&x| x != me)
            .collect();
        n.sort();
        n.dedup();
        lanes[i].neighbors = n;
    }

    let mut out_lanes = vec![Vec::new(); nodes.len()];
    let mut in_lanes = vec![Vec::new(); nodes.len()];
    for lane in &lanes {
        out_lanes[lane.from.index()].push(lane.id);
        in_lanes[lane.to.index()].push(lane.id);
    }
    for v in out_lanes.iter_mut().chain(in_lanes.iter_mut()) {
        v.sort();
    }

    // Undirected walking metric between nodes (Floyd-Warshall).
    let n = nodes.len();
    let mut dist = vec![f64::INFINITY; n * n];
    for i in 0..n {
        dist[i * n + i] = 0.0;
    }
    for lane in &lanes {
        let (a, b) = (lane.from.index(), lane.to.index());
        if lane.length_m < dist[a * n + b] {
            dist[a * n + b] = lane.length_m;
            dist[b * n + a] = lane.length_m;
        }
    }
    for k in 0..n {
        for i in 0..n {
            let dik = dist[i * n + k];
            if !dik.is_finite() {
                continue;
            }
            for j in 0..n {
                let alt = dik + dist[k * n + j];
                if alt < dist[i * n + j] {
                    dist[i * n + j] = alt;
                }
            }
        }
    }

    let entries = externals.clone();
    let exits = externals;
    let mut net = RoadNetwork {
        nodes,
        lanes,
        spaces,
        blocks,
        entries,
        exits,
        signal,
        rows,
        cols,
        out_lanes,
        in_lanes,
        node_dist: dist,
        space_order: Vec::new(),
        lane_by_nodes,
    };

    let mut order = Vec::with_capacity(net.spaces.len());
    for a in &net.spaces {
        let mut row: Vec<(SpaceId, f64)> = net
            .spaces
            .iter()
            .map(|b| (b.id, net.walk_between_spaces(a.id, b.id)))
            .collect();
        row.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap().then(x.0.cmp(&y.0)));
        order.push(row);
    }
    net.space_order = order;
    Ok(net)
}

impl RoadNetwork {
    pub fn lane(&self, id: LaneId) -> &Lane {
        &self.lanes[id.index()]
    }

    pub fn space(&self, id: SpaceId) -> &ParkingSpace {
        &self.spaces[id.index()]
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id.index()]
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn lane_between(&self, from: NodeId, to: NodeId) -> Option<LaneId> {
        self.lane_by_nodes.get(&(from, to)).copied()
    }

    pub fn out_lanes(&self, node: NodeId) -> &[LaneId] {
        &self.out_lanes[node.index()]
    }

    pub fn internal_lanes(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.iter().filter(|l| l.kind == LaneKind::Internal)
    }

    /// The entry stub lane of an external entry node.
    pub fn entry_lane(&self, entry: NodeId) -> Option<LaneId> {
        self.out_lanes(entry).first().copied()
    }

    pub fn is_green(&self, lane: &Lane, t: u32) -> bool {
        match lane.kind {
            // Stub stop lines are uncontrolled.
            LaneKind::EntryStub | LaneKind::ExitStub => true,
            LaneKind::Internal => self.signal.is_green(lane.to, lane.dir, t),
        }
    }

    fn lane_cost_ns(&self, lane: &Lane) -> u64 {
        (lane.length_m / lane.speed_mps * 1e9).round() as u64
    }

    /// Minimal free-flow-time route, breaking cost ties toward the
    /// lexicographically smallest lane-id sequence.
    pub fn shortest_path(&self, from: NodeId, to: NodeId) -> Result<Vec<LaneId>, NetError> {
        if from.index() >= self.nodes.len() || to.index() >= self.nodes.len() {
            return Err(NetError::Routing { from: from.0, to: to.0 });
        }
        if from == to {
            return Ok(Vec::new());
        }
        let n = self.nodes.len();
        let mut dist = vec![u64::MAX; n];
        dist[to.index()] = 0;
        let mut heap = std::collections::BinaryHeap::new();
        heap.push(std::cmp::Reverse((0u64, to)));
        while let Some(std::cmp::Reverse((d, u))) = heap.pop() {
            if d > dist[u.index()] {
                continue;
            }
            for &lid in &self.in_lanes[u.index()] {
                let lane = self.lane(lid);
                let alt = d.saturating_add(self.lane_cost_ns(lane));
                if alt < dist[lane.from.index()] {
                    dist[lane.from.index()] = alt;
                    heap.push(std::cmp::Reverse((alt, lane.from)));
                }
            }
        }
        if dist[from.index()] == u64::MAX {
            return Err(NetError::Routing { from: from.0, to: to.0 });
        }
        let mut route = Vec::new();
        let mut cur = from;
        while cur != to {
            let mut chosen: Option<LaneId> = None;
            for &lid in &self.out_lanes[cur.index()] {
                let lane = self.lane(lid);
                if dist[lane.to.index()] != u64::MAX
                    && self.lane_cost_ns(lane) + dist[lane.to.index()] == dist[cur.index()]
                {
                    chosen = Some(lid);
                    break;
                }
            }
            let lid = chosen.expect("finite distance implies an on-path lane");
            route.push(lid);
            cur = self.lane(lid).to;
        }
        Ok(route)
    }

    /// Free-flow travel time of a lane route in seconds.
    pub fn route_free_flow_s(&self, route: &[LaneId]) -> f64 {
        route.iter().map(|&l| self.lane(l).free_flow_s()).sum()
    }

    /// The `c` spaces closest to the lane's ending intersection.
    pub fn restricted_prefix(&self, lane: &Lane, c: u32) -> Result<Vec<SpaceId>, NetError> {
        let m = lane.space_count();
        if c as usize > m {
            return Err(NetError::Contract(format!(
                "restricted_prefix: C={c} out of range 0..={m} on lane {}",
                lane.id
            )));
        }
        Ok(lane.spaces[m - c as usize..].to_vec())
    }

    /// Walking distance along the network between two node positions.
    pub fn node_walk_m(&self, a: NodeId, b: NodeId) -> f64 {
        self.node_dist[a.index() * self.nodes.len() + b.index()]
    }

    /// Walking distance between two curb positions.
    pub fn walk_between_spaces(&self, a: SpaceId, b: SpaceId) -> f64 {
        let sa = self.space(a);
        let sb = self.space(b);
        let la = self.lane(sa.lane);
        let lb = self.lane(sb.lane);
        let mut best = if sa.lane == sb.lane {
            (sa.position_m - sb.position_m).abs()
        } else {
            f64::INFINITY
        };
        for (ua, wa) in [(la.from, sa.position_m), (la.to, la.length_m - sa.position_m)] {
            for (ub, wb) in [(lb.from, sb.position_m), (lb.to, lb.length_m - sb.position_m)] {
                let d = wa + self.node_walk_m(ua, ub) + wb;
                if d < best {
                    best = d;
                }
            }
        }
        best
    }

    /// Walking distance from a curb position to a node.
    pub fn walk_space_to_node(&self, s: SpaceId, node: NodeId) -> f64 {
        let sp = self.space(s);
        let lane = self.lane(sp.lane);
        let via_from = sp.position_m + self.node_walk_m(lane.from, node);
        let via_to = (lane.length_m - sp.position_m) + self.node_walk_m(lane.to, node);
        via_from.min(via_to)
    }

    /// All spaces ordered by walking distance from `s` (self first),
    /// ties broken by space id.
    pub fn spaces_by_walk_distance(&self, s: SpaceId) -> &[(SpaceId, f64)] {
        &self.space_order[s.index()]
    }

    /// Space with minimal walking distance to `node`, ties by id.
    pub fn nearest_space_to_node(&self, node: NodeId) -> Option<SpaceId> {
        self.spaces
            .iter()
            .map(|s| (s.id, self.walk_space_to_node(s.id, node)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
            .map(|(id, _)| id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spaces_land_on_distinct_curb_cells() {
        let net = build_grid(2, 2, 150.0, 19, 15.0, SignalPlan::two_phase(30, 30)).unwrap();
        for lane in net.internal_lanes() {
            let mut cells: Vec<usize> = lane.spaces.iter().map(|&s| net.space(s).cell).collect();
            let len = cells.len();
            cells.dedup();
            assert_eq!(len, cells.len());
            assert!(cells.iter().all(|&c| c + 1 < lane.cells));
        }
    }

    #[test]
    fn invalid_dimensions_name_the_field() {
        let err = build_grid(1, 3, 150.0, 10, 15.0, SignalPlan::two_phase(30, 30)).unwrap_err();
        assert!(err.to_string().contains("rows"), "{err}");
        let err = build_grid(3, 3, 100.0, 10, 15.0, SignalPlan::two_phase(30, 30)).unwrap_err();
        assert!(err.to_string().contains("lane_length"), "{err}");
        let err = build_grid(3, 3, 150.0, 25, 15.0, SignalPlan::two_phase(30, 30)).unwrap_err();
        assert!(err.to_string().contains("spaces_per_lane"), "{err}");
    }

    #[test]
    fn signal_phase_partition() {
        let plan = SignalPlan::two_phase(30, 30);
        let node = NodeId(0);
        for t in 0..120 {
            let p = plan.phase_at(node, t);
            assert!(p.green_ns != p.green_ew);
            assert_eq!(p.green_ns, (t % 60) < 30);
        }
    }
}
