//! Deterministic discrete-time microscopic traffic engine (1 s steps):
//! car following on two sub-lanes (curb and through), fixed-time
//! signals, the curb-parking lifecycle, and the nearest-available
//! parking search with block cruising as the fallback.
//!
//! All randomness lives in the trip schedule; stepping a state is a
//! pure function of the schedule and configuration, so equal seeds
//! yield identical event logs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::net::{LaneId, LaneKind, NetError, NodeId, RoadNetwork, SpaceId};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VehicleId(pub u32);

impl VehicleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One planned trip. Parking vehicles aim for the space nearest their
/// destination and dwell for the drawn duration.
#[derive(Clone, Debug, PartialEq)]
pub struct TripSpec {
    pub vehicle: VehicleId,
    pub spawn_s: u32,
    pub entry: NodeId,
    pub exit: NodeId,
    pub parking_duration_s: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripSchedule {
    pub trips: Vec<TripSpec>,
    pub seed: u64,
    pub horizon_s: u32,
}

/// Poisson arrivals at `rate_veh_per_min`, uniform over entry stubs,
/// destinations uniform over exit stubs excluding the entry, parking
/// flags Bernoulli(p) with exponential dwell times.
pub fn generate_schedule(
    net: &RoadNetwork,
    rate_veh_per_min: f64,
    parking_probability: f64,
    mean_duration_s: f64,
    horizon_s: u32,
    seed: u64,
) -> Result<TripSchedule, SimError> {
    if net.entries.is_empty() {
        return Err(SimError::Config {
            field: "entries",
            message: "network has zero entry stubs".into(),
        });
    }
    if !(rate_veh_per_min > 0.0) {
        return Err(SimError::Config {
            field: "insertion_rate",
            message: format!("must be positive, got {rate_veh_per_min}"),
        });
    }
    if !(0.0..=1.0).contains(&parking_probability) {
        return Err(SimError::Config {
            field: "parking_probability",
            message: format!("must be in [0,1], got {parking_probability}"),
        });
    }
    if horizon_s == 0 {
        return Err(SimError::Config { field: "horizon", message: "must be positive".into() });
    }
    if parking_probability > 0.0 && !(mean_duration_s > 0.0) {
        return Err(SimError::Config {
            field: "mean_duration",
            message: format!("must be positive, got {mean_duration_s}"),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inter = Exp::new(rate_veh_per_min / 60.0).expect("positive rate");
    let mut trips = Vec::new();
    let mut clock = 0.0f64;
    loop {
        clock += inter.sample(&mut rng);
        if clock >= horizon_s as f64 {
            break;
        }
        let spawn_s = clock.floor() as u32;
        let entry = net.entries[rng.random_range(0..net.entries.len())];
        let exit_pool: Vec<NodeId> = net.exits.iter().copied().filter(|&e| e != entry).collect();
        let exit = exit_pool[rng.random_range(0..exit_pool.len())];
        let parking_duration_s = if rng.random::<f64>() < parking_probability {
            let d = Exp::new(1.0 / mean_duration_s).expect("positive mean").sample(&mut rng);
            Some((d.round() as u32).max(1))
        } else {
            None
        };
        trips.push(TripSpec {
            vehicle: VehicleId(trips.len() as u32),
            spawn_s,
            entry,
            exit,
            parking_duration_s,
        });
    }
    Ok(TripSchedule { trips, seed, horizon_s })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VehiclePhase {
    /// Spawned but waiting outside a full entry stub.
    Queued,
    Driving,
    /// Near the target: parking search active.
    Searching,
    /// Looping the block waiting for a space.
    Cruising,
    Parked,
    /// Driving out after parking; walking already accounted.
    WalkAccounted,
    Departed,
}

impl VehiclePhase {
    pub fn on_road(self) -> bool {
        matches!(
            self,
            VehiclePhase::Driving
                | VehiclePhase::Searching
                | VehiclePhase::Cruising
                | VehiclePhase::WalkAccounted
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubLane {
    Curb,
    Through,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Position {
    pub lane: LaneId,
    pub sub: SubLane,
    pub cell: usize,
}

#[derive(Clone, Debug)]
pub struct ParkIntent {
    /// P_t: the ideal space, nearest the destination.
    pub target: SpaceId,
    pub duration_s: u32,
    /// Space currently being driven to.
    pub choice: Option<SpaceId>,
    /// First lane of the cruising loop; re-search on each pass.
    pub cruise_anchor: Option<LaneId>,
}

#[derive(Clone, Debug)]
pub struct Vehicle {
    pub id: VehicleId,
    pub spawn_s: u32,
    pub entry: NodeId,
    pub exit: NodeId,
    pub intent: Option<ParkIntent>,
    pub phase: VehiclePhase,
    pub pos: Option<Position>,
    pub speed_cells: usize,
    /// Remaining route; front is the current lane while on the road.
    pub route: VecDeque<LaneId>,
    pub entered_s: Option<u32>,
    pub arrived_s: Option<u32>,
    pub parked_since: Option<u32>,
    pub dwell_s: u32,
    pub walk_m: Option<f64>,
    /// Free-flow time of the ideal trip, fixed at spawn.
    pub freeflow_s: f64,
    /// Time loss accrued so far (queueing plus sub-free-flow driving).
    pub loss_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpaceStatus {
    Vacant,
    Occupied,
    Restricted,
    RestrictedOccupied,
}

impl SpaceStatus {
    pub fn has_occupant(self) -> bool {
        matches!(self, SpaceStatus::Occupied | SpaceStatus::RestrictedOccupied)
    }

    pub fn is_restricted(self) -> bool {
        matches!(self, SpaceStatus::Restricted | SpaceStatus::RestrictedOccupied)
    }

    /// Available to a new parker.
    pub fn is_available(self) -> bool {
        self == SpaceStatus::Vacant
    }
}

#[derive(Clone, Debug)]
pub struct SpaceState {
    pub status: SpaceStatus,
    pub occupant: Option<VehicleId>,
}

/// Per-lane interval accumulators backing the reward signal.
#[derive(Clone, Debug, Default)]
pub struct LaneIntervalStats {
    pub loss_sum_s: f64,
    pub vehicles: BTreeSet<VehicleId>,
    pub walk_sum_m: f64,
    pub walk_n: u32,
}

#[derive(Clone, Debug)]
pub struct LaneRt {
    pub curb: Vec<Option<VehicleId>>,
    pub through: Vec<Option<VehicleId>>,
    /// C_j: cleared (restricted) space count.
    pub cleared: u32,
    /// Vehicles currently traversing the lane (either sub-lane).
    pub on_lane: u32,
    pub interval: LaneIntervalStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Enter,
    Park,
    Unpark,
    Depart,
    Cruise,
    GateAllow,
    GateDeny,
    Release,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Enter => "enter",
            EventKind::Park => "park",
            EventKind::Unpark => "unpark",
            EventKind::Depart => "depart",
            EventKind::Cruise => "cruise",
            EventKind::GateAllow => "gate_allow",
            EventKind::GateDeny => "gate_deny",
            EventKind::Release => "release",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventPlace {
    Lane(LaneId),
    Space(SpaceId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub t: u32,
    pub kind: EventKind,
    pub vehicle: Option<VehicleId>,
    pub place: EventPlace,
}

impl Event {
    pub fn csv_row(&self) -> String {
        let vid = self.vehicle.map(|v| v.to_string()).unwrap_or_default();
        let place = match self.place {
            EventPlace::Lane(l) => format!("lane:{l}"),
            EventPlace::Space(s) => format!("space:{s}"),
        };
        format!("{},{},{},{}", self.t, self.kind.as_str(), vid, place)
    }
}

/// Outcome of one parking-search invocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParkDecision {
    ParkAt(SpaceId),
    Cruise,
}

#[derive(Clone, Debug)]
pub struct SimState {
    pub net: Arc<RoadNetwork>,
    pub t: u32,
    pub vehicles: Vec<Vehicle>,
    pub spaces: Vec<SpaceState>,
    pub lanes: Vec<LaneRt>,
    pub events: Vec<Event>,
    /// Walking-distance threshold of the parking search, meters.
    pub th_d: f64,
    schedule: TripSchedule,
    next_trip: usize,
    entry_queues: BTreeMap<NodeId, VecDeque<VehicleId>>,
    /// Static map lane -> cell -> space.
    space_at_cell: Vec<Vec<Option<SpaceId>>>,
}

impl SimState {
    pub fn new(net: Arc<RoadNetwork>, schedule: TripSchedule, th_d: f64) -> Self {
        let spaces = net
            .spaces
            .iter()
            .map(|_| SpaceState { status: SpaceStatus::Vacant, occupant: None })
            .collect();
        let lanes = net
            .lanes
            .iter()
            .map(|l| LaneRt {
                curb: vec![None; l.cells],
                through: vec![None; l.cells],
                cleared: 0,
                on_lane: 0,
                interval: LaneIntervalStats::default(),
            })
            .collect();
        let mut space_at_cell: Vec<Vec<Option<SpaceId>>> =
            net.lanes.iter().map(|l| vec![None; l.cells]).collect();
        for s in &net.spaces {
            space_at_cell[s.lane.index()][s.cell] = Some(s.id);
        }
        Self {
            net,
            t: 0,
            vehicles: Vec::new(),
            spaces,
            lanes,
            events: Vec::new(),
            th_d,
            schedule,
            next_trip: 0,
            entry_queues: BTreeMap::new(),
            space_at_cell,
        }
    }

    pub fn horizon_s(&self) -> u32 {
        self.schedule.horizon_s
    }

    /// Traversing vehicles on the lane divided by lane length (veh/m).
    /// Parked vehicles are excluded.
    pub fn congestion(&self, lane: LaneId) -> f64 {
        self.lanes[lane.index()].on_lane as f64 / self.net.lane(lane).length_m
    }

    pub fn space_status(&self, s: SpaceId) -> SpaceStatus {
        self.spaces[s.index()].status
    }

    /// A parked vehicle physically blocking a curb cell.
    fn parked_obstacle(&self, lane: LaneId, cell: usize) -> bool {
        match self.space_at_cell[lane.index()][cell] {
            Some(s) => self.spaces[s.index()].status.has_occupant(),
            None => false,
        }
    }

    fn grid(&self, lane: LaneId, sub: SubLane) -> &[Option<VehicleId>] {
        match sub {
            SubLane::Curb => &self.lanes[lane.index()].curb,
            SubLane::Through => &self.lanes[lane.index()].through,
        }
    }

    fn set_cell(&mut self, lane: LaneId, sub: SubLane, cell: usize, v: Option<VehicleId>) {
        match sub {
            SubLane::Curb => self.lanes[lane.index()].curb[cell] = v,
            SubLane::Through => self.lanes[lane.index()].through[cell] = v,
        }
    }

    fn push_event(&mut self, kind: EventKind, vehicle: Option<VehicleId>, place: EventPlace) {
        self.events.push(Event { t: self.t, kind, vehicle, place });
    }

    pub fn events_csv(&self) -> String {
        let mut out = String::from("t,event,vehicle,place\n");
        for e in &self.events {
            out.push_str(&e.csv_row());
            out.push('\n');
        }
        out
    }

    /// The parking search: the target space if available, else the
    /// nearest available space within `th_d` meters walking distance of
    /// the target, else cruise.
    pub fn find_parking(&self, target: SpaceId, th_d: f64) -> ParkDecision {
        let decision = if self.spaces[target.index()].status.is_available() {
            ParkDecision::ParkAt(target)
        } else {
            let mut found = ParkDecision::Cruise;
            for &(s, d) in self.net.spaces_by_walk_distance(target) {
                if d > th_d {
                    break;
                }
                if self.spaces[s.index()].status.is_available() {
                    found = ParkDecision::ParkAt(s);
                    break;
                }
            }
            found
        };
        #[cfg(debug_assertions)]
        {
            let brute = self
                .net
                .spaces
                .iter()
                .filter(|s| self.spaces[s.id.index()].status.is_available())
                .map(|s| (self.net.walk_between_spaces(target, s.id), s.id))
                .filter(|&(d, _)| d <= th_d)
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let expect = match brute {
                Some((_, s)) => ParkDecision::ParkAt(s),
                None => ParkDecision::Cruise,
            };
            debug_assert_eq!(decision, expect, "parking search diverged from brute force");
        }
        decision
    }

    /// Apply a cleared-space count to a lane: the `c` spaces nearest the
    /// ending intersection become restricted; occupied ones flip to
    /// restricted-occupied and become restricted when vacated. Spaces
    /// leaving the prefix return to vacant/occupied. Never evicts.
    pub fn apply_restriction(&mut self, lane: LaneId, c: u32) -> Result<(), NetError> {
        let lane_ref = self.net.lane(lane);
        let prefix: BTreeSet<SpaceId> =
            self.net.restricted_prefix(lane_ref, c)?.into_iter().collect();
        for &s in &self.net.lane(lane).spaces {
            let st = &mut self.spaces[s.index()];
            let restricted = prefix.contains(&s);
            st.status = match (restricted, st.occupant.is_some()) {
                (true, true) => SpaceStatus::RestrictedOccupied,
                (true, false) => SpaceStatus::Restricted,
                (false, true) => SpaceStatus::Occupied,
                (false, false) => SpaceStatus::Vacant,
            };
        }
        self.lanes[lane.index()].cleared = c;
        Ok(())
    }

    /// Take and reset a lane's interval accumulators.
    pub fn take_interval_stats(&mut self, lane: LaneId) -> LaneIntervalStats {
        std::mem::take(&mut self.lanes[lane.index()].interval)
    }

    pub fn cruising_on_lanes(&self, lanes: &[LaneId]) -> u32 {
        let set: BTreeSet<LaneId> = lanes.iter().copied().collect();
        self.vehicles
            .iter()
            .filter(|v| v.phase == VehiclePhase::Cruising)
            .filter(|v| v.pos.map(|p| set.contains(&p.lane)).unwrap_or(false))
            .count() as u32
    }

    /// spawned == queued + on-road + parked + departed, at every step.
    pub fn conservation_holds(&self) -> bool {
        let mut queued = 0usize;
        let mut on_road = 0usize;
        let mut parked = 0usize;
        let mut departed = 0usize;
        for v in &self.vehicles {
            match v.phase {
                VehiclePhase::Queued => queued += 1,
                VehiclePhase::Parked => parked += 1,
                VehiclePhase::Departed => departed += 1,
                p if p.on_road() => on_road += 1,
                _ => {}
            }
        }
        queued + on_road + parked + departed == self.vehicles.len()
    }

    fn ideal_free_flow_s(&self, trip: &TripSpec, target: Option<SpaceId>) -> Result<f64, NetError> {
        match target {
            None => {
                let route = self.net.shortest_path(trip.entry, trip.exit)?;
                Ok(self.net.route_free_flow_s(&route))
            }
            Some(s) => {
                let lane = self.net.lane(self.net.space(s).lane);
                let to_lane = self.net.shortest_path(trip.entry, lane.from)?;
                let out = self.net.shortest_path(lane.to, trip.exit)?;
                Ok(self.net.route_free_flow_s(&to_lane)
                    + lane.free_flow_s()
                    + self.net.route_free_flow_s(&out))
            }
        }
    }

    fn spawn_pending(&mut self) -> Result<(), NetError> {
        while self.next_trip < self.schedule.trips.len()
            && self.schedule.trips[self.next_trip].spawn_s <= self.t
        {
            let trip = self.schedule.trips[self.next_trip].clone();
            self.next_trip += 1;
            let intent = match trip.parking_duration_s {
                Some(duration_s) => {
                    let target = self
                        .net
                        .nearest_space_to_node(trip.exit)
                        .expect("network with parking spaces");
                    Some(ParkIntent { target, duration_s, choice: None, cruise_anchor: None })
                }
                None => None,
            };
            let freeflow_s = self.ideal_free_flow_s(&trip, intent.as_ref().map(|i| i.target))?;
            let route: VecDeque<LaneId> = match &intent {
                None => self.net.shortest_path(trip.entry, trip.exit)?.into(),
                Some(i) => {
                    let lane = self.net.lane(self.net.space(i.target).lane);
                    let mut r = self.net.shortest_path(trip.entry, lane.from)?;
                    r.push(lane.id);
                    r.into()
                }
            };
            let vid = trip.vehicle;
            debug_assert_eq!(vid.index(), self.vehicles.len());
            self.vehicles.push(Vehicle {
                id: vid,
                spawn_s: trip.spawn_s,
                entry: trip.entry,
                exit: trip.exit,
                intent,
                phase: VehiclePhase::Queued,
                pos: None,
                speed_cells: 0,
                route,
                entered_s: None,
                arrived_s: None,
                parked_since: None,
                dwell_s: 0,
                walk_m: None,
                freeflow_s,
                loss_s: 0.0,
            });
            self.entry_queues.entry(trip.entry).or_default().push_back(vid);
        }
        Ok(())
    }

    /// Re-run the parking search for an on-road vehicle and set its
    /// route accordingly.
    fn run_search(&mut self, vid: VehicleId) {
        let (pos, target) = {
            let v = &self.vehicles[vid.index()];
            (v.pos.expect("search requires an on-road vehicle"), v.intent.as_ref().unwrap().target)
        };
        let decision = self.find_parking(target, self.th_d);
        match decision {
            ParkDecision::ParkAt(s) => {
                let sp = self.net.space(s);
                let cur = self.net.lane(pos.lane);
                let mut route: VecDeque<LaneId> = VecDeque::new();
                route.push_back(pos.lane);
                if !(sp.lane == pos.lane && sp.cell >= pos.cell) {
                    let sp_lane = self.net.lane(sp.lane);
                    for l in self
                        .net
                        .shortest_path(cur.to, sp_lane.from)
                        .expect("strongly connected network")
                    {
                        route.push_back(l);
                    }
                    route.push_back(sp.lane);
                }
                let v = &mut self.vehicles[vid.index()];
                v.route = route;
                v.phase = VehiclePhase::Searching;
                let intent = v.intent.as_mut().unwrap();
                intent.choice = Some(s);
                intent.cruise_anchor = None;
            }
            ParkDecision::Cruise => {
                let target_lane = self.net.space(target).lane;
                let block = self
                    .net
                    .lane(target_lane)
                    .owner_block
                    .expect("parking lanes border a block");
                let cycle = self.net.block(block).cycle.clone();
                let cur_to = self.net.lane(pos.lane).to;
                // Enter the loop at the cheapest reachable cycle lane.
                let mut best: Option<(u64, usize)> = None;
                for (k, &lid) in cycle.iter().enumerate() {
                    let from = self.net.lane(lid).from;
                    if let Ok(path) = self.net.shortest_path(cur_to, from) {
                        let cost =
                            (self.net.route_free_flow_s(&path) * 1e9).round() as u64;
                        if best.map_or(true, |(c, _)| cost < c) {
                            best = Some((cost, k));
                        }
                    }
                }
                let (_, k) = best.expect("cycle reachable in a strongly connected network");
                let anchor = cycle[k];
                let mut route: VecDeque<LaneId> = VecDeque::new();
                route.push_back(pos.lane);
                if pos.lane != anchor {
                    let path = self
                        .net
                        .shortest_path(cur_to, self.net.lane(anchor).from)
                        .expect("reachable");
                    route.extend(path);
                }
                for i in 0..cycle.len() {
                    route.push_back(cycle[(k + i) % cycle.len()]);
                }
                let v = &mut self.vehicles[vid.index()];
                let was_cruising = v.phase == VehiclePhase::Cruising;
                if pos.lane == anchor {
                    // Already at the anchor: the pushed cycle starts with
                    // it again, so drop the duplicate front.
                    v.route = route;
                    v.route.pop_front();
                    v.route.push_front(pos.lane);
                    // route now: [anchor, rest-of-cycle...]
                } else {
                    v.route = route;
                }
                v.phase = VehiclePhase::Cruising;
                let intent = v.intent.as_mut().unwrap();
                intent.choice = None;
                intent.cruise_anchor = Some(anchor);
                if !was_cruising {
                    self.push_event(EventKind::Cruise, Some(vid), EventPlace::Space(target));
                }
            }
        }
    }

    /// Hooks that fire when a vehicle starts traversing `lane`.
    fn on_enter_lane(&mut self, vid: VehicleId, lane: LaneId) {
        self.lanes[lane.index()].on_lane += 1;
        let (phase, intent_target, anchor) = {
            let v = &self.vehicles[vid.index()];
            (
                v.phase,
                v.intent.as_ref().map(|i| i.target),
                v.intent.as_ref().and_then(|i| i.cruise_anchor),
            )
        };
        if phase == VehiclePhase::Driving {
            if let Some(target) = intent_target {
                let target_lane = self.net.space(target).lane;
                let within_one =
                    lane == target_lane || self.net.lane(lane).to == self.net.lane(target_lane).from;
                if within_one {
                    self.run_search(vid);
                }
            }
        } else if phase == VehiclePhase::Cruising && Some(lane) == anchor {
            // One full lap completed: re-invoke the search.
            self.run_search(vid);
        }
    }

    fn leave_lane(&mut self, lane: LaneId) {
        let rt = &mut self.lanes[lane.index()];
        debug_assert!(rt.on_lane > 0);
        rt.on_lane -= 1;
    }

    /// Advance one second. Sub-phase order: signals, unparking, car
    /// following, merges, park attempts, crossings, arrivals.
    pub fn step(&mut self) {
        let t = self.t;

        // Unparking: re-enter the curb cell just ahead of the space.
        for sidx in 0..self.spaces.len() {
            let (vid, lane, cell) = match self.spaces[sidx].occupant {
                Some(vid) => {
                    let sp = self.net.space(SpaceId(sidx as u32));
                    (vid, sp.lane, sp.cell)
                }
                None => continue,
            };
            let v = &self.vehicles[vid.index()];
            let due = match (v.phase, v.parked_since) {
                (VehiclePhase::Parked, Some(since)) => {
                    t >= since + v.intent.as_ref().unwrap().duration_s
                }
                _ => false,
            };
            if !due {
                continue;
            }
            let ahead = cell + 1;
            debug_assert!(ahead < self.net.lane(lane).cells);
            let free = self.grid(lane, SubLane::Curb)[ahead].is_none()
                && !self.parked_obstacle(lane, ahead);
            if !free {
                continue; // wait for a gap, never force
            }
            let sid = SpaceId(sidx as u32);
            {
                let st = &mut self.spaces[sidx];
                st.occupant = None;
                st.status = match st.status {
                    SpaceStatus::RestrictedOccupied => SpaceStatus::Restricted,
                    _ => SpaceStatus::Vacant,
                };
            }
            let exit = self.vehicles[vid.index()].exit;
            let mut route: VecDeque<LaneId> = VecDeque::new();
            route.push_back(lane);
            route.extend(
                self.net
                    .shortest_path(self.net.lane(lane).to, exit)
                    .expect("strongly connected network"),
            );
            {
                let v = &mut self.vehicles[vid.index()];
                v.phase = VehiclePhase::WalkAccounted;
                v.pos = Some(Position { lane, sub: SubLane::Curb, cell: ahead });
                v.speed_cells = 0;
                v.route = route;
                v.dwell_s = v.dwell_s.saturating_add(t - v.parked_since.unwrap());
                v.parked_since = None;
            }
            self.set_cell(lane, SubLane::Curb, ahead, Some(vid));
            self.lanes[lane.index()].on_lane += 1;
            self.push_event(EventKind::Unpark, Some(vid), EventPlace::Space(sid));
        }

        // Car following against the pre-move grid.
        let old: Vec<(Vec<Option<VehicleId>>, Vec<Option<VehicleId>>)> =
            self.lanes.iter().map(|l| (l.curb.clone(), l.through.clone())).collect();
        struct Move {
            vid: VehicleId,
            lane: LaneId,
            sub: SubLane,
            from: usize,
            to: usize,
            rem: usize,
        }
        let mut moves: Vec<Move> = Vec::new();
        for (lidx, (old_curb, old_through)) in old.iter().enumerate() {
            let lane_id = LaneId(lidx as u32);
            let lane = self.net.lane(lane_id);
            for (sub, grid) in [(SubLane::Curb, old_curb), (SubLane::Through, old_through)] {
                for cell in (0..lane.cells).rev() {
                    let vid = match grid[cell] {
                        Some(v) => v,
                        None => continue,
                    };
                    let v = &self.vehicles[vid.index()];
                    let desired = (v.speed_cells + 1).min(lane.vmax_cells);
                    let stop_cell = v.intent.as_ref().and_then(|i| i.choice).and_then(|s| {
                        let sp = self.net.space(s);
                        (sp.lane == lane_id && sp.cell >= cell).then_some(sp.cell)
                    });
                    let mut to = cell;
                    for c in cell + 1..=(cell + desired).min(lane.cells - 1) {
                        if let Some(sc) = stop_cell {
                            if c > sc {
                                break;
                            }
                        }
                        let veh_blocked = match sub {
                            SubLane::Curb => old_curb[c].is_some(),
                            SubLane::Through => old_through[c].is_some(),
                        };
                        if veh_blocked || (sub == SubLane::Curb && self.parked_obstacle(lane_id, c))
                        {
                            break;
                        }
                        to = c;
                    }
                    let moved = to - cell;
                    let rem = desired - moved;
                    moves.push(Move { vid, lane: lane_id, sub, from: cell, to, rem });
                }
            }
        }
        let mut rems: BTreeMap<VehicleId, usize> = BTreeMap::new();
        for m in &moves {
            if m.to != m.from {
                self.set_cell(m.lane, m.sub, m.from, None);
                self.set_cell(m.lane, m.sub, m.to, Some(m.vid));
                let v = &mut self.vehicles[m.vid.index()];
                v.pos = Some(Position { lane: m.lane, sub: m.sub, cell: m.to });
            }
            self.vehicles[m.vid.index()].speed_cells = m.to - m.from;
            rems.insert(m.vid, m.rem);
        }

        // Merges out of the curb sub-lane around parked obstacles.
        for lidx in 0..self.lanes.len() {
            let lane_id = LaneId(lidx as u32);
            let (cells, vmax) = {
                let l = self.net.lane(lane_id);
                (l.cells, l.vmax_cells)
            };
            for cell in (0..cells).rev() {
                let vid = match self.lanes[lidx].curb[cell] {
                    Some(v) => v,
                    None => continue,
                };
                if !self.vehicles[vid.index()].phase.on_road() {
                    continue;
                }
                // Nearest blocker ahead within the lookahead window.
                let mut blocker: Option<(usize, bool)> = None; // (cell, is_parked)
                for c in cell + 1..=(cell + vmax).min(cells - 1) {
                    if self.lanes[lidx].curb[c].is_some() {
                        blocker = Some((c, false));
                        break;
                    }
                    if self.parked_obstacle(lane_id, c) {
                        blocker = Some((c, true));
                        break;
                    }
                }
                let (bcell, parked) = match blocker {
                    Some(b) => b,
                    None => continue,
                };
                if !parked {
                    continue;
                }
                // A searching vehicle stopping before the blocker stays put.
                let stops_first = self.vehicles[vid.index()]
                    .intent
                    .as_ref()
                    .and_then(|i| i.choice)
                    .map(|s| {
                        let sp = self.net.space(s);
                        sp.lane == lane_id && sp.cell >= cell && sp.cell < bcell
                    })
                    .unwrap_or(false);
                if stops_first {
                    continue;
                }
                let target_free = self.lanes[lidx].through[cell].is_none();
                let trailing_free = (cell.saturating_sub(vmax)..cell)
                    .all(|c| self.lanes[lidx].through[c].is_none());
                if target_free && trailing_free {
                    self.lanes[lidx].curb[cell] = None;
                    self.lanes[lidx].through[cell] = Some(vid);
                    self.vehicles[vid.index()].pos =
                        Some(Position { lane: lane_id, sub: SubLane::Through, cell });
                }
            }
        }

        // Merges back onto the curb: keep-curb preference, plus target
        // approach for parkers.
        for lidx in 0..self.lanes.len() {
            let lane_id = LaneId(lidx as u32);
            let (cells, vmax) = {
                let l = self.net.lane(lane_id);
                (l.cells, l.vmax_cells)
            };
            for cell in (0..cells).rev() {
                let vid = match self.lanes[lidx].through[cell] {
                    Some(v) => v,
                    None => continue,
                };
                let curb_cell_free = self.lanes[lidx].curb[cell].is_none()
                    && !self.parked_obstacle(lane_id, cell);
                if !curb_cell_free {
                    continue;
                }
                let trailing_free = (cell.saturating_sub(vmax)..cell)
                    .all(|c| self.lanes[lidx].curb[c].is_none());
                if !trailing_free {
                    continue;
                }
                let at_own_target = self.vehicles[vid.index()]
                    .intent
                    .as_ref()
                    .and_then(|i| i.choice)
                    .map(|s| {
                        let sp = self.net.space(s);
                        sp.lane == lane_id && sp.cell == cell
                    })
                    .unwrap_or(false);
                let window_clear = (cell + 1..=(cell + vmax + 1).min(cells - 1)).all(|c| {
                    self.lanes[lidx].curb[c].is_none() && !self.parked_obstacle(lane_id, c)
                });
                if at_own_target || window_clear {
                    self.lanes[lidx].through[cell] = None;
                    self.lanes[lidx].curb[cell] = Some(vid);
                    self.vehicles[vid.index()].pos =
                        Some(Position { lane: lane_id, sub: SubLane::Curb, cell });
                }
            }
        }

        // Park attempts: searching vehicles sitting on their chosen cell.
        for lidx in 0..self.lanes.len() {
            let lane_id = LaneId(lidx as u32);
            let cells = self.net.lane(lane_id).cells;
            for cell in 0..cells {
                for sub in [SubLane::Curb, SubLane::Through] {
                    let vid = match self.grid(lane_id, sub)[cell] {
                        Some(v) => v,
                        None => continue,
                    };
                    let choice = match self.vehicles[vid.index()].phase {
                        VehiclePhase::Searching => {
                            self.vehicles[vid.index()].intent.as_ref().and_then(|i| i.choice)
                        }
                        _ => None,
                    };
                    let s = match choice {
                        Some(s) => s,
                        None => continue,
                    };
                    let sp = self.net.space(s);
                    if sp.lane != lane_id || sp.cell != cell {
                        continue;
                    }
                    if self.spaces[s.index()].status.is_available() {
                        if sub == SubLane::Curb {
                            // Park: leave the road and occupy the space.
                            self.set_cell(lane_id, sub, cell, None);
                            self.leave_lane(lane_id);
                            self.spaces[s.index()].status = SpaceStatus::Occupied;
                            self.spaces[s.index()].occupant = Some(vid);
                            let target = self.vehicles[vid.index()].intent.as_ref().unwrap().target;
                            let walk = self.net.walk_between_spaces(s, target);
                            {
                                let v = &mut self.vehicles[vid.index()];
                                v.phase = VehiclePhase::Parked;
                                v.pos = None;
                                v.speed_cells = 0;
                                v.parked_since = Some(t);
                                v.walk_m = Some(walk);
                                v.route.clear();
                            }
                            let rt = &mut self.lanes[lidx];
                            rt.interval.walk_sum_m += walk;
                            rt.interval.walk_n += 1;
                            self.push_event(EventKind::Park, Some(vid), EventPlace::Space(s));
                        }
                        // On the through sub-lane: wait for the merge back.
                    } else {
                        // Taken or restricted since chosen: search again.
                        self.run_search(vid);
                    }
                }
            }
        }

        // Crossings: head-of-lane vehicles with unused movement proceed
        // on green if the next lane's entry cell (same sub-lane) is free.
        for lidx in 0..self.lanes.len() {
            let lane_id = LaneId(lidx as u32);
            let lane_green = {
                let l = self.net.lane(lane_id);
                self.net.is_green(l, t)
            };
            let head = self.net.lane(lane_id).cells - 1;
            for sub in [SubLane::Curb, SubLane::Through] {
                let vid = match self.grid(lane_id, sub)[head] {
                    Some(v) => v,
                    None => continue,
                };
                if rems.get(&vid).copied().unwrap_or(0) == 0 || !lane_green {
                    continue;
                }
                let v = &self.vehicles[vid.index()];
                debug_assert_eq!(v.route.front(), Some(&lane_id));
                if v.route.len() == 1 {
                    // End of route: leave the network via the exit stub.
                    if self.net.lane(lane_id).kind == LaneKind::ExitStub {
                        self.set_cell(lane_id, sub, head, None);
                        self.leave_lane(lane_id);
                        let v = &mut self.vehicles[vid.index()];
                        v.phase = VehiclePhase::Departed;
                        v.pos = None;
                        v.speed_cells += 1;
                        v.arrived_s = Some(t);
                        v.route.clear();
                        self.push_event(EventKind::Depart, Some(vid), EventPlace::Lane(lane_id));
                    }
                    continue;
                }
                let next = v.route[1];
                let entry_free = self.grid(next, sub)[0].is_none()
                    && !(sub == SubLane::Curb && self.parked_obstacle(next, 0));
                if !entry_free {
                    continue;
                }
                self.set_cell(lane_id, sub, head, None);
                self.leave_lane(lane_id);
                self.set_cell(next, sub, 0, Some(vid));
                {
                    let v = &mut self.vehicles[vid.index()];
                    v.route.pop_front();
                    v.pos = Some(Position { lane: next, sub, cell: 0 });
                    v.speed_cells += 1;
                }
                self.on_enter_lane(vid, next);
            }
        }

        // Arrivals: spawn onto free entry cells, queue outside otherwise.
        self.spawn_pending().expect("routable schedule");
        let entries: Vec<NodeId> = self.entry_queues.keys().copied().collect();
        for entry in entries {
            let front = match self.entry_queues.get(&entry).and_then(|q| q.front()) {
                Some(&v) => v,
                None => continue,
            };
            let lane_id = self.net.entry_lane(entry).expect("entry stub lane");
            let free = self.grid(lane_id, SubLane::Curb)[0].is_none();
            if !free {
                continue;
            }
            self.entry_queues.get_mut(&entry).unwrap().pop_front();
            let vmax = self.net.lane(lane_id).vmax_cells;
            {
                let v = &mut self.vehicles[front.index()];
                v.phase = VehiclePhase::Driving;
                v.pos = Some(Position { lane: lane_id, sub: SubLane::Curb, cell: 0 });
                v.speed_cells = vmax;
                v.entered_s = Some(t);
            }
            self.set_cell(lane_id, SubLane::Curb, 0, Some(front));
            self.push_event(EventKind::Enter, Some(front), EventPlace::Lane(lane_id));
            self.on_enter_lane(front, lane_id);
        }

        // Time-loss accounting.
        for vidx in 0..self.vehicles.len() {
            let v = &self.vehicles[vidx];
            match v.phase {
                VehiclePhase::Queued => {
                    self.vehicles[vidx].loss_s += 1.0;
                }
                p if p.on_road() => {
                    if v.entered_s == Some(t) {
                        continue; // spawned after the movement phases
                    }
                    let pos = v.pos.unwrap();
                    let vmax = self.net.lane(pos.lane).vmax_cells;
                    let loss = 1.0 - (v.speed_cells.min(vmax) as f64 / vmax as f64);
                    if loss > 0.0 {
                        self.vehicles[vidx].loss_s += loss;
                    }
                    let vid = v.id;
                    let rt = &mut self.lanes[pos.lane.index()];
                    rt.interval.loss_sum_s += loss;
                    rt.interval.vehicles.insert(vid);
                }
                _ => {}
            }
        }

        self.t += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_grid, SignalPlan};

    fn empty_schedule(horizon: u32) -> TripSchedule {
        TripSchedule { trips: Vec::new(), seed: 0, horizon_s: horizon }
    }

    #[test]
    fn empty_network_step_only_advances_clock() {
        let net = Arc::new(build_grid(3, 3, 150.0, 10, 15.0, SignalPlan::two_phase(30, 30)).unwrap());
        let mut sim = SimState::new(net, empty_schedule(100), 200.0);
        let before_events = sim.events.len();
        sim.step();
        assert_eq!(sim.t, 1);
        assert_eq!(sim.events.len(), before_events);
        assert!(sim.vehicles.is_empty());
    }

    #[test]
    fn congestion_definition() {
        let net = Arc::new(build_grid(3, 3, 150.0, 10, 15.0, SignalPlan::two_phase(30, 30)).unwrap());
        let mut sim = SimState::new(net, empty_schedule(10), 200.0);
        let lane = LaneId(0);
        assert_eq!(sim.congestion(lane), 0.0);
        sim.lanes[lane.index()].on_lane = 6;
        assert!((sim.congestion(lane) - 0.04).abs() < 1e-12);
    }
}
