//! One replication of the `G_t/M/s_t+GI` system, event by event.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::arrivals::{staffing_epochs, Thinning};
use super::SimConfig;
use crate::table::{Cell, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Waiting,
    InService,
    Served,
    Abandoned,
    Forced,
}

#[derive(Debug, Clone, Copy)]
struct Customer {
    arrival: f64,
    state: State,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ev {
    t: f64,
    id: usize,
}

impl Eq for Ev {}

impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ev {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t.total_cmp(&other.t).then(self.id.cmp(&other.id))
    }
}

/// Event counters; all integer so conservation can be checked exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub x0: i64,
    pub in_queue: i64,
    pub in_service: i64,
    pub arrivals: i64,
    pub departures: i64,
    pub abandoned: i64,
    pub entered: i64,
    pub forced: i64,
}

impl Counts {
    pub fn in_system(&self) -> i64 {
        self.in_queue + self.in_service
    }

    /// `X − (X(0) + N − D − A − forced)`.
    pub fn conservation_gap(&self) -> i64 {
        self.in_system()
            - (self.x0 + self.arrivals - self.departures - self.abandoned - self.forced)
    }
}

/// Observations of one replication on the observation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub t: Vec<f64>,
    pub x: Vec<i64>,
    pub q: Vec<i64>,
    pub b: Vec<i64>,
    pub w: Vec<f64>,
    /// Virtual wait; NaN when the run ended first.
    pub v: Vec<f64>,
    pub a: Vec<i64>,
    pub n: Vec<i64>,
    pub d: Vec<i64>,
    pub e: Vec<i64>,
    pub forced: Vec<i64>,
    /// Counters at the horizon.
    pub at_horizon: Counts,
}

impl SamplePath {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&["t", "X", "Q", "B", "W", "V", "A", "N", "D", "E", "forced"]);
        for k in 0..self.t.len() {
            t.push(vec![
                self.t[k].into(),
                Cell::Int(self.x[k]),
                Cell::Int(self.q[k]),
                Cell::Int(self.b[k]),
                self.w[k].into(),
                self.v[k].into(),
                Cell::Int(self.a[k]),
                Cell::Int(self.n[k]),
                Cell::Int(self.d[k]),
                Cell::Int(self.e[k]),
                Cell::Int(self.forced[k]),
            ]);
        }
        t
    }
}

/// A hypothetical arrival at an observation time that never abandons.
#[derive(Debug, Clone, Copy)]
struct Marker {
    obs: usize,
    t: f64,
    /// Customers with id at most this one are ahead of the marker.
    boundary: Option<usize>,
    ahead: i64,
}

struct System<'a> {
    cfg: &'a SimConfig,
    customers: Vec<Customer>,
    queue: VecDeque<usize>,
    /// Customers in order of service entry; lazily cleaned from the top.
    entry_stack: Vec<usize>,
    services: BinaryHeap<Reverse<Ev>>,
    deadlines: BinaryHeap<Reverse<Ev>>,
    servers: i64,
    c: Counts,
    markers: Vec<Marker>,
    svc_rng: ChaCha8Rng,
    pat_rng: ChaCha8Rng,
    service: Exp<f64>,
}

impl<'a> System<'a> {
    fn new_customer(&mut self, arrival: f64) -> usize {
        self.customers.push(Customer {
            arrival,
            state: State::Waiting,
        });
        self.customers.len() - 1
    }

    fn start_service(&mut self, id: usize, now: f64) {
        self.customers[id].state = State::InService;
        self.c.in_service += 1;
        self.c.entered += 1;
        self.entry_stack.push(id);
        let s = self.service.sample(&mut self.svc_rng);
        self.services.push(Reverse(Ev { t: now + s, id }));
    }

    fn left_queue(&mut self, id: usize) {
        for m in &mut self.markers {
            if m.boundary.is_some_and(|b| id <= b) {
                m.ahead -= 1;
            }
        }
    }

    fn pop_waiting(&mut self) -> Option<usize> {
        while let Some(id) = self.queue.pop_front() {
            if self.customers[id].state == State::Waiting {
                return Some(id);
            }
        }
        None
    }

    fn head_wait(&mut self, now: f64) -> f64 {
        while let Some(&id) = self.queue.front() {
            if self.customers[id].state == State::Waiting {
                return now - self.customers[id].arrival;
            }
            self.queue.pop_front();
        }
        0.0
    }

    /// A server slot frees up: resolve markers at the head, then serve the queue head.
    fn capacity(&mut self, now: f64, v: &mut [f64]) {
        self.markers.retain(|m| {
            if m.ahead == 0 {
                v[m.obs] = now - m.t;
                false
            } else {
                true
            }
        });
        if self.c.in_service < self.servers {
            if let Some(id) = self.pop_waiting() {
                self.c.in_queue -= 1;
                self.left_queue(id);
                self.start_service(id, now);
            }
        }
    }

    fn arrive(&mut self, now: f64) {
        self.c.arrivals += 1;
        let patience = self.cfg.spec.patience.sample(&mut self.pat_rng);
        let id = self.new_customer(now);
        if self.c.in_service < self.servers {
            self.start_service(id, now);
        } else {
            self.queue.push_back(id);
            self.c.in_queue += 1;
            self.deadlines.push(Reverse(Ev {
                t: now + patience,
                id,
            }));
        }
    }

    fn set_servers(&mut self, level: i64, now: f64, v: &mut [f64]) {
        while self.servers < level {
            self.servers += 1;
            self.capacity(now, v);
        }
        self.servers = level;
        while self.c.in_service > self.servers {
            let id = self.entry_stack.pop().expect("someone is in service");
            if self.customers[id].state == State::InService {
                self.customers[id].state = State::Forced;
                self.c.in_service -= 1;
                self.c.forced += 1;
            }
        }
    }

    fn next_service(&mut self) -> f64 {
        while let Some(Reverse(ev)) = self.services.peek() {
            if self.customers[ev.id].state == State::InService {
                return ev.t;
            }
            self.services.pop();
        }
        f64::INFINITY
    }

    fn next_deadline(&mut self) -> f64 {
        while let Some(Reverse(ev)) = self.deadlines.peek() {
            if self.customers[ev.id].state == State::Waiting {
                return ev.t;
            }
            self.deadlines.pop();
        }
        f64::INFINITY
    }
}

/// Runs one replication with the given seed; arrivals, service and patience
/// use independent streams of the same ChaCha8 key.
pub fn run_replication(cfg: &SimConfig, seed: u64) -> SamplePath {
    let spec = &cfg.spec;
    let n = cfg.n;
    let horizon = cfg.horizon;
    let grid = cfg.grid();
    let m = grid.len();
    // markers may need a little more time than the horizon to resolve
    let limit = horizon * 2.0;

    let stream = |k: u64| {
        let mut r = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        r.set_stream(k);
        r
    };
    let mut arr_rng = stream(0);
    let (level0, epochs) = staffing_epochs(spec, n, limit);
    let mut sys = System {
        cfg,
        customers: Vec::new(),
        queue: VecDeque::new(),
        entry_stack: Vec::new(),
        services: BinaryHeap::new(),
        deadlines: BinaryHeap::new(),
        servers: level0,
        c: Counts::default(),
        markers: Vec::new(),
        svc_rng: stream(1),
        pat_rng: stream(2),
        service: Exp::new(spec.mu).expect("positive service rate"),
    };

    let x0 = (n * spec.x0).round() as i64;
    sys.c.x0 = x0;
    for _ in 0..x0 {
        let patience = spec.patience.sample(&mut sys.pat_rng);
        let id = sys.new_customer(0.0);
        if sys.c.in_service < sys.servers {
            sys.start_service(id, 0.0);
            sys.c.entered -= 1;
        } else {
            sys.queue.push_back(id);
            sys.c.in_queue += 1;
            sys.deadlines.push(Reverse(Ev { t: patience, id }));
        }
    }

    let mut path = SamplePath {
        t: grid.clone(),
        x: vec![0; m],
        q: vec![0; m],
        b: vec![0; m],
        w: vec![0.0; m],
        v: vec![f64::NAN; m],
        a: vec![0; m],
        n: vec![0; m],
        d: vec![0; m],
        e: vec![0; m],
        forced: vec![0; m],
        at_horizon: Counts::default(),
    };

    let mut thin = Thinning::new(spec, n);
    let mut next_arrival = thin.next(&mut arr_rng, limit).unwrap_or(f64::INFINITY);
    let mut next_epoch = 0usize;
    let mut obs = 0usize;
    loop {
        let t_obs = grid.get(obs).copied().unwrap_or(f64::INFINITY);
        let t_svc = sys.next_service();
        let t_dead = sys.next_deadline();
        let t_staff = epochs.get(next_epoch).map_or(f64::INFINITY, |e| e.0);
        let t_next = next_arrival.min(t_svc).min(t_dead).min(t_staff);

        if obs < m && t_obs <= t_next {
            let now = t_obs;
            path.x[obs] = sys.c.in_system();
            path.q[obs] = sys.c.in_queue;
            path.b[obs] = sys.c.in_service;
            path.w[obs] = sys.head_wait(now);
            path.a[obs] = sys.c.abandoned;
            path.n[obs] = sys.c.arrivals;
            path.d[obs] = sys.c.departures;
            path.e[obs] = sys.c.entered;
            path.forced[obs] = sys.c.forced;
            if sys.c.in_queue == 0 && sys.c.in_service < sys.servers {
                path.v[obs] = 0.0;
            } else {
                let boundary = sys.customers.len().checked_sub(1);
                sys.markers.push(Marker {
                    obs,
                    t: now,
                    boundary,
                    ahead: sys.c.in_queue,
                });
            }
            if obs + 1 == m {
                path.at_horizon = sys.c;
            }
            obs += 1;
            continue;
        }
        if obs >= m && sys.markers.is_empty() {
            break;
        }
        if t_next > limit {
            break;
        }

        let now = t_next;
        if now == next_arrival {
            sys.arrive(now);
            next_arrival = thin.next(&mut arr_rng, limit).unwrap_or(f64::INFINITY);
        } else if now == t_svc {
            let Reverse(ev) = sys.services.pop().expect("peeked");
            sys.customers[ev.id].state = State::Served;
            sys.c.in_service -= 1;
            sys.c.departures += 1;
            sys.capacity(now, &mut path.v);
        } else if now == t_dead {
            let Reverse(ev) = sys.deadlines.pop().expect("peeked");
            sys.customers[ev.id].state = State::Abandoned;
            sys.c.in_queue -= 1;
            sys.c.abandoned += 1;
            sys.left_queue(ev.id);
        } else {
            let level = epochs[next_epoch].1;
            next_epoch += 1;
            sys.set_servers(level, now, &mut path.v);
        }
        debug_assert_eq!(sys.c.conservation_gap(), 0);
        debug_assert!(sys.c.in_service <= sys.servers);
        debug_assert!(sys.c.in_queue == 0 || sys.c.in_service == sys.servers);
    }
    path
}
