//! Grid stopping times with finitely many values, and the prefix events used
//! at branch times.

use crate::error::{domain, Result};

/// A stopping time on the time grid. `sigma` is the first node `k` at which
/// [`Stopping::stops`] holds; every rule stops at `N` at the latest.
#[derive(Debug, Clone, PartialEq)]
pub enum Stopping {
    Fixed { node: usize },
    /// First node with `|B| >= level`, capped at `cap`.
    Hitting { level: f64, cap: usize },
    /// `early` on the event, `late` off it. The event must be known at `early`.
    TwoValued { event: Event, early: usize, late: usize },
    /// Pseudo-random two-valued time: stop at `early` when a seeded hash of
    /// the state cell `floor(B_early / width)` falls below `prob`, else at
    /// `late`. The decision is a function of `B_early`, hence adapted.
    Randomized { early: usize, late: usize, width: f64, prob: f64, seed: u64 },
}

impl Stopping {
    pub fn state_len(&self) -> usize {
        match self {
            Stopping::TwoValued { event, .. } => event.state_len(),
            _ => 0,
        }
    }

    pub fn init(&self, x0: f64, s: &mut [f64]) {
        if let Stopping::TwoValued { event, .. } = self {
            event.init(x0, s);
        }
    }

    pub fn advance(&self, k: usize, x: f64, s: &mut [f64]) {
        if let Stopping::TwoValued { event, .. } = self {
            event.advance(k, x, s);
        }
    }

    /// Stop decision at node `k`, given the state after `advance(k, ..)`.
    pub fn stops(&self, k: usize, x: f64, s: &[f64]) -> bool {
        match self {
            Stopping::Fixed { node } => k >= *node,
            Stopping::Hitting { level, cap } => x.abs() >= *level || k >= *cap,
            Stopping::TwoValued { event, early, late } => {
                if k == *early {
                    event.eval(x, s) || early >= late
                } else {
                    k >= *late
                }
            }
            Stopping::Randomized { early, late, width, prob, seed } => {
                if k == *early {
                    cell_uniform(*seed, (x / width).floor() as i64) < *prob || early >= late
                } else {
                    k >= *late
                }
            }
        }
    }

    /// Smallest node the stopping time can take.
    pub fn min_value(&self) -> usize {
        match self {
            Stopping::Fixed { node } => *node,
            Stopping::Hitting { level, cap } => {
                if *level <= 0.0 {
                    0
                } else {
                    (*cap).min(1)
                }
            }
            Stopping::TwoValued { early, .. } | Stopping::Randomized { early, .. } => *early,
        }
    }

    pub fn max_value(&self) -> usize {
        match self {
            Stopping::Fixed { node } => *node,
            Stopping::Hitting { cap, .. } => *cap,
            Stopping::TwoValued { early, late, .. } | Stopping::Randomized { early, late, .. } => (*early).max(*late),
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.max_value() > steps {
            return domain(format!("stopping time can exceed the horizon node {steps}"));
        }
        match self {
            Stopping::TwoValued { event, early, late } => {
                if early > late {
                    return domain("two-valued stopping time needs early <= late");
                }
                if let Some(node) = event.latest_read() {
                    if node > *early {
                        return domain(format!(
                            "stopping decision at node {early} reads B at node {node}; rule is not adapted"
                        ));
                    }
                }
                Ok(())
            }
            Stopping::Randomized { early, late, width, prob, .. } => {
                if early > late || *width <= 0.0 || !(0.0..=1.0).contains(prob) {
                    return domain("randomized stopping time needs early <= late, width > 0, prob in [0,1]");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Runs the rule along a path and returns the stopping node.
    pub fn along(&self, path: &[f64]) -> usize {
        let n = path.len() - 1;
        let mut s = vec![0.0; self.state_len()];
        self.init(path[0], &mut s);
        if self.stops(0, path[0], &s) {
            return 0;
        }
        for k in 1..=n {
            self.advance(k, path[k], &mut s);
            if self.stops(k, path[k], &s) {
                return k;
            }
        }
        n
    }
}

/// Splitmix-style hash of `(seed, cell)` to `[0, 1)`.
fn cell_uniform(seed: u64, cell: i64) -> f64 {
    let mut z = seed ^ (cell as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Events evaluated on the path prefix at a branch time.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Always,
    Never,
    /// `B_branch > level`.
    AboveAtBranch { level: f64 },
    /// `|B_branch| > level`.
    AbsAboveAtBranch { level: f64 },
    /// `B_{t_node} > level`; requires `node` to precede every branch time.
    AboveAt { node: usize, level: f64 },
    Not(Box<Event>),
}

impl Event {
    pub fn state_len(&self) -> usize {
        match self {
            Event::AboveAt { .. } => 1,
            Event::Not(e) => e.state_len(),
            _ => 0,
        }
    }

    pub fn init(&self, x0: f64, s: &mut [f64]) {
        match self {
            Event::AboveAt { node, level } => {
                s[0] = if *node == 0 && x0 > *level { 1.0 } else { 0.0 };
            }
            Event::Not(e) => e.init(x0, s),
            _ => {}
        }
    }

    pub fn advance(&self, k: usize, x: f64, s: &mut [f64]) {
        match self {
            Event::AboveAt { node, level } if k == *node => {
                s[0] = if x > *level { 1.0 } else { 0.0 };
            }
            Event::Not(e) => e.advance(k, x, s),
            _ => {}
        }
    }

    /// Value of the indicator with `x` the state at the branch time.
    pub fn eval(&self, x: f64, s: &[f64]) -> bool {
        match self {
            Event::Always => true,
            Event::Never => false,
            Event::AboveAtBranch { level } => x > *level,
            Event::AbsAboveAtBranch { level } => x.abs() > *level,
            Event::AboveAt { .. } => s[0] == 1.0,
            Event::Not(e) => !e.eval(x, s),
        }
    }

    /// The latest fixed node the event reads, if any.
    pub fn latest_read(&self) -> Option<usize> {
        match self {
            Event::AboveAt { node, .. } => Some(*node),
            Event::Not(e) => e.latest_read(),
            _ => None,
        }
    }
}
