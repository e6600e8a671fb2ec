//! Adapted variance rules.
//!
//! A rule reads the path prefix through a small running state: `init` is
//! called at `t_0` with `B_0`, `advance` at every new node `k` with `B_{t_k}`,
//! and `eval(k, x, state)` returns the level used on cell `(t_k, t_{k+1}]`.
//! Since the state only ever sees the prefix, every rule is adapted by
//! construction. Rules whose state takes finitely many values recombine on
//! the dynamic-programming lattice; the others force a prefix tree.

use std::fmt;
use std::sync::Arc;

use crate::error::{domain, Result};
use crate::scenarios::stopping::{Event, Stopping};

/// Running state of a rule; layout is rule specific.
pub type RuleState = Vec<f64>;

/// Extension point for rules defined outside the built-in registry, such as
/// the argmax control synthesized from a value lattice.
pub trait ExternalRule: Send + Sync + fmt::Debug {
    fn state_len(&self, steps: usize) -> usize;
    fn init(&self, x0: f64, state: &mut [f64]);
    fn advance(&self, k: usize, x: f64, state: &mut [f64]);
    fn eval(&self, k: usize, x: f64, state: &[f64]) -> f64;
    /// `(min, max)` over every value the rule can return.
    fn range(&self) -> (f64, f64);
    /// Whether the running state takes finitely many values.
    fn recombining(&self) -> bool;
    fn label(&self) -> String;
}

#[derive(Clone)]
pub struct PrefixFn {
    pub name: String,
    pub range: (f64, f64),
    pub f: Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>,
}

impl fmt::Debug for PrefixFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrefixFn({})", self.name)
    }
}

impl ExternalRule for PrefixFn {
    fn state_len(&self, steps: usize) -> usize {
        steps + 2
    }
    fn init(&self, x0: f64, state: &mut [f64]) {
        state[0] = 1.0;
        state[1] = x0;
    }
    fn advance(&self, _k: usize, x: f64, state: &mut [f64]) {
        let n = state[0] as usize;
        state[1 + n] = x;
        state[0] = (n + 1) as f64;
    }
    fn eval(&self, k: usize, _x: f64, state: &[f64]) -> f64 {
        let n = state[0] as usize;
        (self.f)(k, &state[1..1 + n])
    }
    fn range(&self) -> (f64, f64) {
        self.range
    }
    fn recombining(&self) -> bool {
        false
    }
    fn label(&self) -> String {
        self.name.clone()
    }
}

/// Concatenation of `base` up to the branch time and `on`/`off` afterwards.
#[derive(Debug, Clone)]
pub struct Pasted {
    pub base: Rule,
    pub branch: Stopping,
    pub event: Event,
    pub on: Rule,
    pub off: Rule,
}

/// Registry of adapted scalar variance rules.
#[derive(Debug, Clone)]
pub enum Rule {
    Constant(f64),
    /// `above` if `B_{t_k} > level` (or `|B_{t_k}| > level` when `abs`), else `below`.
    ThresholdSwitch { level: f64, below: f64, above: f64, abs: bool },
    /// `before` on cells `k < node`, `after` from `node` on.
    TimeSwitch { node: usize, before: f64, after: f64 },
    /// `after` once `|B|` has reached `level`, `before` until then.
    HitSwitch { level: f64, before: f64, after: f64 },
    Pasted(Box<Pasted>),
    External(Arc<dyn ExternalRule>),
}

impl Rule {
    pub fn state_len(&self, steps: usize) -> usize {
        match self {
            Rule::Constant(_) | Rule::ThresholdSwitch { .. } | Rule::TimeSwitch { .. } => 0,
            Rule::HitSwitch { .. } => 1,
            Rule::Pasted(p) => {
                p.branch.state_len() + p.event.state_len() + 2 + p.base.state_len(steps) + p.on.state_len(steps) + p.off.state_len(steps)
            }
            Rule::External(e) => e.state_len(steps),
        }
    }

    pub fn init(&self, x0: f64, s: &mut [f64], steps: usize) {
        match self {
            Rule::Constant(_) | Rule::ThresholdSwitch { .. } | Rule::TimeSwitch { .. } => {}
            Rule::HitSwitch { level, .. } => s[0] = if x0.abs() >= *level { 1.0 } else { 0.0 },
            Rule::Pasted(p) => {
                let (st, ev, flags, base, on, off) = split_pasted(p, s, steps);
                p.branch.init(x0, st);
                p.event.init(x0, ev);
                p.base.init(x0, base, steps);
                p.on.init(x0, on, steps);
                p.off.init(x0, off, steps);
                flags[0] = 0.0;
                flags[1] = 0.0;
                if p.branch.stops(0, x0, st) {
                    flags[0] = 1.0;
                    flags[1] = if p.event.eval(x0, ev) { 1.0 } else { 0.0 };
                }
            }
            Rule::External(e) => e.init(x0, s),
        }
    }

    pub fn advance(&self, k: usize, x: f64, s: &mut [f64], steps: usize) {
        match self {
            Rule::Constant(_) | Rule::ThresholdSwitch { .. } | Rule::TimeSwitch { .. } => {}
            Rule::HitSwitch { level, .. } => {
                if x.abs() >= *level {
                    s[0] = 1.0;
                }
            }
            Rule::Pasted(p) => {
                let (st, ev, flags, base, on, off) = split_pasted(p, s, steps);
                p.branch.advance(k, x, st);
                p.event.advance(k, x, ev);
                p.base.advance(k, x, base, steps);
                p.on.advance(k, x, on, steps);
                p.off.advance(k, x, off, steps);
                if flags[0] == 0.0 && p.branch.stops(k, x, st) {
                    flags[0] = 1.0;
                    flags[1] = if p.event.eval(x, ev) { 1.0 } else { 0.0 };
                }
            }
            Rule::External(e) => e.advance(k, x, s),
        }
    }

    pub fn eval(&self, k: usize, x: f64, s: &[f64], steps: usize) -> f64 {
        match self {
            Rule::Constant(a) => *a,
            Rule::ThresholdSwitch { level, below, above, abs } => {
                let v = if *abs { x.abs() } else { x };
                if v > *level {
                    *above
                } else {
                    *below
                }
            }
            Rule::TimeSwitch { node, before, after } => {
                if k < *node {
                    *before
                } else {
                    *after
                }
            }
            Rule::HitSwitch { before, after, .. } => {
                if s[0] == 1.0 {
                    *after
                } else {
                    *before
                }
            }
            Rule::Pasted(p) => {
                let lens = pasted_lens(p, steps);
                let mut off = lens[0] + lens[1];
                let stopped = s[off] == 1.0;
                let on_event = s[off + 1] == 1.0;
                off += 2;
                let base = &s[off..off + lens[3]];
                off += lens[3];
                let on = &s[off..off + lens[4]];
                off += lens[4];
                let offs = &s[off..off + lens[5]];
                if !stopped {
                    p.base.eval(k, x, base, steps)
                } else if on_event {
                    p.on.eval(k, x, on, steps)
                } else {
                    p.off.eval(k, x, offs, steps)
                }
            }
            Rule::External(e) => e.eval(k, x, s),
        }
    }

    /// `(min, max)` of every value the rule can produce.
    pub fn range(&self) -> (f64, f64) {
        match self {
            Rule::Constant(a) => (*a, *a),
            Rule::ThresholdSwitch { below, above, .. } => (below.min(*above), below.max(*above)),
            Rule::TimeSwitch { before, after, .. } => (before.min(*after), before.max(*after)),
            Rule::HitSwitch { before, after, .. } => (before.min(*after), before.max(*after)),
            Rule::Pasted(p) => {
                let (a, b, c) = (p.base.range(), p.on.range(), p.off.range());
                (a.0.min(b.0).min(c.0), a.1.max(b.1).max(c.1))
            }
            Rule::External(e) => e.range(),
        }
    }

    /// True if the running state takes finitely many values per node.
    pub fn recombining(&self) -> bool {
        match self {
            Rule::Pasted(p) => p.base.recombining() && p.on.recombining() && p.off.recombining(),
            Rule::External(e) => e.recombining(),
            _ => true,
        }
    }

    /// Checks grid references and adaptedness of pasting events.
    pub fn validate(&self, steps: usize) -> Result<()> {
        match self {
            Rule::TimeSwitch { node, .. } if *node > steps => domain(format!("time switch at node {node} beyond N={steps}")),
            Rule::Pasted(p) => {
                p.branch.validate(steps)?;
                if let Some(node) = p.event.latest_read() {
                    let earliest = p.branch.min_value();
                    if node > earliest {
                        return domain(format!(
                            "pasting event reads B at node {node} but the branch time can be as early as node {earliest}; the event is not known at the branch time"
                        ));
                    }
                }
                p.base.validate(steps)?;
                p.on.validate(steps)?;
                p.off.validate(steps)
            }
            _ => Ok(()),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Rule::Constant(a) => format!("const({a})"),
            Rule::ThresholdSwitch { level, below, above, abs } => {
                format!("threshold({}{level}: {below}|{above})", if *abs { "|B|>" } else { "B>" })
            }
            Rule::TimeSwitch { node, before, after } => format!("time_switch(@{node}: {before}|{after})"),
            Rule::HitSwitch { level, before, after } => format!("hit_switch(|B|>={level}: {before}|{after})"),
            Rule::Pasted(p) => format!(
                "paste({} @ {:?} on {:?} -> {} / {})",
                p.base.describe(),
                p.branch,
                p.event,
                p.on.describe(),
                p.off.describe()
            ),
            Rule::External(e) => e.label(),
        }
    }
}

fn pasted_lens(p: &Pasted, steps: usize) -> [usize; 6] {
    [
        p.branch.state_len(),
        p.event.state_len(),
        2,
        p.base.state_len(steps),
        p.on.state_len(steps),
        p.off.state_len(steps),
    ]
}

type PastedParts<'a> = (&'a mut [f64], &'a mut [f64], &'a mut [f64], &'a mut [f64], &'a mut [f64], &'a mut [f64]);

fn split_pasted<'a>(p: &Pasted, s: &'a mut [f64], steps: usize) -> PastedParts<'a> {
    let l = pasted_lens(p, steps);
    let (st, rest) = s.split_at_mut(l[0]);
    let (ev, rest) = rest.split_at_mut(l[1]);
    let (flags, rest) = rest.split_at_mut(l[2]);
    let (base, rest) = rest.split_at_mut(l[3]);
    let (on, off) = rest.split_at_mut(l[4]);
    (st, ev, flags, base, on, &mut off[..l[5]])
}
