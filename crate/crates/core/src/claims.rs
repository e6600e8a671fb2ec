//! Payoff registry and claims.
//!
//! Payoffs are small expression trees with serde support so they can be
//! named in JSON configs. Each payoff knows its kinks and jumps (for on-grid
//! placement and cell averaging) and, where one exists, the closed-form
//! expectation under a centred Gaussian, which the tests use as oracle.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{argument, domain, Result};

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weighted {
    pub weight: f64,
    pub payoff: Payoff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payoff {
    Linear {
        slope: f64,
        #[serde(default)]
        intercept: f64,
    },
    Constant {
        value: f64,
    },
    Square {
        #[serde(default = "one")]
        scale: f64,
    },
    NegSquare,
    Call {
        strike: f64,
    },
    Put {
        strike: f64,
    },
    /// `1{x > strike}`, with value `1/2` exactly at the strike.
    Digital {
        strike: f64,
    },
    Abs {
        #[serde(default)]
        center: f64,
    },
    Quartic,
    /// Piecewise linear through `(xs[i], ys[i])`, extended linearly.
    Table {
        xs: Vec<f64>,
        ys: Vec<f64>,
    },
    Combo {
        terms: Vec<Weighted>,
    },
    /// `|inner(x)|^p`.
    AbsPow {
        inner: Box<Payoff>,
        p: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthClass {
    Bounded,
    Linear,
    Quadratic,
    Higher,
}

impl Payoff {
    pub fn linear(slope: f64, intercept: f64) -> Self {
        Payoff::Linear { slope, intercept }
    }

    pub fn square() -> Self {
        Payoff::Square { scale: 1.0 }
    }

    pub fn constant(value: f64) -> Self {
        Payoff::Constant { value }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Payoff::Linear { slope, intercept } => slope * x + intercept,
            Payoff::Constant { value } => *value,
            Payoff::Square { scale } => scale * x * x,
            Payoff::NegSquare => -x * x,
            Payoff::Call { strike } => (x - strike).max(0.0),
            Payoff::Put { strike } => (strike - x).max(0.0),
            Payoff::Digital { strike } => {
                if x > *strike {
                    1.0
                } else if x == *strike {
                    0.5
                } else {
                    0.0
                }
            }
            Payoff::Abs { center } => (x - center).abs(),
            Payoff::Quartic => x.powi(4),
            Payoff::Table { xs, ys } => table_eval(xs, ys, x),
            Payoff::Combo { terms } => terms.iter().map(|t| t.weight * t.payoff.eval(x)).sum(),
            Payoff::AbsPow { inner, p } => inner.eval(x).abs().powf(*p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Payoff::Table { xs, ys } => {
                if xs.len() < 2 || xs.len() != ys.len() {
                    return argument("table payoff needs at least two (x, y) points of equal count");
                }
                if !xs.windows(2).all(|w| w[1] > w[0]) {
                    return argument("table abscissae must be strictly increasing");
                }
                if xs.iter().chain(ys).any(|v| !v.is_finite()) {
                    return domain("table payoff has non-finite entries");
                }
                Ok(())
            }
            Payoff::Combo { terms } => terms.iter().try_for_each(|t| t.payoff.validate()),
            Payoff::AbsPow { inner, p } => {
                if *p <= 0.0 {
                    return argument("abs_pow exponent must be positive");
                }
                inner.validate()
            }
            _ => Ok(()),
        }
    }

    /// Points where the payoff has a kink or a jump.
    pub fn singular_points(&self) -> Vec<f64> {
        let mut v = match self {
            Payoff::Call { strike } | Payoff::Put { strike } | Payoff::Digital { strike } => vec![*strike],
            Payoff::Abs { center } => vec![*center],
            Payoff::Table { xs, .. } => xs.clone(),
            Payoff::Combo { terms } => terms.iter().flat_map(|t| t.payoff.singular_points()).collect(),
            Payoff::AbsPow { inner, .. } => inner.singular_points(),
            _ => vec![],
        };
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    pub fn has_jump(&self) -> bool {
        match self {
            Payoff::Digital { .. } => true,
            Payoff::Combo { terms } => terms.iter().any(|t| t.weight != 0.0 && t.payoff.has_jump()),
            Payoff::AbsPow { inner, .. } => inner.has_jump(),
            _ => false,
        }
    }

    pub fn growth(&self) -> GrowthClass {
        match self {
            Payoff::Constant { .. } | Payoff::Digital { .. } => GrowthClass::Bounded,
            Payoff::Linear { slope, .. } => {
                if *slope == 0.0 {
                    GrowthClass::Bounded
                } else {
                    GrowthClass::Linear
                }
            }
            Payoff::Call { .. } | Payoff::Put { .. } | Payoff::Abs { .. } => GrowthClass::Linear,
            Payoff::Table { xs, ys } => {
                let n = xs.len();
                let left = (ys[1] - ys[0]) / (xs[1] - xs[0]);
                let right = (ys[n - 1] - ys[n - 2]) / (xs[n - 1] - xs[n - 2]);
                if left == 0.0 && right == 0.0 {
                    GrowthClass::Bounded
                } else {
                    GrowthClass::Linear
                }
            }
            Payoff::Square { .. } | Payoff::NegSquare => GrowthClass::Quadratic,
            Payoff::Quartic => GrowthClass::Higher,
            Payoff::Combo { terms } => terms
                .iter()
                .filter(|t| t.weight != 0.0)
                .map(|t| t.payoff.growth())
                .max()
                .unwrap_or(GrowthClass::Bounded),
            Payoff::AbsPow { inner, p } => match (inner.growth(), *p) {
                (GrowthClass::Bounded, _) => GrowthClass::Bounded,
                (GrowthClass::Linear, p) if p <= 1.0 => GrowthClass::Linear,
                (GrowthClass::Linear, p) if p <= 2.0 => GrowthClass::Quadratic,
                (GrowthClass::Quadratic, p) if p <= 1.0 => GrowthClass::Quadratic,
                _ => GrowthClass::Higher,
            },
        }
    }

    pub fn scaled(&self, lambda: f64) -> Payoff {
        Payoff::Combo { terms: vec![Weighted { weight: lambda, payoff: self.clone() }] }
    }

    pub fn negated(&self) -> Payoff {
        self.scaled(-1.0)
    }

    pub fn shifted(&self, c: f64) -> Payoff {
        Payoff::Combo {
            terms: vec![
                Weighted { weight: 1.0, payoff: self.clone() },
                Weighted { weight: 1.0, payoff: Payoff::Constant { value: c } },
            ],
        }
    }

    pub fn plus(&self, other: &Payoff) -> Payoff {
        Payoff::Combo {
            terms: vec![
                Weighted { weight: 1.0, payoff: self.clone() },
                Weighted { weight: 1.0, payoff: other.clone() },
            ],
        }
    }

    pub fn abs_pow(&self, p: f64) -> Payoff {
        Payoff::AbsPow { inner: Box::new(self.clone()), p }
    }

    /// Values on a uniform mesh with spacing `dx`. Nodes that carry a
    /// singular point are sampled pointwise (jumps give the midpoint); nodes
    /// whose cell `[x - dx/2, x + dx/2]` contains an off-node singular point
    /// get the cell average. Combinations are sampled term by term, so the
    /// sampling is linear.
    pub fn sample_on_mesh(&self, xs: &[f64], dx: f64) -> Result<Vec<f64>> {
        if let Payoff::Combo { terms } = self {
            let mut out = vec![0.0; xs.len()];
            for t in terms {
                for (o, v) in out.iter_mut().zip(t.payoff.sample_on_mesh(xs, dx)?) {
                    *o += t.weight * v;
                }
            }
            return Ok(out);
        }
        let sing = self.singular_points();
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let lo = x - 0.5 * dx;
            let hi = x + 0.5 * dx;
            let on_node = sing.iter().any(|s| (s - x).abs() <= 1e-12 * (1.0 + x.abs()));
            let inside: Vec<f64> = sing.iter().copied().filter(|s| *s > lo && *s < hi).collect();
            let v = if on_node || inside.is_empty() {
                self.eval(x)
            } else {
                cell_average(self, lo, hi, &inside)
            };
            if !v.is_finite() {
                return domain(format!("payoff is not finite at x = {x}"));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// `E[f(m + s * xi)]`, `xi` standard normal, when a closed form exists.
    pub fn gaussian_expectation(&self, mean: f64, sd: f64) -> Option<f64> {
        if sd == 0.0 {
            return Some(self.eval(mean));
        }
        let n = Normal::new(0.0, 1.0).ok()?;
        let var = sd * sd;
        // E[(m + s xi - k)^+] = (m-k) Phi(d) + s phi(d), d = (m-k)/s.
        let call = |k: f64| {
            let d = (mean - k) / sd;
            (mean - k) * n.cdf(d) + sd * n.pdf(d)
        };
        Some(match self {
            Payoff::Linear { slope, intercept } => slope * mean + intercept,
            Payoff::Constant { value } => *value,
            Payoff::Square { scale } => scale * (mean * mean + var),
            Payoff::NegSquare => -(mean * mean + var),
            Payoff::Call { strike } => call(*strike),
            Payoff::Put { strike } => call(*strike) - (mean - strike),
            Payoff::Digital { strike } => n.cdf((mean - strike) / sd),
            Payoff::Abs { center } => 2.0 * call(*center) - (mean - center),
            Payoff::Quartic => mean.powi(4) + 6.0 * mean * mean * var + 3.0 * var * var,
            Payoff::Table { xs, ys } => {
                // Linear part through the first segment plus calls at each breakpoint.
                let s0 = (ys[1] - ys[0]) / (xs[1] - xs[0]);
                let mut v = ys[0] + s0 * (mean - xs[0]);
                for i in 1..xs.len() - 1 {
                    let s_prev = (ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1]);
                    let s_next = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
                    v += (s_next - s_prev) * call(xs[i]);
                }
                v
            }
            Payoff::Combo { terms } => {
                let mut v = 0.0;
                for t in terms {
                    v += t.weight * t.payoff.gaussian_expectation(mean, sd)?;
                }
                v
            }
            Payoff::AbsPow { .. } => return None,
        })
    }

    pub fn describe(&self) -> String {
        match self {
            Payoff::Linear { slope, intercept } => format!("{slope}*x+{intercept}"),
            Payoff::Constant { value } => format!("{value}"),
            Payoff::Square { scale } => format!("{scale}*x^2"),
            Payoff::NegSquare => "-x^2".into(),
            Payoff::Call { strike } => format!("(x-{strike})+"),
            Payoff::Put { strike } => format!("({strike}-x)+"),
            Payoff::Digital { strike } => format!("1{{x>{strike}}}"),
            Payoff::Abs { center } => format!("|x-{center}|"),
            Payoff::Quartic => "x^4".into(),
            Payoff::Table { xs, .. } => format!("table[{}]", xs.len()),
            Payoff::Combo { terms } => terms
                .iter()
                .map(|t| format!("{}*({})", t.weight, t.payoff.describe()))
                .collect::<Vec<_>>()
                .join(" + "),
            Payoff::AbsPow { inner, p } => format!("|{}|^{p}", inner.describe()),
        }
    }
}

fn table_eval(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    let i = if x <= xs[0] {
        0
    } else if x >= xs[n - 1] {
        n - 2
    } else {
        xs.partition_point(|v| *v <= x).saturating_sub(1).min(n - 2)
    };
    let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + w * (ys[i + 1] - ys[i])
}

/// Simpson average over `[lo, hi]` split at the singular points.
fn cell_average(f: &Payoff, lo: f64, hi: f64, cuts: &[f64]) -> f64 {
    let mut pts = vec![lo];
    pts.extend_from_slice(cuts);
    pts.push(hi);
    let mut total = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let m = 8;
        let h = (b - a) / m as f64;
        let eps = 1e-12 * (b - a);
        let mut s = 0.0;
        for j in 0..=m {
            let x = (a + j as f64 * h).clamp(a + eps, b - eps);
            let c = if j == 0 || j == m {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            s += c * f.eval(x);
        }
        total += s * h / 3.0;
    }
    total / (hi - lo)
}

/// A claim paid at the horizon as a function of `B_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    #[serde(default)]
    pub label: String,
    pub payoff: Payoff,
}

impl Claim {
    pub fn new(label: impl Into<String>, payoff: Payoff) -> Self {
        Self { label: label.into(), payoff }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.payoff.eval(x)
    }

    pub fn growth(&self) -> GrowthClass {
        self.payoff.growth()
    }

    pub fn negated(&self) -> Claim {
        Claim::new(format!("-({})", self.label), self.payoff.negated())
    }

    pub fn scaled(&self, lambda: f64) -> Claim {
        Claim::new(format!("{lambda}*({})", self.label), self.payoff.scaled(lambda))
    }
}

/// The ten claims used across the replicability checks.
pub fn bundled_claims() -> Vec<Claim> {
    vec![
        Claim::new("B_T", Payoff::linear(1.0, 0.0)),
        Claim::new("2B_T+7", Payoff::linear(2.0, 7.0)),
        Claim::new("3", Payoff::constant(3.0)),
        Claim::new("B_T^2", Payoff::square()),
        Claim::new("-B_T^2", Payoff::NegSquare),
        Claim::new("call(0)", Payoff::Call { strike: 0.0 }),
        Claim::new("put(0.5)", Payoff::Put { strike: 0.5 }),
        Claim::new("digital(0)", Payoff::Digital { strike: 0.0 }),
        Claim::new("|B_T|-0.25B_T^2", Payoff::Abs { center: 0.0 }.plus(&Payoff::square().scaled(-0.25))),
        Claim::new("table", Payoff::Table { xs: vec![-2.0, -1.0, 0.0, 1.0, 2.0], ys: vec![1.0, 0.0, 0.5, 0.0, 1.0] }),
    ]
}

/// Payoff of the monitored values `(B_{t_1}, ..., B_{t_n})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MultiPayoff {
    /// `f(x_n)`.
    Terminal { payoff: Payoff },
    /// `f(x_index)`.
    At { index: usize, payoff: Payoff },
    /// `f(x_to - x_from)`.
    Increment { from: usize, to: usize, payoff: Payoff },
    Sum { terms: Vec<MultiPayoff> },
}

impl MultiPayoff {
    pub fn eval(&self, xs: &[f64]) -> f64 {
        match self {
            MultiPayoff::Terminal { payoff } => payoff.eval(xs[xs.len() - 1]),
            MultiPayoff::At { index, payoff } => payoff.eval(xs[*index]),
            MultiPayoff::Increment { from, to, payoff } => payoff.eval(xs[*to] - xs[*from]),
            MultiPayoff::Sum { terms } => terms.iter().map(|t| t.eval(xs)).sum(),
        }
    }

    pub fn max_index(&self) -> usize {
        match self {
            MultiPayoff::Terminal { .. } => 0,
            MultiPayoff::At { index, .. } => *index,
            MultiPayoff::Increment { from, to, .. } => (*from).max(*to),
            MultiPayoff::Sum { terms } => terms.iter().map(|t| t.max_index()).max().unwrap_or(0),
        }
    }
}

/// A claim monitored at finitely many dates `t_1 < ... < t_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitoredClaim {
    pub dates: Vec<f64>,
    pub payoff: MultiPayoff,
}

impl MonitoredClaim {
    pub fn validate(&self) -> Result<()> {
        if self.dates.is_empty() {
            return argument("monitored claim needs at least one date");
        }
        if !self.dates.windows(2).all(|w| w[1] > w[0]) || self.dates[0] <= 0.0 {
            return argument("monitoring dates must be positive and strictly increasing");
        }
        if self.payoff.max_index() >= self.dates.len() {
            return argument("payoff refers to a monitoring date that does not exist");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: composite Simpson over [-12, 12] standard
    /// deviations, split at the payoff's singular points.
    fn quad(f: &Payoff, sd: f64) -> f64 {
        let mut cuts = vec![-12.0];
        let mut inner: Vec<f64> = f.singular_points().iter().map(|x| x / sd).filter(|z| z.abs() < 12.0).collect();
        inner.sort_by(f64::total_cmp);
        cuts.extend(inner);
        cuts.push(12.0);
        let mut total = 0.0;
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let n = 8_000;
            let h = (b - a) / n as f64;
            let g = |z: f64| {
                // one-sided limits at the cut points
                let z = z.clamp(a + 1e-12, b - 1e-12);
                f.eval(sd * z) * (-0.5 * z * z).exp()
            };
            let mut s = g(a) + g(b);
            for j in 1..n {
                s += if j % 2 == 1 { 4.0 } else { 2.0 } * g(a + j as f64 * h);
            }
            total += s * h / 3.0;
        }
        total / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn closed_forms_match_quadrature() {
        let cases = vec![
            Payoff::square(),
            Payoff::NegSquare,
            Payoff::Call { strike: 0.3 },
            Payoff::Put { strike: -0.2 },
            Payoff::Digital { strike: 0.5 },
            Payoff::Abs { center: 0.1 },
            Payoff::Quartic,
            Payoff::Table { xs: vec![-1.0, 0.0, 2.0], ys: vec![1.0, 0.0, 3.0] },
            Payoff::linear(2.0, 7.0),
        ];
        for p in cases {
            let cf = p.gaussian_expectation(0.0, 1.7).unwrap();
            let q = quad(&p, 1.7);
            assert!((cf - q).abs() < 1e-6, "{p:?}: {cf} vs {q}");
        }
    }

    #[test]
    fn digital_midpoint_at_strike() {
        let d = Payoff::Digital { strike: 0.0 };
        assert_eq!(d.eval(0.0), 0.5);
        assert!(d.has_jump());
    }

    #[test]
    fn off_node_kink_is_cell_averaged() {
        let c = Payoff::Call { strike: 0.05 };
        let xs = [-0.1, 0.0, 0.1];
        let v = c.sample_on_mesh(&xs, 0.1).unwrap();
        // Cell [-0.05, 0.05] contains the kink: average of (x - 0.05)^+ is 0.
        assert!(v[1].abs() < 1e-12);
        // Cell [0.05, 0.15] touches the kink only at its edge.
        assert!((v[2] - 0.05).abs() < 1e-12);
        let on = Payoff::Call { strike: 0.0 }.sample_on_mesh(&xs, 0.1).unwrap();
        assert_eq!(on, vec![0.0, 0.0, 0.1]);
    }

    #[test]
    fn serde_roundtrip() {
        let p = Payoff::Combo {
            terms: vec![
                Weighted { weight: 1.0, payoff: Payoff::Abs { center: 0.0 } },
                Weighted { weight: -0.5, payoff: Payoff::square() },
            ],
        };
        let s = serde_json::to_string(&p).unwrap();
        let back: Payoff = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
        let call: Payoff = serde_json::from_str(r#"{"kind":"call","strike":0.0}"#).unwrap();
        assert_eq!(call, Payoff::Call { strike: 0.0 });
    }

    #[test]
    fn growth_classes() {
        assert_eq!(Payoff::Digital { strike: 0.0 }.growth(), GrowthClass::Bounded);
        assert_eq!(Payoff::square().growth(), GrowthClass::Quadratic);
        assert_eq!(Payoff::Call { strike: 0.0 }.growth(), GrowthClass::Linear);
        assert_eq!(Payoff::square().abs_pow(1.5).growth(), GrowthClass::Higher);
    }

    #[test]
    fn multi_payoff_increment() {
        let m = MultiPayoff::Increment { from: 0, to: 1, payoff: Payoff::square() };
        assert_eq!(m.eval(&[1.0, 3.0]), 4.0);
        let c = MonitoredClaim { dates: vec![0.5, 1.0], payoff: m };
        c.validate().unwrap();
    }
}
