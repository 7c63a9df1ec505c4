//! f-divergences, their convex conjugates, and the duality oracle.
//!
//! Conventions follow the usual variational table: `D_f(P∥Q) = Σ q f(p/q)`
//! with `f` convex and `f(1) = 0`, and `f*(t) = sup_u (u t − f(u))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Tag selecting the per-example training loss derived from a divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    TvMle,
    Pearson,
    Hellinger,
    Kl,
    ReverseKl,
    Js,
}

/// Interval of admissible conjugate arguments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_open: bool,
    pub hi_open: bool,
}

impl Interval {
    pub const REAL: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
        lo_open: true,
        hi_open: true,
    };

    pub fn contains(&self, t: f64) -> bool {
        let above = if self.lo_open { t > self.lo } else { t >= self.lo };
        let below = if self.hi_open { t < self.hi } else { t <= self.hi };
        above && below
    }
}

/// Clipping constants for the log/exp forms. Log arguments are clipped to
/// `[log_min, log_max]`, exponent arguments to `[exp_min, exp_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clipping {
    pub log_min: f64,
    pub log_max: f64,
    pub exp_min: f64,
    pub exp_max: f64,
}

impl Default for Clipping {
    fn default() -> Self {
        Clipping {
            log_min: 1e-6,
            log_max: 1e6,
            exp_min: -30.0,
            exp_max: 30.0,
        }
    }
}

/// Distance kept from an open domain endpoint when clipping a conjugate
/// argument back into `dom(f*)`.
pub const DOMAIN_MARGIN: f64 = 1e-6;

/// Counters of every clamp applied while evaluating conjugates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipCounters {
    /// Arguments outside `dom(f*)` pulled back to the boundary.
    pub domain_violations: u64,
    /// Total-variation arguments with `|t| > ½` (evaluated unclamped).
    pub tv_outside_half: u64,
    pub log_clips: u64,
    pub exp_clips: u64,
}

impl ClipCounters {
    pub fn merge(&mut self, other: &ClipCounters) {
        self.domain_violations += other.domain_violations;
        self.tv_outside_half += other.tv_outside_half;
        self.log_clips += other.log_clips;
        self.exp_clips += other.exp_clips;
    }
}

/// A registered f-divergence.
#[derive(Debug, Clone, Copy)]
pub struct FDivergenceSpec {
    pub name: &'static str,
    pub f: fn(f64) -> f64,
    pub f_star: fn(f64) -> f64,
    pub f_star_prime: fn(f64) -> f64,
    pub dom_f_star: Interval,
    /// `lim_{u→∞} f(u)/u`; `f64::INFINITY` when unbounded.
    pub slope_at_infinity: f64,
    pub loss_kind: LossKind,
    pub stability: Option<Clipping>,
    /// Acceptance bound for [`conjugate_check`] on the default grid.
    pub conjugate_bound: f64,
}

fn tv_f(u: f64) -> f64 {
    0.5 * (u - 1.0).abs()
}
fn identity(t: f64) -> f64 {
    t
}
fn one(_: f64) -> f64 {
    1.0
}
fn pearson_f(u: f64) -> f64 {
    (u - 1.0).powi(2)
}
fn pearson_star(t: f64) -> f64 {
    t * t / 4.0 + t
}
fn pearson_star_prime(t: f64) -> f64 {
    t / 2.0 + 1.0
}
fn hellinger_f(u: f64) -> f64 {
    (u.sqrt() - 1.0).powi(2)
}
fn hellinger_star(t: f64) -> f64 {
    t / (1.0 - t)
}
fn hellinger_star_prime(t: f64) -> f64 {
    1.0 / (1.0 - t).powi(2)
}
fn kl_f(u: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else {
        u * u.ln()
    }
}
fn kl_star(t: f64) -> f64 {
    (t - 1.0).exp()
}
fn reverse_kl_f(u: f64) -> f64 {
    -u.ln()
}
fn reverse_kl_star(t: f64) -> f64 {
    -1.0 - (-t).ln()
}
fn reverse_kl_star_prime(t: f64) -> f64 {
    -1.0 / t
}
fn js_f(u: f64) -> f64 {
    kl_f(u) - (u + 1.0) * ((u + 1.0) / 2.0).ln()
}
fn js_star(t: f64) -> f64 {
    -(2.0 - t.exp()).ln()
}
fn js_star_prime(t: f64) -> f64 {
    let e = t.exp();
    e / (2.0 - e)
}

pub const TOTAL_VARIATION: FDivergenceSpec = FDivergenceSpec {
    name: "total_variation",
    f: tv_f,
    f_star: identity,
    f_star_prime: one,
    dom_f_star: Interval {
        lo: -0.5,
        hi: 0.5,
        lo_open: false,
        hi_open: false,
    },
    slope_at_infinity: 0.5,
    loss_kind: LossKind::TvMle,
    stability: None,
    conjugate_bound: 1e-4,
};

pub const PEARSON_CHI2: FDivergenceSpec = FDivergenceSpec {
    name: "pearson_chi2",
    f: pearson_f,
    f_star: pearson_star,
    f_star_prime: pearson_star_prime,
    dom_f_star: Interval::REAL,
    slope_at_infinity: f64::INFINITY,
    loss_kind: LossKind::Pearson,
    stability: None,
    conjugate_bound: 1e-4,
};

pub const SQUARED_HELLINGER: FDivergenceSpec = FDivergenceSpec {
    name: "squared_hellinger",
    f: hellinger_f,
    f_star: hellinger_star,
    f_star_prime: hellinger_star_prime,
    dom_f_star: Interval {
        lo: f64::NEG_INFINITY,
        hi: 1.0,
        lo_open: true,
        hi_open: true,
    },
    slope_at_infinity: 1.0,
    loss_kind: LossKind::Hellinger,
    stability: None,
    conjugate_bound: 1e-4,
};

pub const KL: FDivergenceSpec = FDivergenceSpec {
    name: "kl",
    f: kl_f,
    f_star: kl_star,
    f_star_prime: kl_star,
    dom_f_star: Interval::REAL,
    slope_at_infinity: f64::INFINITY,
    loss_kind: LossKind::Kl,
    stability: Some(Clipping {
        log_min: 1e-6,
        log_max: 1e6,
        exp_min: -30.0,
        exp_max: 30.0,
    }),
    conjugate_bound: 1e-3,
};

pub const REVERSE_KL: FDivergenceSpec = FDivergenceSpec {
    name: "reverse_kl",
    f: reverse_kl_f,
    f_star: reverse_kl_star,
    f_star_prime: reverse_kl_star_prime,
    dom_f_star: Interval {
        lo: f64::NEG_INFINITY,
        hi: 0.0,
        lo_open: true,
        hi_open: true,
    },
    slope_at_infinity: 0.0,
    loss_kind: LossKind::ReverseKl,
    stability: Some(Clipping {
        log_min: 1e-6,
        log_max: 1e6,
        exp_min: -30.0,
        exp_max: 30.0,
    }),
    conjugate_bound: 1e-4,
};

pub const JENSEN_SHANNON: FDivergenceSpec = FDivergenceSpec {
    name: "jensen_shannon",
    f: js_f,
    f_star: js_star,
    f_star_prime: js_star_prime,
    dom_f_star: Interval {
        lo: f64::NEG_INFINITY,
        hi: std::f64::consts::LN_2,
        lo_open: true,
        hi_open: true,
    },
    slope_at_infinity: std::f64::consts::LN_2,
    loss_kind: LossKind::Js,
    stability: Some(Clipping {
        log_min: 1e-6,
        log_max: 1e6,
        exp_min: -30.0,
        exp_max: 30.0,
    }),
    conjugate_bound: 1e-3,
};

/// Every built-in divergence, in registration order.
pub fn builtin() -> Vec<FDivergenceSpec> {
    vec![
        TOTAL_VARIATION,
        PEARSON_CHI2,
        SQUARED_HELLINGER,
        KL,
        REVERSE_KL,
        JENSEN_SHANNON,
    ]
}

/// Look a built-in divergence up by name.
pub fn by_name(name: &str) -> Result<FDivergenceSpec> {
    builtin()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownDivergence(name.to_string()))
}

impl FDivergenceSpec {
    /// `Σ q f(p/q)` over `(p, q)` outcome pairs with the support conventions
    /// of [`crate::mdp::f_divergence_between`].
    pub fn divergence(&self, pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
        let mut total = 0.0;
        for (p, q) in pairs {
            if q > 0.0 {
                total += q * (self.f)(p / q);
            } else if p > 0.0 {
                if self.slope_at_infinity.is_finite() {
                    total += self.slope_at_infinity * p;
                } else {
                    return f64::INFINITY;
                }
            }
        }
        total
    }

    /// `(f*(t), f*'(t))` as used by the training losses: arguments outside
    /// `dom(f*)` are clipped to the boundary (derivative zero, counted), and
    /// the log/exp forms apply the spec's stability clipping. Total
    /// variation is evaluated without clamping; arguments beyond `½` are
    /// only counted.
    pub fn conjugate_for_loss(&self, t: f64, counters: &mut ClipCounters) -> (f64, f64) {
        if self.loss_kind == LossKind::TvMle {
            if t.abs() > 0.5 {
                counters.tv_outside_half += 1;
            }
            return ((self.f_star)(t), (self.f_star_prime)(t));
        }
        let dom = self.dom_f_star;
        let mut clipped = false;
        let mut t = t;
        if !dom.contains(t) {
            counters.domain_violations += 1;
            clipped = true;
            t = if t >= dom.hi {
                if dom.hi_open {
                    dom.hi - DOMAIN_MARGIN
                } else {
                    dom.hi
                }
            } else if dom.lo_open {
                dom.lo + DOMAIN_MARGIN
            } else {
                dom.lo
            };
        }
        let Some(clip) = self.stability else {
            let d = if clipped { 0.0 } else { (self.f_star_prime)(t) };
            return ((self.f_star)(t), d);
        };
        match self.loss_kind {
            LossKind::Kl => {
                let arg = t - 1.0;
                let c = arg.clamp(clip.exp_min, clip.exp_max);
                if c != arg {
                    counters.exp_clips += 1;
                    clipped = true;
                }
                let v = c.exp();
                (v, if clipped { 0.0 } else { v })
            }
            LossKind::ReverseKl => {
                let arg = -t;
                let c = arg.clamp(clip.log_min, clip.log_max);
                if c != arg {
                    counters.log_clips += 1;
                    clipped = true;
                }
                (-1.0 - c.ln(), if clipped { 0.0 } else { 1.0 / c })
            }
            LossKind::Js => {
                let c = t.clamp(clip.exp_min, clip.exp_max);
                if c != t {
                    counters.exp_clips += 1;
                    clipped = true;
                }
                let e = c.exp();
                let arg = 2.0 - e;
                let a = arg.clamp(clip.log_min, clip.log_max);
                if a != arg {
                    counters.log_clips += 1;
                    clipped = true;
                }
                (-a.ln(), if clipped { 0.0 } else { e / a })
            }
            _ => {
                let d = if clipped { 0.0 } else { (self.f_star_prime)(t) };
                ((self.f_star)(t), d)
            }
        }
    }
}

/// Grid for the duality oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub x_points: usize,
    /// Conjugate arguments are searched on `[t_min, t_max] ∩ dom(f*)`.
    pub t_min: f64,
    pub t_max: f64,
    pub t_step: f64,
}

impl Default for GridSpec {
    /// `x ∈ [0.05, 4]` at 80 points, `t ∈ [−25, 25]` at spacing `1e-3`.
    fn default() -> Self {
        GridSpec {
            x_min: 0.05,
            x_max: 4.0,
            x_points: 80,
            t_min: -25.0,
            t_max: 25.0,
            t_step: 1e-3,
        }
    }
}

/// One structured duality-check record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub spec: String,
    pub grid: GridSpec,
    pub residual: f64,
    pub bound: f64,
}

fn t_grid(spec: &FDivergenceSpec, grid: &GridSpec) -> Vec<f64> {
    let dom = spec.dom_f_star;
    let mut lo = grid.t_min.max(dom.lo);
    let mut hi = grid.t_max.min(dom.hi);
    if lo == dom.lo && dom.lo_open {
        lo += grid.t_step;
    }
    if hi == dom.hi && dom.hi_open {
        hi -= grid.t_step;
    }
    let n = ((hi - lo) / grid.t_step).floor() as usize;
    let mut ts: Vec<f64> = (0..=n).map(|k| lo + k as f64 * grid.t_step).collect();
    if ts.last().is_some_and(|&t| t < hi) {
        ts.push(hi);
    }
    ts
}

/// `max_x |f(x) − max_t (x t − f*(t))|` over the grid.
pub fn conjugate_check(spec: &FDivergenceSpec, grid: &GridSpec) -> f64 {
    conjugate_check_with(Exec::default(), spec, grid)
}

pub fn conjugate_check_with(exec: Exec, spec: &FDivergenceSpec, grid: &GridSpec) -> f64 {
    let ts = t_grid(spec, grid);
    let fs: Vec<f64> = ts.iter().map(|&t| (spec.f_star)(t)).collect();
    let step = if grid.x_points > 1 {
        (grid.x_max - grid.x_min) / (grid.x_points - 1) as f64
    } else {
        0.0
    };
    exec.map_range(grid.x_points, |i| {
        let x = grid.x_min + i as f64 * step;
        let best = ts
            .iter()
            .zip(&fs)
            .map(|(t, fst)| x * t - fst)
            .fold(f64::NEG_INFINITY, f64::max);
        ((spec.f)(x) - best).abs()
    })
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn duality_report(spec: &FDivergenceSpec, grid: &GridSpec) -> DualityReport {
    DualityReport {
        spec: spec.name.to_string(),
        grid: *grid,
        residual: conjugate_check(spec, grid),
        bound: spec.conjugate_bound,
    }
}

/// `|f(1)|` and the largest midpoint-convexity excess on a grid of `(0, 4]`.
pub fn generator_check(spec: &FDivergenceSpec) -> (f64, f64) {
    let xs: Vec<f64> = (1..=80).map(|i| i as f64 * 0.05).collect();
    let mut worst: f64 = 0.0;
    for &a in &xs {
        for &b in &xs {
            let mid = (spec.f)((a + b) / 2.0);
            let chord = ((spec.f)(a) + (spec.f)(b)) / 2.0;
            worst = worst.max(mid - chord);
        }
    }
    ((spec.f)(1.0).abs(), worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_vanish_at_one_and_are_convex() {
        for spec in builtin() {
            let (f1, excess) = generator_check(&spec);
            assert!(f1 <= 1e-12, "{}", spec.name);
            assert!(excess <= 1e-10, "{}: {excess}", spec.name);
        }
    }

    #[test]
    fn point_values() {
        assert_eq!((PEARSON_CHI2.f)(2.0), 1.0);
        assert_eq!((SQUARED_HELLINGER.f)(4.0), 1.0);
        assert_eq!((PEARSON_CHI2.f_star)(0.0), 0.0);
        assert!(((JENSEN_SHANNON.f)(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn tv_two_outcome() {
        let d = TOTAL_VARIATION.divergence([(0.5, 1.0), (0.5, 0.0)].into_iter());
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unbounded_slope_gives_infinity() {
        let d = PEARSON_CHI2.divergence([(0.5, 1.0), (0.5, 0.0)].into_iter());
        assert_eq!(d, f64::INFINITY);
    }

    #[test]
    fn zero_zero_contributes_nothing() {
        for spec in builtin() {
            assert_eq!(spec.divergence([(0.0, 0.0), (1.0, 1.0)].into_iter()), 0.0);
        }
    }

    #[test]
    fn lookup_by_name() {
        assert_eq!(by_name("pearson_chi2").unwrap().loss_kind, LossKind::Pearson);
        assert!(matches!(by_name("nope"), Err(Error::UnknownDivergence(_))));
    }

    #[test]
    fn hellinger_domain_clipping_is_counted() {
        let mut c = ClipCounters::default();
        let (v, d) = SQUARED_HELLINGER.conjugate_for_loss(2.0, &mut c);
        assert_eq!(c.domain_violations, 1);
        assert!(v.is_finite() && d == 0.0);
    }

    #[test]
    fn kl_exp_clipping() {
        let mut c = ClipCounters::default();
        let (v, _) = KL.conjugate_for_loss(100.0, &mut c);
        assert_eq!(c.exp_clips, 1);
        assert!((v - 30f64.exp()).abs() / v < 1e-12);
    }

    #[test]
    fn tv_is_not_clamped() {
        let mut c = ClipCounters::default();
        let (v, d) = TOTAL_VARIATION.conjugate_for_loss(3.0, &mut c);
        assert_eq!((v, d), (3.0, 1.0));
        assert_eq!(c.tv_outside_half, 1);
    }

    #[test]
    fn duality_grid_search_point_checks() {
        // single-x grids
        let at = |x: f64| GridSpec {
            x_min: x,
            x_max: x,
            x_points: 1,
            ..GridSpec::default()
        };
        assert!(conjugate_check(&TOTAL_VARIATION, &at(1.0)) <= 1e-4);
        assert!(conjugate_check(&PEARSON_CHI2, &at(2.0)) <= 1e-4);
        assert!(conjugate_check(&SQUARED_HELLINGER, &at(4.0)) <= 1e-4);
    }
}
