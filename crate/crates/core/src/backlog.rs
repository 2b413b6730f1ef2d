//! Discrete-event model of the laboratory queue.
//!
//! Cases arrive as a Poisson stream, each with a severity class and a
//! geometric number of exhibits. Analysts serve one case at a time; a case
//! takes the sum of its exhibits' exponential service times. The queue is
//! served either first-come first-served or by severity (person crime,
//! then property, then fraud; FIFO within a class).
//!
//! With field triage enabled a case reaches the laboratory only if its
//! triage draw falls under `dft_threshold_pass`, and then with
//! `max(1, round(exhibits * (1 - exhibit_reduction)))` exhibits.
//!
//! All randomness is drawn up front by [`generate_cases`] from a ChaCha8
//! stream seeded with `seed`, in a fixed per-case order (interarrival,
//! severity, exhibit count, triage draw, exhibit service times). Runs that
//! differ only in discipline, analysts or triage settings therefore see
//! the same cases.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::{total_cmp, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    PersonCrime,
    Property,
    Fraud,
}

impl Severity {
    /// Service order under the severity discipline.
    pub const ALL: [Severity; 3] = [Self::PersonCrime, Self::Property, Self::Fraud];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PersonCrime => "person_crime",
            Self::Property => "property",
            Self::Fraud => "fraud",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discipline {
    Fifo,
    Severity,
}

/// Relative weights; need not sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityMix<S = f64> {
    pub person_crime: S,
    pub property: S,
    pub fraud: S,
}

impl<S: Real> SeverityMix<S> {
    pub fn only(severity: Severity) -> Self {
        let pick = |s| if s == severity { S::one() } else { S::zero() };
        Self {
            person_crime: pick(Severity::PersonCrime),
            property: pick(Severity::Property),
            fraud: pick(Severity::Fraud),
        }
    }

    fn weight(&self, s: Severity) -> S {
        match s {
            Severity::PersonCrime => self.person_crime,
            Severity::Property => self.property,
            Severity::Fraud => self.fraud,
        }
    }

    fn draw(&self, u: S) -> Severity {
        let total = self.person_crime + self.property + self.fraud;
        let mut acc = S::zero();
        for s in Severity::ALL {
            acc = acc + self.weight(s) / total;
            if u < acc {
                return s;
            }
        }
        // Rounding can leave acc a hair under one.
        Severity::ALL.into_iter().rev().find(|&s| self.weight(s) > S::zero()).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig<S = f64> {
    /// Simulated days.
    pub horizon: S,
    /// New cases per day.
    pub arrival_rate: S,
    pub severity_mix: SeverityMix<S>,
    pub analysts: u32,
    /// Mean analyst days per exhibit.
    pub service_days: S,
    /// Mean exhibits per case, at least one.
    pub exhibits_per_case: S,
    pub discipline: Discipline,
    pub dft_enabled: bool,
    /// Fraction of triaged cases forwarded to the laboratory.
    pub dft_threshold_pass: S,
    /// Fraction of a forwarded case's exhibits no longer sent.
    pub exhibit_reduction: S,
    pub seed: u64,
    /// Cases already queued at day zero.
    #[serde(default)]
    pub initial_backlog: u32,
}

impl<S: Real> Default for SimConfig<S> {
    fn default() -> Self {
        Self {
            horizon: S::of(365.0),
            arrival_rate: S::of(1.5),
            severity_mix: SeverityMix { person_crime: S::of(0.3), property: S::of(0.4), fraud: S::of(0.3) },
            analysts: 4,
            service_days: S::of(1.0),
            exhibits_per_case: S::of(3.0),
            discipline: Discipline::Fifo,
            dft_enabled: false,
            dft_threshold_pass: S::of(0.5),
            exhibit_reduction: S::of(0.75),
            seed: 0,
            initial_backlog: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BacklogError {
    #[error("invalid simulation config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("case {0} is out of order or has no exhibits")]
    CaseOrder(u32),
}

impl BacklogError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidConfig { .. } => "invalid_config",
            Self::CaseOrder(_) => "case_order",
        }
    }
}

impl<S: Real> SimConfig<S> {
    pub fn validate(&self) -> Result<(), BacklogError> {
        let bad = |field, reason: &str| Err(BacklogError::InvalidConfig { field, reason: reason.to_string() });
        let finite_nonneg = |v: S| v.is_finite() && v >= S::zero();
        let fraction = |v: S| finite_nonneg(v) && v <= S::one();
        if !(finite_nonneg(self.horizon) && self.horizon > S::zero()) {
            return bad("horizon", "must be positive");
        }
        if !finite_nonneg(self.arrival_rate) {
            return bad("arrival_rate", "must be non-negative");
        }
        let mix = &self.severity_mix;
        if !Severity::ALL.iter().all(|&s| finite_nonneg(mix.weight(s))) {
            return bad("severity_mix", "weights must be non-negative");
        }
        if mix.person_crime + mix.property + mix.fraud <= S::zero() {
            return bad("severity_mix", "weights must not all be zero");
        }
        if self.analysts == 0 {
            return bad("analysts", "must be at least one");
        }
        if !(finite_nonneg(self.service_days) && self.service_days > S::zero()) {
            return bad("service_days", "must be positive");
        }
        if !(self.exhibits_per_case.is_finite() && self.exhibits_per_case >= S::one()) {
            return bad("exhibits_per_case", "must be at least one");
        }
        if !fraction(self.dft_threshold_pass) {
            return bad("dft_threshold_pass", "must be in [0, 1]");
        }
        if !fraction(self.exhibit_reduction) {
            return bad("exhibit_reduction", "must be in [0, 1]");
        }
        Ok(())
    }

    /// Offered load per analyst without triage; above one the queue grows.
    pub fn baseline_utilization(&self) -> S {
        self.arrival_rate * self.exhibits_per_case * self.service_days / S::of(self.analysts as f64)
    }

    pub fn parse(text: &str) -> Result<Self, BacklogError>
    where
        S: serde::de::DeserializeOwned,
    {
        let config: Self =
            toml::from_str(text).map_err(|e| BacklogError::InvalidConfig { field: "file", reason: e.to_string() })?;
        config.validate()?;
        Ok(config)
    }
}

/// One generated case with every random quantity it will ever need.
#[derive(Debug, Clone, PartialEq)]
pub struct Case<S = f64> {
    pub id: u32,
    pub arrival: S,
    pub severity: Severity,
    /// Service time of each exhibit, in the order they would be examined.
    pub exhibit_service: Vec<S>,
    /// Uniform draw compared against `dft_threshold_pass`.
    pub triage_draw: S,
}

impl<S: Real> Case<S> {
    pub fn exhibits(&self) -> u32 {
        self.exhibit_service.len() as u32
    }

    /// Whether the case reaches the laboratory, and with how many exhibits.
    pub fn at_laboratory(&self, config: &SimConfig<S>) -> Option<u32> {
        let n = self.exhibits();
        if !config.dft_enabled {
            return Some(n);
        }
        if self.triage_draw >= config.dft_threshold_pass {
            return None;
        }
        let kept = (S::of(n as f64) * (S::one() - config.exhibit_reduction)).round();
        Some(kept.to_u32().unwrap_or(n).clamp(1, n))
    }

    fn service(&self, exhibits: u32) -> S {
        self.exhibit_service[..exhibits as usize].iter().fold(S::zero(), |a, &b| a + b)
    }
}

fn uniform<S: Real>(rng: &mut ChaCha8Rng) -> S {
    S::of(rng.random::<f64>())
}

fn exponential<S: Real>(rng: &mut ChaCha8Rng, mean: S) -> S {
    -(S::one() - uniform::<S>(rng)).ln() * mean
}

/// Failures before the first success with success probability `1 / mean`,
/// plus one; the result has the requested mean.
fn exhibit_count<S: Real>(rng: &mut ChaCha8Rng, mean: S) -> u32 {
    let u = uniform::<S>(rng);
    if mean <= S::one() {
        return 1;
    }
    let q = S::one() - S::one() / mean;
    let k = ((S::one() - u).ln() / q.ln()).floor();
    1 + k.to_u32().unwrap_or(u32::MAX - 1)
}

/// Draws the initial backlog and every arrival up to the horizon.
pub fn generate_cases<S: Real>(config: &SimConfig<S>) -> Result<Vec<Case<S>>, BacklogError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cases = Vec::new();
    let draw_case = |rng: &mut ChaCha8Rng, id: u32, arrival: S| {
        let severity = config.severity_mix.draw(uniform(rng));
        let n = exhibit_count(rng, config.exhibits_per_case);
        let triage_draw = uniform(rng);
        let exhibit_service = (0..n).map(|_| exponential(rng, config.service_days)).collect();
        Case { id, arrival, severity, exhibit_service, triage_draw }
    };
    for _ in 0..config.initial_backlog {
        let id = cases.len() as u32;
        cases.push(draw_case(&mut rng, id, S::zero()));
    }
    if config.arrival_rate > S::zero() {
        let mean_gap = S::one() / config.arrival_rate;
        let mut t = S::zero();
        loop {
            t = t + exponential(&mut rng, mean_gap);
            if t > config.horizon {
                break;
            }
            let id = cases.len() as u32;
            cases.push(draw_case(&mut rng, id, t));
        }
    }
    Ok(cases)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaitStats<S = f64> {
    /// Cases of the class that reached the laboratory.
    pub cases: u32,
    /// Mean days from arrival to start of service; cases still queued at
    /// the horizon count as waiting until the horizon.
    pub mean_wait: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacklogTrace<S = f64> {
    /// Cases at the laboratory, queued or in service, at the end of each
    /// day `0..=horizon`.
    pub daily_backlog: Vec<u32>,
    pub waits: BTreeMap<Severity, WaitStats<S>>,
    /// Cases that reached the laboratory.
    pub arrivals: u32,
    pub completions: u32,
    pub final_backlog: u32,
    /// Cases triage kept away from the laboratory.
    pub diverted: u32,
}

impl<S: Real> BacklogTrace<S> {
    pub fn mean_wait(&self, severity: Severity) -> Option<S> {
        self.waits.get(&severity).map(|w| w.mean_wait)
    }

    /// `day<TAB>backlog` lines with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("day\tbacklog\n");
        for (day, n) in self.daily_backlog.iter().enumerate() {
            let _ = writeln!(out, "{day}\t{n}");
        }
        out
    }
}

/// Total order on simulated times (never NaN).
#[derive(Debug, Clone, Copy, PartialEq)]
struct At<S>(S);

impl<S: Real> Eq for At<S> {}

impl<S: Real> PartialOrd for At<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<S: Real> Ord for At<S> {
    fn cmp(&self, other: &Self) -> Ordering {
        total_cmp(self.0, other.0)
    }
}

pub fn simulate<S: Real>(config: &SimConfig<S>) -> Result<BacklogTrace<S>, BacklogError> {
    let cases = generate_cases(config)?;
    simulate_cases(config, &cases)
}

/// Runs the event loop over given cases, numbered from zero in arrival
/// order. Only the discipline, analyst count, horizon and triage settings
/// of `config` are used.
pub fn simulate_cases<S: Real>(config: &SimConfig<S>, cases: &[Case<S>]) -> Result<BacklogTrace<S>, BacklogError> {
    config.validate()?;
    for (i, c) in cases.iter().enumerate() {
        if c.id as usize != i || (i > 0 && c.arrival < cases[i - 1].arrival) || c.exhibit_service.is_empty() {
            return Err(BacklogError::CaseOrder(c.id));
        }
    }
    let horizon = config.horizon;
    let days = horizon.floor().to_usize().unwrap_or(0);

    // Waiting cases keyed by (class, arrival order).
    let mut queue: BinaryHeap<Reverse<(u8, u32)>> = BinaryHeap::new();
    let mut running: BinaryHeap<Reverse<(At<S>, u32)>> = BinaryHeap::new();
    let mut service = vec![S::zero(); cases.len()];
    let mut wait_sum: BTreeMap<Severity, (u32, S)> = BTreeMap::new();
    let mut trace = BacklogTrace {
        daily_backlog: Vec::with_capacity(days + 1),
        waits: BTreeMap::new(),
        arrivals: 0,
        completions: 0,
        final_backlog: 0,
        diverted: 0,
    };

    let class = |c: &Case<S>| match config.discipline {
        Discipline::Fifo => 0u8,
        Discipline::Severity => c.severity as u8,
    };
    let mut next = 0usize;
    let mut day = 0usize;
    let mut now;

    loop {
        let next_arrival = cases.get(next).map(|c| c.arrival);
        let next_done = running.peek().map(|Reverse((At(t), _))| *t);
        // Completions before arrivals at equal times.
        let (t, is_done) = match (next_arrival, next_done) {
            (None, None) => break,
            (Some(a), Some(d)) => {
                if d <= a {
                    (d, true)
                } else {
                    (a, false)
                }
            }
            (Some(a), None) => (a, false),
            (None, Some(d)) => (d, true),
        };
        if t > horizon {
            break;
        }
        while day <= days && S::of(day as f64) < t {
            trace.daily_backlog.push(queue.len() as u32 + running.len() as u32);
            day += 1;
        }
        now = t;

        if is_done {
            running.pop();
            trace.completions += 1;
        } else {
            let case = &cases[next];
            next += 1;
            match case.at_laboratory(config) {
                None => trace.diverted += 1,
                Some(n) => {
                    service[case.id as usize] = case.service(n);
                    trace.arrivals += 1;
                    queue.push(Reverse((class(case), case.id)));
                }
            }
        }

        while running.len() < config.analysts as usize {
            let Some(Reverse((_, id))) = queue.pop() else { break };
            let case = &cases[id as usize];
            let entry = wait_sum.entry(case.severity).or_insert((0, S::zero()));
            entry.0 += 1;
            entry.1 = entry.1 + (now - case.arrival);
            running.push(Reverse((At(now + service[id as usize]), id)));
        }
        debug_assert!(running.len() == config.analysts as usize || queue.is_empty());
    }

    while day <= days {
        trace.daily_backlog.push(queue.len() as u32 + running.len() as u32);
        day += 1;
    }
    for Reverse((_, id)) in queue.iter() {
        let case = &cases[*id as usize];
        let entry = wait_sum.entry(case.severity).or_insert((0, S::zero()));
        entry.0 += 1;
        entry.1 = entry.1 + (horizon - case.arrival);
    }
    trace.final_backlog = queue.len() as u32 + running.len() as u32;
    trace.waits = wait_sum
        .into_iter()
        .map(|(s, (n, total))| (s, WaitStats { cases: n, mean_wait: total / S::of(n as f64) }))
        .collect();
    debug_assert_eq!(trace.arrivals, trace.completions + trace.final_backlog);
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisciplineComparison<S = f64> {
    pub fifo: BacklogTrace<S>,
    pub severity: BacklogTrace<S>,
}

impl<S: Real> DisciplineComparison<S> {
    /// `(fifo, severity)` mean waits for one class.
    pub fn waits(&self, s: Severity) -> Option<(S, S)> {
        Some((self.fifo.mean_wait(s)?, self.severity.mean_wait(s)?))
    }
}

/// Runs the same cases under both disciplines.
pub fn compare_disciplines<S: Real>(config: &SimConfig<S>) -> Result<DisciplineComparison<S>, BacklogError> {
    let cases = generate_cases(config)?;
    let with = |discipline| SimConfig { discipline, ..config.clone() };
    Ok(DisciplineComparison {
        fifo: simulate_cases(&with(Discipline::Fifo), &cases)?,
        severity: simulate_cases(&with(Discipline::Severity), &cases)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overload(seed: u64) -> SimConfig {
        SimConfig { arrival_rate: 2.0, analysts: 4, seed, horizon: 200.0, ..SimConfig::default() }
    }

    #[test]
    fn same_seed_same_trace() {
        assert_eq!(simulate(&overload(7)).unwrap(), simulate(&overload(7)).unwrap());
        assert_ne!(simulate(&overload(7)).unwrap(), simulate(&overload(8)).unwrap());
    }

    #[test]
    fn no_arrivals_drains() {
        let config = SimConfig { arrival_rate: 0.0, initial_backlog: 30, horizon: 400.0, ..SimConfig::default() };
        let trace = simulate(&config).unwrap();
        assert_eq!(trace.final_backlog, 0);
        assert_eq!(trace.arrivals, 30);
        assert!(trace.daily_backlog.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn triage_lowers_backlog() {
        let base = overload(3);
        assert!(base.baseline_utilization() > 1.0);
        let dft = SimConfig { dft_enabled: true, ..base.clone() };
        let a = simulate(&base).unwrap();
        let b = simulate(&dft).unwrap();
        assert!(b.final_backlog < a.final_backlog);
        assert!(b.diverted > 0);
    }

    #[test]
    fn severity_makes_fraud_wait() {
        let mut config = overload(11);
        config.arrival_rate = 1.6;
        let cmp = compare_disciplines(&config).unwrap();
        let (fifo, sev) = cmp.waits(Severity::Fraud).unwrap();
        assert!(sev >= fifo);
        let (fifo, sev) = cmp.waits(Severity::PersonCrime).unwrap();
        assert!(sev <= fifo);
    }

    #[test]
    fn single_class_disciplines_agree() {
        let mut config = overload(5);
        config.severity_mix = SeverityMix::only(Severity::Fraud);
        let cmp = compare_disciplines(&config).unwrap();
        assert_eq!(cmp.fifo, cmp.severity);
    }

    #[test]
    fn exhibit_scaling() {
        let case =
            Case { id: 0, arrival: 0.0, severity: Severity::Fraud, exhibit_service: vec![1.0; 8], triage_draw: 0.1 };
        let on = SimConfig { dft_enabled: true, ..SimConfig::default() };
        assert_eq!(case.at_laboratory(&on), Some(2));
        let one = Case { exhibit_service: vec![1.0], ..case.clone() };
        assert_eq!(one.at_laboratory(&on), Some(1));
        let sent_back = Case { triage_draw: 0.9, ..case.clone() };
        assert_eq!(sent_back.at_laboratory(&on), None);
        assert_eq!(sent_back.at_laboratory(&SimConfig::default()), Some(8));
    }

    #[test]
    fn geometric_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let total: u64 = (0..n).map(|_| exhibit_count::<f64>(&mut rng, 3.0) as u64).sum();
        assert!((total as f64 / n as f64 - 3.0).abs() < 0.03);
    }

    #[test]
    fn config_errors() {
        let bad = SimConfig { analysts: 0, ..SimConfig::<f64>::default() };
        assert!(matches!(bad.validate(), Err(BacklogError::InvalidConfig { field: "analysts", .. })));
        let bad = SimConfig { exhibit_reduction: 1.5, ..SimConfig::<f64>::default() };
        assert!(bad.validate().is_err());
        let bad = SimConfig { arrival_rate: -1.0, ..SimConfig::<f64>::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_text() {
        let config = SimConfig::<f64>::parse(
            "horizon = 30.0\narrival_rate = 1.0\nanalysts = 2\nservice_days = 0.5\nexhibits_per_case = 2.0\n\
             discipline = \"severity\"\ndft_enabled = true\ndft_threshold_pass = 0.4\nexhibit_reduction = 0.75\nseed = 9\n\
             [severity_mix]\nperson_crime = 1.0\nproperty = 1.0\nfraud = 2.0\n",
        )
        .unwrap();
        assert_eq!(config.discipline, Discipline::Severity);
        assert_eq!(config.initial_backlog, 0);
    }

    #[test]
    fn runs_in_f32() {
        let config = SimConfig::<f32> { arrival_rate: 2.0, horizon: 100.0, seed: 2, ..SimConfig::default() };
        let trace = simulate(&config).unwrap();
        assert_eq!(trace.arrivals, trace.completions + trace.final_backlog);
        assert_eq!(trace.daily_backlog.len(), 101);
    }
}
