//! Arrival traces: CSV ingest and parametric synthesis.
//!
//! Trace files are UTF-8 CSV with the header
//! `arrival_ms,category,input_tokens,output_tokens`. The category column may be
//! omitted when a default category is supplied.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_HEADER: [&str; 4] = ["arrival_ms", "category", "input_tokens", "output_tokens"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub arrival_ms: f64,
    pub category: String,
    pub input_tokens: usize,
    pub output_tokens: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// Used for rows when the file has no category column.
    pub default_category: Option<String>,
    /// Multiplies the request rate: every arrival time is divided by it.
    pub rate_scale: Option<f64>,
}

fn sort_events(events: &mut [TraceEvent]) {
    events.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
}

pub fn parse_trace<R: Read>(reader: R, options: &ParseOptions) -> Result<Vec<TraceEvent>> {
    let rate_scale = options.rate_scale.unwrap_or(1.0);
    if !(rate_scale.is_finite() && rate_scale > 0.0) {
        return Err(Error::Config(format!(
            "rate scale must be > 0, got {rate_scale}"
        )));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing: Vec<&str> = ["arrival_ms", "input_tokens", "output_tokens"]
        .into_iter()
        .filter(|n| col(n).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::TraceParse(vec![(
            1,
            format!("missing columns: {}", missing.join(", ")),
        )]));
    }
    let (arrival, input, output) = (
        col("arrival_ms").unwrap(),
        col("input_tokens").unwrap(),
        col("output_tokens").unwrap(),
    );
    let category = col("category");
    if category.is_none() && options.default_category.is_none() {
        return Err(Error::TraceParse(vec![(
            1,
            "no category column and no default category given".into(),
        )]));
    }

    let mut events = Vec::new();
    let mut bad = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                bad.push((line, e.to_string()));
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parsed = (|| -> std::result::Result<TraceEvent, String> {
            let arrival_ms: f64 = field(arrival)
                .parse()
                .map_err(|_| format!("arrival_ms `{}` is not a number", field(arrival)))?;
            if !(arrival_ms.is_finite() && arrival_ms >= 0.0) {
                return Err(format!("arrival_ms {arrival_ms} must be finite and >= 0"));
            }
            let count = |i: usize, name: &str| -> std::result::Result<usize, String> {
                let v: usize = field(i)
                    .parse()
                    .map_err(|_| format!("{name} `{}` is not a count", field(i)))?;
                if v == 0 {
                    return Err(format!("{name} must be >= 1"));
                }
                Ok(v)
            };
            let category = match category {
                Some(i) if !field(i).is_empty() => field(i).to_string(),
                _ => options.default_category.clone().ok_or("empty category")?,
            };
            Ok(TraceEvent {
                arrival_ms: arrival_ms / rate_scale,
                category,
                input_tokens: count(input, "input_tokens")?,
                output_tokens: count(output, "output_tokens")?,
            })
        })();
        match parsed {
            Ok(ev) => events.push(ev),
            Err(msg) => bad.push((line, msg)),
        }
    }
    if !bad.is_empty() {
        return Err(Error::TraceParse(bad));
    }
    sort_events(&mut events);
    Ok(events)
}

pub fn write_trace<W: Write>(writer: W, events: &[TraceEvent]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(TRACE_HEADER)?;
    for ev in events {
        wtr.write_record([
            ev.arrival_ms.to_string(),
            ev.category.clone(),
            ev.input_tokens.to_string(),
            ev.output_tokens.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TracePattern {
    Bursty,
    SteadyHigh,
    SteadyLow,
}

/// A window with an elevated total arrival rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    pub start_ms: f64,
    pub end_ms: f64,
    pub rate_per_ms: f64,
}

/// Inclusive token-length ranges for one request category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthProfile {
    pub name: String,
    pub input: (usize, usize),
    pub output: (usize, usize),
}

pub fn default_length_profiles() -> Vec<LengthProfile> {
    let p = |name: &str, input, output| LengthProfile {
        name: name.into(),
        input,
        output,
    };
    vec![
        p("translation", (60, 200), (60, 200)),
        p("summarization", (600, 1200), (60, 150)),
        p("qa", (40, 160), (30, 120)),
        p("math", (80, 200), (100, 300)),
        p("rag", (500, 1000), (50, 150)),
        p("chat", (50, 300), (100, 300)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub pattern: TracePattern,
    pub duration_ms: f64,
    /// Baseline Poisson rate, requests per ms.
    pub rate_per_ms: f64,
    /// Only used by the bursty pattern.
    #[serde(default)]
    pub bursts: Vec<Burst>,
    #[serde(default = "default_length_profiles")]
    pub categories: Vec<LengthProfile>,
}

impl SynthParams {
    /// Stock parameters for each pattern over `duration_ms`.
    pub fn preset(pattern: TracePattern, duration_ms: f64) -> Self {
        let (rate_per_ms, bursts) = match pattern {
            TracePattern::Bursty => (
                0.0015,
                vec![Burst {
                    start_ms: 0.4 * duration_ms,
                    end_ms: 0.55 * duration_ms,
                    rate_per_ms: 0.012,
                }],
            ),
            TracePattern::SteadyHigh => (0.004, Vec::new()),
            TracePattern::SteadyLow => (0.001, Vec::new()),
        };
        Self {
            pattern,
            duration_ms,
            rate_per_ms,
            bursts,
            categories: default_length_profiles(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_ms.is_finite() && self.duration_ms > 0.0) {
            return Err(Error::Config(format!(
                "duration must be > 0, got {}",
                self.duration_ms
            )));
        }
        if !(self.rate_per_ms.is_finite() && self.rate_per_ms > 0.0) {
            return Err(Error::Config(format!(
                "arrival rate must be > 0, got {}",
                self.rate_per_ms
            )));
        }
        if self.pattern == TracePattern::Bursty {
            for b in &self.bursts {
                if !(b.rate_per_ms.is_finite()
                    && b.rate_per_ms > 0.0
                    && b.end_ms > b.start_ms
                    && b.start_ms >= 0.0)
                {
                    return Err(Error::Config(format!("invalid burst {b:?}")));
                }
            }
        }
        if self.categories.is_empty() {
            return Err(Error::Config(
                "synthetic trace needs at least one category".into(),
            ));
        }
        for c in &self.categories {
            if c.input.0 == 0 || c.output.0 == 0 || c.input.0 > c.input.1 || c.output.0 > c.output.1
            {
                return Err(Error::Config(format!(
                    "invalid length ranges for {}",
                    c.name
                )));
            }
        }
        Ok(())
    }
}

fn poisson_arrivals(rng: &mut ChaCha8Rng, rate: f64, start: f64, end: f64, out: &mut Vec<f64>) {
    let exp = Exp::new(rate).expect("rate validated");
    let mut t = start;
    loop {
        t += exp.sample(rng);
        if t >= end {
            break;
        }
        out.push(t);
    }
}

pub fn synth_trace(params: &SynthParams, seed: u64) -> Result<Vec<TraceEvent>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arrivals = Vec::new();
    poisson_arrivals(
        &mut rng,
        params.rate_per_ms,
        0.0,
        params.duration_ms,
        &mut arrivals,
    );
    if params.pattern == TracePattern::Bursty {
        for b in &params.bursts {
            let extra = b.rate_per_ms - params.rate_per_ms;
            if extra > 0.0 {
                poisson_arrivals(
                    &mut rng,
                    extra,
                    b.start_ms,
                    b.end_ms.min(params.duration_ms),
                    &mut arrivals,
                );
            }
        }
    }
    arrivals.sort_by(f64::total_cmp);
    let events = arrivals
        .into_iter()
        .map(|arrival_ms| {
            let cat = &params.categories[rng.random_range(0..params.categories.len())];
            TraceEvent {
                arrival_ms,
                category: cat.name.clone(),
                input_tokens: rng.random_range(cat.input.0..=cat.input.1),
                output_tokens: rng.random_range(cat.output.0..=cat.output.1),
            }
        })
        .collect();
    Ok(events)
}
