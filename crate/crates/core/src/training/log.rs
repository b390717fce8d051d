//! Structured training records: the event log and the loss ledger.

use std::fmt::Write as _;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The updated operator beat the data generator on every entry.
    Btb,
    SinCap,
    SmaxCap,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Btb => "btb",
            StopReason::SinCap => "sin_cap",
            StopReason::SmaxCap => "smax_cap",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "btb" => StopReason::Btb,
            "sin_cap" => StopReason::SinCap,
            "smax_cap" => StopReason::SmaxCap,
            _ => return None,
        })
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    /// New data generated; `reference` is the generator's accumulated loss on it.
    Regen {
        outer: usize,
        global: usize,
        reference: Array2<f64>,
    },
    /// One parameter update. `objective` is measured before the update.
    Inner {
        outer: usize,
        inner: usize,
        global: usize,
        objective: f64,
        lr: f64,
        grad_norm: f64,
    },
    /// End of an outer iteration. `candidate` is the updated operator's
    /// accumulated loss on the same data, present when it was evaluated.
    Stop {
        outer: usize,
        inner: usize,
        global: usize,
        reason: StopReason,
        reference: Array2<f64>,
        candidate: Option<Array2<f64>>,
    },
}

fn matrix_text(m: &Array2<f64>) -> String {
    let mut s = String::new();
    for (i, row) in m.outer_iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "{v:e}").unwrap();
        }
    }
    if m.ncols() == 0 {
        s = format!("empty{}", m.nrows());
    }
    s
}

fn parse_matrix(s: &str) -> Option<Array2<f64>> {
    if let Some(rows) = s.strip_prefix("empty") {
        return Some(Array2::zeros((rows.parse().ok()?, 0)));
    }
    let rows: Vec<Vec<f64>> = s
        .split(';')
        .map(|r| r.split(',').map(|v| v.parse().ok()).collect::<Option<Vec<f64>>>())
        .collect::<Option<_>>()?;
    let cols = rows.first()?.len();
    if rows.iter().any(|r| r.len() != cols) {
        return None;
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).ok()
}

impl Event {
    pub fn to_line(&self) -> String {
        match self {
            Event::Regen { outer, global, reference } => {
                format!("event=regen outer={outer} global={global} reference={}", matrix_text(reference))
            }
            Event::Inner {
                outer,
                inner,
                global,
                objective,
                lr,
                grad_norm,
            } => format!(
                "event=inner outer={outer} inner={inner} global={global} objective={objective:e} lr={lr:e} grad_norm={grad_norm:e}"
            ),
            Event::Stop {
                outer,
                inner,
                global,
                reason,
                reference,
                candidate,
            } => format!(
                "event=stop outer={outer} inner={inner} global={global} reason={} reference={} candidate={}",
                reason.as_str(),
                matrix_text(reference),
                candidate.as_ref().map_or_else(|| "-".to_string(), matrix_text)
            ),
        }
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("event log: {what} in `{line}`"));
        let mut fields = std::collections::HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad("token without `=`"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing `{k}`")));
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(&format!("bad `{k}`"))) };
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(&format!("bad `{k}`"))) };
        let mat = |k: &str| -> Result<Array2<f64>> { parse_matrix(get(k)?).ok_or_else(|| bad(&format!("bad `{k}`"))) };
        match get("event")? {
            "regen" => Ok(Event::Regen {
                outer: int("outer")?,
                global: int("global")?,
                reference: mat("reference")?,
            }),
            "inner" => Ok(Event::Inner {
                outer: int("outer")?,
                inner: int("inner")?,
                global: int("global")?,
                objective: num("objective")?,
                lr: num("lr")?,
                grad_norm: num("grad_norm")?,
            }),
            "stop" => Ok(Event::Stop {
                outer: int("outer")?,
                inner: int("inner")?,
                global: int("global")?,
                reason: StopReason::parse(get("reason")?).ok_or_else(|| bad("unknown reason"))?,
                reference: mat("reference")?,
                candidate: match get("candidate")? {
                    "-" => None,
                    _ => Some(mat("candidate")?),
                },
            }),
            other => Err(bad(&format!("unknown event `{other}`"))),
        }
    }
}

pub fn parse_event_log(text: &str) -> Result<Vec<Event>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(Event::parse_line).collect()
}

/// One row of the loss ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub outer_iter: usize,
    pub inner_step: usize,
    pub traj: usize,
    pub t: usize,
    pub transport: f64,
    pub energy: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn write_ledger<W: Write>(out: W, rows: &[LedgerRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(["outer_iter", "inner_step", "traj", "t", "transport", "energy", "total", "lr"])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ledger<R: std::io::Read>(input: R) -> Result<Vec<LedgerRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// What an event-log audit found.
#[derive(Debug, Clone, PartialEq)]
pub struct Audit {
    pub total_inner: usize,
    pub outer_iters: usize,
    pub budget_respected: bool,
    pub warmup_respected: bool,
    /// Number of `btb` stops, and whether every one had candidate <= reference.
    pub btb_stops: usize,
    pub btb_monotone: bool,
    pub stop_reasons_consistent: bool,
}

impl Audit {
    pub fn passed(&self) -> bool {
        self.budget_respected && self.warmup_respected && self.btb_monotone && self.stop_reasons_consistent
    }
}

/// Re-derive the loop contracts from an event log alone.
pub fn audit_events(events: &[Event], budget: usize, warmup: usize, inner_max: usize) -> Audit {
    let mut inner_per_outer = std::collections::BTreeMap::<usize, usize>::new();
    let mut last_global = 0;
    let mut total_inner = 0;
    let mut btb_stops = 0;
    let mut btb_monotone = true;
    let mut consistent = true;
    for e in events {
        match e {
            Event::Inner { outer, global, .. } => {
                *inner_per_outer.entry(*outer).or_default() += 1;
                total_inner += 1;
                consistent &= *global == total_inner;
                last_global = *global;
            }
            Event::Stop {
                outer,
                inner,
                reason,
                reference,
                candidate,
                global,
                ..
            } => {
                let counted = inner_per_outer.get(outer).copied().unwrap_or(0);
                consistent &= counted == *inner && *global == last_global;
                let cap = if *outer < warmup { 1 } else { inner_max };
                match reason {
                    StopReason::Btb => {
                        btb_stops += 1;
                        btb_monotone &= match candidate {
                            Some(c) => c.dim() == reference.dim() && c.iter().zip(reference.iter()).all(|(a, b)| a <= b),
                            None => false,
                        };
                    }
                    StopReason::SinCap => consistent &= *inner == cap,
                    StopReason::SmaxCap => consistent &= *global == budget,
                }
                consistent &= *inner <= cap;
            }
            Event::Regen { .. } => {}
        }
    }
    let warmup_respected = inner_per_outer
        .iter()
        .filter(|(o, _)| **o < warmup)
        .all(|(_, n)| *n == 1);
    Audit {
        total_inner,
        outer_iters: inner_per_outer.len(),
        budget_respected: total_inner <= budget,
        warmup_respected,
        btb_stops,
        btb_monotone,
        stop_reasons_consistent: consistent,
    }
}
