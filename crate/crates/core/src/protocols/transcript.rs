use std::collections::HashSet;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::config::{ProtocolConfig, ProtocolId};
use crate::error::{Error, Result};
use crate::randomizers::{QuadReport, RealReport, SignReport};

/// A single privatized message.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Report {
    Quad(QuadReport),
    Sign(SignReport),
    Real(RealReport),
}

impl Report {
    pub fn user_id(&self) -> usize {
        match self {
            Report::Quad(r) => r.user_id,
            Report::Sign(r) => r.user_id,
            Report::Real(r) => r.user_id,
        }
    }

    /// `L{j}`, `U2`, `R{idx}` or `S{j}:{m}`.
    pub fn subgroup_tag(&self) -> String {
        match self {
            Report::Quad(r) => format!("L{}", r.level),
            Report::Sign(SignReport { subgroup: None, .. }) | Report::Real(RealReport { subgroup: None, .. }) => {
                "U2".to_string()
            }
            Report::Sign(SignReport { subgroup: Some(idx), .. }) => format!("R{idx}"),
            Report::Real(RealReport {
                subgroup: Some((j, m)), ..
            }) => format!("S{j}:{m}"),
        }
    }
}

/// Parameters the analyst sends to second-round users.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Broadcast {
    Center { mu_hat1: f64 },
    Interval { interval_lo: f64, interval_hi: f64 },
}

/// Analyst outputs of one protocol run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateOutcome {
    pub protocol: ProtocolId,
    pub mu_hat1: f64,
    pub sigma_hat: Option<f64>,
    pub mu_hat2: f64,
    /// Subgroup whose reports produced `mu_hat2`, for the one-round protocols.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Report { round: u8, report: Report },
    Broadcast { round: u8, broadcast: Broadcast },
}

/// Ordered record of every message and broadcast of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Transcript {
    pub config: ProtocolConfig,
    pub entries: Vec<Entry>,
    pub outcome: Option<EstimateOutcome>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Quad,
    Sign,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Value {
    Int(i64),
    Real(f64),
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportLine {
    round: u8,
    user: usize,
    subgroup: String,
    kind: Kind,
    value: Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Line {
    Header { header: ProtocolConfig },
    Outcome { outcome: EstimateOutcome },
    Broadcast { round: u8, broadcast: Broadcast },
    Report(ReportLine),
}

fn report_line(round: u8, report: &Report) -> ReportLine {
    let (kind, value) = match report {
        Report::Quad(r) => (Kind::Quad, Value::Int(r.value as i64)),
        Report::Sign(r) => (Kind::Sign, Value::Int(r.value as i64)),
        Report::Real(r) => (Kind::Real, Value::Real(r.value)),
    };
    ReportLine {
        round,
        user: report.user_id(),
        subgroup: report.subgroup_tag(),
        kind,
        value,
    }
}

fn parse_report(line: ReportLine) -> Result<Report> {
    let ReportLine {
        user,
        subgroup,
        kind,
        value,
        ..
    } = line;
    let bad_tag = || Error::malformed(format!("user {user}: subgroup tag {subgroup:?} does not fit a {kind:?} report"));
    match kind {
        Kind::Quad => {
            let level = subgroup.strip_prefix('L').and_then(|s| s.parse().ok()).ok_or_else(bad_tag)?;
            let value = match value {
                Value::Int(v @ 0..=3) => v as u8,
                other => return Err(Error::malformed(format!("user {user}: quad value {other:?}"))),
            };
            Ok(Report::Quad(QuadReport {
                user_id: user,
                level,
                value,
            }))
        }
        Kind::Sign => {
            let subgroup = match subgroup.as_str() {
                "U2" => None,
                tag => Some(tag.strip_prefix('R').and_then(|s| s.parse().ok()).ok_or_else(bad_tag)?),
            };
            let value = match value {
                Value::Int(v @ (-1 | 1)) => v as i8,
                other => return Err(Error::malformed(format!("user {user}: sign value {other:?}"))),
            };
            Ok(Report::Sign(SignReport {
                user_id: user,
                subgroup,
                value,
            }))
        }
        Kind::Real => {
            let subgroup = match subgroup.as_str() {
                "U2" => None,
                tag => {
                    let (j, m) = tag.strip_prefix('S').and_then(|s| s.split_once(':')).ok_or_else(bad_tag)?;
                    Some((j.parse().map_err(|_| bad_tag())?, m.parse().map_err(|_| bad_tag())?))
                }
            };
            let value = match value {
                Value::Real(v) => v,
                Value::Int(v) => v as f64,
            };
            if !value.is_finite() {
                return Err(Error::malformed(format!("user {user}: non-finite value")));
            }
            Ok(Report::Real(RealReport {
                user_id: user,
                subgroup,
                value,
            }))
        }
    }
}

impl Transcript {
    pub fn new(config: ProtocolConfig) -> Self {
        Transcript {
            config,
            entries: Vec::new(),
            outcome: None,
        }
    }

    pub fn push_report(&mut self, round: u8, report: Report) {
        self.entries.push(Entry::Report { round, report });
    }

    pub fn push_broadcast(&mut self, round: u8, broadcast: Broadcast) {
        self.entries.push(Entry::Broadcast { round, broadcast });
    }

    /// Reports of one round, in recorded order.
    pub fn reports(&self, round: u8) -> impl Iterator<Item = &Report> + '_ {
        self.entries.iter().filter_map(move |e| match e {
            Entry::Report { round: r, report } if *r == round => Some(report),
            _ => None,
        })
    }

    pub fn broadcasts(&self) -> impl Iterator<Item = (u8, &Broadcast)> + '_ {
        self.entries.iter().filter_map(|e| match e {
            Entry::Broadcast { round, broadcast } => Some((*round, broadcast)),
            _ => None,
        })
    }

    pub fn report_count(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e, Entry::Report { .. })).count()
    }

    /// Highest round index that carries a report.
    pub fn rounds(&self) -> u8 {
        self.entries
            .iter()
            .filter_map(|e| match e {
                Entry::Report { round, .. } => Some(*round),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// `true` when no user sends more than one message.
    pub fn users_unique(&self) -> bool {
        let mut seen = HashSet::new();
        self.entries.iter().all(|e| match e {
            Entry::Report { report, .. } => seen.insert(report.user_id()),
            _ => true,
        })
    }

    /// One JSON object per line: header, reports and broadcasts in causal order, then the outcome.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let line = |value: &Line, w: &mut W| -> io::Result<()> {
            serde_json::to_writer(&mut *w, value)?;
            w.write_all(b"\n")
        };
        line(
            &Line::Header {
                header: self.config.clone(),
            },
            &mut w,
        )?;
        for entry in &self.entries {
            let value = match entry {
                Entry::Report { round, report } => Line::Report(report_line(*round, report)),
                Entry::Broadcast { round, broadcast } => Line::Broadcast {
                    round: *round,
                    broadcast: *broadcast,
                },
            };
            line(&value, &mut w)?;
        }
        if let Some(outcome) = &self.outcome {
            line(
                &Line::Outcome {
                    outcome: outcome.clone(),
                },
                &mut w,
            )?;
        }
        w.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Parses [`Transcript::to_jsonl`] output. The header must come first and
    /// the outcome, when present, last.
    pub fn parse(text: &str) -> Result<Transcript> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let parse_line = |no: usize, l: &str| -> Result<Line> {
            serde_json::from_str(l).map_err(|e| Error::malformed(format!("line {}: {e}", no + 1)))
        };
        let config = match lines.next() {
            Some((no, l)) => match parse_line(no, l)? {
                Line::Header { header } => header,
                _ => return Err(Error::malformed(format!("line {}: expected the header", no + 1))),
            },
            None => return Err(Error::malformed("empty transcript")),
        };
        let mut transcript = Transcript::new(config);
        for (no, l) in lines {
            if transcript.outcome.is_some() {
                return Err(Error::malformed(format!("line {}: content after the outcome", no + 1)));
            }
            match parse_line(no, l)? {
                Line::Header { .. } => return Err(Error::malformed(format!("line {}: second header", no + 1))),
                Line::Outcome { outcome } => transcript.outcome = Some(outcome),
                Line::Broadcast { round, broadcast } => transcript.push_broadcast(round, broadcast),
                Line::Report(r) => {
                    let round = r.round;
                    transcript.push_report(round, parse_report(r)?);
                }
            }
        }
        Ok(transcript)
    }
}
