//! User-preference ballots and their mean-rank aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::EvalError;

/// One participant's ranking of every method on one item; `ranking[i]` is
/// the rank (1 = best) of the i-th method.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ballot {
    pub participant: String,
    pub item: String,
    pub ranking: Vec<u32>,
}

impl Ballot {
    pub fn id(&self) -> String {
        format!("{}/{}", self.participant, self.item)
    }

    fn check(&self, m: usize) -> Result<(), EvalError> {
        let invalid = |reason: String| EvalError::InvalidBallot {
            ballot: self.id(),
            reason,
        };
        if self.ranking.len() != m {
            return Err(invalid(format!("{} ranks for {m} methods", self.ranking.len())));
        }
        let mut seen = vec![false; m];
        for &r in &self.ranking {
            if r < 1 || r as usize > m {
                return Err(invalid(format!("rank {r} outside 1..={m}")));
            }
            if std::mem::replace(&mut seen[r as usize - 1], true) {
                return Err(invalid(format!("rank {r} repeated")));
            }
        }
        Ok(())
    }
}

/// Mean rank per method, in method order; lower is better.
pub fn aggregate_rankings(ballots: &[Ballot], n_methods: usize) -> Result<Vec<f64>, EvalError> {
    if ballots.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut sums = vec![0u64; n_methods];
    for b in ballots {
        b.check(n_methods)?;
        for (s, &r) in sums.iter_mut().zip(&b.ranking) {
            *s += r as u64;
        }
    }
    Ok(sums.into_iter().map(|s| s as f64 / ballots.len() as f64).collect())
}

#[derive(Debug, Deserialize)]
struct BallotRow {
    participant: String,
    item: String,
    method: String,
    rank: u32,
}

/// Ballots with their method list (order of first appearance).
#[derive(Debug, Clone, PartialEq)]
pub struct BallotSet {
    pub methods: Vec<String>,
    pub ballots: Vec<Ballot>,
}

/// Reads `participant,item,method,rank` rows; each (participant, item) must
/// rank every method exactly once.
pub fn parse_ballots<R: Read>(r: R) -> Result<BallotSet, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut methods: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<(String, String), BTreeMap<String, u32>> = BTreeMap::new();
    let mut order: Vec<(String, String)> = Vec::new();
    for row in rdr.deserialize() {
        let row: BallotRow = row?;
        if !methods.contains(&row.method) {
            methods.push(row.method.clone());
        }
        let key = (row.participant.clone(), row.item.clone());
        let entry = grouped.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            BTreeMap::new()
        });
        if entry.insert(row.method.clone(), row.rank).is_some() {
            return Err(EvalError::InvalidBallot {
                ballot: format!("{}/{}", key.0, key.1),
                reason: format!("method {:?} ranked twice", row.method),
            });
        }
    }
    let mut ballots = Vec::with_capacity(order.len());
    for key in order {
        let ranks = &grouped[&key];
        let ballot_id = format!("{}/{}", key.0, key.1);
        let ranking = methods
            .iter()
            .map(|m| {
                ranks.get(m).copied().ok_or_else(|| EvalError::InvalidBallot {
                    ballot: ballot_id.clone(),
                    reason: format!("method {m:?} not ranked"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let b = Ballot {
            participant: key.0,
            item: key.1,
            ranking,
        };
        b.check(methods.len())?;
        ballots.push(b);
    }
    if ballots.is_empty() {
        return Err(EvalError::NoRecords);
    }
    Ok(BallotSet { methods, ballots })
}

pub fn read_ballots(path: &Path) -> Result<BallotSet, EvalError> {
    parse_ballots(std::fs::File::open(path)?)
}

/// One row of mean ranks under a header of method names.
pub fn format_rank_table(row_label: &str, methods: &[String], means: &[f64]) -> String {
    let width = methods.iter().map(String::len).max().unwrap_or(0).max(6);
    let lw = row_label.len().max(6);
    let mut out = format!("{:<lw$}", "");
    for m in methods {
        write!(out, " | {m:>width$}").unwrap();
    }
    write!(out, "\n{row_label:<lw$}").unwrap();
    for v in means {
        write!(out, " | {:>width$}", format!("{v:.2}")).unwrap();
    }
    out.push('\n');
    out
}

pub fn rankings_csv(methods: &[String], means: &[f64]) -> String {
    let mut out = String::from("method,mean_rank\n");
    for (m, v) in methods.iter().zip(means) {
        writeln!(out, "{m},{v}").unwrap();
    }
    out
}
