//! Bounded-parallel record processing with in-order ledger commits.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};

use serde::Serialize;
use serde_json::Value;

use super::ledger::{Action, Ledger};
use super::PipelineError;

/// Result of processing one record.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Retained(Value),
    Dropped {
        cause: String,
        data: Option<Value>,
    },
    Emitted(Value),
    /// Transient failure; the record is retried on the next run.
    Failed {
        cause: String,
    },
}

impl Outcome {
    pub fn retained<T: Serialize>(v: &T) -> Self {
        Outcome::Retained(serde_json::to_value(v).expect("record serializes"))
    }

    pub fn emitted<T: Serialize>(v: &T) -> Self {
        Outcome::Emitted(serde_json::to_value(v).expect("record serializes"))
    }

    pub fn dropped(cause: impl Into<String>) -> Self {
        Outcome::Dropped {
            cause: cause.into(),
            data: None,
        }
    }

    pub fn dropped_with<T: Serialize>(cause: impl Into<String>, v: &T) -> Self {
        Outcome::Dropped {
            cause: cause.into(),
            data: Some(serde_json::to_value(v).expect("record serializes")),
        }
    }
}

/// Cap on records dispatched over a whole run; used to simulate an
/// interrupted run.
#[derive(Debug, Default)]
pub struct Budget(Option<AtomicUsize>);

impl Budget {
    pub fn unlimited() -> Self {
        Self(None)
    }

    pub fn limited(n: usize) -> Self {
        Self(Some(AtomicUsize::new(n)))
    }

    fn take(&self) -> bool {
        match &self.0 {
            None => true,
            Some(left) => left
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub retained: usize,
    pub dropped: usize,
    pub emitted: usize,
    pub failed: usize,
    /// Records already terminal in the ledger.
    pub skipped: usize,
}

impl Tally {
    pub fn add(&mut self, other: &Tally) {
        self.retained += other.retained;
        self.dropped += other.dropped;
        self.emitted += other.emitted;
        self.failed += other.failed;
        self.skipped += other.skipped;
    }
}

/// Runs `work` over every item not yet terminal in `ledger`, with up to
/// `parallel` workers. Results are committed in item order.
pub fn run_items<I, F>(
    ledger: &mut Ledger,
    items: &[(String, I)],
    parallel: usize,
    budget: &Budget,
    work: F,
) -> Result<Tally, PipelineError>
where
    I: Sync,
    F: Fn(&I) -> Result<Outcome, PipelineError> + Sync,
{
    let mut seen = std::collections::BTreeSet::new();
    for (id, _) in items {
        if !seen.insert(id.as_str()) {
            return Err(PipelineError::Integrity(format!(
                "record {id} listed twice"
            )));
        }
    }
    let pending: Vec<usize> = (0..items.len())
        .filter(|&i| ledger.terminal(&items[i].0).is_none())
        .collect();
    let mut tally = Tally {
        skipped: items.len() - pending.len(),
        ..Tally::default()
    };
    if pending.is_empty() {
        return Ok(tally);
    }

    let next = Mutex::new(0usize);
    let stop = AtomicBool::new(false);
    let starved = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<Outcome, PipelineError>)>();
    let mut first_err: Option<PipelineError> = None;

    std::thread::scope(|s| {
        for _ in 0..parallel.max(1).min(pending.len()) {
            let tx = tx.clone();
            let (next, stop, starved, pending, work) = (&next, &stop, &starved, &pending, &work);
            s.spawn(move || loop {
                let pos = {
                    let mut n = next.lock().unwrap();
                    if stop.load(Ordering::SeqCst) || *n >= pending.len() {
                        break;
                    }
                    if !budget.take() {
                        starved.store(true, Ordering::SeqCst);
                        break;
                    }
                    *n += 1;
                    *n - 1
                };
                let res = work(&items[pending[pos]].1);
                if res.is_err() {
                    stop.store(true, Ordering::SeqCst);
                }
                if tx.send((pos, res)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut buffer = BTreeMap::new();
        let mut cursor = 0;
        for (pos, res) in rx {
            buffer.insert(pos, res);
            while let Some(res) = buffer.remove(&cursor) {
                let id = &items[pending[cursor]].0;
                cursor += 1;
                let committed = res.and_then(|o| commit(ledger, id, o, &mut tally));
                if let Err(e) = committed {
                    stop.store(true, Ordering::SeqCst);
                    first_err.get_or_insert(e);
                }
            }
        }
    });

    if let Some(e) = first_err {
        return Err(e);
    }
    if starved.load(Ordering::SeqCst) {
        return Err(PipelineError::Interrupted);
    }
    Ok(tally)
}

fn commit(
    ledger: &mut Ledger,
    id: &str,
    outcome: Outcome,
    tally: &mut Tally,
) -> Result<(), PipelineError> {
    match outcome {
        Outcome::Retained(v) => {
            tally.retained += 1;
            ledger.append(id, Action::Retained, None, Some(v))
        }
        Outcome::Emitted(v) => {
            tally.emitted += 1;
            ledger.append(id, Action::Emitted, None, Some(v))
        }
        Outcome::Dropped { cause, data } => {
            tally.dropped += 1;
            ledger.append(id, Action::Dropped, Some(cause), data)
        }
        Outcome::Failed { cause } => {
            tally.failed += 1;
            log::warn!("{id}: {cause}");
            ledger.append(id, Action::Failed, Some(cause), None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(n: usize) -> Vec<(String, usize)> {
        (0..n).map(|i| (format!("r{i:02}"), i)).collect()
    }

    #[test]
    fn commits_in_order_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ledger.jsonl");
        let calls = AtomicUsize::new(0);
        let work = |i: &usize| {
            calls.fetch_add(1, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis((20 - *i as u64) % 7));
            Ok(if i % 3 == 0 {
                Outcome::dropped("x")
            } else {
                Outcome::retained(i)
            })
        };
        let mut l = Ledger::open(&p, "s", true).unwrap();
        let r = run_items(&mut l, &items(20), 4, &Budget::limited(10), work);
        assert!(matches!(r, Err(PipelineError::Interrupted)));
        assert_eq!(calls.load(Ordering::SeqCst), 10);
        drop(l);

        let mut l = Ledger::open(&p, "s", true).unwrap();
        let t = run_items(&mut l, &items(20), 4, &Budget::unlimited(), work).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 20);
        assert_eq!(t.skipped, 10);
        assert_eq!(t.retained + t.dropped, 10);

        let ids: Vec<String> = std::fs::read_to_string(&p)
            .unwrap()
            .lines()
            .map(|l| {
                serde_json::from_str::<super::super::ledger::LedgerEntry>(l)
                    .unwrap()
                    .record_id
            })
            .collect();
        assert_eq!(
            ids,
            items(20).into_iter().map(|(id, _)| id).collect::<Vec<_>>()
        );

        let mut l = Ledger::open(&p, "s", true).unwrap();
        let t = run_items(&mut l, &items(20), 4, &Budget::unlimited(), work).unwrap();
        assert_eq!(t.skipped, 20);
        assert_eq!(calls.load(Ordering::SeqCst), 20);
    }

    #[test]
    fn failed_records_are_retried() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ledger.jsonl");
        let mut l = Ledger::open(&p, "s", true).unwrap();
        let t = run_items(&mut l, &items(3), 2, &Budget::unlimited(), |i| {
            Ok(if *i == 1 {
                Outcome::Failed {
                    cause: "net".into(),
                }
            } else {
                Outcome::emitted(i)
            })
        })
        .unwrap();
        assert_eq!((t.emitted, t.failed), (2, 1));
        let t = run_items(&mut l, &items(3), 2, &Budget::unlimited(), |i| {
            Ok(Outcome::emitted(i))
        })
        .unwrap();
        assert_eq!((t.emitted, t.skipped), (1, 2));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = Ledger::open(&dir.path().join("l"), "s", true).unwrap();
        let dup = vec![("a".to_string(), 0), ("a".to_string(), 1)];
        assert!(run_items(&mut l, &dup, 1, &Budget::unlimited(), |_| Ok(
            Outcome::dropped("x")
        ))
        .is_err());
    }
}
