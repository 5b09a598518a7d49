//! Trace records produced by a run and their CSV encoding.
//!
//! `ops.csv` columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `op_id` | operation number, in invocation order |
//! | `kind` | `read` or `write` |
//! | `client` | client node id |
//! | `status` | `completed`, `timeout` or `client_departed` |
//! | `t_invoke`, `t_respond` | invocation and response (or abandonment) times |
//! | `t_consult_start`, `t_prop_start` | phase start times, empty if never started |
//! | `consult_tag`, `consult_value` | pair returned by the consultation |
//! | `prop_tag`, `prop_value` | pair propagated |
//! | `consult_responder_count`, `prop_responder_count` | distinct responders when each phase closed |
//! | `distinct_contacts` | distinct participants of both phases, summed |
//! | `max_depth` | deepest tree level reached by either phase |
//! | `messages` | messages sent on behalf of the operation |
//! | `retries` | phase re-sends |
//! | `consult_responders`, `prop_responders` | space-separated responder ids |
//!
//! Tags render as `counter.id`; an empty tag means the phase produced no
//! pair, an empty value with a tag is the absent value. `snapshots.csv` holds
//! `t,uptodate_count,live_count`; `messages.csv` holds one row per delivery
//! attempt.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::protocol::OpKind;
use crate::types::{NodeId, ObjectValue, Tag, Versioned};

pub const OPS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trace row {row}: {reason}")]
    Malformed { row: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpStatus {
    Completed,
    Timeout,
    ClientDeparted,
}

/// Audit entry for one operation.
#[derive(Clone, Debug, PartialEq)]
pub struct OpRecord {
    pub op_id: u64,
    pub kind: OpKind,
    pub client: NodeId,
    pub status: OpStatus,
    pub t_invoke: f64,
    pub t_respond: f64,
    pub t_consult_start: Option<f64>,
    pub t_prop_start: Option<f64>,
    pub consulted: Option<Versioned>,
    pub propagated: Option<Versioned>,
    pub consult_responders: BTreeSet<NodeId>,
    pub prop_responders: BTreeSet<NodeId>,
    pub distinct_contacts: u64,
    pub max_depth: u32,
    pub messages: u64,
    pub retries: u32,
}

impl OpRecord {
    pub fn is_completed(&self) -> bool {
        self.status == OpStatus::Completed
    }

    /// Pair the operation is ordered by: the written pair for writes, the
    /// returned pair for reads.
    pub fn op_pair(&self) -> Option<&Versioned> {
        match self.kind {
            OpKind::Write => self.propagated.as_ref(),
            OpKind::Read => self.consulted.as_ref(),
        }
    }

    pub fn latency(&self) -> f64 {
        self.t_respond - self.t_invoke
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub uptodate_count: u64,
    pub live_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub t_send: f64,
    pub t_deliver: f64,
    pub kind: String,
    pub from: u64,
    pub to: u64,
    pub client: u64,
    pub sn: u64,
    pub ttl: u32,
    pub tag: String,
    pub delivered: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub events: u64,
    pub end_time: f64,
    pub truncated: bool,
    pub dropped_to_departed: u64,
    pub late_responses: u64,
    pub degraded_fanouts: u64,
    pub skipped_ops: u64,
    pub churned: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceBundle {
    pub ops: Vec<OpRecord>,
    pub snapshots: Vec<Snapshot>,
    pub messages: Vec<MessageRecord>,
    pub summary: RunSummary,
}

#[derive(Debug, Serialize, Deserialize)]
struct OpRow {
    op_id: u64,
    kind: OpKind,
    client: u64,
    status: OpStatus,
    t_invoke: f64,
    t_respond: f64,
    t_consult_start: Option<f64>,
    t_prop_start: Option<f64>,
    consult_tag: Option<String>,
    consult_value: String,
    prop_tag: Option<String>,
    prop_value: String,
    consult_responder_count: usize,
    prop_responder_count: usize,
    distinct_contacts: u64,
    max_depth: u32,
    messages: u64,
    retries: u32,
    consult_responders: String,
    prop_responders: String,
}

fn ids_to_string(ids: &BTreeSet<NodeId>) -> String {
    ids.iter().map(|id| id.0.to_string()).collect::<Vec<_>>().join(" ")
}

fn ids_from_str(s: &str, row: usize) -> Result<BTreeSet<NodeId>, TraceError> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<u64>()
                .map(NodeId)
                .map_err(|_| TraceError::Malformed { row, reason: format!("bad node id {t:?}") })
        })
        .collect()
}

fn pair_from(tag: Option<String>, value: String, row: usize) -> Result<Option<Versioned>, TraceError> {
    match tag {
        None => Ok(None),
        Some(t) => {
            let tag: Tag = t.parse().map_err(|e| TraceError::Malformed { row, reason: format!("{e}") })?;
            Ok(Some(Versioned::new(ObjectValue::from(value.as_str()), tag)))
        }
    }
}

impl From<&OpRecord> for OpRow {
    fn from(r: &OpRecord) -> Self {
        let split = |p: &Option<Versioned>| match p {
            Some(v) => (Some(v.tag.to_string()), v.value.to_string()),
            None => (None, String::new()),
        };
        let (consult_tag, consult_value) = split(&r.consulted);
        let (prop_tag, prop_value) = split(&r.propagated);
        OpRow {
            op_id: r.op_id,
            kind: r.kind,
            client: r.client.0,
            status: r.status,
            t_invoke: r.t_invoke,
            t_respond: r.t_respond,
            t_consult_start: r.t_consult_start,
            t_prop_start: r.t_prop_start,
            consult_tag,
            consult_value,
            prop_tag,
            prop_value,
            consult_responder_count: r.consult_responders.len(),
            prop_responder_count: r.prop_responders.len(),
            distinct_contacts: r.distinct_contacts,
            max_depth: r.max_depth,
            messages: r.messages,
            retries: r.retries,
            consult_responders: ids_to_string(&r.consult_responders),
            prop_responders: ids_to_string(&r.prop_responders),
        }
    }
}

impl OpRow {
    fn into_record(self, row: usize) -> Result<OpRecord, TraceError> {
        let consult_responders = ids_from_str(&self.consult_responders, row)?;
        let prop_responders = ids_from_str(&self.prop_responders, row)?;
        if consult_responders.len() != self.consult_responder_count || prop_responders.len() != self.prop_responder_count
        {
            return Err(TraceError::Malformed { row, reason: "responder count does not match responder list".into() });
        }
        Ok(OpRecord {
            op_id: self.op_id,
            kind: self.kind,
            client: NodeId(self.client),
            status: self.status,
            t_invoke: self.t_invoke,
            t_respond: self.t_respond,
            t_consult_start: self.t_consult_start,
            t_prop_start: self.t_prop_start,
            consulted: pair_from(self.consult_tag, self.consult_value, row)?,
            propagated: pair_from(self.prop_tag, self.prop_value, row)?,
            consult_responders,
            prop_responders,
            distinct_contacts: self.distinct_contacts,
            max_depth: self.max_depth,
            messages: self.messages,
            retries: self.retries,
        })
    }
}

pub fn write_ops<W: Write>(ops: &[OpRecord], w: W) -> Result<(), TraceError> {
    let mut wtr = csv::Writer::from_writer(w);
    if ops.is_empty() {
        wtr.write_record(OPS_HEADER)?;
    }
    for r in ops {
        wtr.serialize(OpRow::from(r))?;
    }
    wtr.flush()?;
    Ok(())
}

const OPS_HEADER: [&str; 20] = [
    "op_id",
    "kind",
    "client",
    "status",
    "t_invoke",
    "t_respond",
    "t_consult_start",
    "t_prop_start",
    "consult_tag",
    "consult_value",
    "prop_tag",
    "prop_value",
    "consult_responder_count",
    "prop_responder_count",
    "distinct_contacts",
    "max_depth",
    "messages",
    "retries",
    "consult_responders",
    "prop_responders",
];

pub fn read_ops<R: Read>(r: R) -> Result<Vec<OpRecord>, TraceError> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(OPS_HEADER.iter().copied()) {
        return Err(TraceError::Malformed { row: 0, reason: format!("unexpected header {headers:?}") });
    }
    rdr.deserialize::<OpRow>()
        .enumerate()
        .map(|(i, row)| row.map_err(TraceError::from).and_then(|r| r.into_record(i + 1)))
        .collect()
}

fn write_rows<T: Serialize, W: Write>(rows: &[T], header: &[&str], w: W) -> Result<(), TraceError> {
    let mut wtr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wtr.write_record(header)?;
    }
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_snapshots<W: Write>(snaps: &[Snapshot], w: W) -> Result<(), TraceError> {
    write_rows(snaps, &["t", "uptodate_count", "live_count"], w)
}

pub fn read_snapshots<R: Read>(r: R) -> Result<Vec<Snapshot>, TraceError> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_messages<W: Write>(msgs: &[MessageRecord], w: W) -> Result<(), TraceError> {
    write_rows(
        msgs,
        &["t_send", "t_deliver", "kind", "from", "to", "client", "sn", "ttl", "tag", "delivered"],
        w,
    )
}

impl TraceBundle {
    pub fn ops_csv(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_ops(&self.ops, &mut buf).expect("in-memory write");
        buf
    }

    pub fn snapshots_csv(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_snapshots(&self.snapshots, &mut buf).expect("in-memory write");
        buf
    }

    pub fn messages_csv(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_messages(&self.messages, &mut buf).expect("in-memory write");
        buf
    }

    /// SHA-256 over the canonical CSV encodings of every trace file.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.ops_csv());
        h.update(b"\0");
        h.update(self.snapshots_csv());
        h.update(b"\0");
        h.update(self.messages_csv());
        hex::encode(h.finalize())
    }
}
