//! Value types shared by every layer: identities, version tags, object values
//! and the wire message.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Identity of one node incarnation. A node that leaves and comes back is a
/// different `NodeId`; id 0 is reserved for the initial tag and never handed
/// to a live node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl NodeId {
    pub const RESERVED: NodeId = NodeId(0);
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Version stamp `(counter, id)`, ordered lexicographically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Tag {
    pub counter: u64,
    pub id: NodeId,
}

impl Tag {
    pub const INITIAL: Tag = Tag { counter: 0, id: NodeId::RESERVED };

    pub fn new(counter: u64, id: u64) -> Self {
        Tag { counter, id: NodeId(id) }
    }

    /// Tag a writer installs after consulting `self`: the counter moves past
    /// everything seen and the writer stamps its own id.
    pub fn advance(self, writer: NodeId) -> Tag {
        Tag { counter: self.counter + 1, id: writer }
    }
}

/// Lexicographic comparison on `(counter, id)`.
pub fn tag_compare(a: Tag, b: Tag) -> Ordering {
    a.cmp(&b)
}

pub fn tag_advance(consulted: Tag, writer: NodeId) -> Tag {
    consulted.advance(writer)
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.counter, self.id.0)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("malformed tag {0:?}, expected \"counter.id\"")]
pub struct ParseTagError(pub String);

impl FromStr for Tag {
    type Err = ParseTagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (counter, id) = s.split_once('.').ok_or_else(|| ParseTagError(s.to_owned()))?;
        let counter = counter.parse().map_err(|_| ParseTagError(s.to_owned()))?;
        let id = id.parse().map_err(|_| ParseTagError(s.to_owned()))?;
        Ok(Tag::new(counter, id))
    }
}

/// Replicated object value. `Bottom` is the absent value held by nodes that no
/// propagation has reached yet.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub enum ObjectValue {
    #[default]
    Bottom,
    Value(Arc<str>),
}

impl ObjectValue {
    pub fn new(s: impl Into<Arc<str>>) -> Self {
        ObjectValue::Value(s.into())
    }

    /// Default value the object starts with at the initial holders.
    pub fn initial() -> Self {
        ObjectValue::new("v0")
    }

    pub fn is_bottom(&self) -> bool {
        matches!(self, ObjectValue::Bottom)
    }
}

/// Rendered as the payload itself, or the empty string for `Bottom`.
impl fmt::Display for ObjectValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectValue::Bottom => Ok(()),
            ObjectValue::Value(v) => f.write_str(v),
        }
    }
}

impl From<&str> for ObjectValue {
    fn from(s: &str) -> Self {
        if s.is_empty() {
            ObjectValue::Bottom
        } else {
            ObjectValue::new(s)
        }
    }
}

/// A value together with the tag it was installed under.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct Versioned {
    pub value: ObjectValue,
    pub tag: Tag,
}

impl Versioned {
    pub fn new(value: ObjectValue, tag: Tag) -> Self {
        Versioned { value, tag }
    }

    /// Whether `other` should replace `self` at a node that only moves forward.
    ///
    /// A real value under the initial tag beats `Bottom` under the same tag,
    /// otherwise a node that never received the default value could not pick it
    /// up from a consultation.
    pub fn superseded_by(&self, other: &Versioned) -> bool {
        match self.tag.cmp(&other.tag) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => self.value.is_bottom() && !other.value.is_bottom(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    #[serde(rename = "CONS")]
    Cons,
    #[serde(rename = "PROP")]
    Prop,
    #[serde(rename = "RESP")]
    Resp,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MessageKind::Cons => "CONS",
            MessageKind::Prop => "PROP",
            MessageKind::Resp => "RESP",
        })
    }
}

/// Identity of one client phase. Sequence numbers alone collide across
/// clients, so all phase bookkeeping is keyed on the pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhaseKey {
    pub client: NodeId,
    pub sn: u64,
}

impl fmt::Display for PhaseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.client, self.sn)
    }
}

/// `⟨type, v, t, ttl, client-id, sn⟩` plus the sender. Responses carry no
/// client id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub value: ObjectValue,
    pub tag: Tag,
    pub ttl: u32,
    pub client: Option<NodeId>,
    pub sn: u64,
    pub sender: NodeId,
}

impl Message {
    /// Phase this message belongs to. Responses are addressed to the client,
    /// so the receiver supplies its own id.
    pub fn phase_key(&self, receiver: NodeId) -> PhaseKey {
        PhaseKey { client: self.client.unwrap_or(receiver), sn: self.sn }
    }
}

/// Simulator-side wrapper around a message. `dup_hops` counts how many times
/// this copy was re-forwarded by nodes that had already participated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub msg: Message,
    pub dup_hops: u32,
}

impl From<Message> for Envelope {
    fn from(msg: Message) -> Self {
        Envelope { msg, dup_hops: 0 }
    }
}
