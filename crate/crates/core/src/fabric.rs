//! Turn-based message fabric: one global FIFO, one delivery per step, a
//! transcript of every envelope, and the scripted adversary that sits on the
//! delivery path.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::crypto::{hash, Digest};

pub const DEFAULT_STEP_BUDGET: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    ChannelHello,
    ChannelAttest,
    ChannelAccept,
    GammaAuth,
    QuoteL1,
    QuoteL2,
    QuoteL3,
    TauPresent,
    SigmaPresent,
    WrappedTau,
    AuthRequest,
    AuthAck,
    WrappedAck,
    ServiceRequest,
    ServiceGrant,
    ServiceDeny,
}

impl MessageKind {
    pub const ALL: [MessageKind; 16] = [
        MessageKind::ChannelHello,
        MessageKind::ChannelAttest,
        MessageKind::ChannelAccept,
        MessageKind::GammaAuth,
        MessageKind::QuoteL1,
        MessageKind::QuoteL2,
        MessageKind::QuoteL3,
        MessageKind::TauPresent,
        MessageKind::SigmaPresent,
        MessageKind::WrappedTau,
        MessageKind::AuthRequest,
        MessageKind::AuthAck,
        MessageKind::WrappedAck,
        MessageKind::ServiceRequest,
        MessageKind::ServiceGrant,
        MessageKind::ServiceDeny,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::ChannelHello => "ChannelHello",
            MessageKind::ChannelAttest => "ChannelAttest",
            MessageKind::ChannelAccept => "ChannelAccept",
            MessageKind::GammaAuth => "GammaAuth",
            MessageKind::QuoteL1 => "QuoteL1",
            MessageKind::QuoteL2 => "QuoteL2",
            MessageKind::QuoteL3 => "QuoteL3",
            MessageKind::TauPresent => "TauPresent",
            MessageKind::SigmaPresent => "SigmaPresent",
            MessageKind::WrappedTau => "WrappedTau",
            MessageKind::AuthRequest => "AuthRequest",
            MessageKind::AuthAck => "AuthAck",
            MessageKind::WrappedAck => "WrappedAck",
            MessageKind::ServiceRequest => "ServiceRequest",
            MessageKind::ServiceGrant => "ServiceGrant",
            MessageKind::ServiceDeny => "ServiceDeny",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown message kind `{0}`")]
pub struct UnknownKind(pub String);

impl FromStr for MessageKind {
    type Err = UnknownKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownKind(s.to_string()))
    }
}

pub type SessionId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub seq: u64,
    pub from: String,
    pub to: String,
    pub session: Option<SessionId>,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
    /// Position of this envelope among those of the same kind.
    pub kind_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Status {
    Accepted,
    Rejected,
    Dropped,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Accepted => "accepted",
            Status::Rejected => "rejected",
            Status::Dropped => "dropped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub from: String,
    pub to: String,
    pub kind: MessageKind,
    pub status: Status,
    pub payload_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdversaryEvent {
    pub seq: u64,
    pub action: String,
}

/// Ordered record of every envelope delivered (or dropped) by the fabric.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub seed: u64,
    pub header: Vec<(String, String)>,
    pub entries: Vec<TranscriptEntry>,
    pub adversary: Vec<AdversaryEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranscriptParseError {
    #[error("transcript has no entries")]
    Empty,
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
}

impl Transcript {
    pub fn kinds(&self) -> Vec<MessageKind> {
        self.entries.iter().map(|e| e.kind).collect()
    }

    /// One envelope per line: `seq | from | to | kind | status | payload-digest`.
    /// Header and adversary actions are `#` comment lines.
    pub fn render(&self) -> String {
        let mut out = String::from("# transtrust transcript v1\n");
        let _ = writeln!(out, "# seed={}", self.seed);
        for (k, v) in &self.header {
            let _ = writeln!(out, "# {k}={v}");
        }
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{} | {} | {} | {} | {} | {}",
                e.seq,
                e.from,
                e.to,
                e.kind,
                e.status.as_str(),
                e.payload_digest
            );
        }
        for a in &self.adversary {
            let _ = writeln!(out, "# adversary seq={} action={}", a.seq, a.action);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TranscriptParseError> {
        let mut t = Transcript::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: &str| TranscriptParseError::Line {
                line,
                message: message.to_string(),
            };
            let l = raw.trim();
            if l.is_empty() {
                continue;
            }
            if let Some(comment) = l.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(rest) = comment.strip_prefix("adversary ") {
                    let mut seq = None;
                    let mut action = None;
                    for part in rest.splitn(2, ' ') {
                        if let Some(v) = part.strip_prefix("seq=") {
                            seq = v.parse().ok();
                        } else if let Some(v) = part.strip_prefix("action=") {
                            action = Some(v.to_string());
                        }
                    }
                    match (seq, action) {
                        (Some(seq), Some(action)) => t.adversary.push(AdversaryEvent { seq, action }),
                        _ => return Err(err("malformed adversary line")),
                    }
                } else if let Some((k, v)) = comment.split_once('=') {
                    if k == "seed" {
                        t.seed = v.parse().map_err(|_| err("bad seed"))?;
                    } else {
                        t.header.push((k.to_string(), v.to_string()));
                    }
                }
                continue;
            }
            let fields: Vec<&str> = l.split('|').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(err("expected 6 `|`-separated fields"));
            }
            let seq = fields[0].parse().map_err(|_| err("bad seq"))?;
            let kind = fields[3]
                .parse()
                .map_err(|e: UnknownKind| err(&e.to_string()))?;
            let status = match fields[4] {
                "accepted" => Status::Accepted,
                "rejected" => Status::Rejected,
                "dropped" => Status::Dropped,
                _ => return Err(err("bad status")),
            };
            let payload_digest = Digest::from_hex(fields[5]).ok_or_else(|| err("bad payload digest"))?;
            if fields[1].is_empty() || fields[2].is_empty() {
                return Err(err("empty actor name"));
            }
            t.entries.push(TranscriptEntry {
                seq,
                from: fields[1].to_string(),
                to: fields[2].to_string(),
                kind,
                status,
                payload_digest,
            });
        }
        if t.entries.is_empty() {
            return Err(TranscriptParseError::Empty);
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Seq(u64),
    Kind { kind: MessageKind, index: usize },
}

impl Target {
    fn matches(&self, env: &Envelope) -> bool {
        match *self {
            Target::Seq(s) => env.seq == s,
            Target::Kind { kind, index } => env.kind == kind && env.kind_index == index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Flip one octet of the wire payload. Defaults to the last octet.
    Tamper { byte: Option<usize> },
    /// A compromised sender or relay flips one octet of the application
    /// payload before it is sealed for the hop.
    Forge { byte: Option<usize> },
    Drop,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdversaryRule {
    pub target: Target,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad adversary rule `{rule}`: {message}")]
pub struct RuleParseError {
    pub rule: String,
    pub message: String,
}

impl FromStr for AdversaryRule {
    type Err = RuleParseError;

    /// `action:kind:index[:byte]` or `action:#seq[:byte]`, where action is
    /// one of `tamper`, `forge`, `drop`, `dup`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |message: &str| RuleParseError {
            rule: s.to_string(),
            message: message.to_string(),
        };
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() < 2 {
            return Err(err("expected action:target"));
        }
        let (target, rest) = if let Some(seq) = parts[1].strip_prefix('#') {
            (Target::Seq(seq.parse().map_err(|_| err("bad seq"))?), &parts[2..])
        } else {
            let kind = parts[1].parse().map_err(|e: UnknownKind| err(&e.to_string()))?;
            let index = match parts.get(2) {
                Some(i) => i.parse().map_err(|_| err("bad index"))?,
                None => 0,
            };
            (Target::Kind { kind, index }, parts.get(3..).unwrap_or(&[]))
        };
        let byte = match rest {
            [] => None,
            [b] => Some(b.parse().map_err(|_| err("bad byte index"))?),
            _ => return Err(err("too many fields")),
        };
        let action = match parts[0] {
            "tamper" => Action::Tamper { byte },
            "forge" => Action::Forge { byte },
            "drop" | "dup" if byte.is_some() => return Err(err("byte index only applies to tamper/forge")),
            "drop" => Action::Drop,
            "dup" | "duplicate" => Action::Duplicate,
            other => return Err(err(&format!("unknown action `{other}`"))),
        };
        Ok(AdversaryRule { target, action })
    }
}

impl fmt::Display for AdversaryRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (name, byte) = match self.action {
            Action::Tamper { byte } => ("tamper", byte),
            Action::Forge { byte } => ("forge", byte),
            Action::Drop => ("drop", None),
            Action::Duplicate => ("dup", None),
        };
        match self.target {
            Target::Seq(s) => write!(f, "{name}:#{s}")?,
            Target::Kind { kind, index } => write!(f, "{name}:{kind}:{index}")?,
        }
        if let Some(b) = byte {
            write!(f, ":{b}")?;
        }
        Ok(())
    }
}

fn flip(bytes: &mut [u8], byte: Option<usize>) -> Option<usize> {
    if bytes.is_empty() {
        return None;
    }
    let i = byte.map_or(bytes.len() - 1, |b| b % bytes.len());
    bytes[i] ^= 0x01;
    Some(i)
}

/// Outcome of one delivery step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delivery {
    Delivered(Envelope),
    Dropped(Envelope),
}

#[derive(Debug, Clone)]
pub struct Fabric {
    next_seq: u64,
    queue: VecDeque<Envelope>,
    kind_counts: BTreeMap<MessageKind, usize>,
    rules: Vec<AdversaryRule>,
    transcript: Transcript,
    index_by_seq: BTreeMap<u64, usize>,
    steps: usize,
    budget: usize,
}

impl Fabric {
    pub fn new(seed: u64, rules: Vec<AdversaryRule>) -> Self {
        Fabric {
            next_seq: 1,
            queue: VecDeque::new(),
            kind_counts: BTreeMap::new(),
            rules,
            transcript: Transcript {
                seed,
                ..Transcript::default()
            },
            index_by_seq: BTreeMap::new(),
            steps: 0,
            budget: DEFAULT_STEP_BUDGET,
        }
    }

    pub fn set_budget(&mut self, budget: usize) {
        self.budget = budget;
    }

    /// Start a new protocol run with a fresh step budget.
    pub fn reset_steps(&mut self) {
        self.steps = 0;
    }

    pub fn budget_exhausted(&self) -> bool {
        self.steps >= self.budget
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn transcript_mut(&mut self) -> &mut Transcript {
        &mut self.transcript
    }

    pub fn log_adversary(&mut self, seq: u64, action: String) {
        self.transcript.adversary.push(AdversaryEvent { seq, action });
    }

    /// Allocate the seq and per-kind index the next envelope of `kind`
    /// will carry, and apply any forge rule to the application payload.
    pub fn stamp(&mut self, kind: MessageKind, plaintext: &mut [u8]) -> (u64, usize) {
        let seq = self.next_seq;
        self.next_seq += 1;
        let count = self.kind_counts.entry(kind).or_insert(0);
        let index = *count;
        *count += 1;
        let probe = Envelope {
            seq,
            from: String::new(),
            to: String::new(),
            session: None,
            kind,
            payload: Vec::new(),
            kind_index: index,
        };
        let forges: Vec<Option<usize>> = self
            .rules
            .iter()
            .filter(|r| r.target.matches(&probe))
            .filter_map(|r| match r.action {
                Action::Forge { byte } => Some(byte),
                _ => None,
            })
            .collect();
        for byte in forges {
            if let Some(i) = flip(plaintext, byte) {
                self.log_adversary(seq, format!("forge byte={i}"));
            }
        }
        (seq, index)
    }

    pub fn post(&mut self, envelope: Envelope) {
        self.queue.push_back(envelope);
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// One scheduler step. Applies matching adversary actions, records the
    /// envelope in the transcript as accepted (receivers may later mark it
    /// rejected) and hands it over.
    pub fn deliver(&mut self) -> Option<Delivery> {
        let mut env = self.queue.pop_front()?;
        self.steps += 1;
        let actions: Vec<Action> = self
            .rules
            .iter()
            .filter(|r| r.target.matches(&env))
            .map(|r| r.action)
            .collect();
        let mut dropped = false;
        for action in actions {
            match action {
                Action::Tamper { byte } => {
                    if let Some(i) = flip(&mut env.payload, byte) {
                        self.log_adversary(env.seq, format!("tamper byte={i}"));
                    }
                }
                Action::Drop => {
                    self.log_adversary(env.seq, "drop".to_string());
                    dropped = true;
                }
                Action::Duplicate => {
                    let mut copy = env.clone();
                    copy.seq = self.next_seq;
                    self.next_seq += 1;
                    // a replay is not itself a target of further rules
                    copy.kind_index = usize::MAX;
                    self.log_adversary(env.seq, format!("duplicate as={}", copy.seq));
                    self.queue.push_front(copy);
                }
                Action::Forge { .. } => {}
            }
        }
        let status = if dropped { Status::Dropped } else { Status::Accepted };
        self.index_by_seq.insert(env.seq, self.transcript.entries.len());
        self.transcript.entries.push(TranscriptEntry {
            seq: env.seq,
            from: env.from.clone(),
            to: env.to.clone(),
            kind: env.kind,
            status,
            payload_digest: hash(&env.payload),
        });
        Some(if dropped {
            Delivery::Dropped(env)
        } else {
            Delivery::Delivered(env)
        })
    }

    pub fn reject(&mut self, seq: u64) {
        if let Some(&i) = self.index_by_seq.get(&seq) {
            self.transcript.entries[i].status = Status::Rejected;
        }
    }

    pub fn status(&self, seq: u64) -> Option<Status> {
        self.index_by_seq
            .get(&seq)
            .map(|&i| self.transcript.entries[i].status)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(f: &mut Fabric, from: &str, to: &str, kind: MessageKind, payload: &[u8]) -> u64 {
        let mut p = payload.to_vec();
        let (seq, kind_index) = f.stamp(kind, &mut p);
        f.post(Envelope {
            seq,
            from: from.into(),
            to: to.into(),
            session: None,
            kind,
            payload: p,
            kind_index,
        });
        seq
    }

    #[test]
    fn fifo_and_monotone_seq() {
        let mut f = Fabric::new(1, vec![]);
        env(&mut f, "a", "b", MessageKind::ChannelHello, b"1");
        env(&mut f, "a", "b", MessageKind::ChannelHello, b"2");
        env(&mut f, "b", "a", MessageKind::ChannelHello, b"3");
        let mut got = vec![];
        while let Some(Delivery::Delivered(e)) = f.deliver() {
            got.push(e.payload);
        }
        assert_eq!(got, vec![b"1".to_vec(), b"2".to_vec(), b"3".to_vec()]);
        let seqs: Vec<u64> = f.transcript().entries.iter().map(|e| e.seq).collect();
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn adversary_actions_apply_and_are_logged() {
        let rules = vec![
            "tamper:AuthAck:0:1".parse().unwrap(),
            "drop:AuthAck:1".parse().unwrap(),
            "dup:ServiceGrant".parse().unwrap(),
        ];
        let mut f = Fabric::new(1, rules);
        env(&mut f, "A", "a", MessageKind::AuthAck, b"\x00\x00\x00");
        env(&mut f, "A", "a", MessageKind::AuthAck, b"x");
        env(&mut f, "A", "a", MessageKind::ServiceGrant, b"g");
        let Some(Delivery::Delivered(e)) = f.deliver() else { panic!() };
        assert_eq!(e.payload, b"\x00\x01\x00");
        assert!(matches!(f.deliver(), Some(Delivery::Dropped(_))));
        let Some(Delivery::Delivered(g)) = f.deliver() else { panic!() };
        let Some(Delivery::Delivered(d)) = f.deliver() else { panic!() };
        assert_eq!(g.payload, d.payload);
        assert!(d.seq > g.seq);
        assert!(f.deliver().is_none());
        assert_eq!(f.transcript().adversary.len(), 3);
        assert_eq!(f.transcript().entries[1].status, Status::Dropped);
    }

    #[test]
    fn forge_alters_application_bytes_at_stamp_time() {
        let mut f = Fabric::new(1, vec!["forge:WrappedTau:0:0".parse().unwrap()]);
        let mut p = vec![0u8, 0];
        f.stamp(MessageKind::WrappedTau, &mut p);
        assert_eq!(p, vec![1, 0]);
        let mut q = vec![0u8, 0];
        f.stamp(MessageKind::WrappedTau, &mut q);
        assert_eq!(q, vec![0, 0]);
    }

    #[test]
    fn rule_syntax() {
        let r: AdversaryRule = "tamper:WrappedTau:0".parse().unwrap();
        assert_eq!(
            r,
            AdversaryRule {
                target: Target::Kind {
                    kind: MessageKind::WrappedTau,
                    index: 0
                },
                action: Action::Tamper { byte: None }
            }
        );
        assert_eq!(r.to_string(), "tamper:WrappedTau:0");
        let s: AdversaryRule = "drop:#12".parse().unwrap();
        assert_eq!(s.target, Target::Seq(12));
        assert!("tamper:Bogus:0".parse::<AdversaryRule>().is_err());
        assert!("explode:AuthAck:0".parse::<AdversaryRule>().is_err());
        assert!("drop:AuthAck:0:3".parse::<AdversaryRule>().is_err());
    }

    #[test]
    fn transcript_render_parse_round_trip() {
        let mut f = Fabric::new(42, vec!["drop:AuthAck:0".parse().unwrap()]);
        env(&mut f, "phone", "mno", MessageKind::ChannelHello, b"h");
        env(&mut f, "mno", "phone", MessageKind::AuthAck, b"a");
        f.deliver();
        f.deliver();
        f.reject(1);
        f.transcript_mut().header.push(("scenario".into(), "pos".into()));
        let text = f.transcript().render();
        let parsed = Transcript::parse(&text).unwrap();
        assert_eq!(&parsed, f.transcript());
        assert!(text.contains("1 | phone | mno | ChannelHello | rejected | "));
    }

    #[test]
    fn malformed_transcripts_are_refused() {
        assert_eq!(Transcript::parse(""), Err(TranscriptParseError::Empty));
        assert_eq!(Transcript::parse("# seed=1\n"), Err(TranscriptParseError::Empty));
        assert!(matches!(
            Transcript::parse("1 | a | b | Nope | accepted | 00"),
            Err(TranscriptParseError::Line { line: 1, .. })
        ));
    }
}
