//! Outcome records, invariant suites and the variant matrix.
//!
//! Transcript-level checks need nothing but a parsed [`Transcript`] with its
//! `cfg.*` header; the rest replay the run from that header.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::config::{BondingSection, ConfigError, PosSection, Scenario, ScenarioConfig};
use crate::credentials::EnrolmentMode;
use crate::fabric::{MessageKind, Status, Transcript, TranscriptEntry};
use crate::operations::{Privilege, PrivacyMode, Reason, RestrictionVariant, SubordinationVariant, Verdict};
use crate::scenarios::{self, BondingOutcome, Outcome, PosOutcome, PrepaidOutcome, RestrictionOutcome, ScenarioError, ScenarioRun};
use crate::world::World;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantResult {
    pub name: &'static str,
    pub passed: bool,
    /// First violation and how many there were.
    pub detail: Option<String>,
}

impl InvariantResult {
    fn from_violations(name: &'static str, violations: Vec<String>) -> Self {
        let detail = match violations.len() {
            0 => None,
            1 => Some(violations[0].clone()),
            n => Some(format!("{} (+{} more)", violations[0], n - 1)),
        };
        InvariantResult {
            name,
            passed: violations.is_empty(),
            detail,
        }
    }
}

impl fmt::Display for InvariantResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.name, if self.passed { "pass" } else { "fail" })?;
        if let Some(d) = &self.detail {
            write!(f, " ({d})")?;
        }
        Ok(())
    }
}

// ---- transcript checks ----

fn accepted(t: &Transcript) -> impl Iterator<Item = (usize, &TranscriptEntry)> {
    t.entries.iter().enumerate().filter(|(_, e)| e.status == Status::Accepted)
}

fn pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

fn describe(e: &TranscriptEntry) -> String {
    format!("seq {} {} {}->{}", e.seq, e.kind, e.from, e.to)
}

pub fn seq_monotone(t: &Transcript) -> Vec<String> {
    t.entries
        .windows(2)
        .filter(|w| w[1].seq <= w[0].seq)
        .map(|w| format!("seq {} follows seq {}", w[1].seq, w[0].seq))
        .collect()
}

const APPLICATION: [MessageKind; 9] = [
    MessageKind::TauPresent,
    MessageKind::SigmaPresent,
    MessageKind::ServiceRequest,
    MessageKind::ServiceGrant,
    MessageKind::QuoteL3,
    MessageKind::WrappedTau,
    MessageKind::WrappedAck,
    MessageKind::AuthRequest,
    MessageKind::AuthAck,
];

/// Application envelopes between an agent and anyone only travel inside a
/// channel whose accept was delivered. Principal-to-principal links are
/// provisioned out of band.
pub fn channel_first(t: &Transcript, principals: &[&str]) -> Vec<String> {
    let mut open: BTreeMap<(String, String), bool> = BTreeMap::new();
    let mut out = Vec::new();
    for (_, e) in accepted(t) {
        let p = pair(&e.from, &e.to);
        match e.kind {
            MessageKind::ChannelHello => {
                open.insert(p, false);
            }
            MessageKind::ChannelAccept => {
                open.insert(p, true);
            }
            k if APPLICATION.contains(&k) => {
                let provisioned = principals.contains(&e.from.as_str()) && principals.contains(&e.to.as_str());
                if !provisioned && !open.get(&p).copied().unwrap_or(false) {
                    out.push(format!("{} outside an accepted channel", describe(e)));
                }
            }
            _ => {}
        }
    }
    out
}

/// Per attester→verifier pair, reset at each hello between the two: an
/// accepted level-n quote needs an accepted level n-1 before it.
pub fn layering(t: &Transcript) -> Vec<String> {
    let mut level: BTreeMap<(String, String), u8> = BTreeMap::new();
    let mut out = Vec::new();
    for (_, e) in accepted(t) {
        let key = (e.from.clone(), e.to.clone());
        let n = match e.kind {
            MessageKind::ChannelHello => {
                level.remove(&key);
                level.remove(&(e.to.clone(), e.from.clone()));
                continue;
            }
            MessageKind::QuoteL1 => 1,
            MessageKind::QuoteL2 => 2,
            MessageKind::QuoteL3 => 3,
            _ => continue,
        };
        let cur = level.entry(key).or_insert(0);
        if *cur + 1 < n {
            out.push(format!("{} with only level {} accepted", describe(e), cur));
        }
        *cur = (*cur).max(n);
    }
    out
}

type Sig<'a> = (MessageKind, &'a str, &'a str);

/// Envelope signatures that occur in exactly one of the two steps, in
/// their honest order.
fn step_signatures(c: &PosSection) -> (Vec<Sig<'_>>, Vec<Sig<'_>>) {
    use MessageKind::*;
    let (m, p, o, s) = (c.mno.as_str(), c.phone.as_str(), c.owner.as_str(), c.pos.as_str());
    let step_a = vec![
        (TauPresent, s, p),
        (TauPresent, p, m),
        (TauPresent, m, o),
        (AuthRequest, p, s),
        (GammaAuth, s, p),
        (GammaAuth, m, o),
        (AuthAck, o, m),
        (AuthAck, m, p),
    ];
    let step_b = vec![
        (TauPresent, p, s),
        (WrappedTau, s, p),
        (WrappedTau, p, m),
        (WrappedTau, m, o),
        (AuthAck, m, o),
        (WrappedAck, o, m),
        (WrappedAck, m, p),
        (WrappedAck, p, s),
    ];
    (step_a, step_b)
}

/// Channels before either step, each step in its own order, and the steps
/// separated as configured.
pub fn transposition_order(t: &Transcript, c: &PosSection) -> Vec<String> {
    let (sigs_a, sigs_b) = step_signatures(c);
    let locate = |sigs: &[Sig<'_>], e: &TranscriptEntry| {
        sigs.iter()
            .position(|(k, f, to)| *k == e.kind && *f == e.from && *to == e.to)
    };
    let mut hits_a = Vec::new();
    let mut hits_b = Vec::new();
    for (i, e) in accepted(t) {
        if let Some(p) = locate(&sigs_a, e) {
            hits_a.push((i, p));
        }
        if let Some(p) = locate(&sigs_b, e) {
            hits_b.push((i, p));
        }
    }
    let mut out = Vec::new();
    for (name, hits) in [("step A", &hits_a), ("step B", &hits_b)] {
        for w in hits.windows(2) {
            if w[1].1 <= w[0].1 {
                out.push(format!("{name}: {} out of order", describe(&t.entries[w[1].0])));
            }
        }
    }
    let first_step = hits_a.iter().chain(&hits_b).map(|h| h.0).min();
    if let Some(first) = first_step {
        for (x, y) in [(&c.phone, &c.pos), (&c.phone, &c.mno)] {
            let opened = t.entries[..first].iter().any(|e| {
                e.kind == MessageKind::ChannelAccept && e.status == Status::Accepted && pair(&e.from, &e.to) == pair(x, y)
            });
            if !opened {
                out.push(format!("no accepted channel {x}<->{y} before seq {}", t.entries[first].seq));
            }
        }
    }
    let (first, second, label) = match c.step_order {
        crate::operations::StepOrder::AThenB => (&hits_a, &hits_b, "step B before the end of step A"),
        crate::operations::StepOrder::BThenA => (&hits_b, &hits_a, "step A before the end of step B"),
    };
    if let (Some(last), Some(next)) = (first.iter().map(|h| h.0).max(), second.iter().map(|h| h.0).min()) {
        if next < last {
            out.push(format!("{label}: {}", describe(&t.entries[next])));
        }
    }
    out
}

/// An accepted ServiceGrant implies a completed run; a completed run sends one.
pub fn pos_composition(t: &Transcript, out: &PosOutcome) -> Vec<String> {
    let grants: Vec<&TranscriptEntry> = t.entries.iter().filter(|e| e.kind == MessageKind::ServiceGrant).collect();
    let mut v = Vec::new();
    if grants.iter().any(|e| e.status == Status::Accepted) && !out.transposition.completed {
        v.push("ServiceGrant accepted after an incomplete transposition".into());
    }
    if out.transposition.completed && grants.is_empty() {
        v.push("completed transposition without a ServiceGrant".into());
    }
    v
}

/// No accessory service through a phone of another domain.
pub fn bonding_containment(t: &Transcript, c: &BondingSection) -> Vec<String> {
    if c.phone_domain() == c.mno {
        return Vec::new();
    }
    accepted(t)
        .filter(|(_, e)| e.kind == MessageKind::ServiceGrant && e.from == c.phone && e.to == c.camera)
        .map(|(_, e)| format!("{} through a phone of {}", describe(e), c.phone_domain()))
        .collect()
}

/// Forward variant: every grant to the accessory follows the principal's
/// acknowledgement for that request.
pub fn subordination_containment(t: &Transcript, c: &BondingSection) -> Vec<String> {
    if c.variant != SubordinationVariant::Forward {
        return Vec::new();
    }
    let mut acked = false;
    let mut out = Vec::new();
    for (_, e) in accepted(t) {
        match (e.kind, e.from.as_str(), e.to.as_str()) {
            (MessageKind::ServiceRequest, f, to) if f == c.camera && to == c.phone => acked = false,
            (MessageKind::AuthAck, f, to) if f == c.mno && to == c.phone => acked = true,
            (MessageKind::ServiceGrant, f, to) if f == c.phone && to == c.camera => {
                if !acked {
                    out.push(format!("{} without a principal acknowledgement", describe(e)));
                }
                acked = false;
            }
            _ => {}
        }
    }
    out
}

// ---- world and outcome checks ----

/// Accepted assertion levels per session endpoint start at 1 and never
/// skip or fall.
pub fn evidence_monotone(world: &World) -> Vec<String> {
    let mut out = Vec::new();
    for s in world.sessions() {
        let mut top: BTreeMap<&str, u8> = BTreeMap::new();
        for (endpoint, level) in &s.evidence_history {
            let n = level.as_u8();
            let cur = top.entry(endpoint).or_insert(0);
            if n < *cur || n > *cur + 1 {
                out.push(format!("session {}: {endpoint} level {n} after {cur}", s.id));
            }
            *cur = (*cur).max(n);
        }
    }
    out
}

pub fn pcr_replay(world: &World) -> Vec<String> {
    if world.pcr_logs_consistent() {
        Vec::new()
    } else {
        vec!["a PCR bank differs from its log replay".into()]
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// No γ secret or subgroup secret is ever sent, sealed or in the clear.
pub fn secret_confidentiality(world: &World) -> Vec<String> {
    let mut secrets: Vec<(String, [u8; 32])> = Vec::new();
    for actor in world.actors() {
        match actor {
            crate::world::Actor::Agent(a) => {
                if let Some(g) = &a.gamma {
                    secrets.push((format!("γ of {}", a.id.name), g.secret));
                }
            }
            crate::world::Actor::Principal(p) => {
                if let Some(s) = &p.registry.shared_group_secret {
                    secrets.push((format!("group secret of {}", p.id.name), s.0));
                }
            }
        }
    }
    let mut out = Vec::new();
    for (name, secret) in &secrets {
        let on_wire = world.wire_log().iter().find(|(_, b)| contains(b, secret)).map(|(s, _)| *s);
        let in_plain = world.plain_log().iter().find(|r| contains(&r.plaintext, secret)).map(|r| r.seq);
        if let Some(seq) = on_wire.or(in_plain) {
            out.push(format!("{name} appears in seq {seq}"));
        }
    }
    out
}

/// Final total = initial − granted units; denies leave the total alone.
pub fn prepaid_conservation(out: &PrepaidOutcome) -> Vec<String> {
    let mut v = Vec::new();
    let mut expected = Some(out.initial);
    for (i, a) in out.attempts.iter().enumerate() {
        if a.decision.is_grant() {
            expected = expected.and_then(|t| t.checked_sub(a.units));
            if expected.is_none() {
                v.push(format!("attempt {i}: granted {} units past zero", a.units));
                return v;
            }
        }
        if a.total_after != expected {
            v.push(format!("attempt {i}: total {:?}, expected {:?}", a.total_after, expected));
            expected = a.total_after;
        }
    }
    let granted = out.granted_units();
    if out.final_total != out.initial.checked_sub(granted) {
        v.push(format!(
            "final total {:?} != {} - {granted}",
            out.final_total, out.initial
        ));
    }
    v
}

/// At most one TPM obtains privileged access per γ serial.
pub fn clone_soundness(world: &World, out: &RestrictionOutcome) -> Vec<String> {
    let mut by_serial: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
    for (name, d) in &out.decisions {
        if d.verdict == Verdict::Grant && d.privilege == Privilege::Privileged {
            let agent = world.agent(name).expect("requesting agent exists");
            if let Some(g) = &agent.gamma {
                by_serial
                    .entry(g.serial)
                    .or_default()
                    .insert(agent.tpm.endorsement_key_id().to_hex());
            }
        }
    }
    by_serial
        .into_iter()
        .filter(|(_, tpms)| tpms.len() > 1)
        .map(|(serial, tpms)| format!("γ serial {serial} privileged on {} TPMs", tpms.len()))
        .collect()
}

/// Once the backing key is revoked every request is denied as revoked.
pub fn revocation_monotone(out: &BondingOutcome) -> Vec<String> {
    let Some(from) = out.revoked_before else {
        return Vec::new();
    };
    out.decisions
        .iter()
        .enumerate()
        .skip(from)
        .filter(|(_, d)| d.verdict != Verdict::Deny || d.reason != Reason::Revoked)
        .map(|(i, d)| format!("request {i} after revocation: {}", d.summary()))
        .collect()
}

// ---- replay checks ----

/// Rerunning the same config yields the same transcript and outcome.
pub fn determinism(run: &ScenarioRun) -> Vec<String> {
    match scenarios::run(&run.config) {
        Ok(again) => {
            let mut v = Vec::new();
            if again.world.fabric.transcript().render() != run.world.fabric.transcript().render() {
                v.push("transcript differs on rerun".into());
            }
            if again.outcome != run.outcome {
                v.push("outcome differs on rerun".into());
            }
            v
        }
        Err(e) => vec![format!("rerun failed: {e}")],
    }
}

/// Adversary rules applied to every WrappedTau/WrappedAck envelope of the
/// honest run.
pub fn tamper_rules(honest: &Transcript) -> Vec<String> {
    let mut rules = Vec::new();
    for kind in [MessageKind::WrappedTau, MessageKind::WrappedAck] {
        let n = honest.entries.iter().filter(|e| e.kind == kind).count();
        for i in 0..n {
            rules.push(format!("tamper:{kind}:{i}"));
            rules.push(format!("tamper:{kind}:{i}:0"));
            rules.push(format!("forge:{kind}:{i}"));
            rules.push(format!("forge:{kind}:{i}:0"));
        }
    }
    rules
}

/// Every single-envelope tamper of the pledge or its acknowledgement
/// leaves the transposition incomplete.
pub fn tamper_completeness(config: &ScenarioConfig) -> Vec<String> {
    let mut honest = config.clone();
    honest.adversary.script.clear();
    let base = match scenarios::run(&honest) {
        Ok(r) => r,
        Err(e) => return vec![format!("honest run failed: {e}")],
    };
    match &base.outcome {
        Outcome::Pos(p) if p.transposition.completed => {}
        _ => return vec!["honest run did not complete".into()],
    }
    let mut v = Vec::new();
    for rule in tamper_rules(base.world.fabric.transcript()) {
        let mut c = honest.clone();
        c.adversary.script = vec![rule.clone()];
        match scenarios::run(&c) {
            Ok(r) => {
                if r.world.fabric.transcript().adversary.is_empty() {
                    v.push(format!("{rule}: never fired"));
                }
                if let Outcome::Pos(p) = &r.outcome {
                    if p.transposition.completed {
                        v.push(format!("{rule}: run still completed"));
                    }
                }
            }
            Err(e) => v.push(format!("{rule}: {e}")),
        }
    }
    v
}

// ---- registry ----

const COMMON: [&str; 7] = [
    "seq_monotone",
    "channel_first",
    "layering",
    "evidence_monotone",
    "pcr_replay",
    "secret_confidentiality",
    "determinism",
];

/// Invariants every report for `scenario` lists, in order.
pub fn registered(scenario: Scenario) -> Vec<&'static str> {
    let mut v = COMMON.to_vec();
    v.extend_from_slice(match scenario {
        Scenario::Pos => &["transposition_order", "pos_composition", "tamper_completeness"][..],
        Scenario::Restriction => &["clone_soundness"],
        Scenario::Prepaid => &["prepaid_conservation"],
        Scenario::Bonding => &["bonding_containment", "subordination_containment", "revocation_monotone"],
    });
    v
}

fn check(name: &'static str, run: &ScenarioRun) -> InvariantResult {
    let t = run.world.fabric.transcript();
    let (principals, _) = run.config.roles();
    let violations = match (name, &run.outcome) {
        ("seq_monotone", _) => seq_monotone(t),
        ("channel_first", _) => channel_first(t, &principals),
        ("layering", _) => layering(t),
        ("evidence_monotone", _) => evidence_monotone(&run.world),
        ("pcr_replay", _) => pcr_replay(&run.world),
        ("secret_confidentiality", _) => secret_confidentiality(&run.world),
        ("determinism", _) => determinism(run),
        ("transposition_order", _) => transposition_order(t, &run.config.pos),
        ("pos_composition", Outcome::Pos(p)) => pos_composition(t, p),
        ("tamper_completeness", _) => tamper_completeness(&run.config),
        ("clone_soundness", Outcome::Restriction(r)) => clone_soundness(&run.world, r),
        ("prepaid_conservation", Outcome::Prepaid(p)) => prepaid_conservation(p),
        ("bonding_containment", _) => bonding_containment(t, &run.config.bonding),
        ("subordination_containment", _) => subordination_containment(t, &run.config.bonding),
        ("revocation_monotone", Outcome::Bonding(b)) => revocation_monotone(b),
        _ => vec![format!("{name} does not apply to {}", run.config.scenario())],
    };
    InvariantResult::from_violations(name, violations)
}

/// All invariants registered for the run's scenario.
pub fn evaluate(run: &ScenarioRun) -> Vec<InvariantResult> {
    registered(run.config.scenario())
        .into_iter()
        .map(|n| check(n, run))
        .collect()
}

// ---- run report ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    pub scenario: Scenario,
    pub seed: u64,
    pub variant: String,
    pub adversary: Vec<String>,
    pub outcome: String,
    pub success: bool,
    pub fields: Vec<(String, String)>,
    pub transcript: String,
    pub invariants: Vec<InvariantResult>,
}

impl RunReport {
    pub fn new(run: &ScenarioRun, transcript_path: &str) -> Self {
        RunReport {
            scenario: run.config.scenario(),
            seed: run.config.run.seed,
            variant: run.config.variant_summary(),
            adversary: run.config.adversary.script.clone(),
            outcome: run.outcome.summary(),
            success: run.outcome.success(),
            fields: run.outcome.fields(),
            transcript: transcript_path.to_string(),
            invariants: evaluate(run),
        }
    }

    /// 0 for completed/grant, 1 for deny/failed.
    pub fn exit_code(&self) -> i32 {
        if self.success {
            0
        } else {
            1
        }
    }

    pub fn invariants_hold(&self) -> bool {
        self.invariants.iter().all(|i| i.passed)
    }

    /// `key = value` lines in a fixed order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario = {}", self.scenario);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "variant = {}", self.variant);
        let adversary = if self.adversary.is_empty() {
            "none".to_string()
        } else {
            self.adversary.join(",")
        };
        let _ = writeln!(s, "adversary = {adversary}");
        let _ = writeln!(s, "outcome = {}", self.outcome);
        let _ = writeln!(s, "exit = {}", self.exit_code());
        for (k, v) in &self.fields {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "transcript = {}", self.transcript);
        for i in &self.invariants {
            let _ = writeln!(s, "invariant.{i}");
        }
        s
    }
}

// ---- verify ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Suite {
    Ordering,
    Layering,
    Tamper,
    Clone,
    Conservation,
    Containment,
    /// Everything registered for the transcript's scenario.
    Scenario,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Ordering,
        Suite::Layering,
        Suite::Tamper,
        Suite::Clone,
        Suite::Conservation,
        Suite::Containment,
        Suite::Scenario,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Ordering => "ordering",
            Suite::Layering => "layering",
            Suite::Tamper => "tamper",
            Suite::Clone => "clone",
            Suite::Conservation => "conservation",
            Suite::Containment => "containment",
            Suite::Scenario => "scenario",
        }
    }

    /// The scenario a suite is limited to, if any.
    fn applies_to(self) -> Option<Scenario> {
        match self {
            Suite::Tamper => Some(Scenario::Pos),
            Suite::Clone => Some(Scenario::Restriction),
            Suite::Conservation => Some(Scenario::Prepaid),
            Suite::Containment => Some(Scenario::Bonding),
            _ => None,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = match s {
            "tamper_completeness" => "tamper",
            "clone_soundness" => "clone",
            "prepaid_conservation" => "conservation",
            "bonding_containment" => "containment",
            s => s,
        };
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|x| x.as_str()).collect();
                format!("unknown suite {s} (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("suite {suite} applies to {expected} transcripts, this one is {found}")]
    NotApplicable {
        suite: Suite,
        expected: Scenario,
        found: Scenario,
    },
    #[error("replay failed: {0}")]
    Replay(#[from] ScenarioError),
}

fn replay(t: &Transcript, config: &ScenarioConfig) -> Result<(ScenarioRun, InvariantResult), VerifyError> {
    let run = scenarios::run(config)?;
    let same = run.world.fabric.transcript().render() == t.render();
    let v = if same {
        Vec::new()
    } else {
        vec!["transcript differs from a replay of its configuration".to_string()]
    };
    Ok((run, InvariantResult::from_violations("replay_matches", v)))
}

/// Evaluate `suite` against a transcript. Suites that need the world or
/// the outcome replay the run from the transcript's header and first
/// check that the replay reproduces the transcript.
pub fn verify(t: &Transcript, suite: Suite) -> Result<Vec<InvariantResult>, VerifyError> {
    let config = ScenarioConfig::from_header(&t.header)?;
    let found = config.scenario();
    if let Some(expected) = suite.applies_to() {
        if expected != found {
            return Err(VerifyError::NotApplicable { suite, expected, found });
        }
    }
    let (principals, _) = config.roles();
    let r = InvariantResult::from_violations;
    Ok(match suite {
        Suite::Ordering => {
            let mut v = vec![
                r("seq_monotone", seq_monotone(t)),
                r("channel_first", channel_first(t, &principals)),
            ];
            if found == Scenario::Pos {
                v.push(r("transposition_order", transposition_order(t, &config.pos)));
            }
            v
        }
        Suite::Layering => vec![r("layering", layering(t))],
        Suite::Tamper => vec![r("tamper_completeness", tamper_completeness(&config))],
        Suite::Clone | Suite::Conservation | Suite::Containment => {
            let (run, matches) = replay(t, &config)?;
            let mut v = vec![matches];
            match &run.outcome {
                Outcome::Restriction(o) => v.push(r("clone_soundness", clone_soundness(&run.world, o))),
                Outcome::Prepaid(o) => v.push(r("prepaid_conservation", prepaid_conservation(o))),
                Outcome::Bonding(o) => {
                    v.push(r("bonding_containment", bonding_containment(t, &config.bonding)));
                    v.push(r("subordination_containment", subordination_containment(t, &config.bonding)));
                    v.push(r("revocation_monotone", revocation_monotone(o)));
                }
                Outcome::Pos(_) => unreachable!("checked by applies_to"),
            }
            v
        }
        Suite::Scenario => {
            let (run, matches) = replay(t, &config)?;
            std::iter::once(matches).chain(evaluate(&run)).collect()
        }
    })
}

// ---- matrix ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matrix {
    pub scenario: Scenario,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Matrix {
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.len()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: Vec<&str>| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            padded.join("  ").trim_end().to_string()
        };
        let mut s = format!("# matrix scenario={}\n", self.scenario);
        s.push_str(&line(self.columns.clone()));
        s.push('\n');
        for row in &self.rows {
            s.push_str(&line(row.iter().map(String::as_str).collect()));
            s.push('\n');
        }
        s
    }
}

const POS_TAMPER: &str = "tamper:WrappedTau:0";

/// Cells naming a row, and the config it runs.
fn matrix_cases(base: &ScenarioConfig) -> Vec<(Vec<String>, ScenarioConfig)> {
    let mut honest = base.clone();
    honest.adversary.script.clear();
    let mut cases = Vec::new();
    match base.scenario() {
        Scenario::Restriction => {
            for v in RestrictionVariant::ALL {
                for m in [EnrolmentMode::Independent, EnrolmentMode::PrincipalControlled] {
                    let mut c = base.clone();
                    c.restriction.variant = v;
                    c.restriction.enrolment = m;
                    cases.push((vec![v.to_string(), m.to_string()], c));
                }
            }
        }
        Scenario::Pos => {
            for p in PrivacyMode::ALL {
                for adv in ["honest", POS_TAMPER] {
                    let mut c = honest.clone();
                    c.pos.privacy = p;
                    if adv != "honest" {
                        c.adversary.script = vec![adv.to_string()];
                    }
                    cases.push((vec![p.to_string(), adv.to_string()], c));
                }
            }
        }
        Scenario::Bonding => {
            for v in SubordinationVariant::ALL {
                for case in ["honest", "revoked"] {
                    let mut c = honest.clone();
                    c.bonding.variant = v;
                    c.bonding.revoke_before = (case == "revoked").then_some(0);
                    cases.push((vec![v.to_string(), case.to_string()], c));
                }
            }
        }
        Scenario::Prepaid => {
            for v in RestrictionVariant::ALL {
                for case in ["drift", "honest"] {
                    let mut c = honest.clone();
                    c.prepaid.variant = v;
                    c.prepaid.drift_before = (case == "drift").then_some(0);
                    cases.push((vec![v.to_string(), case.to_string()], c));
                }
            }
        }
    }
    cases.sort_by(|a, b| a.0.cmp(&b.0));
    cases
}

fn matrix_cells(out: &Outcome) -> Vec<String> {
    match out {
        Outcome::Restriction(r) => {
            let other = r
                .decisions
                .iter()
                .find(|(n, _)| *n != r.holder)
                .map_or("-".to_string(), |(_, d)| d.summary());
            vec![r.holder_decision().summary(), other]
        }
        Outcome::Pos(p) => {
            let view: Vec<&str> = p.transposition.a_view_identities.iter().map(String::as_str).collect();
            vec![out.summary(), p.decision.summary(), format!("[{}]", view.join(","))]
        }
        Outcome::Bonding(_) => vec![out.summary()],
        Outcome::Prepaid(p) => vec![
            out.summary(),
            p.final_total.map_or("unreadable".into(), |t| t.to_string()),
        ],
    }
}

/// Run every variant combination of the config's scenario. Rows run on
/// separate threads, each with its own world, and come back sorted by
/// their key cells.
pub fn matrix(base: &ScenarioConfig) -> Result<Matrix, ScenarioError> {
    base.validate()?;
    let cases = matrix_cases(base);
    let results: Vec<Result<Outcome, ScenarioError>> = std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .iter()
            .map(|(_, c)| s.spawn(move || scenarios::run(c).map(|r| r.outcome)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("matrix row panicked"))
            .collect()
    });
    let mut rows = Vec::with_capacity(cases.len());
    for ((keys, _), res) in cases.into_iter().zip(results) {
        let mut row = keys;
        row.extend(matrix_cells(&res?));
        rows.push(row);
    }
    let columns = match base.scenario() {
        Scenario::Restriction => vec!["variant", "enrolment", "holder", "attacker"],
        Scenario::Pos => vec!["privacy", "adversary", "outcome", "decision", "a_view"],
        Scenario::Bonding => vec!["variant", "case", "decisions"],
        Scenario::Prepaid => vec!["variant", "case", "outcome", "final_total"],
    };
    Ok(Matrix {
        scenario: base.scenario(),
        columns,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn honest(s: Scenario) -> ScenarioRun {
        scenarios::run(&ScenarioConfig::new(s)).unwrap()
    }

    #[test]
    fn honest_runs_pass_every_registered_invariant() {
        for s in Scenario::ALL {
            let run = honest(s);
            let results = evaluate(&run);
            let names: Vec<_> = results.iter().map(|r| r.name).collect();
            assert_eq!(names, registered(s));
            for r in &results {
                assert!(r.passed, "{s}: {r}");
            }
        }
    }

    #[test]
    fn swapped_steps_break_ordering() {
        let run = honest(Scenario::Pos);
        let mut t = run.world.fabric.transcript().clone();
        assert!(transposition_order(&t, &run.config.pos).is_empty());
        // move step A (entries 16..27) after step B (27..36)
        let a: Vec<_> = t.entries.drain(16..27).collect();
        t.entries.splice(25..25, a);
        assert!(!transposition_order(&t, &run.config.pos).is_empty());
        let mut c = run.config.pos.clone();
        c.step_order = crate::operations::StepOrder::BThenA;
        assert!(transposition_order(&t, &c).is_empty());
    }

    #[test]
    fn layering_flags_a_skipped_level() {
        let run = honest(Scenario::Pos);
        let mut t = run.world.fabric.transcript().clone();
        assert!(layering(&t).is_empty());
        t.entries.retain(|e| e.kind != MessageKind::QuoteL1);
        assert_eq!(layering(&t).len(), 3, "{:?}", layering(&t));
    }

    #[test]
    fn channel_first_flags_an_early_application_envelope() {
        let run = honest(Scenario::Restriction);
        let mut t = run.world.fabric.transcript().clone();
        t.entries.retain(|e| e.kind != MessageKind::ChannelAccept);
        assert!(!channel_first(&t, &["mno-a"]).is_empty());
    }

    #[test]
    fn conservation_oracle_catches_a_lost_unit() {
        let run = honest(Scenario::Prepaid);
        let Outcome::Prepaid(mut p) = run.outcome else { unreachable!() };
        assert!(prepaid_conservation(&p).is_empty());
        p.final_total = p.final_total.map(|t| t - 1);
        assert!(!prepaid_conservation(&p).is_empty());
    }

    #[test]
    fn report_is_stable_and_lists_invariants() {
        let run = honest(Scenario::Bonding);
        let a = RunReport::new(&run, "out/bonding.transcript").render();
        let b = RunReport::new(&honest(Scenario::Bonding), "out/bonding.transcript").render();
        assert_eq!(a, b);
        assert!(a.starts_with("scenario = bonding\nseed = 42\n"));
        assert!(a.contains("invariant.revocation_monotone = pass"));
    }

    #[test]
    fn verify_rejects_suites_for_other_scenarios() {
        let run = honest(Scenario::Pos);
        let err = verify(run.world.fabric.transcript(), Suite::Conservation).unwrap_err();
        assert!(matches!(err, VerifyError::NotApplicable { .. }));
    }

    #[test]
    fn verify_replays_from_the_header() {
        let run = honest(Scenario::Prepaid);
        let text = run.world.fabric.transcript().render();
        let t = Transcript::parse(&text).unwrap();
        let res = verify(&t, Suite::Conservation).unwrap();
        assert!(res.iter().all(|r| r.passed), "{res:?}");
    }

    #[test]
    fn matrix_shapes() {
        for (s, rows) in [
            (Scenario::Restriction, 4),
            (Scenario::Pos, 4),
            (Scenario::Bonding, 4),
            (Scenario::Prepaid, 4),
        ] {
            let m = matrix(&ScenarioConfig::new(s)).unwrap();
            assert_eq!(m.rows.len(), rows, "{s}");
            assert!(m.rows.iter().all(|r| r.len() == m.columns.len()));
        }
    }
}
