//! Transposition: agent b of principal B is authenticated across the
//! domain of principal A, mediated by A's agent a.
//!
//! Step A establishes trust of a and A in b: b's τ and a γ challenge
//! response travel end to end between b and B, tunneled through a and A.
//! Step B establishes trust of b and B in a: b pledges τ_a to B under a
//! secret X agreed with B, B redeems it at A, and A's acknowledgement comes
//! back to b under Y. Relays forward opaquely.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::channels::{establish, level_challenge, ChannelError, ChannelSpec};
use crate::codec::{DecodeError, Reader, Writer};
use crate::credentials::{EnrolmentMode, TrustCredential};
use crate::crypto::{
    aead_open, aead_seal, dh_derive, dh_keygen, hash, mac, mac_verify, DhPublic, KeyRole, Nonce,
    SharedSecret,
};
use crate::fabric::{MessageKind, SessionId};
use crate::tpm::{AssertionLevel, AttestationQuote, PcrSelection, QuoteRejection};
use crate::wire::{
    plaintext_identities, Attest, AuthAck, AuthRequest, GammaAuth, Protected, TauPresent, TauView, Tunnel,
    WrappedAck, WrappedTau,
};
use crate::world::{Failure, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PrivacyMode {
    /// The pledge and acknowledgement are encrypted under X and Y.
    Encrypted,
    /// Only authenticated; relays can read them.
    MacOnly,
}

impl PrivacyMode {
    pub const ALL: [PrivacyMode; 2] = [PrivacyMode::Encrypted, PrivacyMode::MacOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            PrivacyMode::Encrypted => "encrypted",
            PrivacyMode::MacOnly => "mac_only",
        }
    }
}

impl fmt::Display for PrivacyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrivacyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown privacy mode {s}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StepOrder {
    AThenB,
    BThenA,
}

impl StepOrder {
    pub const ALL: [StepOrder; 2] = [StepOrder::AThenB, StepOrder::BThenA];

    pub fn as_str(self) -> &'static str {
        match self {
            StepOrder::AThenB => "a_then_b",
            StepOrder::BThenA => "b_then_a",
        }
    }
}

impl fmt::Display for StepOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StepOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "a_then_b" => Ok(StepOrder::AThenB),
            "b_then_a" => Ok(StepOrder::BThenA),
            _ => Err(format!("unknown step order {s}")),
        }
    }
}

/// How A re-authenticates a when τ_a is redeemed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SecondaryAuth {
    /// Reuse the γ log-on of the a↔A session.
    SessionEvidence,
    /// Challenge a's γ afresh over the a↔A session.
    FreshChallenge,
}

impl SecondaryAuth {
    pub const ALL: [SecondaryAuth; 2] = [SecondaryAuth::SessionEvidence, SecondaryAuth::FreshChallenge];

    pub fn as_str(self) -> &'static str {
        match self {
            SecondaryAuth::SessionEvidence => "session_evidence",
            SecondaryAuth::FreshChallenge => "fresh_challenge",
        }
    }
}

impl fmt::Display for SecondaryAuth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SecondaryAuth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "session_evidence" => Ok(SecondaryAuth::SessionEvidence),
            "fresh_challenge" => Ok(SecondaryAuth::FreshChallenge),
            _ => Err(format!("unknown secondary authentication {s}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StepFailure {
    AuthenticationFailure,
    Timeout,
    NoAssociation,
    Malformed,
    Replay,
    Unexpected,
    IntegrityMismatch,
    Revoked,
    ChannelRefused,
}

impl StepFailure {
    const ALL: [StepFailure; 9] = [
        StepFailure::AuthenticationFailure,
        StepFailure::Timeout,
        StepFailure::NoAssociation,
        StepFailure::Malformed,
        StepFailure::Replay,
        StepFailure::Unexpected,
        StepFailure::IntegrityMismatch,
        StepFailure::Revoked,
        StepFailure::ChannelRefused,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StepFailure::AuthenticationFailure => "authentication_failure",
            StepFailure::Timeout => "timeout",
            StepFailure::NoAssociation => "no_association",
            StepFailure::Malformed => "malformed",
            StepFailure::Replay => "replay",
            StepFailure::Unexpected => "unexpected",
            StepFailure::IntegrityMismatch => "integrity_mismatch",
            StepFailure::Revoked => "revoked",
            StepFailure::ChannelRefused => "channel_refused",
        }
    }

    /// Verdict byte in acknowledgements; 0 means accepted.
    fn code(self) -> u8 {
        StepFailure::ALL.iter().position(|f| *f == self).unwrap() as u8 + 1
    }

    fn from_code(code: u8) -> Option<Result<(), StepFailure>> {
        match code {
            0 => Some(Ok(())),
            c => StepFailure::ALL.get(c as usize - 1).map(|f| Err(*f)),
        }
    }

    fn from_quote(r: QuoteRejection) -> Self {
        match r {
            QuoteRejection::IntegrityMismatch => StepFailure::IntegrityMismatch,
            QuoteRejection::KeyRevoked => StepFailure::Revoked,
            QuoteRejection::ReplayDetected => StepFailure::Replay,
            QuoteRejection::Malformed => StepFailure::Malformed,
            _ => StepFailure::AuthenticationFailure,
        }
    }
}

impl From<Failure> for StepFailure {
    fn from(f: Failure) -> Self {
        match f {
            Failure::AuthenticationFailure => StepFailure::AuthenticationFailure,
            Failure::Replay => StepFailure::Replay,
            Failure::Timeout => StepFailure::Timeout,
            Failure::Malformed => StepFailure::Malformed,
            Failure::Unexpected => StepFailure::Unexpected,
        }
    }
}

impl From<DecodeError> for StepFailure {
    fn from(_: DecodeError) -> Self {
        StepFailure::Malformed
    }
}

impl fmt::Display for StepFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepResult {
    Accepted,
    Failed(StepFailure),
}

impl StepResult {
    pub fn is_accepted(self) -> bool {
        self == StepResult::Accepted
    }
}

impl fmt::Display for StepResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepResult::Accepted => f.write_str("accepted"),
            StepResult::Failed(r) => write!(f, "failed({r})"),
        }
    }
}

impl From<Result<(), StepFailure>> for StepResult {
    fn from(r: Result<(), StepFailure>) -> Self {
        match r {
            Ok(()) => StepResult::Accepted,
            Err(f) => StepResult::Failed(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranspositionOutcome {
    pub step_a: StepResult,
    pub step_b: StepResult,
    /// Identity fields A could read in plaintext during steps A and B.
    pub a_view_identities: BTreeSet<String>,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranspositionRequest {
    /// A: the mediating principal (network operator).
    pub mno: String,
    /// a: A's agent (phone).
    pub phone: String,
    /// B: the relying principal (POS owner).
    pub owner: String,
    /// b: B's agent (POS).
    pub pos: String,
    pub privacy: PrivacyMode,
    pub order: StepOrder,
    pub secondary: SecondaryAuth,
}

impl TranspositionRequest {
    pub fn new(mno: &str, phone: &str, owner: &str, pos: &str, privacy: PrivacyMode) -> Self {
        TranspositionRequest {
            mno: mno.to_string(),
            phone: phone.to_string(),
            owner: owner.to_string(),
            pos: pos.to_string(),
            privacy,
            order: StepOrder::AThenB,
            secondary: SecondaryAuth::SessionEvidence,
        }
    }
}

/// Sessions the steps travel over.
#[derive(Debug, Clone, Copy)]
struct Links {
    ba: SessionId,
    aa: SessionId,
    ab: SessionId,
}

/// End-to-end sealing between b and B. Each side keeps its own view of the
/// key; a relay that alters the ephemeral key only breaks agreement.
fn e2e_seal(key: &SharedSecret, dir: u8, counter: u64, label: &str, plaintext: &[u8]) -> Vec<u8> {
    aead_seal(key, &Nonce::from_counter(dir, counter), label.as_bytes(), plaintext)
}

fn e2e_open(key: &SharedSecret, dir: u8, counter: u64, label: &str, ct: &[u8]) -> Result<Vec<u8>, StepFailure> {
    aead_open(key, &Nonce::from_counter(dir, counter), label.as_bytes(), ct)
        .map_err(|_| StepFailure::AuthenticationFailure)
}

fn protect(mode: PrivacyMode, key: &SharedSecret, dir: u8, label: &str, body: &[u8]) -> Protected {
    match mode {
        PrivacyMode::Encrypted => Protected::Encrypted(e2e_seal(key, dir, 0, label, body)),
        PrivacyMode::MacOnly => Protected::MacOnly {
            body: body.to_vec(),
            tag: mac(&key.bytes, &[label.as_bytes(), body].concat()),
        },
    }
}

fn unprotect(key: &SharedSecret, dir: u8, label: &str, p: &Protected) -> Result<Vec<u8>, StepFailure> {
    match p {
        Protected::Encrypted(ct) => e2e_open(key, dir, 0, label, ct),
        Protected::MacOnly { body, tag } => {
            if mac_verify(&key.bytes, &[label.as_bytes(), body].concat(), tag) {
                Ok(body.clone())
            } else {
                Err(StepFailure::AuthenticationFailure)
            }
        }
    }
}

/// Blind relay along `hops`; returns the payload as the last receiver
/// sees it and the seq of the final hop.
fn relay(world: &mut World, hops: &[(&str, &str, SessionId)], kind: MessageKind, payload: Vec<u8>) -> Result<(u64, Vec<u8>), Failure> {
    let mut current = payload;
    let mut seq = 0;
    for (from, to, sid) in hops {
        let (s, pt) = world.transfer(from, to, Some(*sid), kind, current, |b| Ok::<_, ()>(b.to_vec()))?;
        seq = s;
        current = pt;
    }
    Ok((seq, current))
}

fn principal_link(world: &mut World, a: &str, b: &str) -> SessionId {
    if let Some(sid) = world.session_between(a, b) {
        return sid;
    }
    let key = SharedSecret {
        bytes: world.rng.bytes32(),
        role: KeyRole::Transport,
    };
    world.open_session(a, b, key.clone(), key)
}

pub fn run_transposition(world: &mut World, req: &TranspositionRequest) -> TranspositionOutcome {
    world.fabric.reset_steps();
    let outcome = transpose(world, req);
    world.drain();
    outcome
}

fn channel_failure(e: &ChannelError) -> StepFailure {
    match e {
        ChannelError::Transport(f) => (*f).into(),
        e if e.is_revocation() => StepFailure::Revoked,
        e if e.quote_rejection() == Some(QuoteRejection::IntegrityMismatch) => StepFailure::IntegrityMismatch,
        _ => StepFailure::ChannelRefused,
    }
}

fn transpose(world: &mut World, req: &TranspositionRequest) -> TranspositionOutcome {
    let links = (|| {
        let (ba, _) = establish(world, &ChannelSpec::new(&req.phone, &req.pos).mutual())?;
        let (aa, _) = establish(world, &ChannelSpec::new(&req.phone, &req.mno).with_gamma_logon())?;
        Ok::<_, ChannelError>((ba, aa))
    })();
    let (ba, aa) = match links {
        Ok(x) => x,
        Err(e) => {
            let f = StepResult::Failed(channel_failure(&e));
            return TranspositionOutcome {
                step_a: f,
                step_b: f,
                a_view_identities: BTreeSet::new(),
                completed: false,
            };
        }
    };
    let links = Links {
        ba,
        aa,
        ab: principal_link(world, &req.mno, &req.owner),
    };

    let view_from = world.plain_log().len();
    let (step_a, step_b) = match req.order {
        StepOrder::AThenB => {
            let a = step_a(world, req, links);
            (a, step_b(world, req, links))
        }
        StepOrder::BThenA => {
            let b = step_b(world, req, links);
            (step_a(world, req, links), b)
        }
    };
    let (step_a, step_b) = (StepResult::from(step_a), StepResult::from(step_b));

    let mno = req.mno.as_str();
    let a_view_identities = world.plain_log()[view_from..]
        .iter()
        .filter(|r| r.from == mno || r.to == mno)
        .filter_map(|r| plaintext_identities(r.kind, &r.plaintext).ok())
        .flatten()
        .collect();
    TranspositionOutcome {
        completed: step_a.is_accepted() && step_b.is_accepted(),
        step_a,
        step_b,
        a_view_identities,
    }
}

fn b_static(world: &World, pos: &str) -> DhPublic {
    world
        .agent(pos)
        .expect("pos exists")
        .principal_dh
        .expect("agents know their principal's key")
}

/// τ of one of `owner`'s agents, checked against the owner's registry.
fn own_tau(world: &World, owner: &str, tau: &TrustCredential) -> Result<u64, StepFailure> {
    let registry = &world.principal(owner).expect("owner exists").registry;
    if tau.mode != EnrolmentMode::PrincipalControlled
        || !tau.verify(&registry.public_key())
        || registry.trust_credentials.get(&tau.tpm_key_id) != Some(tau)
    {
        return Err(StepFailure::AuthenticationFailure);
    }
    registry.associate(tau).ok_or(StepFailure::NoAssociation)
}

const TUNNEL: &str = "transtrust/tunnel";

/// b's tunneled answer to B's γ challenge, with attestation up to level 3
/// over τ_b.
struct TunneledProof {
    serial: u64,
    response: [u8; 32],
    keys: Attest,
    quotes: [AttestationQuote; 3],
}

impl TunneledProof {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.serial).bytes(&self.response);
        self.keys.write(&mut w);
        for q in &self.quotes {
            q.encode(&mut w);
        }
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let serial = r.u64()?;
        let response = r.array32()?;
        let keys = Attest::read(&mut r)?;
        let quotes = [
            AttestationQuote::decode(&mut r)?,
            AttestationQuote::decode(&mut r)?,
            AttestationQuote::decode(&mut r)?,
        ];
        r.finish()?;
        Ok(TunneledProof {
            serial,
            response,
            keys,
            quotes,
        })
    }
}

fn step_a(world: &mut World, req: &TranspositionRequest, links: Links) -> Result<(), StepFailure> {
    let (mno, phone, owner, pos) = (req.mno.as_str(), req.phone.as_str(), req.owner.as_str(), req.pos.as_str());
    let up = [(pos, phone, links.ba), (phone, mno, links.aa), (mno, owner, links.ab)];
    let down = [(owner, mno, links.ab), (mno, phone, links.aa), (phone, pos, links.ba)];

    // b → B: τ_b under a tunnel keyed by b's ephemeral and B's static key
    let (eph_secret, eph_public) = dh_keygen(&mut world.rng);
    let b_key = dh_derive(&eph_secret, &b_static(world, pos))
        .map_err(|_| StepFailure::AuthenticationFailure)?
        .subkey(KeyRole::Transport);
    let tau_b = world
        .agent(pos)
        .expect("pos exists")
        .tau
        .clone()
        .ok_or(StepFailure::NoAssociation)?;
    let present = TauPresent::Tunneled(Tunnel {
        ephemeral: Some(eph_public),
        ciphertext: e2e_seal(&b_key, 0, 0, TUNNEL, &tau_b.to_bytes()),
    });
    let (seq, bytes) = relay(world, &up, MessageKind::TauPresent, present.encode())?;
    let opened = (|| {
        let eph = match TauPresent::decode(&bytes)? {
            TauPresent::Tunneled(Tunnel {
                ephemeral: Some(e),
                ciphertext,
            }) => (e, ciphertext),
            _ => return Err(StepFailure::Malformed),
        };
        let owner_state = world.principal(owner).expect("owner exists");
        let key = dh_derive(owner_state.dh_secret(), &eph.0)
            .map_err(|_| StepFailure::AuthenticationFailure)?
            .subkey(KeyRole::Transport);
        let tau = TrustCredential::from_bytes(&e2e_open(&key, 0, 0, TUNNEL, &eph.1)?)?;
        let serial = own_tau(world, owner, &tau)?;
        Ok((key, tau, serial))
    })();
    let (big_b_key, tau_seen, serial) = opened.inspect_err(|_| world.reject(seq))?;

    // B → b: γ challenge, tunneled back
    let challenge = world.rng.nonce();
    let request = AuthRequest::Tunneled(Tunnel {
        ephemeral: None,
        ciphertext: e2e_seal(&big_b_key, 1, 0, TUNNEL, &challenge.0),
    });
    let (seq, bytes) = relay(world, &down, MessageKind::AuthRequest, request.encode())?;
    let received = (|| match AuthRequest::decode(&bytes)? {
        AuthRequest::Tunneled(t) => {
            let pt = e2e_open(&b_key, 1, 0, TUNNEL, &t.ciphertext)?;
            let n: [u8; 12] = pt.try_into().map_err(|_| StepFailure::Malformed)?;
            Ok(Nonce(n))
        }
        _ => Err(StepFailure::Malformed),
    })()
    .inspect_err(|_| world.reject(seq))?;

    // b → B: γ response plus attestation of levels 1-3 over τ_b
    let agent = world.agent(pos).expect("pos exists");
    let gamma = agent.gamma.clone().ok_or(StepFailure::NoAssociation)?;
    let tpm = &agent.tpm;
    let aik = agent.platform_aik;
    let refusal = |e: crate::tpm::TpmError| match e {
        crate::tpm::TpmError::KeyRevoked => StepFailure::Revoked,
        _ => StepFailure::ChannelRefused,
    };
    let quotes = [
        tpm.ek_prove_liveness(&level_challenge(&received, AssertionLevel::Liveness)),
        tpm.quote_system_state(&level_challenge(&received, AssertionLevel::SystemIntegrity), PcrSelection::ALL, &aik)
            .map_err(refusal)?,
        tpm.attest_credential(
            &tau_b.to_bytes(),
            &level_challenge(&received, AssertionLevel::CredentialIntegrity),
            PcrSelection::ALL,
            &aik,
            Some(AssertionLevel::SystemIntegrity),
        )
        .map_err(refusal)?,
    ];
    let proof = TunneledProof {
        serial: gamma.serial,
        response: gamma.respond(&received),
        keys: agent.attest_keys(),
        quotes,
    };
    let auth = GammaAuth::Tunneled(Tunnel {
        ephemeral: None,
        ciphertext: e2e_seal(&b_key, 0, 1, TUNNEL, &proof.encode()),
    });
    let (seq, bytes) = relay(world, &up, MessageKind::GammaAuth, auth.encode())?;
    let verdict = (|| {
        let proof = match GammaAuth::decode(&bytes)? {
            GammaAuth::Tunneled(t) => TunneledProof::decode(&e2e_open(&big_b_key, 0, 1, TUNNEL, &t.ciphertext)?)?,
            _ => return Err(StepFailure::Malformed),
        };
        let registry = &world.principal(owner).expect("owner exists").registry;
        if proof.serial != serial || !registry.check_response(serial, &challenge, &proof.response) {
            return Err(StepFailure::AuthenticationFailure);
        }
        if proof.keys.attestation.public.key_id() != tau_seen.tpm_key_id {
            return Err(StepFailure::AuthenticationFailure);
        }
        let cred = hash(&tau_seen.to_bytes());
        let mut accepted = None;
        for (q, level) in proof.quotes.iter().zip([
            AssertionLevel::Liveness,
            AssertionLevel::SystemIntegrity,
            AssertionLevel::CredentialIntegrity,
        ]) {
            let signer = if level == AssertionLevel::Liveness {
                &proof.keys.endorsement
            } else {
                &proof.keys.attestation
            };
            let credential = (level == AssertionLevel::CredentialIntegrity).then_some(&cred);
            if q.level != level {
                return Err(StepFailure::Malformed);
            }
            world
                .check_quote(owner, pos, q, signer, level_challenge(&challenge, level), credential, accepted)
                .map_err(StepFailure::from_quote)?;
            accepted = Some(level);
        }
        Ok(())
    })();
    if verdict.is_err() {
        world.reject(seq);
    }

    // B acknowledges to A, A passes it on to a
    let code = match verdict {
        Ok(()) => 0,
        Err(f) => f.code(),
    };
    let ack = AuthAck {
        step: 1,
        verdict: code,
        subject_key: None,
    };
    let (_, ack) = world.transfer(owner, mno, Some(links.ab), MessageKind::AuthAck, ack.encode(), AuthAck::decode)?;
    let passed = AuthAck {
        step: 1,
        verdict: ack.verdict,
        subject_key: None,
    };
    let (seq, ack) = world.transfer(mno, phone, Some(links.aa), MessageKind::AuthAck, passed.encode(), AuthAck::decode)?;
    match StepFailure::from_code(ack.verdict) {
        Some(r) => r,
        None => {
            world.reject(seq);
            Err(StepFailure::Malformed)
        }
    }
}

const PLEDGE: &str = "transtrust/pledge";
const ACK: &str = "transtrust/ack";

fn pledge_signed_bytes(ephemeral: &DhPublic) -> Vec<u8> {
    [PLEDGE.as_bytes(), &ephemeral.0].concat()
}

fn step_b(world: &mut World, req: &TranspositionRequest, links: Links) -> Result<(), StepFailure> {
    let (mno, phone, owner, pos) = (req.mno.as_str(), req.phone.as_str(), req.owner.as_str(), req.pos.as_str());
    let up = [(pos, phone, links.ba), (phone, mno, links.aa), (mno, owner, links.ab)];
    let down = [(owner, mno, links.ab), (mno, phone, links.aa), (phone, pos, links.ba)];

    // a → b: τ_a in the mutually attested session
    let tau_a = world
        .agent(phone)
        .expect("phone exists")
        .tau
        .clone()
        .ok_or(StepFailure::NoAssociation)?;
    let present = TauPresent::Plain {
        tau: tau_a,
        group_proof: None,
    };
    let (seq, present) = world.transfer(phone, pos, Some(links.ba), MessageKind::TauPresent, present.encode(), TauPresent::decode)?;
    let tau_a = match present {
        TauPresent::Plain { tau, .. } => tau,
        TauPresent::Tunneled(_) => {
            world.reject(seq);
            return Err(StepFailure::Malformed);
        }
    };

    // b → B: X(τ_a), X and Y from a DH run signed by b's attestation key
    let (eph_secret, eph_public) = dh_keygen(&mut world.rng);
    let agreed = dh_derive(&eph_secret, &b_static(world, pos)).map_err(|_| StepFailure::AuthenticationFailure)?;
    let (x_b, y_b) = (agreed.subkey(KeyRole::X), agreed.subkey(KeyRole::Y));
    let agent = world.agent(pos).expect("pos exists");
    let signer = agent.presented_key(&agent.platform_aik).expect("platform key exists");
    let ephemeral_sig = agent
        .tpm
        .attestation_key(&agent.platform_aik)
        .expect("platform key exists")
        .keypair
        .sign(&pledge_signed_bytes(&eph_public));
    let wrapped = WrappedTau {
        ephemeral: eph_public,
        signer,
        ephemeral_sig,
        body: protect(req.privacy, &x_b, 0, PLEDGE, &tau_a.to_bytes()),
    };
    let (seq, bytes) = relay(world, &up, MessageKind::WrappedTau, wrapped.encode())?;
    let redeemed = (|| {
        let wrapped = WrappedTau::decode(&bytes)?;
        let maker = world.manufacturer.public();
        let registry = &world.principal(owner).expect("owner exists").registry;
        let key_id = wrapped.signer.public.key_id();
        let signer_ok = wrapped.signer.cert.subject_key == wrapped.signer.public
            && wrapped.signer.cert.verify(&maker)
            && registry.trust_credentials.contains_key(&key_id)
            && !world.revocations.contains(&key_id)
            && crate::crypto::verify(&wrapped.signer.public, &pledge_signed_bytes(&wrapped.ephemeral), &wrapped.ephemeral_sig);
        if !signer_ok {
            return Err(StepFailure::AuthenticationFailure);
        }
        let owner_state = world.principal(owner).expect("owner exists");
        let agreed = dh_derive(owner_state.dh_secret(), &wrapped.ephemeral).map_err(|_| StepFailure::AuthenticationFailure)?;
        let tau = TrustCredential::from_bytes(&unprotect(&agreed.subkey(KeyRole::X), 0, PLEDGE, &wrapped.body)?)?;
        Ok((tau, agreed.subkey(KeyRole::Y)))
    })();
    let (tau_a, y_big_b) = redeemed.inspect_err(|_| world.reject(seq))?;

    // B → A: redeem the pledge
    let view = match req.privacy {
        PrivacyMode::Encrypted => TauView::Redacted {
            tpm_key_id: tau_a.tpm_key_id,
        },
        PrivacyMode::MacOnly => TauView::Full(tau_a.clone()),
    };
    let (seq, redeem) = world.transfer(owner, mno, Some(links.ab), MessageKind::AuthRequest, AuthRequest::Redeem(view).encode(), AuthRequest::decode)?;
    let resolved = match redeem {
        AuthRequest::Redeem(TauView::Full(t)) => Some(t),
        AuthRequest::Redeem(TauView::Redacted { tpm_key_id }) => world
            .principal(mno)
            .expect("mno exists")
            .registry
            .trust_credentials
            .get(&tpm_key_id)
            .cloned(),
        _ => None,
    };
    let Some(tau) = resolved else {
        world.reject(seq);
        return Err(StepFailure::Malformed);
    };
    let verdict = redeem_at_mno(world, req, links, &tau);

    // A → B: identity acknowledgement; B → b: Y(ack)
    let ack = AuthAck {
        step: 2,
        verdict: match verdict {
            Ok(()) => 0,
            Err(f) => f.code(),
        },
        subject_key: Some(tau.tpm_key_id),
    };
    let (_, ack) = world.transfer(mno, owner, Some(links.ab), MessageKind::AuthAck, ack.encode(), AuthAck::decode)?;
    let body = AuthAck {
        step: 2,
        verdict: ack.verdict,
        subject_key: ack.subject_key,
    }
    .encode();
    let wrapped = WrappedAck {
        body: protect(req.privacy, &y_big_b, 1, ACK, &body),
    };
    let (seq, bytes) = relay(world, &down, MessageKind::WrappedAck, wrapped.encode())?;
    let result = (|| {
        let wrapped = WrappedAck::decode(&bytes)?;
        let ack = AuthAck::decode(&unprotect(&y_b, 1, ACK, &wrapped.body)?)?;
        if ack.subject_key != Some(tau_a.tpm_key_id) {
            return Err(StepFailure::AuthenticationFailure);
        }
        StepFailure::from_code(ack.verdict).ok_or(StepFailure::Malformed)
    })();
    match result {
        Ok(r) => r,
        Err(f) => {
            world.reject(seq);
            Err(f)
        }
    }
}

/// A: associate τ_a with a γ serial and authenticate a by that γ.
fn redeem_at_mno(world: &mut World, req: &TranspositionRequest, links: Links, tau: &TrustCredential) -> Result<(), StepFailure> {
    let registry = &world.principal(&req.mno).expect("mno exists").registry;
    let issuer = match tau.mode {
        EnrolmentMode::PrincipalControlled => registry.public_key(),
        EnrolmentMode::Independent => world.manufacturer.public(),
    };
    if !tau.verify(&issuer) || registry.trust_credentials.get(&tau.tpm_key_id) != Some(tau) {
        return Err(StepFailure::AuthenticationFailure);
    }
    let serial = registry.associate(tau).ok_or(StepFailure::NoAssociation)?;
    match req.secondary {
        SecondaryAuth::SessionEvidence => {
            let logged_on = world.session(links.aa).and_then(|s| s.gamma_serial);
            if logged_on == Some(serial) {
                Ok(())
            } else {
                Err(StepFailure::NoAssociation)
            }
        }
        SecondaryAuth::FreshChallenge => {
            let (mno, phone) = (req.mno.as_str(), req.phone.as_str());
            let challenge = world.rng.nonce();
            let ask = AuthRequest::Tunneled(Tunnel {
                ephemeral: None,
                ciphertext: challenge.0.to_vec(),
            });
            let (_, ask) = world.transfer(mno, phone, Some(links.aa), MessageKind::AuthRequest, ask.encode(), AuthRequest::decode)?;
            let received = match ask {
                AuthRequest::Tunneled(t) => Nonce(t.ciphertext.try_into().map_err(|_| StepFailure::Malformed)?),
                _ => return Err(StepFailure::Malformed),
            };
            let gamma = world.agent(phone).expect("phone exists").gamma.clone().ok_or(StepFailure::NoAssociation)?;
            let auth = GammaAuth::Direct {
                serial: gamma.serial,
                response: gamma.respond(&received),
            };
            let (seq, auth) = world.transfer(phone, mno, Some(links.aa), MessageKind::GammaAuth, auth.encode(), GammaAuth::decode)?;
            let registry = &world.principal(mno).expect("mno exists").registry;
            match auth {
                GammaAuth::Direct { serial: s, response } if s == serial && registry.check_response(s, &challenge, &response) => Ok(()),
                _ => {
                    world.reject(seq);
                    Err(StepFailure::NoAssociation)
                }
            }
        }
    }
}

/// Kinds of the honest a-then-b run, in order.
pub fn pinned_sequence() -> Vec<MessageKind> {
    use MessageKind::*;
    let mut v = vec![ChannelHello, ChannelHello];
    v.extend([ChannelAttest, QuoteL1, QuoteL2, ChannelAttest, QuoteL1, QuoteL2, ChannelAccept]);
    v.extend([ChannelHello, ChannelHello, GammaAuth, ChannelAttest, QuoteL1, QuoteL2, ChannelAccept]);
    // step A
    v.extend([TauPresent; 3]);
    v.extend([AuthRequest; 3]);
    v.extend([GammaAuth; 3]);
    v.extend([AuthAck; 2]);
    // step B
    v.push(TauPresent);
    v.extend([WrappedTau; 3]);
    v.push(AuthRequest);
    v.push(AuthAck);
    v.extend([WrappedAck; 3]);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::Status;

    pub(crate) fn world(rules: &[&str]) -> World {
        let mut w = World::new(42, rules.iter().map(|r| r.parse().unwrap()).collect());
        w.add_principal("mno-a").unwrap();
        w.add_principal("owner-b").unwrap();
        w.add_agent("phone-a", "mno-a").unwrap();
        w.add_agent("pos-b", "owner-b").unwrap();
        for a in ["phone-a", "pos-b"] {
            w.issue_gamma(a).unwrap();
            w.enroll_tau(a, EnrolmentMode::PrincipalControlled).unwrap();
        }
        w.publish_reference("phone-a", "pos-b").unwrap();
        w.publish_reference("pos-b", "phone-a").unwrap();
        w
    }

    fn req(privacy: PrivacyMode) -> TranspositionRequest {
        TranspositionRequest::new("mno-a", "phone-a", "owner-b", "pos-b", privacy)
    }

    #[test]
    fn honest_run_completes_with_pinned_sequence() {
        for p in PrivacyMode::ALL {
            let mut w = world(&[]);
            let out = run_transposition(&mut w, &req(p));
            assert!(out.completed, "{p}: {out:?}");
            assert_eq!(w.fabric.transcript().kinds(), pinned_sequence());
            assert!(w.fabric.transcript().entries.iter().all(|e| e.status == Status::Accepted));
        }
    }

    #[test]
    fn privacy_modes_differ_exactly_in_the_pledged_subject() {
        let mut w = world(&[]);
        let enc = run_transposition(&mut w, &req(PrivacyMode::Encrypted)).a_view_identities;
        let mut w = world(&[]);
        let mac = run_transposition(&mut w, &req(PrivacyMode::MacOnly)).a_view_identities;
        assert!(enc.is_empty(), "{enc:?}");
        assert_eq!(mac, ["phone-a".to_string()].into());
    }

    #[test]
    fn forged_pledge_at_relay_fails_step_b_only() {
        let mut w = world(&["forge:WrappedTau:1"]);
        let out = run_transposition(&mut w, &req(PrivacyMode::Encrypted));
        assert_eq!(out.step_a, StepResult::Accepted);
        assert_eq!(out.step_b, StepResult::Failed(StepFailure::AuthenticationFailure));
        assert!(!out.completed);
    }

    #[test]
    fn tampered_pledge_is_authentication_failure() {
        let mut w = world(&["tamper:WrappedTau:2"]);
        let out = run_transposition(&mut w, &req(PrivacyMode::MacOnly));
        assert_eq!(out.step_b, StepResult::Failed(StepFailure::AuthenticationFailure));
    }

    #[test]
    fn dropped_step_a_ack_times_out() {
        let mut w = world(&["drop:AuthAck:0"]);
        let out = run_transposition(&mut w, &req(PrivacyMode::Encrypted));
        assert_eq!(out.step_a, StepResult::Failed(StepFailure::Timeout));
        assert_eq!(out.step_b, StepResult::Accepted);
        assert!(!out.completed);
    }

    #[test]
    fn unlinked_phone_fails_step_b_with_no_association() {
        let mut w = World::new(42, vec![]);
        w.add_principal("mno-a").unwrap();
        w.add_principal("owner-b").unwrap();
        w.add_agent("phone-a", "mno-a").unwrap();
        w.add_agent("pos-b", "owner-b").unwrap();
        w.issue_gamma("phone-a").unwrap();
        w.enroll_tau("phone-a", EnrolmentMode::Independent).unwrap();
        w.issue_gamma("pos-b").unwrap();
        w.enroll_tau("pos-b", EnrolmentMode::PrincipalControlled).unwrap();
        w.publish_reference("phone-a", "pos-b").unwrap();
        w.publish_reference("pos-b", "phone-a").unwrap();
        let out = run_transposition(&mut w, &req(PrivacyMode::MacOnly));
        assert_eq!(out.step_a, StepResult::Accepted);
        assert_eq!(out.step_b, StepResult::Failed(StepFailure::NoAssociation));
    }

    #[test]
    fn fresh_challenge_secondary_auth_completes() {
        let mut w = world(&[]);
        let mut r = req(PrivacyMode::Encrypted);
        r.secondary = SecondaryAuth::FreshChallenge;
        assert!(run_transposition(&mut w, &r).completed);
    }

    #[test]
    fn swapped_steps_complete() {
        let mut w = world(&[]);
        let mut r = req(PrivacyMode::Encrypted);
        r.order = StepOrder::BThenA;
        assert!(run_transposition(&mut w, &r).completed);
    }

    #[test]
    fn step_failure_codes_round_trip() {
        for f in StepFailure::ALL {
            assert_eq!(StepFailure::from_code(f.code()), Some(Err(f)));
        }
        assert_eq!(StepFailure::from_code(0), Some(Ok(())));
        assert_eq!(StepFailure::from_code(200), None);
    }
}
