//! A simulated world: principals, agents with TPMs, sessions and the fabric
//! that connects them. Protocol engines drive it one envelope at a time.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::codec::Writer;
use crate::credentials::{
    clone_credential, ActorId, CredentialError, DomainCredential, DomainRegistry, EnrolmentMode,
    SubordinationCredential, TrustCredential,
};
use crate::crypto::{
    aead_open, dh_keygen, hash, DhPublic, DhSecret, Digest, Nonce, NonceLedger, SharedSecret, SimRng,
};
use crate::fabric::{AdversaryRule, Delivery, Envelope, Fabric, MessageKind, SessionId};
use crate::tpm::{
    AssertionLevel, AttestationQuote, Authority, PcrSelection, PresentedKey, QuoteRejection, QuoteVerifier, TpmError,
    TpmState,
};
use crate::wire::{Attest, QuoteMsg};

/// Why an awaited envelope never arrived intact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Error)]
pub enum Failure {
    #[error("authentication failure")]
    AuthenticationFailure,
    #[error("replayed or out-of-order envelope")]
    Replay,
    #[error("timeout")]
    Timeout,
    #[error("malformed payload")]
    Malformed,
    #[error("unexpected envelope")]
    Unexpected,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("no actor named {0}")]
    UnknownActor(String),
    #[error("{0} is not an agent")]
    NotAnAgent(String),
    #[error("{0} is not a principal")]
    NotAPrincipal(String),
    #[error("actor name {0} already taken")]
    DuplicateActor(String),
    #[error("credential: {0}")]
    Credential(#[from] CredentialError),
    #[error("tpm: {0}")]
    Tpm(#[from] TpmError),
}

#[derive(Debug, Clone)]
pub struct PrincipalState {
    pub id: ActorId,
    pub registry: DomainRegistry,
    dh_secret: DhSecret,
    pub dh_public: DhPublic,
    pub verifier: QuoteVerifier,
}

impl PrincipalState {
    pub fn dh_secret(&self) -> &DhSecret {
        &self.dh_secret
    }
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub id: ActorId,
    pub tpm: TpmState,
    /// Attestation key used for channel attestation and as τ.
    pub platform_aik: Digest,
    pub gamma: Option<DomainCredential>,
    pub tau: Option<TrustCredential>,
    pub sigma: Option<SubordinationCredential>,
    /// Sealed slot holding the subgroup secret, if distributed.
    pub group_slot: Option<u32>,
    pub verifier: QuoteVerifier,
    /// Known-good platform digests of peers this agent verifies.
    pub references: BTreeMap<String, Digest>,
    /// Static agreement key of the owning principal.
    pub principal_dh: Option<DhPublic>,
}

impl AgentState {
    pub fn attest_keys(&self) -> Attest {
        let (public, cert) = self.tpm.endorsement_public();
        let aik = self
            .tpm
            .attestation_key(&self.platform_aik)
            .expect("platform aik exists");
        Attest {
            endorsement: PresentedKey {
                public,
                cert: cert.clone(),
            },
            attestation: PresentedKey {
                public: aik.keypair.public,
                cert: aik.cert.clone(),
            },
        }
    }

    pub fn presented_key(&self, aik: &Digest) -> Option<PresentedKey> {
        self.tpm.attestation_key(aik).map(|k| PresentedKey {
            public: k.keypair.public,
            cert: k.cert.clone(),
        })
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Actor {
    Principal(PrincipalState),
    Agent(AgentState),
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: SessionId,
    pub endpoints: (String, String),
    /// Each endpoint's view of the transport key; equal unless the
    /// handshake was tampered with.
    keys: BTreeMap<String, SharedSecret>,
    pub evidence: BTreeMap<String, AssertionLevel>,
    /// Every accepted assertion, in order, per attesting endpoint.
    pub evidence_history: Vec<(String, AssertionLevel)>,
    /// Attestation key each endpoint's level-2 quote was signed with.
    pub attested_keys: BTreeMap<String, Digest>,
    /// γ serial the responder authenticated at log-on.
    pub gamma_serial: Option<u64>,
    send: [u64; 2],
    recv: [u64; 2],
    ledger: NonceLedger,
}

impl Session {
    fn direction(&self, from: &str) -> u8 {
        u8::from(from != self.endpoints.0)
    }

    fn aad(&self, from: &str, to: &str, kind: MessageKind) -> Vec<u8> {
        Writer::new()
            .u64(self.id)
            .str(from)
            .str(to)
            .str(kind.as_str())
            .finish()
    }

    pub fn peer_of(&self, name: &str) -> &str {
        if self.endpoints.0 == name {
            &self.endpoints.1
        } else {
            &self.endpoints.0
        }
    }

    pub fn key_of(&self, endpoint: &str) -> Option<&SharedSecret> {
        self.keys.get(endpoint)
    }

    pub fn keys_agree(&self) -> bool {
        let mut it = self.keys.values();
        match (it.next(), it.next()) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }

    fn seal(&mut self, from: &str, to: &str, kind: MessageKind, plaintext: &[u8]) -> Vec<u8> {
        let dir = self.direction(from);
        let counter = self.send[dir as usize];
        self.send[dir as usize] += 1;
        let nonce = Nonce::from_counter(dir, counter);
        let aad = self.aad(from, to, kind);
        let key = self.keys.get(from).expect("sender is an endpoint").clone();
        let ct = self
            .ledger
            .seal(&key, &nonce, &aad, plaintext)
            .expect("per-direction counters never repeat");
        let mut out = counter.to_be_bytes().to_vec();
        out.extend_from_slice(&ct);
        out
    }

    /// Open without committing the receive counter. Counters must strictly
    /// increase per direction; gaps left by lost envelopes are allowed.
    fn open(&self, env: &Envelope) -> Result<(u64, Vec<u8>), Failure> {
        let key = self.keys.get(&env.to).ok_or(Failure::Unexpected)?;
        if env.payload.len() < 8 {
            return Err(Failure::Malformed);
        }
        let (ctr, ct) = env.payload.split_at(8);
        let counter = u64::from_be_bytes(ctr.try_into().unwrap());
        let dir = self.direction(&env.from);
        if counter < self.recv[dir as usize] {
            return Err(Failure::Replay);
        }
        let nonce = Nonce::from_counter(dir, counter);
        aead_open(key, &nonce, &self.aad(&env.from, &env.to, env.kind), ct)
            .map(|pt| (counter, pt))
            .map_err(|_| Failure::AuthenticationFailure)
    }

    fn commit(&mut self, env: &Envelope, counter: u64) {
        let dir = self.direction(&env.from);
        self.recv[dir as usize] = counter + 1;
    }

    pub fn level(&self, endpoint: &str) -> Option<AssertionLevel> {
        self.evidence.get(endpoint).copied()
    }

    fn raise(&mut self, endpoint: &str, level: AssertionLevel) {
        self.evidence_history.push((endpoint.to_string(), level));
        let e = self.evidence.entry(endpoint.to_string()).or_insert(level);
        if level > *e {
            *e = level;
        }
    }
}

/// What a party saw in plaintext: the sender's composed payload, which the
/// receiver reads after opening the hop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlainRecord {
    pub seq: u64,
    pub from: String,
    pub to: String,
    pub kind: MessageKind,
    pub session: Option<SessionId>,
    pub plaintext: Vec<u8>,
}

/// Measurements every honest device of the simulated model boots with.
pub const BOOT_CHAIN: [(usize, &str); 4] = [
    (0, "firmware:v1"),
    (1, "bootloader:v1"),
    (2, "kernel:v1"),
    (3, "trusted-apps:v1"),
];

#[derive(Debug, Clone)]
pub struct World {
    pub seed: u64,
    pub rng: SimRng,
    pub manufacturer: Authority,
    actors: BTreeMap<String, Actor>,
    pub fabric: Fabric,
    sessions: BTreeMap<SessionId, Session>,
    pair_sessions: BTreeMap<(String, String), SessionId>,
    next_session: SessionId,
    /// Published revocation list every verifier consults.
    pub revocations: BTreeSet<Digest>,
    plain_log: Vec<PlainRecord>,
    wire_log: Vec<(u64, Vec<u8>)>,
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl World {
    pub fn new(seed: u64, rules: Vec<AdversaryRule>) -> Self {
        let mut rng = SimRng::from_seed(seed);
        let manufacturer = Authority::new("manufacturer", &mut rng);
        World {
            seed,
            rng,
            manufacturer,
            actors: BTreeMap::new(),
            fabric: Fabric::new(seed, rules),
            sessions: BTreeMap::new(),
            pair_sessions: BTreeMap::new(),
            next_session: 1,
            revocations: BTreeSet::new(),
            plain_log: Vec::new(),
            wire_log: Vec::new(),
        }
    }

    // ---- setup ----

    fn claim_name(&self, name: &str) -> Result<(), WorldError> {
        if self.actors.contains_key(name) {
            return Err(WorldError::DuplicateActor(name.to_string()));
        }
        Ok(())
    }

    pub fn add_principal(&mut self, name: &str) -> Result<ActorId, WorldError> {
        self.claim_name(name)?;
        let id = ActorId::principal(name);
        let registry = DomainRegistry::new(id.clone(), &mut self.rng);
        let (dh_secret, dh_public) = dh_keygen(&mut self.rng);
        self.actors.insert(
            name.to_string(),
            Actor::Principal(PrincipalState {
                id: id.clone(),
                registry,
                dh_secret,
                dh_public,
                verifier: QuoteVerifier::new(),
            }),
        );
        Ok(id)
    }

    /// A device with a fresh TPM, booted through [`BOOT_CHAIN`], holding one
    /// manufacturer-certified platform attestation key.
    pub fn add_agent(&mut self, name: &str, domain: &str) -> Result<ActorId, WorldError> {
        self.claim_name(name)?;
        let principal_dh = self.principal(domain)?.dh_public;
        let id = ActorId::agent(name, domain);
        let mut tpm = TpmState::create(&mut self.rng, &self.manufacturer);
        for (pcr, m) in BOOT_CHAIN {
            tpm.pcr_extend(pcr, hash(m.as_bytes()))?;
        }
        let platform_aik = tpm.create_attestation_key(&mut self.rng, &self.manufacturer);
        self.actors.insert(
            name.to_string(),
            Actor::Agent(AgentState {
                id: id.clone(),
                tpm,
                platform_aik,
                gamma: None,
                tau: None,
                sigma: None,
                group_slot: None,
                verifier: QuoteVerifier::new(),
                references: BTreeMap::new(),
                principal_dh: Some(principal_dh),
            }),
        );
        Ok(id)
    }

    pub fn actor(&self, name: &str) -> Result<&Actor, WorldError> {
        self.actors
            .get(name)
            .ok_or_else(|| WorldError::UnknownActor(name.to_string()))
    }

    pub fn actors(&self) -> impl Iterator<Item = &Actor> {
        self.actors.values()
    }

    pub fn agent(&self, name: &str) -> Result<&AgentState, WorldError> {
        match self.actor(name)? {
            Actor::Agent(a) => Ok(a),
            Actor::Principal(_) => Err(WorldError::NotAnAgent(name.to_string())),
        }
    }

    pub fn agent_mut(&mut self, name: &str) -> Result<&mut AgentState, WorldError> {
        match self.actors.get_mut(name) {
            Some(Actor::Agent(a)) => Ok(a),
            Some(Actor::Principal(_)) => Err(WorldError::NotAnAgent(name.to_string())),
            None => Err(WorldError::UnknownActor(name.to_string())),
        }
    }

    pub fn principal(&self, name: &str) -> Result<&PrincipalState, WorldError> {
        match self.actor(name)? {
            Actor::Principal(p) => Ok(p),
            Actor::Agent(_) => Err(WorldError::NotAPrincipal(name.to_string())),
        }
    }

    pub fn principal_mut(&mut self, name: &str) -> Result<&mut PrincipalState, WorldError> {
        match self.actors.get_mut(name) {
            Some(Actor::Principal(p)) => Ok(p),
            Some(Actor::Agent(_)) => Err(WorldError::NotAPrincipal(name.to_string())),
            None => Err(WorldError::UnknownActor(name.to_string())),
        }
    }

    fn domain_of(&self, agent: &str) -> Result<String, WorldError> {
        Ok(self
            .agent(agent)?
            .id
            .domain
            .clone()
            .expect("agents always carry a domain"))
    }

    /// Temporarily take an actor out of the map so that it and the world
    /// RNG can be borrowed together.
    fn with_principal<T>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut PrincipalState, &mut SimRng, &Authority, Option<&mut AgentState>) -> T,
        agent: Option<&str>,
    ) -> Result<T, WorldError> {
        let mut p = match self.actors.remove(name) {
            Some(Actor::Principal(p)) => p,
            Some(other) => {
                self.actors.insert(name.to_string(), other);
                return Err(WorldError::NotAPrincipal(name.to_string()));
            }
            None => return Err(WorldError::UnknownActor(name.to_string())),
        };
        let mut taken = match agent {
            Some(a) => match self.actors.remove(a) {
                Some(Actor::Agent(x)) => Some(x),
                Some(other) => {
                    self.actors.insert(a.to_string(), other);
                    self.actors.insert(name.to_string(), Actor::Principal(p));
                    return Err(WorldError::NotAnAgent(a.to_string()));
                }
                None => {
                    self.actors.insert(name.to_string(), Actor::Principal(p));
                    return Err(WorldError::UnknownActor(a.to_string()));
                }
            },
            None => None,
        };
        let out = f(&mut p, &mut self.rng, &self.manufacturer, taken.as_mut());
        if let (Some(a), Some(x)) = (agent, taken) {
            self.actors.insert(a.to_string(), Actor::Agent(x));
        }
        self.actors.insert(name.to_string(), Actor::Principal(p));
        Ok(out)
    }

    pub fn issue_gamma(&mut self, agent: &str) -> Result<DomainCredential, WorldError> {
        let domain = self.domain_of(agent)?;
        let id = self.agent(agent)?.id.clone();
        let gamma = self.with_principal(
            &domain,
            |p, rng, _, _| p.registry.issue_domain_credential(&id, rng),
            None,
        )??;
        self.agent_mut(agent)?.gamma = Some(gamma.clone());
        Ok(gamma)
    }

    pub fn enroll_tau(&mut self, agent: &str, mode: EnrolmentMode) -> Result<TrustCredential, WorldError> {
        let domain = self.domain_of(agent)?;
        let tau = self.with_principal(
            &domain,
            |p, _, maker, a| {
                let a = a.expect("agent taken");
                p.registry
                    .enroll_trust_credential(&a.tpm, &a.platform_aik, &a.id, mode, maker)
            },
            Some(agent),
        )??;
        self.agent_mut(agent)?.tau = Some(tau.clone());
        Ok(tau)
    }

    pub fn distribute_group_secret(&mut self, agent: &str, slot: u32) -> Result<(), WorldError> {
        let domain = self.domain_of(agent)?;
        self.with_principal(
            &domain,
            |p, rng, _, a| {
                p.registry
                    .distribute_group_secret(&mut a.expect("agent taken").tpm, slot, rng)
            },
            Some(agent),
        )??;
        self.agent_mut(agent)?.group_slot = Some(slot);
        Ok(())
    }

    /// Issue a σ from `issuer` to `holder`. A dedicated backing creates a
    /// fresh attestation key on the holder and seals a dedicated γ in `slot`.
    pub fn issue_sigma(
        &mut self,
        issuer: &str,
        holder: &str,
        scope: crate::credentials::SubordinationScope,
        services: &[&str],
        dedicated_slot: Option<u32>,
    ) -> Result<SubordinationCredential, WorldError> {
        use crate::credentials::{BackingRequest, DedicatedBacking};
        let sigma = self.with_principal(
            issuer,
            |p, rng, maker, a| {
                let a = a.expect("agent taken");
                let backing = match dedicated_slot {
                    Some(slot) => {
                        let aik = a.tpm.create_attestation_key(rng, maker);
                        BackingRequest::Dedicated(DedicatedBacking {
                            tpm: &mut a.tpm,
                            aik,
                            slot,
                        })
                    }
                    None => BackingRequest::Trust(a.platform_aik),
                };
                let holder_id = a.id.clone();
                p.registry
                    .issue_subordination_credential(&holder_id, scope, services, backing, rng)
            },
            Some(holder),
        )??;
        self.agent_mut(holder)?.sigma = Some(sigma.clone());
        Ok(sigma)
    }

    /// Give `verifier` the current platform digest of `subject` as known-good.
    pub fn publish_reference(&mut self, verifier: &str, subject: &str) -> Result<(), WorldError> {
        let digest = self.agent(subject)?.tpm.current_digest(PcrSelection::ALL);
        match self.actors.get_mut(verifier) {
            Some(Actor::Agent(a)) => {
                a.references.insert(subject.to_string(), digest);
            }
            Some(Actor::Principal(p)) => {
                p.registry.reference_pcrs.insert(subject.to_string(), digest);
            }
            None => return Err(WorldError::UnknownActor(verifier.to_string())),
        }
        Ok(())
    }

    /// Adversary setup: install a copy of `victim`'s γ on `attacker`.
    pub fn clone_gamma(&mut self, victim: &str, attacker: &str) -> Result<(), WorldError> {
        let gamma = self
            .agent(victim)?
            .gamma
            .as_ref()
            .ok_or_else(|| CredentialError::NoDomainCredential(victim.to_string()))?;
        let copy = clone_credential(gamma);
        self.agent_mut(attacker)?.gamma = Some(copy);
        self.fabric
            .log_adversary(0, format!("clone_credential victim={victim} holder={attacker}"));
        Ok(())
    }

    /// Simulate modified software on a device.
    pub fn tamper_platform(&mut self, agent: &str, measurement: &str) -> Result<(), WorldError> {
        self.agent_mut(agent)?
            .tpm
            .pcr_extend(5, hash(measurement.as_bytes()))?;
        Ok(())
    }

    /// Revoke a key in the device's TPM and publish the revocation.
    pub fn revoke_key(&mut self, agent: &str, key_id: &Digest) -> Result<(), WorldError> {
        self.agent_mut(agent)?.tpm.revoke_key(key_id)?;
        self.revocations.insert(*key_id);
        Ok(())
    }

    // ---- sessions ----

    pub fn open_session(
        &mut self,
        a: &str,
        b: &str,
        key_a: SharedSecret,
        key_b: SharedSecret,
    ) -> SessionId {
        let id = self.next_session;
        self.next_session += 1;
        let keys = [(a.to_string(), key_a), (b.to_string(), key_b)].into_iter().collect();
        self.sessions.insert(
            id,
            Session {
                id,
                endpoints: (a.to_string(), b.to_string()),
                keys,
                evidence: BTreeMap::new(),
                evidence_history: Vec::new(),
                attested_keys: BTreeMap::new(),
                gamma_serial: None,
                send: [0; 2],
                recv: [0; 2],
                ledger: NonceLedger::default(),
            },
        );
        self.pair_sessions.insert(pair_key(a, b), id);
        id
    }

    pub fn session(&self, id: SessionId) -> Option<&Session> {
        self.sessions.get(&id)
    }

    pub fn session_mut(&mut self, id: SessionId) -> Option<&mut Session> {
        self.sessions.get_mut(&id)
    }

    pub fn session_between(&self, a: &str, b: &str) -> Option<SessionId> {
        self.pair_sessions.get(&pair_key(a, b)).copied()
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    // ---- messaging ----

    /// Compose and post one envelope. Returns its seq.
    pub fn send(
        &mut self,
        from: &str,
        to: &str,
        session: Option<SessionId>,
        kind: MessageKind,
        plaintext: Vec<u8>,
    ) -> u64 {
        let mut plaintext = plaintext;
        let (seq, kind_index) = self.fabric.stamp(kind, &mut plaintext);
        let payload = match session {
            Some(sid) => self
                .sessions
                .get_mut(&sid)
                .expect("session exists")
                .seal(from, to, kind, &plaintext),
            None => plaintext.clone(),
        };
        self.wire_log.push((seq, payload.clone()));
        self.plain_log.push(PlainRecord {
            seq,
            from: from.to_string(),
            to: to.to_string(),
            kind,
            session,
            plaintext,
        });
        self.fabric.post(Envelope {
            seq,
            from: from.to_string(),
            to: to.to_string(),
            session,
            kind,
            payload,
            kind_index,
        });
        seq
    }

    /// Step the fabric until `to` receives an intact `kind` envelope from
    /// `from`. Anything else delivered meanwhile is rejected. When the
    /// fabric runs dry, the most recent rejection (or a timeout) is returned.
    pub fn recv(&mut self, from: &str, to: &str, kind: MessageKind) -> Result<(u64, Vec<u8>), Failure> {
        let mut last = None;
        loop {
            if self.fabric.budget_exhausted() {
                return Err(Failure::Timeout);
            }
            let env = match self.fabric.deliver() {
                None => return Err(last.unwrap_or(Failure::Timeout)),
                Some(Delivery::Dropped(_)) => continue,
                Some(Delivery::Delivered(env)) => env,
            };
            let wanted = env.to == to && env.from == from && env.kind == kind;
            if !wanted {
                self.fabric.reject(env.seq);
                last = Some(Failure::Unexpected);
                continue;
            }
            let opened = match env.session {
                Some(sid) => match self.sessions.get_mut(&sid) {
                    Some(s) => s.open(&env).map(|(counter, pt)| {
                        s.commit(&env, counter);
                        pt
                    }),
                    None => Err(Failure::Unexpected),
                },
                None => Ok(env.payload.clone()),
            };
            match opened {
                Ok(pt) => return Ok((env.seq, pt)),
                Err(f) => {
                    self.fabric.reject(env.seq);
                    last = Some(f);
                }
            }
        }
    }

    /// Send and deliver, decoding with `decode`. A payload that fails to
    /// decode is rejected as malformed.
    pub fn transfer<T, E>(
        &mut self,
        from: &str,
        to: &str,
        session: Option<SessionId>,
        kind: MessageKind,
        plaintext: Vec<u8>,
        decode: impl FnOnce(&[u8]) -> Result<T, E>,
    ) -> Result<(u64, T), Failure> {
        self.send(from, to, session, kind, plaintext);
        let (seq, pt) = self.recv(from, to, kind)?;
        match decode(&pt) {
            Ok(v) => Ok((seq, v)),
            Err(_) => {
                self.fabric.reject(seq);
                Err(Failure::Malformed)
            }
        }
    }

    /// Deliver and reject whatever is still in flight (replays, strays).
    pub fn drain(&mut self) {
        while let Some(d) = self.fabric.deliver() {
            if let Delivery::Delivered(env) = d {
                self.fabric.reject(env.seq);
            }
        }
    }

    pub fn reject(&mut self, seq: u64) {
        self.fabric.reject(seq);
    }

    pub fn plain_log(&self) -> &[PlainRecord] {
        &self.plain_log
    }

    /// Payloads as they left the sender, before any adversary action.
    pub fn wire_log(&self) -> &[(u64, Vec<u8>)] {
        &self.wire_log
    }

    // ---- attestation helpers ----

    /// Known-good digest `verifier` holds for `attester`.
    pub fn reference_for(&self, verifier: &str, attester: &str) -> Option<Digest> {
        match self.actors.get(verifier)? {
            Actor::Agent(a) => a.references.get(attester).copied(),
            Actor::Principal(p) => p.registry.reference_pcrs.get(attester).copied(),
        }
    }

    /// Check one quote at `verifier` against the published revocations and
    /// the verifier's reference digest for `attester`.
    #[allow(clippy::too_many_arguments)]
    pub fn check_quote(
        &mut self,
        verifier: &str,
        attester: &str,
        quote: &AttestationQuote,
        signer: &PresentedKey,
        challenge: Nonce,
        credential: Option<&Digest>,
        accepted: Option<AssertionLevel>,
    ) -> Result<(), QuoteRejection> {
        let reference = self.reference_for(verifier, attester);
        let anchor = self.manufacturer.public();
        let expect = crate::tpm::Expectation {
            challenge,
            anchor: &anchor,
            revoked: &self.revocations,
            reference_pcr: reference.as_ref(),
            credential,
            accepted,
        };
        let v = match self.actors.get_mut(verifier) {
            Some(Actor::Agent(a)) => &mut a.verifier,
            Some(Actor::Principal(p)) => &mut p.verifier,
            None => return Err(QuoteRejection::UntrustedKey),
        };
        v.verify(quote, signer, &expect)
    }

    /// Verify a quote from `attester` at `verifier` within `session`,
    /// raising the session evidence on success.
    #[allow(clippy::too_many_arguments)]
    pub fn verify_quote(
        &mut self,
        verifier: &str,
        attester: &str,
        session: SessionId,
        msg: &QuoteMsg,
        signer: &PresentedKey,
        challenge: Nonce,
        credential: Option<&Digest>,
    ) -> Result<(), QuoteRejection> {
        let accepted = self.sessions.get(&session).and_then(|s| s.level(attester));
        self.check_quote(verifier, attester, &msg.quote, signer, challenge, credential, accepted)?;
        if let Some(s) = self.sessions.get_mut(&session) {
            s.raise(attester, msg.quote.level);
            if msg.quote.level == AssertionLevel::SystemIntegrity {
                s.attested_keys.insert(attester.to_string(), msg.quote.signer_key_id);
            }
        }
        Ok(())
    }

    /// Verify a level-3 quote relayed by an agent that vouches for having
    /// issued the challenge and seen levels 1 and 2 in its own session.
    pub fn verify_vouched_quote(
        &mut self,
        verifier: &str,
        attester: &str,
        quote: &AttestationQuote,
        signer: &PresentedKey,
        credential: &Digest,
    ) -> Result<(), QuoteRejection> {
        let challenge = quote.nonce;
        self.check_quote(
            verifier,
            attester,
            quote,
            signer,
            challenge,
            Some(credential),
            Some(AssertionLevel::SystemIntegrity),
        )
    }

    /// Every TPM's PCR bank equals a replay of its measurement log.
    pub fn pcr_logs_consistent(&self) -> bool {
        self.actors.values().all(|a| match a {
            Actor::Agent(x) => x.tpm.log_consistent(),
            Actor::Principal(_) => true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{KeyRole};
    use crate::fabric::Status;

    fn two_party(rules: Vec<AdversaryRule>) -> (World, SessionId) {
        let mut w = World::new(5, rules);
        w.add_principal("mno").unwrap();
        w.add_agent("phone", "mno").unwrap();
        let k = SharedSecret {
            bytes: w.rng.bytes32(),
            role: KeyRole::Transport,
        };
        let sid = w.open_session("phone", "mno", k.clone(), k);
        (w, sid)
    }

    #[test]
    fn sealed_send_and_receive() {
        let (mut w, sid) = two_party(vec![]);
        let (_, pt) = w
            .transfer("phone", "mno", Some(sid), MessageKind::ServiceRequest, b"hi".to_vec(), |b| {
                Ok::<_, ()>(b.to_vec())
            })
            .unwrap();
        assert_eq!(pt, b"hi");
        // the wire carries ciphertext, not the plaintext
        let rec = &w.plain_log()[0];
        assert_eq!(rec.plaintext, b"hi");
    }

    #[test]
    fn wire_tamper_is_rejected_as_authentication_failure() {
        let (mut w, sid) = two_party(vec!["tamper:ServiceRequest:0".parse().unwrap()]);
        w.send("phone", "mno", Some(sid), MessageKind::ServiceRequest, b"hi".to_vec());
        assert_eq!(
            w.recv("phone", "mno", MessageKind::ServiceRequest),
            Err(Failure::AuthenticationFailure)
        );
        assert_eq!(w.fabric.transcript().entries[0].status, Status::Rejected);
    }

    #[test]
    fn replayed_envelope_is_rejected_and_original_accepted() {
        let (mut w, sid) = two_party(vec!["dup:ServiceRequest:0".parse().unwrap()]);
        w.send("phone", "mno", Some(sid), MessageKind::ServiceRequest, b"one".to_vec());
        assert!(w.recv("phone", "mno", MessageKind::ServiceRequest).is_ok());
        w.send("phone", "mno", Some(sid), MessageKind::ServiceRequest, b"two".to_vec());
        let (_, pt) = w.recv("phone", "mno", MessageKind::ServiceRequest).unwrap();
        assert_eq!(pt, b"two");
        let statuses: Vec<Status> = w.fabric.transcript().entries.iter().map(|e| e.status).collect();
        assert_eq!(statuses, vec![Status::Accepted, Status::Rejected, Status::Accepted]);
    }

    #[test]
    fn replay_into_an_opened_counter_fails() {
        let (mut w, sid) = two_party(vec!["dup:ServiceRequest:0".parse().unwrap()]);
        w.send("phone", "mno", Some(sid), MessageKind::ServiceRequest, b"one".to_vec());
        w.recv("phone", "mno", MessageKind::ServiceRequest).unwrap();
        // the duplicate arrives alone while the same kind is awaited
        assert_eq!(w.recv("phone", "mno", MessageKind::ServiceRequest), Err(Failure::Replay));
    }

    #[test]
    fn dropped_envelope_times_out() {
        let (mut w, sid) = two_party(vec!["drop:ServiceRequest:0".parse().unwrap()]);
        w.send("phone", "mno", Some(sid), MessageKind::ServiceRequest, b"x".to_vec());
        assert_eq!(w.recv("phone", "mno", MessageKind::ServiceRequest), Err(Failure::Timeout));
    }

    #[test]
    fn step_budget_bounds_a_run() {
        let (mut w, sid) = two_party(vec![]);
        w.fabric.set_budget(2);
        w.fabric.reset_steps();
        for _ in 0..3 {
            w.send("phone", "mno", Some(sid), MessageKind::ServiceRequest, b"x".to_vec());
        }
        assert!(w.recv("phone", "mno", MessageKind::ServiceRequest).is_ok());
        assert!(w.recv("phone", "mno", MessageKind::ServiceRequest).is_ok());
        assert_eq!(w.recv("phone", "mno", MessageKind::ServiceRequest), Err(Failure::Timeout));
    }

    #[test]
    fn setup_errors() {
        let mut w = World::new(1, vec![]);
        w.add_principal("mno").unwrap();
        assert_eq!(w.add_principal("mno"), Err(WorldError::DuplicateActor("mno".into())));
        assert!(w.add_agent("phone", "nowhere").is_err());
        w.add_agent("phone", "mno").unwrap();
        assert!(matches!(w.issue_gamma("mno"), Err(WorldError::NotAnAgent(_))));
        assert!(w.enroll_tau("phone", EnrolmentMode::PrincipalControlled).is_err());
        w.issue_gamma("phone").unwrap();
        w.enroll_tau("phone", EnrolmentMode::PrincipalControlled).unwrap();
        assert!(w.pcr_logs_consistent());
    }
}
