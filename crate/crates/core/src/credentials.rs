//! Domain (γ), trust (τ) and subordination (σ) credentials, and the
//! principal-side registry that issues them and links τ to γ.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{hash, mac, mac_verify, verify, Digest, Nonce, PublicKey, Signature, SimRng};
use crate::tpm::{Authority, PcrSelection, TpmError, TpmState};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CredentialError {
    #[error("agent {agent} is not in the domain of {owner}")]
    ForeignAgent { agent: String, owner: String },
    #[error("agent {0} already holds a domain credential")]
    DuplicateIssuance(String),
    #[error("agent {0} has no domain credential")]
    NoDomainCredential(String),
    #[error("attestation key unknown to the tpm")]
    UnknownAttestationKey,
    #[error("tpm: {0}")]
    Tpm(#[from] TpmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActorKind {
    Principal,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActorId {
    pub kind: ActorKind,
    pub name: String,
    /// Owning principal, agents only.
    pub domain: Option<String>,
}

impl ActorId {
    pub fn principal(name: impl Into<String>) -> Self {
        ActorId {
            kind: ActorKind::Principal,
            name: name.into(),
            domain: None,
        }
    }

    pub fn agent(name: impl Into<String>, domain: impl Into<String>) -> Self {
        ActorId {
            kind: ActorKind::Agent,
            name: name.into(),
            domain: Some(domain.into()),
        }
    }

    pub fn is_principal(&self) -> bool {
        self.kind == ActorKind::Principal
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u8(self.kind as u8)
            .str(&self.name)
            .str(self.domain.as_deref().unwrap_or(""));
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let kind = match r.u8()? {
            0 => ActorKind::Principal,
            1 => ActorKind::Agent,
            _ => return Err(DecodeError("bad actor kind")),
        };
        let name = r.string()?;
        let domain = r.string()?;
        Ok(ActorId {
            kind,
            name,
            domain: (kind == ActorKind::Agent).then_some(domain),
        })
    }
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// γ: a conventional, cloneable credential (SIM-like).
#[derive(Clone, PartialEq, Eq)]
pub struct DomainCredential {
    pub agent: ActorId,
    pub principal: ActorId,
    pub secret: [u8; 32],
    pub serial: u64,
}

impl fmt::Debug for DomainCredential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DomainCredential")
            .field("agent", &self.agent.name)
            .field("principal", &self.principal.name)
            .field("serial", &self.serial)
            .finish_non_exhaustive()
    }
}

impl DomainCredential {
    /// Canonical byte string, as attested at level 3 and stored by the registry.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("transtrust/gamma");
        self.agent.encode(&mut w);
        self.principal.encode(&mut w);
        w.bytes(&self.secret).u64(self.serial);
        w.finish()
    }

    pub fn respond(&self, challenge: &Nonce) -> [u8; 32] {
        mac(&self.secret, &challenge.0)
    }
}

/// Adversary operation: a byte-for-byte copy of γ, to be installed on
/// another device.
pub fn clone_credential(gamma: &DomainCredential) -> DomainCredential {
    gamma.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EnrolmentMode {
    PrincipalControlled,
    Independent,
}

impl EnrolmentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EnrolmentMode::PrincipalControlled => "principal_controlled",
            EnrolmentMode::Independent => "independent",
        }
    }
}

impl fmt::Display for EnrolmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EnrolmentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "principal_controlled" => Ok(EnrolmentMode::PrincipalControlled),
            "independent" => Ok(EnrolmentMode::Independent),
            _ => Err(format!("unknown enrolment mode {s}")),
        }
    }
}

/// τ: binds an attestation key of one TPM to a subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustCredential {
    pub tpm_key_id: Digest,
    pub subject: ActorId,
    pub mode: EnrolmentMode,
    pub issuer_key_id: Digest,
    pub issuer_cert: Signature,
}

impl TrustCredential {
    fn signed_bytes(tpm_key_id: &Digest, subject: &ActorId, mode: EnrolmentMode) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("transtrust/tau").digest(tpm_key_id);
        subject.encode(&mut w);
        w.u8(mode as u8);
        w.finish()
    }

    pub fn verify(&self, issuer: &PublicKey) -> bool {
        issuer.key_id() == self.issuer_key_id
            && verify(
                issuer,
                &Self::signed_bytes(&self.tpm_key_id, &self.subject, self.mode),
                &self.issuer_cert,
            )
    }

    pub fn encode(&self, w: &mut Writer) {
        w.digest(&self.tpm_key_id);
        self.subject.encode(w);
        w.u8(self.mode as u8)
            .digest(&self.issuer_key_id)
            .bytes(&self.issuer_cert.0);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let tpm_key_id = r.digest()?;
        let subject = ActorId::decode(r)?;
        let mode = match r.u8()? {
            0 => EnrolmentMode::PrincipalControlled,
            1 => EnrolmentMode::Independent,
            _ => return Err(DecodeError("bad enrolment mode")),
        };
        Ok(TrustCredential {
            tpm_key_id,
            subject,
            mode,
            issuer_key_id: r.digest()?,
            issuer_cert: r.signature()?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let tau = Self::decode(&mut r)?;
        r.finish()?;
        Ok(tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubordinationScope {
    Dominator,
    Subordinate,
}

/// What stands behind a σ credential.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backing {
    /// A genuine trust credential, named by its attestation key.
    Trust { tpm_key_id: Digest },
    /// A dedicated γ living in the holder's sealed storage, attested at
    /// level 3 with `aik`.
    Dedicated {
        serial: u64,
        credential_digest: Digest,
        aik: Digest,
        slot: u32,
    },
}

impl Backing {
    /// The attestation key whose revocation disables this credential.
    pub fn key_id(&self) -> Digest {
        match self {
            Backing::Trust { tpm_key_id } => *tpm_key_id,
            Backing::Dedicated { aik, .. } => *aik,
        }
    }
}

/// σ: marks a dominator or a subordinate and what it may use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubordinationCredential {
    pub holder: ActorId,
    pub scope: SubordinationScope,
    pub granted_services: BTreeSet<String>,
    pub backing: Backing,
    pub issuer: ActorId,
    pub issuer_key_id: Digest,
    pub signature: Signature,
}

impl SubordinationCredential {
    fn body(
        holder: &ActorId,
        scope: SubordinationScope,
        services: &BTreeSet<String>,
        backing: &Backing,
        issuer: &ActorId,
    ) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("transtrust/sigma");
        holder.encode(&mut w);
        w.u8(scope as u8).u64(services.len() as u64);
        for s in services {
            w.str(s);
        }
        match backing {
            Backing::Trust { tpm_key_id } => {
                w.u8(0).digest(tpm_key_id);
            }
            Backing::Dedicated {
                serial,
                credential_digest,
                aik,
                slot,
            } => {
                w.u8(1)
                    .u64(*serial)
                    .digest(credential_digest)
                    .digest(aik)
                    .u64(u64::from(*slot));
            }
        }
        issuer.encode(&mut w);
        w.finish()
    }

    pub fn verify(&self, issuer: &PublicKey) -> bool {
        issuer.key_id() == self.issuer_key_id
            && verify(
                issuer,
                &Self::body(
                    &self.holder,
                    self.scope,
                    &self.granted_services,
                    &self.backing,
                    &self.issuer,
                ),
                &self.signature,
            )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&Self::body(
            &self.holder,
            self.scope,
            &self.granted_services,
            &self.backing,
            &self.issuer,
        ))
        .digest(&self.issuer_key_id)
        .bytes(&self.signature.0);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut outer = Reader::new(bytes);
        let body = outer.bytes()?;
        let issuer_key_id = outer.digest()?;
        let signature = outer.signature()?;
        outer.finish()?;

        let mut r = Reader::new(body);
        if r.bytes()? != b"transtrust/sigma" {
            return Err(DecodeError("not a sigma credential"));
        }
        let holder = ActorId::decode(&mut r)?;
        let scope = match r.u8()? {
            0 => SubordinationScope::Dominator,
            1 => SubordinationScope::Subordinate,
            _ => return Err(DecodeError("bad scope")),
        };
        let n = r.u64()?;
        let mut granted_services = BTreeSet::new();
        for _ in 0..n {
            granted_services.insert(r.string()?);
        }
        let backing = match r.u8()? {
            0 => Backing::Trust {
                tpm_key_id: r.digest()?,
            },
            1 => Backing::Dedicated {
                serial: r.u64()?,
                credential_digest: r.digest()?,
                aik: r.digest()?,
                slot: u32::try_from(r.u64()?).map_err(|_| DecodeError("bad slot"))?,
            },
            _ => return Err(DecodeError("bad backing")),
        };
        let issuer = ActorId::decode(&mut r)?;
        r.finish()?;
        Ok(SubordinationCredential {
            holder,
            scope,
            granted_services,
            backing,
            issuer,
            issuer_key_id,
            signature,
        })
    }
}

/// Key material a principal distributes to its privileged subgroup.
#[derive(Clone, PartialEq, Eq)]
pub struct GroupSecret(pub [u8; 32]);

impl fmt::Debug for GroupSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("GroupSecret(..)")
    }
}

impl GroupSecret {
    pub fn prove(&self, challenge: &Nonce) -> [u8; 32] {
        mac(&self.0, &challenge.0)
    }

    pub fn check(&self, challenge: &Nonce, proof: &[u8]) -> bool {
        mac_verify(&self.0, &challenge.0, proof)
    }
}

/// Dedicated backing request for a subordinate σ.
pub struct DedicatedBacking<'a> {
    pub tpm: &'a mut TpmState,
    pub aik: Digest,
    pub slot: u32,
}

pub enum BackingRequest<'a> {
    Trust(Digest),
    Dedicated(DedicatedBacking<'a>),
}

/// Principal-side state: issued credentials and what the principal knows
/// about each agent's platform.
#[derive(Debug, Clone)]
pub struct DomainRegistry {
    pub owner: ActorId,
    authority: Authority,
    next_serial: u64,
    clock: u64,
    pub gamma_index: BTreeMap<u64, DomainCredential>,
    gamma_issued_at: BTreeMap<u64, u64>,
    holders: BTreeMap<String, u64>,
    pub tau_to_gamma: BTreeMap<Digest, u64>,
    tau_enrolled_at: BTreeMap<Digest, u64>,
    pub trust_credentials: BTreeMap<Digest, TrustCredential>,
    pub reference_pcrs: BTreeMap<String, Digest>,
    pub acl: BTreeSet<Digest>,
    /// First-come-first-served: the first TPM seen for each γ serial.
    pub seen_serials: BTreeMap<u64, Digest>,
    pub shared_group_secret: Option<GroupSecret>,
    pub subordination: Vec<SubordinationCredential>,
}

impl DomainRegistry {
    pub fn new(owner: ActorId, rng: &mut SimRng) -> Self {
        let authority = Authority::new(owner.name.clone(), rng);
        DomainRegistry {
            owner,
            authority,
            next_serial: 1,
            clock: 0,
            gamma_index: BTreeMap::new(),
            gamma_issued_at: BTreeMap::new(),
            holders: BTreeMap::new(),
            tau_to_gamma: BTreeMap::new(),
            tau_enrolled_at: BTreeMap::new(),
            trust_credentials: BTreeMap::new(),
            reference_pcrs: BTreeMap::new(),
            acl: BTreeSet::new(),
            seen_serials: BTreeMap::new(),
            shared_group_secret: None,
            subordination: Vec::new(),
        }
    }

    pub fn authority(&self) -> &Authority {
        &self.authority
    }

    pub fn public_key(&self) -> PublicKey {
        self.authority.public()
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn check_member(&self, agent: &ActorId) -> Result<(), CredentialError> {
        if agent.is_principal() || agent.domain.as_deref() != Some(self.owner.name.as_str()) {
            return Err(CredentialError::ForeignAgent {
                agent: agent.name.clone(),
                owner: self.owner.name.clone(),
            });
        }
        Ok(())
    }

    fn mint(&mut self, agent: &ActorId, rng: &mut SimRng) -> DomainCredential {
        let serial = self.next_serial;
        self.next_serial += 1;
        let gamma = DomainCredential {
            agent: agent.clone(),
            principal: self.owner.clone(),
            secret: rng.bytes32(),
            serial,
        };
        let t = self.tick();
        self.gamma_index.insert(serial, gamma.clone());
        self.gamma_issued_at.insert(serial, t);
        gamma
    }

    pub fn issue_domain_credential(
        &mut self,
        agent: &ActorId,
        rng: &mut SimRng,
    ) -> Result<DomainCredential, CredentialError> {
        self.check_member(agent)?;
        if self.holders.contains_key(&agent.name) {
            return Err(CredentialError::DuplicateIssuance(agent.name.clone()));
        }
        let gamma = self.mint(agent, rng);
        self.holders.insert(agent.name.clone(), gamma.serial);
        Ok(gamma)
    }

    pub fn serial_of(&self, agent: &str) -> Option<u64> {
        self.holders.get(agent).copied()
    }

    /// Enrol the TPM attestation key `aik` as the agent's τ.
    ///
    /// Principal-controlled enrolment signs τ with the principal's key, links
    /// it to the agent's γ and records the platform's current PCR digest as
    /// the reference. Independent enrolment leaves τ signed by the
    /// manufacturer and unlinked; the key still joins the ACL.
    pub fn enroll_trust_credential(
        &mut self,
        tpm: &TpmState,
        aik: &Digest,
        agent: &ActorId,
        mode: EnrolmentMode,
        manufacturer: &Authority,
    ) -> Result<TrustCredential, CredentialError> {
        if tpm.attestation_key(aik).is_none() {
            return Err(CredentialError::UnknownAttestationKey);
        }
        let signer = match mode {
            EnrolmentMode::PrincipalControlled => {
                let serial = self
                    .serial_of(&agent.name)
                    .ok_or_else(|| CredentialError::NoDomainCredential(agent.name.clone()))?;
                self.tau_to_gamma.insert(*aik, serial);
                &self.authority
            }
            EnrolmentMode::Independent => manufacturer,
        };
        let tau = TrustCredential {
            tpm_key_id: *aik,
            subject: agent.clone(),
            mode,
            issuer_key_id: signer.keys.key_id,
            issuer_cert: signer.keys.sign(&TrustCredential::signed_bytes(aik, agent, mode)),
        };
        let t = self.tick();
        self.tau_enrolled_at.insert(*aik, t);
        self.reference_pcrs
            .insert(agent.name.clone(), tpm.current_digest(PcrSelection::ALL));
        self.acl.insert(*aik);
        self.trust_credentials.insert(*aik, tau.clone());
        Ok(tau)
    }

    /// Generate the subgroup secret on first use and seal it into the
    /// member's TPM under its current platform state.
    pub fn distribute_group_secret(
        &mut self,
        tpm: &mut TpmState,
        slot: u32,
        rng: &mut SimRng,
    ) -> Result<(), CredentialError> {
        let secret = self
            .shared_group_secret
            .get_or_insert_with(|| GroupSecret(rng.bytes32()))
            .clone();
        tpm.seal(slot, tpm.policy(PcrSelection::ALL), secret.0.to_vec())?;
        Ok(())
    }

    /// Conventional γ authentication; no TC involvement.
    pub fn authenticate_generic(&self, presented: &DomainCredential, challenge: &Nonce) -> bool {
        self.check_response(presented.serial, challenge, &presented.respond(challenge))
    }

    pub fn check_response(&self, serial: u64, challenge: &Nonce, response: &[u8]) -> bool {
        match self.gamma_index.get(&serial) {
            Some(g) => mac_verify(&g.secret, &challenge.0, response),
            None => false,
        }
    }

    /// γ serial linked to τ; absent for independently enrolled or unknown τ.
    pub fn associate(&self, tau: &TrustCredential) -> Option<u64> {
        if tau.mode != EnrolmentMode::PrincipalControlled {
            return None;
        }
        self.tau_to_gamma.get(&tau.tpm_key_id).copied()
    }

    /// Records the first TPM to claim `serial`; later claims by other TPMs
    /// return false. The map only grows.
    pub fn first_come_first_served(&mut self, serial: u64, tpm_key_id: &Digest) -> bool {
        *self.seen_serials.entry(serial).or_insert(*tpm_key_id) == *tpm_key_id
    }

    /// True if `tau` was enrolled after the γ it is linked to.
    pub fn association_ordered(&self, tau_key: &Digest) -> bool {
        match (self.tau_to_gamma.get(tau_key), self.tau_enrolled_at.get(tau_key)) {
            (Some(serial), Some(t)) => self.gamma_issued_at.get(serial).is_some_and(|g| g < t),
            _ => true,
        }
    }

    pub fn issue_subordination_credential(
        &mut self,
        holder: &ActorId,
        scope: SubordinationScope,
        services: &[&str],
        backing: BackingRequest<'_>,
        rng: &mut SimRng,
    ) -> Result<SubordinationCredential, CredentialError> {
        if scope == SubordinationScope::Dominator {
            self.check_member(holder)?;
            if self.serial_of(&holder.name).is_none() {
                return Err(CredentialError::NoDomainCredential(holder.name.clone()));
            }
        }
        let backing = match backing {
            BackingRequest::Trust(tpm_key_id) => Backing::Trust { tpm_key_id },
            BackingRequest::Dedicated(DedicatedBacking { tpm, aik, slot }) => {
                if tpm.attestation_key(&aik).is_none() {
                    return Err(CredentialError::UnknownAttestationKey);
                }
                let gamma = self.mint(holder, rng);
                let bytes = gamma.to_bytes();
                tpm.seal(slot, tpm.policy(PcrSelection::ALL), bytes.clone())?;
                self.reference_pcrs
                    .entry(holder.name.clone())
                    .or_insert_with(|| tpm.current_digest(PcrSelection::ALL));
                Backing::Dedicated {
                    serial: gamma.serial,
                    credential_digest: hash(&bytes),
                    aik,
                    slot,
                }
            }
        };
        let granted_services: BTreeSet<String> = services.iter().map(|s| s.to_string()).collect();
        let body =
            SubordinationCredential::body(holder, scope, &granted_services, &backing, &self.owner);
        let sigma = SubordinationCredential {
            holder: holder.clone(),
            scope,
            granted_services,
            backing,
            issuer: self.owner.clone(),
            issuer_key_id: self.authority.keys.key_id,
            signature: self.authority.keys.sign(&body),
        };
        self.subordination.push(sigma.clone());
        Ok(sigma)
    }

    /// Line-oriented dump, one record per line, fixed field order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "registry owner={} key={}", self.owner.name, self.authority.keys.key_id.short());
        for (serial, g) in &self.gamma_index {
            let _ = writeln!(
                out,
                "gamma serial={} agent={} principal={} secret={}",
                serial,
                g.agent.name,
                g.principal.name,
                hash(&g.secret).short()
            );
        }
        for (key, tau) in &self.trust_credentials {
            let link = self
                .tau_to_gamma
                .get(key)
                .map_or_else(|| "-".to_string(), u64::to_string);
            let _ = writeln!(
                out,
                "tau key={} subject={} mode={} serial={}",
                key.short(),
                tau.subject.name,
                tau.mode.as_str(),
                link
            );
        }
        for key in &self.acl {
            let _ = writeln!(out, "acl key={}", key.short());
        }
        for (agent, pcr) in &self.reference_pcrs {
            let _ = writeln!(out, "reference agent={} pcr={}", agent, pcr.short());
        }
        for (serial, key) in &self.seen_serials {
            let _ = writeln!(out, "seen serial={} key={}", serial, key.short());
        }
        for s in &self.subordination {
            let scope = match s.scope {
                SubordinationScope::Dominator => "dominator",
                SubordinationScope::Subordinate => "subordinate",
            };
            let services: Vec<&str> = s.granted_services.iter().map(String::as_str).collect();
            let backing = match &s.backing {
                Backing::Trust { tpm_key_id } => format!("trust:{}", tpm_key_id.short()),
                Backing::Dedicated { serial, aik, .. } => {
                    format!("dedicated:{}:{}", serial, aik.short())
                }
            };
            let _ = writeln!(
                out,
                "sigma holder={} scope={} services={} backing={}",
                s.holder.name,
                scope,
                if services.is_empty() { "-".to_string() } else { services.join(",") },
                backing
            );
        }
        let _ = writeln!(
            out,
            "group-secret {}",
            if self.shared_group_secret.is_some() { "present" } else { "absent" }
        );
        out
    }
}
