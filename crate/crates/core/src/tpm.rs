//! Simulated trusted platform module.
//!
//! The TPM provides three layered assertions toward a remote verifier:
//!
//! 1. liveness, a challenge signed by the manufacturer-certified endorsement key;
//! 2. system integrity, a PCR digest signed by an issuer-certified attestation key;
//! 3. credential integrity, the digest of a credential bound to the platform
//!    state, only accepted after 1 and 2 in the same session.
//!
//! Direct anonymous attestation is modeled as a plain signature under an
//! issuer-certified attestation key.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{hash, hash_parts, verify, Digest, Nonce, PublicKey, SignKeypair, Signature, SimRng};

pub const PCR_COUNT: usize = 8;
pub const REPLAY_WINDOW: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TpmError {
    #[error("pcr index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("empty pcr selection")]
    EmptySelection,
    #[error("key revoked")]
    KeyRevoked,
    #[error("unknown key")]
    UnknownKey,
    #[error("level-3 attestation requires an accepted level-2 quote in this session")]
    OrderingViolation,
    #[error("pcr policy mismatch")]
    PolicyMismatch,
    #[error("sealed slot {0} occupied")]
    SlotOccupied(u32),
    #[error("sealed slot {0} empty")]
    SlotEmpty(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AssertionLevel {
    Liveness = 1,
    SystemIntegrity = 2,
    CredentialIntegrity = 3,
}

impl AssertionLevel {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(AssertionLevel::Liveness),
            2 => Some(AssertionLevel::SystemIntegrity),
            3 => Some(AssertionLevel::CredentialIntegrity),
            _ => None,
        }
    }

    /// The level that must already be accepted in the session.
    pub fn prerequisite(self) -> Option<AssertionLevel> {
        match self {
            AssertionLevel::Liveness => None,
            AssertionLevel::SystemIntegrity => Some(AssertionLevel::Liveness),
            AssertionLevel::CredentialIntegrity => Some(AssertionLevel::SystemIntegrity),
        }
    }
}

/// A signing authority: a TPM manufacturer, a privacy CA, or a principal.
#[derive(Debug, Clone)]
pub struct Authority {
    pub name: String,
    pub keys: SignKeypair,
}

impl Authority {
    pub fn new(name: impl Into<String>, rng: &mut SimRng) -> Self {
        Authority {
            name: name.into(),
            keys: SignKeypair::generate(rng),
        }
    }

    pub fn public(&self) -> PublicKey {
        self.keys.public
    }

    pub fn certify(&self, purpose: KeyPurpose, key: &PublicKey) -> KeyCertificate {
        let signature = self.keys.sign(&KeyCertificate::signed_bytes(purpose, key));
        KeyCertificate {
            purpose,
            subject_key: *key,
            issuer_key_id: self.keys.key_id,
            signature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyPurpose {
    Endorsement = 1,
    Attestation = 2,
}

/// Issuer statement that `subject_key` is a genuine TPM key of the given purpose.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyCertificate {
    pub purpose: KeyPurpose,
    pub subject_key: PublicKey,
    pub issuer_key_id: Digest,
    pub signature: Signature,
}

impl KeyCertificate {
    fn signed_bytes(purpose: KeyPurpose, key: &PublicKey) -> Vec<u8> {
        Writer::new()
            .str("transtrust/key-cert")
            .u8(purpose as u8)
            .bytes(&key.0)
            .finish()
    }

    pub fn verify(&self, issuer: &PublicKey) -> bool {
        issuer.key_id() == self.issuer_key_id
            && verify(issuer, &Self::signed_bytes(self.purpose, &self.subject_key), &self.signature)
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u8(self.purpose as u8)
            .bytes(&self.subject_key.0)
            .digest(&self.issuer_key_id)
            .bytes(&self.signature.0);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let purpose = match r.u8()? {
            1 => KeyPurpose::Endorsement,
            2 => KeyPurpose::Attestation,
            _ => return Err(DecodeError("bad key purpose")),
        };
        Ok(KeyCertificate {
            purpose,
            subject_key: r.public_key()?,
            issuer_key_id: r.digest()?,
            signature: r.signature()?,
        })
    }
}

/// Ascending set of PCR indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PcrSelection(u8);

impl PcrSelection {
    pub const ALL: PcrSelection = PcrSelection(0xff);

    pub fn new(indices: &[usize]) -> Result<Self, TpmError> {
        let mut mask = 0u8;
        for &i in indices {
            if i >= PCR_COUNT {
                return Err(TpmError::IndexOutOfRange(i));
            }
            mask |= 1 << i;
        }
        if mask == 0 {
            return Err(TpmError::EmptySelection);
        }
        Ok(PcrSelection(mask))
    }

    pub fn indices(self) -> impl Iterator<Item = usize> {
        (0..PCR_COUNT).filter(move |i| self.0 & (1 << i) != 0)
    }
}

/// Digest over the selected PCR values in ascending index order.
pub fn pcr_digest(bank: &[Digest; PCR_COUNT], selection: PcrSelection) -> Digest {
    let mut concat = Vec::with_capacity(PCR_COUNT * 32);
    for i in selection.indices() {
        concat.extend_from_slice(&bank[i].0);
    }
    hash(&concat)
}

pub fn extend_value(old: &Digest, measurement: &Digest) -> Digest {
    let mut buf = [0u8; 64];
    buf[..32].copy_from_slice(&old.0);
    buf[32..].copy_from_slice(&measurement.0);
    hash(&buf)
}

/// Rebuild a PCR bank from the all-zero state.
pub fn replay_log(log: &[(usize, Digest)]) -> [Digest; PCR_COUNT] {
    let mut bank = [Digest::ZERO; PCR_COUNT];
    for (i, m) in log {
        bank[*i] = extend_value(&bank[*i], m);
    }
    bank
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationQuote {
    pub level: AssertionLevel,
    pub nonce: Nonce,
    pub pcr_digest: Option<Digest>,
    pub credential_digest: Option<Digest>,
    pub signer_key_id: Digest,
    pub signature: Signature,
}

impl AttestationQuote {
    /// level ‖ nonce ‖ pcr_digest ‖ credential_digest ‖ signer_key_id, each
    /// length-prefixed; absent digests are written as 32 zero octets.
    pub fn canonical_bytes(
        level: AssertionLevel,
        nonce: &Nonce,
        pcr_digest: Option<&Digest>,
        credential_digest: Option<&Digest>,
        signer_key_id: &Digest,
    ) -> Vec<u8> {
        Writer::new()
            .u8(level.as_u8())
            .bytes(&nonce.0)
            .digest(pcr_digest.unwrap_or(&Digest::ZERO))
            .digest(credential_digest.unwrap_or(&Digest::ZERO))
            .digest(signer_key_id)
            .finish()
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        Self::canonical_bytes(
            self.level,
            &self.nonce,
            self.pcr_digest.as_ref(),
            self.credential_digest.as_ref(),
            &self.signer_key_id,
        )
    }

    /// Level-specific field presence.
    pub fn well_formed(&self) -> bool {
        match self.level {
            AssertionLevel::Liveness => self.pcr_digest.is_none() && self.credential_digest.is_none(),
            AssertionLevel::SystemIntegrity => {
                self.pcr_digest.is_some() && self.credential_digest.is_none()
            }
            AssertionLevel::CredentialIntegrity => {
                self.pcr_digest.is_some() && self.credential_digest.is_some()
            }
        }
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u8(self.level.as_u8())
            .bytes(&self.nonce.0)
            .opt_digest(self.pcr_digest.as_ref())
            .opt_digest(self.credential_digest.as_ref())
            .digest(&self.signer_key_id)
            .bytes(&self.signature.0);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let level = AssertionLevel::from_u8(r.u8()?).ok_or(DecodeError("bad assertion level"))?;
        Ok(AttestationQuote {
            level,
            nonce: r.nonce()?,
            pcr_digest: r.opt_digest()?,
            credential_digest: r.opt_digest()?,
            signer_key_id: r.digest()?,
            signature: r.signature()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AttestationKey {
    pub keypair: SignKeypair,
    pub cert: KeyCertificate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcrPolicy(pub BTreeMap<usize, Digest>);

#[derive(Debug, Clone)]
struct SealedSlot {
    policy: PcrPolicy,
    payload: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct TpmState {
    endorsement: SignKeypair,
    endorsement_cert: KeyCertificate,
    attestation_keys: BTreeMap<Digest, AttestationKey>,
    pcr_bank: [Digest; PCR_COUNT],
    sealed_slots: BTreeMap<u32, SealedSlot>,
    revoked: BTreeSet<Digest>,
    measurement_log: Vec<(usize, Digest)>,
}

impl TpmState {
    /// Fresh TPM with a manufacturer-certified endorsement key, zeroed PCRs
    /// and no attestation keys.
    pub fn create(rng: &mut SimRng, manufacturer: &Authority) -> Self {
        let endorsement = SignKeypair::generate(rng);
        let endorsement_cert = manufacturer.certify(KeyPurpose::Endorsement, &endorsement.public);
        TpmState {
            endorsement,
            endorsement_cert,
            attestation_keys: BTreeMap::new(),
            pcr_bank: [Digest::ZERO; PCR_COUNT],
            sealed_slots: BTreeMap::new(),
            revoked: BTreeSet::new(),
            measurement_log: Vec::new(),
        }
    }

    /// Generate an attestation key and have `issuer` certify it.
    pub fn create_attestation_key(&mut self, rng: &mut SimRng, issuer: &Authority) -> Digest {
        let keypair = SignKeypair::generate(rng);
        let cert = issuer.certify(KeyPurpose::Attestation, &keypair.public);
        let id = keypair.key_id;
        self.attestation_keys.insert(id, AttestationKey { keypair, cert });
        id
    }

    pub fn endorsement_key_id(&self) -> Digest {
        self.endorsement.key_id
    }

    pub fn endorsement_public(&self) -> (PublicKey, &KeyCertificate) {
        (self.endorsement.public, &self.endorsement_cert)
    }

    pub fn attestation_key(&self, key_id: &Digest) -> Option<&AttestationKey> {
        self.attestation_keys.get(key_id)
    }

    pub fn pcr_bank(&self) -> &[Digest; PCR_COUNT] {
        &self.pcr_bank
    }

    pub fn measurement_log(&self) -> &[(usize, Digest)] {
        &self.measurement_log
    }

    pub fn revoked(&self) -> &BTreeSet<Digest> {
        &self.revoked
    }

    pub fn current_digest(&self, selection: PcrSelection) -> Digest {
        pcr_digest(&self.pcr_bank, selection)
    }

    pub fn pcr_extend(&mut self, index: usize, measurement: Digest) -> Result<Digest, TpmError> {
        if index >= PCR_COUNT {
            return Err(TpmError::IndexOutOfRange(index));
        }
        let value = extend_value(&self.pcr_bank[index], &measurement);
        self.pcr_bank[index] = value;
        self.measurement_log.push((index, measurement));
        Ok(value)
    }

    /// True when replaying the measurement log reproduces the PCR bank.
    pub fn log_consistent(&self) -> bool {
        replay_log(&self.measurement_log) == self.pcr_bank
    }

    pub fn ek_prove_liveness(&self, challenge: &Nonce) -> AttestationQuote {
        let key = &self.endorsement;
        let bytes = AttestationQuote::canonical_bytes(
            AssertionLevel::Liveness,
            challenge,
            None,
            None,
            &key.key_id,
        );
        AttestationQuote {
            level: AssertionLevel::Liveness,
            nonce: *challenge,
            pcr_digest: None,
            credential_digest: None,
            signer_key_id: key.key_id,
            signature: key.sign(&bytes),
        }
    }

    fn usable_aik(&self, aik: &Digest) -> Result<&AttestationKey, TpmError> {
        if self.revoked.contains(aik) {
            return Err(TpmError::KeyRevoked);
        }
        self.attestation_keys.get(aik).ok_or(TpmError::UnknownKey)
    }

    pub fn quote_system_state(
        &self,
        challenge: &Nonce,
        selection: PcrSelection,
        aik: &Digest,
    ) -> Result<AttestationQuote, TpmError> {
        let key = &self.usable_aik(aik)?.keypair;
        let digest = self.current_digest(selection);
        let bytes = AttestationQuote::canonical_bytes(
            AssertionLevel::SystemIntegrity,
            challenge,
            Some(&digest),
            None,
            &key.key_id,
        );
        Ok(AttestationQuote {
            level: AssertionLevel::SystemIntegrity,
            nonce: *challenge,
            pcr_digest: Some(digest),
            credential_digest: None,
            signer_key_id: key.key_id,
            signature: key.sign(&bytes),
        })
    }

    /// `accepted` is the highest level the peer has accepted from this
    /// platform in the current session.
    pub fn attest_credential(
        &self,
        credential_bytes: &[u8],
        challenge: &Nonce,
        selection: PcrSelection,
        aik: &Digest,
        accepted: Option<AssertionLevel>,
    ) -> Result<AttestationQuote, TpmError> {
        if accepted < Some(AssertionLevel::SystemIntegrity) {
            return Err(TpmError::OrderingViolation);
        }
        let key = &self.usable_aik(aik)?.keypair;
        let digest = self.current_digest(selection);
        let cred = hash(credential_bytes);
        let bytes = AttestationQuote::canonical_bytes(
            AssertionLevel::CredentialIntegrity,
            challenge,
            Some(&digest),
            Some(&cred),
            &key.key_id,
        );
        Ok(AttestationQuote {
            level: AssertionLevel::CredentialIntegrity,
            nonce: *challenge,
            pcr_digest: Some(digest),
            credential_digest: Some(cred),
            signer_key_id: key.key_id,
            signature: key.sign(&bytes),
        })
    }

    /// Policy pinning the current values of the selected registers.
    pub fn policy(&self, selection: PcrSelection) -> PcrPolicy {
        PcrPolicy(selection.indices().map(|i| (i, self.pcr_bank[i])).collect())
    }

    fn policy_holds(&self, policy: &PcrPolicy) -> bool {
        policy.0.iter().all(|(i, d)| self.pcr_bank.get(*i) == Some(d))
    }

    pub fn seal(&mut self, slot: u32, policy: PcrPolicy, payload: Vec<u8>) -> Result<(), TpmError> {
        if self.sealed_slots.contains_key(&slot) {
            return Err(TpmError::SlotOccupied(slot));
        }
        if let Some(&i) = policy.0.keys().find(|&&i| i >= PCR_COUNT) {
            return Err(TpmError::IndexOutOfRange(i));
        }
        self.sealed_slots.insert(slot, SealedSlot { policy, payload });
        Ok(())
    }

    pub fn unseal(&self, slot: u32) -> Result<Vec<u8>, TpmError> {
        let sealed = self.sealed_slots.get(&slot).ok_or(TpmError::SlotEmpty(slot))?;
        if !self.policy_holds(&sealed.policy) {
            return Err(TpmError::PolicyMismatch);
        }
        Ok(sealed.payload.clone())
    }

    /// Raw slot contents regardless of policy. Simulator inspection only; no
    /// protocol code path calls this.
    pub fn inspect_sealed(&self, slot: u32) -> Option<&[u8]> {
        self.sealed_slots.get(&slot).map(|s| s.payload.as_slice())
    }

    /// Replace a slot's payload, keeping its policy. Requires the policy to
    /// hold, exactly like unseal.
    pub fn reseal(&mut self, slot: u32, payload: Vec<u8>) -> Result<(), TpmError> {
        let holds = {
            let sealed = self.sealed_slots.get(&slot).ok_or(TpmError::SlotEmpty(slot))?;
            self.policy_holds(&sealed.policy)
        };
        if !holds {
            return Err(TpmError::PolicyMismatch);
        }
        self.sealed_slots.get_mut(&slot).expect("checked above").payload = payload;
        Ok(())
    }

    /// Revoke an attestation key. The endorsement key is not revocable.
    pub fn revoke_key(&mut self, key_id: &Digest) -> Result<(), TpmError> {
        if !self.attestation_keys.contains_key(key_id) {
            return Err(TpmError::UnknownKey);
        }
        self.revoked.insert(*key_id);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum QuoteRejection {
    #[error("challenge replayed")]
    ReplayDetected,
    #[error("challenge mismatch")]
    NonceMismatch,
    #[error("malformed quote")]
    Malformed,
    #[error("signer key not certified for this assertion")]
    UntrustedKey,
    #[error("bad signature")]
    BadSignature,
    #[error("key revoked")]
    KeyRevoked,
    #[error("platform state differs from reference")]
    IntegrityMismatch,
    #[error("credential digest differs from registry copy")]
    CredentialMismatch,
    #[error("assertion level presented out of order")]
    OrderingViolation,
}

/// Bounded set of recently seen challenges.
#[derive(Debug, Clone, Default)]
pub struct ReplayWindow {
    order: VecDeque<Nonce>,
    seen: BTreeSet<Nonce>,
}

impl ReplayWindow {
    /// Returns false when `nonce` is already in the window.
    pub fn admit(&mut self, nonce: Nonce) -> bool {
        if !self.seen.insert(nonce) {
            return false;
        }
        self.order.push_back(nonce);
        if self.order.len() > REPLAY_WINDOW {
            let old = self.order.pop_front().expect("non-empty");
            self.seen.remove(&old);
        }
        true
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// The signer's public key and its certificate, as presented to a verifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresentedKey {
    pub public: PublicKey,
    pub cert: KeyCertificate,
}

impl PresentedKey {
    pub fn encode(&self, w: &mut Writer) {
        w.bytes(&self.public.0);
        self.cert.encode(w);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(PresentedKey {
            public: r.public_key()?,
            cert: KeyCertificate::decode(r)?,
        })
    }
}

/// What the verifier expects of one quote.
#[derive(Debug, Clone, Copy)]
pub struct Expectation<'a> {
    pub challenge: Nonce,
    /// Certifier of the signer key (manufacturer or privacy CA).
    pub anchor: &'a PublicKey,
    pub revoked: &'a BTreeSet<Digest>,
    /// Known-good PCR digest, required for levels 2 and 3.
    pub reference_pcr: Option<&'a Digest>,
    /// Digest of the verifier's copy of the attested credential, required
    /// for level 3.
    pub credential: Option<&'a Digest>,
    /// Highest level already accepted from this attester in the session.
    pub accepted: Option<AssertionLevel>,
}

#[derive(Debug, Clone, Default)]
pub struct QuoteVerifier {
    window: ReplayWindow,
}

impl QuoteVerifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn verify(
        &mut self,
        quote: &AttestationQuote,
        signer: &PresentedKey,
        expect: &Expectation<'_>,
    ) -> Result<(), QuoteRejection> {
        if let Some(pre) = quote.level.prerequisite() {
            if expect.accepted < Some(pre) {
                return Err(QuoteRejection::OrderingViolation);
            }
        }
        if !quote.well_formed() {
            return Err(QuoteRejection::Malformed);
        }
        if quote.nonce != expect.challenge {
            return Err(QuoteRejection::NonceMismatch);
        }
        let purpose = match quote.level {
            AssertionLevel::Liveness => KeyPurpose::Endorsement,
            _ => KeyPurpose::Attestation,
        };
        if signer.public.key_id() != quote.signer_key_id
            || signer.cert.subject_key != signer.public
            || signer.cert.purpose != purpose
            || !signer.cert.verify(expect.anchor)
        {
            return Err(QuoteRejection::UntrustedKey);
        }
        if !verify(&signer.public, &quote.signed_bytes(), &quote.signature) {
            return Err(QuoteRejection::BadSignature);
        }
        if expect.revoked.contains(&quote.signer_key_id) {
            return Err(QuoteRejection::KeyRevoked);
        }
        if quote.level != AssertionLevel::Liveness
            && quote.pcr_digest.as_ref() != expect.reference_pcr
        {
            return Err(QuoteRejection::IntegrityMismatch);
        }
        if quote.level == AssertionLevel::CredentialIntegrity {
            let expected = expect.credential.copied();
            if quote.credential_digest != expected {
                return Err(QuoteRejection::CredentialMismatch);
            }
        }
        // Freshness is checked last so a rejected quote does not burn the challenge.
        if !self.window.admit(quote.nonce) {
            return Err(QuoteRejection::ReplayDetected);
        }
        Ok(())
    }
}

/// Label distinguishing one verifier's view of an attestation key from
/// another's.
pub fn pseudonym(aik: &Digest, verifier: &str) -> Digest {
    hash_parts(&[b"transtrust/pseudonym", &aik.0, verifier.as_bytes()])
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixture {
        rng: SimRng,
        maker: Authority,
        tpm: TpmState,
        aik: Digest,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = SimRng::from_seed(seed);
        let maker = Authority::new("maker", &mut rng);
        let mut tpm = TpmState::create(&mut rng, &maker);
        let aik = tpm.create_attestation_key(&mut rng, &maker);
        Fixture { rng, maker, tpm, aik }
    }

    fn ek(tpm: &TpmState) -> PresentedKey {
        let (public, cert) = tpm.endorsement_public();
        PresentedKey { public, cert: cert.clone() }
    }

    fn aik_key(tpm: &TpmState, aik: &Digest) -> PresentedKey {
        let k = tpm.attestation_key(aik).unwrap();
        PresentedKey { public: k.keypair.public, cert: k.cert.clone() }
    }

    fn expect<'a>(
        challenge: Nonce,
        anchor: &'a PublicKey,
        revoked: &'a BTreeSet<Digest>,
        reference: Option<&'a Digest>,
        accepted: Option<AssertionLevel>,
    ) -> Expectation<'a> {
        Expectation {
            challenge,
            anchor,
            revoked,
            reference_pcr: reference,
            credential: None,
            accepted,
        }
    }

    #[test]
    fn create_is_seed_deterministic() {
        let a = fixture(9);
        let b = fixture(9);
        let c = fixture(10);
        assert_eq!(a.tpm.endorsement_key_id(), b.tpm.endorsement_key_id());
        assert_ne!(a.tpm.endorsement_key_id(), c.tpm.endorsement_key_id());
        assert_eq!(a.tpm.pcr_bank(), &[Digest::ZERO; PCR_COUNT]);
        assert!(a.tpm.measurement_log().is_empty());
    }

    #[test]
    fn extend_follows_hash_chain_definition() {
        let mut f = fixture(1);
        let m = hash(b"bootloader");
        let v = f.tpm.pcr_extend(0, m).unwrap();
        let mut concat = vec![0u8; 32];
        concat.extend_from_slice(&m.0);
        assert_eq!(v, hash(&concat));
        assert_eq!(f.tpm.pcr_extend(8, m), Err(TpmError::IndexOutOfRange(8)));
    }

    #[test]
    fn extend_is_order_sensitive() {
        let (m1, m2) = (hash(b"kernel"), hash(b"initrd"));
        let mut a = fixture(1).tpm;
        let mut b = fixture(1).tpm;
        a.pcr_extend(3, m1).unwrap();
        a.pcr_extend(3, m2).unwrap();
        b.pcr_extend(3, m2).unwrap();
        b.pcr_extend(3, m1).unwrap();
        assert_ne!(a.pcr_bank()[3], b.pcr_bank()[3]);
        assert!(a.log_consistent() && b.log_consistent());
        assert_eq!(replay_log(a.measurement_log()), *a.pcr_bank());
    }

    #[test]
    fn liveness_round_trip_and_replay() {
        let mut f = fixture(2);
        let anchor = f.maker.public();
        let revoked = BTreeSet::new();
        let challenge = f.rng.nonce();
        let q = f.tpm.ek_prove_liveness(&challenge);
        let mut v = QuoteVerifier::new();
        let e = expect(challenge, &anchor, &revoked, None, None);
        assert_eq!(v.verify(&q, &ek(&f.tpm), &e), Ok(()));
        assert_eq!(v.verify(&q, &ek(&f.tpm), &e), Err(QuoteRejection::ReplayDetected));
    }

    #[test]
    fn liveness_signed_by_other_key_is_rejected() {
        let mut f = fixture(3);
        let anchor = f.maker.public();
        let revoked = BTreeSet::new();
        let challenge = f.rng.nonce();
        let honest = f.tpm.ek_prove_liveness(&challenge);
        // re-sign the same statement with the attestation key
        let aik = f.tpm.attestation_key(&f.aik).unwrap();
        let mut forged = honest.clone();
        forged.signer_key_id = aik.keypair.key_id;
        forged.signature = aik.keypair.sign(&forged.signed_bytes());
        let mut v = QuoteVerifier::new();
        let e = expect(challenge, &anchor, &revoked, None, None);
        assert_eq!(
            v.verify(&forged, &aik_key(&f.tpm, &f.aik), &e),
            Err(QuoteRejection::UntrustedKey)
        );
        assert_eq!(v.verify(&forged, &ek(&f.tpm), &e), Err(QuoteRejection::UntrustedKey));
    }

    #[test]
    fn system_state_quote_detects_extra_measurement() {
        let mut f = fixture(4);
        let anchor = f.maker.public();
        let revoked = BTreeSet::new();
        f.tpm.pcr_extend(0, hash(b"firmware")).unwrap();
        let reference = f.tpm.current_digest(PcrSelection::ALL);
        let mut v = QuoteVerifier::new();
        let c1 = f.rng.nonce();
        let q = f.tpm.quote_system_state(&c1, PcrSelection::ALL, &f.aik).unwrap();
        let e = expect(c1, &anchor, &revoked, Some(&reference), Some(AssertionLevel::Liveness));
        assert_eq!(v.verify(&q, &aik_key(&f.tpm, &f.aik), &e), Ok(()));

        f.tpm.pcr_extend(5, hash(b"rootkit")).unwrap();
        let c2 = f.rng.nonce();
        let q = f.tpm.quote_system_state(&c2, PcrSelection::ALL, &f.aik).unwrap();
        let e = expect(c2, &anchor, &revoked, Some(&reference), Some(AssertionLevel::Liveness));
        assert_eq!(
            v.verify(&q, &aik_key(&f.tpm, &f.aik), &e),
            Err(QuoteRejection::IntegrityMismatch)
        );
    }

    #[test]
    fn selection_is_canonical() {
        let mut f = fixture(5);
        f.tpm.pcr_extend(2, hash(b"x")).unwrap();
        let a = PcrSelection::new(&[0, 2]).unwrap();
        let b = PcrSelection::new(&[2, 0]).unwrap();
        assert_eq!(f.tpm.current_digest(a), f.tpm.current_digest(b));
        assert_eq!(PcrSelection::new(&[]), Err(TpmError::EmptySelection));
        let mut concat = f.tpm.pcr_bank()[0].0.to_vec();
        concat.extend_from_slice(&f.tpm.pcr_bank()[2].0);
        assert_eq!(f.tpm.current_digest(a), hash(&concat));
    }

    #[test]
    fn level_two_without_level_one_is_out_of_order() {
        let mut f = fixture(6);
        let anchor = f.maker.public();
        let revoked = BTreeSet::new();
        let reference = f.tpm.current_digest(PcrSelection::ALL);
        let c = f.rng.nonce();
        let q = f.tpm.quote_system_state(&c, PcrSelection::ALL, &f.aik).unwrap();
        let e = expect(c, &anchor, &revoked, Some(&reference), None);
        assert_eq!(
            QuoteVerifier::new().verify(&q, &aik_key(&f.tpm, &f.aik), &e),
            Err(QuoteRejection::OrderingViolation)
        );
    }

    #[test]
    fn credential_attestation() {
        let mut f = fixture(7);
        let anchor = f.maker.public();
        let revoked = BTreeSet::new();
        let reference = f.tpm.current_digest(PcrSelection::ALL);
        let gamma = b"gamma bytes".to_vec();
        let c = f.rng.nonce();
        assert_eq!(
            f.tpm.attest_credential(&gamma, &c, PcrSelection::ALL, &f.aik, Some(AssertionLevel::Liveness)),
            Err(TpmError::OrderingViolation)
        );
        let q = f
            .tpm
            .attest_credential(&gamma, &c, PcrSelection::ALL, &f.aik, Some(AssertionLevel::SystemIntegrity))
            .unwrap();
        assert_eq!(q.credential_digest, Some(hash(&gamma)));
        let key = aik_key(&f.tpm, &f.aik);
        let mut e = expect(c, &anchor, &revoked, Some(&reference), Some(AssertionLevel::SystemIntegrity));
        let mut altered = gamma.clone();
        altered[3] ^= 1;
        let altered = hash(&altered);
        e.credential = Some(&altered);
        let mut v = QuoteVerifier::new();
        assert_eq!(v.verify(&q, &key, &e), Err(QuoteRejection::CredentialMismatch));
        let good = hash(&gamma);
        e.credential = Some(&good);
        assert_eq!(v.verify(&q, &key, &e), Ok(()));
    }

    #[test]
    fn sealed_storage_binds_to_pcrs() {
        let mut f = fixture(8);
        let policy = f.tpm.policy(PcrSelection::new(&[0, 1]).unwrap());
        f.tpm.seal(1, policy.clone(), b"42".to_vec()).unwrap();
        assert_eq!(f.tpm.seal(1, policy, b"x".to_vec()), Err(TpmError::SlotOccupied(1)));
        assert_eq!(f.tpm.unseal(1).unwrap(), b"42");
        assert_eq!(f.tpm.unseal(2), Err(TpmError::SlotEmpty(2)));
        f.tpm.reseal(1, b"41".to_vec()).unwrap();
        assert_eq!(f.tpm.unseal(1).unwrap(), b"41");
        // a register outside the policy does not matter
        f.tpm.pcr_extend(7, hash(b"app")).unwrap();
        assert!(f.tpm.unseal(1).is_ok());
        f.tpm.pcr_extend(1, hash(b"rogue")).unwrap();
        assert_eq!(f.tpm.unseal(1), Err(TpmError::PolicyMismatch));
        assert_eq!(f.tpm.reseal(1, b"0".to_vec()), Err(TpmError::PolicyMismatch));
    }

    #[test]
    fn revocation_scope() {
        let mut f = fixture(11);
        let anchor = f.maker.public();
        let c = f.rng.nonce();
        assert_eq!(f.tpm.revoke_key(&hash(b"nobody")), Err(TpmError::UnknownKey));
        let ek_id = f.tpm.endorsement_key_id();
        assert_eq!(f.tpm.revoke_key(&ek_id), Err(TpmError::UnknownKey));
        let aik = f.aik;
        f.tpm.revoke_key(&aik).unwrap();
        assert_eq!(
            f.tpm.quote_system_state(&c, PcrSelection::ALL, &aik),
            Err(TpmError::KeyRevoked)
        );
        let q = f.tpm.ek_prove_liveness(&c);
        let revoked = f.tpm.revoked().clone();
        let e = expect(c, &anchor, &revoked, None, None);
        assert_eq!(QuoteVerifier::new().verify(&q, &ek(&f.tpm), &e), Ok(()));
    }

    #[test]
    fn verifier_consults_revocation_list_even_if_tpm_signs() {
        // a TPM that ignores its own revocation set still gets caught
        let mut f = fixture(12);
        let anchor = f.maker.public();
        let reference = f.tpm.current_digest(PcrSelection::ALL);
        let c = f.rng.nonce();
        let q = f.tpm.quote_system_state(&c, PcrSelection::ALL, &f.aik).unwrap();
        let revoked: BTreeSet<Digest> = [f.aik].into_iter().collect();
        let e = expect(c, &anchor, &revoked, Some(&reference), Some(AssertionLevel::Liveness));
        assert_eq!(
            QuoteVerifier::new().verify(&q, &aik_key(&f.tpm, &f.aik), &e),
            Err(QuoteRejection::KeyRevoked)
        );
    }

    #[test]
    fn replay_window_is_bounded() {
        let mut w = ReplayWindow::default();
        let n0 = Nonce::from_counter(0, 0);
        assert!(w.admit(n0));
        assert!(!w.admit(n0));
        for i in 1..=REPLAY_WINDOW as u64 {
            assert!(w.admit(Nonce::from_counter(0, i)));
        }
        assert_eq!(w.len(), REPLAY_WINDOW);
        // n0 has been evicted
        assert!(w.admit(n0));
    }

    #[test]
    fn quote_encoding_round_trip() {
        let mut f = fixture(13);
        let c = f.rng.nonce();
        let q = f.tpm.quote_system_state(&c, PcrSelection::ALL, &f.aik).unwrap();
        let mut w = Writer::new();
        q.encode(&mut w);
        let bytes = w.finish();
        let mut r = Reader::new(&bytes);
        assert_eq!(AttestationQuote::decode(&mut r).unwrap(), q);
        r.finish().unwrap();
    }

    #[test]
    fn canonical_quote_layout_is_fixed() {
        let nonce = Nonce([7u8; 12]);
        let signer = Digest([9u8; 32]);
        let enc = AttestationQuote::canonical_bytes(AssertionLevel::Liveness, &nonce, None, None, &signer);
        // five length-prefixed fields: 1 + 12 + 32 + 32 + 32 octets
        assert_eq!(enc.len(), 5 * 4 + 1 + 12 + 32 * 3);
        assert_eq!(&enc[..5], &[0, 0, 0, 1, 1]);
        assert_eq!(&enc[5..9], &[0, 0, 0, 12]);
        assert_eq!(&enc[enc.len() - 32..], &signer.0);
    }

    #[test]
    fn pseudonyms_differ_per_verifier() {
        let aik = hash(b"aik");
        assert_ne!(pseudonym(&aik, "mno"), pseudonym(&aik, "owner"));
        assert_eq!(pseudonym(&aik, "mno"), pseudonym(&aik, "mno"));
    }
}
