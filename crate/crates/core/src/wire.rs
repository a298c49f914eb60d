//! Application payloads carried in envelopes, before hop sealing.
//!
//! Each payload can report the identity fields it exposes in plaintext:
//! agent names from τ/σ/γ structures and γ serials. Opaque ciphertext
//! exposes nothing.

use std::collections::BTreeSet;

use crate::codec::{DecodeError, Reader, Writer};
use crate::credentials::{SubordinationCredential, TrustCredential};
use crate::crypto::{Digest, DhPublic, Nonce, Signature};
use crate::fabric::MessageKind;
use crate::tpm::{AssertionLevel, AttestationQuote, PresentedKey};

pub type Identities = BTreeSet<String>;

pub fn gamma_identity(serial: u64) -> String {
    format!("gamma-serial:{serial}")
}

fn agent_name(id: &crate::credentials::ActorId, out: &mut Identities) {
    if !id.is_principal() {
        out.insert(id.name.clone());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub dh_public: DhPublic,
    pub challenge: Nonce,
    pub gamma_challenge: Option<Nonce>,
}

impl Hello {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.dh_public.0).bytes(&self.challenge.0);
        match &self.gamma_challenge {
            Some(n) => w.u8(1).bytes(&n.0),
            None => w.u8(0),
        };
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let dh_public = r.dh_public()?;
        let challenge = r.nonce()?;
        let gamma_challenge = match r.u8()? {
            0 => None,
            1 => Some(r.nonce()?),
            _ => return Err(DecodeError("bad option tag")),
        };
        r.finish()?;
        Ok(Hello {
            dh_public,
            challenge,
            gamma_challenge,
        })
    }
}

/// Attester's certified keys, sent before its quotes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attest {
    pub endorsement: PresentedKey,
    pub attestation: PresentedKey,
}

impl Attest {
    pub fn write(&self, w: &mut Writer) {
        self.endorsement.encode(w);
        self.attestation.encode(w);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Attest {
            endorsement: PresentedKey::decode(r)?,
            attestation: PresentedKey::decode(r)?,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let a = Self::read(&mut r)?;
        r.finish()?;
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuoteMsg {
    pub quote: AttestationQuote,
    /// Credential bytes the verifier has no copy of (attested claims).
    pub disclosed: Vec<u8>,
}

impl QuoteMsg {
    pub fn kind(&self) -> MessageKind {
        quote_kind(self.quote.level)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.quote.encode(&mut w);
        w.bytes(&self.disclosed);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let quote = AttestationQuote::decode(&mut r)?;
        let disclosed = r.bytes()?.to_vec();
        r.finish()?;
        Ok(QuoteMsg { quote, disclosed })
    }
}

pub fn quote_kind(level: AssertionLevel) -> MessageKind {
    match level {
        AssertionLevel::Liveness => MessageKind::QuoteL1,
        AssertionLevel::SystemIntegrity => MessageKind::QuoteL2,
        AssertionLevel::CredentialIntegrity => MessageKind::QuoteL3,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accept {
    pub level: u8,
}

impl Accept {
    pub fn encode(&self) -> Vec<u8> {
        Writer::new().u8(self.level).finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let level = r.u8()?;
        r.finish()?;
        Ok(Accept { level })
    }
}

/// End-to-end sealed blob between an agent and its own principal, relayed
/// through other actors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tunnel {
    pub ephemeral: Option<DhPublic>,
    pub ciphertext: Vec<u8>,
}

impl Tunnel {
    fn write(&self, w: &mut Writer) {
        match &self.ephemeral {
            Some(e) => w.u8(1).bytes(&e.0),
            None => w.u8(0),
        };
        w.bytes(&self.ciphertext);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let ephemeral = match r.u8()? {
            0 => None,
            1 => Some(r.dh_public()?),
            _ => return Err(DecodeError("bad option tag")),
        };
        Ok(Tunnel {
            ephemeral,
            ciphertext: r.bytes()?.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GammaAuth {
    Direct { serial: u64, response: [u8; 32] },
    Tunneled(Tunnel),
}

impl GammaAuth {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            GammaAuth::Direct { serial, response } => {
                w.u8(0).u64(*serial).bytes(response);
            }
            GammaAuth::Tunneled(t) => {
                w.u8(1);
                t.write(&mut w);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let m = match r.u8()? {
            0 => GammaAuth::Direct {
                serial: r.u64()?,
                response: r.array32()?,
            },
            1 => GammaAuth::Tunneled(Tunnel::read(&mut r)?),
            _ => return Err(DecodeError("bad gamma-auth tag")),
        };
        r.finish()?;
        Ok(m)
    }

    pub fn identities(&self) -> Identities {
        match self {
            GammaAuth::Direct { serial, .. } => [gamma_identity(*serial)].into(),
            GammaAuth::Tunneled(_) => Identities::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TauPresent {
    Plain {
        tau: TrustCredential,
        group_proof: Option<[u8; 32]>,
    },
    Tunneled(Tunnel),
}

impl TauPresent {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            TauPresent::Plain { tau, group_proof } => {
                w.u8(0);
                tau.encode(&mut w);
                match group_proof {
                    Some(p) => w.u8(1).bytes(p),
                    None => w.u8(0),
                };
            }
            TauPresent::Tunneled(t) => {
                w.u8(1);
                t.write(&mut w);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let m = match r.u8()? {
            0 => {
                let tau = TrustCredential::decode(&mut r)?;
                let group_proof = match r.u8()? {
                    0 => None,
                    1 => Some(r.array32()?),
                    _ => return Err(DecodeError("bad option tag")),
                };
                TauPresent::Plain { tau, group_proof }
            }
            1 => TauPresent::Tunneled(Tunnel::read(&mut r)?),
            _ => return Err(DecodeError("bad tau-present tag")),
        };
        r.finish()?;
        Ok(m)
    }

    pub fn identities(&self) -> Identities {
        let mut out = Identities::new();
        if let TauPresent::Plain { tau, .. } = self {
            agent_name(&tau.subject, &mut out);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigmaPresent {
    pub sigma: SubordinationCredential,
}

impl SigmaPresent {
    pub fn encode(&self) -> Vec<u8> {
        Writer::new().bytes(&self.sigma.to_bytes()).finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let sigma = SubordinationCredential::from_bytes(r.bytes()?)?;
        r.finish()?;
        Ok(SigmaPresent { sigma })
    }

    pub fn identities(&self) -> Identities {
        let mut out = Identities::new();
        agent_name(&self.sigma.holder, &mut out);
        out
    }
}

/// Payload protected by a secret shared end to end, either sealed or only
/// authenticated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Protected {
    Encrypted(Vec<u8>),
    MacOnly { body: Vec<u8>, tag: [u8; 32] },
}

impl Protected {
    fn write(&self, w: &mut Writer) {
        match self {
            Protected::Encrypted(ct) => {
                w.u8(0).bytes(ct);
            }
            Protected::MacOnly { body, tag } => {
                w.u8(1).bytes(body).bytes(tag);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(Protected::Encrypted(r.bytes()?.to_vec())),
            1 => Ok(Protected::MacOnly {
                body: r.bytes()?.to_vec(),
                tag: r.array32()?,
            }),
            _ => Err(DecodeError("bad protection tag")),
        }
    }
}

/// X(τ_a): the pledge the relying agent forwards to its principal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedTau {
    pub ephemeral: DhPublic,
    pub signer: PresentedKey,
    pub ephemeral_sig: Signature,
    pub body: Protected,
}

impl WrappedTau {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.ephemeral.0);
        self.signer.encode(&mut w);
        w.bytes(&self.ephemeral_sig.0);
        self.body.write(&mut w);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let m = WrappedTau {
            ephemeral: r.dh_public()?,
            signer: PresentedKey::decode(&mut r)?,
            ephemeral_sig: r.signature()?,
            body: Protected::read(&mut r)?,
        };
        r.finish()?;
        Ok(m)
    }

    pub fn identities(&self) -> Identities {
        let mut out = Identities::new();
        if let Protected::MacOnly { body, .. } = &self.body {
            if let Ok(tau) = TrustCredential::from_bytes(body) {
                agent_name(&tau.subject, &mut out);
            }
        }
        out
    }
}

/// τ as forwarded to the issuing principal for redemption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TauView {
    Full(TrustCredential),
    /// Subject withheld; the issuer resolves it from its own registry.
    Redacted { tpm_key_id: Digest },
}

impl TauView {
    pub fn tpm_key_id(&self) -> Digest {
        match self {
            TauView::Full(t) => t.tpm_key_id,
            TauView::Redacted { tpm_key_id } => *tpm_key_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardedQuote {
    pub quote: AttestationQuote,
    pub signer: PresentedKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthRequest {
    Tunneled(Tunnel),
    Redeem(TauView),
    Forward {
        sigma: SubordinationCredential,
        service: String,
        evidence: Option<ForwardedQuote>,
    },
}

impl AuthRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            AuthRequest::Tunneled(t) => {
                w.u8(0);
                t.write(&mut w);
            }
            AuthRequest::Redeem(TauView::Full(tau)) => {
                w.u8(1);
                tau.encode(&mut w);
            }
            AuthRequest::Redeem(TauView::Redacted { tpm_key_id }) => {
                w.u8(2).digest(tpm_key_id);
            }
            AuthRequest::Forward {
                sigma,
                service,
                evidence,
            } => {
                w.u8(3).bytes(&sigma.to_bytes()).str(service);
                match evidence {
                    Some(f) => {
                        w.u8(1);
                        f.quote.encode(&mut w);
                        f.signer.encode(&mut w);
                    }
                    None => {
                        w.u8(0);
                    }
                }
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let m = match r.u8()? {
            0 => AuthRequest::Tunneled(Tunnel::read(&mut r)?),
            1 => AuthRequest::Redeem(TauView::Full(TrustCredential::decode(&mut r)?)),
            2 => AuthRequest::Redeem(TauView::Redacted {
                tpm_key_id: r.digest()?,
            }),
            3 => {
                let sigma = SubordinationCredential::from_bytes(r.bytes()?)?;
                let service = r.string()?;
                let evidence = match r.u8()? {
                    0 => None,
                    1 => Some(ForwardedQuote {
                        quote: AttestationQuote::decode(&mut r)?,
                        signer: PresentedKey::decode(&mut r)?,
                    }),
                    _ => return Err(DecodeError("bad option tag")),
                };
                AuthRequest::Forward {
                    sigma,
                    service,
                    evidence,
                }
            }
            _ => return Err(DecodeError("bad auth-request tag")),
        };
        r.finish()?;
        Ok(m)
    }

    pub fn identities(&self) -> Identities {
        let mut out = Identities::new();
        match self {
            AuthRequest::Redeem(TauView::Full(tau)) => agent_name(&tau.subject, &mut out),
            AuthRequest::Forward { sigma, .. } => agent_name(&sigma.holder, &mut out),
            _ => {}
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuthAck {
    pub step: u8,
    /// 0 for success, otherwise a decision reason code.
    pub verdict: u8,
    pub subject_key: Option<Digest>,
}

impl AuthAck {
    pub fn encode(&self) -> Vec<u8> {
        Writer::new()
            .u8(self.step)
            .u8(self.verdict)
            .opt_digest(self.subject_key.as_ref())
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let m = AuthAck {
            step: r.u8()?,
            verdict: r.u8()?,
            subject_key: r.opt_digest()?,
        };
        r.finish()?;
        Ok(m)
    }
}

/// Y(ack): the principal's acknowledgement carried back to the relying agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedAck {
    pub body: Protected,
}

impl WrappedAck {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.body.write(&mut w);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let body = Protected::read(&mut r)?;
        r.finish()?;
        Ok(WrappedAck { body })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceRequest {
    pub service: String,
    pub units: u64,
}

impl ServiceRequest {
    pub fn encode(&self) -> Vec<u8> {
        Writer::new().str(&self.service).u64(self.units).finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let m = ServiceRequest {
            service: r.string()?,
            units: r.u64()?,
        };
        r.finish()?;
        Ok(m)
    }
}

/// Grant or deny; `code` is a privilege level or a reason code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub code: u8,
}

impl Verdict {
    pub fn encode(&self) -> Vec<u8> {
        Writer::new().u8(self.code).finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let code = r.u8()?;
        r.finish()?;
        Ok(Verdict { code })
    }
}

/// Identity fields readable in a plaintext payload of the given kind.
pub fn plaintext_identities(kind: MessageKind, bytes: &[u8]) -> Result<Identities, DecodeError> {
    Ok(match kind {
        MessageKind::GammaAuth => GammaAuth::decode(bytes)?.identities(),
        MessageKind::TauPresent => TauPresent::decode(bytes)?.identities(),
        MessageKind::SigmaPresent => SigmaPresent::decode(bytes)?.identities(),
        MessageKind::WrappedTau => WrappedTau::decode(bytes)?.identities(),
        MessageKind::AuthRequest => AuthRequest::decode(bytes)?.identities(),
        _ => Identities::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::credentials::{ActorId, EnrolmentMode};

    fn tau() -> TrustCredential {
        TrustCredential {
            tpm_key_id: Digest([3; 32]),
            subject: ActorId::agent("phone-7", "mno"),
            mode: EnrolmentMode::PrincipalControlled,
            issuer_key_id: Digest([4; 32]),
            issuer_cert: Signature([5; 64]),
        }
    }

    #[test]
    fn plain_tau_exposes_subject_tunnel_does_not() {
        let plain = TauPresent::Plain {
            tau: tau(),
            group_proof: None,
        };
        let ids = plaintext_identities(MessageKind::TauPresent, &plain.encode()).unwrap();
        assert_eq!(ids, ["phone-7".to_string()].into());
        let tunneled = TauPresent::Tunneled(Tunnel {
            ephemeral: Some(DhPublic([9; 32])),
            ciphertext: tau().to_bytes(),
        });
        assert!(plaintext_identities(MessageKind::TauPresent, &tunneled.encode())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn redacted_redeem_hides_subject() {
        let full = AuthRequest::Redeem(TauView::Full(tau()));
        let red = AuthRequest::Redeem(TauView::Redacted {
            tpm_key_id: tau().tpm_key_id,
        });
        assert_eq!(AuthRequest::decode(&full.encode()).unwrap(), full);
        assert_eq!(AuthRequest::decode(&red.encode()).unwrap(), red);
        assert_eq!(full.identities().len(), 1);
        assert!(red.identities().is_empty());
    }

    #[test]
    fn direct_gamma_exposes_serial() {
        let g = GammaAuth::Direct {
            serial: 4,
            response: [0; 32],
        };
        assert_eq!(g.identities(), ["gamma-serial:4".to_string()].into());
        assert_eq!(GammaAuth::decode(&g.encode()).unwrap(), g);
    }

    #[test]
    fn trailing_bytes_are_malformed() {
        let mut enc = Verdict { code: 1 }.encode();
        enc.push(0);
        assert!(Verdict::decode(&enc).is_err());
    }
}
