//! Subordination: a dominating agent opens its principal's domain to a
//! device that has no domain access of its own.

use std::fmt;
use std::str::FromStr;

use crate::channels::{establish, level_challenge, ChannelSpec};
use crate::codec::Reader;
use crate::credentials::{Backing, SubordinationCredential, SubordinationScope};
use crate::crypto::Digest;
use crate::fabric::{MessageKind, SessionId};
use crate::tpm::{AssertionLevel, PcrSelection, PresentedKey, QuoteRejection, TpmError};
use crate::wire::{AuthAck, AuthRequest, ForwardedQuote, QuoteMsg, ServiceRequest, SigmaPresent};
use crate::world::World;

use super::restriction::channel_denial;
use super::{announce, AccessDecision, Privilege, Reason};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubordinationVariant {
    /// Every request from the subordinate is forwarded to the principal.
    Forward,
    /// The dominator decides from the subordinate's σ.
    LocalGrant,
}

impl SubordinationVariant {
    pub const ALL: [SubordinationVariant; 2] = [SubordinationVariant::Forward, SubordinationVariant::LocalGrant];

    pub fn as_str(self) -> &'static str {
        match self {
            SubordinationVariant::Forward => "forward",
            SubordinationVariant::LocalGrant => "local_grant",
        }
    }
}

impl fmt::Display for SubordinationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubordinationVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward" => Ok(SubordinationVariant::Forward),
            "local" | "local_grant" => Ok(SubordinationVariant::LocalGrant),
            _ => Err(format!("unknown subordination variant {s}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubordinationRequest {
    /// The dominator's own principal.
    pub principal: String,
    pub dominator: String,
    pub subordinate: String,
    pub service: String,
    pub variant: SubordinationVariant,
}

impl SubordinationRequest {
    pub fn new(principal: &str, dominator: &str, subordinate: &str, service: &str, variant: SubordinationVariant) -> Self {
        SubordinationRequest {
            principal: principal.to_string(),
            dominator: dominator.to_string(),
            subordinate: subordinate.to_string(),
            service: service.to_string(),
            variant,
        }
    }
}

/// What the dominator learned about the subordinate's backing.
#[derive(Debug, Clone)]
enum Evidence {
    /// Level-3 quote over the dedicated γ, verified by the dominator.
    Verified(ForwardedQuote),
    Rejected(QuoteRejection),
    /// The subordinate produced no quote (its TPM refused).
    Missing(Option<TpmError>),
    /// σ is backed by the platform key already attested in the session.
    Platform,
}

/// Checks shared by both deciders. `issuer_ok` covers signature and the
/// issuing domain.
fn judge(
    sigma: &SubordinationCredential,
    subordinate: &str,
    service: &str,
    issuer_ok: bool,
    revoked: bool,
    evidence: Result<(), Reason>,
) -> Reason {
    if !issuer_ok || sigma.scope != SubordinationScope::Subordinate || sigma.holder.name != subordinate {
        return Reason::Policy;
    }
    if revoked {
        return Reason::Revoked;
    }
    if let Err(r) = evidence {
        return r;
    }
    if !sigma.granted_services.contains(service) {
        return Reason::Policy;
    }
    Reason::Ok
}

fn rejection_reason(r: QuoteRejection) -> Reason {
    match r {
        QuoteRejection::KeyRevoked => Reason::Revoked,
        QuoteRejection::IntegrityMismatch => Reason::IntegrityMismatch,
        _ => Reason::Policy,
    }
}

fn decided(subject: crate::credentials::ActorId, reason: Reason) -> AccessDecision {
    match reason {
        Reason::Ok => AccessDecision::grant(subject, Privilege::Base),
        r => AccessDecision::deny(subject, r),
    }
}

pub fn run_subordination(world: &mut World, req: &SubordinationRequest) -> AccessDecision {
    world.fabric.reset_steps();
    let decision = subordinate(world, req);
    world.drain();
    decision
}

fn subordinate(world: &mut World, req: &SubordinationRequest) -> AccessDecision {
    let (p, a, sub) = (req.principal.as_str(), req.dominator.as_str(), req.subordinate.as_str());
    let subject = world.agent(sub).expect("subordinate exists").id.clone();

    // a logs on to its principal and proves its dominator role
    let upstream = match establish(world, &ChannelSpec::new(a, p).with_gamma_logon()) {
        Ok((sid, _)) => sid,
        Err(e) => return channel_denial(world, sub, &e),
    };
    if let Err(detail) = present_dominator(world, upstream, p, a) {
        return AccessDecision::deny(subject, Reason::Policy).with_detail(detail);
    }

    // a′ and a attest to each other
    let (sid, challenges) = match establish(world, &ChannelSpec::new(sub, a).mutual()) {
        Ok(x) => x,
        Err(e) => {
            let d = channel_denial(world, sub, &e);
            let s = world.session_between(sub, a);
            return announce(world, s, a, sub, d);
        }
    };
    let deny_in_session = |world: &mut World, reason: Reason, detail: String| {
        let d = AccessDecision::deny(subject.clone(), reason).with_detail(detail);
        announce(world, Some(sid), a, sub, d)
    };

    let sigma = match world.agent(sub).expect("subordinate exists").sigma.clone() {
        Some(s) => s,
        None => return deny_in_session(world, Reason::Policy, "no subordination credential".into()),
    };
    let (seq, sigma) = match world.transfer(sub, a, Some(sid), MessageKind::SigmaPresent, SigmaPresent { sigma }.encode(), SigmaPresent::decode) {
        Ok((seq, m)) => (seq, m.sigma),
        Err(f) => return deny_in_session(world, Reason::Policy, f.to_string()),
    };

    let evidence = match &sigma.backing {
        Backing::Dedicated {
            credential_digest,
            aik,
            ..
        } => backing_quote(world, sid, sub, a, challenges.from_initiator, *aik, credential_digest),
        Backing::Trust { tpm_key_id } => {
            let attested = world.session(sid).and_then(|s| s.attested_keys.get(sub).copied());
            if attested == Some(*tpm_key_id) {
                Evidence::Platform
            } else {
                Evidence::Rejected(QuoteRejection::UntrustedKey)
            }
        }
    };

    let request = ServiceRequest {
        service: req.service.clone(),
        units: 0,
    };
    let service = match world.transfer(sub, a, Some(sid), MessageKind::ServiceRequest, request.encode(), ServiceRequest::decode) {
        Ok((_, r)) => r.service,
        Err(f) => return deny_in_session(world, Reason::Policy, f.to_string()),
    };

    let decision = match req.variant {
        SubordinationVariant::LocalGrant => {
            let domain = world.agent(a).expect("dominator exists").id.domain.clone();
            let issuer_ok = domain.as_deref() == Some(sigma.issuer.name.as_str())
                && world
                    .principal(&sigma.issuer.name)
                    .map(|p| sigma.verify(&p.registry.public_key()))
                    .unwrap_or(false);
            let revoked = world.revocations.contains(&sigma.backing.key_id());
            let ev = match &evidence {
                Evidence::Verified(_) | Evidence::Platform => Ok(()),
                Evidence::Rejected(r) => Err(rejection_reason(*r)),
                Evidence::Missing(Some(TpmError::KeyRevoked)) => Err(Reason::Revoked),
                Evidence::Missing(_) => Err(Reason::Policy),
            };
            if !issuer_ok {
                world.reject(seq);
            }
            decided(subject.clone(), judge(&sigma, sub, &service, issuer_ok, revoked, ev))
        }
        SubordinationVariant::Forward => match forward(world, upstream, p, a, sub, &sigma, &service, &evidence) {
            Ok(reason) => decided(subject.clone(), reason),
            Err(f) => AccessDecision::deny(subject.clone(), Reason::Policy).with_detail(f),
        },
    };
    announce(world, Some(sid), a, sub, decision)
}

/// σ_a over the upstream session; the principal checks it names a, is a
/// dominator credential of its own, and matches the γ a logged on with.
fn present_dominator(world: &mut World, sid: SessionId, p: &str, a: &str) -> Result<(), String> {
    let sigma = world
        .agent(a)
        .expect("dominator exists")
        .sigma
        .clone()
        .ok_or("dominator holds no subordination credential")?;
    let (seq, sigma) = world
        .transfer(a, p, Some(sid), MessageKind::SigmaPresent, SigmaPresent { sigma }.encode(), SigmaPresent::decode)
        .map_err(|f| f.to_string())?;
    let sigma = sigma.sigma;
    let serial = world.session(sid).and_then(|s| s.gamma_serial);
    let principal = world.principal(p).expect("principal exists");
    let ok = sigma.verify(&principal.registry.public_key())
        && sigma.scope == SubordinationScope::Dominator
        && sigma.holder.name == a
        && serial.is_some()
        && principal.registry.serial_of(a) == serial;
    if !ok {
        world.reject(seq);
        return Err("dominator credential rejected".into());
    }
    Ok(())
}

fn backing_quote(
    world: &mut World,
    sid: SessionId,
    sub: &str,
    a: &str,
    (issued, received): (crate::crypto::Nonce, crate::crypto::Nonce),
    aik: Digest,
    credential_digest: &Digest,
) -> Evidence {
    let l3 = AssertionLevel::CredentialIntegrity;
    let holder = world.agent(sub).expect("subordinate exists");
    let slot = match &holder.sigma {
        Some(SubordinationCredential {
            backing: Backing::Dedicated { slot, .. },
            ..
        }) => *slot,
        _ => return Evidence::Missing(None),
    };
    let accepted = world.session(sid).and_then(|s| s.level(sub));
    let produced = holder.tpm.unseal(slot).and_then(|gamma| {
        holder
            .tpm
            .attest_credential(&gamma, &level_challenge(&received, l3), PcrSelection::ALL, &aik, accepted)
    });
    let quote = match produced {
        Ok(q) => q,
        Err(e) => return Evidence::Missing(Some(e)),
    };
    let signer = holder.presented_key(&aik).expect("backing key exists");
    let mut disclosed = crate::codec::Writer::new();
    signer.encode(&mut disclosed);
    let msg = QuoteMsg {
        quote,
        disclosed: disclosed.finish(),
    };
    let (seq, msg) = match world.transfer(sub, a, Some(sid), msg.kind(), msg.encode(), QuoteMsg::decode) {
        Ok(x) => x,
        Err(_) => return Evidence::Rejected(QuoteRejection::Malformed),
    };
    let signer = match decode_signer(&msg.disclosed) {
        Some(s) if s.public.key_id() == aik && msg.quote.level == l3 => s,
        _ => {
            world.reject(seq);
            return Evidence::Rejected(QuoteRejection::UntrustedKey);
        }
    };
    match world.verify_quote(a, sub, sid, &msg, &signer, level_challenge(&issued, l3), Some(credential_digest)) {
        Ok(()) => Evidence::Verified(ForwardedQuote {
            quote: msg.quote,
            signer,
        }),
        Err(r) => {
            world.reject(seq);
            Evidence::Rejected(r)
        }
    }
}

fn decode_signer(bytes: &[u8]) -> Option<PresentedKey> {
    let mut r = Reader::new(bytes);
    let k = PresentedKey::decode(&mut r).ok()?;
    r.finish().ok()?;
    Some(k)
}

/// Forward σ_{a′}, the service and whatever evidence a holds to the
/// principal, and return its verdict.
#[allow(clippy::too_many_arguments)]
fn forward(
    world: &mut World,
    upstream: SessionId,
    p: &str,
    a: &str,
    sub: &str,
    sigma: &SubordinationCredential,
    service: &str,
    evidence: &Evidence,
) -> Result<Reason, crate::world::Failure> {
    let forwarded = match evidence {
        Evidence::Verified(q) => Some(q.clone()),
        _ => None,
    };
    let request = AuthRequest::Forward {
        sigma: sigma.clone(),
        service: service.to_string(),
        evidence: forwarded,
    };
    let (seq, request) = world.transfer(a, p, Some(upstream), MessageKind::AuthRequest, request.encode(), AuthRequest::decode)?;
    let (sigma, service, evidence) = match request {
        AuthRequest::Forward { sigma, service, evidence } => (sigma, service, evidence),
        _ => {
            world.reject(seq);
            return Ok(Reason::Policy);
        }
    };

    let own = world.principal(p).expect("principal exists");
    let issuer_ok = sigma.issuer.name == p && sigma.verify(&own.registry.public_key());
    let revoked = world.revocations.contains(&sigma.backing.key_id());
    let ev = match (&sigma.backing, evidence) {
        (
            Backing::Dedicated {
                serial,
                credential_digest,
                aik,
                ..
            },
            Some(q),
        ) => {
            // the principal checks against its own copy of the dedicated γ
            let own_digest = own
                .registry
                .gamma_index
                .get(serial)
                .map(|g| crate::crypto::hash(&g.to_bytes()));
            if own_digest.as_ref() != Some(credential_digest) || q.signer.public.key_id() != *aik {
                Err(Reason::Policy)
            } else {
                world
                    .verify_vouched_quote(p, sub, &q.quote, &q.signer, credential_digest)
                    .map_err(rejection_reason)
            }
        }
        (Backing::Dedicated { .. }, None) => Err(Reason::Policy),
        (Backing::Trust { tpm_key_id }, _) => match evidence {
            _ if own.registry.acl.contains(tpm_key_id) => Ok(()),
            _ => Err(Reason::Policy),
        },
    };
    let reason = judge(&sigma, sub, &service, issuer_ok, revoked, ev);
    let ack = AuthAck {
        step: 0,
        verdict: reason.code(),
        subject_key: Some(sigma.backing.key_id()),
    };
    let (seq, ack) = world.transfer(p, a, Some(upstream), MessageKind::AuthAck, ack.encode(), AuthAck::decode)?;
    match Reason::from_code(ack.verdict) {
        Some(r) => Ok(r),
        None => {
            world.reject(seq);
            Ok(Reason::Policy)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::credentials::EnrolmentMode;

    const CAMERA_SLOT: u32 = 4;

    fn world(phone_domain: &str) -> World {
        let mut w = World::new(31, vec![]);
        w.add_principal("mno").unwrap();
        w.add_principal("rival").unwrap();
        w.add_agent("phone", phone_domain).unwrap();
        w.add_agent("camera", "mno").unwrap();
        w.issue_gamma("phone").unwrap();
        w.enroll_tau("phone", EnrolmentMode::PrincipalControlled).unwrap();
        w.issue_sigma(phone_domain, "phone", SubordinationScope::Dominator, &[], None)
            .unwrap();
        w.issue_sigma("mno", "camera", SubordinationScope::Subordinate, &["photo_upload"], Some(CAMERA_SLOT))
            .unwrap();
        w.publish_reference("phone", "camera").unwrap();
        w.publish_reference("camera", "phone").unwrap();
        w
    }

    fn run(w: &mut World, domain: &str, service: &str, v: SubordinationVariant) -> AccessDecision {
        run_subordination(w, &SubordinationRequest::new(domain, "phone", "camera", service, v))
    }

    #[test]
    fn granted_service_in_both_variants() {
        for v in SubordinationVariant::ALL {
            let mut w = world("mno");
            assert_eq!(run(&mut w, "mno", "photo_upload", v).summary(), "grant/base", "{v}");
        }
    }

    #[test]
    fn forward_variant_transcript_reaches_the_principal() {
        let mut w = world("mno");
        run(&mut w, "mno", "photo_upload", SubordinationVariant::Forward);
        let t = w.fabric.transcript();
        let tail: Vec<_> = t.entries.iter().rev().take(3).map(|e| (e.kind, e.from.as_str(), e.to.as_str())).collect();
        assert_eq!(
            tail,
            vec![
                (MessageKind::ServiceGrant, "phone", "camera"),
                (MessageKind::AuthAck, "mno", "phone"),
                (MessageKind::AuthRequest, "phone", "mno"),
            ]
        );
        assert!(t.kinds().contains(&MessageKind::QuoteL3));
    }

    #[test]
    fn service_outside_sigma_is_policy() {
        for v in SubordinationVariant::ALL {
            let mut w = world("mno");
            assert_eq!(run(&mut w, "mno", "firmware_flash", v).summary(), "deny(policy)");
        }
    }

    #[test]
    fn revoked_backing_key_is_revoked_in_both_variants() {
        for v in SubordinationVariant::ALL {
            let mut w = world("mno");
            let key = w.agent("camera").unwrap().sigma.as_ref().unwrap().backing.key_id();
            w.revoke_key("camera", &key).unwrap();
            for _ in 0..3 {
                assert_eq!(run(&mut w, "mno", "photo_upload", v).summary(), "deny(revoked)", "{v}");
            }
        }
    }

    #[test]
    fn phone_of_another_network_cannot_bond() {
        for v in SubordinationVariant::ALL {
            let mut w = world("rival");
            assert_eq!(run(&mut w, "rival", "photo_upload", v).summary(), "deny(policy)", "{v}");
        }
    }

    #[test]
    fn camera_software_drift_is_integrity_mismatch() {
        let mut w = world("mno");
        w.tamper_platform("camera", "patched-firmware").unwrap();
        let d = run(&mut w, "mno", "photo_upload", SubordinationVariant::LocalGrant);
        assert_eq!(d.summary(), "deny(integrity_mismatch)");
    }

    #[test]
    fn platform_backed_sigma_is_accepted_locally() {
        let mut w = World::new(32, vec![]);
        w.add_principal("mno").unwrap();
        w.add_agent("phone", "mno").unwrap();
        w.add_agent("camera", "mno").unwrap();
        w.issue_gamma("phone").unwrap();
        w.enroll_tau("phone", EnrolmentMode::PrincipalControlled).unwrap();
        w.issue_sigma("mno", "phone", SubordinationScope::Dominator, &[], None).unwrap();
        w.issue_sigma("mno", "camera", SubordinationScope::Subordinate, &["photo_upload"], None)
            .unwrap();
        w.publish_reference("phone", "camera").unwrap();
        w.publish_reference("camera", "phone").unwrap();
        let d = run(&mut w, "mno", "photo_upload", SubordinationVariant::LocalGrant);
        assert_eq!(d.summary(), "grant/base");
    }
}
