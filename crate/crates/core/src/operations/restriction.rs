//! Restriction: a privileged subgroup a′ ⊂ a singled out by trust credentials.
//!
//! γ log-on comes first; τ is only presented inside the authenticated
//! channel. Without τ the agent gets base access.

use std::fmt;
use std::str::FromStr;

use crate::channels::{attest, establish, ChannelError, ChannelSpec, Challenges, Refusal};
use crate::credentials::{EnrolmentMode, GroupSecret, TrustCredential};
use crate::crypto::Nonce;
use crate::fabric::{MessageKind, SessionId};
use crate::tpm::QuoteRejection;
use crate::wire::{Attest, TauPresent};
use crate::world::World;

use super::{announce, AccessDecision, Privilege, Reason};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RestrictionVariant {
    /// Privileged iff τ's key is on the principal's ACL.
    Acl,
    /// Privileged iff the agent proves possession of the subgroup secret.
    SharedSecret,
}

impl RestrictionVariant {
    pub const ALL: [RestrictionVariant; 2] = [RestrictionVariant::Acl, RestrictionVariant::SharedSecret];

    pub fn as_str(self) -> &'static str {
        match self {
            RestrictionVariant::Acl => "acl",
            RestrictionVariant::SharedSecret => "shared_secret",
        }
    }
}

impl fmt::Display for RestrictionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RestrictionVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown restriction variant {s}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestrictionRequest {
    pub principal: String,
    pub agent: String,
    pub variant: RestrictionVariant,
    /// Present the agent's τ, if it holds one.
    pub present_tau: bool,
}

impl RestrictionRequest {
    pub fn new(principal: &str, agent: &str, variant: RestrictionVariant) -> Self {
        RestrictionRequest {
            principal: principal.to_string(),
            agent: agent.to_string(),
            variant,
            present_tau: true,
        }
    }

    pub fn without_tau(mut self) -> Self {
        self.present_tau = false;
        self
    }
}

/// An authenticated session in which the principal has settled on a
/// privilege level but not yet announced it.
#[derive(Debug, Clone)]
pub(crate) struct Admitted {
    pub session: SessionId,
    pub challenges: Challenges,
    pub privilege: Privilege,
    /// Keys the agent attested with, once τ was presented.
    pub keys: Option<Attest>,
}

/// A request that ended before a decision could be announced in-session.
#[derive(Debug, Clone)]
pub(crate) struct Refused {
    pub session: Option<SessionId>,
    pub decision: AccessDecision,
}

pub(crate) fn channel_denial(world: &World, agent: &str, err: &ChannelError) -> AccessDecision {
    let subject = world.agent(agent).map(|a| a.id.clone()).expect("agent exists");
    let reason = match err {
        e if e.is_revocation() => Reason::Revoked,
        ChannelError::Refused {
            reason: Refusal::Quote(QuoteRejection::IntegrityMismatch),
            ..
        } => Reason::IntegrityMismatch,
        _ => Reason::Policy,
    };
    AccessDecision::deny(subject, reason).with_detail(err)
}

/// Group-secret proof challenge, as issued by the principal.
fn group_challenge(base: &Nonce) -> Nonce {
    base.derive(b"group-proof")
}

/// Everything up to (not including) the announcement.
pub(crate) fn evaluate(world: &mut World, req: &RestrictionRequest) -> Result<Admitted, Refused> {
    let (principal, agent) = (req.principal.as_str(), req.agent.as_str());
    let spec = ChannelSpec::new(agent, principal)
        .with_gamma_logon()
        .without_initiator_attestation();
    let (sid, challenges) = establish(world, &spec).map_err(|e| Refused {
        session: world.session_between(agent, principal),
        decision: channel_denial(world, agent, &e),
    })?;
    let subject = world.agent(agent).expect("agent exists").id.clone();
    let deny = |reason| Refused {
        session: Some(sid),
        decision: AccessDecision::deny(subject.clone(), reason),
    };
    let base = Admitted {
        session: sid,
        challenges,
        privilege: Privilege::Base,
        keys: None,
    };

    let holder = world.agent(agent).expect("agent exists");
    let tau = match (&holder.tau, req.present_tau) {
        (Some(t), true) => t.clone(),
        _ => return Ok(base),
    };
    let (issued, received) = challenges.from_responder;
    let group_proof = match (req.variant, holder.group_slot) {
        (RestrictionVariant::SharedSecret, Some(slot)) => holder
            .tpm
            .unseal(slot)
            .ok()
            .and_then(|b| <[u8; 32]>::try_from(b.as_slice()).ok())
            .map(|s| GroupSecret(s).prove(&group_challenge(&received))),
        _ => None,
    };
    let present = TauPresent::Plain { tau, group_proof };
    let (seq, present) = world
        .transfer(agent, principal, Some(sid), MessageKind::TauPresent, present.encode(), TauPresent::decode)
        .map_err(|f| Refused {
            session: Some(sid),
            decision: AccessDecision::deny(subject.clone(), Reason::Policy).with_detail(f),
        })?;
    let (tau, group_proof) = match present {
        TauPresent::Plain { tau, group_proof } => (tau, group_proof),
        TauPresent::Tunneled(_) => {
            world.reject(seq);
            return Err(deny(Reason::Policy));
        }
    };

    let keys = attest(world, sid, agent, principal, received, issued).map_err(|e| Refused {
        session: Some(sid),
        decision: channel_denial(world, agent, &e),
    })?;

    let serial = world.session(sid).and_then(|s| s.gamma_serial).expect("γ log-on succeeded");
    let revoked = world.revocations.contains(&tau.tpm_key_id);
    let maker = world.manufacturer.public();
    let registry = &mut world.principal_mut(principal).expect("principal exists").registry;

    // τ must be one this principal enrolled, and bound to the attesting platform.
    let base = Admitted {
        keys: Some(keys.clone()),
        ..base
    };
    if !tau_known(registry, &tau, &maker) {
        return Ok(base);
    }
    if keys.attestation.public.key_id() != tau.tpm_key_id {
        world.reject(seq);
        return Err(deny(Reason::Policy));
    }
    if revoked {
        return Err(deny(Reason::Revoked));
    }
    match tau.mode {
        EnrolmentMode::PrincipalControlled => match registry.associate(&tau) {
            Some(linked) if linked != serial => return Err(deny(Reason::CloneDetected)),
            Some(_) if !registry.association_ordered(&tau.tpm_key_id) => {
                return Err(deny(Reason::NoAssociation))
            }
            Some(_) => {}
            None => return Err(deny(Reason::NoAssociation)),
        },
        EnrolmentMode::Independent => {
            if !registry.first_come_first_served(serial, &tau.tpm_key_id) {
                return Err(deny(Reason::CloneDetected));
            }
        }
    }
    let privileged = match req.variant {
        RestrictionVariant::Acl => registry.acl.contains(&tau.tpm_key_id),
        RestrictionVariant::SharedSecret => match (&registry.shared_group_secret, group_proof) {
            (Some(secret), Some(proof)) => secret.check(&group_challenge(&issued), &proof),
            _ => false,
        },
    };
    Ok(Admitted {
        privilege: if privileged { Privilege::Privileged } else { Privilege::Base },
        ..base
    })
}

fn tau_known(registry: &crate::credentials::DomainRegistry, tau: &TrustCredential, maker: &crate::crypto::PublicKey) -> bool {
    let issuer = match tau.mode {
        EnrolmentMode::PrincipalControlled => registry.public_key(),
        EnrolmentMode::Independent => *maker,
    };
    tau.verify(&issuer) && registry.trust_credentials.get(&tau.tpm_key_id) == Some(tau)
}

pub fn run_restriction(world: &mut World, req: &RestrictionRequest) -> AccessDecision {
    world.fabric.reset_steps();
    let subject = world.agent(&req.agent).expect("agent exists").id.clone();
    let decision = match evaluate(world, req) {
        Ok(admitted) => announce(
            world,
            Some(admitted.session),
            &req.principal,
            &req.agent,
            AccessDecision::grant(subject, admitted.privilege),
        ),
        Err(refused) => announce(world, refused.session, &req.principal, &req.agent, refused.decision),
    };
    world.drain();
    decision
}
